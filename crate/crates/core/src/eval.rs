//! BIO decoding and entity-level exact-match evaluation, plus the multiclass
//! and binary F1 used by the relation and text-classification tasks.
//!
//! Span extraction follows the conlleval convention: `B-X` opens an entity,
//! `I-X` continues a same-type entity, and an `I-X` after O, a sentence
//! boundary, or a different type opens a new entity (the repair rule). A
//! strict mode that rejects such sequences instead is available.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One labeled entity: type plus inclusive token indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

/// Per-type precision/recall/F1 plus micro and macro aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F1Report {
    pub per_type: BTreeMap<String, TypeScores>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn prf(tp: usize, fp: usize, fneg: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fneg == 0 {
        0.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Decodes a BIO tag sequence into entity spans. Total in repair mode: any
/// tag sequence yields a valid, sorted, non-overlapping span set. In strict
/// mode an `I-X` without a matching open entity is an error.
pub fn decode_bio(tags: &[impl AsRef<str>], strict: bool) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == "O" {
            if let Some((ty, start)) = open.take() {
                spans.push(EntitySpan {
                    entity_type: ty,
                    start,
                    end: i - 1,
                });
            }
            continue;
        }
        let (kind, ty) = tag
            .split_once('-')
            .filter(|(k, t)| (*k == "B" || *k == "I") && !t.is_empty())
            .ok_or_else(|| Error::Invalid(format!("unknown tag `{tag}` at token {i}")))?;
        let continues = kind == "I" && matches!(&open, Some((t, _)) if t == ty);
        if continues {
            continue;
        }
        if kind == "I" && strict {
            return Err(Error::Invalid(format!(
                "strict mode: I-{ty} at token {i} does not continue an open {ty} entity"
            )));
        }
        // B-X, or repaired I-X: close the open entity and start a new one.
        if let Some((t, start)) = open.take() {
            spans.push(EntitySpan {
                entity_type: t,
                start,
                end: i - 1,
            });
        }
        open = Some((ty.to_string(), i));
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan {
            entity_type: ty,
            start,
            end: tags.len() - 1,
        });
    }
    Ok(spans)
}

/// Entity-level exact-match F1 over per-sentence tag sequences. A predicted
/// span counts only when type, start, and end all match a gold span.
/// `macro_types`, when given, fixes the macro-average type set (types with
/// zero support score 0); otherwise the macro runs over types appearing in
/// gold or prediction.
pub fn entity_f1(
    gold: &[Vec<String>],
    pred: &[Vec<String>],
    macro_types: Option<&[String]>,
) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fneg: BTreeMap<String, usize> = BTreeMap::new();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    for (si, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Invalid(format!(
                "sentence {si}: gold has {} tokens, prediction has {}",
                g.len(),
                p.len()
            )));
        }
        let gset: BTreeSet<EntitySpan> = decode_bio(g, false)?.into_iter().collect();
        let pset: BTreeSet<EntitySpan> = decode_bio(p, false)?.into_iter().collect();
        for span in &gset {
            *support.entry(span.entity_type.clone()).or_insert(0) += 1;
            if pset.contains(span) {
                *tp.entry(span.entity_type.clone()).or_insert(0) += 1;
            } else {
                *fneg.entry(span.entity_type.clone()).or_insert(0) += 1;
            }
        }
        for span in &pset {
            if !gset.contains(span) {
                *fp.entry(span.entity_type.clone()).or_insert(0) += 1;
            }
        }
    }

    let observed: BTreeSet<String> = tp
        .keys()
        .chain(fp.keys())
        .chain(fneg.keys())
        .cloned()
        .collect();
    let macro_set: Vec<String> = match macro_types {
        Some(types) => types.to_vec(),
        None => observed.iter().cloned().collect(),
    };

    let mut per_type = BTreeMap::new();
    for ty in observed.iter().chain(macro_set.iter()) {
        if per_type.contains_key(ty) {
            continue;
        }
        let (p, r, f1) = prf(
            tp.get(ty).copied().unwrap_or(0),
            fp.get(ty).copied().unwrap_or(0),
            fneg.get(ty).copied().unwrap_or(0),
        );
        per_type.insert(
            ty.clone(),
            TypeScores {
                precision: p,
                recall: r,
                f1,
                support: support.get(ty).copied().unwrap_or(0),
            },
        );
    }

    let tp_sum: usize = tp.values().sum();
    let fp_sum: usize = fp.values().sum();
    let fn_sum: usize = fneg.values().sum();
    let (micro_p, micro_r, micro_f1) = prf(tp_sum, fp_sum, fn_sum);
    let macro_f1 = if macro_set.is_empty() {
        0.0
    } else {
        macro_set.iter().map(|ty| per_type[ty].f1).sum::<f64>() / macro_set.len() as f64
    };
    Ok(F1Report {
        per_type,
        micro_precision: micro_p,
        micro_recall: micro_r,
        micro_f1,
        macro_f1,
    })
}

/// F1 of the positive class over 0/1 labels; zero-division scores 0.
pub fn binary_f1(gold: &[u8], pred: &[u8]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid("binary_f1 length mismatch".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&g, &p) in gold.iter().zip(pred) {
        match (g, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fneg += 1,
            _ => {}
        }
    }
    Ok(prf(tp, fp, fneg).2)
}

/// One-vs-rest F1 per class over single-label predictions; micro equals
/// accuracy, macro is the unweighted mean over classes in gold or prediction.
pub fn multiclass_f1(gold: &[String], pred: &[String]) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid("multiclass_f1 length mismatch".into()));
    }
    let classes: BTreeSet<&String> = gold.iter().chain(pred).collect();
    let mut per_type = BTreeMap::new();
    let mut correct = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
        }
    }
    for class in &classes {
        let (mut tp, mut fp, mut fneg, mut sup) = (0usize, 0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(pred) {
            let g_is = &g == class;
            let p_is = &p == class;
            if g_is {
                sup += 1;
            }
            match (g_is, p_is) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let (p, r, f1) = prf(tp, fp, fneg);
        per_type.insert(
            (*class).clone(),
            TypeScores {
                precision: p,
                recall: r,
                f1,
                support: sup,
            },
        );
    }
    let acc = if gold.is_empty() {
        0.0
    } else {
        correct as f64 / gold.len() as f64
    };
    let macro_f1 = if per_type.is_empty() {
        0.0
    } else {
        per_type.values().map(|s| s.f1).sum::<f64>() / per_type.len() as f64
    };
    Ok(F1Report {
        per_type,
        micro_precision: acc,
        micro_recall: acc,
        micro_f1: acc,
        macro_f1,
    })
}

/// Aligned text rendering of a report, conlleval style.
pub fn render_report(report: &F1Report) -> String {
    let mut out = String::new();
    let width = report
        .per_type
        .keys()
        .map(|k| k.len())
        .chain(["type".len()])
        .max()
        .unwrap_or(4)
        .max(5);
    out.push_str(&format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n",
        "type", "precision", "recall", "f1", "support"
    ));
    for (ty, s) in &report.per_type {
        out.push_str(&format!(
            "{ty:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
            s.precision, s.recall, s.f1, s.support
        ));
    }
    out.push_str(&format!(
        "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}\n",
        "micro", report.micro_precision, report.micro_recall, report.micro_f1
    ));
    out.push_str(&format!("{:<width$}  {:>31.4}\n", "macro-f1", report.macro_f1));
    out
}
