//! Dataset loaders for the three task formats, deterministic splitting, and
//! the checkpoint format.
//!
//! Loaders reject malformed records rather than repairing them, and carry the
//! 1-based line/record number in the error. A checkpoint is a directory with
//! `manifest.json` (format version, model spec, tensor directory) and
//! `params.bin` (contiguous little-endian f32 data, tensors sorted by name).
//! In-memory tensors are f64; the 32-bit round trip loses at most half an ulp
//! at float32 precision per value.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{BiLstmConfig, EncoderConfig, ParamMap};
use crate::rng::StreamKey;
use crate::tasks::TaggerVariant;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Dataset records
// ---------------------------------------------------------------------------

/// Tokens with per-token BIO tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Word-level relation record: a tokenized sentence, two inclusive token
/// spans, and the directed relation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub tokens: Vec<String>,
    pub head: (usize, usize),
    pub tail: (usize, usize),
    pub label: String,
}

impl RelationRecord {
    /// Span invariants: in-range, ordered, non-overlapping.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let (i, j) = self.head;
        let (k, l) = self.tail;
        if i > j || k > l {
            return Err(Error::Invalid(format!(
                "span start after end: head ({i},{j}), tail ({k},{l})"
            )));
        }
        if j >= n || l >= n {
            return Err(Error::Invalid(format!(
                "span out of range for {n} tokens: head ({i},{j}), tail ({k},{l})"
            )));
        }
        if !(j < k || l < i) {
            return Err(Error::Invalid(format!(
                "spans overlap: head ({i},{j}), tail ({k},{l})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationRecord {
    pub text: String,
    pub label: usize,
}

/// Two-column CoNLL: `token<TAB or space>tag`, blank line between sentences.
/// When `entity_types` is given, every tag's type must belong to it.
pub fn load_conll(path: &Path, entity_types: Option<&[String]>) -> Result<Vec<TaggedSentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sentences.push(TaggedSentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                &origin,
                lineno,
                format!("expected 2 columns, found {}", fields.len()),
            ));
        }
        let tag = fields[1];
        validate_tag(tag, entity_types)
            .map_err(|msg| Error::parse(&origin, lineno, msg))?;
        tokens.push(fields[0].to_string());
        tags.push(tag.to_string());
    }
    if !tokens.is_empty() {
        sentences.push(TaggedSentence { tokens, tags });
    }
    Ok(sentences)
}

fn validate_tag(tag: &str, entity_types: Option<&[String]>) -> std::result::Result<(), String> {
    if tag == "O" {
        return Ok(());
    }
    let Some((kind, ty)) = tag.split_once('-') else {
        return Err(format!("unknown tag `{tag}`"));
    };
    if (kind != "B" && kind != "I") || ty.is_empty() {
        return Err(format!("unknown tag `{tag}`"));
    }
    if let Some(types) = entity_types {
        if !types.iter().any(|t| t == ty) {
            return Err(format!("entity type `{ty}` not in the scheme"));
        }
    }
    Ok(())
}

/// Writes sentences back in the two-column format.
pub fn save_conll(path: &Path, sentences: &[TaggedSentence]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            writeln!(file, "{tok}\t{tag}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(file).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// JSON-lines relation records; span invariants enforced per record.
pub fn load_relations(path: &Path) -> Result<Vec<RelationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RelationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&origin, lineno, e.to_string()))?;
        rec.validate()
            .map_err(|e| Error::parse(&origin, lineno, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

/// JSON-lines `{text, label}` records.
pub fn load_classification(path: &Path) -> Result<Vec<ClassificationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClassificationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&origin, lineno, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Deterministic shuffled partition. Sizes come from cumulative rounding of
/// the ratios, so (0.85, 0.15) on 100 records gives (85, 15) and 3:1:1 on
/// 1500 gives (900, 300, 300). Every record lands in exactly one partition.
pub fn split<T>(records: Vec<T>, ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if ratios.is_empty() {
        return Err(Error::Config("split needs at least one ratio".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("ratios sum to {total}, expected 1")));
    }
    if ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config("ratios must be non-negative".into()));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    crate::pretrain::shuffle(&mut order, &mut StreamKey::root(seed).child("split").rng());

    let mut boundaries = Vec::with_capacity(ratios.len());
    let mut cum = 0.0;
    for r in ratios {
        cum += r;
        boundaries.push((cum * n as f64).round() as usize);
    }
    *boundaries.last_mut().unwrap() = n;

    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(ratios.len());
    let mut start = 0;
    for &end in &boundaries {
        let part: Vec<T> = order[start..end]
            .iter()
            .map(|&i| slots[i].take().expect("each record assigned once"))
            .collect();
        out.push(part);
        start = end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Model identity stored in the manifest; enough to rebuild the right
/// architecture before loading tensors into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlm {
        encoder: EncoderConfig,
        tie_embeddings: bool,
    },
    Tagger {
        encoder: EncoderConfig,
        variant: TaggerVariant,
        entity_types: Vec<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        bilstm: Option<BiLstmConfig>,
    },
    Relation {
        encoder: EncoderConfig,
        labels: Vec<String>,
    },
    Classifier {
        encoder: EncoderConfig,
        num_classes: usize,
    },
}

impl ModelSpec {
    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            ModelSpec::Mlm { encoder, .. }
            | ModelSpec::Tagger { encoder, .. }
            | ModelSpec::Relation { encoder, .. }
            | ModelSpec::Classifier { encoder, .. } => encoder,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelSpec,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` + `params.bin` into `dir`. Tensors are laid out in
/// name order with no gaps; files land via write-temp-then-rename, manifest
/// last, so a torn write never yields a loadable but inconsistent checkpoint.
pub fn save_checkpoint(dir: &Path, spec: &ModelSpec, params: &ParamMap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_offset: blob.len() as u64,
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: spec.clone(),
        tensors: entries,
    };
    write_atomic(&dir.join(PARAMS_FILE), &blob)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint directory. Verifies the tensor directory covers the
/// blob contiguously with no gaps or overlaps; a corrupted blob yields an
/// error and no partial model.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParamMap)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob_path = dir.join(PARAMS_FILE);
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)
        .map_err(|e| Error::io(&blob_path, e))?
        .read_to_end(&mut blob)
        .map_err(|e| Error::io(&blob_path, e))?;

    let mut params = ParamMap::new();
    let mut offset = 0u64;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Invalid(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if !seen.insert(&entry.name) {
            return Err(Error::Invalid(format!("duplicate tensor `{}`", entry.name)));
        }
        if entry.byte_offset != offset {
            return Err(Error::Invalid(format!(
                "tensor `{}` at offset {} leaves a gap or overlap (expected {offset})",
                entry.name, entry.byte_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel as u64 * 4;
        let start = offset as usize;
        let end = start + nbytes as usize;
        if end > blob.len() {
            return Err(Error::Invalid(format!(
                "blob truncated: tensor `{}` needs bytes {start}..{end}, blob has {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        offset += nbytes;
    }
    if offset as usize != blob.len() {
        return Err(Error::Invalid(format!(
            "blob has {} trailing bytes beyond the tensor directory",
            blob.len() - offset as usize
        )));
    }
    Ok((
        CheckpointMeta {
            format_version: manifest.format_version,
            model: manifest.model,
        },
        params,
    ))
}

/// Copies tensors whose names match `target` from `source`, validating
/// shapes; names absent from `source` keep their current (fresh) values.
/// Returns the copied names. The first shape mismatch aborts with an error
/// naming it.
pub fn load_matching(target: &mut ParamMap, source: &ParamMap) -> Result<Vec<String>> {
    // Validate everything first so failure never leaves a half-loaded model.
    for (name, tensor) in target.iter() {
        if let Some(src) = source.get(name) {
            if src.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint shape {:?} does not match model shape {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
        }
    }
    let mut copied = Vec::new();
    for (name, tensor) in target.iter_mut() {
        if let Some(src) = source.get(name) {
            *tensor = src.clone();
            copied.push(name.clone());
        }
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn write(path: &Path, content: &str) {
        std::fs::write(path, content).unwrap();
    }

    #[test]
    fn conll_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.conll");
        write(
            &p,
            "The\tO\nanode\tB-Material\nlayer\tI-Material\n\nYSZ\tB-Material\nworks\tO\n",
        );
        let sents = load_conll(&p, None).unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].tokens.len(), 3);
        assert_eq!(sents[1].tokens.len(), 2);
        assert_eq!(sents[0].tags[1], "B-Material");

        // Empty file loads as an empty list.
        let empty = dir.path().join("empty.conll");
        write(&empty, "");
        assert!(load_conll(&empty, None).unwrap().is_empty());

        // Space-separated columns also work.
        let sp = dir.path().join("space.conll");
        write(&sp, "a O\nb B-X\n");
        assert_eq!(load_conll(&sp, None).unwrap()[0].tokens.len(), 2);
    }

    #[test]
    fn conll_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.conll");
        write(&p, "ok\tO\nbroken\n");
        match load_conll(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let p2 = dir.path().join("badtag.conll");
        write(&p2, "tok\tQ-MAT\n");
        assert!(load_conll(&p2, None).is_err());

        // Scheme validation rejects off-scheme types.
        let p3 = dir.path().join("scheme.conll");
        write(&p3, "tok\tB-Material\nother\tB-Bogus\n");
        let scheme = vec!["Material".to_string()];
        match load_conll(&p3, Some(&scheme)) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("Bogus"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn relation_loading_and_span_constraints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rel.jsonl");
        write(
            &p,
            r#"{"tokens":["add","the","salt","to","water"],"head":[1,2],"tail":[4,4],"label":"Recipe_target"}
"#,
        );
        let recs = load_relations(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].head, (1, 2));

        // Overlapping spans rejected with the record number.
        let bad = dir.path().join("bad.jsonl");
        write(
            &bad,
            r#"{"tokens":["a","b","c","d","e","f"],"head":[2,4],"tail":[3,5],"label":"x"}
"#,
        );
        match load_relations(&bad) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("overlap"));
            }
            other => panic!("expected overlap error, got {other:?}"),
        }

        // Out-of-range span rejected.
        let oor = dir.path().join("oor.jsonl");
        write(&oor, r#"{"tokens":["a","b"],"head":[0,0],"tail":[1,5],"label":"x"}"#);
        assert!(load_relations(&oor).is_err());
    }

    #[test]
    fn classification_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cls.jsonl");
        write(
            &p,
            "{\"text\":\"bioactive glasses are studied\",\"label\":1}\n{\"text\":\"steel alloys\",\"label\":0}\n",
        );
        let recs = load_classification(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label, 1);

        let bad = dir.path().join("missing.jsonl");
        write(&bad, "{\"text\":\"no label here\"}\n");
        assert!(load_classification(&bad).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let records: Vec<usize> = (0..100).collect();
        let parts = split(records, &[0.85, 0.15], 7).unwrap();
        assert_eq!(parts[0].len(), 85);
        assert_eq!(parts[1].len(), 15);

        let records: Vec<usize> = (0..1500).collect();
        let parts = split(records, &[0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![900, 300, 300]);

        // Partition: disjoint union equals the input.
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1500).collect::<Vec<_>>());

        // Same seed, same partitions; different seed, different shuffle.
        let a = split((0..50).collect::<Vec<_>>(), &[0.5, 0.5], 3).unwrap();
        let b = split((0..50).collect::<Vec<_>>(), &[0.5, 0.5], 3).unwrap();
        assert_eq!(a, b);
        let c = split((0..50).collect::<Vec<_>>(), &[0.5, 0.5], 4).unwrap();
        assert_ne!(a, c);

        assert!(split(vec![1, 2], &[0.5, 0.4], 1).is_err());
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec::Mlm {
            encoder: EncoderConfig::tiny(64),
            tie_embeddings: false,
        }
    }

    #[test]
    fn checkpoint_round_trip_within_f32_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut params = ParamMap::new();
        params.insert(
            "a.weight".into(),
            Tensor::vector(vec![0.1234567890123, -3.9e-7, 1234.5678]),
        );
        params.insert("b.bias".into(), Tensor::vector(vec![0.0, -1.0]));
        save_checkpoint(&ckpt, &toy_spec(), &params).unwrap();
        let (meta, loaded) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(meta.format_version, CHECKPOINT_FORMAT_VERSION);
        assert_eq!(loaded.len(), 2);
        for (name, t) in &params {
            for (orig, got) in t.data().iter().zip(loaded[name].data()) {
                // Half-ulp of f32 at this magnitude.
                let tol = (orig.abs() * (f32::EPSILON as f64) / 2.0).max(1e-45);
                assert!(
                    (orig - got).abs() <= tol,
                    "{name}: {orig} vs {got} differs beyond f32 round-trip"
                );
            }
        }
    }

    #[test]
    fn checkpoint_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamMap::new();
        params.insert("z.weight".into(), Tensor::vector(vec![1.0, 2.0]));
        params.insert("a.weight".into(), Tensor::vector(vec![3.0]));
        let (c1, c2) = (dir.path().join("c1"), dir.path().join("c2"));
        save_checkpoint(&c1, &toy_spec(), &params).unwrap();
        save_checkpoint(&c2, &toy_spec(), &params).unwrap();
        let a = std::fs::read(c1.join(MANIFEST_FILE)).unwrap();
        let b = std::fs::read(c2.join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(c1.join(PARAMS_FILE)).unwrap();
        let b = std::fs::read(c2.join(PARAMS_FILE)).unwrap();
        assert_eq!(a, b);
        // Name-sorted layout: `a.weight` precedes `z.weight`.
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(c1.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.tensors[0].name, "a.weight");
        assert_eq!(manifest.tensors[0].byte_offset, 0);
        assert_eq!(manifest.tensors[1].byte_offset, 4);
    }

    #[test]
    fn corrupted_blob_is_rejected_whole() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut params = ParamMap::new();
        params.insert("a.weight".into(), Tensor::vector(vec![1.0, 2.0, 3.0]));
        save_checkpoint(&ckpt, &toy_spec(), &params).unwrap();
        // Truncate the blob.
        let blob_path = ckpt.join(PARAMS_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        assert!(load_checkpoint(&ckpt).is_err());
        // Extra trailing bytes are also rejected.
        let mut extended = blob.clone();
        extended.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&blob_path, &extended).unwrap();
        assert!(load_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn partial_load_copies_matching_and_validates_shapes() {
        let mut target = ParamMap::new();
        target.insert("embeddings.token".into(), Tensor::zeros(&[4, 2]));
        target.insert("head.weight".into(), Tensor::zeros(&[2, 3]));
        let mut source = ParamMap::new();
        source.insert(
            "embeddings.token".into(),
            Tensor::matrix(4, 2, (0..8).map(|i| i as f64).collect()).unwrap(),
        );
        source.insert("mlm.decoder.bias".into(), Tensor::vector(vec![1.0]));
        let copied = load_matching(&mut target, &source).unwrap();
        assert_eq!(copied, vec!["embeddings.token".to_string()]);
        assert_eq!(target["embeddings.token"].data()[3], 3.0);
        assert!(target["head.weight"].data().iter().all(|&v| v == 0.0));

        // Shape mismatch names the tensor and copies nothing.
        let mut target2 = ParamMap::new();
        target2.insert("embeddings.token".into(), Tensor::zeros(&[3, 2]));
        let err = load_matching(&mut target2, &source).unwrap_err();
        assert!(err.to_string().contains("embeddings.token"));
        assert!(target2["embeddings.token"].data().iter().all(|&v| v == 0.0));
    }
}
