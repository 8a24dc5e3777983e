//! Downstream architectures and their fine-tuning loop: token tagging
//! (linear, CRF, and BiLSTM-CRF heads over the encoder), entity-marker
//! relation classification, and CLS-embedding text classification.
//!
//! Supervision lands on the first WordPiece of every whitespace token: the
//! tagging heads score a first-piece lattice, so there is exactly one
//! supervised position per token. Fine-tuning runs two parameter groups --
//! the pretrained encoder and the freshly initialized heads -- with distinct
//! peak learning rates under a shared linear warmup/decay schedule, and no
//! weight is frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfParams, CrfVars};
use crate::data::{ClassificationRecord, RelationRecord, TaggedSentence};
use crate::encoder::{
    affine, bilstm, bilstm_shapes, encode, encoder_shapes, init_params, BiLstmConfig, Bindings,
    EncoderConfig, Mode, ParamMap,
};
use crate::pretrain::{accumulate_grads, adamw_step, lr_at, scale_grads, shuffle, AdamState,
    OptimizerConfig};
use crate::rng::StreamKey;
use crate::tensor::{softmax, Reduction, Tape, VarId};
use crate::wordpiece::{
    tokenize_word, TokenizedSequence, Vocabulary, CLS, DEFAULT_MAX_WORD_CHARS, E1_CLOSE, E1_OPEN,
    E2_CLOSE, E2_OPEN, SEP, UNK,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Label scheme
// ---------------------------------------------------------------------------

/// Entity types with the derived BIO tag list
/// `[B-e1, I-e1, ..., B-ek, I-ek, O]` (O last).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelScheme {
    entity_types: Vec<String>,
    tags: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelScheme {
    pub fn new(entity_types: Vec<String>) -> Result<Self> {
        if entity_types.is_empty() {
            return Err(Error::Invalid("label scheme needs at least one entity type".into()));
        }
        let mut tags = Vec::with_capacity(2 * entity_types.len() + 1);
        for ty in &entity_types {
            if ty.is_empty() || ty == "O" {
                return Err(Error::Invalid(format!("bad entity type `{ty}`")));
            }
            tags.push(format!("B-{ty}"));
            tags.push(format!("I-{ty}"));
        }
        tags.push("O".to_string());
        let index: BTreeMap<String, usize> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tags.len() {
            return Err(Error::Invalid("duplicate entity type".into()));
        }
        Ok(LabelScheme {
            entity_types,
            tags,
            index,
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn outside_index(&self) -> usize {
        self.tags.len() - 1
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("tag `{tag}` not in scheme")))
    }

    pub fn tag_name(&self, index: usize) -> Result<&str> {
        self.tags
            .get(index)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Invalid(format!("tag index {index} out of range")))
    }
}

// ---------------------------------------------------------------------------
// Shared input construction
// ---------------------------------------------------------------------------

/// `[CLS] + pieces + [SEP]` for a pre-tokenized sentence, returning the
/// position of the first piece of every token.
pub fn sentence_inputs(
    tokens: &[String],
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<(TokenizedSequence, Vec<usize>)> {
    let mut seq = TokenizedSequence::empty();
    seq.push(CLS, None, true);
    let mut first_positions = Vec::with_capacity(tokens.len());
    for (wi, token) in tokens.iter().enumerate() {
        let ids =
            tokenize_word(token, vocab, DEFAULT_MAX_WORD_CHARS).unwrap_or_else(|| vec![UNK]);
        first_positions.push(seq.len());
        for id in ids {
            seq.push(id, Some(wi as u32), true);
        }
    }
    seq.push(SEP, None, true);
    if seq.len() > max_positions {
        return Err(Error::Invalid(format!(
            "sentence needs {} pieces, exceeding max_positions {max_positions}",
            seq.len()
        )));
    }
    Ok((seq, first_positions))
}

// ---------------------------------------------------------------------------
// Taggers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerVariant {
    Linear,
    Crf,
    BilstmCrf,
}

impl TaggerVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TaggerVariant::Linear),
            "crf" => Ok(TaggerVariant::Crf),
            "bilstm_crf" => Ok(TaggerVariant::BilstmCrf),
            other => Err(Error::Invalid(format!(
                "unknown tagger variant `{other}` (expected linear|crf|bilstm_crf)"
            ))),
        }
    }

    pub fn uses_crf(&self) -> bool {
        !matches!(self, TaggerVariant::Linear)
    }
}

/// Encoder plus one of the three tagging heads.
#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub encoder_cfg: EncoderConfig,
    pub variant: TaggerVariant,
    pub scheme: LabelScheme,
    pub bilstm_cfg: Option<BiLstmConfig>,
    pub params: ParamMap,
}

impl TaggerModel {
    /// Head shapes: a `[feat, |L|]` emission affine, CRF scores for the CRF
    /// variants, and the stacked BiLSTM for `bilstm_crf` (emission input is
    /// then the 2H concat).
    pub fn build(
        variant: TaggerVariant,
        encoder_cfg: EncoderConfig,
        scheme: LabelScheme,
        bilstm_cfg: Option<BiLstmConfig>,
        seed: u64,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        let num_tags = scheme.num_tags();
        let mut shapes = encoder_shapes(&encoder_cfg);
        let bilstm_cfg = match variant {
            TaggerVariant::BilstmCrf => {
                let cfg = bilstm_cfg.unwrap_or_else(BiLstmConfig::preset);
                cfg.validate()?;
                shapes.extend(bilstm_shapes(encoder_cfg.hidden_dim, &cfg));
                shapes.push(("head.weight".into(), vec![cfg.output_dim(), num_tags]));
                shapes.push(("head.bias".into(), vec![num_tags]));
                Some(cfg)
            }
            _ => {
                if bilstm_cfg.is_some() {
                    return Err(Error::Config(
                        "bilstm config only applies to the bilstm_crf variant".into(),
                    ));
                }
                shapes.push(("head.weight".into(), vec![encoder_cfg.hidden_dim, num_tags]));
                shapes.push(("head.bias".into(), vec![num_tags]));
                None
            }
        };
        if variant.uses_crf() {
            shapes.push(("crf.transitions".into(), vec![num_tags, num_tags]));
            shapes.push(("crf.start".into(), vec![num_tags]));
            shapes.push(("crf.end".into(), vec![num_tags]));
        }
        let params = init_params(&shapes, StreamKey::root(seed).child("init"));
        Ok(TaggerModel {
            encoder_cfg,
            variant,
            scheme,
            bilstm_cfg,
            params,
        })
    }

    pub fn with_params(&self, params: ParamMap) -> Self {
        TaggerModel {
            params,
            ..self.clone()
        }
    }

    /// Per-token emission scores `[T, |L|]` over the first-piece lattice.
    fn emissions(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        tokens: &[String],
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<VarId> {
        let (seq, first) = sentence_inputs(tokens, vocab, self.encoder_cfg.max_positions)?;
        let enc = encode(tape, binds, &self.encoder_cfg, &seq, mode)?;
        let feats = match (&self.variant, &self.bilstm_cfg) {
            (TaggerVariant::BilstmCrf, Some(cfg)) => {
                // All pieces flow through the BiLSTM; the lattice then keeps
                // first pieces only.
                let lstm_out = bilstm(tape, binds, cfg, enc, mode)?;
                tape.gather_rows(lstm_out, &first)?
            }
            _ => tape.gather_rows(enc, &first)?,
        };
        affine(tape, binds, feats, "head")
    }

    fn crf_vars(&self, binds: &Bindings) -> Result<CrfVars> {
        Ok(CrfVars {
            transitions: binds.get("crf.transitions")?,
            start: binds.get("crf.start")?,
            end: binds.get("crf.end")?,
        })
    }

    fn crf_params(&self) -> CrfParams {
        CrfParams {
            transitions: self.params["crf.transitions"].clone(),
            start: self.params["crf.start"].clone(),
            end: self.params["crf.end"].clone(),
        }
    }

    /// Training loss for one sentence: summed cross-entropy over tokens for
    /// the linear head (weight = token count), CRF negative log-likelihood
    /// for the CRF heads (weight = 1 sentence).
    pub fn loss(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        sentence: &TaggedSentence,
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<(VarId, usize)> {
        if sentence.tokens.is_empty() {
            return Err(Error::Invalid("cannot train on an empty sentence".into()));
        }
        let labels: Vec<usize> = sentence
            .tags
            .iter()
            .map(|t| self.scheme.tag_index(t))
            .collect::<Result<_>>()?;
        let emissions = self.emissions(tape, binds, &sentence.tokens, vocab, mode)?;
        match self.variant {
            TaggerVariant::Linear => {
                let targets: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
                let loss = tape.cross_entropy_rows(emissions, &targets, -1, Reduction::Sum)?;
                Ok((loss, labels.len()))
            }
            TaggerVariant::Crf | TaggerVariant::BilstmCrf => {
                let vars = self.crf_vars(binds)?;
                let loss = crf::nll_var(tape, emissions, &labels, vars)?;
                Ok((loss, 1))
            }
        }
    }

    /// Per-token tag indices; argmax for the linear head (lowest index on
    /// ties), Viterbi decode for the CRF heads. Output length equals the
    /// token count; an empty sentence yields an empty output.
    pub fn tag(&self, tokens: &[String], vocab: &Vocabulary) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &self.params, false);
        let emissions = self.emissions(&mut tape, &binds, tokens, vocab, &mut Mode::Eval)?;
        let scores = tape.value(emissions);
        match self.variant {
            TaggerVariant::Linear => Ok((0..scores.rows())
                .map(|i| {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for j in 0..scores.cols() {
                        if scores.at2(i, j) > best {
                            best = scores.at2(i, j);
                            arg = j;
                        }
                    }
                    arg
                })
                .collect()),
            TaggerVariant::Crf | TaggerVariant::BilstmCrf => {
                let (labels, _) = crf::viterbi(scores, &self.crf_params())?;
                Ok(labels)
            }
        }
    }

    /// Tag names instead of indices.
    pub fn tag_names(&self, tokens: &[String], vocab: &Vocabulary) -> Result<Vec<String>> {
        self.tag(tokens, vocab)?
            .into_iter()
            .map(|i| self.scheme.tag_name(i).map(str::to_string))
            .collect()
    }

    /// Entity-level F1 of this model over a tagged dataset.
    pub fn validation_report(
        &self,
        data: &[TaggedSentence],
        vocab: &Vocabulary,
        macro_types: Option<&[String]>,
    ) -> Result<crate::eval::F1Report> {
        let gold: Vec<Vec<String>> = data.iter().map(|s| s.tags.clone()).collect();
        let mut pred = Vec::with_capacity(data.len());
        for s in data {
            pred.push(self.tag_names(&s.tokens, vocab)?);
        }
        crate::eval::entity_f1(&gold, &pred, macro_types)
    }
}

// ---------------------------------------------------------------------------
// Entity markers and relation classification
// ---------------------------------------------------------------------------

/// Wraps two non-overlapping piece-level spans with [E1]/[/E1] and
/// [E2]/[/E2]. The later span is inserted first so indices never invalidate
/// each other. Returns the new sequence plus the positions of the two
/// opening markers; output length is input + 4.
pub fn insert_markers(
    seq: &TokenizedSequence,
    span1: (usize, usize),
    span2: (usize, usize),
) -> Result<(TokenizedSequence, usize, usize)> {
    let n = seq.len();
    let ((i, j), (k, l)) = (span1, span2);
    if i > j || k > l {
        return Err(Error::Invalid(format!(
            "span start after end: ({i},{j}) / ({k},{l})"
        )));
    }
    if j >= n || l >= n {
        return Err(Error::Invalid(format!(
            "span out of range for {n} pieces: ({i},{j}) / ({k},{l})"
        )));
    }
    if !(j < k || l < i) {
        return Err(Error::Invalid(format!(
            "spans overlap: ({i},{j}) / ({k},{l})"
        )));
    }
    // Insertion program: (position, marker, span1?) applied later-first.
    let mut out = seq.clone();
    let inserts = if j < k {
        [(k, E2_OPEN), (l + 1, E2_CLOSE), (i, E1_OPEN), (j + 1, E1_CLOSE)]
    } else {
        [(i, E1_OPEN), (j + 1, E1_CLOSE), (k, E2_OPEN), (l + 1, E2_CLOSE)]
    };
    // Apply close-after-open per span, later span first; inserting the close
    // marker before the open one keeps positions stable within a span.
    let ordered = [inserts[1], inserts[0], inserts[3], inserts[2]];
    for (pos, id) in ordered {
        out.piece_ids.insert(pos, id);
        out.word_ids.insert(pos, None);
        out.attention_mask.insert(pos, 1);
    }
    let e1 = if j < k { i } else { i + 2 };
    let e2 = if j < k { k + 2 } else { k };
    debug_assert_eq!(out.piece_ids[e1], E1_OPEN);
    debug_assert_eq!(out.piece_ids[e2], E2_OPEN);
    Ok((out, e1, e2))
}

/// Removes the four marker pieces, recovering the pre-insertion sequence.
pub fn strip_markers(seq: &TokenizedSequence) -> TokenizedSequence {
    let mut out = TokenizedSequence::empty();
    for (pos, &id) in seq.piece_ids.iter().enumerate() {
        if matches!(id, E1_OPEN | E1_CLOSE | E2_OPEN | E2_CLOSE) {
            continue;
        }
        out.push(id, seq.word_ids[pos], seq.attention_mask[pos] == 1);
    }
    out
}

/// Encoder with the entity-marker relation head: the contextual embeddings of
/// the two opening markers, concatenated, feed an affine + softmax over the
/// relation labels.
#[derive(Debug, Clone)]
pub struct RelationModel {
    pub encoder_cfg: EncoderConfig,
    pub labels: Vec<String>,
    pub params: ParamMap,
}

impl RelationModel {
    pub fn build(encoder_cfg: EncoderConfig, labels: Vec<String>, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        if labels.is_empty() {
            return Err(Error::Invalid("relation label set is empty".into()));
        }
        let mut shapes = encoder_shapes(&encoder_cfg);
        shapes.push((
            "rc.weight".into(),
            vec![2 * encoder_cfg.hidden_dim, labels.len()],
        ));
        shapes.push(("rc.bias".into(), vec![labels.len()]));
        let params = init_params(&shapes, StreamKey::root(seed).child("init"));
        Ok(RelationModel {
            encoder_cfg,
            labels,
            params,
        })
    }

    pub fn with_params(&self, params: ParamMap) -> Self {
        RelationModel {
            params,
            ..self.clone()
        }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Invalid(format!("relation label `{label}` not in the scheme")))
    }

    /// Piece-tokenizes the record, converts word spans to piece spans,
    /// inserts markers, and frames with [CLS]/[SEP].
    pub fn marked_sequence(
        &self,
        record: &RelationRecord,
        vocab: &Vocabulary,
    ) -> Result<(TokenizedSequence, usize, usize)> {
        record.validate()?;
        let mut seq = TokenizedSequence::empty();
        let mut word_bounds = Vec::with_capacity(record.tokens.len());
        for (wi, token) in record.tokens.iter().enumerate() {
            let ids =
                tokenize_word(token, vocab, DEFAULT_MAX_WORD_CHARS).unwrap_or_else(|| vec![UNK]);
            let start = seq.len();
            for id in ids {
                seq.push(id, Some(wi as u32), true);
            }
            word_bounds.push((start, seq.len() - 1));
        }
        let to_pieces =
            |(a, b): (usize, usize)| -> (usize, usize) { (word_bounds[a].0, word_bounds[b].1) };
        let (marked, e1, e2) =
            insert_markers(&seq, to_pieces(record.head), to_pieces(record.tail))?;
        let mut framed = TokenizedSequence::empty();
        framed.push(CLS, None, true);
        for (pos, &id) in marked.piece_ids.iter().enumerate() {
            framed.push(id, marked.word_ids[pos], true);
        }
        framed.push(SEP, None, true);
        if framed.len() > self.encoder_cfg.max_positions {
            return Err(Error::Invalid(format!(
                "marked sequence needs {} pieces, exceeding max_positions {}",
                framed.len(),
                self.encoder_cfg.max_positions
            )));
        }
        Ok((framed, e1 + 1, e2 + 1))
    }

    fn logits(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        record: &RelationRecord,
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<VarId> {
        let (seq, e1, e2) = self.marked_sequence(record, vocab)?;
        let enc = encode(tape, binds, &self.encoder_cfg, &seq, mode)?;
        let picked = tape.gather_rows(enc, &[e1, e2])?;
        let pair = tape.reshape(picked, vec![1, 2 * self.encoder_cfg.hidden_dim])?;
        affine(tape, binds, pair, "rc")
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        record: &RelationRecord,
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<(VarId, usize)> {
        let target = self.label_index(&record.label)? as i64;
        let logits = self.logits(tape, binds, record, vocab, mode)?;
        let loss = tape.cross_entropy_rows(logits, &[target], -1, Reduction::Sum)?;
        Ok((loss, 1))
    }

    /// Predicted label with the full probability vector.
    pub fn classify(
        &self,
        record: &RelationRecord,
        vocab: &Vocabulary,
    ) -> Result<(String, Vec<f64>)> {
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &self.params, false);
        let logits = self.logits(&mut tape, &binds, record, vocab, &mut Mode::Eval)?;
        let probs = softmax(tape.value(logits), 1)?;
        let mut best = 0;
        for j in 1..probs.cols() {
            if probs.at2(0, j) > probs.at2(0, best) {
                best = j;
            }
        }
        Ok((self.labels[best].clone(), probs.data().to_vec()))
    }
}

// ---------------------------------------------------------------------------
// Text classification
// ---------------------------------------------------------------------------

/// Encoder with an affine + softmax over the [CLS] embedding.
#[derive(Debug, Clone)]
pub struct TextClsModel {
    pub encoder_cfg: EncoderConfig,
    pub num_classes: usize,
    pub params: ParamMap,
}

impl TextClsModel {
    pub fn build(encoder_cfg: EncoderConfig, num_classes: usize, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Invalid("classifier needs at least 2 classes".into()));
        }
        let mut shapes = encoder_shapes(&encoder_cfg);
        shapes.push(("cls.weight".into(), vec![encoder_cfg.hidden_dim, num_classes]));
        shapes.push(("cls.bias".into(), vec![num_classes]));
        let params = init_params(&shapes, StreamKey::root(seed).child("init"));
        Ok(TextClsModel {
            encoder_cfg,
            num_classes,
            params,
        })
    }

    pub fn with_params(&self, params: ParamMap) -> Self {
        TextClsModel {
            params,
            ..self.clone()
        }
    }

    /// `[CLS] + pieces + [SEP]`, truncating over-length text (never
    /// rejecting it) to `max_positions - 2` pieces.
    pub fn input_sequence(&self, text: &str, vocab: &Vocabulary) -> Result<TokenizedSequence> {
        if text.trim().is_empty() {
            return Err(Error::Invalid("cannot classify empty text".into()));
        }
        let pieces = crate::wordpiece::tokenize(text, vocab, DEFAULT_MAX_WORD_CHARS);
        let budget = self.encoder_cfg.max_positions - 2;
        let mut seq = TokenizedSequence::empty();
        seq.push(CLS, None, true);
        for pos in 0..pieces.len().min(budget) {
            seq.push(pieces.piece_ids[pos], pieces.word_ids[pos], true);
        }
        seq.push(SEP, None, true);
        Ok(seq)
    }

    fn logits(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        text: &str,
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<VarId> {
        let seq = self.input_sequence(text, vocab)?;
        let enc = encode(tape, binds, &self.encoder_cfg, &seq, mode)?;
        let cls = tape.gather_rows(enc, &[0])?;
        affine(tape, binds, cls, "cls")
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        record: &ClassificationRecord,
        vocab: &Vocabulary,
        mode: &mut Mode,
    ) -> Result<(VarId, usize)> {
        if record.label >= self.num_classes {
            return Err(Error::Invalid(format!(
                "label {} out of range for {} classes",
                record.label, self.num_classes
            )));
        }
        let logits = self.logits(tape, binds, &record.text, vocab, mode)?;
        let loss = tape.cross_entropy_rows(logits, &[record.label as i64], -1, Reduction::Sum)?;
        Ok((loss, 1))
    }

    pub fn classify(&self, text: &str, vocab: &Vocabulary) -> Result<(usize, Vec<f64>)> {
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &self.params, false);
        let logits = self.logits(&mut tape, &binds, text, vocab, &mut Mode::Eval)?;
        let probs = softmax(tape.value(logits), 1)?;
        let mut best = 0;
        for j in 1..probs.cols() {
            if probs.at2(0, j) > probs.at2(0, best) {
                best = j;
            }
        }
        Ok((best, probs.data().to_vec()))
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Peak rate of the freshly initialized non-encoder parameters.
    pub head_lr: f64,
    /// Peak rate of the pretrained encoder parameters.
    pub encoder_lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            head_lr: 3e-4,
            encoder_lr: 3e-5,
            batch_size: 16,
            warmup_ratio: 0.1,
            epochs: 15,
            weight_decay: 1e-2,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_lr < 0.0 || self.encoder_lr < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// The published encoder-rate grid.
pub const ENCODER_LR_GRID: [f64; 3] = [2e-5, 3e-5, 5e-5];

/// Encoder tensors are the pretrained group; everything else (heads, CRF,
/// BiLSTM, markers live in the embedding table) is the head group.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("layer.")
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub validation_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LrPoint {
    pub step: u64,
    pub encoder_lr: f64,
    pub head_lr: f64,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    /// Parameters of the best-validation epoch.
    pub params: ParamMap,
    pub metrics: Vec<EpochMetric>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub lr_trace: Vec<LrPoint>,
}

/// Generic fine-tuning driver. `loss_fn` builds one example's loss (plus its
/// weight in the mean); `eval_fn` scores a candidate parameter set on
/// validation data. Deterministic given seed; zero epochs return the initial
/// parameters untouched.
fn finetune_loop<T>(
    init: &ParamMap,
    dropout_rate: f64,
    train: &[T],
    cfg: &FinetuneConfig,
    seed: u64,
    loss_fn: &dyn Fn(&mut Tape, &Bindings, &T, &mut Mode) -> Result<(VarId, usize)>,
    eval_fn: &dyn Fn(&ParamMap) -> Result<f64>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("fine-tuning needs a non-empty training split".into()));
    }
    let mut params = init.clone();
    if cfg.epochs == 0 {
        let score = eval_fn(&params)?;
        return Ok(FinetuneOutcome {
            params,
            metrics: Vec::new(),
            best_epoch: 0,
            best_score: score,
            lr_trace: Vec::new(),
        });
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    // Schedule fraction comes from a unit-peak config; each group scales it.
    let sched = OptimizerConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: cfg.weight_decay,
        peak_lr: 1.0,
        warmup_ratio: cfg.warmup_ratio,
        total_steps,
    };
    sched.validate()?;

    let root = StreamKey::root(seed);
    let mut state = AdamState::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::new();
    let mut best: Option<(f64, usize, ParamMap)> = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut root.child("ft-order").index(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let frac = lr_at(step, &sched)?;
            lr_trace.push(LrPoint {
                step,
                encoder_lr: frac * cfg.encoder_lr,
                head_lr: frac * cfg.head_lr,
            });
            let mut grad_acc = ParamMap::new();
            let mut weight_total = 0usize;
            for &i in batch {
                let mut drop_rng = root.child("ft-dropout").index(step).index(i as u64).rng();
                let mut mode = Mode::Train {
                    dropout_rate,
                    rng: &mut drop_rng,
                };
                let mut tape = Tape::new();
                let binds = Bindings::bind(&mut tape, &params, true);
                let (loss, weight) = loss_fn(&mut tape, &binds, &train[i], &mut mode)?;
                if !tape.value(loss).is_finite() {
                    return Err(Error::Numeric(format!(
                        "fine-tuning loss diverged at step {step}"
                    )));
                }
                tape.backward(loss)?;
                accumulate_grads(&mut grad_acc, &binds.grads(&tape));
                weight_total += weight;
            }
            if weight_total == 0 {
                continue;
            }
            scale_grads(&mut grad_acc, 1.0 / weight_total as f64);
            adamw_step(&mut params, &grad_acc, &mut state, &sched, &|name| {
                let peak = if is_encoder_param(name) {
                    cfg.encoder_lr
                } else {
                    cfg.head_lr
                };
                frac * peak
            })?;
        }
        let score = eval_fn(&params)?;
        metrics.push(EpochMetric {
            epoch: epoch + 1,
            validation_score: score,
        });
        let improved = best.as_ref().map(|(s, _, _)| score > *s).unwrap_or(true);
        if improved {
            best = Some((score, epoch + 1, params.clone()));
        }
    }
    let (best_score, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(FinetuneOutcome {
        params: best_params,
        metrics,
        best_epoch,
        best_score,
        lr_trace,
    })
}

/// Fine-tunes a tagger; validation score is entity-level micro-F1.
pub fn finetune_tagger(
    model: &TaggerModel,
    train: &[TaggedSentence],
    validation: &[TaggedSentence],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(TaggerModel, FinetuneOutcome)> {
    if validation.is_empty() {
        return Err(Error::Invalid("fine-tuning needs a non-empty validation split".into()));
    }
    let dropout = model.encoder_cfg.dropout_rate;
    let outcome = finetune_loop(
        &model.params,
        dropout,
        train,
        cfg,
        seed,
        &|tape, binds, sentence, mode| model.loss(tape, binds, sentence, vocab, mode),
        &|params| {
            let candidate = model.with_params(params.clone());
            Ok(candidate.validation_report(validation, vocab, None)?.micro_f1)
        },
    )?;
    Ok((model.with_params(outcome.params.clone()), outcome))
}

/// Fine-tunes the relation model; validation score is micro-F1 (accuracy).
pub fn finetune_relation(
    model: &RelationModel,
    train: &[RelationRecord],
    validation: &[RelationRecord],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(RelationModel, FinetuneOutcome)> {
    if validation.is_empty() {
        return Err(Error::Invalid("fine-tuning needs a non-empty validation split".into()));
    }
    let dropout = model.encoder_cfg.dropout_rate;
    let outcome = finetune_loop(
        &model.params,
        dropout,
        train,
        cfg,
        seed,
        &|tape, binds, record, mode| model.loss(tape, binds, record, vocab, mode),
        &|params| {
            let candidate = model.with_params(params.clone());
            let gold: Vec<String> = validation.iter().map(|r| r.label.clone()).collect();
            let mut pred = Vec::with_capacity(validation.len());
            for r in validation {
                pred.push(candidate.classify(r, vocab)?.0);
            }
            Ok(crate::eval::multiclass_f1(&gold, &pred)?.micro_f1)
        },
    )?;
    Ok((model.with_params(outcome.params.clone()), outcome))
}

/// Fine-tunes the text classifier; validation score is binary F1 for two
/// classes, micro-F1 otherwise.
pub fn finetune_classifier(
    model: &TextClsModel,
    train: &[ClassificationRecord],
    validation: &[ClassificationRecord],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(TextClsModel, FinetuneOutcome)> {
    if validation.is_empty() {
        return Err(Error::Invalid("fine-tuning needs a non-empty validation split".into()));
    }
    let dropout = model.encoder_cfg.dropout_rate;
    let outcome = finetune_loop(
        &model.params,
        dropout,
        train,
        cfg,
        seed,
        &|tape, binds, record, mode| model.loss(tape, binds, record, vocab, mode),
        &|params| {
            let candidate = model.with_params(params.clone());
            let mut pred = Vec::with_capacity(validation.len());
            for r in validation {
                pred.push(candidate.classify(&r.text, vocab)?.0);
            }
            if model.num_classes == 2 {
                let gold: Vec<u8> = validation.iter().map(|r| r.label as u8).collect();
                let predicted: Vec<u8> = pred.iter().map(|&p| p as u8).collect();
                crate::eval::binary_f1(&gold, &predicted)
            } else {
                let gold: Vec<String> = validation.iter().map(|r| r.label.to_string()).collect();
                let predicted: Vec<String> = pred.iter().map(|p| p.to_string()).collect();
                Ok(crate::eval::multiclass_f1(&gold, &predicted)?.micro_f1)
            }
        },
    )?;
    Ok((model.with_params(outcome.params.clone()), outcome))
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

/// Validates loaded tensors against the directory a fresh build would have:
/// same names, same shapes. The first mismatch aborts the load.
fn check_directory(expected: &ParamMap, loaded: &ParamMap) -> Result<()> {
    for (name, tensor) in expected {
        let got = loaded
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint is missing tensor `{name}`")))?;
        if got.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}`: checkpoint shape {:?} does not match model shape {:?}",
                got.shape(),
                tensor.shape()
            )));
        }
    }
    if let Some(extra) = loaded.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::Invalid(format!(
            "checkpoint has unexpected tensor `{extra}`"
        )));
    }
    Ok(())
}

impl TaggerModel {
    pub fn spec(&self) -> crate::data::ModelSpec {
        crate::data::ModelSpec::Tagger {
            encoder: self.encoder_cfg.clone(),
            variant: self.variant,
            entity_types: self.scheme.entity_types().to_vec(),
            bilstm: self.bilstm_cfg.clone(),
        }
    }

    pub fn from_spec(spec: &crate::data::ModelSpec, params: ParamMap) -> Result<Self> {
        let crate::data::ModelSpec::Tagger {
            encoder,
            variant,
            entity_types,
            bilstm,
        } = spec
        else {
            return Err(Error::Invalid("checkpoint does not hold a tagger".into()));
        };
        let scheme = LabelScheme::new(entity_types.clone())?;
        let template =
            TaggerModel::build(*variant, encoder.clone(), scheme, bilstm.clone(), 0)?;
        check_directory(&template.params, &params)?;
        Ok(template.with_params(params))
    }
}

impl RelationModel {
    pub fn spec(&self) -> crate::data::ModelSpec {
        crate::data::ModelSpec::Relation {
            encoder: self.encoder_cfg.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn from_spec(spec: &crate::data::ModelSpec, params: ParamMap) -> Result<Self> {
        let crate::data::ModelSpec::Relation { encoder, labels } = spec else {
            return Err(Error::Invalid("checkpoint does not hold a relation model".into()));
        };
        let template = RelationModel::build(encoder.clone(), labels.clone(), 0)?;
        check_directory(&template.params, &params)?;
        Ok(template.with_params(params))
    }
}

impl TextClsModel {
    pub fn spec(&self) -> crate::data::ModelSpec {
        crate::data::ModelSpec::Classifier {
            encoder: self.encoder_cfg.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn from_spec(spec: &crate::data::ModelSpec, params: ParamMap) -> Result<Self> {
        let crate::data::ModelSpec::Classifier {
            encoder,
            num_classes,
        } = spec
        else {
            return Err(Error::Invalid("checkpoint does not hold a classifier".into()));
        };
        let template = TextClsModel::build(encoder.clone(), *num_classes, 0)?;
        check_directory(&template.params, &params)?;
        Ok(template.with_params(params))
    }
}

/// Runs one scoring function per seed and averages, mirroring the
/// report-the-3-seed-mean protocol.
pub fn seed_average(seeds: &[u64], run: impl Fn(u64) -> Result<f64>) -> Result<(Vec<f64>, f64)> {
    if seeds.is_empty() {
        return Err(Error::Invalid("seed list is empty".into()));
    }
    let mut scores = Vec::with_capacity(seeds.len());
    for &s in seeds {
        scores.push(run(s)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

/// Picks the encoder peak rate maximizing the seed-averaged validation score.
pub fn grid_search_encoder_lr(
    candidates: &[f64],
    seeds: &[u64],
    run: impl Fn(f64, u64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &lr in candidates {
        let (_, mean) = seed_average(seeds, |s| run(lr, s))?;
        if best.map(|(_, b)| mean > b).unwrap_or(true) {
            best = Some((lr, mean));
        }
    }
    best.ok_or_else(|| Error::Invalid("empty learning-rate grid".into()))
}
