//! The pretraining recipe: document packing into full-length sequences,
//! dynamic whole-word masking, MLM loss, AdamW with a linear warmup/decay
//! schedule, and validation pseudo-perplexity.
//!
//! There is no next-sentence objective anywhere in this module: sequences are
//! packed across document boundaries with [SEP] separators and a single
//! segment id. Masking is re-drawn from a per-epoch stream every time a
//! sequence is visited, so no corrupted copy is ever stored.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    affine, encode, encoder_shapes, init_params, Bindings, EncoderConfig, Mode, ParamMap,
};
use crate::rng::StreamKey;
use crate::tensor::{Reduction, Tape, Tensor, VarId};
use crate::wordpiece::{TokenizedSequence, Vocabulary, CLS, MASK, NUM_SPECIALS, PAD, SEP};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

/// A tokenized sequence of exactly `max_len` pieces: [CLS]-prefixed, [SEP] at
/// every document boundary, [PAD]-filled only in the corpus tail, never
/// containing [MASK].
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    seq: TokenizedSequence,
}

impl PackedSequence {
    pub fn sequence(&self) -> &TokenizedSequence {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.seq.len() != max_len {
            return Err(Error::Invalid(format!(
                "packed sequence length {} != max_len {max_len}",
                self.seq.len()
            )));
        }
        if !self.seq.piece_ids.contains(&SEP) {
            return Err(Error::Invalid("packed sequence contains no [SEP]".into()));
        }
        if self.seq.piece_ids.contains(&MASK) {
            return Err(Error::Invalid(
                "packed sequence must not contain [MASK]; masking is dynamic".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy packer. Documents are concatenated in corpus order with a [SEP]
/// after each; every output sequence starts with [CLS] (when `cls_prefix`),
/// content splits across sequences when it overflows, and only the final
/// sequence carries [PAD]. A full sequence that would otherwise contain no
/// separator gets one in its last slot, displacing one piece to the next
/// sequence, so the "at least one [SEP]" invariant holds even for documents
/// longer than `max_len`.
pub fn pack_corpus(
    docs: &[TokenizedSequence],
    max_len: usize,
    cls_prefix: bool,
) -> Result<Vec<PackedSequence>> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot pack an empty corpus".into()));
    }
    if max_len < 4 {
        return Err(Error::Config(format!("max_len {max_len} too small to pack")));
    }
    // Flat item stream: document pieces plus one [SEP] per document.
    // Word keys are (doc, word) pairs, renumbered per output sequence.
    struct Item {
        id: u32,
        word: Option<(usize, u32)>,
    }
    let mut items: Vec<Item> = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        for (pos, &id) in doc.piece_ids.iter().enumerate() {
            if matches!(id, CLS | SEP | PAD | MASK) {
                return Err(Error::Invalid(format!(
                    "document {di} contains framing special id {id} at piece {pos}"
                )));
            }
            items.push(Item {
                id,
                word: doc.word_ids[pos].map(|w| (di, w)),
            });
        }
        items.push(Item { id: SEP, word: None });
    }

    let cls = usize::from(cls_prefix);
    let cap = max_len - cls;
    let mut out = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let end = (i + cap).min(items.len());
        let has_sep = items[i..end].iter().any(|it| it.id == SEP);
        let (take, synth_sep) = if has_sep {
            (end - i, false)
        } else {
            // Full mid-document window: reserve the last slot for a [SEP].
            (cap - 1, true)
        };
        let mut seq = TokenizedSequence::empty();
        if cls_prefix {
            seq.push(CLS, None, true);
        }
        let mut word_map: BTreeMap<(usize, u32), u32> = BTreeMap::new();
        for it in &items[i..i + take] {
            let word = it.word.map(|key| {
                let next = word_map.len() as u32;
                *word_map.entry(key).or_insert(next)
            });
            seq.push(it.id, word, true);
        }
        if synth_sep {
            seq.push(SEP, None, true);
        }
        while seq.len() < max_len {
            seq.push(PAD, None, false);
        }
        let packed = PackedSequence { seq };
        packed.validate(max_len)?;
        out.push(packed);
        i += take;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dynamic whole-word masking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Per-word selection probability.
    pub mask_prob: f64,
    /// Of the selected pieces: fraction replaced by [MASK] ...
    pub mask_frac: f64,
    /// ... fraction replaced by a uniform random non-special id; the rest
    /// stay unchanged (but remain prediction targets).
    pub random_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_prob == 0.0 {
            return Err(Error::Config(format!(
                "mask_prob must be in (0,1], got {}",
                self.mask_prob
            )));
        }
        if self.mask_frac < 0.0 || self.random_frac < 0.0 || self.mask_frac + self.random_frac > 1.0
        {
            return Err(Error::Config("corruption fractions must be >= 0 and sum <= 1".into()));
        }
        Ok(())
    }
}

/// Target sentinel for unselected positions.
pub const IGNORE: i64 = -1;

#[derive(Debug, Clone)]
pub struct MaskingOutcome {
    /// Input ids after corruption.
    pub corrupted: Vec<u32>,
    /// Original id at every piece of a selected word, `IGNORE` elsewhere.
    pub mlm_targets: Vec<i64>,
    /// Word indices (per-sequence numbering) that were selected.
    pub selected_words: Vec<u32>,
    pub pieces_masked: usize,
    pub pieces_randomized: usize,
    pub pieces_kept: usize,
}

impl MaskingOutcome {
    pub fn target_count(&self) -> usize {
        self.mlm_targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// Whole-word masking over one packed sequence. Each word is selected
/// independently with `mask_prob`; every piece of a selected word becomes a
/// prediction target and is corrupted 80/10/10 by default. Specials are never
/// touched, and words containing a special piece (e.g. [UNK]) are skipped.
/// Draw order is fixed: words in sequence order, one selection draw each,
/// then one corruption draw per piece of a selected word.
pub fn apply_dwwm(
    packed: &PackedSequence,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<MaskingOutcome> {
    cfg.validate()?;
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Config(
            "vocabulary has no non-special ids to sample replacements from".into(),
        ));
    }
    let seq = packed.sequence();
    let mut corrupted = seq.piece_ids.clone();
    let mut targets = vec![IGNORE; seq.len()];
    let mut selected_words = Vec::new();
    let (mut n_mask, mut n_rand, mut n_keep) = (0usize, 0usize, 0usize);

    // Group piece positions by word id.
    let mut words: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (pos, word) in seq.word_ids.iter().enumerate() {
        if let Some(w) = word {
            words.entry(*w).or_default().push(pos);
        }
    }
    for (word, positions) in &words {
        if positions.iter().any(|&p| seq.piece_ids[p] < NUM_SPECIALS as u32) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.mask_prob {
            continue;
        }
        selected_words.push(*word);
        for &p in positions {
            targets[p] = seq.piece_ids[p] as i64;
            let u: f64 = rng.gen();
            if u < cfg.mask_frac {
                corrupted[p] = MASK;
                n_mask += 1;
            } else if u < cfg.mask_frac + cfg.random_frac {
                corrupted[p] = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
                n_rand += 1;
            } else {
                n_keep += 1;
            }
        }
    }
    Ok(MaskingOutcome {
        corrupted,
        mlm_targets: targets,
        selected_words,
        pieces_masked: n_mask,
        pieces_randomized: n_rand,
        pieces_kept: n_keep,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl OptimizerConfig {
    /// The pretraining defaults: beta1 0.9, beta2 0.98, eps 1e-6, weight
    /// decay 1e-2, warmup ratio 4.8%.
    pub fn pretrain(peak_lr: f64, total_steps: u64) -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-2,
            peak_lr,
            warmup_ratio: 0.048,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in (0,1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0,1)".into()));
        }
        if self.peak_lr < 0.0 {
            return Err(Error::Config("peak_lr must be >= 0".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        if self.warmup_ratio == 0.0 {
            return 0;
        }
        // A positive ratio always yields a warmup phase, so the schedule hits
        // the exact peak even when rounding would give zero steps.
        let w = (self.warmup_ratio * self.total_steps as f64).round() as u64;
        w.max(1).min(self.total_steps - 1)
    }
}

/// Linear 0 -> peak over the warmup steps, then linear peak -> 0 at
/// `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::Invalid(format!(
            "step {step} out of range 0..={}",
            cfg.total_steps
        )));
    }
    let w = cfg.warmup_steps();
    if w > 0 && step <= w {
        Ok(cfg.peak_lr * step as f64 / w as f64)
    } else {
        Ok(cfg.peak_lr * (cfg.total_steps - step) as f64 / (cfg.total_steps - w) as f64)
    }
}

/// First/second moment estimates per tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

/// Layer-norm gains/biases and all bias vectors are excluded from decay.
pub fn decay_applies(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".ln."))
}

/// One decoupled-weight-decay Adam update. `lr_for` supplies the step
/// learning rate per tensor name (single-group callers pass a constant).
pub fn adamw_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr_for: &dyn Fn(&str) -> f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for tensor `{name}`")))?;
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in tensor `{name}`")));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(theta.shape()), Tensor::zeros(theta.shape())));
        let lr = lr_for(name);
        let wd = if decay_applies(name) { cfg.weight_decay } else { 0.0 };
        let md = m.data_mut();
        let vd = v.data_mut();
        let td = theta.data_mut();
        let gd = grad.data();
        for i in 0..td.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            td[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            // Decoupled decay, applied separately from the gradient term.
            td[i] -= lr * wd * td[i];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MLM model
// ---------------------------------------------------------------------------

/// Encoder trunk plus the MLM projection head (transform, layer norm,
/// decoder). The decoder weight is either its own tensor or tied to the
/// token embedding.
#[derive(Debug, Clone)]
pub struct MlmModel {
    pub config: EncoderConfig,
    pub tie_embeddings: bool,
    pub params: ParamMap,
}

pub fn mlm_head_shapes(cfg: &EncoderConfig, tied: bool) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut shapes = vec![
        ("mlm.transform.weight".to_string(), vec![d, d]),
        ("mlm.transform.bias".to_string(), vec![d]),
        ("mlm.ln.gain".to_string(), vec![d]),
        ("mlm.ln.bias".to_string(), vec![d]),
        ("mlm.decoder.bias".to_string(), vec![cfg.vocab_size]),
    ];
    if !tied {
        shapes.push(("mlm.decoder.weight".to_string(), vec![d, cfg.vocab_size]));
    }
    shapes
}

impl MlmModel {
    pub fn spec(&self) -> crate::data::ModelSpec {
        crate::data::ModelSpec::Mlm {
            encoder: self.config.clone(),
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn from_spec(spec: &crate::data::ModelSpec, params: ParamMap) -> Result<Self> {
        let crate::data::ModelSpec::Mlm {
            encoder,
            tie_embeddings,
        } = spec
        else {
            return Err(Error::Invalid("checkpoint does not hold an MLM model".into()));
        };
        let template = MlmModel::new(encoder.clone(), *tie_embeddings, 0)?;
        for (name, tensor) in &template.params {
            let got = params
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
        if let Some(extra) = params.keys().find(|k| !template.params.contains_key(*k)) {
            return Err(Error::Invalid(format!(
                "checkpoint has unexpected tensor `{extra}`"
            )));
        }
        Ok(MlmModel {
            config: encoder.clone(),
            tie_embeddings: *tie_embeddings,
            params,
        })
    }

    pub fn new(config: EncoderConfig, tie_embeddings: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut shapes = encoder_shapes(&config);
        shapes.extend(mlm_head_shapes(&config, tie_embeddings));
        let params = init_params(&shapes, StreamKey::root(seed).child("init"));
        Ok(MlmModel {
            config,
            tie_embeddings,
            params,
        })
    }

    /// Per-piece vocabulary logits for a corrupted input.
    pub fn logits(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        input: &TokenizedSequence,
        mode: &mut Mode,
    ) -> Result<VarId> {
        let enc = encode(tape, binds, &self.config, input, mode)?;
        let t = affine(tape, binds, enc, "mlm.transform")?;
        let t = tape.gelu(t);
        let gain = binds.get("mlm.ln.gain")?;
        let bias = binds.get("mlm.ln.bias")?;
        let t = tape.layer_norm(t, gain, bias, self.config.layer_norm_eps)?;
        let bias = binds.get("mlm.decoder.bias")?;
        if self.tie_embeddings {
            let emb = binds.get("embeddings.token")?;
            let embt = tape.transpose(emb)?;
            let logits = tape.matmul(t, embt)?;
            tape.add_row_vec(logits, bias)
        } else {
            let w = binds.get("mlm.decoder.weight")?;
            let logits = tape.matmul(t, w)?;
            tape.add_row_vec(logits, bias)
        }
    }

    /// Summed cross-entropy over target positions plus the target count.
    pub fn loss_sum(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        outcome: &MaskingOutcome,
        template: &TokenizedSequence,
        mode: &mut Mode,
    ) -> Result<(VarId, usize)> {
        let input = TokenizedSequence {
            piece_ids: outcome.corrupted.clone(),
            word_ids: template.word_ids.clone(),
            attention_mask: template.attention_mask.clone(),
        };
        let logits = self.logits(tape, binds, &input, mode)?;
        let loss = tape.cross_entropy_rows(logits, &outcome.mlm_targets, IGNORE, Reduction::Sum)?;
        Ok((loss, outcome.target_count()))
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_true")]
    pub cls_prefix: bool,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Optional hard cap on optimizer steps (0 = run all epochs).
    #[serde(default)]
    pub max_steps: u64,
}

fn default_warmup_ratio() -> f64 {
    0.048
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_true() -> bool {
    true
}
fn default_log_interval() -> u64 {
    50
}
fn default_eval_interval() -> u64 {
    250
}

/// One loss-trace record, emitted every `log_interval` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub model: MlmModel,
    pub trace: Vec<TraceRecord>,
    /// Set when the loss went non-finite; `model` is then the last snapshot
    /// taken at a logging interval before the divergence.
    pub diverged_at: Option<u64>,
    pub steps_run: u64,
}

/// Pretrains an MLM on packed sequences. Deterministic given `seed`: batch
/// order, masking, dropout, and init all come from named streams under it.
pub fn mlm_train(
    train: &[PackedSequence],
    validation: &[PackedSequence],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.encoder.validate()?;
    cfg.masking.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    let root = StreamKey::root(seed);
    let mut model = MlmModel::new(cfg.encoder.clone(), cfg.tie_embeddings, seed)?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = steps_per_epoch * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let opt_cfg = OptimizerConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: cfg.weight_decay,
        peak_lr: cfg.peak_lr,
        warmup_ratio: cfg.warmup_ratio,
        total_steps,
    };
    opt_cfg.validate()?;

    let mut state = AdamState::default();
    let mut trace = Vec::new();
    let mut snapshot = model.clone();
    let mut step: u64 = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut root.child("order").index(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let lr = lr_at(step + 1, &opt_cfg)?;
            let mut grad_acc: ParamMap = ParamMap::new();
            let mut loss_total = 0.0;
            let mut count_total = 0usize;
            for &si in batch {
                let packed = &train[si];
                let mut mask_rng = root
                    .child("mask")
                    .index(epoch as u64)
                    .index(si as u64)
                    .rng();
                let outcome =
                    apply_dwwm(packed, &cfg.masking, cfg.encoder.vocab_size, &mut mask_rng)?;
                if outcome.target_count() == 0 {
                    continue;
                }
                let mut drop_rng = root.child("dropout").index(step).index(si as u64).rng();
                let mut mode = Mode::Train {
                    dropout_rate: cfg.encoder.dropout_rate,
                    rng: &mut drop_rng,
                };
                let mut tape = Tape::new();
                let binds = Bindings::bind(&mut tape, &model.params, true);
                let (loss, count) =
                    model.loss_sum(&mut tape, &binds, &outcome, packed.sequence(), &mut mode)?;
                loss_total += tape.value(loss).item();
                count_total += count;
                tape.backward(loss)?;
                accumulate_grads(&mut grad_acc, &binds.grads(&tape));
            }
            step += 1;
            if count_total == 0 {
                continue;
            }
            let mean_loss = loss_total / count_total as f64;
            if !mean_loss.is_finite() {
                return Ok(PretrainOutput {
                    model: snapshot,
                    trace,
                    diverged_at: Some(step),
                    steps_run: step,
                });
            }
            scale_grads(&mut grad_acc, 1.0 / count_total as f64);
            adamw_step(&mut model.params, &grad_acc, &mut state, &opt_cfg, &|_| lr)?;

            if step % cfg.log_interval == 0 || step == total_steps {
                let ppl = if !validation.is_empty()
                    && (step % cfg.eval_interval == 0 || step == total_steps)
                {
                    Some(pseudo_perplexity(validation, &model, &cfg.masking, seed)?)
                } else {
                    None
                };
                trace.push(TraceRecord {
                    step,
                    loss: mean_loss,
                    lr,
                    ppl,
                });
                snapshot = model.clone();
            }
        }
    }
    Ok(PretrainOutput {
        model,
        trace,
        diverged_at: None,
        steps_run: step,
    })
}

/// `exp(mean cross-entropy over masked positions)` under a fixed-seed masking
/// draw, so the metric reproduces exactly.
pub fn pseudo_perplexity(
    split: &[PackedSequence],
    model: &MlmModel,
    masking: &MaskingConfig,
    seed: u64,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Invalid("pseudo-perplexity needs a non-empty split".into()));
    }
    let key = StreamKey::root(seed).child("eval-mask");
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, packed) in split.iter().enumerate() {
        let mut rng = key.index(i as u64).rng();
        let outcome = apply_dwwm(packed, masking, model.config.vocab_size, &mut rng)?;
        if outcome.target_count() == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &model.params, false);
        let (loss, c) =
            model.loss_sum(&mut tape, &binds, &outcome, packed.sequence(), &mut Mode::Eval)?;
        total += tape.value(loss).item();
        count += c;
    }
    if count == 0 {
        return Err(Error::Invalid(
            "pseudo-perplexity: no masked targets in the split".into(),
        ));
    }
    Ok((total / count as f64).exp())
}

pub(crate) fn accumulate_grads(acc: &mut ParamMap, grads: &ParamMap) {
    for (name, g) in grads {
        match acc.get_mut(name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

pub(crate) fn scale_grads(acc: &mut ParamMap, factor: f64) {
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Tokenizes one document per line against a vocabulary.
pub fn tokenize_docs(lines: &[String], vocab: &Vocabulary) -> Vec<TokenizedSequence> {
    lines
        .iter()
        .map(|line| crate::wordpiece::tokenize(line, vocab, crate::wordpiece::DEFAULT_MAX_WORD_CHARS))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_of_words(word_sizes: &[usize]) -> TokenizedSequence {
        // Builds a doc where word w has `word_sizes[w]` pieces, ids >= 9.
        let mut seq = TokenizedSequence::empty();
        let mut id = NUM_SPECIALS as u32;
        for (w, &sz) in word_sizes.iter().enumerate() {
            for _ in 0..sz {
                seq.push(id, Some(w as u32), true);
                id += 1;
                if id > 40 {
                    id = NUM_SPECIALS as u32;
                }
            }
        }
        seq
    }

    fn doc_of_len(n: usize) -> TokenizedSequence {
        doc_of_words(&vec![1; n])
    }

    #[test]
    fn packing_matches_hand_simulation() {
        let docs = vec![doc_of_len(120), doc_of_len(500), doc_of_len(900)];
        let packed = pack_corpus(&docs, 512, true).unwrap();
        assert_eq!(packed.len(), 3);
        for p in &packed {
            assert_eq!(p.len(), 512);
        }
        // First sequence: [CLS] + 120 + [SEP] + 390 of doc2.
        let s0 = packed[0].sequence();
        assert_eq!(s0.piece_ids[0], CLS);
        assert_eq!(s0.piece_ids[121], SEP);
        assert!(!s0.piece_ids.contains(&PAD));
        // Counting oracle: independent greedy length simulation.
        let total_items = 120 + 500 + 900 + 3;
        let mut remaining = total_items;
        let mut seqs = 0;
        while remaining > 0 {
            remaining -= remaining.min(511);
            seqs += 1;
        }
        assert_eq!(packed.len(), seqs);
        // Only the last sequence is padded.
        assert!(!packed[1].sequence().piece_ids.contains(&PAD));
        let pads = packed[2]
            .sequence()
            .piece_ids
            .iter()
            .filter(|&&i| i == PAD)
            .count();
        assert_eq!(pads, 512 - 1 - 501);
    }

    #[test]
    fn packing_underfull_and_exact_fit() {
        let packed = pack_corpus(&[doc_of_len(5)], 512, true).unwrap();
        assert_eq!(packed.len(), 1);
        let pads = packed[0]
            .sequence()
            .piece_ids
            .iter()
            .filter(|&&i| i == PAD)
            .count();
        assert_eq!(pads, 505);

        let packed = pack_corpus(&[doc_of_len(510)], 512, true).unwrap();
        assert_eq!(packed.len(), 1);
        assert!(!packed[0].sequence().piece_ids.contains(&PAD));
    }

    #[test]
    fn packing_megadoc_keeps_sep_invariant() {
        let packed = pack_corpus(&[doc_of_len(2000)], 128, true).unwrap();
        for p in &packed {
            p.validate(128).unwrap();
            assert!(p.sequence().piece_ids.contains(&SEP));
        }
    }

    #[test]
    fn packing_rejects_empty_and_framed_docs() {
        assert!(pack_corpus(&[], 128, true).is_err());
        let mut bad = TokenizedSequence::empty();
        bad.push(CLS, None, true);
        assert!(pack_corpus(&[bad], 128, true).is_err());
    }

    #[test]
    fn packing_word_ids_stay_grouped() {
        let docs = vec![doc_of_words(&[3, 2, 4, 1, 5])];
        let packed = pack_corpus(&docs, 32, true).unwrap();
        let seq = packed[0].sequence();
        // Word ids non-decreasing over non-special pieces, grouped.
        let mut seen = Vec::new();
        for w in seq.word_ids.iter().flatten() {
            if seen.last() != Some(w) {
                assert!(!seen.contains(w), "word id {w} split non-contiguously");
                seen.push(*w);
            }
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn dwwm_saturation_and_atomicity() {
        let packed = pack_corpus(&[doc_of_words(&[3, 1, 2, 2])], 32, true).unwrap();
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            ..Default::default()
        };
        let mut rng = StreamKey::root(1).child("m").rng();
        let out = apply_dwwm(&packed[0], &cfg, 64, &mut rng).unwrap();
        // Every word selected, every piece of every word targeted.
        assert_eq!(out.selected_words.len(), 4);
        assert_eq!(out.target_count(), 8);
        let seq = packed[0].sequence();
        for (pos, word) in seq.word_ids.iter().enumerate() {
            match word {
                Some(_) => assert_ne!(out.mlm_targets[pos], IGNORE),
                None => assert_eq!(out.mlm_targets[pos], IGNORE),
            }
        }
        // Specials never corrupted.
        for (pos, &id) in seq.piece_ids.iter().enumerate() {
            if id == CLS || id == SEP || id == PAD {
                assert_eq!(out.corrupted[pos], id);
            }
        }
    }

    #[test]
    fn dwwm_statistics() {
        let docs: Vec<TokenizedSequence> = (0..40).map(|_| doc_of_len(60)).collect();
        let packed = pack_corpus(&docs, 64, true).unwrap();
        let cfg = MaskingConfig::default();
        let key = StreamKey::root(7).child("stats");
        let (mut words_total, mut words_selected) = (0usize, 0usize);
        let (mut m, mut r, mut k) = (0usize, 0usize, 0usize);
        for i in 0..10_000 {
            let p = &packed[i % packed.len()];
            let mut rng = key.index(i as u64).rng();
            let out = apply_dwwm(p, &cfg, 64, &mut rng).unwrap();
            let n_words = p
                .sequence()
                .word_ids
                .iter()
                .flatten()
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            words_total += n_words;
            words_selected += out.selected_words.len();
            m += out.pieces_masked;
            r += out.pieces_randomized;
            k += out.pieces_kept;
        }
        let frac = words_selected as f64 / words_total as f64;
        assert!((0.14..=0.16).contains(&frac), "selected fraction {frac}");
        let total = (m + r + k) as f64;
        assert!((m as f64 / total - 0.8).abs() < 0.01);
        assert!((r as f64 / total - 0.1).abs() < 0.01);
        assert!((k as f64 / total - 0.1).abs() < 0.01);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = OptimizerConfig::pretrain(1e-4, 1000);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        let w = cfg.warmup_steps();
        assert_eq!(w, 48);
        assert_eq!(lr_at(w, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
        assert!(lr_at(1001, &cfg).is_err());
        // Monotone up then down.
        assert!(lr_at(10, &cfg).unwrap() < lr_at(20, &cfg).unwrap());
        assert!(lr_at(500, &cfg).unwrap() > lr_at(700, &cfg).unwrap());
    }

    #[test]
    fn adamw_hand_cases() {
        let cfg = OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
            peak_lr: 0.1,
            warmup_ratio: 0.0,
            total_steps: 10,
        };
        // Zero gradient, zero decay: fixed point.
        let mut params = ParamMap::new();
        params.insert("w.weight".into(), Tensor::vector(vec![1.0, -2.0]));
        let grads: ParamMap = [("w.weight".to_string(), Tensor::vector(vec![0.0, 0.0]))]
            .into_iter()
            .collect();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, &cfg, &|_| 0.1).unwrap();
        assert_eq!(params["w.weight"].data(), &[1.0, -2.0]);

        // Single scalar hand evaluation: theta = 1, g = 1, lr = 0.1, wd = 0.
        let mut params = ParamMap::new();
        params.insert("w.weight".into(), Tensor::vector(vec![1.0]));
        let grads: ParamMap = [("w.weight".to_string(), Tensor::vector(vec![1.0]))]
            .into_iter()
            .collect();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, &cfg, &|_| 0.1).unwrap();
        // mhat = 1, vhat = 1 after bias correction at t=1.
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-6));
        assert!((params["w.weight"].data()[0] - expected).abs() < 1e-12);

        // Pure decay limit: zero grad, wd = 0.01 shrinks by (1 - lr*wd).
        let cfg_wd = OptimizerConfig {
            weight_decay: 0.01,
            ..cfg
        };
        let mut params = ParamMap::new();
        params.insert("w.weight".into(), Tensor::vector(vec![2.0]));
        let grads: ParamMap = [("w.weight".to_string(), Tensor::vector(vec![0.0]))]
            .into_iter()
            .collect();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, &cfg_wd, &|_| 0.1).unwrap();
        assert!((params["w.weight"].data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);

        // Biases and layer norms are excluded from decay.
        let mut params = ParamMap::new();
        params.insert("w.bias".into(), Tensor::vector(vec![2.0]));
        params.insert("x.ln.gain".into(), Tensor::vector(vec![2.0]));
        let grads: ParamMap = [
            ("w.bias".to_string(), Tensor::vector(vec![0.0])),
            ("x.ln.gain".to_string(), Tensor::vector(vec![0.0])),
        ]
        .into_iter()
        .collect();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, &cfg_wd, &|_| 0.1).unwrap();
        assert_eq!(params["w.bias"].data(), &[2.0]);
        assert_eq!(params["x.ln.gain"].data(), &[2.0]);

        // Non-finite gradient names the tensor.
        let grads: ParamMap = [("w.bias".to_string(), Tensor::vector(vec![f64::NAN]))]
            .into_iter()
            .collect();
        let mut params = ParamMap::new();
        params.insert("w.bias".into(), Tensor::vector(vec![0.5]));
        let err = adamw_step(&mut params, &grads, &mut state, &cfg_wd, &|_| 0.1).unwrap_err();
        assert!(err.to_string().contains("w.bias"));
    }

    fn tiny_pretrain_cfg(vocab_size: usize) -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                vocab_size,
                hidden_dim: 16,
                num_layers: 1,
                num_heads: 2,
                ff_dim: 24,
                max_positions: 32,
                dropout_rate: 0.1,
                layer_norm_eps: 1e-12,
            },
            masking: MaskingConfig::default(),
            max_len: 32,
            batch_size: 4,
            epochs: 1,
            peak_lr: 1e-3,
            warmup_ratio: 0.048,
            weight_decay: 1e-2,
            tie_embeddings: false,
            cls_prefix: true,
            log_interval: 2,
            eval_interval: 4,
            max_steps: 0,
        }
    }

    #[test]
    fn zero_lr_step_leaves_parameters_identical() {
        let docs: Vec<TokenizedSequence> = (0..4).map(|_| doc_of_len(20)).collect();
        let packed = pack_corpus(&docs, 32, true).unwrap();
        let mut cfg = tiny_pretrain_cfg(64);
        cfg.peak_lr = 0.0;
        cfg.max_steps = 1;
        let out = mlm_train(&packed, &[], &cfg, 5).unwrap();
        let init = MlmModel::new(cfg.encoder.clone(), false, 5).unwrap();
        assert_eq!(out.model.params, init.params);
    }

    #[test]
    fn loss_at_init_is_close_to_uniform() {
        // With random init the head is near-uniform over V classes.
        let docs: Vec<TokenizedSequence> = (0..8).map(|_| doc_of_len(24)).collect();
        let packed = pack_corpus(&docs, 32, true).unwrap();
        let model = MlmModel::new(tiny_pretrain_cfg(64).encoder, false, 9).unwrap();
        let ppl = pseudo_perplexity(&packed, &model, &MaskingConfig::default(), 3).unwrap();
        let loss = ppl.ln();
        let uniform = 64.0f64.ln();
        assert!(
            (loss - uniform).abs() / uniform < 0.05,
            "init loss {loss} vs ln V {uniform}"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let docs: Vec<TokenizedSequence> = (0..6).map(|_| doc_of_len(24)).collect();
        let packed = pack_corpus(&docs, 32, true).unwrap();
        let cfg = tiny_pretrain_cfg(64);
        let a = mlm_train(&packed, &packed, &cfg, 11).unwrap();
        let b = mlm_train(&packed, &packed, &cfg, 11).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.ppl.map(f64::to_bits), y.ppl.map(f64::to_bits));
        }
        let c = mlm_train(&packed, &packed, &cfg, 12).unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    #[test]
    fn tied_embeddings_reduce_parameters_and_train() {
        let docs: Vec<TokenizedSequence> = (0..4).map(|_| doc_of_len(16)).collect();
        let packed = pack_corpus(&docs, 32, true).unwrap();
        let mut cfg = tiny_pretrain_cfg(64);
        cfg.tie_embeddings = true;
        cfg.max_steps = 2;
        let out = mlm_train(&packed, &[], &cfg, 3).unwrap();
        assert!(!out.model.params.contains_key("mlm.decoder.weight"));
        assert!(out.model.params.contains_key("mlm.decoder.bias"));
        assert_eq!(out.diverged_at, None);
    }

    #[test]
    fn perplexity_error_cases() {
        let model = MlmModel::new(tiny_pretrain_cfg(64).encoder, false, 1).unwrap();
        assert!(pseudo_perplexity(&[], &model, &MaskingConfig::default(), 1).is_err());
    }
}
