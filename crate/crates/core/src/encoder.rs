//! BERT-style transformer encoder and the stacked BiLSTM used by the
//! BiLSTM-CRF tagging head.
//!
//! Post-layer-norm sublayer order, learned absolute position embeddings, and
//! an always-zero segment id (the pretraining objective has no sentence-pair
//! task; the segment table is kept for format compatibility). Parameters live
//! in a name-sorted map so the optimizer, checkpoints, and gradient
//! certification all address the same hierarchical names.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;
use crate::tensor::{Tape, Tensor, VarId};
use crate::wordpiece::TokenizedSequence;
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale default: big enough to learn the synthetic tasks, small
    /// enough for CPU training.
    pub fn desk_default(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 512,
            max_positions: 128,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// Base-size preset matching the published training scale (512-token
    /// sequences); provided for completeness, not a practical CPU target.
    pub fn paper_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ff_dim: 3072,
            max_positions: 512,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    /// Tiny config for tests and gradient certification.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 32,
            max_positions: 32,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ff_dim == 0
            || self.max_positions == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiLstmConfig {
    pub num_layers: usize,
    pub hidden_per_direction: usize,
    pub inter_layer_dropout: f64,
}

impl BiLstmConfig {
    /// The published tagging preset: 2 layers, 300 per direction, 0.2 dropout.
    pub fn preset() -> Self {
        BiLstmConfig {
            num_layers: 2,
            hidden_per_direction: 300,
            inter_layer_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_per_direction == 0 {
            return Err(Error::Config("BiLSTM dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.inter_layer_dropout) {
            return Err(Error::Config("BiLSTM dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_per_direction
    }
}

/// All learnable tensors of a model, addressable by hierarchical dotted name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Shape directory for the encoder trunk.
pub fn encoder_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut shapes = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_positions, d]),
        ("embeddings.segment".to_string(), vec![2, d]),
        ("embeddings.ln.gain".to_string(), vec![d]),
        ("embeddings.ln.bias".to_string(), vec![d]),
    ];
    for l in 0..cfg.num_layers {
        for proj in ["q", "k", "v", "out"] {
            shapes.push((format!("layer.{l}.attn.{proj}.weight"), vec![d, d]));
            shapes.push((format!("layer.{l}.attn.{proj}.bias"), vec![d]));
        }
        shapes.push((format!("layer.{l}.attn.ln.gain"), vec![d]));
        shapes.push((format!("layer.{l}.attn.ln.bias"), vec![d]));
        shapes.push((format!("layer.{l}.ffn.w1.weight"), vec![d, cfg.ff_dim]));
        shapes.push((format!("layer.{l}.ffn.w1.bias"), vec![cfg.ff_dim]));
        shapes.push((format!("layer.{l}.ffn.w2.weight"), vec![cfg.ff_dim, d]));
        shapes.push((format!("layer.{l}.ffn.w2.bias"), vec![d]));
        shapes.push((format!("layer.{l}.ffn.ln.gain"), vec![d]));
        shapes.push((format!("layer.{l}.ffn.ln.bias"), vec![d]));
    }
    shapes
}

/// Shape directory for a stacked BiLSTM whose first layer consumes `in_dim`.
pub fn bilstm_shapes(in_dim: usize, cfg: &BiLstmConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_per_direction;
    let mut shapes = Vec::new();
    for l in 0..cfg.num_layers {
        let input = if l == 0 { in_dim } else { 2 * h };
        for dir in ["fw", "bw"] {
            shapes.push((format!("bilstm.{l}.{dir}.w_input"), vec![input, 4 * h]));
            shapes.push((format!("bilstm.{l}.{dir}.w_hidden"), vec![h, 4 * h]));
            shapes.push((format!("bilstm.{l}.{dir}.bias"), vec![4 * h]));
        }
    }
    shapes
}

/// Fills a shape directory with the standard init: truncated normal
/// (sigma 0.02, cut at 2 sigma) for weights and embeddings, zeros for biases,
/// ones for layer-norm gains. Each tensor draws from its own name-keyed
/// stream, so the init of one tensor never depends on the others.
pub fn init_params(shapes: &[(String, Vec<usize>)], key: StreamKey) -> ParamMap {
    let mut params = ParamMap::new();
    for (name, shape) in shapes {
        let tensor = if name.ends_with(".bias") && !name.contains(".ln.") {
            Tensor::zeros(shape)
        } else if name.ends_with(".ln.gain") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".ln.bias") {
            Tensor::zeros(shape)
        } else {
            let mut rng = key.child(name).rng();
            truncated_normal(shape, INIT_STD, &mut rng)
        };
        params.insert(name.clone(), tensor);
    }
    params
}

pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Total parameter count implied by a shape directory.
pub fn param_count(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

// ---------------------------------------------------------------------------
// Tape bindings
// ---------------------------------------------------------------------------

/// Named parameters registered as tape leaves for one forward/backward pass.
pub struct Bindings {
    map: BTreeMap<String, VarId>,
}

impl Bindings {
    /// Wraps an existing name-to-variable map (used by gradient checks that
    /// register leaves themselves).
    pub fn from_map(map: BTreeMap<String, VarId>) -> Self {
        Bindings { map }
    }

    /// Registers every tensor of `params` as a leaf, in name order.
    pub fn bind(tape: &mut Tape, params: &ParamMap, trainable: bool) -> Self {
        let map = params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
            .collect();
        Bindings { map }
    }

    pub fn get(&self, name: &str) -> Result<VarId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    /// Gradients of all bound parameters after a backward pass; missing
    /// gradients (parameters unreachable from the loss) come back as zeros.
    pub fn grads(&self, tape: &Tape) -> ParamMap {
        self.map
            .iter()
            .map(|(name, &id)| {
                let g = tape
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Train/eval switch carrying the dropout stream in train mode.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout_rate: f64,
        rng: &'a mut ChaCha12Rng,
    },
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout_rate, rng } => {
                if *dropout_rate == 0.0 {
                    Ok(x)
                } else {
                    tape.dropout(x, *dropout_rate, rng)
                }
            }
        }
    }

    fn dropout_at(&mut self, tape: &mut Tape, x: VarId, rate: f64) -> Result<VarId> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rng, .. } => {
                if rate == 0.0 {
                    Ok(x)
                } else {
                    tape.dropout(x, rate, rng)
                }
            }
        }
    }
}

/// Affine map `x @ weight + bias` with parameters looked up by prefix.
pub fn affine(tape: &mut Tape, binds: &Bindings, x: VarId, prefix: &str) -> Result<VarId> {
    let w = binds.get(&format!("{prefix}.weight"))?;
    let b = binds.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_vec(y, b)
}

/// Contextual embeddings `[len, hidden]` for one tokenized sequence.
pub fn encode(
    tape: &mut Tape,
    binds: &Bindings,
    cfg: &EncoderConfig,
    seq: &TokenizedSequence,
    mode: &mut Mode,
) -> Result<VarId> {
    encode_with_attention(tape, binds, cfg, seq, mode, None)
}

/// As `encode`, optionally collecting the per-head attention probability
/// variables (used by tests to check row normalization).
pub fn encode_with_attention(
    tape: &mut Tape,
    binds: &Bindings,
    cfg: &EncoderConfig,
    seq: &TokenizedSequence,
    mode: &mut Mode,
    mut attention_sink: Option<&mut Vec<VarId>>,
) -> Result<VarId> {
    cfg.validate()?;
    let n = seq.len();
    if n == 0 {
        return Err(Error::Invalid("cannot encode an empty sequence".into()));
    }
    if n > cfg.max_positions {
        return Err(Error::Invalid(format!(
            "sequence length {n} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    seq.validate(cfg.vocab_size)?;

    let ids: Vec<usize> = seq.piece_ids.iter().map(|&i| i as usize).collect();
    let tok = binds.get("embeddings.token")?;
    let pos = binds.get("embeddings.position")?;
    let seg = binds.get("embeddings.segment")?;
    let tok_e = tape.gather_rows(tok, &ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos_e = tape.gather_rows(pos, &positions)?;
    // Segment ids are all zero: the objective has no sentence-pair task.
    let seg_e = tape.gather_rows(seg, &vec![0usize; n])?;
    let summed = tape.add(tok_e, pos_e)?;
    let summed = tape.add(summed, seg_e)?;
    let gain = binds.get("embeddings.ln.gain")?;
    let bias = binds.get("embeddings.ln.bias")?;
    let mut x = tape.layer_norm(summed, gain, bias, cfg.layer_norm_eps)?;
    x = mode.dropout(tape, x)?;

    // Additive key mask: 0 on attended positions, -inf where mask is 0.
    let mask_row: Vec<f64> = seq
        .attention_mask
        .iter()
        .map(|&m| if m == 1 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let head_dim = cfg.hidden_dim / cfg.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    for l in 0..cfg.num_layers {
        let q = affine(tape, binds, x, &format!("layer.{l}.attn.q"))?;
        let k = affine(tape, binds, x, &format!("layer.{l}.attn.k"))?;
        let v = affine(tape, binds, x, &format!("layer.{l}.attn.v"))?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (a, b) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const_row(scores, &mask_row)?;
            let probs = tape.softmax_rows(scores)?;
            if let Some(sink) = attention_sink.as_deref_mut() {
                sink.push(probs);
            }
            let probs = mode.dropout(tape, probs)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let proj = affine(tape, binds, merged, &format!("layer.{l}.attn.out"))?;
        let proj = mode.dropout(tape, proj)?;
        let res = tape.add(x, proj)?;
        let gain = binds.get(&format!("layer.{l}.attn.ln.gain"))?;
        let bias = binds.get(&format!("layer.{l}.attn.ln.bias"))?;
        x = tape.layer_norm(res, gain, bias, cfg.layer_norm_eps)?;

        let h1 = affine(tape, binds, x, &format!("layer.{l}.ffn.w1"))?;
        let h1 = tape.gelu(h1);
        let h2 = affine(tape, binds, h1, &format!("layer.{l}.ffn.w2"))?;
        let h2 = mode.dropout(tape, h2)?;
        let res = tape.add(x, h2)?;
        let gain = binds.get(&format!("layer.{l}.ffn.ln.gain"))?;
        let bias = binds.get(&format!("layer.{l}.ffn.ln.bias"))?;
        x = tape.layer_norm(res, gain, bias, cfg.layer_norm_eps)?;
    }
    Ok(x)
}

/// Stacked bidirectional LSTM over per-piece features: `[n, in]` to
/// `[n, 2*hidden_per_direction]`. Gate layout in the `4H` axis is
/// input, forget, cell, output.
pub fn bilstm(
    tape: &mut Tape,
    binds: &Bindings,
    cfg: &BiLstmConfig,
    inputs: VarId,
    mode: &mut Mode,
) -> Result<VarId> {
    cfg.validate()?;
    let n = tape.value(inputs).rows();
    let h = cfg.hidden_per_direction;
    let mut x = inputs;
    for l in 0..cfg.num_layers {
        if l > 0 {
            x = mode.dropout_at(tape, x, cfg.inter_layer_dropout)?;
        }
        let fw = lstm_direction(tape, binds, x, &format!("bilstm.{l}.fw"), h, n, false)?;
        let bw = lstm_direction(tape, binds, x, &format!("bilstm.{l}.bw"), h, n, true)?;
        x = tape.concat_cols(&[fw, bw])?;
    }
    Ok(x)
}

fn lstm_direction(
    tape: &mut Tape,
    binds: &Bindings,
    x: VarId,
    prefix: &str,
    h: usize,
    n: usize,
    reverse: bool,
) -> Result<VarId> {
    let w_input = binds.get(&format!("{prefix}.w_input"))?;
    let w_hidden = binds.get(&format!("{prefix}.w_hidden"))?;
    let bias = binds.get(&format!("{prefix}.bias"))?;
    if tape.value(x).cols() != tape.value(w_input).rows() {
        return Err(Error::Shape(format!(
            "LSTM input width {} does not match {prefix}.w_input rows {}",
            tape.value(x).cols(),
            tape.value(w_input).rows()
        )));
    }
    // Input contributions for all steps at once.
    let xw = tape.matmul(x, w_input)?;
    let xw = tape.add_row_vec(xw, bias)?;
    let mut hidden = tape.constant(Tensor::zeros(&[1, h]));
    let mut cell = tape.constant(Tensor::zeros(&[1, h]));
    let mut outputs: Vec<VarId> = Vec::with_capacity(n);
    let steps: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for &t in &steps {
        let xt = tape.gather_rows(xw, &[t])?;
        let hh = tape.matmul(hidden, w_hidden)?;
        let gates = tape.add(xt, hh)?;
        let i_gate = tape.slice_cols(gates, 0, h)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(gates, h, 2 * h)?;
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, cell)?;
        let ig = tape.mul(i_gate, g_gate)?;
        cell = tape.add(fc, ig)?;
        let tc = tape.tanh(cell);
        hidden = tape.mul(o_gate, tc)?;
        outputs.push(hidden);
    }
    if reverse {
        outputs.reverse();
    }
    tape.concat_rows(&outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::wordpiece::NUM_SPECIALS;

    fn seq_of(ids: &[u32]) -> TokenizedSequence {
        let mut s = TokenizedSequence::empty();
        for (i, &id) in ids.iter().enumerate() {
            s.push(id, Some(i as u32), true);
        }
        s
    }

    #[test]
    fn init_is_deterministic_and_ln_gains_are_one() {
        let cfg = EncoderConfig::tiny(64);
        let shapes = encoder_shapes(&cfg);
        let a = init_params(&shapes, StreamKey::root(3).child("init"));
        let b = init_params(&shapes, StreamKey::root(3).child("init"));
        assert_eq!(a, b, "same seed must give bit-identical parameters");
        for (name, t) in &a {
            if name.ends_with(".ln.gain") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with(".bias") && !name.contains(".ln.") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
            assert!(t.data().iter().all(|&v| v.abs() <= 2.0 * INIT_STD || v == 1.0));
        }
        let c = init_params(&shapes, StreamKey::root(4).child("init"));
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // L=2, d=16, heads=2, ff=32, V=64, P=32.
        let cfg = EncoderConfig {
            vocab_size: 64,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 32,
            max_positions: 32,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        };
        let d = 16usize;
        let per_layer = 4 * (d * d + d)         // q,k,v,out projections
            + 2 * d                              // attention layer norm
            + (d * 32 + 32) + (32 * d + d)       // feed-forward
            + 2 * d; //                          // ffn layer norm
        let embeddings = 64 * d + 32 * d + 2 * d + 2 * d;
        let expected = 2 * per_layer + embeddings;
        assert_eq!(param_count(&encoder_shapes(&cfg)), expected);
        assert_eq!(expected, 2 * 2224 + 1600);
    }

    #[test]
    fn encode_shape_contract_and_determinism() {
        let cfg = EncoderConfig::tiny(64);
        let params = init_params(&encoder_shapes(&cfg), StreamKey::root(1).child("init"));
        let seq = seq_of(&[2, 9, 10, 11, 3]);
        let run = || {
            let mut tape = Tape::new();
            let binds = Bindings::bind(&mut tape, &params, false);
            let out = encode(&mut tape, &binds, &cfg, &seq, &mut Mode::Eval).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[5, 16]);
        let b = run();
        assert_eq!(a, b, "eval mode must be a pure function");
    }

    #[test]
    fn encode_rejects_over_length_and_bad_ids() {
        let cfg = EncoderConfig::tiny(64);
        let params = init_params(&encoder_shapes(&cfg), StreamKey::root(1).child("init"));
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &params, false);

        let long = seq_of(&vec![9; 33]);
        let err = encode(&mut tape, &binds, &cfg, &long, &mut Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("max_positions"));

        let bad = seq_of(&[64]);
        assert!(encode(&mut tape, &binds, &cfg, &bad, &mut Mode::Eval).is_err());
    }

    #[test]
    fn attention_rows_over_unmasked_positions_sum_to_one() {
        let cfg = EncoderConfig::tiny(64);
        let params = init_params(&encoder_shapes(&cfg), StreamKey::root(2).child("init"));
        let mut seq = seq_of(&[2, 9, 10, 3]);
        seq.push(0, None, false); // one padding position
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &params, false);
        let mut attn = Vec::new();
        encode_with_attention(&mut tape, &binds, &cfg, &seq, &mut Mode::Eval, Some(&mut attn))
            .unwrap();
        assert_eq!(attn.len(), cfg.num_layers * cfg.num_heads);
        for probs in attn {
            let t = tape.value(probs);
            for i in 0..t.rows() {
                let row_sum: f64 = (0..t.cols()).map(|j| t.at2(i, j)).sum();
                assert!((row_sum - 1.0).abs() < 1e-9);
                // Masked key gets exactly zero probability.
                assert_eq!(t.at2(i, 4), 0.0);
            }
        }
    }

    #[test]
    fn padding_invariance_in_eval_mode() {
        let cfg = EncoderConfig::tiny(64);
        let params = init_params(&encoder_shapes(&cfg), StreamKey::root(5).child("init"));
        let seq = seq_of(&[2, 9, 10, 11, 12, 3]);
        let mut padded = seq.clone();
        for _ in 0..5 {
            padded.push(0, None, false);
        }
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &params, false);
        let plain = encode(&mut tape, &binds, &cfg, &seq, &mut Mode::Eval).unwrap();
        let with_pads = encode(&mut tape, &binds, &cfg, &padded, &mut Mode::Eval).unwrap();
        let (a, b) = (tape.value(plain), tape.value(with_pads));
        for i in 0..seq.len() {
            for j in 0..cfg.hidden_dim {
                assert!(
                    (a.at2(i, j) - b.at2(i, j)).abs() < 1e-9,
                    "padding changed real position {i}"
                );
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            vocab_size: NUM_SPECIALS + 6,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 12,
            max_positions: 8,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-12,
        };
        let shapes = encoder_shapes(&cfg);
        let params = init_params(&shapes, StreamKey::root(11).child("init"));
        let names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
        let values: Vec<Tensor> = names.iter().map(|n| params[n].clone()).collect();
        let seq = seq_of(&[2, 9, 10, 3]);
        let cfg2 = cfg.clone();
        let err = grad_check(
            &values,
            move |tape, ids| {
                let map = names
                    .iter()
                    .cloned()
                    .zip(ids.iter().copied())
                    .collect::<BTreeMap<_, _>>();
                let binds = Bindings { map };
                let out = encode(tape, &binds, &cfg2, &seq, &mut Mode::Eval)?;
                // Fixed weighting so the loss depends on every output entry.
                let w: Vec<f64> = (0..tape.value(out).numel())
                    .map(|i| ((i % 7) as f64 - 3.0) * 0.25)
                    .collect();
                let wt = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w)?);
                let prod = tape.mul(out, wt)?;
                Ok(tape.sum_all(prod))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "encoder grad error {err}");
    }

    #[test]
    fn bilstm_degenerate_and_zero_cases() {
        let cfg = BiLstmConfig {
            num_layers: 1,
            hidden_per_direction: 3,
            inter_layer_dropout: 0.0,
        };
        // All-zero weights: gates are sigmoid(0)/tanh(0), outputs all zero.
        let params = init_params(&bilstm_shapes(4, &cfg), StreamKey::root(0).child("x"));
        let zeroed: ParamMap = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &zeroed, false);
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.1]).unwrap(), false);
        let out = bilstm(&mut tape, &binds, &cfg, x, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 6]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_matches_scalar_oracle() {
        // 3 steps, H=2, one layer; independent per-gate recurrence.
        let cfg = BiLstmConfig {
            num_layers: 1,
            hidden_per_direction: 2,
            inter_layer_dropout: 0.0,
        };
        let in_dim = 3;
        let params = init_params(&bilstm_shapes(in_dim, &cfg), StreamKey::root(21).child("init"));
        let x_data: Vec<f64> = (0..9).map(|i| ((i as f64) * 0.37).sin()).collect();

        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &params, false);
        let x = tape.leaf(Tensor::matrix(3, in_dim, x_data.clone()).unwrap(), false);
        let out = bilstm(&mut tape, &binds, &cfg, x, &mut Mode::Eval).unwrap();
        let got = tape.value(out).clone();
        assert_eq!(got.shape(), &[3, 4]);

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run_dir = |prefix: &str, order: Vec<usize>| -> Vec<Vec<f64>> {
            let wi = &params[&format!("{prefix}.w_input")];
            let wh = &params[&format!("{prefix}.w_hidden")];
            let b = &params[&format!("{prefix}.bias")];
            let h_dim = 2;
            let mut h = vec![0.0; h_dim];
            let mut c = vec![0.0; h_dim];
            let mut outs = vec![vec![0.0; h_dim]; 3];
            for &t in &order {
                let mut gates = vec![0.0; 4 * h_dim];
                for (g, gate) in gates.iter_mut().enumerate() {
                    let mut acc = b.data()[g];
                    for i in 0..in_dim {
                        acc += x_data[t * in_dim + i] * wi.at2(i, g);
                    }
                    for j in 0..h_dim {
                        acc += h[j] * wh.at2(j, g);
                    }
                    *gate = acc;
                }
                for j in 0..h_dim {
                    let i_g = sigmoid(gates[j]);
                    let f_g = sigmoid(gates[h_dim + j]);
                    let g_g = gates[2 * h_dim + j].tanh();
                    let o_g = sigmoid(gates[3 * h_dim + j]);
                    c[j] = f_g * c[j] + i_g * g_g;
                    h[j] = o_g * c[j].tanh();
                }
                outs[t] = h.clone();
            }
            outs
        };
        let fw = run_dir("bilstm.0.fw", vec![0, 1, 2]);
        let bw = run_dir("bilstm.0.bw", vec![2, 1, 0]);
        for t in 0..3 {
            for j in 0..2 {
                assert!((got.at2(t, j) - fw[t][j]).abs() < 1e-10);
                assert!((got.at2(t, 2 + j) - bw[t][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let cfg = BiLstmConfig {
            num_layers: 2,
            hidden_per_direction: 2,
            inter_layer_dropout: 0.0,
        };
        let shapes = bilstm_shapes(3, &cfg);
        let params = init_params(&shapes, StreamKey::root(8).child("init"));
        let names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
        let mut values: Vec<Tensor> = names.iter().map(|n| params[n].clone()).collect();
        values.push(Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap());
        let cfg2 = cfg.clone();
        let err = grad_check(
            &values,
            move |tape, ids| {
                let map = names
                    .iter()
                    .cloned()
                    .zip(ids.iter().copied())
                    .collect::<BTreeMap<_, _>>();
                let binds = Bindings { map };
                let out = bilstm(tape, &binds, &cfg2, *ids.last().unwrap(), &mut Mode::Eval)?;
                let w: Vec<f64> = (0..tape.value(out).numel())
                    .map(|i| ((i % 5) as f64 - 2.0) * 0.3)
                    .collect();
                let wt = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w)?);
                let prod = tape.mul(out, wt)?;
                Ok(tape.sum_all(prod))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bilstm grad error {err}");
    }

    #[test]
    fn bilstm_shape_mismatch_is_an_error() {
        let cfg = BiLstmConfig {
            num_layers: 1,
            hidden_per_direction: 2,
            inter_layer_dropout: 0.0,
        };
        let params = init_params(&bilstm_shapes(3, &cfg), StreamKey::root(1).child("init"));
        let mut tape = Tape::new();
        let binds = Bindings::bind(&mut tape, &params, false);
        let x = tape.leaf(Tensor::matrix(2, 5, vec![0.0; 10]).unwrap(), false);
        assert!(bilstm(&mut tape, &binds, &cfg, x, &mut Mode::Eval).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::tiny(64);
        cfg.num_heads = 3; // 16 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::tiny(64);
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::desk_default(100).validate().is_ok());
        assert!(EncoderConfig::paper_scale(31_090).validate().is_ok());
        assert!(BiLstmConfig::preset().validate().is_ok());
        assert_eq!(BiLstmConfig::preset().output_dim(), 600);
    }
}
