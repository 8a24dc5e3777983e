//! Dense row-major `f64` tensors, the numeric kernels shared by forward and
//! backward passes, and a reverse-mode autodiff tape.
//!
//! All reductions run in a fixed left-to-right order; nothing is fused or
//! reordered, so a given seed reproduces bit-identical results on one
//! platform.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Reduction, Tape, VarId};

use crate::{Error, Result};

/// Dense tensor of 64-bit floats in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Scalar as a one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Single element of a `[1]`-shaped tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_rank2(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what} expects a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Value-level kernels. The tape ops reuse these so forward math has a single
// source of truth.
// ---------------------------------------------------------------------------

/// `a [m,k] @ b [k,n] -> [m,n]`, plain triple loop with ascending-k
/// accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_rank2("matmul lhs")?;
    b.require_rank2("matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: [{m},{k}] @ [{k2},{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    x.require_rank2("transpose")?;
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Softmax along `axis` with max-subtraction. Rejects NaN input and invalid
/// axes; output slices along `axis` are positive and sum to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let axis_len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            softmax_strided(&mut out, base, axis_len, inner);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_strided(data: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for t in 0..len {
        max = max.max(data[base + t * stride]);
    }
    let mut sum = 0.0;
    for t in 0..len {
        let e = (data[base + t * stride] - max).exp();
        data[base + t * stride] = e;
        sum += e;
    }
    for t in 0..len {
        data[base + t * stride] /= sum;
    }
}

pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in xs {
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &v in xs {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Layer normalization over the last dimension with population variance:
/// `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().ok_or_else(|| {
        Error::Shape("layer_norm expects a tensor with at least one axis".into())
    })?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias must have shape [{d}], got {:?} and {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        layer_norm_row(row, gain.data(), bias.data(), eps);
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn layer_norm_row(row: &mut [f64], gain: &[f64], bias: &[f64], eps: f64) {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &v in row.iter() {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in row.iter() {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    let inv = 1.0 / (var + eps).sqrt();
    for (j, v) in row.iter_mut().enumerate() {
        *v = gain[j] * (*v - mean) * inv + bias[j];
    }
}

/// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Negative log softmax probability of `target` under one logit row; rows
/// whose target equals `ignore_index` contribute 0 and are excluded from the
/// mean. `targets` has one entry per row of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[i64], ignore_index: i64) -> Result<f64> {
    logits.require_rank2("cross_entropy logits")?;
    let (n, k) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy got {} targets for {} rows",
            targets.len(),
            n
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        if t < 0 || t as usize >= k {
            return Err(Error::Invalid(format!(
                "cross_entropy target {t} out of range for {k} classes (row {i})"
            )));
        }
        let row = &logits.data[i * k..(i + 1) * k];
        total += logsumexp_slice(row) - row[t as usize];
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let two = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_close(two.data()[0], 0.5, 1e-15);
        assert_close(two.data()[1], 0.5, 1e-15);

        for c in [-1e6, -3.5, 0.0, 42.0, 1e6] {
            let t = softmax(&Tensor::vector(vec![c, c, c]), 0).unwrap();
            for &v in t.data() {
                assert_close(v, 1.0 / 3.0, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_derived_values() {
        // e^{x_i} / sum e^{x_j} for [1, 2, 3], evaluated by the closed form.
        let t = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        assert_close(t.data()[0], 0.09003057, 1e-8);
        assert_close(t.data()[1], 0.24472847, 1e-8);
        assert_close(t.data()[2], 0.66524096, 1e-8);
        let sum: f64 = t.data().iter().sum();
        assert_close(sum, 1.0, 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_axis_and_nan() {
        assert!(softmax(&Tensor::vector(vec![1.0]), 1).is_err());
        assert!(softmax(&Tensor::vector(vec![f64::NAN, 0.0]), 0).is_err());
    }

    #[test]
    fn softmax_axis_rows_of_matrix() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 5.0, 5.0]).unwrap();
        let s = softmax(&m, 1).unwrap();
        assert_close(s.at2(0, 0) + s.at2(0, 1), 1.0, 1e-12);
        assert_close(s.at2(1, 0), 0.5, 1e-12);
        // Axis 0 normalizes down the columns instead.
        let s0 = softmax(&m, 0).unwrap();
        assert_close(s0.at2(0, 0) + s0.at2(1, 0), 1.0, 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let gain = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let bias = Tensor::vector(vec![0.0, 0.0, 0.0]);

        // Constant vector: zero variance guarded by eps.
        let c = layer_norm(&Tensor::vector(vec![4.0, 4.0, 4.0]), &gain, &bias, 1e-12).unwrap();
        for &v in c.data() {
            assert_close(v, 0.0, 1e-9);
        }

        // [0,1,2] with population variance 2/3.
        let t = layer_norm(&Tensor::vector(vec![0.0, 1.0, 2.0]), &gain, &bias, 1e-12).unwrap();
        assert_close(t.data()[0], -1.22474487, 1e-7);
        assert_close(t.data()[1], 0.0, 1e-9);
        assert_close(t.data()[2], 1.22474487, 1e-7);

        // [1,-1] is already zero-mean unit-variance (population).
        let g2 = Tensor::vector(vec![1.0, 1.0]);
        let b2 = Tensor::vector(vec![0.0, 0.0]);
        let u = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &g2, &b2, 1e-300).unwrap();
        assert_close(u.data()[0], 1.0, 1e-9);
        assert_close(u.data()[1], -1.0, 1e-9);

        // Shape mismatch is an error.
        assert!(layer_norm(&Tensor::vector(vec![1.0, 2.0]), &gain, &bias, 1e-12).is_err());
    }

    #[test]
    fn gelu_cases() {
        assert_close(gelu_scalar(0.0), 0.0, 0.0);
        assert_close(gelu_scalar(10.0), 10.0, 1e-9);
        // 1 * Phi(1) from erf tables.
        assert_close(gelu_scalar(1.0), 0.8413447461, 1e-9);
    }

    #[test]
    fn cross_entropy_cases() {
        // Strongly peaked at the target: loss -> 0.
        let peaked = Tensor::matrix(1, 3, vec![100.0, 0.0, 0.0]).unwrap();
        assert_close(cross_entropy(&peaked, &[0], -1).unwrap(), 0.0, 1e-9);

        // Uniform logits over K=4 classes -> ln 4.
        let uniform = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert_close(cross_entropy(&uniform, &[2], -1).unwrap(), 1.38629436, 1e-8);

        // logits [1,2,3], target 0 -> -log(0.09003057).
        let l = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_close(cross_entropy(&l, &[0], -1).unwrap(), 2.40760596, 1e-8);

        // Ignored rows contribute nothing and are excluded from the mean.
        let two = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0]).unwrap();
        assert_close(cross_entropy(&two, &[0, -1], -1).unwrap(), 2.40760596, 1e-8);

        // Out-of-range target is an error.
        assert!(cross_entropy(&l, &[3], -1).is_err());
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let a_data: Vec<f64> = (0..8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::matrix(8, 8, a_data.clone()).unwrap();
        let b = Tensor::matrix(8, 8, b_data.clone()).unwrap();
        let c = matmul(&a, &b).unwrap();
        // Independent triple loop in the same operand order.
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for p in 0..8 {
                    acc += a_data[i * 8 + p] * b_data[p * 8 + j];
                }
                assert_eq!(acc, c.at2(i, j), "exact match expected at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
                Tensor::matrix(8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                assert!((l - r).abs() / denom < 1e-9);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }
}
