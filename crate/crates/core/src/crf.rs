//! Linear-chain conditional random field: sequence scoring, exact
//! log-partition via the forward algorithm, NLL, and Viterbi decoding.
//!
//! Boundary scores are explicit `start`/`end` vectors rather than augmented
//! states. Decoding ties are broken toward the lowest label index so results
//! are deterministic. The differentiable path composes tape primitives, so
//! gradients w.r.t. emissions and all three parameter tensors come from the
//! same backward machinery as the rest of the model.

use crate::tensor::{logsumexp_slice, Tape, Tensor, VarId};
use crate::{Error, Result};

/// Transition, start, and end scores over `K` labels.
#[derive(Debug, Clone)]
pub struct CrfParams {
    /// `[K,K]`; entry `(i,j)` scores the move from label `i` to label `j`.
    pub transitions: Tensor,
    pub start: Tensor,
    pub end: Tensor,
}

impl CrfParams {
    pub fn zeros(num_labels: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(&[num_labels, num_labels]),
            start: Tensor::zeros(&[num_labels]),
            end: Tensor::zeros(&[num_labels]),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels();
        if k == 0 {
            return Err(Error::Invalid("CRF needs at least one label".into()));
        }
        if self.transitions.shape() != [k, k] || self.end.shape() != [k] {
            return Err(Error::Shape(format!(
                "CRF parameter shapes inconsistent for K={k}"
            )));
        }
        if !self.transitions.is_finite() || !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Numeric("CRF parameters must be finite".into()));
        }
        Ok(())
    }
}

fn check_inputs(emissions: &Tensor, params: &CrfParams, labels: Option<&[usize]>) -> Result<()> {
    params.validate()?;
    let k = params.num_labels();
    if emissions.rank() != 2 || emissions.cols() != k {
        return Err(Error::Shape(format!(
            "emissions must be [n,{k}], got {:?}",
            emissions.shape()
        )));
    }
    if emissions.rows() == 0 {
        return Err(Error::Invalid("emissions must cover at least one position".into()));
    }
    if let Some(labels) = labels {
        if labels.len() != emissions.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} positions",
                labels.len(),
                emissions.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for K={k}")));
        }
    }
    Ok(())
}

/// `start[y1] + sum emissions[t][y_t] + sum transitions[y_t][y_{t+1}] + end[y_n]`.
pub fn path_score(emissions: &Tensor, labels: &[usize], params: &CrfParams) -> Result<f64> {
    check_inputs(emissions, params, Some(labels))?;
    let mut score = params.start.data()[labels[0]] + params.end.data()[labels[labels.len() - 1]];
    for (t, &y) in labels.iter().enumerate() {
        score += emissions.at2(t, y);
    }
    for w in labels.windows(2) {
        score += params.transitions.at2(w[0], w[1]);
    }
    Ok(score)
}

/// `log sum over all K^n labelings of exp(path_score)`, by the forward
/// algorithm in log space; `O(n K^2)`.
pub fn log_partition(emissions: &Tensor, params: &CrfParams) -> Result<f64> {
    check_inputs(emissions, params, None)?;
    let (n, k) = (emissions.rows(), emissions.cols());
    let mut alpha: Vec<f64> = (0..k)
        .map(|j| params.start.data()[j] + emissions.at2(0, j))
        .collect();
    let mut scratch = vec![0.0; k];
    for t in 1..n {
        let mut next = vec![0.0; k];
        for j in 0..k {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = alpha[i] + params.transitions.at2(i, j);
            }
            next[j] = logsumexp_slice(&scratch) + emissions.at2(t, j);
        }
        alpha = next;
    }
    for (j, s) in scratch.iter_mut().enumerate() {
        *s = alpha[j] + params.end.data()[j];
    }
    Ok(logsumexp_slice(&scratch))
}

/// `log_partition - path_score(labels)`; non-negative.
pub fn nll(emissions: &Tensor, labels: &[usize], params: &CrfParams) -> Result<f64> {
    Ok(log_partition(emissions, params)? - path_score(emissions, labels, params)?)
}

/// Argmax labeling and its score; ties broken toward the lowest label index
/// at each backtrack step. The returned score equals
/// `path_score(returned labels)`.
pub fn viterbi(emissions: &Tensor, params: &CrfParams) -> Result<(Vec<usize>, f64)> {
    check_inputs(emissions, params, None)?;
    let (n, k) = (emissions.rows(), emissions.cols());
    let mut delta: Vec<f64> = (0..k)
        .map(|j| params.start.data()[j] + emissions.at2(0, j))
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for t in 1..n {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut argmax = vec![0usize; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..k {
                let cand = delta[i] + params.transitions.at2(i, j);
                // Strict improvement keeps the lowest index on ties.
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            next[j] = best + emissions.at2(t, j);
            argmax[j] = best_i;
        }
        back.push(argmax);
        delta = next;
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0usize;
    for j in 0..k {
        let cand = delta[j] + params.end.data()[j];
        if cand > best {
            best = cand;
            last = j;
        }
    }
    let mut labels = vec![0usize; n];
    labels[n - 1] = last;
    for t in (0..n - 1).rev() {
        labels[t] = back[t][labels[t + 1]];
    }
    let score = path_score(emissions, &labels, params)?;
    Ok((labels, score))
}

// ---------------------------------------------------------------------------
// Differentiable route (tape composition)
// ---------------------------------------------------------------------------

/// CRF parameter variables registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CrfVars {
    pub transitions: VarId,
    pub start: VarId,
    pub end: VarId,
}

/// Tape version of `log_partition`; emissions is a `[n,K]` variable.
pub fn log_partition_var(tape: &mut Tape, emissions: VarId, vars: CrfVars) -> Result<VarId> {
    let (n, k) = {
        let e = tape.value(emissions);
        if e.rank() != 2 || e.rows() == 0 {
            return Err(Error::Shape(format!(
                "emissions must be non-empty [n,K], got {:?}",
                e.shape()
            )));
        }
        (e.rows(), e.cols())
    };
    let e0 = tape.gather_rows(emissions, &[0])?;
    let e0 = tape.reshape(e0, vec![k])?;
    let mut alpha = tape.add(e0, vars.start)?; // [k]
    for t in 1..n {
        // M[i,j] = alpha[i] + transitions[i][j]
        let m = tape.add_col_vec(vars.transitions, alpha)?;
        // logsumexp over i (rows of M^T)
        let mt = tape.transpose(m)?;
        let lse = tape.logsumexp_rows(mt)?; // [k]
        let et = tape.gather_rows(emissions, &[t])?;
        let et = tape.reshape(et, vec![k])?;
        alpha = tape.add(lse, et)?;
    }
    let fin = tape.add(alpha, vars.end)?;
    let fin = tape.reshape(fin, vec![1, k])?;
    let z = tape.logsumexp_rows(fin)?; // [1]
    Ok(z)
}

/// Tape version of `path_score`.
pub fn path_score_var(
    tape: &mut Tape,
    emissions: VarId,
    labels: &[usize],
    vars: CrfVars,
) -> Result<VarId> {
    let k = tape.value(emissions).cols();
    if labels.is_empty() || labels.len() != tape.value(emissions).rows() {
        return Err(Error::Shape("labels must match emission rows".into()));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::Invalid("label out of range".into()));
    }
    let emit_offsets: Vec<usize> = labels.iter().enumerate().map(|(t, &y)| t * k + y).collect();
    let emit = tape.gather_flat(emissions, &emit_offsets)?;
    let mut score = tape.sum_all(emit);
    if labels.len() > 1 {
        let trans_offsets: Vec<usize> = labels.windows(2).map(|w| w[0] * k + w[1]).collect();
        let trans = tape.gather_flat(vars.transitions, &trans_offsets)?;
        let trans_sum = tape.sum_all(trans);
        score = tape.add(score, trans_sum)?;
    }
    let boundary_start = tape.gather_flat(vars.start, &[labels[0]])?;
    let boundary_end = tape.gather_flat(vars.end, &[labels[labels.len() - 1]])?;
    let score = tape.add(score, boundary_start)?;
    tape.add(score, boundary_end)
}

/// Differentiable `log_partition - path_score`, usable as a training loss.
pub fn nll_var(tape: &mut Tape, emissions: VarId, labels: &[usize], vars: CrfVars) -> Result<VarId> {
    let z = log_partition_var(tape, emissions, vars)?;
    let s = path_score_var(tape, emissions, labels, vars)?;
    tape.sub(z, s)
}

/// Enumerates all `K^n` labelings; the brute-force oracle used by tests.
pub fn enumerate_labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k.pow(n as u32));
    let mut cur = vec![0usize; n];
    loop {
        out.push(cur.clone());
        let mut t = n;
        loop {
            if t == 0 {
                return out;
            }
            t -= 1;
            cur[t] += 1;
            if cur[t] < k {
                break;
            }
            cur[t] = 0;
        }
    }
}
