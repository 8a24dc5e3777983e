//! Finite-difference certification of the backward pass.

use super::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct the scalar loss from the given leaves on a fresh
/// tape; it is invoked once per perturbed coordinate, so it has to be a pure
/// function of the leaf values. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, VarId, Vec<VarId>)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Shape("grad_check loss must be scalar".into()));
        }
        if !tape.value(loss).is_finite() {
            return Err(Error::Numeric("grad_check loss is not finite".into()));
        }
        Ok((tape, loss, ids))
    };

    let (mut tape, loss, ids) = eval(params)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (tape_p, loss_p, _) = eval(&work)?;
            let fp = tape_p.value(loss_p).item();
            work[pi].data_mut()[ci] = orig - h;
            let (tape_m, loss_m, _) = eval(&work)?;
            let fm = tape_m.value(loss_m).item();
            work[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(
                    "grad_check: non-finite loss at perturbed point".into(),
                ));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Reduction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn polynomial_case() {
        // f(x) = sum(x^2) at [1,2]: analytic grad [2,4], error < 1e-8.
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            &[x],
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum_all(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn cross_entropy_of_linear_case() {
        // f = cross_entropy(x @ w, targets) on a random 3x4 case.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let err = grad_check(
            &[x, w, b],
            |tape, ids| {
                let logits = tape.matmul(ids[0], ids[1])?;
                let logits = tape.add_row_vec(logits, ids[2])?;
                tape.cross_entropy_rows(logits, &[0, 2, 3], -1, Reduction::Mean)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[VarId]) -> crate::Result<VarId>>, Vec<Tensor>)> = vec![
            (
                "add/sub/mul/scale",
                Box::new(|tape, ids| {
                    let s = tape.add(ids[0], ids[1])?;
                    let d = tape.sub(s, ids[1])?;
                    let m = tape.mul(d, ids[0])?;
                    let sc = tape.scale(m, 1.7);
                    Ok(tape.sum_all(sc))
                }),
                vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
            ),
            (
                "matmul/transpose",
                Box::new(|tape, ids| {
                    let t = tape.transpose(ids[1])?;
                    let p = tape.matmul(ids[0], t)?;
                    let q = tape.matmul(p, ids[2])?;
                    Ok(tape.sum_all(q))
                }),
                vec![
                    rand_tensor(&mut rng, &[2, 3]),
                    rand_tensor(&mut rng, &[4, 3]),
                    rand_tensor(&mut rng, &[4, 2]),
                ],
            ),
            (
                "softmax_rows",
                Box::new(|tape, ids| {
                    let s = tape.softmax_rows(ids[0])?;
                    let w = tape.mul(s, ids[1])?;
                    Ok(tape.sum_all(w))
                }),
                vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[3, 5])],
            ),
            (
                "logsumexp_rows",
                Box::new(|tape, ids| {
                    let l = tape.logsumexp_rows(ids[0])?;
                    let l = tape.reshape(l, vec![1, 4])?;
                    let w = tape.mul(l, ids[1])?;
                    Ok(tape.sum_all(w))
                }),
                vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[1, 4])],
            ),
            (
                "layer_norm",
                Box::new(|tape, ids| {
                    let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-12)?;
                    let w = tape.mul(y, ids[3])?;
                    Ok(tape.sum_all(w))
                }),
                vec![
                    rand_tensor(&mut rng, &[3, 6]),
                    rand_tensor(&mut rng, &[6]),
                    rand_tensor(&mut rng, &[6]),
                    rand_tensor(&mut rng, &[3, 6]),
                ],
            ),
            (
                "gelu/tanh/sigmoid",
                Box::new(|tape, ids| {
                    let g = tape.gelu(ids[0]);
                    let t = tape.tanh(g);
                    let s = tape.sigmoid(t);
                    Ok(tape.sum_all(s))
                }),
                vec![rand_tensor(&mut rng, &[2, 7])],
            ),
            (
                "slice/concat/gather",
                Box::new(|tape, ids| {
                    let left = tape.slice_cols(ids[0], 0, 2)?;
                    let right = tape.slice_cols(ids[0], 2, 4)?;
                    let swapped = tape.concat_cols(&[right, left])?;
                    let rows = tape.gather_rows(swapped, &[1, 1, 0, 2])?;
                    let stacked = tape.concat_rows(&[rows, swapped])?;
                    let picked = tape.gather_flat(stacked, &[0, 5, 9, 13])?;
                    Ok(tape.sum_all(picked))
                }),
                vec![rand_tensor(&mut rng, &[3, 4])],
            ),
            (
                "broadcast adds",
                Box::new(|tape, ids| {
                    let a = tape.add_row_vec(ids[0], ids[1])?;
                    let b = tape.add_col_vec(a, ids[2])?;
                    let c = tape.add_const_row(b, &[0.3, -0.2, 0.9, 0.0])?;
                    let s = tape.softmax_rows(c)?;
                    Ok(tape.sum_all(s))
                }),
                vec![
                    rand_tensor(&mut rng, &[3, 4]),
                    rand_tensor(&mut rng, &[4]),
                    rand_tensor(&mut rng, &[3]),
                ],
            ),
            (
                "cross_entropy sum",
                Box::new(|tape, ids| {
                    tape.cross_entropy_rows(ids[0], &[1, -1, 0], -1, Reduction::Sum)
                }),
                vec![rand_tensor(&mut rng, &[3, 4])],
            ),
        ];
        for (name, build, params) in cases {
            let err = grad_check(&params, build.as_ref(), 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::vector(vec![1.0]);
        let res = grad_check(
            &[x],
            |tape, _ids| {
                let inf = tape.constant(Tensor::scalar(f64::INFINITY));
                Ok(tape.sum_all(inf))
            },
            1e-5,
        );
        assert!(res.is_err());
    }
}
