//! Finite-difference gradient checking.
//!
//! Central differences give an autodiff-independent estimate of a
//! gradient; comparing against the tape's output catches sign errors,
//! dropped terms, and broken accumulation. Used throughout the test
//! suites and available to callers wiring up their own models.

use super::{Result, Tensor};

/// Central-difference gradient of `f` with respect to every entry of
/// every tensor in `params`, using the two-sided stencil
/// `(f(x + h) - f(x - h)) / 2h`.
///
/// `f` is called with the perturbed parameter set and must be
/// deterministic; any randomness (dropout, sampling) has to be frozen
/// while checking.
pub fn central_diff<F>(params: &[Tensor], step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for k in 0..work.len() {
        let mut g = vec![0.0; work[k].numel()];
        for e in 0..work[k].numel() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let up = f(&work)?;
            work[k].data_mut()[e] = orig - step;
            let down = f(&work)?;
            work[k].data_mut()[e] = orig;
            g[e] = (up - down) / (2.0 * step);
        }
        grads.push(Tensor::new_unchecked(work[k].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Largest relative error between two gradients, entry by entry:
/// `|a - b| / max(1e-6, |a|, |b|)`. The floor keeps near-zero entries
/// from blowing up the ratio.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "gradient shapes must match"
    );
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / 1e-6f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}

/// [`max_rel_err`] across a whole parameter list.
pub fn max_rel_err_all(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "parameter counts differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| max_rel_err(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Tape;

    /// Every differentiable op, finite-difference checked in one composed
    /// graph per op so shape plumbing stays honest.
    #[test]
    fn each_op_matches_central_differences() {
        type Builder = fn(&mut Tape, crate::numgrad::Var) -> crate::numgrad::Var;
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, w| {
                let c = t
                    .constant(Tensor::new(vec![3, 2], vec![0.4, -1.1, 0.9, 0.2, -0.5, 0.3]).unwrap())
                    .unwrap();
                let p = t.matmul(w, c).unwrap();
                t.sum_all(p).unwrap()
            }),
            ("transpose", |t, w| {
                let wt = t.transpose(w).unwrap();
                let sq = t.mul(wt, wt).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("add_sub_mul", |t, w| {
                let a = t.add(w, w).unwrap();
                let s = t.sub(a, w).unwrap();
                let m = t.mul(s, a).unwrap();
                t.mean_all(m).unwrap()
            }),
            ("add_row", |t, w| {
                let row = t
                    .constant(Tensor::new(vec![3], vec![0.3, -0.6, 1.2]).unwrap())
                    .unwrap();
                let y = t.add_row(w, row).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("scale_relu", |t, w| {
                let s = t.scale(w, -1.7).unwrap();
                let r = t.relu(s).unwrap();
                t.sum_all(r).unwrap()
            }),
            ("softmax_rows", |t, w| {
                let y = t.softmax(w, 1).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("softmax_cols", |t, w| {
                let y = t.softmax(w, 0).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("mean_rows", |t, w| {
                let m = t.mean_rows(w).unwrap();
                let sq = t.mul(m, m).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("gather_stack", |t, w| {
                let g = t.gather_rows(w, &[1, 0, 1]).unwrap();
                let s = t.stack_rows(&[g, w]).unwrap();
                let sq = t.mul(s, s).unwrap();
                t.mean_all(sq).unwrap()
            }),
            ("slice_concat", |t, w| {
                let l = t.slice_cols(w, 0, 1).unwrap();
                let r = t.slice_cols(w, 1, 2).unwrap();
                let c = t.concat_cols(&[r, l]).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum_all(sq).unwrap()
            }),
        ];

        let w0 = Tensor::new(vec![2, 3], vec![0.8, -0.3, 1.4, -2.0, 0.6, 0.1]).unwrap();
        for (name, build) in cases {
            let eval = |params: &[Tensor]| -> crate::numgrad::Result<f64> {
                let mut t = Tape::new();
                let w = t.leaf(params[0].clone().with_grad())?;
                let loss = build(&mut t, w);
                Ok(t.value(loss).item())
            };
            let numeric = central_diff(std::slice::from_ref(&w0), 1e-5, eval).unwrap();

            let mut t = Tape::new();
            let w = t.leaf(w0.clone().with_grad()).unwrap();
            let loss = build(&mut t, w);
            let grads = t.backward(loss).unwrap();
            let analytic = grads.get(w).unwrap();

            let err = max_rel_err(analytic, &numeric[0]);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_matches_central_differences() {
        let x0 = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.2, 0.7, -0.4, 0.0, 1.5, -2.1]).unwrap();
        let g0 = Tensor::new(vec![4], vec![1.2, 0.8, -0.5, 1.0]).unwrap();
        let b0 = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.4]).unwrap();
        let params = vec![x0, g0, b0];

        let eval = |p: &[Tensor]| -> crate::numgrad::Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(p[0].clone().with_grad())?;
            let g = t.leaf(p[1].clone().with_grad())?;
            let b = t.leaf(p[2].clone().with_grad())?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let sq = t.mul(y, y)?;
            let loss = t.sum_all(sq)?;
            Ok(t.value(loss).item())
        };
        let numeric = central_diff(&params, 1e-5, eval).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(params[0].clone().with_grad()).unwrap();
        let g = t.leaf(params[1].clone().with_grad()).unwrap();
        let b = t.leaf(params[2].clone().with_grad()).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let sq = t.mul(y, y).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let grads = t.backward(loss).unwrap();

        for (i, v) in [x, g, b].into_iter().enumerate() {
            let err = max_rel_err(grads.get(v).unwrap(), &numeric[i]);
            assert!(err <= 1e-4, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn logistic_loss_matches_central_differences() {
        for y in [0.0, 0.5, 1.0] {
            let d0 = Tensor::new(vec![1, 1], vec![0.37]).unwrap();
            let eval = |p: &[Tensor]| -> crate::numgrad::Result<f64> {
                let mut t = Tape::new();
                let d = t.leaf(p[0].clone().with_grad())?;
                let l = t.logistic_loss(d, y)?;
                Ok(t.value(l).item())
            };
            let numeric = central_diff(std::slice::from_ref(&d0), 1e-5, eval).unwrap();

            let mut t = Tape::new();
            let d = t.leaf(d0.clone().with_grad()).unwrap();
            let l = t.logistic_loss(d, y).unwrap();
            let grads = t.backward(l).unwrap();
            let err = max_rel_err(grads.get(d).unwrap(), &numeric[0]);
            assert!(err <= 1e-6, "y={y}: rel err {err}");
        }
    }

    #[test]
    fn composed_graph_matches_central_differences() {
        // A miniature of the real model: projection, softmax attention
        // pattern, normalization, pooling.
        let w1 = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.11 - 0.6).collect())
            .unwrap();
        let w2 = Tensor::new(vec![4, 4], (0..16).map(|i| ((i * 7 % 5) as f64) * 0.2 - 0.4).collect())
            .unwrap();
        let g = Tensor::ones(vec![4]);
        let b = Tensor::zeros(vec![4]);
        let params = vec![w1, w2, g, b];

        let eval = |p: &[Tensor]| -> crate::numgrad::Result<f64> {
            let mut t = Tape::new();
            let x = t.constant(
                Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.8, 1.1, 0.0, -0.7]).unwrap(),
            )?;
            let w1 = t.leaf(p[0].clone().with_grad())?;
            let w2 = t.leaf(p[1].clone().with_grad())?;
            let g = t.leaf(p[2].clone().with_grad())?;
            let b = t.leaf(p[3].clone().with_grad())?;
            let h = t.matmul(x, w1)?;
            let ht = t.transpose(h)?;
            let scores = t.matmul(h, ht)?;
            let attn = t.softmax(scores, 1)?;
            let mixed = t.matmul(attn, h)?;
            let proj = t.matmul(mixed, w2)?;
            let act = t.relu(proj)?;
            let res = t.add(act, h)?;
            let normed = t.layer_norm(res, g, b, 1e-5)?;
            let pooled = t.mean_rows(normed)?;
            let loss = t.mean_all(pooled)?;
            Ok(t.value(loss).item())
        };
        let numeric = central_diff(&params, 1e-5, eval).unwrap();

        let mut t = Tape::new();
        let x = t
            .constant(Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.8, 1.1, 0.0, -0.7]).unwrap())
            .unwrap();
        let vars: Vec<_> = params
            .iter()
            .map(|p| t.leaf(p.clone().with_grad()).unwrap())
            .collect();
        let h = t.matmul(x, vars[0]).unwrap();
        let ht = t.transpose(h).unwrap();
        let scores = t.matmul(h, ht).unwrap();
        let attn = t.softmax(scores, 1).unwrap();
        let mixed = t.matmul(attn, h).unwrap();
        let proj = t.matmul(mixed, vars[1]).unwrap();
        let act = t.relu(proj).unwrap();
        let res = t.add(act, h).unwrap();
        let normed = t.layer_norm(res, vars[2], vars[3], 1e-5).unwrap();
        let pooled = t.mean_rows(normed).unwrap();
        let loss = t.mean_all(pooled).unwrap();
        let grads = t.backward(loss).unwrap();

        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.get(v).unwrap().clone())
            .collect();
        let err = max_rel_err_all(&analytic, &numeric);
        assert!(err <= 1e-4, "rel err {err}");
    }
}
