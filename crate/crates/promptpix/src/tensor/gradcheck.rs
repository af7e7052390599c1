//! Finite-difference verification of analytic gradients.
//!
//! Runs a scalar-valued function twice: once on a tape to collect analytic
//! gradients, then per probed element with central differences in `f64`.
//! Probes are a deterministic random subset so large tensors stay cheap.

use super::{Ctx, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct Report {
    /// Largest relative error seen across all probed elements.
    pub max_rel_err: f64,
    /// Number of elements probed.
    pub checked: usize,
}

/// Checks the analytic gradient of `f` (a scalar-valued function of the
/// given inputs) against central finite differences.
///
/// Up to `n_probes` elements per input are probed (all of them when the
/// tensor is smaller). The step is `1e-4 * max(1, |x|)` and the error is
/// `|a - n| / max(|a| + |n|, 1e-4)`; the denominator floor keeps
/// finite-difference noise from dominating near-zero gradients.
pub fn check<F>(inputs: &[ArrayD<f64>], n_probes: usize, seed: u64, f: F) -> Report
where
    F: Fn(&Ctx<f64>, &[Var<f64>]) -> Var<f64>,
{
    let tape = Tape::new();
    let cx = Ctx::with_tape(&tape);
    let vars: Vec<Var<f64>> = inputs.iter().map(|a| cx.leaf(a.clone())).collect();
    let out = f(&cx, &vars);
    assert_eq!(out.value().len(), 1, "gradcheck target must be scalar");
    let grads = tape.backward(&out);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            grads
                .of(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let cx = Ctx::<f64>::no_grad();
        let vars: Vec<Var<f64>> = xs.iter().map(|a| cx.leaf(a.clone())).collect();
        let out = f(&cx, &vars);
        *out.value().first().unwrap()
    };

    let mut rng = crate::seed::rng(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, a) in inputs.iter().enumerate() {
        let len = a.len();
        let idxs: Vec<usize> = if len <= n_probes {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, n_probes).into_vec()
        };
        for j in idxs {
            let x0 = a.as_slice().expect("standard layout")[j];
            let eps = 1e-4 * x0.abs().max(1.0);
            work[i].as_slice_mut().unwrap()[j] = x0 + eps;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = x0 - eps;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = x0;
            let num = (fp - fm) / (2.0 * eps);
            let ana = analytic[i].as_slice().unwrap()[j];
            let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Report {
        max_rel_err: max_rel,
        checked,
    }
}

/// Deterministic standard-normal tensor.
pub fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = crate::seed::rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

/// Deterministic uniform tensor on `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = crate::seed::rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn accepts_a_correct_gradient() {
        let x = randn(&[3, 3], 40);
        let rep = check(&[x], 9, 41, |cx, v| {
            ops::mean_all(cx, &ops::mul(cx, &v[0], &v[0]))
        });
        assert_eq!(rep.checked, 9);
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // scale() with a deliberately inconsistent forward: f = 2x but we
        // build it as x + detach(x), whose gradient is 1, not 2.
        let x = randn(&[4], 42);
        let rep = check(&[x], 4, 43, |cx, v| {
            let doubled = ops::add(cx, &v[0], &v[0].detach());
            ops::mean_all(cx, &doubled)
        });
        assert!(rep.max_rel_err > 0.3, "detach should halve the gradient");
    }

    #[test]
    fn probes_are_deterministic() {
        let x = randn(&[100], 44);
        let r1 = check(&[x.clone()], 5, 45, |cx, v| ops::mean_all(cx, &v[0]));
        let r2 = check(&[x], 5, 45, |cx, v| ops::mean_all(cx, &v[0]));
        assert_eq!(r1.max_rel_err, r2.max_rel_err);
        assert_eq!(r1.checked, 5);
    }
}
