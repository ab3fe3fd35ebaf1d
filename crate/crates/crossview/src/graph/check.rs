//! Central-difference gradient verification.

use super::{Graph, NodeId, ParamId, Params, Precision};

/// Compare reverse-mode gradients against central finite differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every component of the listed parameters,
/// and return the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The loss builder must be deterministic (dropout in eval mode); it is
/// invoked on fresh identically-seeded double-precision graphs, so a builder
/// that consumes graph randomness still sees the same draws on every call.
pub fn grad_check<F>(params: &mut Params, param_ids: &[ParamId], build: F, h: f64) -> f64
where
    F: Fn(&mut Graph, &Params) -> NodeId,
{
    debug_assert_eq!(
        params.precision(),
        Precision::Double,
        "grad_check is only meaningful in double precision"
    );

    let eval = |params: &Params| -> f64 {
        let mut g = Graph::new(Precision::Double, 0);
        let loss = build(&mut g, params);
        g.scalar_value(loss)
    };

    let mut g = Graph::new(Precision::Double, 0);
    let loss = build(&mut g, params);
    let grads = g.backward(loss).expect("grad_check loss must be scalar");

    let mut worst = 0.0f64;
    for &pid in param_ids {
        let analytic: Vec<f64> = grads
            .param(pid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params.values(pid).len()]);
        for i in 0..analytic.len() {
            let orig = params.values(pid)[i];
            params.values_mut(pid)[i] = orig + h;
            let f_plus = eval(params);
            params.values_mut(pid)[i] = orig - h;
            let f_minus = eval(params);
            params.values_mut(pid)[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{cross_entropy, Init};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_matches_numeric_for_affine_softmax_ce() {
        // affine layer + softmax cross-entropy on a random 5x4 input
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new(Precision::Double);
        let w = params.add("w", &[4, 5], Init::Glorot, &mut rng);
        let b = params.add("b", &[4], Init::Const(0.1), &mut rng);
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let err = grad_check(
            &mut params,
            &[w, b],
            |g, p| {
                let wn = g.param(p, w);
                let bn = g.param(p, b);
                let mut losses = Vec::new();
                for (k, x) in inputs.iter().enumerate() {
                    let xn = g.leaf(x.clone(), vec![5]);
                    let lin = g.matvec(wn, xn);
                    let logits = g.add(lin, bn);
                    let probs = g.softmax1d(logits);
                    let target = g.leaf(
                        crate::graph::smoothed_target(k % 4, 4, 0.0),
                        vec![4],
                    );
                    losses.push(cross_entropy(g, target, probs));
                }
                let total = g.sum_list(&losses);
                let n = losses.len() as f64;
                g.scale(total, 1.0 / n)
            },
            1e-4,
        );
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sanity: a deliberately broken loss (uses stop_grad) shows up as a
        // large discrepancy, proving the checker is not vacuous
        let mut params = Params::new(Precision::Double);
        let x = params.add_const("x", &[], &[0.7]);
        let err = grad_check(
            &mut params,
            &[x],
            |g, p| {
                let xn = g.param(p, x);
                let fixed = g.stop_grad(xn);
                // analytic grad is 0 through stop_grad, numeric is 2x ≠ 0
                g.mul(fixed, fixed)
            },
            1e-4,
        );
        assert!(err > 0.9, "checker failed to flag the mismatch: {err}");
    }

    #[test]
    fn kl_divergence_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::new(Precision::Double);
        let lp = params.add("logits_p", &[6], Init::Glorot, &mut rng);
        let lq = params.add("logits_q", &[6], Init::Glorot, &mut rng);
        let err = grad_check(
            &mut params,
            &[lp, lq],
            |g, p| {
                let pn = g.param(p, lp);
                let qn = g.param(p, lq);
                let ps = g.softmax1d(pn);
                let qs = g.softmax1d(qn);
                crate::graph::kl_divergence(g, ps, qs).unwrap()
            },
            1e-4,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }
}
