//! Numeric surrogates for the two loss-function sanity conditions, and the
//! differentiable penalty that pushes a learned loss toward satisfying them.
//!
//! Optimal stationarity: a zero loss-gradient (in the prediction) only at
//! global minimizers. MSE relation: the gradient vanishes exactly where
//! prediction equals target. Both are checked on a compact grid — a true
//! verification over all of ℝ is impossible numerically, so results are
//! grid-surrogate pass/fail with witness points.

use crate::autodiff::{Graph, NodeId, ZERO};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ActiveLoss;

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionWitness {
    /// MSE relation: nonzero gradient at prediction = target.
    GradNonzeroAtEqual { u: f64, grad: f64 },
    /// MSE relation: vanishing gradient away from the target.
    GradZeroAwayFromEqual { q: f64, u: f64, grad: f64 },
    /// Optimal stationarity: stationary grid point whose loss exceeds the
    /// grid minimum.
    StationaryAboveMin {
        q: f64,
        u: f64,
        value: f64,
        grid_min: f64,
    },
}

#[derive(Clone, Debug)]
pub struct ConditionReport {
    pub mse_relation: bool,
    pub optimal_stationarity: bool,
    pub witnesses: Vec<ConditionWitness>,
}

impl ConditionReport {
    pub fn both_pass(&self) -> bool {
        self.mse_relation && self.optimal_stationarity
    }
}

/// Target anchors the q-grid is centred on.
const U_ANCHORS: [f64; 3] = [-1.0, 0.0, 0.75];

/// Check both conditions for a pointwise loss ℓ(q, u) on grids of the given
/// half-range and resolution (odd, so q = u is a grid point) around each
/// anchor target. Gradients are central differences.
pub fn check_conditions(
    loss: &dyn Fn(f64, f64) -> f64,
    half_range: f64,
    resolution: usize,
    tol_zero: f64,
    tol_min: f64,
) -> ConditionReport {
    assert!(
        resolution >= 3 && resolution % 2 == 1,
        "resolution must be odd ≥ 3"
    );
    let m = (resolution - 1) / 2;
    let step = half_range / m as f64;
    let h = 1e-6;
    let mut witnesses = Vec::new();
    let mut mse = true;
    let mut os = true;

    for &u in &U_ANCHORS {
        let qs: Vec<f64> = (0..resolution)
            .map(|j| u + (j as isize - m as isize) as f64 * step)
            .collect();
        let grads: Vec<f64> = qs
            .iter()
            .map(|&q| (loss(q + h, u) - loss(q - h, u)) / (2.0 * h))
            .collect();
        let vals: Vec<f64> = qs.iter().map(|&q| loss(q, u)).collect();
        let grid_min = vals.iter().cloned().fold(f64::INFINITY, f64::min);

        // MSE relation
        if grads[m].abs() > tol_zero {
            mse = false;
            witnesses.push(ConditionWitness::GradNonzeroAtEqual { u, grad: grads[m] });
        }
        for j in 0..resolution {
            if j != m && grads[j].abs() <= tol_zero {
                mse = false;
                witnesses.push(ConditionWitness::GradZeroAwayFromEqual {
                    q: qs[j],
                    u,
                    grad: grads[j],
                });
            }
        }
        // optimal stationarity (grid surrogate)
        for j in 0..resolution {
            if grads[j].abs() <= tol_zero && vals[j] > grid_min + tol_min {
                os = false;
                witnesses.push(ConditionWitness::StationaryAboveMin {
                    q: qs[j],
                    u,
                    value: vals[j],
                    grid_min,
                });
            }
        }
    }
    ConditionReport {
        mse_relation: mse,
        optimal_stationarity: os,
        witnesses,
    }
}

/// Monte-Carlo penalty (differentiable w.r.t. the loss parameters in the
/// graph): mean ‖∇_q ℓ(q,q)‖² over draws plus mean hinge
/// max(0, c_margin − ‖∇_q ℓ(q,q′)‖²) over pairs with |q−q′| ≥ min_gap.
#[allow(clippy::too_many_arguments)]
pub fn penalty_eval(
    g: &mut Graph,
    loss: &ActiveLoss,
    domain: (f64, f64),
    n_pairs: usize,
    c_margin: f64,
    min_gap: f64,
    seed: u64,
) -> NodeId {
    assert!(c_margin > 0.0);
    assert!(domain.0 < domain.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zero_terms = Vec::with_capacity(n_pairs);
    let mut hinge_terms = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let q = rng.gen_range(domain.0..domain.1);
        let qn = g.leaf(q);
        let un = g.constant(q);
        let l = loss.point_loss(g, qn, un);
        let dq = g.grad_nodes(l, &[qn]).expect("penalty gradient emission");
        let sq = g.mul(dq[0], dq[0]);
        zero_terms.push(sq);

        let q1 = rng.gen_range(domain.0..domain.1);
        let q2 = loop {
            let c = rng.gen_range(domain.0..domain.1);
            if (c - q1).abs() >= min_gap {
                break c;
            }
        };
        let q1n = g.leaf(q1);
        let q2n = g.constant(q2);
        let l2 = loss.point_loss(g, q1n, q2n);
        let dq2 = g.grad_nodes(l2, &[q1n]).expect("penalty gradient emission");
        let sq2 = g.mul(dq2[0], dq2[0]);
        let cm = g.constant(c_margin);
        let gap = g.sub(cm, sq2);
        let hinge = g.max(ZERO, gap);
        hinge_terms.push(hinge);
    }
    let t1 = g.mean(&zero_terms);
    let t2 = g.mean(&hinge_terms);
    g.add(t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ffn::FfnLossParams;
    use crate::losses::lal::{LalBounds, LalParams};
    use crate::losses::standard::{StandardKind, StandardLoss};
    use crate::network::{params_to_consts, ParamVector};

    fn report_for_lal(alpha: f64, c: f64) -> ConditionReport {
        let p = LalParams::from_constrained(alpha, c, LalBounds::default()).unwrap();
        check_conditions(&|q, u| p.eval(q - u), 2.0, 401, 1e-6, 1e-6)
    }

    #[test]
    fn lal_passes_both_conditions() {
        let r = report_for_lal(1.5, 0.5);
        assert!(r.both_pass(), "witnesses: {:?}", r.witnesses);
    }

    #[test]
    fn shifted_loss_fails_mse_relation_at_q_equals_u() {
        let r = check_conditions(&|q, u| (q - u - 0.3) * (q - u - 0.3), 2.0, 401, 1e-6, 1e-6);
        assert!(!r.mse_relation);
        assert!(r.witnesses.iter().any(
            |w| matches!(w, ConditionWitness::GradNonzeroAtEqual { grad, .. }
                if (grad + 0.6).abs() < 1e-4)
        ));
    }

    #[test]
    fn double_well_fails_optimal_stationarity_at_zero() {
        let r = check_conditions(
            &|q, u| {
                let d = q - u;
                (d * d - 1.0) * (d * d - 1.0)
            },
            2.0,
            401,
            1e-6,
            1e-6,
        );
        assert!(!r.optimal_stationarity);
        assert!(r.witnesses.iter().any(|w| matches!(
            w,
            ConditionWitness::StationaryAboveMin { q, u, value, .. }
                if (q - u).abs() < 1e-9 && (value - 1.0).abs() < 1e-9
        )));
    }

    #[test]
    fn random_lal_parameters_pass() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let mut alpha: f64 = rng.gen_range(-4.0..4.0);
            while alpha.abs() < 1e-3 || (alpha - 2.0).abs() < 1e-3 {
                alpha = rng.gen_range(-4.0..4.0);
            }
            let c = rng.gen_range(0.1..3.0);
            let r = report_for_lal(alpha, c);
            assert!(r.both_pass(), "α={alpha} c={c}: {:?}", r.witnesses);
        }
    }

    #[test]
    fn penalty_on_squared_loss_has_zero_first_term() {
        let loss = ActiveLoss::Standard(StandardLoss::new(StandardKind::Squared, 1.0));
        // min_gap = 1.0: every pair has |∇|² = |q−q′|² ≥ 1 > c → hinge 0 too
        let mut g = Graph::new();
        let p = penalty_eval(&mut g, &loss, (-2.0, 2.0), 64, 1e-2, 1.0, 7);
        assert_eq!(g.value(p), 0.0);
    }

    #[test]
    fn penalty_on_constant_loss_saturates_to_margin() {
        // zero-weight FFN is a constant loss (softplus(0) everywhere)
        let params = FfnLossParams {
            params: ParamVector::zeros(FfnLossParams::n_params()),
        };
        let mut g = Graph::new();
        let eta = params_to_consts(&mut g, &params.params);
        let loss = ActiveLoss::Ffn { eta };
        let p = penalty_eval(&mut g, &loss, (-2.0, 2.0), 64, 1e-2, 1e-3, 7);
        assert!((g.value(p) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn penalty_is_differentiable_wrt_loss_parameters() {
        // LAL: penalty gradient w.r.t. (α̂, ĉ) via graph vs finite differences
        let bounds = LalBounds::default();
        let build_penalty = |ah: f64, ch: f64| -> (f64, Option<(f64, f64)>) {
            let mut g = Graph::new();
            let ahn = g.leaf(ah);
            let chn = g.leaf(ch);
            let (an, cn) = crate::losses::lal::lal_constrain_nodes(&mut g, ahn, chn, bounds);
            let loss = ActiveLoss::Lal { alpha: an, c: cn };
            let p = penalty_eval(&mut g, &loss, (-2.0, 2.0), 32, 1e-2, 1e-3, 3);
            let v = g.value(p);
            let gr = g.grad_values(p, &[ahn, chn]);
            (v, Some((gr[0], gr[1])))
        };
        let (_, grads) = build_penalty(0.3, 0.1);
        let (ga, gc) = grads.unwrap();
        let h = 1e-6;
        let fa = (build_penalty(0.3 + h, 0.1).0 - build_penalty(0.3 - h, 0.1).0) / (2.0 * h);
        let fc = (build_penalty(0.3, 0.1 + h).0 - build_penalty(0.3, 0.1 - h).0) / (2.0 * h);
        assert!((ga - fa).abs() <= 1e-5 * (1.0 + fa.abs()), "{ga} vs {fa}");
        assert!((gc - fc).abs() <= 1e-5 * (1.0 + fc.abs()), "{gc} vs {fc}");
    }
}
