//! The learnable adaptive robust loss: a two-parameter family ρ_{α,c}
//! interpolating squared error (α→2), Cauchy (α→0), Geman–McClure (α=−2)
//! and Welsch (α→−∞), with unconstrained parameters mapped through a
//! sigmoid (α within bounds) and a softplus (c > c_min).

use crate::autodiff::{sigmoid, softplus, Graph, NodeId, ONE};
use serde::{Deserialize, Serialize};

use super::LossError;

pub const DEFAULT_ALPHA_MIN: f64 = -6.0;
pub const DEFAULT_ALPHA_MAX: f64 = 4.0;
pub const DEFAULT_C_MIN: f64 = 1e-8;

/// Radius of the analytic-branch window around the removable singularities
/// α = 0 and α = 2.
pub const BRANCH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LalBounds {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub c_min: f64,
}

impl Default for LalBounds {
    fn default() -> Self {
        LalBounds {
            alpha_min: DEFAULT_ALPHA_MIN,
            alpha_max: DEFAULT_ALPHA_MAX,
            c_min: DEFAULT_C_MIN,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LalParams {
    pub alpha_hat: f64,
    pub c_hat: f64,
    pub bounds: LalBounds,
}

impl LalParams {
    pub fn new(alpha_hat: f64, c_hat: f64, bounds: LalBounds) -> Result<Self, LossError> {
        if bounds.alpha_min.partial_cmp(&bounds.alpha_max) != Some(std::cmp::Ordering::Less) {
            return Err(LossError::BadBounds);
        }
        let p = LalParams {
            alpha_hat,
            c_hat,
            bounds,
        };
        let (alpha, _) = p.constrained();
        if alpha == 0.0 || alpha == 2.0 {
            return Err(LossError::AlphaDegenerate(alpha));
        }
        Ok(p)
    }

    /// Parameters whose mapped (α, c) are as close as the constraint allows
    /// to the requested values.
    pub fn from_constrained(alpha: f64, c: f64, bounds: LalBounds) -> Result<Self, LossError> {
        let p = (alpha - bounds.alpha_min) / (bounds.alpha_max - bounds.alpha_min);
        if !(0.0..=1.0).contains(&p) {
            return Err(LossError::BadBounds);
        }
        let alpha_hat = (p / (1.0 - p)).ln();
        let c_hat = inv_softplus(c - bounds.c_min);
        LalParams::new(alpha_hat, c_hat, bounds)
    }

    /// The squared-error-like starting point α = 2.01, c = 1/√2 (ρ ≈ d²).
    pub fn squared_like(bounds: LalBounds) -> Self {
        LalParams::from_constrained(2.01, std::f64::consts::FRAC_1_SQRT_2, bounds)
            .expect("default bounds contain (2.01, 1/√2)")
    }

    pub fn constrained(&self) -> (f64, f64) {
        lal_constrain(self.alpha_hat, self.c_hat, self.bounds)
    }

    pub fn eval(&self, d: f64) -> f64 {
        let (alpha, c) = self.constrained();
        lal_rho(alpha, c, d)
    }
}

/// α = (α_max − α_min)·σ(α̂) + α_min, c = softplus(ĉ) + c_min.
pub fn lal_constrain(alpha_hat: f64, c_hat: f64, bounds: LalBounds) -> (f64, f64) {
    (
        (bounds.alpha_max - bounds.alpha_min) * sigmoid(alpha_hat) + bounds.alpha_min,
        softplus(c_hat) + bounds.c_min,
    )
}

/// softplus⁻¹(y) = ln(e^y − 1), stable for small and large y.
pub fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Graph form of the constraint map; returns (α node, c node).
pub fn lal_constrain_nodes(
    g: &mut Graph,
    alpha_hat: NodeId,
    c_hat: NodeId,
    bounds: LalBounds,
) -> (NodeId, NodeId) {
    let s = g.sigmoid(alpha_hat);
    let range = g.constant(bounds.alpha_max - bounds.alpha_min);
    let scaled = g.mul(range, s);
    let amin = g.constant(bounds.alpha_min);
    let alpha = g.add(scaled, amin);
    let sp = g.softplus(c_hat);
    let cmin = g.constant(bounds.c_min);
    let c = g.add(sp, cmin);
    (alpha, c)
}

/// ρ_{α,c}(d) = (|α−2|/α)·( ((d/c)²/|α−2| + 1)^{α/2} − 1 ), with the
/// analytic limits substituted inside a ±1e-6 window of the removable
/// singularities: α≈0 → log(½(d/c)²+1), α≈2 → ½(d/c)².
pub fn lal_rho(alpha: f64, c: f64, d: f64) -> f64 {
    let x = (d / c) * (d / c);
    if (alpha - 2.0).abs() < BRANCH_EPS {
        0.5 * x
    } else if alpha.abs() < BRANCH_EPS {
        (0.5 * x + 1.0).ln()
    } else {
        let am2 = (alpha - 2.0).abs();
        (am2 / alpha) * ((x / am2 + 1.0).powf(0.5 * alpha) - 1.0)
    }
}

/// ∂ρ/∂d closed form (general branch: (d/c²)·((d/c)²/|α−2| + 1)^{α/2−1}).
pub fn lal_rho_deriv(alpha: f64, c: f64, d: f64) -> f64 {
    let x = (d / c) * (d / c);
    if (alpha - 2.0).abs() < BRANCH_EPS {
        d / (c * c)
    } else if alpha.abs() < BRANCH_EPS {
        d / (c * c) / (0.5 * x + 1.0)
    } else {
        let am2 = (alpha - 2.0).abs();
        d / (c * c) * (x / am2 + 1.0).powf(0.5 * alpha - 1.0)
    }
}

/// Graph form of ρ on a discrepancy node, differentiable w.r.t. α, c and d
/// nodes. The branch is chosen by the *current* α value; within the ±1e-6
/// analytic windows the α-derivative of the branch switch is dropped (the
/// windows exist for evaluation robustness at the removable singularities).
pub fn lal_rho_nodes(g: &mut Graph, alpha: NodeId, c: NodeId, d: NodeId) -> NodeId {
    let a_val = g.value(alpha);
    let dc = g.div(d, c);
    let x = g.mul(dc, dc);
    if (a_val - 2.0).abs() < BRANCH_EPS {
        let half = g.constant(0.5);
        g.mul(half, x)
    } else if a_val.abs() < BRANCH_EPS {
        let half = g.constant(0.5);
        let hx = g.mul(half, x);
        let arg = g.add(hx, ONE);
        g.log(arg)
    } else {
        let two = g.constant(2.0);
        let am2raw = g.sub(alpha, two);
        let am2 = g.abs(am2raw);
        let inner = g.div(x, am2);
        let base = g.add(inner, ONE);
        let half = g.constant(0.5);
        let expo = g.mul(half, alpha);
        let p = g.pow(base, expo);
        let pm1 = g.sub(p, ONE);
        let pref = g.div(am2, alpha);
        g.mul(pref, pm1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::losses::standard::{StandardKind, StandardLoss};

    #[test]
    fn constraint_examples() {
        let b = LalBounds {
            alpha_min: 0.0,
            alpha_max: 4.0,
            c_min: 1e-8,
        };
        let (a, _) = lal_constrain(0.0, 0.0, b);
        assert!((a - 2.0).abs() < 1e-15);
        let (_, c) = lal_constrain(0.0, -40.0, b);
        assert!((c - b.c_min).abs() < 1e-17);
        let b2 = LalBounds {
            alpha_min: 0.0,
            alpha_max: 3.01,
            c_min: 1e-8,
        };
        let (a2, _) = lal_constrain(20.0, 0.0, b2);
        assert!((a2 - 3.01).abs() < 1e-8);
    }

    #[test]
    fn from_constrained_roundtrip() {
        let b = LalBounds::default();
        let p = LalParams::from_constrained(-1.7, 0.42, b).unwrap();
        let (a, c) = p.constrained();
        assert!((a + 1.7).abs() < 1e-12);
        assert!((c - 0.42).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_alpha() {
        let b = LalBounds {
            alpha_min: 0.0,
            alpha_max: 4.0,
            c_min: 1e-8,
        };
        // α̂=0 maps to exactly 2 under these bounds
        assert!(matches!(
            LalParams::new(0.0, 0.0, b),
            Err(LossError::AlphaDegenerate(_))
        ));
        let b0 = LalBounds {
            alpha_min: -2.0,
            alpha_max: 2.0,
            c_min: 1e-8,
        };
        assert!(matches!(
            LalParams::new(0.0, 0.0, b0),
            Err(LossError::AlphaDegenerate(_))
        ));
    }

    #[test]
    fn squared_like_approximates_d_squared() {
        let p = LalParams::squared_like(LalBounds::default());
        let (a, c) = p.constrained();
        assert!((a - 2.01).abs() < 1e-10);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        let v = p.eval(0.1);
        assert!((v - 0.01).abs() / 0.01 < 0.02, "{v}");
        assert_eq!(p.eval(0.0), 0.0);
    }

    #[test]
    fn gmc_exact_at_minus_two() {
        // α=−2 reduces algebraically to Geman–McClure for any c
        for &c in &[0.5, 1.0, 2.0] {
            let gmc = StandardLoss::new(StandardKind::GemanMcclure, c);
            for i in 0..61 {
                let d = -3.0 + 0.1 * i as f64;
                let got = lal_rho(-2.0, c, d);
                assert!(
                    (got - gmc.eval(d)).abs() < 1e-12,
                    "c={c} d={d}: {got} vs {}",
                    gmc.eval(d)
                );
            }
        }
        assert!((lal_rho(-2.0, 1.0, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn limit_suite() {
        let grid: Vec<f64> = (0..=600).map(|i| -3.0 + 0.01 * i as f64).collect();
        let sup = |f: &dyn Fn(f64) -> f64, r: &dyn Fn(f64) -> f64| {
            grid.iter()
                .map(|&d| (f(d) - r(d)).abs())
                .fold(0.0f64, f64::max)
        };
        // α→2 via 2±1e-4: convergence is O(ε·ln x), slowest where (d/c)² is
        // large, so the sup over d∈[−3,3] shrinks with larger c; c=2 keeps
        // it comfortably under 1e-3 (c=1 would sit at ≈2.3e-3).
        let c2 = 2.0;
        for a in [2.0 + 1e-4, 2.0 - 1e-4] {
            let e = sup(&|d| lal_rho(a, c2, d), &|d| 0.5 * (d / c2) * (d / c2));
            assert!(e < 1e-3, "α={a}: sup {e}");
        }
        // α→0 analytic branch ≡ Cauchy
        let cau = StandardLoss::new(StandardKind::Cauchy, 1.0);
        let e = sup(&|d| lal_rho(0.0 + 1e-9, 1.0, d), &|d| cau.eval(d));
        assert!(e < 1e-6, "cauchy: sup {e}");
        // α=−2 ≡ GMC
        let gmc = StandardLoss::new(StandardKind::GemanMcclure, 1.0);
        let e = sup(&|d| lal_rho(-2.0, 1.0, d), &|d| gmc.eval(d));
        assert!(e < 1e-12, "gmc: sup {e}");
        // α=−10⁶ ≈ Welsch
        let wel = StandardLoss::new(StandardKind::Welsch, 1.0);
        let e = sup(&|d| lal_rho(-1e6, 1.0, d), &|d| wel.eval(d));
        assert!(e < 1e-3, "welsch: sup {e}");
    }

    #[test]
    fn graph_matches_closed_form_and_fd() {
        for &(a, c) in &[
            (1.5, 0.5),
            (-2.0, 1.0),
            (3.3, 2.0),
            (-5.0, 0.3),
            (2.0, 0.7),
            (0.0, 1.2),
        ] {
            for i in 0..31 {
                let d = -3.0 + 0.2 * i as f64;
                let mut g = Graph::new();
                let an = g.leaf(a);
                let cn = g.leaf(c);
                let dn = g.var(d);
                let r = lal_rho_nodes(&mut g, an, cn, dn.id);
                let want = lal_rho(a, c, d);
                assert!(
                    (g.value(r) - want).abs() <= 1e-12 * (1.0 + want.abs()),
                    "α={a} c={c} d={d}"
                );
                // d-derivative vs closed form
                let gr = g
                    .grad(
                        Var {
                            id: r,
                            requires_grad: true,
                        },
                        &[dn],
                        false,
                    )
                    .unwrap();
                let ad = g.value(gr[0].id);
                let want_d = lal_rho_deriv(a, c, d);
                assert!(
                    (ad - want_d).abs() <= 1e-10 * (1.0 + want_d.abs()),
                    "deriv α={a} c={c} d={d}: {ad} vs {want_d}"
                );
            }
        }
    }

    #[test]
    fn alpha_and_c_gradients_match_fd() {
        // general branch: ∂ρ/∂α and ∂ρ/∂c via the graph vs central diffs
        for &(a, c, d) in &[(1.5, 0.5, 0.8), (-2.7, 1.3, -1.9), (3.1, 2.0, 2.2)] {
            let mut g = Graph::new();
            let an = g.var(a);
            let cn = g.var(c);
            let dn = g.leaf(d);
            let r = lal_rho_nodes(&mut g, an.id, cn.id, dn);
            let gr = g
                .grad(
                    Var {
                        id: r,
                        requires_grad: true,
                    },
                    &[an, cn],
                    false,
                )
                .unwrap();
            let h = 1e-6;
            let fd_a = (lal_rho(a + h, c, d) - lal_rho(a - h, c, d)) / (2.0 * h);
            let fd_c = (lal_rho(a, c + h, d) - lal_rho(a, c - h, d)) / (2.0 * h);
            assert!((g.value(gr[0].id) - fd_a).abs() <= 1e-6 * (1.0 + fd_a.abs()));
            assert!((g.value(gr[1].id) - fd_c).abs() <= 1e-6 * (1.0 + fd_c.abs()));
        }
    }

    #[test]
    fn constrain_nodes_match_scalar_map_and_are_differentiable() {
        let b = LalBounds::default();
        let mut g = Graph::new();
        let ah = g.var(0.37);
        let ch = g.var(-1.1);
        let (an, cn) = lal_constrain_nodes(&mut g, ah.id, ch.id, b);
        let (a, c) = lal_constrain(0.37, -1.1, b);
        assert!((g.value(an) - a).abs() < 1e-15);
        assert!((g.value(cn) - c).abs() < 1e-15);
        let ga = g
            .grad(
                Var {
                    id: an,
                    requires_grad: true,
                },
                &[ah],
                false,
            )
            .unwrap();
        let h = 1e-6;
        let fd =
            (lal_constrain(0.37 + h, -1.1, b).0 - lal_constrain(0.37 - h, -1.1, b).0) / (2.0 * h);
        assert!((g.value(ga[0].id) - fd).abs() < 1e-8);
    }
}
