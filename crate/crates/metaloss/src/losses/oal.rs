//! Online adaptive loss: the robust family recast as a negative log
//! likelihood, ℓ̂(d) = log c + log Z(α) + ρ_{α,c}(d), whose robustness
//! parameter α̂ trains simultaneously with the network parameters. Valid
//! for α ≥ 0 only (Z diverges for α < 0); log Z(α) comes from a cubic
//! Hermite spline over quadrature values.

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::numerics::{adaptive_simpson, HermiteSpline};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use super::lal::{lal_rho, lal_rho_nodes};
use super::LossError;

pub const OAL_ALPHA_MAX: f64 = 3.01;
/// Knot spacing of the default table. 0.01 puts α = 2 (where log Z has a
/// log-singular slope inherited from the |α−2| in ρ) exactly on a knot, so
/// the Gaussian value is reproduced there instead of interpolated across
/// the kink.
pub const OAL_KNOT_STEP: f64 = 0.01;
pub const OAL_KNOTS: usize = 302;

/// log Z(α) knot table with spline interpolation, Z(α) = ∫ exp(−ρ_{α,1}(d)) dd.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogZTable {
    pub spline: HermiteSpline,
}

impl LogZTable {
    pub fn log_z(&self, alpha: f64) -> f64 {
        self.spline.eval(alpha)
    }

    pub fn alpha_max(&self) -> f64 {
        self.spline.x_max()
    }
}

/// One Z(α) value by adaptive quadrature on a symmetric domain truncated
/// where the integrand drops below 1e-12.
fn z_of_alpha(alpha: f64, tol: f64) -> Result<f64, LossError> {
    let integrand = |d: f64| (-lal_rho(alpha, 1.0, d)).exp();
    // grow the half-width until the tail integrand is negligible
    let mut half = 8.0;
    while integrand(half) > 1e-12 {
        half *= 2.0;
        if half > 1e9 {
            return Err(LossError::QuadratureDiverged);
        }
    }
    // symmetric integrand: integrate [0, half] and double; dyadic windows
    // keep each adaptive call well-conditioned when the tail is long (the
    // tolerance-halving recursion starves on a single huge interval whose
    // structure sits near the origin)
    let mut edges = vec![0.0, 8.0_f64.min(half)];
    while *edges.last().unwrap() < half {
        let next = (edges.last().unwrap() * 2.0).min(half);
        edges.push(next);
    }
    let per_window = 0.5 * tol / (edges.len() - 1) as f64;
    let mut acc = 0.0;
    for w in edges.windows(2) {
        acc += adaptive_simpson(&integrand, w[0], w[1], per_window)
            .ok_or(LossError::QuadratureDiverged)?;
    }
    Ok(2.0 * acc)
}

/// Build the log Z table on the uniform α grid {k·step : k < knots}.
pub fn build_logz_table(step: f64, knots: usize, tol: f64) -> Result<LogZTable, LossError> {
    assert!(knots >= 2 && step > 0.0);
    let mut y = Vec::with_capacity(knots);
    for k in 0..knots {
        let alpha = step * k as f64;
        y.push(z_of_alpha(alpha, tol)?.ln());
    }
    Ok(LogZTable {
        spline: HermiteSpline::from_knots(0.0, step, y),
    })
}

/// Shared default table (302 knots at spacing 0.01, covering [0, 3.01]).
pub fn default_logz_table() -> &'static LogZTable {
    static TABLE: OnceLock<LogZTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        build_logz_table(OAL_KNOT_STEP, OAL_KNOTS, 1e-10).expect("default log Z table")
    })
}

/// Optimizer for the single α̂ parameter, mirroring the kind used for θ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum AlphaOpt {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: f64,
        v: f64,
        t: i32,
    },
}

impl AlphaOpt {
    pub fn adam(beta1: f64, beta2: f64) -> Self {
        AlphaOpt::Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }
}

/// Trainable OAL state: α̂ plus its learning rate/optimizer; c is fixed
/// (only the robustness parameter is trained).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OalState {
    pub alpha_hat: f64,
    pub alpha_lr: f64,
    pub c: f64,
    pub opt: AlphaOpt,
}

impl OalState {
    /// Start from a mapped α value (default α = 2, c = 1/√2).
    pub fn new(alpha_init: f64, alpha_lr: f64, opt: AlphaOpt) -> Self {
        let p = alpha_init / OAL_ALPHA_MAX;
        assert!(p > 0.0 && p < 1.0, "α must be inside (0, {OAL_ALPHA_MAX})");
        OalState {
            alpha_hat: (p / (1.0 - p)).ln(),
            alpha_lr,
            c: std::f64::consts::FRAC_1_SQRT_2,
            opt,
        }
    }

    pub fn alpha(&self) -> f64 {
        OAL_ALPHA_MAX * sigmoid(self.alpha_hat)
    }

    /// Pointwise NLL value.
    pub fn eval(&self, table: &LogZTable, d: f64) -> f64 {
        self.c.ln() + table.log_z(self.alpha()) + lal_rho(self.alpha(), self.c, d)
    }

    /// Apply one optimizer step to α̂ from its loss gradient.
    pub fn step(&mut self, grad: f64) {
        match &mut self.opt {
            AlphaOpt::Sgd => self.alpha_hat -= self.alpha_lr * grad,
            AlphaOpt::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                *m = *beta1 * *m + (1.0 - *beta1) * grad;
                *v = *beta2 * *v + (1.0 - *beta2) * grad * grad;
                let mh = *m / (1.0 - beta1.powi(*t));
                let vh = *v / (1.0 - beta2.powi(*t));
                self.alpha_hat -= self.alpha_lr * mh / (vh.sqrt() + *eps);
            }
        }
    }
}

/// Graph handles for one OAL loss head: the mapped α node and the log Z
/// spline segment built around the current α value. Rebuild each iteration
/// (the active spline segment follows α).
#[derive(Clone, Copy, Debug)]
pub struct OalNodes {
    pub alpha: NodeId,
    pub log_z: NodeId,
    pub log_c: f64,
    pub c: f64,
}

/// Map α̂ to α and interpolate log Z on the segment containing the current
/// value; both nodes are differentiable w.r.t. `alpha_hat`.
pub fn oal_nodes(g: &mut Graph, table: &LogZTable, alpha_hat: NodeId, c: f64) -> OalNodes {
    let s = g.sigmoid(alpha_hat);
    let amax = g.constant(OAL_ALPHA_MAX);
    let alpha = g.mul(amax, s);

    let sp = &table.spline;
    let k = sp.segment(g.value(alpha));
    let (xk, yk, mk, yk1, mk1) = sp.segment_data(k);
    let xkc = g.constant(xk);
    let dx = g.sub(alpha, xkc);
    let invh = g.constant(1.0 / sp.h);
    let t = g.mul(dx, invh);
    let t2 = g.mul(t, t);
    let t3 = g.mul(t2, t);
    // h00 = 2t³−3t²+1, h10 = t³−2t²+t, h01 = −2t³+3t², h11 = t³−t²
    let c2 = g.constant(2.0);
    let c3 = g.constant(3.0);
    let two_t3 = g.mul(c2, t3);
    let three_t2 = g.mul(c3, t2);
    let h00 = {
        let a = g.sub(two_t3, three_t2);
        g.add(a, crate::autodiff::ONE)
    };
    let h10 = {
        let tt = g.mul(c2, t2);
        let a = g.sub(t3, tt);
        g.add(a, t)
    };
    let h01 = g.sub(three_t2, two_t3);
    let h11 = g.sub(t3, t2);
    let w0 = g.constant(yk);
    let w1 = g.constant(sp.h * mk);
    let w2 = g.constant(yk1);
    let w3 = g.constant(sp.h * mk1);
    let log_z = g.dot(&[h00, h10, h01, h11], &[w0, w1, w2, w3]);
    OalNodes {
        alpha,
        log_z,
        log_c: c.ln(),
        c,
    }
}

/// Build the pointwise NLL node for one discrepancy.
pub fn oal_point_loss(g: &mut Graph, nodes: &OalNodes, d: NodeId) -> NodeId {
    let cc = g.constant(nodes.c);
    let rho = lal_rho_nodes(g, nodes.alpha, cc, d);
    let off = g.constant(nodes.log_c);
    let a = g.add(off, nodes.log_z);
    g.add(a, rho)
}

/// One self-contained OAL update on a batch of discrepancies: builds the
/// mean NLL, steps α̂ by its own optimizer, and returns (loss value, new α).
/// Training loops that also need θ-gradients reuse the same subgraph and
/// call [`OalState::step`] on the α̂-gradient from their shared backward
/// pass; this wrapper is that path specialized to α̂ alone.
pub fn oal_step(state: &mut OalState, table: &LogZTable, ds: &[f64]) -> (f64, f64) {
    let mut g = Graph::new();
    let ah = g.leaf(state.alpha_hat);
    let nodes = oal_nodes(&mut g, table, ah, state.c);
    let terms: Vec<NodeId> = ds
        .iter()
        .map(|&d| {
            let dn = g.constant(d);
            oal_point_loss(&mut g, &nodes, dn)
        })
        .collect();
    let obj = g.mean(&terms);
    let loss = g.value(obj);
    let grad = g.grad_values(obj, &[ah])[0];
    state.step(grad);
    (loss, state.alpha())
}
