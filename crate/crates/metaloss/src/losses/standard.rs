//! Fixed one-dimensional losses on a discrepancy d, each with a closed-form
//! evaluator and a graph builder kept in lockstep by tests.

use crate::autodiff::{Graph, NodeId, ZERO};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardKind {
    Squared,
    Absolute,
    Huber,
    PseudoHuber,
    Cauchy,
    GemanMcclure,
    Welsch,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct StandardLoss {
    pub kind: StandardKind,
    pub c: f64,
}

impl StandardLoss {
    pub fn new(kind: StandardKind, c: f64) -> Self {
        assert!(c > 0.0, "loss scale must be positive");
        StandardLoss { kind, c }
    }

    /// Squared loss scaled so that ℓ(d) = d² (the plain MSE candidate).
    pub fn mse() -> Self {
        StandardLoss::new(StandardKind::Squared, std::f64::consts::FRAC_1_SQRT_2)
    }

    pub fn eval(&self, d: f64) -> f64 {
        let c = self.c;
        let x = (d / c) * (d / c);
        match self.kind {
            StandardKind::Squared => 0.5 * x,
            StandardKind::Absolute => d.abs(),
            StandardKind::Huber => {
                if d.abs() < c {
                    0.5 * d * d / c
                } else {
                    d.abs() - 0.5 * c
                }
            }
            StandardKind::PseudoHuber => (x + 1.0).sqrt() - 1.0,
            StandardKind::Cauchy => (0.5 * x + 1.0).ln(),
            StandardKind::GemanMcclure => 2.0 * x / (x + 4.0),
            StandardKind::Welsch => 1.0 - (-0.5 * x).exp(),
        }
    }

    pub fn deriv(&self, d: f64) -> f64 {
        let c = self.c;
        let x = (d / c) * (d / c);
        match self.kind {
            StandardKind::Squared => d / (c * c),
            StandardKind::Absolute => sign(d),
            StandardKind::Huber => {
                if d.abs() < c {
                    d / c
                } else {
                    sign(d)
                }
            }
            StandardKind::PseudoHuber => d / (c * c) / (x + 1.0).sqrt(),
            StandardKind::Cauchy => d / (c * c) / (0.5 * x + 1.0),
            StandardKind::GemanMcclure => {
                let den = x + 4.0;
                16.0 * d / (c * c) / (den * den)
            }
            StandardKind::Welsch => d / (c * c) * (-0.5 * x).exp(),
        }
    }

    /// Graph form of the loss on a discrepancy node. The Huber kink is
    /// composed from min/max so the subgraph stays valid when leaves move
    /// across the kink; at |d| = c exactly its subgradient is sign(d),
    /// matching the one-sided slope.
    pub fn build(&self, g: &mut Graph, d: NodeId) -> NodeId {
        let c = g.constant(self.c);
        let dc = g.div(d, c);
        let x = g.mul(dc, dc);
        match self.kind {
            StandardKind::Squared => {
                let half = g.constant(0.5);
                g.mul(half, x)
            }
            StandardKind::Absolute => g.abs(d),
            StandardKind::Huber => {
                // 0.5·min(c,|d|)²/c + max(|d|−c, 0)
                let ad = g.abs(d);
                let m = g.min(c, ad);
                let m2 = g.mul(m, m);
                let half = g.constant(0.5);
                let q = g.mul(half, m2);
                let q = g.div(q, c);
                let over = g.sub(ad, c);
                let lin = g.max(over, ZERO);
                g.add(q, lin)
            }
            StandardKind::PseudoHuber => {
                let xp1 = g.add(x, crate::autodiff::ONE);
                let r = g.powc(xp1, 0.5);
                g.sub(r, crate::autodiff::ONE)
            }
            StandardKind::Cauchy => {
                let half = g.constant(0.5);
                let hx = g.mul(half, x);
                let arg = g.add(hx, crate::autodiff::ONE);
                g.log(arg)
            }
            StandardKind::GemanMcclure => {
                let two = g.constant(2.0);
                let num = g.mul(two, x);
                let four = g.constant(4.0);
                let den = g.add(x, four);
                g.div(num, den)
            }
            StandardKind::Welsch => {
                let nh = g.constant(-0.5);
                let e = g.mul(nh, x);
                let ex = g.exp(e);
                g.sub(crate::autodiff::ONE, ex)
            }
        }
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
