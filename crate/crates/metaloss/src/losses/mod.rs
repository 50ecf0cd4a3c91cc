//! Loss-function families and their supporting machinery.
//!
//! Four parametrizations share one pointwise interface: the fixed standard
//! zoo ([`standard`]), the two-parameter adaptive family ([`lal`]), the
//! free-form network loss ([`ffn`]), and the online adaptive NLL loss
//! ([`oal`]). [`conditions`] holds the numeric condition checker and the
//! differentiable penalty used during meta-training.

pub mod conditions;
pub mod ffn;
pub mod lal;
pub mod oal;
pub mod standard;

pub use conditions::{check_conditions, penalty_eval, ConditionReport, ConditionWitness};
pub use ffn::{
    ffn_loss_spec, mse_fit_error, mse_pretrain_ffn, mse_pretrain_lal, FfnLossParams,
    PRETRAIN_FIT_THRESHOLD,
};
pub use lal::{lal_constrain, lal_constrain_nodes, lal_rho, lal_rho_nodes, LalBounds, LalParams};
pub use oal::{
    build_logz_table, default_logz_table, oal_nodes, oal_point_loss, AlphaOpt, LogZTable, OalNodes,
    OalState,
};
pub use standard::{StandardKind, StandardLoss};

use crate::autodiff::{Graph, NodeId};
use crate::network::{mlp_forward, MlpSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("alpha = {0} is degenerate (exactly 0 or 2)")]
    AlphaDegenerate(f64),
    #[error("invalid constraint bounds")]
    BadBounds,
    #[error("pretraining did not reach the fit threshold (fit error {fit:.4})")]
    PretrainFit { fit: f64 },
    #[error("normalization quadrature did not converge")]
    QuadratureDiverged,
    #[error("degenerate sampling domain")]
    DegenerateDomain,
    #[error("negative combination weight")]
    NegativeWeight,
    #[error("dimension mismatch in multi-dimensional combination")]
    DimMismatch,
}

/// A loss function instantiated inside a graph, ready to score one
/// (prediction, target) pair. Parameter nodes are owned by the caller so the
/// same loss head can be shared across residual points and differentiated
/// w.r.t. its parameters.
#[derive(Clone, Debug)]
pub enum ActiveLoss {
    Standard(StandardLoss),
    /// Mapped (post-constraint) α and c nodes.
    Lal {
        alpha: NodeId,
        c: NodeId,
    },
    /// Flattened network weights as graph nodes.
    Ffn {
        eta: Vec<NodeId>,
    },
    Oal(OalNodes),
    /// Squared loss whose minimum sits at discrepancy = `shift` instead of
    /// zero — a deliberately miscalibrated probe for condition checks and
    /// divergence experiments.
    ShiftedSquared {
        shift: f64,
    },
}

impl ActiveLoss {
    /// Pointwise loss ℓ(q, u) as a graph node.
    pub fn point_loss(&self, g: &mut Graph, q: NodeId, u: NodeId) -> NodeId {
        match self {
            ActiveLoss::Standard(s) => {
                let d = g.sub(q, u);
                s.build(g, d)
            }
            ActiveLoss::Lal { alpha, c } => {
                let d = g.sub(q, u);
                lal_rho_nodes(g, *alpha, *c, d)
            }
            ActiveLoss::Ffn { eta } => FfnLossParams::build(g, eta, q, u),
            ActiveLoss::Oal(nodes) => {
                let d = g.sub(q, u);
                oal_point_loss(g, nodes, d)
            }
            ActiveLoss::ShiftedSquared { shift } => {
                let d = g.sub(q, u);
                let s = g.constant(*shift);
                let e = g.sub(d, s);
                g.mul(e, e)
            }
        }
    }
}

/// How a multi-output discrepancy is reduced to one scalar loss.
pub enum MultiDim<'a> {
    /// One shared pointwise loss, dimension weights a_j ≥ 0:
    /// Σ_j a_j · ℓ(q_j, u_j).
    Shared {
        loss: &'a ActiveLoss,
        weights: &'a [f64],
    },
    /// An independent pointwise loss per output dimension, summed.
    PerDim { losses: &'a [ActiveLoss] },
    /// A single network loss reading the full (prediction, target) vectors;
    /// `spec` must accept 2·D inputs and emit one output.
    Full {
        eta: &'a [NodeId],
        spec: &'a MlpSpec,
    },
}

/// Combine per-dimension predictions/targets into one scalar loss node.
pub fn combine_multidim(
    g: &mut Graph,
    mode: &MultiDim,
    q: &[NodeId],
    u: &[NodeId],
) -> Result<NodeId, LossError> {
    if q.len() != u.len() || q.is_empty() {
        return Err(LossError::DimMismatch);
    }
    match mode {
        MultiDim::Shared { loss, weights } => {
            if weights.len() != q.len() {
                return Err(LossError::DimMismatch);
            }
            if weights.iter().any(|&a| a < 0.0) {
                return Err(LossError::NegativeWeight);
            }
            let mut terms = Vec::with_capacity(q.len());
            for j in 0..q.len() {
                let l = loss.point_loss(g, q[j], u[j]);
                let a = g.constant(weights[j]);
                terms.push(g.mul(a, l));
            }
            Ok(g.sum(&terms))
        }
        MultiDim::PerDim { losses } => {
            if losses.len() != q.len() {
                return Err(LossError::DimMismatch);
            }
            let mut terms = Vec::with_capacity(q.len());
            for j in 0..q.len() {
                terms.push(losses[j].point_loss(g, q[j], u[j]));
            }
            Ok(g.sum(&terms))
        }
        MultiDim::Full { eta, spec } => {
            if spec.input_dim != 2 * q.len() || spec.output_dim != 1 {
                return Err(LossError::DimMismatch);
            }
            let mut inputs = Vec::with_capacity(2 * q.len());
            inputs.extend_from_slice(q);
            inputs.extend_from_slice(u);
            Ok(mlp_forward(g, spec, eta, &inputs)[0])
        }
    }
}

/// Unconstrained composite-objective weights; softplus keeps the mapped
/// weights positive.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveWeights {
    pub w_f_hat: f64,
    pub w_b_hat: f64,
    pub w_u0_hat: f64,
}

impl ObjectiveWeights {
    /// Raw values whose softplus equals the given positive weights.
    pub fn from_weights(w_f: f64, w_b: f64, w_u0: f64) -> Self {
        assert!(w_f > 0.0 && w_b > 0.0 && w_u0 > 0.0);
        ObjectiveWeights {
            w_f_hat: lal::inv_softplus(w_f),
            w_b_hat: lal::inv_softplus(w_b),
            w_u0_hat: lal::inv_softplus(w_u0),
        }
    }

    pub fn mapped(&self) -> (f64, f64, f64) {
        (
            crate::autodiff::softplus(self.w_f_hat),
            crate::autodiff::softplus(self.w_b_hat),
            crate::autodiff::softplus(self.w_u0_hat),
        )
    }

    /// Graph nodes for the mapped weights, differentiable w.r.t. the raw
    /// leaves passed in.
    pub fn mapped_nodes(g: &mut Graph, raw: [NodeId; 3]) -> [NodeId; 3] {
        [g.softplus(raw[0]), g.softplus(raw[1]), g.softplus(raw[2])]
    }
}

/// Serialized state of a learned loss at a snapshot point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossSnapshot {
    /// Which family the raw parameters belong to
    /// ("lal" | "ffn" | "oal" | "standard:<kind>").
    pub parametrization: String,
    pub raw_params: Vec<f64>,
    /// Constraint bounds, where the family has them.
    pub bounds: Option<LalBounds>,
    /// Composite-objective weights learned alongside the loss, if any.
    #[serde(default)]
    pub weights: Option<ObjectiveWeights>,
    pub snapshot_index: usize,
    pub outer_iteration: usize,
}
