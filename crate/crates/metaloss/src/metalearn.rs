//! Meta-training of loss functions: the inner optimization is unrolled as
//! graph nodes so the adapted network parameters stay differentiable w.r.t.
//! the loss parameters η, and an outer gradient step (with clipping) moves η.
//!
//! One outer iteration samples tasks, runs J inner steps per task through
//! [`inner_unroll`], scores the adapted parameters with the mean-squared
//! validation objective, and backpropagates the total derivative — the
//! direct η-path plus the path through the unrolled optimization — onto the
//! raw loss parameters. [`meta_train`] drives the schedule (task resampling,
//! parameter re-initialization, snapshots, periodic validation);
//! [`meta_validate`] and [`train_with_snapshot`] run plain value-mode
//! training with a frozen loss for evaluation.
//!
//! Inner unrolls are sequential in task order on one shared graph; they are
//! independent per task, so a parallel map reduced in task-index order would
//! be a drop-in change if throughput ever demands it.

use crate::autodiff::{AdError, Graph, NodeId, ZERO};
use crate::losses::{
    lal_constrain, lal_constrain_nodes, mse_pretrain_ffn, penalty_eval, ActiveLoss, FfnLossParams,
    LalBounds, LalParams, LossError, LossSnapshot, ObjectiveWeights, StandardKind, StandardLoss,
};
use crate::network::{
    mlp_eval, params_to_consts, params_to_leaves, xavier_init, MlpSpec, ParamVector,
};
use crate::numerics::relative_l2;
use crate::tasks::{
    approximator_spec, build_inner_objective, build_outer_objective, reference_values,
    sample_eval_points, sample_task, Task, TaskError, TaskFamily, TermWeights,
};
use serde::{Deserialize, Serialize};

/// Discrepancy window the loss is shaped on: pretraining fits and penalty
/// draws sample (prediction, target) pairs from this interval.
pub const LOSS_INPUT_DOMAIN: (f64, f64) = (-2.0, 2.0);

/// Minimum |q − q′| for penalty pairs; below it the hinge would punish
/// losses for having the small gradients any sane loss has near q = q′.
pub const PENALTY_MIN_GAP: f64 = 0.1;

/// Reference points per task for validation-error evaluation.
pub const META_VAL_POINTS: usize = 512;

pub const DEFAULT_OUTER_LR: f64 = 1e-4;
pub const DEFAULT_INNER_SGD_LR: f64 = 1e-2;
pub const DEFAULT_INNER_ADAM_LR: f64 = 1e-3;
pub const DEFAULT_CLIP_CAP: f64 = 1.0;
pub const DEFAULT_VAL_EVERY: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid optimizer setting: {0}")]
    BadSpec(&'static str),
    #[error("non-finite network parameter at inner step {step}")]
    NonFiniteInner { step: usize },
    #[error("non-finite outer gradient at iteration {iter} ({count} components)")]
    NonFiniteOuter { iter: usize, count: usize },
    #[error("snapshot is malformed: {0}")]
    MalformedSnapshot(&'static str),
    #[error("unknown loss parametrization `{0}`")]
    UnknownParametrization(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

// ---- optimizer specifications ---------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Inner (task-level) optimizer: J gradient steps on the network parameters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct InnerOptSpec {
    pub kind: OptKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub steps: usize,
}

impl InnerOptSpec {
    pub fn sgd(learning_rate: f64, steps: usize) -> Self {
        InnerOptSpec {
            kind: OptKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            steps,
        }
    }

    pub fn adam(learning_rate: f64, steps: usize) -> Self {
        InnerOptSpec {
            kind: OptKind::Adam,
            ..InnerOptSpec::sgd(learning_rate, steps)
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(MetaError::BadSpec("inner learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MetaError::BadSpec("decay parameters must lie in [0, 1)"));
        }
        if self.steps == 0 {
            return Err(MetaError::BadSpec("at least one inner step is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    None,
    ClipNorm,
    DivideByJ,
    Normalize,
}

/// How the outer gradient is tamed before the update.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ClipSpec {
    pub mode: ClipMode,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

impl ClipSpec {
    pub fn none() -> Self {
        ClipSpec {
            mode: ClipMode::None,
            cap: DEFAULT_CLIP_CAP,
        }
    }

    pub fn norm(cap: f64) -> Self {
        ClipSpec {
            mode: ClipMode::ClipNorm,
            cap,
        }
    }
}

/// Optional regularizer pushing a learned loss toward zero gradient at
/// prediction = target and non-vanishing gradient elsewhere.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltySpec {
    pub enabled: bool,
    pub c_margin: f64,
    pub samples: usize,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec {
            enabled: false,
            c_margin: 1e-2,
            samples: 32,
        }
    }
}

/// Outer (meta-level) optimizer: I iterations on the loss parameters, with
/// T tasks per step, task resampling every I′ iterations and network
/// re-initialization every I″ (0 = keep the first initialization).
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct OuterOptSpec {
    #[serde(default = "default_outer_kind")]
    pub kind: OptKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub clip: ClipSpec,
    pub iterations: usize,
    #[serde(default = "default_one")]
    pub tasks_per_step: usize,
    #[serde(default = "default_one")]
    pub resample_every: usize,
    #[serde(default = "default_one")]
    pub reinit_every: usize,
    #[serde(default)]
    pub penalty: PenaltySpec,
}

impl OuterOptSpec {
    /// Adam with norm clipping at the default cap; one task per step,
    /// resampling and re-initializing every iteration.
    pub fn adam(learning_rate: f64, iterations: usize) -> Self {
        OuterOptSpec {
            kind: OptKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            clip: ClipSpec::norm(DEFAULT_CLIP_CAP),
            iterations,
            tasks_per_step: 1,
            resample_every: 1,
            reinit_every: 1,
            penalty: PenaltySpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(MetaError::BadSpec("outer learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MetaError::BadSpec("decay parameters must lie in [0, 1)"));
        }
        if self.clip.mode == ClipMode::ClipNorm && (self.clip.cap <= 0.0 || self.clip.cap.is_nan())
        {
            return Err(MetaError::BadSpec("clip cap must be positive"));
        }
        if self.tasks_per_step == 0 {
            return Err(MetaError::BadSpec("at least one task per step is required"));
        }
        if self.penalty.enabled && self.penalty.samples == 0 {
            return Err(MetaError::BadSpec("penalty needs at least one sample"));
        }
        Ok(())
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_cap() -> f64 {
    DEFAULT_CLIP_CAP
}
fn default_one() -> usize {
    1
}
fn default_outer_kind() -> OptKind {
    OptKind::Adam
}
fn default_val_every() -> usize {
    DEFAULT_VAL_EVERY
}
fn default_val_budget() -> usize {
    100
}
fn default_val_tasks() -> usize {
    1
}

// ---- learnable loss parameters --------------------------------------------

/// How the learnable loss is initialized before meta-training.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EtaInit {
    /// Two-parameter adaptive loss at its squared-error-like start.
    LalSquaredLike,
    /// Network loss fitted to the squared-error profile first.
    FfnPretrained { steps: usize },
    /// Network loss straight from random initialization.
    FfnRandom,
}

/// The raw meta-learned loss parameters η.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaParams {
    Lal(LalParams),
    Ffn(FfnLossParams),
}

impl EtaParams {
    pub fn label(&self) -> &'static str {
        match self {
            EtaParams::Lal(_) => "lal",
            EtaParams::Ffn(_) => "ffn",
        }
    }

    pub fn raw(&self) -> Vec<f64> {
        match self {
            EtaParams::Lal(p) => vec![p.alpha_hat, p.c_hat],
            EtaParams::Ffn(p) => p.params.0.clone(),
        }
    }

    pub fn n_raw(&self) -> usize {
        match self {
            EtaParams::Lal(_) => 2,
            EtaParams::Ffn(p) => p.params.len(),
        }
    }

    pub fn bounds(&self) -> Option<LalBounds> {
        match self {
            EtaParams::Lal(p) => Some(p.bounds),
            EtaParams::Ffn(_) => None,
        }
    }

    fn apply_raw(&mut self, v: &[f64]) {
        match self {
            EtaParams::Lal(p) => {
                p.alpha_hat = v[0];
                p.c_hat = v[1];
            }
            EtaParams::Ffn(p) => p.params.0.copy_from_slice(v),
        }
    }

    /// Differentiable leaves for the raw parameters plus the loss head
    /// reading them (constraint maps included).
    pub fn instantiate(&self, g: &mut Graph) -> (Vec<NodeId>, ActiveLoss) {
        match self {
            EtaParams::Lal(p) => {
                let ah = g.leaf(p.alpha_hat);
                let ch = g.leaf(p.c_hat);
                let (alpha, c) = lal_constrain_nodes(g, ah, ch, p.bounds);
                (vec![ah, ch], ActiveLoss::Lal { alpha, c })
            }
            EtaParams::Ffn(p) => {
                let eta = params_to_leaves(g, &p.params);
                (eta.clone(), ActiveLoss::Ffn { eta })
            }
        }
    }
}

// ---- meta-training state ---------------------------------------------------

/// Outer-optimizer accumulators over the raw parameter vector.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct OuterMoments {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OuterMoments {
    fn new(n: usize) -> Self {
        OuterMoments {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One metrics row per outer iteration. Gradient statistics are of the raw
/// (pre-clipping) gradient; weights are the effective composite weights
/// (1 when not learned); `rl2_val` is filled on validation iterations only.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub outer_objective: f64,
    pub grad_norm: f64,
    pub grad_max: f64,
    pub eta_norm: f64,
    pub w_f: f64,
    pub w_b: f64,
    pub w_u0: f64,
    pub rl2_val: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "iter,L_O,grad_norm,grad_max,eta_norm,w_f,w_b,w_u0,rl2_val";

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let rl2 = self.rl2_val.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.outer_objective,
            self.grad_norm,
            self.grad_max,
            self.eta_norm,
            self.w_f,
            self.w_b,
            self.w_u0,
            rl2
        )
    }
}

/// Everything a meta-training run accumulates: the current loss parameters,
/// optional composite weights, outer-optimizer moments, captured snapshots,
/// and the per-iteration metric log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaState {
    pub eta: EtaParams,
    pub weights: Option<ObjectiveWeights>,
    pub moments: OuterMoments,
    pub iteration: usize,
    pub snapshots: Vec<LossSnapshot>,
    pub log: Vec<RunRecord>,
}

impl MetaState {
    pub fn new(eta: EtaParams, weights: Option<ObjectiveWeights>) -> Self {
        let n = eta.n_raw() + if weights.is_some() { 3 } else { 0 };
        MetaState {
            eta,
            weights,
            moments: OuterMoments::new(n),
            iteration: 0,
            snapshots: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Raw optimization vector: loss parameters, then weight parameters.
    pub fn raw_vector(&self) -> Vec<f64> {
        let mut v = self.eta.raw();
        if let Some(w) = &self.weights {
            v.extend_from_slice(&[w.w_f_hat, w.w_b_hat, w.w_u0_hat]);
        }
        v
    }

    fn apply_raw(&mut self, v: &[f64]) {
        let n = self.eta.n_raw();
        self.eta.apply_raw(&v[..n]);
        if let Some(w) = &mut self.weights {
            w.w_f_hat = v[n];
            w.w_b_hat = v[n + 1];
            w.w_u0_hat = v[n + 2];
        }
    }

    /// Norm of the loss parameters (weights excluded).
    pub fn eta_norm(&self) -> f64 {
        l2(&self.eta.raw())
    }

    pub fn snapshot(&self, snapshot_index: usize, outer_iteration: usize) -> LossSnapshot {
        LossSnapshot {
            parametrization: self.eta.label().to_string(),
            raw_params: self.eta.raw(),
            bounds: self.eta.bounds(),
            weights: self.weights,
            snapshot_index,
            outer_iteration,
        }
    }
}

/// Complete description of a meta-training run.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub family: TaskFamily,
    pub eta: EtaInit,
    #[serde(default)]
    pub learn_weights: bool,
    pub inner: InnerOptSpec,
    pub outer: OuterOptSpec,
    pub seed: u64,
    /// Outer iterations between validation passes; 0 disables them.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default = "default_val_budget")]
    pub val_budget: usize,
    #[serde(default = "default_val_tasks")]
    pub val_tasks: usize,
    /// Overrides the family's default approximator architecture.
    #[serde(default)]
    pub approximator: Option<MlpSpec>,
}

// ---- deterministic seed derivation -----------------------------------------

const ETA_STREAM: u64 = 1;
const TASK_STREAM: u64 = 2;
const THETA_STREAM: u64 = 3;
const PENALTY_STREAM: u64 = 4;
const VAL_STREAM: u64 = 5;

const VAL_TASK_SUBSTREAM: u64 = 1;
const VAL_THETA_SUBSTREAM: u64 = 2;
const VAL_EVAL_SUBSTREAM: u64 = 3;

/// Derive an independent seed for (stream, index) from a run seed
/// (splitmix64 finalizer).
pub(crate) fn mix(seed: u64, stream: u64, k: u64) -> u64 {
    let mut z =
        seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---- gradient post-processing and parameter updates ------------------------

/// Apply the configured gradient transformation in place; returns the norm
/// of the transformed gradient.
pub fn clip_gradient(grad: &mut [f64], clip: ClipSpec, inner_steps: usize) -> f64 {
    let norm = l2(grad);
    let scale = match clip.mode {
        ClipMode::None => 1.0,
        ClipMode::ClipNorm => {
            if norm > clip.cap {
                clip.cap / norm
            } else {
                1.0
            }
        }
        ClipMode::DivideByJ => 1.0 / inner_steps as f64,
        ClipMode::Normalize => {
            if norm > 0.0 {
                1.0 / norm
            } else {
                1.0
            }
        }
    };
    if scale != 1.0 {
        for gi in grad.iter_mut() {
            *gi *= scale;
        }
    }
    norm * scale
}

#[allow(clippy::too_many_arguments)]
fn apply_update(
    kind: OptKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: &mut OuterMoments,
    x: &mut [f64],
    grad: &[f64],
) {
    moments.t += 1;
    match kind {
        OptKind::Sgd => {
            for (xi, gi) in x.iter_mut().zip(grad) {
                *xi -= lr * gi;
            }
        }
        OptKind::Adam => {
            let bc1 = 1.0 - beta1.powi(moments.t as i32);
            let bc2 = 1.0 - beta2.powi(moments.t as i32);
            for i in 0..x.len() {
                moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * grad[i];
                moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mh = moments.m[i] / bc1;
                let vh = moments.v[i] / bc2;
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Plain-number optimizer mirroring the unrolled update rules, for
/// value-mode training where loss-parameter gradients are not needed.
pub struct OptState {
    kind: OptKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: OuterMoments,
}

impl OptState {
    pub fn new(spec: &InnerOptSpec, n: usize) -> Self {
        OptState {
            kind: spec.kind,
            lr: spec.learning_rate,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            moments: OuterMoments::new(n),
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        apply_update(
            self.kind,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            &mut self.moments,
            x,
            grad,
        );
    }
}

// ---- differentiable inner optimization --------------------------------------

/// Unroll `opt.steps` optimizer updates against an arbitrary objective
/// builder. Every update is emitted as graph nodes, so the returned
/// parameters remain differentiable w.r.t. anything the objective reads
/// (in particular the loss parameters). The Adam variant unrolls its moment
/// recursions as nodes too, with no gradient detachment.
pub fn unroll_with<F>(
    g: &mut Graph,
    theta0: &[NodeId],
    opt: &InnerOptSpec,
    mut objective: F,
) -> Result<Vec<NodeId>, MetaError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, MetaError>,
{
    opt.validate()?;
    let mut theta = theta0.to_vec();
    let lr = g.constant(opt.learning_rate);
    match opt.kind {
        OptKind::Sgd => {
            for step in 1..=opt.steps {
                let obj = objective(g, &theta)?;
                let grads = g.grad_nodes(obj, &theta)?;
                let mut next = Vec::with_capacity(theta.len());
                for (&t, &gr) in theta.iter().zip(&grads) {
                    let delta = g.mul(lr, gr);
                    next.push(g.sub(t, delta));
                }
                theta = next;
                check_finite(g, &theta, step)?;
            }
        }
        OptKind::Adam => {
            let n = theta.len();
            let mut m = vec![ZERO; n];
            let mut v = vec![ZERO; n];
            let b1 = g.constant(opt.beta1);
            let b2 = g.constant(opt.beta2);
            let omb1 = g.constant(1.0 - opt.beta1);
            let omb2 = g.constant(1.0 - opt.beta2);
            let eps = g.constant(opt.eps);
            // tiny ridge inside the square root: keeps its derivative finite
            // when a parameter's second moment is exactly zero
            let ridge = g.constant(1e-30);
            for step in 1..=opt.steps {
                let obj = objective(g, &theta)?;
                let grads = g.grad_nodes(obj, &theta)?;
                let bc1 = g.constant(1.0 / (1.0 - opt.beta1.powi(step as i32)));
                let bc2 = g.constant(1.0 / (1.0 - opt.beta2.powi(step as i32)));
                let mut next = Vec::with_capacity(n);
                for i in 0..n {
                    let ma = g.mul(b1, m[i]);
                    let mb = g.mul(omb1, grads[i]);
                    m[i] = g.add(ma, mb);
                    let g2 = g.mul(grads[i], grads[i]);
                    let va = g.mul(b2, v[i]);
                    let vb = g.mul(omb2, g2);
                    v[i] = g.add(va, vb);
                    let mh = g.mul(bc1, m[i]);
                    let vh = g.mul(bc2, v[i]);
                    let vr = g.add(vh, ridge);
                    let root = g.powc(vr, 0.5);
                    let den = g.add(root, eps);
                    let upd = g.div(mh, den);
                    let delta = g.mul(lr, upd);
                    next.push(g.sub(theta[i], delta));
                }
                theta = next;
                check_finite(g, &theta, step)?;
            }
        }
    }
    Ok(theta)
}

fn check_finite(g: &Graph, theta: &[NodeId], step: usize) -> Result<(), MetaError> {
    if theta.iter().any(|&t| !g.value(t).is_finite()) {
        Err(MetaError::NonFiniteInner { step })
    } else {
        Ok(())
    }
}

/// Adapt a network to one task: J unrolled inner steps on the training
/// objective scored with the active loss. The returned parameter nodes are
/// connected to the loss parameters through every step.
pub fn inner_unroll(
    g: &mut Graph,
    task: &Task,
    spec: &MlpSpec,
    theta0: &ParamVector,
    loss: &ActiveLoss,
    weights: &TermWeights,
    opt: &InnerOptSpec,
) -> Result<Vec<NodeId>, MetaError> {
    let theta0 = params_to_leaves(g, theta0);
    unroll_with(g, &theta0, opt, |g, theta| {
        Ok(build_inner_objective(g, task, spec, theta, loss, weights)?)
    })
}

// ---- one outer iteration -----------------------------------------------------

/// Run one outer iteration: unroll every task, score the adapted parameters
/// on the validation objective (plus the penalty when enabled), compute the
/// total loss-parameter gradient through the unrolls, clip it, and update
/// the state. Returns the metrics row for the completed iteration.
#[allow(clippy::too_many_arguments)]
pub fn outer_step(
    state: &mut MetaState,
    tasks: &[Task],
    theta0s: &[ParamVector],
    spec: &MlpSpec,
    inner: &InnerOptSpec,
    outer: &OuterOptSpec,
    penalty_seed: u64,
) -> Result<RunRecord, MetaError> {
    inner.validate()?;
    outer.validate()?;
    assert_eq!(tasks.len(), theta0s.len());
    let iter = state.iteration + 1;

    let mut g = Graph::new();
    let (eta_leaves, loss) = state.eta.instantiate(&mut g);
    let mut wrt = eta_leaves;
    let term_weights = match &state.weights {
        Some(w) => {
            let raw = [g.leaf(w.w_f_hat), g.leaf(w.w_b_hat), g.leaf(w.w_u0_hat)];
            wrt.extend_from_slice(&raw);
            TermWeights::Mapped(ObjectiveWeights::mapped_nodes(&mut g, raw))
        }
        None => TermWeights::Unit,
    };

    let mut adapted = Vec::with_capacity(tasks.len());
    for (task, theta0) in tasks.iter().zip(theta0s) {
        adapted.push(inner_unroll(
            &mut g,
            task,
            spec,
            theta0,
            &loss,
            &term_weights,
            inner,
        )?);
    }
    let objective = build_outer_objective(&mut g, tasks, &adapted, spec)?;
    let total = if outer.penalty.enabled {
        let p = penalty_eval(
            &mut g,
            &loss,
            LOSS_INPUT_DOMAIN,
            outer.penalty.samples,
            outer.penalty.c_margin,
            PENALTY_MIN_GAP,
            penalty_seed,
        );
        g.add(objective, p)
    } else {
        objective
    };

    let mut grad = g.grad_values(total, &wrt);
    let bad = grad.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(MetaError::NonFiniteOuter { iter, count: bad });
    }
    let grad_norm = l2(&grad);
    let grad_max = grad.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    clip_gradient(&mut grad, outer.clip, inner.steps);

    let mut raw = state.raw_vector();
    apply_update(
        outer.kind,
        outer.learning_rate,
        outer.beta1,
        outer.beta2,
        outer.eps,
        &mut state.moments,
        &mut raw,
        &grad,
    );
    state.apply_raw(&raw);
    state.iteration = iter;

    let (w_f, w_b, w_u0) = state
        .weights
        .as_ref()
        .map(|w| w.mapped())
        .unwrap_or((1.0, 1.0, 1.0));
    Ok(RunRecord {
        iter,
        outer_objective: g.value(objective),
        grad_norm,
        grad_max,
        eta_norm: state.eta_norm(),
        w_f,
        w_b,
        w_u0,
        rl2_val: None,
    })
}

// ---- frozen-loss training (value mode) ---------------------------------------

/// Instantiate a snapshot's loss (and composite weights) as constants.
pub fn snapshot_loss(
    g: &mut Graph,
    snap: &LossSnapshot,
) -> Result<(ActiveLoss, TermWeights), MetaError> {
    let loss = match snap.parametrization.as_str() {
        "lal" => {
            let bounds = snap
                .bounds
                .ok_or(MetaError::MalformedSnapshot("missing constraint bounds"))?;
            if snap.raw_params.len() != 2 {
                return Err(MetaError::MalformedSnapshot("expected two raw parameters"));
            }
            let (alpha, c) = lal_constrain(snap.raw_params[0], snap.raw_params[1], bounds);
            let alpha = g.constant(alpha);
            let c = g.constant(c);
            ActiveLoss::Lal { alpha, c }
        }
        "ffn" => {
            if snap.raw_params.len() != FfnLossParams::n_params() {
                return Err(MetaError::MalformedSnapshot(
                    "raw parameter count does not match the loss network",
                ));
            }
            let eta = params_to_consts(g, &ParamVector(snap.raw_params.clone()));
            ActiveLoss::Ffn { eta }
        }
        s => {
            let Some(name) = s.strip_prefix("standard:") else {
                return Err(MetaError::UnknownParametrization(s.to_string()));
            };
            let kind: StandardKind =
                serde_json::from_value(serde_json::Value::String(name.to_string()))
                    .map_err(|_| MetaError::UnknownParametrization(s.to_string()))?;
            let c = snap.raw_params.first().copied().unwrap_or(1.0);
            if c <= 0.0 || c.is_nan() {
                return Err(MetaError::MalformedSnapshot("scale must be positive"));
            }
            ActiveLoss::Standard(StandardLoss::new(kind, c))
        }
    };
    let weights = match &snap.weights {
        Some(w) => {
            let (w_f, w_b, w_u0) = w.mapped();
            TermWeights::Mapped([g.constant(w_f), g.constant(w_b), g.constant(w_u0)])
        }
        None => TermWeights::Unit,
    };
    Ok((loss, weights))
}

/// Snapshot wrapper for a fixed standard loss, usable anywhere a learned
/// snapshot is.
pub fn standard_snapshot(loss: StandardLoss) -> LossSnapshot {
    let kind = serde_json::to_value(loss.kind).expect("kind serializes to a string");
    LossSnapshot {
        parametrization: format!("standard:{}", kind.as_str().expect("string tag")),
        raw_params: vec![loss.c],
        bounds: None,
        weights: None,
        snapshot_index: 0,
        outer_iteration: 0,
    }
}

/// Result of value-mode training: the last finite parameters, how many
/// steps completed, and whether the run was cut short by non-finite values.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub theta: ParamVector,
    pub completed_steps: usize,
    pub diverged: bool,
}

/// Train a network on one task with a frozen snapshot loss for `opt.steps`
/// steps (zero steps allowed). The objective graph is built once and
/// re-evaluated in place each step; a non-finite evaluation or update stops
/// the run and returns the last finite parameters.
pub fn train_with_snapshot(
    task: &Task,
    spec: &MlpSpec,
    theta0: &ParamVector,
    snap: &LossSnapshot,
    opt: &InnerOptSpec,
) -> Result<TrainOutcome, MetaError> {
    let mut g = Graph::new();
    let (loss, weights) = snapshot_loss(&mut g, snap)?;
    let theta_nodes = params_to_leaves(&mut g, theta0);
    let objective = build_inner_objective(&mut g, task, spec, &theta_nodes, &loss, &weights)?;

    let mut theta = theta0.clone();
    let mut opt_state = OptState::new(opt, theta.len());
    let mut assigns: Vec<(NodeId, f64)> = theta_nodes.iter().map(|&n| (n, 0.0)).collect();
    for step in 0..opt.steps {
        for (slot, &v) in assigns.iter_mut().zip(&theta.0) {
            slot.1 = v;
        }
        if g.forward(&assigns).is_err() {
            return Ok(TrainOutcome {
                theta,
                completed_steps: step,
                diverged: true,
            });
        }
        let grads = g.grad_values(objective, &theta_nodes);
        let mut next = theta.clone();
        opt_state.step(&mut next.0, &grads);
        if next.0.iter().any(|v| !v.is_finite()) {
            return Ok(TrainOutcome {
                theta,
                completed_steps: step,
                diverged: true,
            });
        }
        theta = next;
    }
    Ok(TrainOutcome {
        theta,
        completed_steps: opt.steps,
        diverged: false,
    })
}

// ---- meta-validation -----------------------------------------------------------

/// Mean relative L² error over `n_tasks` freshly sampled tasks after
/// training fresh networks with the snapshot loss for `budget_iters` steps
/// of the default test-time optimizer (Adam at its standard rate). A run
/// that diverges is scored at its last finite parameters.
pub fn meta_validate(
    snap: &LossSnapshot,
    family: &TaskFamily,
    budget_iters: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<f64, MetaError> {
    let opt = InnerOptSpec::adam(DEFAULT_INNER_ADAM_LR, budget_iters);
    meta_validate_with(snap, family, n_tasks, seed, &opt, None)
}

/// [`meta_validate`] with explicit optimizer (its `steps` is the budget)
/// and optional approximator override.
pub fn meta_validate_with(
    snap: &LossSnapshot,
    family: &TaskFamily,
    n_tasks: usize,
    seed: u64,
    opt: &InnerOptSpec,
    approximator: Option<&MlpSpec>,
) -> Result<f64, MetaError> {
    assert!(n_tasks >= 1, "validation needs at least one task");
    let kind = family.kind();
    let spec = approximator
        .copied()
        .unwrap_or_else(|| approximator_spec(kind));
    let dim = kind.input_dim();
    let mut total = 0.0;
    for t in 0..n_tasks {
        let task = sample_task(family, mix(seed, VAL_TASK_SUBSTREAM, t as u64))?;
        let theta0 = xavier_init(&spec, mix(seed, VAL_THETA_SUBSTREAM, t as u64));
        let outcome = train_with_snapshot(&task, &spec, &theta0, snap, opt)?;
        let coords = sample_eval_points(
            kind,
            META_VAL_POINTS,
            mix(seed, VAL_EVAL_SUBSTREAM, t as u64),
        );
        let exact = reference_values(&task, &coords)?;
        let preds: Vec<f64> = coords
            .chunks(dim)
            .map(|pt| mlp_eval(&spec, &outcome.theta.0, pt)[0])
            .collect();
        total += relative_l2(&preds, &exact);
    }
    Ok(total / n_tasks as f64)
}

// ---- the full meta-training loop ------------------------------------------------

/// Outer iterations at which snapshots are captured: initialization plus
/// five evenly spaced points ⌈k·I/5⌉ (duplicates collapse for tiny I).
pub fn snapshot_iterations(iterations: usize) -> Vec<usize> {
    let mut v = vec![0];
    for k in 1..=5 {
        v.push((k * iterations).div_ceil(5));
    }
    v.dedup();
    v
}

/// Run the full meta-training schedule and return the final state with
/// snapshots and metric log. Fully deterministic in `config.seed`.
pub fn meta_train(config: &MetaTrainConfig) -> Result<MetaState, MetaError> {
    meta_train_observed(config, |_, _| ())
}

/// [`meta_train`] with an observer called after every completed outer
/// iteration (its record already logged), e.g. for extra validation
/// passes or progress reporting. The observer cannot alter the run.
pub fn meta_train_observed<F>(config: &MetaTrainConfig, mut observe: F) -> Result<MetaState, MetaError>
where
    F: FnMut(usize, &MetaState),
{
    config.inner.validate()?;
    config.outer.validate()?;
    if config.val_every > 0 && config.val_tasks == 0 {
        return Err(MetaError::BadSpec("validation needs at least one task"));
    }
    let spec = config
        .approximator
        .unwrap_or_else(|| approximator_spec(config.family.kind()));
    let eta = init_eta(&config.eta, config.seed)?;
    let weights = config
        .learn_weights
        .then(|| ObjectiveWeights::from_weights(1.0, 1.0, 1.0));
    let mut state = MetaState::new(eta, weights);
    let snaps = snapshot_iterations(config.outer.iterations);
    state.snapshots.push(state.snapshot(0, 0));

    let t_count = config.outer.tasks_per_step;
    let mut tasks: Vec<Task> = Vec::new();
    let mut theta0s: Vec<ParamVector> = Vec::new();
    for i in 1..=config.outer.iterations {
        let every = config.outer.resample_every;
        if i == 1 || (every > 0 && (i - 1) % every == 0) {
            let epoch = (i - 1).checked_div(every).unwrap_or(0);
            tasks = (0..t_count)
                .map(|t| {
                    sample_task(
                        &config.family,
                        mix(config.seed, TASK_STREAM, (epoch * t_count + t) as u64),
                    )
                })
                .collect::<Result<_, _>>()?;
        }
        let every = config.outer.reinit_every;
        if i == 1 || (every > 0 && (i - 1) % every == 0) {
            let epoch = (i - 1).checked_div(every).unwrap_or(0);
            theta0s = (0..t_count)
                .map(|t| {
                    xavier_init(
                        &spec,
                        mix(config.seed, THETA_STREAM, (epoch * t_count + t) as u64),
                    )
                })
                .collect();
        }
        let mut rec = outer_step(
            &mut state,
            &tasks,
            &theta0s,
            &spec,
            &config.inner,
            &config.outer,
            mix(config.seed, PENALTY_STREAM, i as u64),
        )?;
        if config.val_every > 0 && i % config.val_every == 0 {
            let snap = state.snapshot(state.snapshots.len(), i);
            rec.rl2_val = Some(meta_validate(
                &snap,
                &config.family,
                config.val_budget,
                config.val_tasks,
                mix(config.seed, VAL_STREAM, 0),
            )?);
        }
        state.log.push(rec);
        if snaps.contains(&i) {
            state
                .snapshots
                .push(state.snapshot(state.snapshots.len(), i));
        }
        observe(i, &state);
    }
    Ok(state)
}

fn init_eta(init: &EtaInit, seed: u64) -> Result<EtaParams, MetaError> {
    match init {
        EtaInit::LalSquaredLike => Ok(EtaParams::Lal(
            LalParams::squared_like(LalBounds::default()),
        )),
        EtaInit::FfnPretrained { steps } => {
            let start = FfnLossParams::xavier(mix(seed, ETA_STREAM, 0));
            let (fitted, _fit) =
                mse_pretrain_ffn(start, LOSS_INPUT_DOMAIN, *steps, mix(seed, ETA_STREAM, 1))?;
            Ok(EtaParams::Ffn(fitted))
        }
        EtaInit::FfnRandom => Ok(EtaParams::Ffn(FfnLossParams::xavier(mix(
            seed, ETA_STREAM, 0,
        )))),
    }
}
