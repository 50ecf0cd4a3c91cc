//! Parametrized task distributions: samplers for the four problem
//! families, their datasets (collocation, boundary, initial, solution
//! points), PDE residual operators wired through the approximator network,
//! reference solutions for test-error evaluation, and the inner/outer
//! objective builders that score residuals with a chosen loss function.

pub mod advection;
pub mod burgers;
pub mod reaction_diffusion;
pub mod regression;

use crate::autodiff::{Graph, NodeId};
use crate::losses::{ActiveLoss, StandardLoss};
use crate::network::{mlp_forward, MlpSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(thiserror::Error, Debug)]
pub enum TaskError {
    #[error("dataset for weighted term `{0}` is empty")]
    EmptyWeightedTerm(&'static str),
    #[error("task supplies no data points")]
    NoData,
    #[error("viscosity {lambda:e} is below the quadrature resolution floor {min:e}")]
    ViscosityTooSmall { lambda: f64, min: f64 },
}

/// Which differential problem a task instantiates.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Advection,
    ReactionDiffusion,
    Burgers,
}

impl TaskKind {
    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            _ => 2,
        }
    }

    /// Coordinate bounds per input dimension.
    pub fn domain(self) -> Vec<(f64, f64)> {
        match self {
            TaskKind::Regression => vec![regression::DOMAIN],
            TaskKind::Advection => vec![advection::T_RANGE, advection::X_RANGE],
            TaskKind::ReactionDiffusion => {
                vec![reaction_diffusion::X_RANGE, reaction_diffusion::X_RANGE]
            }
            TaskKind::Burgers => vec![burgers::T_RANGE, burgers::X_RANGE],
        }
    }
}

/// Default approximator architecture for each family: tanh hidden layers,
/// linear output.
pub fn approximator_spec(kind: TaskKind) -> MlpSpec {
    match kind {
        TaskKind::Regression => MlpSpec::pinn(1, 3, 40),
        TaskKind::Advection => MlpSpec::pinn(2, 4, 20),
        TaskKind::ReactionDiffusion => MlpSpec::pinn(2, 3, 20),
        TaskKind::Burgers => MlpSpec::pinn(2, 3, 20),
    }
}

/// Burgers viscosity regime: sharp-fronted (r1) or smooth (r2).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurgersRegime {
    R1,
    R2,
}

/// What the validation (outer-objective) datasets hold: fresh draws
/// mirroring the training sets, or exact-solution points only.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterData {
    Single,
    Double { n_u: usize },
}

/// A task distribution: parameter ranges plus dataset size tables.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Regression {
        k: f64,
        omega1: (f64, f64),
        omega2: (f64, f64),
        sigma_eps: f64,
        n_u: usize,
        n_u_val: usize,
    },
    Advection {
        velocity: f64,
        lambda: (f64, f64),
        /// {N_f, N_b, N_u0}; validation re-draws the same counts.
        n: [usize; 3],
    },
    ReactionDiffusion {
        k_diff: f64,
        alpha: (f64, f64),
        omega: (f64, f64),
        /// {N_f, N_b}; the solution is known on all boundaries, so there
        /// is no separate initial-condition set.
        n: [usize; 2],
        outer: OuterData,
    },
    Burgers {
        lambda: (f64, f64),
        /// {N_f, N_b, N_u0}.
        n: [usize; 3],
        outer: OuterData,
    },
}

impl TaskFamily {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFamily::Regression { .. } => TaskKind::Regression,
            TaskFamily::Advection { .. } => TaskKind::Advection,
            TaskFamily::ReactionDiffusion { .. } => TaskKind::ReactionDiffusion,
            TaskFamily::Burgers { .. } => TaskKind::Burgers,
        }
    }

    /// Function approximation, meta-training distribution: unit jump,
    /// ω₁ ∈ [1, 3], ω₂ ∈ [5, 6], noise σ = 0.2 on 100 training points;
    /// 1,000 clean validation points.
    pub fn regression_meta_train() -> Self {
        TaskFamily::Regression {
            k: 1.0,
            omega1: (1.0, 3.0),
            omega2: (5.0, 6.0),
            sigma_eps: 0.2,
            n_u: 100,
            n_u_val: 1000,
        }
    }

    /// Function approximation, out-of-distribution test row: wider
    /// frequency ranges ω₁ ∈ [0.5, 4], ω₂ ∈ [6, 7].
    pub fn regression_ood() -> Self {
        let mut fam = TaskFamily::regression_meta_train();
        let TaskFamily::Regression { omega1, omega2, .. } = &mut fam else {
            unreachable!()
        };
        *omega1 = (0.5, 4.0);
        *omega2 = (6.0, 7.0);
        fam
    }

    /// Advecting box with unit velocity, width λ ∈ [0.5, 1], and dataset
    /// sizes {1,000, 100, 200}.
    pub fn advection() -> Self {
        TaskFamily::Advection {
            velocity: 1.0,
            lambda: (0.5, 1.0),
            n: [1000, 100, 200],
        }
    }

    /// Reaction-diffusion meta-training distribution: α ∈ [0.1, 1],
    /// ω ∈ [1, 5], datasets {1,600, 160}; `double_data` switches the
    /// validation sets to 1,600 exact-solution points.
    pub fn reaction_diffusion_meta_train(double_data: bool) -> Self {
        TaskFamily::ReactionDiffusion {
            k_diff: 1.0,
            alpha: (0.1, 1.0),
            omega: (1.0, 5.0),
            n: [1600, 160],
            outer: if double_data {
                OuterData::Double { n_u: 1600 }
            } else {
                OuterData::Single
            },
        }
    }

    /// Reaction-diffusion OOD test row: α ∈ [0.1, 2], ω ∈ [0.5, 7],
    /// datasets {2,500, 200}.
    pub fn reaction_diffusion_ood() -> Self {
        TaskFamily::ReactionDiffusion {
            k_diff: 1.0,
            alpha: (0.1, 2.0),
            omega: (0.5, 7.0),
            n: [2500, 200],
            outer: OuterData::Single,
        }
    }

    /// Burgers meta-training distribution: viscosity λ ∈ [1e-3, 2e-3] (r1)
    /// or [0.1, 1] (r2), datasets {1,000, 200, 100}; `double_data` switches
    /// the validation sets to 10,000 exact-solution points.
    pub fn burgers_meta_train(regime: BurgersRegime, double_data: bool) -> Self {
        TaskFamily::Burgers {
            lambda: match regime {
                BurgersRegime::R1 => (1e-3, 2e-3),
                BurgersRegime::R2 => (0.1, 1.0),
            },
            n: [1000, 200, 100],
            outer: if double_data {
                OuterData::Double { n_u: 10_000 }
            } else {
                OuterData::Single
            },
        }
    }

    /// Burgers OOD test rows: λ ∈ [1e-3, 1e-2] (r1) or [1e-2, 2] (r2),
    /// datasets {2,000, 200, 100}.
    pub fn burgers_ood(regime: BurgersRegime) -> Self {
        TaskFamily::Burgers {
            lambda: match regime {
                BurgersRegime::R1 => (1e-3, 1e-2),
                BurgersRegime::R2 => (1e-2, 2.0),
            },
            n: [2000, 200, 100],
            outer: OuterData::Single,
        }
    }
}

/// A batch of scored points: flat point-major coordinates plus one target
/// per point. For collocation sets the target is the data value consumed
/// inside the residual (source term, boundary trace); for initial and
/// solution sets it is the loss target itself.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PointSet {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize) -> Self {
        PointSet {
            dim,
            coords: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, coords: &[f64], target: f64) {
        assert_eq!(coords.len(), self.dim);
        self.coords.extend_from_slice(coords);
        self.targets.push(target);
    }
}

/// The four dataset groups of one task.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TaskData {
    pub f: PointSet,
    pub b: PointSet,
    pub u0: PointSet,
    pub u: PointSet,
}

impl TaskData {
    pub fn empty(dim: usize) -> Self {
        TaskData {
            f: PointSet::new(dim),
            b: PointSet::new(dim),
            u0: PointSet::new(dim),
            u: PointSet::new(dim),
        }
    }

    pub fn term(&self, term: Term) -> &PointSet {
        match term {
            Term::F => &self.f,
            Term::B => &self.b,
            Term::U0 => &self.u0,
            Term::U => &self.u,
        }
    }
}

/// Objective term tags: PDE residual, boundary, initial, solution data.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Term {
    F,
    B,
    U0,
    U,
}

pub const ALL_TERMS: [Term; 4] = [Term::F, Term::B, Term::U0, Term::U];

impl Term {
    pub fn label(self) -> &'static str {
        match self {
            Term::F => "f",
            Term::B => "b",
            Term::U0 => "u0",
            Term::U => "u",
        }
    }
}

/// One sampled task: the drawn parameters plus its training and validation
/// datasets. Serializable for reproducibility dumps.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Task {
    pub family: TaskFamily,
    pub lambda: Vec<f64>,
    pub seed: u64,
    pub train: TaskData,
    pub val: TaskData,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        self.family.kind()
    }
}

/// Draw one task: λ uniformly from the family ranges, then the training
/// and validation datasets in a fixed order from the same stream, so equal
/// seeds reproduce tasks bit-for-bit.
pub fn sample_task(family: &TaskFamily, seed: u64) -> Result<Task, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = match family {
        TaskFamily::Regression {
            k,
            omega1,
            omega2,
            sigma_eps,
            n_u,
            n_u_val,
        } => {
            let w1 = rng.gen_range(omega1.0..omega1.1);
            let w2 = rng.gen_range(omega2.0..omega2.1);
            let mut train = TaskData::empty(1);
            for _ in 0..*n_u {
                let x = rng.gen_range(regression::DOMAIN.0..regression::DOMAIN.1);
                let y = regression::noisy_target(*k, w1, w2, *sigma_eps, x, &mut rng);
                train.u.push(&[x], y);
            }
            let mut val = TaskData::empty(1);
            for _ in 0..*n_u_val {
                let x = rng.gen_range(regression::DOMAIN.0..regression::DOMAIN.1);
                val.u.push(&[x], regression::clean_target(*k, w1, w2, x));
            }
            Task {
                family: family.clone(),
                lambda: vec![w1, w2],
                seed,
                train,
                val,
            }
        }
        TaskFamily::Advection {
            velocity: _,
            lambda,
            n,
        } => {
            let lam = rng.gen_range(lambda.0..lambda.1);
            let mk = |rng: &mut ChaCha8Rng| {
                let mut data = TaskData::empty(2);
                for _ in 0..n[0] {
                    let t = rng.gen_range(0.0..1.0);
                    let x = rng.gen_range(-1.0..1.0);
                    data.f.push(&[t, x], 0.0);
                }
                for i in 0..n[1] {
                    let t = rng.gen_range(0.0..1.0);
                    let x = if i % 2 == 0 { -1.0 } else { 1.0 };
                    data.b.push(&[t, x], 0.0);
                }
                for _ in 0..n[2] {
                    let x = rng.gen_range(-1.0..1.0);
                    data.u0.push(&[0.0, x], advection::box_profile(lam, x));
                }
                data
            };
            let train = mk(&mut rng);
            let val = mk(&mut rng);
            Task {
                family: family.clone(),
                lambda: vec![lam],
                seed,
                train,
                val,
            }
        }
        TaskFamily::ReactionDiffusion {
            k_diff,
            alpha,
            omega,
            n,
            outer,
        } => {
            let a1 = rng.gen_range(alpha.0..alpha.1);
            let a2 = rng.gen_range(alpha.0..alpha.1);
            let ws: Vec<f64> = (0..4).map(|_| rng.gen_range(omega.0..omega.1)).collect();
            let lam = vec![a1, a2, ws[0], ws[1], ws[2], ws[3]];
            let mk = |rng: &mut ChaCha8Rng, n_f: usize, n_b: usize| {
                let mut data = TaskData::empty(2);
                for _ in 0..n_f {
                    let x1 = rng.gen_range(-1.0..1.0);
                    let x2 = rng.gen_range(-1.0..1.0);
                    let z = reaction_diffusion::source(*k_diff, &lam, x1, x2);
                    data.f.push(&[x1, x2], z);
                }
                for i in 0..n_b {
                    let s = rng.gen_range(-1.0..1.0);
                    let p = match i % 4 {
                        0 => [-1.0, s],
                        1 => [1.0, s],
                        2 => [s, -1.0],
                        _ => [s, 1.0],
                    };
                    data.b
                        .push(&p, reaction_diffusion::fabricated_u(&lam, p[0], p[1]));
                }
                data
            };
            let train = mk(&mut rng, n[0], n[1]);
            let val = match outer {
                OuterData::Single => mk(&mut rng, n[0], n[1]),
                OuterData::Double { n_u } => {
                    let mut data = TaskData::empty(2);
                    for _ in 0..*n_u {
                        let x1 = rng.gen_range(-1.0..1.0);
                        let x2 = rng.gen_range(-1.0..1.0);
                        data.u
                            .push(&[x1, x2], reaction_diffusion::fabricated_u(&lam, x1, x2));
                    }
                    data
                }
            };
            Task {
                family: family.clone(),
                lambda: lam,
                seed,
                train,
                val,
            }
        }
        TaskFamily::Burgers { lambda, n, outer } => {
            let lam = rng.gen_range(lambda.0..lambda.1);
            let mk = |rng: &mut ChaCha8Rng| {
                let mut data = TaskData::empty(2);
                for _ in 0..n[0] {
                    let t = rng.gen_range(0.0..1.0);
                    let x = rng.gen_range(-1.0..1.0);
                    data.f.push(&[t, x], 0.0);
                }
                for i in 0..n[1] {
                    let t = rng.gen_range(0.0..1.0);
                    let x = if i % 2 == 0 { -1.0 } else { 1.0 };
                    data.b.push(&[t, x], 0.0);
                }
                for _ in 0..n[2] {
                    let x = rng.gen_range(-1.0..1.0);
                    data.u0.push(&[0.0, x], burgers::initial_condition(x));
                }
                data
            };
            let train = mk(&mut rng);
            let val = match outer {
                OuterData::Single => mk(&mut rng),
                OuterData::Double { n_u } => {
                    let mut coords = Vec::with_capacity(2 * n_u);
                    for _ in 0..*n_u {
                        coords.push(rng.gen_range(0.0..1.0));
                        coords.push(rng.gen_range(-1.0..1.0));
                    }
                    let targets = burgers::reference_values(lam, &coords)?;
                    let mut data = TaskData::empty(2);
                    data.u = PointSet {
                        dim: 2,
                        coords,
                        targets,
                    };
                    data
                }
            };
            Task {
                family: family.clone(),
                lambda: vec![lam],
                seed,
                train,
                val,
            }
        }
    };
    Ok(task)
}

/// Uniform points over the task domain for test-error evaluation, flat
/// point-major.
pub fn sample_eval_points(kind: TaskKind, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = kind.domain();
    let mut coords = Vec::with_capacity(n * domain.len());
    for _ in 0..n {
        for &(lo, hi) in &domain {
            coords.push(rng.gen_range(lo..hi));
        }
    }
    coords
}

/// Exact solution values at the given flat coordinates.
pub fn reference_values(task: &Task, coords: &[f64]) -> Result<Vec<f64>, TaskError> {
    assert_eq!(coords.len() % task.kind().input_dim(), 0);
    match (&task.family, task.kind()) {
        (TaskFamily::Regression { k, .. }, _) => Ok(coords
            .iter()
            .map(|&x| regression::clean_target(*k, task.lambda[0], task.lambda[1], x))
            .collect()),
        (TaskFamily::Advection { velocity, .. }, _) => Ok(coords
            .chunks_exact(2)
            .map(|p| advection::reference(task.lambda[0], *velocity, p[0], p[1]))
            .collect()),
        (_, TaskKind::ReactionDiffusion) => Ok(coords
            .chunks_exact(2)
            .map(|p| reaction_diffusion::fabricated_u(&task.lambda, p[0], p[1]))
            .collect()),
        (_, TaskKind::Burgers) => burgers::reference_values(task.lambda[0], coords),
        _ => unreachable!("family/kind mismatch"),
    }
}

/// Per-term weighting of the composite objective.
pub enum TermWeights {
    /// Every term weighted 1.
    Unit,
    /// Learnable positive weights for the (f, b, u0) terms, given as graph
    /// nodes; the solution term, when present, stays at 1.
    Mapped([NodeId; 3]),
}

/// Which dataset split the objective reads.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
}

/// Network prediction wired for dataset point `i` of `term`, paired with
/// the loss target: collocation and boundary terms yield (operator
/// residual, 0), initial and solution terms (û(point), target).
fn term_pred(
    g: &mut Graph,
    task: &Task,
    spec: &MlpSpec,
    theta: &[NodeId],
    term: Term,
    set: &PointSet,
    i: usize,
) -> (NodeId, f64) {
    let pt = set.point(i);
    let target = set.targets[i];
    match (term, &task.family) {
        (Term::F, TaskFamily::Advection { velocity, .. }) => (
            advection::residual(g, spec, theta, *velocity, pt[0], pt[1]),
            0.0,
        ),
        (Term::F, TaskFamily::ReactionDiffusion { k_diff, .. }) => (
            reaction_diffusion::residual(g, spec, theta, *k_diff, target, pt[0], pt[1]),
            0.0,
        ),
        (Term::F, TaskFamily::Burgers { .. }) => (
            burgers::residual(g, spec, theta, task.lambda[0], pt[0], pt[1]),
            0.0,
        ),
        (Term::F, TaskFamily::Regression { .. }) => {
            unreachable!("regression tasks carry no collocation data")
        }
        (Term::B, _) => {
            // Dirichlet trace residual û − g_b, scored against zero
            let u = forward_at(g, spec, theta, pt);
            let gb = g.constant(target);
            (g.sub(u, gb), 0.0)
        }
        (Term::U0, _) | (Term::U, _) => (forward_at(g, spec, theta, pt), target),
    }
}

fn forward_at(g: &mut Graph, spec: &MlpSpec, theta: &[NodeId], pt: &[f64]) -> NodeId {
    let xs: Vec<NodeId> = pt.iter().map(|&v| g.constant(v)).collect();
    mlp_forward(g, spec, theta, &xs)[0]
}

/// Composite objective over one dataset split: the weighted sum of
/// per-term average point losses. Empty terms are skipped under unit
/// weights; explicitly weighted terms must be nonempty.
pub fn build_objective(
    g: &mut Graph,
    task: &Task,
    spec: &MlpSpec,
    theta: &[NodeId],
    loss: &ActiveLoss,
    weights: &TermWeights,
    split: Split,
) -> Result<NodeId, TaskError> {
    let data = match split {
        Split::Train => &task.train,
        Split::Val => &task.val,
    };
    if let TermWeights::Mapped(_) = weights {
        for term in [Term::F, Term::B, Term::U0] {
            if data.term(term).is_empty() {
                return Err(TaskError::EmptyWeightedTerm(term.label()));
            }
        }
    }
    let mut parts = Vec::new();
    for term in ALL_TERMS {
        let set = data.term(term);
        if set.is_empty() {
            continue;
        }
        let mut point_losses = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            let (pred, target) = term_pred(g, task, spec, theta, term, set, i);
            let tn = g.constant(target);
            point_losses.push(loss.point_loss(g, pred, tn));
        }
        let mut avg = g.mean(&point_losses);
        if let TermWeights::Mapped(w) = weights {
            let wn = match term {
                Term::F => Some(w[0]),
                Term::B => Some(w[1]),
                Term::U0 => Some(w[2]),
                Term::U => None,
            };
            if let Some(wn) = wn {
                avg = g.mul(wn, avg);
            }
        }
        parts.push(avg);
    }
    if parts.is_empty() {
        return Err(TaskError::NoData);
    }
    Ok(g.sum(&parts))
}

/// Training-split objective L_τ(θ, η): the composite scored with the
/// active (possibly learned) loss.
pub fn build_inner_objective(
    g: &mut Graph,
    task: &Task,
    spec: &MlpSpec,
    theta: &[NodeId],
    loss: &ActiveLoss,
    weights: &TermWeights,
) -> Result<NodeId, TaskError> {
    build_objective(g, task, spec, theta, loss, weights, Split::Train)
}

/// Validation objective: the mean over tasks of the unit-weighted
/// mean-squared composite on each task's validation split, evaluated at
/// that task's adapted parameters.
pub fn build_outer_objective(
    g: &mut Graph,
    tasks: &[Task],
    thetas: &[Vec<NodeId>],
    spec: &MlpSpec,
) -> Result<NodeId, TaskError> {
    assert_eq!(tasks.len(), thetas.len());
    if tasks.is_empty() {
        return Err(TaskError::NoData);
    }
    let mse = ActiveLoss::Standard(StandardLoss::mse());
    let per: Result<Vec<NodeId>, TaskError> = tasks
        .iter()
        .zip(thetas)
        .map(|(t, th)| build_objective(g, t, spec, th, &mse, &TermWeights::Unit, Split::Val))
        .collect();
    let per = per?;
    Ok(g.mean(&per))
}
