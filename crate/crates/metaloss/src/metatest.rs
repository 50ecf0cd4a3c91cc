//! Meta-testing: train fresh networks on unseen tasks to a full budget
//! under every candidate loss — learned snapshots, the standard zoo, the
//! online adaptive loss — and aggregate relative-L² trajectories into
//! min-then-mean tables. Also hosts the inner-optimizer β sweep and the
//! schedule design-option sweep.
//!
//! The comparison is paired: for a given run seed, task parameters, data
//! sets, network initializations, drawn architectures, and evaluation
//! points are bitwise identical across candidate losses. (loss, task)
//! trainings are independent and could run in parallel; they execute
//! sequentially here and aggregate in (loss index, task index) order.

use crate::autodiff::{Graph, NodeId};
use crate::losses::oal::OAL_ALPHA_MAX;
use crate::losses::{
    default_logz_table, oal_nodes, ActiveLoss, AlphaOpt, LossSnapshot, OalState, StandardKind,
    StandardLoss,
};
use crate::metalearn::{
    meta_train_observed, meta_validate_with, mix, snapshot_loss, standard_snapshot, EtaInit,
    InnerOptSpec, MetaError, MetaTrainConfig, OptKind, OptState, OuterOptSpec,
};
use crate::network::{mlp_eval, params_to_leaves, xavier_init, MlpSpec, ParamVector};
use crate::numerics::relative_l2;
use crate::tasks::{
    approximator_spec, build_inner_objective, reference_values, sample_eval_points, sample_task,
    Task, TaskFamily, TaskKind, TermWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A sampled relative error above this (or non-finite) flags the run as
/// divergent and truncates its trajectory.
pub const DIVERGENCE_RL2: f64 = 1e3;

/// Test-error sampling cadence (iterations between recorded points).
pub const DEFAULT_RECORD_EVERY: usize = 100;

/// Inner-optimizer decay pairs compared in the memory-length sweep.
pub const ADAM_BETA_GRID: [(f64, f64); 4] = [(0.5, 0.5), (0.8, 0.8), (0.9, 0.999), (0.99, 0.9999)];

const TEST_TASK_STREAM: u64 = 11;
const TEST_THETA_STREAM: u64 = 12;
const TEST_ARCH_STREAM: u64 = 13;
const TEST_EVAL_STREAM: u64 = 14;
const SWEEP_VAL_STREAM: u64 = 15;

/// Relative L² test error ‖û − u‖₂ / ‖u‖₂ over an evaluation set.
pub fn rl2(predictions: &[f64], references: &[f64]) -> Result<f64, MetaError> {
    if references.iter().map(|r| r * r).sum::<f64>() == 0.0 {
        return Err(MetaError::BadSpec("reference norm is zero"));
    }
    Ok(relative_l2(predictions, references))
}

/// Evaluation-set size used for each family's test error.
pub fn default_eval_points(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Regression => 1_000,
        TaskKind::Advection => 10_000,
        TaskKind::ReactionDiffusion => 2_500,
        TaskKind::Burgers => 10_000,
    }
}

/// Test-network architecture: the family default, or a fresh draw per task.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchMode {
    Fixed,
    Random,
}

/// One random test architecture: hidden depth uniform on {2..5}, width
/// uniform on {15..55}.
pub fn draw_architecture(kind: TaskKind, seed: u64) -> MlpSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(2..=5);
    let width = rng.gen_range(15..=55);
    MlpSpec::pinn(kind.input_dim(), layers, width)
}

/// Everything one meta-test run needs besides the candidate list.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TestProtocol {
    pub family: TaskFamily,
    pub n_tasks: usize,
    /// Test-time training; `steps` is the full budget.
    pub optimizer: InnerOptSpec,
    /// Evaluation-set size; family default when omitted.
    #[serde(default)]
    pub eval_points: Option<usize>,
    #[serde(default = "default_arch_mode")]
    pub arch: ArchMode,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Fixed-mode architecture override.
    #[serde(default)]
    pub approximator: Option<MlpSpec>,
}

fn default_arch_mode() -> ArchMode {
    ArchMode::Fixed
}
fn default_record_every() -> usize {
    DEFAULT_RECORD_EVERY
}

impl TestProtocol {
    /// Plain-gradient test training (the meta-training inner rate).
    pub fn sgd(family: TaskFamily, n_tasks: usize, budget: usize) -> Self {
        TestProtocol {
            family,
            n_tasks,
            optimizer: InnerOptSpec::sgd(0.01, budget),
            eval_points: None,
            arch: ArchMode::Fixed,
            record_every: DEFAULT_RECORD_EVERY,
            approximator: None,
        }
    }

    /// Adaptive-moment test training at the standard rate.
    pub fn adam(family: TaskFamily, n_tasks: usize, budget: usize) -> Self {
        TestProtocol {
            optimizer: InnerOptSpec::adam(1e-3, budget),
            ..TestProtocol::sgd(family, n_tasks, budget)
        }
    }
}

/// A loss entered in the comparison.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Candidate {
    /// Frozen learned or standard loss reconstructed from a snapshot.
    Snapshot { label: String, snap: LossSnapshot },
    /// Online adaptive loss: robustness parameter trains alongside θ.
    Oal { label: String, alpha_lr: f64 },
    /// Squared loss with its minimum displaced — violates the calibration
    /// conditions on purpose.
    ShiftedSquared { label: String, shift: f64 },
}

impl Candidate {
    pub fn label(&self) -> &str {
        match self {
            Candidate::Snapshot { label, .. }
            | Candidate::Oal { label, .. }
            | Candidate::ShiftedSquared { label, .. } => label,
        }
    }
}

/// Fixed baseline losses: squared, absolute, Cauchy (c = 1), Geman-McClure
/// (c = 1).
pub fn standard_zoo() -> Vec<Candidate> {
    let entries = [
        ("mse", StandardLoss::mse()),
        ("l1", StandardLoss::new(StandardKind::Absolute, 1.0)),
        ("cauchy", StandardLoss::new(StandardKind::Cauchy, 1.0)),
        ("gmc", StandardLoss::new(StandardKind::GemanMcclure, 1.0)),
    ];
    entries
        .into_iter()
        .map(|(label, loss)| Candidate::Snapshot {
            label: label.to_string(),
            snap: standard_snapshot(loss),
        })
        .collect()
}

/// Wrap meta-training snapshots as candidates labeled `{prefix}-{index}`.
pub fn snapshot_candidates(prefix: &str, snaps: &[LossSnapshot]) -> Vec<Candidate> {
    snaps
        .iter()
        .map(|s| Candidate::Snapshot {
            label: format!("{prefix}-{}", s.snapshot_index),
            snap: s.clone(),
        })
        .collect()
}

/// The two online adaptive variants (α learning rates 0.01 and 0.1).
pub fn oal_candidates() -> Vec<Candidate> {
    vec![
        Candidate::Oal {
            label: "oal-1".to_string(),
            alpha_lr: 0.01,
        },
        Candidate::Oal {
            label: "oal-2".to_string(),
            alpha_lr: 0.1,
        },
    ]
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub rl2: f64,
}

/// One (loss, task) training run: sampled error trajectory, its minimum,
/// a divergence flag, and (online adaptive only) the robustness-parameter
/// trajectory.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TaskRun {
    pub loss: String,
    pub task_index: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    pub min_rl2: f64,
    pub diverged: bool,
    #[serde(default)]
    pub alpha_trajectory: Option<Vec<(usize, f64)>>,
}

/// Per-loss aggregate: min over each task's trajectory, then mean over
/// tasks. `any_diverged` marks rows whose mean includes truncated runs.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: String,
    pub mean_min_rl2: f64,
    pub per_task: Vec<f64>,
    pub any_diverged: bool,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TestResult {
    pub runs: Vec<TaskRun>,
    pub summary: Vec<LossSummary>,
}

struct TaskSetup {
    task: Task,
    spec: MlpSpec,
    theta0: ParamVector,
    coords: Vec<f64>,
    exact: Vec<f64>,
}

fn predictions(setup: &TaskSetup, theta: &[f64]) -> Vec<f64> {
    setup
        .coords
        .chunks(setup.spec.input_dim)
        .map(|pt| mlp_eval(&setup.spec, theta, pt)[0])
        .collect()
}

/// Train unseen tasks to the full budget under every candidate and collect
/// trajectories plus the min-then-mean table. Tasks, initializations,
/// architectures, and evaluation points depend only on `seed` and the task
/// index, never on the candidate — the comparison is paired.
pub fn run_meta_test(
    protocol: &TestProtocol,
    candidates: &[Candidate],
    seed: u64,
) -> Result<TestResult, MetaError> {
    assert!(protocol.n_tasks >= 1, "need at least one test task");
    assert!(protocol.record_every >= 1, "record cadence must be positive");
    let kind = protocol.family.kind();
    let n_eval = protocol
        .eval_points
        .unwrap_or_else(|| default_eval_points(kind));

    let mut setups = Vec::with_capacity(protocol.n_tasks);
    for t in 0..protocol.n_tasks as u64 {
        let task = sample_task(&protocol.family, mix(seed, TEST_TASK_STREAM, t))?;
        let spec = match protocol.arch {
            ArchMode::Fixed => protocol
                .approximator
                .unwrap_or_else(|| approximator_spec(kind)),
            ArchMode::Random => draw_architecture(kind, mix(seed, TEST_ARCH_STREAM, t)),
        };
        let theta0 = xavier_init(&spec, mix(seed, TEST_THETA_STREAM, t));
        let coords = sample_eval_points(kind, n_eval, mix(seed, TEST_EVAL_STREAM, t));
        let exact = reference_values(&task, &coords)?;
        setups.push(TaskSetup {
            task,
            spec,
            theta0,
            coords,
            exact,
        });
    }

    let mut runs = Vec::with_capacity(candidates.len() * setups.len());
    let mut summary = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut per_task = Vec::with_capacity(setups.len());
        let mut any_diverged = false;
        for (t, setup) in setups.iter().enumerate() {
            let run = run_candidate_task(cand, setup, &protocol.optimizer, protocol.record_every, t)?;
            per_task.push(run.min_rl2);
            any_diverged |= run.diverged;
            runs.push(run);
        }
        let mean_min_rl2 = per_task.iter().sum::<f64>() / per_task.len() as f64;
        summary.push(LossSummary {
            loss: cand.label().to_string(),
            mean_min_rl2,
            per_task,
            any_diverged,
        });
    }
    Ok(TestResult { runs, summary })
}

fn run_candidate_task(
    cand: &Candidate,
    setup: &TaskSetup,
    opt: &InnerOptSpec,
    record_every: usize,
    task_index: usize,
) -> Result<TaskRun, MetaError> {
    match cand {
        Candidate::Snapshot { label, snap } => run_frozen(
            label,
            |g| snapshot_loss(g, snap),
            setup,
            opt,
            record_every,
            task_index,
        ),
        Candidate::ShiftedSquared { label, shift } => run_frozen(
            label,
            |_| Ok((ActiveLoss::ShiftedSquared { shift: *shift }, TermWeights::Unit)),
            setup,
            opt,
            record_every,
            task_index,
        ),
        Candidate::Oal { label, alpha_lr } => {
            run_online_adaptive(label, *alpha_lr, setup, opt, record_every, task_index)
        }
    }
}

/// Value-mode training with a frozen loss: one objective graph, re-evaluated
/// in place; the test error is sampled on the recording schedule. Divergence
/// (non-finite training values/parameters, or a sampled error that is
/// non-finite or above [`DIVERGENCE_RL2`]) truncates the trajectory and
/// flags the run.
fn run_frozen<F>(
    label: &str,
    make_loss: F,
    setup: &TaskSetup,
    opt: &InnerOptSpec,
    record_every: usize,
    task_index: usize,
) -> Result<TaskRun, MetaError>
where
    F: FnOnce(&mut Graph) -> Result<(ActiveLoss, TermWeights), MetaError>,
{
    let mut g = Graph::new();
    let (loss, weights) = make_loss(&mut g)?;
    let theta_nodes = params_to_leaves(&mut g, &setup.theta0);
    let objective =
        build_inner_objective(&mut g, &setup.task, &setup.spec, &theta_nodes, &loss, &weights)?;

    let mut theta = setup.theta0.clone();
    let mut opt_state = OptState::new(opt, theta.len());
    let mut trajectory = vec![TrajectoryPoint {
        iter: 0,
        rl2: rl2(&predictions(setup, &theta.0), &setup.exact)?,
    }];
    let mut diverged = false;
    let mut assigns: Vec<(NodeId, f64)> = theta_nodes.iter().map(|&n| (n, 0.0)).collect();
    for step in 1..=opt.steps {
        for (slot, &v) in assigns.iter_mut().zip(&theta.0) {
            slot.1 = v;
        }
        if g.forward(&assigns).is_err() {
            diverged = true;
            break;
        }
        let grads = g.grad_values(objective, &theta_nodes);
        let mut next = theta.clone();
        opt_state.step(&mut next.0, &grads);
        if next.0.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        theta = next;
        if step % record_every == 0 || step == opt.steps {
            let err = rl2(&predictions(setup, &theta.0), &setup.exact)?;
            if !err.is_finite() || err > DIVERGENCE_RL2 {
                diverged = true;
                break;
            }
            trajectory.push(TrajectoryPoint { iter: step, rl2: err });
        }
    }
    let min_rl2 = trajectory
        .iter()
        .map(|p| p.rl2)
        .fold(f64::INFINITY, f64::min);
    Ok(TaskRun {
        loss: label.to_string(),
        task_index,
        trajectory,
        min_rl2,
        diverged,
        alpha_trajectory: None,
    })
}

/// Online adaptive training: the loss's robustness parameter takes its own
/// optimizer step from the shared backward pass each iteration. The graph
/// is rebuilt every step because the normalizer's active spline segment
/// follows the current α.
fn run_online_adaptive(
    label: &str,
    alpha_lr: f64,
    setup: &TaskSetup,
    opt: &InnerOptSpec,
    record_every: usize,
    task_index: usize,
) -> Result<TaskRun, MetaError> {
    let table = default_logz_table();
    let alpha_opt = match opt.kind {
        OptKind::Sgd => AlphaOpt::Sgd,
        OptKind::Adam => AlphaOpt::adam(opt.beta1, opt.beta2),
    };
    let mut state = OalState::new(2.0, alpha_lr, alpha_opt);
    let mut theta = setup.theta0.clone();
    let mut opt_state = OptState::new(opt, theta.len());
    let mut trajectory = vec![TrajectoryPoint {
        iter: 0,
        rl2: rl2(&predictions(setup, &theta.0), &setup.exact)?,
    }];
    let mut alphas = vec![(0, state.alpha())];
    let mut diverged = false;
    for step in 1..=opt.steps {
        let mut g = Graph::new();
        let ah = g.leaf(state.alpha_hat);
        let nodes = oal_nodes(&mut g, table, ah, state.c);
        let theta_nodes = params_to_leaves(&mut g, &theta);
        let objective = build_inner_objective(
            &mut g,
            &setup.task,
            &setup.spec,
            &theta_nodes,
            &ActiveLoss::Oal(nodes),
            &TermWeights::Unit,
        )?;
        if !g.value(objective).is_finite() {
            diverged = true;
            break;
        }
        let mut wrt = theta_nodes;
        wrt.push(ah);
        let grads = g.grad_values(objective, &wrt);
        let (theta_grads, alpha_grad) = grads.split_at(theta.len());
        let mut next = theta.clone();
        opt_state.step(&mut next.0, theta_grads);
        state.step(alpha_grad[0]);
        if next.0.iter().any(|v| !v.is_finite()) || !state.alpha_hat.is_finite() {
            diverged = true;
            break;
        }
        theta = next;
        if step % record_every == 0 || step == opt.steps {
            let err = rl2(&predictions(setup, &theta.0), &setup.exact)?;
            if !err.is_finite() || err > DIVERGENCE_RL2 {
                diverged = true;
                break;
            }
            trajectory.push(TrajectoryPoint { iter: step, rl2: err });
            alphas.push((step, state.alpha()));
        }
    }
    let min_rl2 = trajectory
        .iter()
        .map(|p| p.rl2)
        .fold(f64::INFINITY, f64::min);
    Ok(TaskRun {
        loss: label.to_string(),
        task_index,
        trajectory,
        min_rl2,
        diverged,
        alpha_trajectory: Some(alphas),
    })
}

// ---- CSV emission -----------------------------------------------------------

/// `loss,task,iter,rl2` rows for every sampled trajectory point.
pub fn trajectories_csv(result: &TestResult) -> String {
    let mut s = String::from("loss,task,iter,rl2\n");
    for run in &result.runs {
        for p in &run.trajectory {
            s.push_str(&format!("{},{},{},{}\n", run.loss, run.task_index, p.iter, p.rl2));
        }
    }
    s
}

/// Min-then-mean table with the divergence flag and per-task minima.
pub fn min_rl2_csv(result: &TestResult) -> String {
    let n_tasks = result.summary.first().map_or(0, |s| s.per_task.len());
    let mut s = String::from("loss,mean_min_rl2,diverged");
    for t in 0..n_tasks {
        s.push_str(&format!(",task_{t}"));
    }
    s.push('\n');
    for row in &result.summary {
        s.push_str(&format!(
            "{},{},{}",
            row.loss, row.mean_min_rl2, row.any_diverged
        ));
        for v in &row.per_task {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// `loss,task,iter,alpha` rows for runs that trained a robustness parameter.
pub fn oal_alpha_csv(result: &TestResult) -> String {
    let mut s = String::from("loss,task,iter,alpha\n");
    for run in &result.runs {
        if let Some(alphas) = &run.alpha_trajectory {
            for (iter, alpha) in alphas {
                s.push_str(&format!("{},{},{},{}\n", run.loss, run.task_index, iter, alpha));
            }
        }
    }
    s
}

// ---- inner-optimizer memory sweep ---------------------------------------------

/// Weight the moment accumulators still assign to a gradient `age` steps
/// old: β^age.
pub fn gradient_memory(beta: f64, age: u32) -> f64 {
    beta.powi(age as i32)
}

/// Meta-validation trajectory of one meta-training run at a fixed β pair.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct BetaTrajectory {
    pub beta1: f64,
    pub beta2: f64,
    /// (outer iteration, validation rl2) at the configured cadence.
    pub points: Vec<(usize, f64)>,
}

/// Meta-train once per decay pair (inner optimizer must be the adaptive
/// one) and return each run's validation trajectory.
pub fn adam_beta_sweep(
    base: &MetaTrainConfig,
    pairs: &[(f64, f64)],
) -> Result<Vec<BetaTrajectory>, MetaError> {
    if base.inner.kind != OptKind::Adam {
        return Err(MetaError::BadSpec(
            "decay sweep needs the adaptive inner optimizer",
        ));
    }
    if base.val_every == 0 {
        return Err(MetaError::BadSpec("decay sweep needs periodic validation"));
    }
    pairs
        .iter()
        .map(|&(beta1, beta2)| {
            let mut config = base.clone();
            config.inner = config.inner.with_betas(beta1, beta2);
            let state = crate::metalearn::meta_train(&config)?;
            let points = state
                .log
                .iter()
                .filter_map(|r| r.rl2_val.map(|v| (r.iter, v)))
                .collect();
            Ok(BetaTrajectory {
                beta1,
                beta2,
                points,
            })
        })
        .collect()
}

// ---- schedule design-option sweep ----------------------------------------------

/// Cartesian grid of (inner steps, resample cadence, re-init flag), in
/// J-major, resample-mid, re-init-minor order.
pub fn design_grid(
    j_set: &[usize],
    resample_set: &[usize],
    reinit_set: &[bool],
) -> Vec<(usize, usize, bool)> {
    let mut grid = Vec::with_capacity(j_set.len() * resample_set.len() * reinit_set.len());
    for &j in j_set {
        for &f in resample_set {
            for &r in reinit_set {
                grid.push((j, f, r));
            }
        }
    }
    grid
}

/// Configuration of the schedule sweep: every grid point meta-trains the
/// two-parameter loss from its squared-error start under the same seed and
/// validates every `val_every` outer iterations at each requested budget.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DesignSweepConfig {
    pub family: TaskFamily,
    #[serde(default)]
    pub approximator: Option<MlpSpec>,
    /// Template inner optimizer; `steps` is overwritten per grid point.
    pub inner: InnerOptSpec,
    /// Template outer optimizer; resample/re-init cadences are overwritten
    /// per grid point.
    pub outer: OuterOptSpec,
    pub j_set: Vec<usize>,
    /// Resampling cadences; 0 means never resample.
    pub resample_set: Vec<usize>,
    pub reinit_set: Vec<bool>,
    pub val_every: usize,
    pub val_budgets: Vec<usize>,
    pub val_tasks: usize,
    pub seed: u64,
}

/// Validation errors at one observed outer iteration, one value per
/// configured budget.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DesignPoint {
    pub iter: usize,
    pub rl2: Vec<f64>,
}

/// One grid point's trajectories: the per-iteration training objective and
/// the periodic multi-budget validation errors.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DesignRun {
    pub inner_steps: usize,
    pub resample_every: usize,
    pub reinit: bool,
    pub objective: Vec<f64>,
    pub validation: Vec<DesignPoint>,
}

/// Run the full schedule grid. The re-init flag ties network re-
/// initialization to the task-resampling cadence (true) or keeps the first
/// initialization for the whole run (false).
pub fn design_option_sweep(config: &DesignSweepConfig) -> Result<Vec<DesignRun>, MetaError> {
    if config.val_every == 0 || config.val_budgets.is_empty() {
        return Err(MetaError::BadSpec(
            "design sweep needs periodic validation budgets",
        ));
    }
    let val_seed = mix(config.seed, SWEEP_VAL_STREAM, 0);
    let mut out = Vec::new();
    for (j, f, r) in design_grid(&config.j_set, &config.resample_set, &config.reinit_set) {
        let mut inner = config.inner;
        inner.steps = j;
        let mut outer = config.outer;
        outer.resample_every = f;
        outer.reinit_every = if r { f } else { 0 };
        let mt = MetaTrainConfig {
            family: config.family.clone(),
            eta: EtaInit::LalSquaredLike,
            learn_weights: false,
            inner,
            outer,
            seed: config.seed,
            val_every: 0,
            val_budget: 0,
            val_tasks: 1,
            approximator: config.approximator,
        };
        let mut validation = Vec::new();
        let mut hook_err: Option<MetaError> = None;
        let state = meta_train_observed(&mt, |i, state| {
            if hook_err.is_some() || i % config.val_every != 0 {
                return;
            }
            let snap = state.snapshot(0, i);
            let mut errs = Vec::with_capacity(config.val_budgets.len());
            for &budget in &config.val_budgets {
                let opt = InnerOptSpec::adam(1e-3, budget);
                match meta_validate_with(
                    &snap,
                    &config.family,
                    config.val_tasks,
                    val_seed,
                    &opt,
                    config.approximator.as_ref(),
                ) {
                    Ok(v) => errs.push(v),
                    Err(e) => {
                        hook_err = Some(e);
                        return;
                    }
                }
            }
            validation.push(DesignPoint { iter: i, rl2: errs });
        })?;
        if let Some(e) = hook_err {
            return Err(e);
        }
        out.push(DesignRun {
            inner_steps: j,
            resample_every: f,
            reinit: r,
            objective: state.log.iter().map(|rec| rec.outer_objective).collect(),
            validation,
        });
    }
    Ok(out)
}

/// Median of |x_{i+1} − x_i|: the trajectory-smoothness statistic used to
/// compare schedule options.
pub fn median_abs_successive_diff(xs: &[f64]) -> f64 {
    let mut diffs: Vec<f64> = xs.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    if diffs.is_empty() {
        return 0.0;
    }
    diffs.sort_unstable_by(f64::total_cmp);
    let n = diffs.len();
    if n % 2 == 1 {
        diffs[n / 2]
    } else {
        0.5 * (diffs[n / 2 - 1] + diffs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LalBounds, LalParams};

    fn tiny_regression(n_u: usize, n_u_val: usize) -> TaskFamily {
        TaskFamily::Regression {
            k: 1.0,
            omega1: (1.0, 3.0),
            omega2: (5.0, 6.0),
            sigma_eps: 0.2,
            n_u,
            n_u_val,
        }
    }

    fn desk_protocol(budget: usize, record_every: usize) -> TestProtocol {
        TestProtocol {
            family: tiny_regression(12, 12),
            n_tasks: 2,
            optimizer: InnerOptSpec::adam(1e-3, budget),
            eval_points: Some(200),
            arch: ArchMode::Fixed,
            record_every,
            approximator: Some(MlpSpec::pinn(1, 1, 6)),
        }
    }

    fn mse_candidate() -> Candidate {
        Candidate::Snapshot {
            label: "mse".to_string(),
            snap: standard_snapshot(StandardLoss::mse()),
        }
    }

    #[test]
    fn rl2_matches_its_definition() {
        let u = vec![1.0, -2.0, 3.0];
        assert_eq!(rl2(&u, &u).unwrap(), 0.0);
        assert!((rl2(&[0.0, 0.0, 0.0], &u).unwrap() - 1.0).abs() < 1e-15);
        let scaled: Vec<f64> = u.iter().map(|x| 1.1 * x).collect();
        assert!((rl2(&scaled, &u).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(
            rl2(&u, &[0.0, 0.0, 0.0]),
            Err(MetaError::BadSpec(_))
        ));
    }

    #[test]
    fn eval_point_counts_follow_the_family() {
        assert_eq!(default_eval_points(TaskKind::Regression), 1_000);
        assert_eq!(default_eval_points(TaskKind::Advection), 10_000);
        assert_eq!(default_eval_points(TaskKind::ReactionDiffusion), 2_500);
        assert_eq!(default_eval_points(TaskKind::Burgers), 10_000);
    }

    #[test]
    fn drawn_architectures_stay_in_range() {
        for seed in 0..60 {
            let spec = draw_architecture(TaskKind::Advection, seed);
            assert_eq!(spec.input_dim, 2);
            assert!((2..=5).contains(&spec.hidden_layers), "{}", spec.hidden_layers);
            assert!(
                (15..=55).contains(&spec.hidden_width),
                "{}",
                spec.hidden_width
            );
        }
        let spans: std::collections::HashSet<(usize, usize)> = (0..60)
            .map(|s| {
                let spec = draw_architecture(TaskKind::Regression, s);
                (spec.hidden_layers, spec.hidden_width)
            })
            .collect();
        assert!(spans.len() > 10, "draws should actually vary");
    }

    #[test]
    fn duplicate_candidates_give_identical_runs() {
        let protocol = desk_protocol(30, 10);
        let result = run_meta_test(&protocol, &[mse_candidate(), mse_candidate()], 3).unwrap();
        assert_eq!(result.runs.len(), 4);
        let (a, b) = result.runs.split_at(2);
        for (ra, rb) in a.iter().zip(b) {
            assert_eq!(ra.trajectory, rb.trajectory);
            assert_eq!(ra.min_rl2, rb.min_rl2);
        }
        assert_eq!(
            result.summary[0].mean_min_rl2,
            result.summary[1].mean_min_rl2
        );
    }

    #[test]
    fn comparisons_are_paired_across_losses() {
        let protocol = desk_protocol(10, 5);
        let zoo = standard_zoo();
        let result = run_meta_test(&protocol, &zoo, 9).unwrap();
        // before any training step the error depends only on the shared
        // task/init/eval draws, so it is identical for every loss
        for t in 0..protocol.n_tasks {
            let first = result.runs[t].trajectory[0].rl2;
            for l in 1..zoo.len() {
                let run = &result.runs[l * protocol.n_tasks + t];
                assert_eq!(run.trajectory[0].rl2, first);
                assert_eq!(run.task_index, t);
            }
        }
    }

    #[test]
    fn squared_like_snapshot_performs_like_mse() {
        let lal = LalParams::squared_like(LalBounds::default());
        let lal_cand = Candidate::Snapshot {
            label: "lal-0".to_string(),
            snap: LossSnapshot {
                parametrization: "lal".into(),
                raw_params: vec![lal.alpha_hat, lal.c_hat],
                bounds: Some(lal.bounds),
                weights: None,
                snapshot_index: 0,
                outer_iteration: 0,
            },
        };
        let protocol = desk_protocol(60, 20);
        let result = run_meta_test(&protocol, &[mse_candidate(), lal_cand], 17).unwrap();
        let diff = (result.summary[0].mean_min_rl2 - result.summary[1].mean_min_rl2).abs();
        assert!(diff < 0.02, "mean min-rl2 gap {diff}");
        assert!(!result.summary.iter().any(|s| s.any_diverged));
    }

    #[test]
    fn shifted_minimum_loss_fails_where_mse_succeeds() {
        let protocol = TestProtocol {
            family: TaskFamily::Advection {
                velocity: 1.0,
                lambda: (0.5, 1.0),
                n: [20, 10, 10],
            },
            n_tasks: 1,
            optimizer: InnerOptSpec::adam(1e-3, 200),
            eval_points: Some(400),
            arch: ArchMode::Fixed,
            record_every: 50,
            approximator: Some(MlpSpec::pinn(2, 2, 8)),
        };
        let shifted = Candidate::ShiftedSquared {
            label: "shifted".to_string(),
            shift: 0.3,
        };
        let result = run_meta_test(&protocol, &[mse_candidate(), shifted], 11).unwrap();
        let mse = &result.summary[0];
        let bad = &result.summary[1];
        assert!(
            bad.any_diverged || bad.mean_min_rl2 >= 2.0 * mse.mean_min_rl2,
            "shifted loss should fail: mse {} vs shifted {} (diverged: {})",
            mse.mean_min_rl2,
            bad.mean_min_rl2,
            bad.any_diverged
        );
    }

    #[test]
    fn divergent_run_is_truncated_and_flagged() {
        let mut protocol = desk_protocol(5, 1);
        protocol.optimizer = InnerOptSpec::sgd(1e200, 5);
        let result = run_meta_test(&protocol, &[mse_candidate()], 7).unwrap();
        for run in &result.runs {
            assert!(run.diverged);
            assert!(run.trajectory.len() < 6, "trajectory must be truncated");
            assert!(run.min_rl2.is_finite());
        }
        assert!(result.summary[0].any_diverged);
    }

    #[test]
    fn reported_minimum_is_the_trajectory_minimum() {
        let protocol = desk_protocol(40, 10);
        let result = run_meta_test(&protocol, &standard_zoo(), 13).unwrap();
        for run in &result.runs {
            let recomputed = run
                .trajectory
                .iter()
                .map(|p| p.rl2)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(run.min_rl2, recomputed);
            for p in &run.trajectory {
                assert!(run.min_rl2 <= p.rl2);
                assert!(p.rl2 >= 0.0);
            }
        }
        let by_label = &result.summary[2];
        let mean = by_label.per_task.iter().sum::<f64>() / by_label.per_task.len() as f64;
        assert_eq!(by_label.mean_min_rl2, mean);
    }

    #[test]
    fn online_adaptive_runs_track_alpha_within_bounds() {
        let mut protocol = desk_protocol(30, 10);
        protocol.optimizer = InnerOptSpec::sgd(0.01, 30);
        let result = run_meta_test(&protocol, &oal_candidates(), 21).unwrap();
        assert_eq!(result.runs.len(), 4);
        for run in &result.runs {
            assert!(!run.diverged);
            let alphas = run.alpha_trajectory.as_ref().expect("adaptive runs log α");
            assert_eq!(alphas.len(), run.trajectory.len());
            for &(_, a) in alphas {
                assert!((0.0..=OAL_ALPHA_MAX).contains(&a), "α = {a}");
            }
            assert!((alphas[0].1 - 2.0).abs() < 1e-12);
        }
        // the larger α learning rate moves the parameter further
        let small = result.runs[0].alpha_trajectory.as_ref().unwrap();
        let large = result.runs[2].alpha_trajectory.as_ref().unwrap();
        let d_small = (small.last().unwrap().1 - 2.0).abs();
        let d_large = (large.last().unwrap().1 - 2.0).abs();
        assert!(
            d_large > d_small,
            "lr 0.1 should move α more: {d_large} vs {d_small}"
        );
        // determinism
        let again = run_meta_test(&protocol, &oal_candidates(), 21).unwrap();
        assert_eq!(again.runs, result.runs);
    }

    #[test]
    fn csv_emission_matches_the_result_shape() {
        let mut protocol = desk_protocol(20, 10);
        protocol.optimizer = InnerOptSpec::sgd(0.01, 20);
        let mut cands = vec![mse_candidate()];
        cands.extend(oal_candidates());
        let result = run_meta_test(&protocol, &cands, 5).unwrap();

        let traj = trajectories_csv(&result);
        let mut lines = traj.lines();
        assert_eq!(lines.next(), Some("loss,task,iter,rl2"));
        let n_points: usize = result.runs.iter().map(|r| r.trajectory.len()).sum();
        assert_eq!(traj.lines().count(), n_points + 1);

        let table = min_rl2_csv(&result);
        assert!(table.starts_with("loss,mean_min_rl2,diverged,task_0,task_1\n"));
        assert_eq!(table.lines().count(), cands.len() + 1);
        assert!(table.contains("mse,"));
        assert!(table.contains(",false,"));

        let alpha = oal_alpha_csv(&result);
        assert_eq!(alpha.lines().next(), Some("loss,task,iter,alpha"));
        let n_alpha: usize = result
            .runs
            .iter()
            .filter_map(|r| r.alpha_trajectory.as_ref().map(Vec::len))
            .sum();
        assert_eq!(alpha.lines().count(), n_alpha + 1);
    }

    #[test]
    fn gradient_memory_matches_the_quoted_decay_factors() {
        let short = gradient_memory(0.5, 20);
        assert!((short - 0.5f64.powi(20)).abs() < 1e-18);
        assert!((9e-7..=1.1e-6).contains(&short), "0.5^20 = {short} ~ 1e-6");
        let medium = gradient_memory(0.8, 20);
        assert!(
            (1e-2..=1.2e-2).contains(&medium),
            "0.8^20 = {medium} ~ 1e-2"
        );
    }

    fn desk_meta_config() -> MetaTrainConfig {
        MetaTrainConfig {
            family: tiny_regression(6, 6),
            eta: EtaInit::LalSquaredLike,
            learn_weights: false,
            inner: InnerOptSpec::adam(1e-3, 2),
            outer: OuterOptSpec::adam(1e-3, 4),
            seed: 42,
            val_every: 2,
            val_budget: 5,
            val_tasks: 1,
            approximator: Some(MlpSpec::pinn(1, 1, 4)),
        }
    }

    #[test]
    fn beta_sweep_returns_one_trajectory_per_pair() {
        let pairs = [(0.5, 0.5), (0.9, 0.999)];
        let runs = adam_beta_sweep(&desk_meta_config(), &pairs).unwrap();
        assert_eq!(runs.len(), pairs.len());
        for (run, pair) in runs.iter().zip(&pairs) {
            assert_eq!((run.beta1, run.beta2), *pair);
            assert_eq!(run.points.len(), 2, "validation at iterations 2 and 4");
            assert_eq!(run.points[0].0, 2);
            assert_eq!(run.points[1].0, 4);
        }
        // the decay pair influences the run
        assert_ne!(runs[0].points, runs[1].points);

        let mut bad = desk_meta_config();
        bad.inner = InnerOptSpec::sgd(0.01, 2);
        assert!(matches!(
            adam_beta_sweep(&bad, &pairs),
            Err(MetaError::BadSpec(_))
        ));
    }

    #[test]
    fn full_design_grid_has_sixteen_points() {
        let grid = design_grid(&[1, 20], &[1, 10, 100, 0], &[true, false]);
        assert_eq!(grid.len(), 16);
        let unique: std::collections::HashSet<_> = grid.iter().collect();
        assert_eq!(unique.len(), 16);
    }

    fn desk_sweep_config() -> DesignSweepConfig {
        DesignSweepConfig {
            family: tiny_regression(6, 6),
            approximator: Some(MlpSpec::pinn(1, 1, 4)),
            inner: InnerOptSpec::adam(1e-3, 1),
            outer: OuterOptSpec::adam(1e-3, 12),
            j_set: vec![2],
            resample_set: vec![1, 3, 0],
            reinit_set: vec![true, false],
            val_every: 4,
            val_budgets: vec![5, 10],
            val_tasks: 1,
            seed: 8,
        }
    }

    #[test]
    fn design_sweep_records_training_and_validation_trajectories() {
        let runs = design_option_sweep(&desk_sweep_config()).unwrap();
        assert_eq!(runs.len(), 6);
        for run in &runs {
            assert_eq!(run.objective.len(), 12);
            assert_eq!(run.validation.len(), 3, "iterations 4, 8, 12");
            for point in &run.validation {
                assert_eq!(point.rl2.len(), 2, "one error per budget");
                assert!(point.rl2.iter().all(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn frozen_tasks_give_the_smoothest_objective() {
        let runs = design_option_sweep(&desk_sweep_config()).unwrap();
        let smoothest = runs
            .iter()
            .min_by(|a, b| {
                median_abs_successive_diff(&a.objective)
                    .total_cmp(&median_abs_successive_diff(&b.objective))
            })
            .unwrap();
        assert_eq!(
            smoothest.resample_every, 0,
            "no-resampling should minimize objective jumpiness"
        );
        assert!(!smoothest.reinit);
    }

    #[test]
    fn median_smoothness_statistic_is_the_median() {
        assert_eq!(median_abs_successive_diff(&[1.0, 2.0, 4.0, 4.5]), 1.0);
        assert_eq!(median_abs_successive_diff(&[0.0, 10.0]), 10.0);
        assert_eq!(median_abs_successive_diff(&[3.0]), 0.0);
    }

    #[test]
    fn protocol_and_candidates_roundtrip_through_json() {
        let mut protocol = desk_protocol(100, 25);
        protocol.arch = ArchMode::Random;
        let s = serde_json::to_string(&protocol).unwrap();
        let back: TestProtocol = serde_json::from_str(&s).unwrap();
        assert_eq!(back, protocol);

        let mut cands = standard_zoo();
        cands.extend(oal_candidates());
        cands.push(Candidate::ShiftedSquared {
            label: "shifted".into(),
            shift: 0.3,
        });
        let s = serde_json::to_string(&cands).unwrap();
        let back: Vec<Candidate> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cands);
    }
}
