//! Free-form loss parametrization: a small bias-free ReLU network on the
//! raw pair (prediction, target) with a softplus output, plus the
//! squared-error pre-initialization fit.

use crate::autodiff::{softplus, Graph, NodeId};
use crate::network::{
    mlp_forward, xavier_init, Activation, MlpSpec, OutputActivation, ParamVector,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossError;

/// 2 → 40 → 40 → 1, ReLU hidden, softplus output, no biases.
pub fn ffn_loss_spec() -> MlpSpec {
    MlpSpec {
        input_dim: 2,
        output_dim: 1,
        hidden_layers: 2,
        hidden_width: 40,
        activation: Activation::Relu,
        output_activation: OutputActivation::Softplus,
        use_biases: false,
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FfnLossParams {
    pub params: ParamVector,
}

impl FfnLossParams {
    pub fn xavier(seed: u64) -> Self {
        FfnLossParams {
            params: xavier_init(&ffn_loss_spec(), seed),
        }
    }

    pub fn n_params() -> usize {
        ffn_loss_spec().n_params()
    }

    /// Plain evaluation ℓ(q, u) without touching a graph.
    pub fn eval(&self, q: f64, u: f64) -> f64 {
        let w = &self.params.0;
        let mut h1 = [0.0f64; 40];
        for o in 0..40 {
            let z = w[2 * o] * q + w[2 * o + 1] * u;
            h1[o] = z.max(0.0);
        }
        let mut h2 = [0.0f64; 40];
        for o in 0..40 {
            let row = &w[80 + 40 * o..80 + 40 * (o + 1)];
            let z: f64 = row.iter().zip(&h1).map(|(a, b)| a * b).sum();
            h2[o] = z.max(0.0);
        }
        let out: f64 = w[80 + 1600..].iter().zip(&h2).map(|(a, b)| a * b).sum();
        softplus(out)
    }

    /// Graph form on prediction/target nodes, with η supplied as nodes.
    pub fn build(g: &mut Graph, eta: &[NodeId], q: NodeId, u: NodeId) -> NodeId {
        let spec = ffn_loss_spec();
        mlp_forward(g, &spec, eta, &[q, u])[0]
    }
}

/// Squared-error fit quality of a loss's discrepancy profile:
/// Σ_d |ℓ̄(d) − d²| / Σ_d d² over a uniform d-grid, where
/// ℓ̄(d) = mean over seeded u-draws of ℓ(u+d, u). For losses that depend on
/// the pair only through q−u this reduces to comparing ℓ(d) against d²
/// directly; for the raw-pair network loss the u-average is its effective
/// profile (a bias-free ReLU net is positively homogeneous before the
/// output softplus, so no pointwise fit of a quadratic can exist).
pub fn mse_fit_error(loss: &dyn Fn(f64, f64) -> f64, domain: (f64, f64), seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let us: Vec<f64> = (0..64).map(|_| rng.gen_range(domain.0..domain.1)).collect();
    let grid = 101;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..grid {
        let d = domain.0 + (domain.1 - domain.0) * i as f64 / (grid - 1) as f64;
        let mean: f64 = us.iter().map(|&u| loss(u + d, u)).sum::<f64>() / us.len() as f64;
        num += (mean - d * d).abs();
        den += d * d;
    }
    num / den
}

pub const PRETRAIN_FIT_THRESHOLD: f64 = 0.10;

/// Fit the FFN loss to ℓ(u+d, u) ≈ d² with Adam on synthetic draws.
/// Returns the trained parameters and the final fit error; errors if the
/// fit stays above [`PRETRAIN_FIT_THRESHOLD`] (caller may raise `steps`).
pub fn mse_pretrain_ffn(
    init: FfnLossParams,
    domain: (f64, f64),
    steps: usize,
    seed: u64,
) -> Result<(FfnLossParams, f64), LossError> {
    if domain.0.partial_cmp(&domain.1) != Some(std::cmp::Ordering::Less) {
        return Err(LossError::DegenerateDomain);
    }
    let spec = ffn_loss_spec();
    let n = spec.n_params();
    let mut theta = init.params;
    let mut opt = AdamF64::new(n, 2e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // regress the discrepancy profile mean_u ℓ(u+d, u) onto d²: the
    // bias-free net cannot fit d² pointwise (positive homogeneity before
    // the softplus), but its u-average can
    let (d_batch, u_batch) = (8, 32);
    for step in 0..steps {
        if step * 2 == steps {
            opt.lr *= 0.1;
        }
        let mut g = Graph::with_capacity(d_batch * u_batch * 180 + n);
        let eta = crate::network::params_to_leaves(&mut g, &theta);
        let mut terms = Vec::with_capacity(d_batch);
        for _ in 0..d_batch {
            let d = rng.gen_range(domain.0..domain.1);
            let mut evals = Vec::with_capacity(u_batch);
            for _ in 0..u_batch {
                let u = rng.gen_range(domain.0..domain.1);
                let qn = g.constant(u + d);
                let un = g.constant(u);
                evals.push(FfnLossParams::build(&mut g, &eta, qn, un));
            }
            let mean = g.mean(&evals);
            let t = g.constant(d * d);
            let r = g.sub(mean, t);
            let r2 = g.mul(r, r);
            terms.push(r2);
        }
        let obj = g.mean(&terms);
        let grads = g.grad_values(obj, &eta);
        opt.step(&mut theta.0, &grads);
    }
    let out = FfnLossParams { params: theta };
    let fit = mse_fit_error(&|q, u| out.eval(q, u), domain, seed ^ 0x9e37_79b9);
    if fit <= PRETRAIN_FIT_THRESHOLD {
        Ok((out, fit))
    } else {
        Err(LossError::PretrainFit { fit })
    }
}

/// LAL variant of the pre-initialization: the squared-like starting point
/// already fits d² closely, so this typically takes zero steps; if not, a
/// few Adam steps on (α̂, ĉ) close the gap.
pub fn mse_pretrain_lal(
    init: super::lal::LalParams,
    domain: (f64, f64),
    steps: usize,
    seed: u64,
) -> Result<(super::lal::LalParams, f64), LossError> {
    if domain.0.partial_cmp(&domain.1) != Some(std::cmp::Ordering::Less) {
        return Err(LossError::DegenerateDomain);
    }
    let fit0 = mse_fit_error(&|q, u| init.eval(q - u), domain, seed ^ 0x9e37_79b9);
    if fit0 <= PRETRAIN_FIT_THRESHOLD {
        return Ok((init, fit0));
    }
    let mut p = init;
    let mut opt = AdamF64::new(2, 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let mut g = Graph::new();
        let ah = g.leaf(p.alpha_hat);
        let ch = g.leaf(p.c_hat);
        let (an, cn) = super::lal::lal_constrain_nodes(&mut g, ah, ch, p.bounds);
        let mut terms = Vec::with_capacity(32);
        for _ in 0..32 {
            let d = rng.gen_range(domain.0..domain.1);
            let dn = g.constant(d);
            let l = super::lal::lal_rho_nodes(&mut g, an, cn, dn);
            let t = g.constant(d * d);
            let r = g.sub(l, t);
            let r2 = g.mul(r, r);
            terms.push(r2);
        }
        let obj = g.mean(&terms);
        let grads = g.grad_values(obj, &[ah, ch]);
        let mut v = [p.alpha_hat, p.c_hat];
        opt.step(&mut v, &grads);
        p = super::lal::LalParams::new(v[0], v[1], p.bounds)?;
    }
    let fit = mse_fit_error(&|q, u| p.eval(q - u), domain, seed ^ 0x9e37_79b9);
    if fit <= PRETRAIN_FIT_THRESHOLD {
        Ok((p, fit))
    } else {
        Err(LossError::PretrainFit { fit })
    }
}

/// Minimal scalar-array Adam for the self-contained pretraining fits.
struct AdamF64 {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamF64 {
    fn new(n: usize, lr: f64) -> Self {
        AdamF64 {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t);
        let bc2 = 1.0 - self.b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
