//! Steady nonlinear reaction-diffusion on [−1, 1]²:
//! k·Δu + u(1 − u²) = z, with u known on all four edges. Tasks fabricate a
//! solution u = α₁ tanh(ω₁x₁) tanh(ω₂x₂) + α₂ sin(ω₃x₁) sin(ω₄x₂) and
//! derive the matching source z analytically, so every task has an exact
//! reference by construction.

use crate::autodiff::{Graph, NodeId, ONE};
use crate::network::{mlp_forward, MlpSpec};

pub const X_RANGE: (f64, f64) = (-1.0, 1.0);

/// Fabricated solution at (x1, x2); `lambda` is [α₁, α₂, ω₁, ω₂, ω₃, ω₄].
pub fn fabricated_u(lambda: &[f64], x1: f64, x2: f64) -> f64 {
    let [a1, a2, w1, w2, w3, w4] = lambda_parts(lambda);
    a1 * (w1 * x1).tanh() * (w2 * x2).tanh() + a2 * (w3 * x1).sin() * (w4 * x2).sin()
}

/// Source term obtained by substituting the fabricated solution into the
/// PDE: z = k·Δu + u(1 − u²), with the Laplacian taken analytically.
pub fn source(k_diff: f64, lambda: &[f64], x1: f64, x2: f64) -> f64 {
    let [a1, a2, w1, w2, w3, w4] = lambda_parts(lambda);
    let t1 = (w1 * x1).tanh();
    let t2 = (w2 * x2).tanh();
    let s1 = (w3 * x1).sin();
    let s2 = (w4 * x2).sin();
    // (d²/dy²) tanh(ωy) = −2ω² tanh(ωy)(1 − tanh²(ωy))
    let lap =
        -2.0 * a1 * (w1 * w1 * t1 * (1.0 - t1 * t1) * t2 + w2 * w2 * t1 * t2 * (1.0 - t2 * t2))
            - a2 * (w3 * w3 + w4 * w4) * s1 * s2;
    let u = a1 * t1 * t2 + a2 * s1 * s2;
    k_diff * lap + u * (1.0 - u * u)
}

fn lambda_parts(lambda: &[f64]) -> [f64; 6] {
    lambda
        .try_into()
        .expect("reaction-diffusion λ must have 6 components")
}

/// PDE residual k·Δû + û(1 − û²) − z at one interior point, differentiable
/// w.r.t. `theta`; `z` is the task's precomputed source value there.
pub fn residual(
    g: &mut Graph,
    spec: &MlpSpec,
    theta: &[NodeId],
    k_diff: f64,
    z: f64,
    x1: f64,
    x2: f64,
) -> NodeId {
    let n1 = g.leaf(x1);
    let n2 = g.leaf(x2);
    let u = mlp_forward(g, spec, theta, &[n1, n2])[0];
    let d = g.grad_nodes(u, &[n1, n2]).expect("input differentiation");
    let u11 = g.grad_nodes(d[0], &[n1]).expect("second derivative")[0];
    let u22 = g.grad_nodes(d[1], &[n2]).expect("second derivative")[0];
    let lap = g.add(u11, u22);
    let k = g.constant(k_diff);
    let diffusion = g.mul(k, lap);
    let u_sq = g.mul(u, u);
    let gate = g.sub(ONE, u_sq);
    let reaction = g.mul(u, gate);
    let lhs = g.add(diffusion, reaction);
    let zc = g.constant(z);
    g.sub(lhs, zc)
}
