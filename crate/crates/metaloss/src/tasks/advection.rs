//! Advection of a normalized box: ∂_t u + V ∂_x u = 0 on t ∈ [0, 1],
//! x ∈ [−1, 1] with zero Dirichlet boundaries. The initial profile is a
//! height-1/λ box of width λ flush against the left boundary, so the exact
//! solution is that box translated by V·t.

use crate::autodiff::{Graph, NodeId};
use crate::network::{mlp_forward, MlpSpec};

pub const T_RANGE: (f64, f64) = (0.0, 1.0);
pub const X_RANGE: (f64, f64) = (-1.0, 1.0);

/// Initial profile u₀(x): 1/λ on [−1, −1+λ], zero elsewhere.
pub fn box_profile(lambda: f64, x: f64) -> f64 {
    if (-1.0..=-1.0 + lambda).contains(&x) {
        1.0 / lambda
    } else {
        0.0
    }
}

/// Exact solution: the initial box translated by V·t.
pub fn reference(lambda: f64, velocity: f64, t: f64, x: f64) -> f64 {
    box_profile(lambda, x - velocity * t)
}

/// PDE residual ∂_t û + V ∂_x û at one collocation point, differentiable
/// w.r.t. `theta`.
pub fn residual(
    g: &mut Graph,
    spec: &MlpSpec,
    theta: &[NodeId],
    velocity: f64,
    t: f64,
    x: f64,
) -> NodeId {
    let tn = g.leaf(t);
    let xn = g.leaf(x);
    let u = mlp_forward(g, spec, theta, &[tn, xn])[0];
    let d = g.grad_nodes(u, &[tn, xn]).expect("input differentiation");
    let v = g.constant(velocity);
    let adv = g.mul(v, d[1]);
    g.add(d[0], adv)
}
