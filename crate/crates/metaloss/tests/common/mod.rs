//! Helpers shared by integration tests.

use metaloss::autodiff::{finite_difference_check, Graph, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct OpFdResult {
    pub name: &'static str,
    /// worst relative discrepancy per derivative order 1..=3
    pub err: [f64; 3],
}

/// Per-op finite-difference sweep over randomized points. Step sizes per
/// order balance truncation against cancellation noise.
pub fn op_fd_suite(seed: u64) -> Vec<OpFdResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = [1e-5, 1e-4, 3e-3];
    let mut out: Vec<OpFdResult> = Vec::new();

    let mut run_one = |name: &'static str,
                       rng: &mut ChaCha8Rng,
                       sample: &dyn Fn(&mut ChaCha8Rng) -> Vec<f64>,
                       f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        let mut err = [0.0f64; 3];
        for _ in 0..8 {
            let p = sample(rng);
            for (k, e) in err.iter_mut().enumerate() {
                let d = finite_difference_check(f, &p, (k + 1) as u32, h[k]);
                *e = e.max(d);
            }
        }
        out.push(OpFdResult { name, err });
    };

    let rg = |v: metaloss::autodiff::NodeId| Var {
        id: v,
        requires_grad: true,
    };

    run_one(
        "add",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.add(v[0].id, v[1].id)),
    );
    run_one(
        "mul",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.mul(v[0].id, v[1].id)),
    );
    run_one(
        "div",
        &mut rng,
        &|r| {
            let s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            vec![r.gen_range(-2.0..2.0), s * r.gen_range(0.6..2.0)]
        },
        &|g, v| rg(g.div(v[0].id, v[1].id)),
    );
    run_one(
        "pow",
        &mut rng,
        &|r| vec![r.gen_range(0.6..2.0), r.gen_range(-1.5..2.5)],
        &|g, v| rg(g.pow(v[0].id, v[1].id)),
    );
    run_one(
        "exp",
        &mut rng,
        &|r| vec![r.gen_range(-1.5..1.5)],
        &|g, v| rg(g.exp(v[0].id)),
    );
    run_one(
        "log",
        &mut rng,
        &|r| vec![r.gen_range(0.5..3.0)],
        &|g, v| rg(g.log(v[0].id)),
    );
    run_one(
        "tanh",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.tanh(v[0].id)),
    );
    run_one(
        "sin",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.sin(v[0].id)),
    );
    run_one(
        "cos",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.cos(v[0].id)),
    );
    run_one(
        "sigmoid",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.sigmoid(v[0].id)),
    );
    run_one(
        "softplus",
        &mut rng,
        &|r| vec![r.gen_range(-2.0..2.0)],
        &|g, v| rg(g.softplus(v[0].id)),
    );
    // kink ops sampled away from the kink; exact subgradient conventions at
    // the kink are covered by unit tests
    run_one(
        "abs",
        &mut rng,
        &|r| {
            let s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            vec![s * r.gen_range(0.5..2.0)]
        },
        &|g, v| rg(g.abs(v[0].id)),
    );
    run_one(
        "max",
        &mut rng,
        &|r| {
            let a: f64 = r.gen_range(-2.0..2.0);
            let s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            vec![a, a + s * r.gen_range(0.5..1.5)]
        },
        &|g, v| rg(g.max(v[0].id, v[1].id)),
    );
    // n-ary ops composed with nonlinearities so orders 2–3 are nontrivial
    run_one(
        "sum",
        &mut rng,
        &|r| (0..3).map(|_| r.gen_range(-2.0..2.0)).collect(),
        &|g, v| {
            let parts: Vec<_> = v.iter().map(|x| g.sin(x.id)).collect();
            rg(g.sum(&parts))
        },
    );
    run_one(
        "dot",
        &mut rng,
        &|r| (0..2).map(|_| r.gen_range(-1.5..1.5)).collect(),
        &|g, v| {
            let s0 = g.sin(v[0].id);
            let e1 = g.exp(v[1].id);
            rg(g.dot(&[s0, e1], &[v[1].id, v[0].id]))
        },
    );
    out
}

#[allow(dead_code)]
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}
