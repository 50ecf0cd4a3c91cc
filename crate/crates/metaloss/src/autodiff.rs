//! Reverse-mode automatic differentiation on an explicit scalar graph.
//!
//! Every node holds one `f64` and is evaluated eagerly at construction. The
//! backward pass can *emit* its computation as ordinary graph nodes
//! ([`Graph::grad`] with `create_graph`), so a derivative is itself
//! differentiable; nesting this gives arbitrary-order derivatives. The engine
//! needs depth three in practice: input-derivatives inside PDE residuals,
//! then θ-gradients inside unrolled optimizer steps, then η-gradients through
//! the whole path.
//!
//! Besides the emitting pass there are three value-only sweeps used on hot
//! paths, all semantically equal to `grad` (property-tested against it):
//! [`Graph::grad_values`] (plain reverse accumulation), [`Graph::jvp`]
//! (forward tangent sweep), and [`Graph::backward_dual`] (reverse sweep with
//! dual-number adjoints, i.e. forward-over-reverse for directional second
//! derivatives).
//!
//! Conventions: `abs` has derivative 0 at 0, and `max` routes the derivative
//! to its *first* argument on ties, so `max(0, x)` has derivative 0 at x = 0.
//! Two piecewise-constant carrier ops (`sign`, `step_ge`) exist so that
//! emitted backward graphs of `abs`/`max` stay re-evaluable after leaves are
//! reassigned, rather than baking stale 0/1 constants.

use std::fmt;

pub type NodeId = u32;

const NONE: u32 = u32::MAX;

/// Operation tag. `Const` never changes value; `Leaf` is assignable.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Op {
    Const,
    Leaf,
    Add,
    Mul,
    Div,
    /// `pow(base, exponent)`; base must be positive when the exponent path
    /// is differentiated (d/dexp needs ln(base)).
    Pow,
    Exp,
    Log,
    Tanh,
    Sin,
    Cos,
    Abs,
    Max,
    Sigmoid,
    Softplus,
    /// n-ary sum; parents live in the spill arena.
    Sum,
    /// dot(a, b) = Σ aᵢbᵢ; parents stored `[a..., b...]` in the spill arena.
    Dot,
    /// sign(x) ∈ {-1, 0, 1}; derivative 0 (carrier for abs-backward).
    Sign,
    /// step_ge(a, b) = 1 if a ≥ b else 0; derivative 0 (carrier for max-backward).
    StepGe,
}

/// A node reference plus whether it may be a differentiation target.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: NodeId,
    pub requires_grad: bool,
}

impl From<Var> for NodeId {
    fn from(v: Var) -> NodeId {
        v.id
    }
}

#[derive(thiserror::Error, Debug)]
pub enum AdError {
    #[error("leaf node {0} has no assigned value")]
    UnassignedLeaf(NodeId),
    #[error("non-finite value produced at node {id} ({op:?}): {value}")]
    NonFinite { id: NodeId, op: Op, value: f64 },
    #[error("node {0} is not a valid assignable leaf")]
    NotALeaf(NodeId),
    #[error("wrt node {0} has requires_grad = false")]
    NotDifferentiable(NodeId),
    #[error("pow exponent at node {0} is differentiated but base {1} ≤ 0")]
    PowDomain(NodeId, f64),
}

/// Restore point for [`Graph::truncate`].
#[derive(Clone, Copy, Debug)]
pub struct Watermark {
    nodes: usize,
    spill: usize,
}

/// Append-only arena of scalar nodes. Parents always precede children, so a
/// single index-order pass re-evaluates the graph and a reverse pass
/// accumulates adjoints.
pub struct Graph {
    ops: Vec<Op>,
    pa: Vec<u32>, // parent a, or spill offset for Sum/Dot
    pb: Vec<u32>, // parent b, or spill length for Sum/Dot
    vals: Vec<f64>,
    spill: Vec<u32>,
    // scratch reused across grad calls
    desc: Vec<u64>,
    adj: Vec<f64>,
    heads: Vec<u32>,
    pool: Vec<(u32, u32)>,
}

/// Node id 0/1/2 are pre-seeded constants 0, 1, −1 in every graph.
pub const ZERO: NodeId = 0;
pub const ONE: NodeId = 1;
pub const NEG_ONE: NodeId = 2;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        let mut g = Graph {
            ops: Vec::new(),
            pa: Vec::new(),
            pb: Vec::new(),
            vals: Vec::new(),
            spill: Vec::new(),
            desc: Vec::new(),
            adj: Vec::new(),
            heads: Vec::new(),
            pool: Vec::new(),
        };
        g.push(Op::Const, NONE, NONE, 0.0);
        g.push(Op::Const, NONE, NONE, 1.0);
        g.push(Op::Const, NONE, NONE, -1.0);
        g
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut g = Self::new();
        g.ops.reserve(n);
        g.pa.reserve(n);
        g.pb.reserve(n);
        g.vals.reserve(n);
        g
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the seeded constants are always present
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.vals[id as usize]
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.ops[id as usize]
    }

    pub fn watermark(&self) -> Watermark {
        Watermark {
            nodes: self.ops.len(),
            spill: self.spill.len(),
        }
    }

    /// Drop every node created after `mark`. Callers must not use ids ≥ mark
    /// afterwards; the typical pattern is rebuilding a small head (e.g. a
    /// loss subgraph) on top of a fixed body.
    pub fn truncate(&mut self, mark: Watermark) {
        self.ops.truncate(mark.nodes);
        self.pa.truncate(mark.nodes);
        self.pb.truncate(mark.nodes);
        self.vals.truncate(mark.nodes);
        self.spill.truncate(mark.spill);
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, val: f64) -> NodeId {
        let id = self.ops.len() as NodeId;
        self.ops.push(op);
        self.pa.push(a);
        self.pb.push(b);
        self.vals.push(val);
        id
    }

    #[inline]
    fn is_const(&self, id: NodeId) -> bool {
        self.ops[id as usize] == Op::Const
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, v: f64) -> NodeId {
        if v == 0.0 {
            ZERO
        } else if v == 1.0 {
            ONE
        } else if v == -1.0 {
            NEG_ONE
        } else {
            self.push(Op::Const, NONE, NONE, v)
        }
    }

    /// Assignable leaf with an initial value.
    pub fn leaf(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, NONE, NONE, v)
    }

    /// Leaf that must be assigned through [`Graph::forward`] before use.
    pub fn leaf_deferred(&mut self) -> NodeId {
        self.push(Op::Leaf, NONE, NONE, f64::NAN)
    }

    pub fn var(&mut self, v: f64) -> Var {
        Var {
            id: self.leaf(v),
            requires_grad: true,
        }
    }

    /// Overwrite one leaf's value without re-evaluating dependents (callers
    /// batch assignments and then run [`Graph::refresh`] / [`Graph::forward`]).
    pub fn set_leaf(&mut self, id: NodeId, v: f64) {
        debug_assert_eq!(self.ops[id as usize], Op::Leaf);
        self.vals[id as usize] = v;
    }

    // ---- builders --------------------------------------------------------

    #[inline]
    fn eval2(&self, op: Op, a: NodeId, b: NodeId) -> f64 {
        let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
        match op {
            Op::Add => x + y,
            Op::Mul => x * y,
            Op::Div => x / y,
            Op::Pow => x.powf(y),
            Op::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            Op::StepGe => {
                if x >= y {
                    1.0
                } else {
                    0.0
                }
            }
            _ => unreachable!(),
        }
    }

    #[inline]
    fn eval1(&self, op: Op, a: NodeId) -> f64 {
        let x = self.vals[a as usize];
        match op {
            Op::Exp => x.exp(),
            Op::Log => x.ln(),
            Op::Tanh => x.tanh(),
            Op::Sin => x.sin(),
            Op::Cos => x.cos(),
            Op::Abs => x.abs(),
            Op::Sigmoid => sigmoid(x),
            Op::Softplus => softplus(x),
            Op::Sign => sign0(x),
            _ => unreachable!(),
        }
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        if self.is_const(a) && self.is_const(b) {
            let v = self.eval2(op, a, b);
            return self.constant(v);
        }
        let v = self.eval2(op, a, b);
        self.push(op, a, b, v)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        if self.is_const(a) {
            let v = self.eval1(op, a);
            return self.constant(v);
        }
        let v = self.eval1(op, a);
        self.push(op, a, NONE, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.is_const(a) && self.vals[a as usize] == 0.0 {
            return b;
        }
        if self.is_const(b) && self.vals[b as usize] == 0.0 {
            return a;
        }
        self.binary(Op::Add, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        for (c, other) in [(a, b), (b, a)] {
            if self.is_const(c) {
                let v = self.vals[c as usize];
                if v == 0.0 {
                    return ZERO;
                }
                if v == 1.0 {
                    return other;
                }
            }
        }
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.is_const(b) && self.vals[b as usize] == 1.0 {
            return a;
        }
        self.binary(Op::Div, a, b)
    }

    pub fn pow(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Pow, a, b)
    }

    /// Power with a constant exponent.
    pub fn powc(&mut self, a: NodeId, e: f64) -> NodeId {
        if e == 1.0 {
            return a;
        }
        let c = self.constant(e);
        self.binary(Op::Pow, a, c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul(NEG_ONE, a)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.is_const(b) {
            let v = -self.vals[b as usize];
            let c = self.constant(v);
            return self.add(a, c);
        }
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a)
    }
    pub fn sign(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sign, a)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Max, a, b)
    }

    pub fn step_ge(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::StepGe, a, b)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.max(na, nb);
        self.neg(m)
    }

    /// max(0, x) with derivative 0 at x = 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.max(ZERO, a)
    }

    pub fn sum(&mut self, ids: &[NodeId]) -> NodeId {
        match ids.len() {
            0 => ZERO,
            1 => ids[0],
            2 => self.add(ids[0], ids[1]),
            n => {
                let off = self.spill.len() as u32;
                self.spill.extend_from_slice(ids);
                let v: f64 = ids.iter().map(|&i| self.vals[i as usize]).sum();
                self.push(Op::Sum, off, n as u32, v)
            }
        }
    }

    /// Σ aᵢ·bᵢ as one fused node.
    pub fn dot(&mut self, a: &[NodeId], b: &[NodeId]) -> NodeId {
        assert_eq!(a.len(), b.len());
        if a.len() == 1 {
            return self.mul(a[0], b[0]);
        }
        let off = self.spill.len() as u32;
        self.spill.extend_from_slice(a);
        self.spill.extend_from_slice(b);
        let v: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| self.vals[x as usize] * self.vals[y as usize])
            .sum();
        self.push(Op::Dot, off, (a.len() * 2) as u32, v)
    }

    pub fn mean(&mut self, ids: &[NodeId]) -> NodeId {
        let s = self.sum(ids);
        let inv = self.constant(1.0 / ids.len() as f64);
        self.mul(s, inv)
    }

    // ---- (re-)evaluation ------------------------------------------------

    /// Re-evaluate every node in index order from current leaf values.
    pub fn refresh(&mut self) {
        for i in 0..self.ops.len() {
            let op = self.ops[i];
            let v = match op {
                Op::Const | Op::Leaf => continue,
                Op::Add | Op::Mul | Op::Div | Op::Pow | Op::Max | Op::StepGe => {
                    self.eval2(op, self.pa[i], self.pb[i])
                }
                Op::Sum => {
                    let (off, n) = (self.pa[i] as usize, self.pb[i] as usize);
                    self.spill[off..off + n]
                        .iter()
                        .map(|&p| self.vals[p as usize])
                        .sum()
                }
                Op::Dot => {
                    let (off, n) = (self.pa[i] as usize, self.pb[i] as usize);
                    let h = n / 2;
                    (0..h)
                        .map(|k| {
                            self.vals[self.spill[off + k] as usize]
                                * self.vals[self.spill[off + h + k] as usize]
                        })
                        .sum()
                }
                _ => self.eval1(op, self.pa[i]),
            };
            self.vals[i] = v;
        }
    }

    /// Assign leaves, re-evaluate the whole graph, and validate: every leaf
    /// assigned and every produced value finite. Domain errors (log of a
    /// non-positive, division by zero, …) surface as the non-finite node.
    pub fn forward(&mut self, assignments: &[(NodeId, f64)]) -> Result<(), AdError> {
        for &(id, v) in assignments {
            if self.ops[id as usize] != Op::Leaf {
                return Err(AdError::NotALeaf(id));
            }
            self.vals[id as usize] = v;
        }
        for i in 0..self.ops.len() {
            if self.ops[i] == Op::Leaf && self.vals[i].is_nan() {
                return Err(AdError::UnassignedLeaf(i as NodeId));
            }
        }
        self.refresh();
        for i in 0..self.ops.len() {
            if !self.vals[i].is_finite() {
                return Err(AdError::NonFinite {
                    id: i as NodeId,
                    op: self.ops[i],
                    value: self.vals[i],
                });
            }
        }
        Ok(())
    }

    // ---- reachability ----------------------------------------------------

    /// Mark descendants of `seeds` within `[lo, hi]` into the bitset scratch.
    /// Seeds above `hi` are ignored (they cannot be ancestors of `hi`).
    fn mark_descendants(&mut self, seeds: &[NodeId], lo: usize, hi: usize) {
        let words = (hi - lo) / 64 + 1;
        self.desc.clear();
        self.desc.resize(words, 0);
        for &s in seeds {
            let s = s as usize;
            if s < lo || s > hi {
                continue;
            }
            self.desc[(s - lo) / 64] |= 1 << ((s - lo) % 64);
        }
        for i in lo..=hi {
            if self.ops[i] == Op::Const || self.ops[i] == Op::Leaf {
                continue;
            }
            let mut hit = false;
            match self.ops[i] {
                Op::Sum | Op::Dot => {
                    let (off, n) = (self.pa[i] as usize, self.pb[i] as usize);
                    for &p in &self.spill[off..off + n] {
                        let p = p as usize;
                        if p >= lo && self.desc[(p - lo) / 64] >> ((p - lo) % 64) & 1 == 1 {
                            hit = true;
                            break;
                        }
                    }
                }
                _ => {
                    for p in [self.pa[i], self.pb[i]] {
                        if p == NONE {
                            continue;
                        }
                        let p = p as usize;
                        if p >= lo && self.desc[(p - lo) / 64] >> ((p - lo) % 64) & 1 == 1 {
                            hit = true;
                            break;
                        }
                    }
                }
            }
            if hit {
                self.desc[(i - lo) / 64] |= 1 << ((i - lo) % 64);
            }
        }
    }

    #[inline]
    fn is_desc(&self, i: usize, lo: usize) -> bool {
        self.desc[(i - lo) / 64] >> ((i - lo) % 64) & 1 == 1
    }

    // ---- value-mode reverse ----------------------------------------------

    /// ∂output/∂wrtᵢ as plain numbers; no nodes are created. Nodes outside
    /// the paths from `wrt` to `output` contribute exact zeros.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<f64> {
        if wrt.is_empty() {
            return Vec::new();
        }
        let lo = *wrt.iter().min().unwrap() as usize;
        let hi = output as usize;
        if lo > hi {
            return vec![0.0; wrt.len()];
        }
        self.mark_descendants(wrt, lo, hi);
        let mut adj = std::mem::take(&mut self.adj);
        adj.clear();
        adj.resize(hi - lo + 1, 0.0);
        if self.is_desc(hi, lo) {
            adj[hi - lo] = 1.0;
        }
        for i in (lo..=hi).rev() {
            if !self.is_desc(i, lo) {
                continue;
            }
            let g = adj[i - lo];
            if g == 0.0 {
                continue;
            }
            self.scatter_value(i, g, lo, &mut adj);
        }
        let out = wrt
            .iter()
            .map(|&w| {
                if (w as usize) > hi {
                    0.0
                } else {
                    adj[w as usize - lo]
                }
            })
            .collect();
        self.adj = adj;
        out
    }

    /// Add `g·∂node_i/∂parent` into each active parent's adjoint slot.
    #[inline]
    fn scatter_value(&self, i: usize, g: f64, lo: usize, adj: &mut [f64]) {
        let (a, b) = (self.pa[i], self.pb[i]);
        let active = |p: u32| p != NONE && (p as usize) >= lo && self.is_desc(p as usize, lo);
        match self.ops[i] {
            Op::Const | Op::Leaf | Op::Sign | Op::StepGe => {}
            Op::Add => {
                if active(a) {
                    adj[a as usize - lo] += g;
                }
                if active(b) {
                    adj[b as usize - lo] += g;
                }
            }
            Op::Mul => {
                if active(a) {
                    adj[a as usize - lo] += g * self.vals[b as usize];
                }
                if active(b) {
                    adj[b as usize - lo] += g * self.vals[a as usize];
                }
            }
            Op::Div => {
                let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
                if active(a) {
                    adj[a as usize - lo] += g / y;
                }
                if active(b) {
                    adj[b as usize - lo] += -g * x / (y * y);
                }
            }
            Op::Pow => {
                let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
                if active(a) {
                    adj[a as usize - lo] += g * y * x.powf(y - 1.0);
                }
                if active(b) {
                    adj[b as usize - lo] += g * self.vals[i] * x.ln();
                }
            }
            Op::Exp => {
                if active(a) {
                    adj[a as usize - lo] += g * self.vals[i];
                }
            }
            Op::Log => {
                if active(a) {
                    adj[a as usize - lo] += g / self.vals[a as usize];
                }
            }
            Op::Tanh => {
                if active(a) {
                    let t = self.vals[i];
                    adj[a as usize - lo] += g * (1.0 - t * t);
                }
            }
            Op::Sin => {
                if active(a) {
                    adj[a as usize - lo] += g * self.vals[a as usize].cos();
                }
            }
            Op::Cos => {
                if active(a) {
                    adj[a as usize - lo] += -g * self.vals[a as usize].sin();
                }
            }
            Op::Abs => {
                if active(a) {
                    adj[a as usize - lo] += g * sign0(self.vals[a as usize]);
                }
            }
            Op::Max => {
                let s = if self.vals[a as usize] >= self.vals[b as usize] {
                    1.0
                } else {
                    0.0
                };
                if active(a) {
                    adj[a as usize - lo] += g * s;
                }
                if active(b) {
                    adj[b as usize - lo] += g * (1.0 - s);
                }
            }
            Op::Sigmoid => {
                if active(a) {
                    let s = self.vals[i];
                    adj[a as usize - lo] += g * s * (1.0 - s);
                }
            }
            Op::Softplus => {
                if active(a) {
                    adj[a as usize - lo] += g * sigmoid(self.vals[a as usize]);
                }
            }
            Op::Sum => {
                let (off, n) = (a as usize, b as usize);
                for &p in &self.spill[off..off + n] {
                    if active(p) {
                        adj[p as usize - lo] += g;
                    }
                }
            }
            Op::Dot => {
                let (off, n) = (a as usize, b as usize);
                let h = n / 2;
                for k in 0..h {
                    let (pa, pb) = (self.spill[off + k], self.spill[off + h + k]);
                    if active(pa) {
                        adj[pa as usize - lo] += g * self.vals[pb as usize];
                    }
                    if active(pb) {
                        adj[pb as usize - lo] += g * self.vals[pa as usize];
                    }
                }
            }
        }
    }

    // ---- emitting reverse --------------------------------------------------

    /// ∂output/∂wrtᵢ. With `create_graph` the result is built from ordinary
    /// nodes and is differentiable again; otherwise the numeric gradients are
    /// returned wrapped as constants. A `wrt` that is not an ancestor of
    /// `output` yields an exact-zero Var.
    pub fn grad(
        &mut self,
        output: Var,
        wrt: &[Var],
        create_graph: bool,
    ) -> Result<Vec<Var>, AdError> {
        for w in wrt {
            if !w.requires_grad {
                return Err(AdError::NotDifferentiable(w.id));
            }
        }
        if !create_graph {
            let ids: Vec<NodeId> = wrt.iter().map(|w| w.id).collect();
            let vals = self.grad_values(output.id, &ids);
            return Ok(vals
                .into_iter()
                .map(|v| Var {
                    id: self.constant(v),
                    requires_grad: false,
                })
                .collect());
        }
        let ids: Vec<NodeId> = wrt.iter().map(|w| w.id).collect();
        let g = self.grad_nodes(output.id, &ids)?;
        Ok(g.into_iter()
            .map(|id| Var {
                id,
                requires_grad: true,
            })
            .collect())
    }

    /// Emitting reverse pass; returns one node per wrt entry (ZERO when
    /// disconnected).
    pub fn grad_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AdError> {
        if wrt.is_empty() {
            return Ok(Vec::new());
        }
        let lo = *wrt.iter().min().unwrap() as usize;
        let hi = output as usize;
        if lo > hi {
            return Ok(vec![ZERO; wrt.len()]);
        }
        self.mark_descendants(wrt, lo, hi);

        // contribution lists: heads[i - lo] → linked list in pool
        let mut heads = std::mem::take(&mut self.heads);
        let mut pool = std::mem::take(&mut self.pool);
        heads.clear();
        heads.resize(hi - lo + 1, NONE);
        pool.clear();

        let mut out = vec![ZERO; wrt.len()];
        if self.is_desc(hi, lo) {
            pool.push((ONE, NONE));
            heads[hi - lo] = 0;
        }
        for i in (lo..=hi).rev() {
            if !self.is_desc(i, lo) || heads[i - lo] == NONE {
                continue;
            }
            // materialize the accumulated adjoint for node i
            let mut contribs: Vec<NodeId> = Vec::new();
            let mut cur = heads[i - lo];
            while cur != NONE {
                let (v, next) = pool[cur as usize];
                contribs.push(v);
                cur = next;
            }
            let gbar = self.sum(&contribs);
            for (k, &w) in wrt.iter().enumerate() {
                if w as usize == i {
                    out[k] = gbar;
                }
            }
            if matches!(self.ops[i], Op::Const | Op::Leaf) {
                continue;
            }
            self.scatter_nodes(i, gbar, lo, &mut heads, &mut pool)?;
        }
        self.heads = heads;
        self.pool = pool;
        Ok(out)
    }

    /// Emit `gbar·∂node_i/∂parent` contribution nodes.
    fn scatter_nodes(
        &mut self,
        i: usize,
        gbar: NodeId,
        lo: usize,
        heads: &mut [u32],
        pool: &mut Vec<(u32, u32)>,
    ) -> Result<(), AdError> {
        let push =
            |this: &Graph, heads: &mut [u32], pool: &mut Vec<(u32, u32)>, p: u32, c: NodeId| {
                let _ = this;
                if c == ZERO {
                    return;
                }
                pool.push((c, heads[p as usize - lo]));
                heads[p as usize - lo] = (pool.len() - 1) as u32;
            };
        let (a, b) = (self.pa[i], self.pb[i]);
        let active =
            |this: &Graph, p: u32| p != NONE && (p as usize) >= lo && this.is_desc(p as usize, lo);
        match self.ops[i] {
            Op::Const | Op::Leaf | Op::Sign | Op::StepGe => {}
            Op::Add => {
                for p in [a, b] {
                    if active(self, p) {
                        push(self, heads, pool, p, gbar);
                    }
                }
            }
            Op::Mul => {
                if active(self, a) {
                    let c = self.mul(gbar, b);
                    push(self, heads, pool, a, c);
                }
                if active(self, b) {
                    let c = self.mul(gbar, a);
                    push(self, heads, pool, b, c);
                }
            }
            Op::Div => {
                if active(self, a) {
                    let c = self.div(gbar, b);
                    push(self, heads, pool, a, c);
                }
                if active(self, b) {
                    // −gbar·a/b²
                    let num = self.mul(gbar, a);
                    let bb = self.mul(b, b);
                    let q = self.div(num, bb);
                    let c = self.neg(q);
                    push(self, heads, pool, b, c);
                }
            }
            Op::Pow => {
                if active(self, a) {
                    // gbar · b · a^(b−1)
                    let bm1 = self.sub(b as NodeId, ONE);
                    let ap = self.pow(a, bm1);
                    let t = self.mul(b, ap);
                    let c = self.mul(gbar, t);
                    push(self, heads, pool, a, c);
                }
                if active(self, b) {
                    let base = self.vals[a as usize];
                    if base <= 0.0 {
                        return Err(AdError::PowDomain(i as NodeId, base));
                    }
                    let ln = self.log(a);
                    let t = self.mul(i as NodeId, ln);
                    let c = self.mul(gbar, t);
                    push(self, heads, pool, b, c);
                }
            }
            Op::Exp => {
                if active(self, a) {
                    let c = self.mul(gbar, i as NodeId);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Log => {
                if active(self, a) {
                    let c = self.div(gbar, a);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Tanh => {
                if active(self, a) {
                    // gbar·(1 − tanh²)
                    let t2 = self.mul(i as NodeId, i as NodeId);
                    let one_m = self.sub(ONE, t2);
                    let c = self.mul(gbar, one_m);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Sin => {
                if active(self, a) {
                    let ca = self.cos(a);
                    let c = self.mul(gbar, ca);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Cos => {
                if active(self, a) {
                    let sa = self.sin(a);
                    let nsa = self.neg(sa);
                    let c = self.mul(gbar, nsa);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Abs => {
                if active(self, a) {
                    let s = self.sign(a);
                    let c = self.mul(gbar, s);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Max => {
                let s = self.step_ge(a, b);
                if active(self, a) {
                    let c = self.mul(gbar, s);
                    push(self, heads, pool, a, c);
                }
                if active(self, b) {
                    let oms = self.sub(ONE, s);
                    let c = self.mul(gbar, oms);
                    push(self, heads, pool, b, c);
                }
            }
            Op::Sigmoid => {
                if active(self, a) {
                    let om = self.sub(ONE, i as NodeId);
                    let sp = self.mul(i as NodeId, om);
                    let c = self.mul(gbar, sp);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Softplus => {
                if active(self, a) {
                    let s = self.sigmoid(a);
                    let c = self.mul(gbar, s);
                    push(self, heads, pool, a, c);
                }
            }
            Op::Sum => {
                let (off, n) = (a as usize, b as usize);
                for k in 0..n {
                    let p = self.spill[off + k];
                    if active(self, p) {
                        push(self, heads, pool, p, gbar);
                    }
                }
            }
            Op::Dot => {
                let (off, n) = (a as usize, b as usize);
                let h = n / 2;
                for k in 0..h {
                    let (pa, pb) = (self.spill[off + k], self.spill[off + h + k]);
                    if active(self, pa) {
                        let c = self.mul(gbar, pb);
                        push(self, heads, pool, pa, c);
                    }
                    if active(self, pb) {
                        let c = self.mul(gbar, pa);
                        push(self, heads, pool, pb, c);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- forward tangents (JVP) -------------------------------------------

    /// Forward tangent sweep: fills `tang[i] = d value(i) / d direction` for
    /// the direction seeded at the given leaves. `tang` is resized to the
    /// graph length.
    pub fn jvp(&self, seeds: &[(NodeId, f64)], tang: &mut Vec<f64>) {
        tang.clear();
        tang.resize(self.ops.len(), 0.0);
        for &(id, t) in seeds {
            tang[id as usize] = t;
        }
        for i in 0..self.ops.len() {
            let (a, b) = (self.pa[i], self.pb[i]);
            let t = match self.ops[i] {
                Op::Const | Op::Leaf | Op::Sign | Op::StepGe => continue,
                Op::Add => tang[a as usize] + tang[b as usize],
                Op::Mul => {
                    tang[a as usize] * self.vals[b as usize]
                        + tang[b as usize] * self.vals[a as usize]
                }
                Op::Div => {
                    // d(x/y) = (ẋ − v·ẏ)/y with v = x/y
                    let y = self.vals[b as usize];
                    (tang[a as usize] - self.vals[i] * tang[b as usize]) / y
                }
                Op::Pow => {
                    let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
                    let mut t = y * x.powf(y - 1.0) * tang[a as usize];
                    let tb = tang[b as usize];
                    if tb != 0.0 {
                        t += self.vals[i] * x.ln() * tb;
                    }
                    t
                }
                Op::Exp => self.vals[i] * tang[a as usize],
                Op::Log => tang[a as usize] / self.vals[a as usize],
                Op::Tanh => {
                    let v = self.vals[i];
                    (1.0 - v * v) * tang[a as usize]
                }
                Op::Sin => self.vals[a as usize].cos() * tang[a as usize],
                Op::Cos => -self.vals[a as usize].sin() * tang[a as usize],
                Op::Abs => sign0(self.vals[a as usize]) * tang[a as usize],
                Op::Max => {
                    if self.vals[a as usize] >= self.vals[b as usize] {
                        tang[a as usize]
                    } else {
                        tang[b as usize]
                    }
                }
                Op::Sigmoid => {
                    let s = self.vals[i];
                    s * (1.0 - s) * tang[a as usize]
                }
                Op::Softplus => sigmoid(self.vals[a as usize]) * tang[a as usize],
                Op::Sum => {
                    let (off, n) = (a as usize, b as usize);
                    self.spill[off..off + n]
                        .iter()
                        .map(|&p| tang[p as usize])
                        .sum()
                }
                Op::Dot => {
                    let (off, n) = (a as usize, b as usize);
                    let h = n / 2;
                    (0..h)
                        .map(|k| {
                            let (pa, pb) = (
                                self.spill[off + k] as usize,
                                self.spill[off + h + k] as usize,
                            );
                            tang[pa] * self.vals[pb] + tang[pb] * self.vals[pa]
                        })
                        .sum()
                }
            };
            tang[i] = t;
        }
    }

    // ---- dual-number reverse (forward-over-reverse) -------------------------

    /// Reverse sweep with dual-number adjoints. Given node tangents `tang`
    /// from [`Graph::jvp`] for one direction, computes for each wrt both the
    /// gradient value gᵢ = ∂output/∂wrtᵢ and its directional derivative
    /// ġᵢ = d gᵢ / d direction. Exact (no truncation): equivalent to
    /// differentiating an emitted backward graph along the same direction.
    pub fn backward_dual(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        tang: &[f64],
        g_out: &mut Vec<f64>,
        gt_out: &mut Vec<f64>,
    ) {
        g_out.clear();
        gt_out.clear();
        if wrt.is_empty() {
            return;
        }
        let lo = *wrt.iter().min().unwrap() as usize;
        let hi = output as usize;
        if lo > hi {
            g_out.resize(wrt.len(), 0.0);
            gt_out.resize(wrt.len(), 0.0);
            return;
        }
        self.mark_descendants(wrt, lo, hi);
        // dual adjoints: value and tangent parts
        let mut av = vec![0.0f64; hi - lo + 1];
        let mut at = vec![0.0f64; hi - lo + 1];
        if self.is_desc(hi, lo) {
            av[hi - lo] = 1.0;
        }
        for i in (lo..=hi).rev() {
            if !self.is_desc(i, lo) {
                continue;
            }
            let (gv, gt) = (av[i - lo], at[i - lo]);
            if gv == 0.0 && gt == 0.0 {
                continue;
            }
            self.scatter_dual(i, gv, gt, lo, tang, &mut av, &mut at);
        }
        for &w in wrt {
            if (w as usize) > hi {
                g_out.push(0.0);
                gt_out.push(0.0);
            } else {
                g_out.push(av[w as usize - lo]);
                gt_out.push(at[w as usize - lo]);
            }
        }
    }

    /// Dual scatter: local partial lp and its direction-derivative l̇p give
    /// a_p += lp·g (values) and ȧ_p += l̇p·g + lp·ġ (tangents).
    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn scatter_dual(
        &self,
        i: usize,
        gv: f64,
        gt: f64,
        lo: usize,
        tang: &[f64],
        av: &mut [f64],
        at: &mut [f64],
    ) {
        let (a, b) = (self.pa[i], self.pb[i]);
        let active = |p: u32| p != NONE && (p as usize) >= lo && self.is_desc(p as usize, lo);
        let acc = |p: u32, lp: f64, lt: f64, av: &mut [f64], at: &mut [f64]| {
            let k = p as usize - lo;
            av[k] += lp * gv;
            at[k] += lt * gv + lp * gt;
        };
        match self.ops[i] {
            Op::Const | Op::Leaf | Op::Sign | Op::StepGe => {}
            Op::Add => {
                if active(a) {
                    acc(a, 1.0, 0.0, av, at);
                }
                if active(b) {
                    acc(b, 1.0, 0.0, av, at);
                }
            }
            Op::Mul => {
                if active(a) {
                    acc(a, self.vals[b as usize], tang[b as usize], av, at);
                }
                if active(b) {
                    acc(b, self.vals[a as usize], tang[a as usize], av, at);
                }
            }
            Op::Div => {
                let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
                let (tx, ty) = (tang[a as usize], tang[b as usize]);
                if active(a) {
                    // lp = 1/y
                    acc(a, 1.0 / y, -ty / (y * y), av, at);
                }
                if active(b) {
                    // lp = −x/y²
                    let lp = -x / (y * y);
                    let lt = -tx / (y * y) + 2.0 * x * ty / (y * y * y);
                    acc(b, lp, lt, av, at);
                }
            }
            Op::Pow => {
                let (x, y) = (self.vals[a as usize], self.vals[b as usize]);
                let (tx, ty) = (tang[a as usize], tang[b as usize]);
                if active(a) {
                    // lp = y·x^(y−1)
                    let xp = x.powf(y - 1.0);
                    let lp = y * xp;
                    let mut lt = ty * xp + y * (y - 1.0) * x.powf(y - 2.0) * tx;
                    if ty != 0.0 {
                        lt += y * xp * x.ln() * ty;
                    }
                    acc(a, lp, lt, av, at);
                }
                if active(b) {
                    // lp = v·ln x  (v = x^y; v̇ = tang[i])
                    let lnx = x.ln();
                    let lp = self.vals[i] * lnx;
                    let lt = tang[i] * lnx + self.vals[i] * tx / x;
                    acc(b, lp, lt, av, at);
                }
            }
            Op::Exp => {
                if active(a) {
                    acc(a, self.vals[i], tang[i], av, at);
                }
            }
            Op::Log => {
                if active(a) {
                    let x = self.vals[a as usize];
                    acc(a, 1.0 / x, -tang[a as usize] / (x * x), av, at);
                }
            }
            Op::Tanh => {
                if active(a) {
                    let v = self.vals[i];
                    acc(a, 1.0 - v * v, -2.0 * v * tang[i], av, at);
                }
            }
            Op::Sin => {
                if active(a) {
                    let x = self.vals[a as usize];
                    acc(a, x.cos(), -x.sin() * tang[a as usize], av, at);
                }
            }
            Op::Cos => {
                if active(a) {
                    let x = self.vals[a as usize];
                    acc(a, -x.sin(), -x.cos() * tang[a as usize], av, at);
                }
            }
            Op::Abs => {
                if active(a) {
                    acc(a, sign0(self.vals[a as usize]), 0.0, av, at);
                }
            }
            Op::Max => {
                let s = if self.vals[a as usize] >= self.vals[b as usize] {
                    1.0
                } else {
                    0.0
                };
                if active(a) {
                    acc(a, s, 0.0, av, at);
                }
                if active(b) {
                    acc(b, 1.0 - s, 0.0, av, at);
                }
            }
            Op::Sigmoid => {
                if active(a) {
                    let s = self.vals[i];
                    acc(a, s * (1.0 - s), (1.0 - 2.0 * s) * tang[i], av, at);
                }
            }
            Op::Softplus => {
                if active(a) {
                    let s = sigmoid(self.vals[a as usize]);
                    acc(a, s, s * (1.0 - s) * tang[a as usize], av, at);
                }
            }
            Op::Sum => {
                let (off, n) = (a as usize, b as usize);
                for &p in &self.spill[off..off + n] {
                    if active(p) {
                        acc(p, 1.0, 0.0, av, at);
                    }
                }
            }
            Op::Dot => {
                let (off, n) = (a as usize, b as usize);
                let h = n / 2;
                for k in 0..h {
                    let (pa, pb) = (self.spill[off + k], self.spill[off + h + k]);
                    if active(pa) {
                        acc(pa, self.vals[pb as usize], tang[pb as usize], av, at);
                    }
                    if active(pb) {
                        acc(pb, self.vals[pa as usize], tang[pa as usize], av, at);
                    }
                }
            }
        }
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Graph({} nodes, {} spill)",
            self.ops.len(),
            self.spill.len()
        )
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---- finite differences ---------------------------------------------------

/// Central-difference cross-check of nested autodiff derivatives.
///
/// `f` builds a scalar graph from leaf Vars. For each input component, the
/// autodiff derivative of the given `order` (1–3, diagonal ∂ⁿ/∂xᵢⁿ for
/// higher orders) is compared against a central difference; the maximum
/// relative discrepancy over components is returned (absolute discrepancy
/// when both values are ~0).
pub fn finite_difference_check<F>(f: F, point: &[f64], order: u32, h: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert!((1..=3).contains(&order), "order must be 1, 2 or 3");
    assert!(h > 0.0);
    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = x.iter().map(|&v| g.var(v)).collect();
        let y = f(&mut g, &vars);
        g.value(y.id)
    };
    // autodiff side: nested grad with create_graph on all but the last level
    let ad = |i: usize| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|&v| g.var(v)).collect();
        let y = f(&mut g, &vars);
        let mut cur = y;
        for level in 0..order {
            let create = level + 1 < order;
            let gs = g.grad(cur, &[vars[i]], create).expect("grad failed");
            cur = gs[0];
        }
        g.value(cur.id)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut x = point.to_vec();
        let fd = match order {
            1 => {
                x[i] = point[i] + h;
                let fp = eval(&x);
                x[i] = point[i] - h;
                let fm = eval(&x);
                (fp - fm) / (2.0 * h)
            }
            2 => {
                x[i] = point[i] + h;
                let fp = eval(&x);
                x[i] = point[i] - h;
                let fm = eval(&x);
                let f0 = eval(point);
                (fp - 2.0 * f0 + fm) / (h * h)
            }
            _ => {
                x[i] = point[i] + 2.0 * h;
                let fp2 = eval(&x);
                x[i] = point[i] + h;
                let fp1 = eval(&x);
                x[i] = point[i] - h;
                let fm1 = eval(&x);
                x[i] = point[i] - 2.0 * h;
                let fm2 = eval(&x);
                (fp2 - 2.0 * fp1 + 2.0 * fm1 - fm2) / (2.0 * h * h * h)
            }
        };
        let a = ad(i);
        // relative discrepancy, falling back to absolute when both values
        // are ~0 (pure-relative error is meaningless against FD noise there)
        let denom = a.abs().max(fd.abs());
        let err = if denom < 1e-6 {
            (a - fd).abs()
        } else {
            (a - fd).abs() / denom
        };
        worst = worst.max(err);
    }
    worst
}
