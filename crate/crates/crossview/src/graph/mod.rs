//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Graph`] records every operation eagerly: pushing an op computes its
//! value immediately and appends a node. [`Graph::backward`] replays the tape
//! in reverse, accumulating vector-Jacobian products. Tensors are immutable
//! once produced; parameters live outside the graph in a [`Params`] store and
//! are copied in as leaf nodes, so a graph never aliases trainer state.
//!
//! Stop-gradient is a first-class op: nodes behind [`Graph::stop_grad`]
//! receive exactly zero gradient, not a small one.

mod check;
mod params;

pub use check::grad_check;
pub use params::{Init, ParamId, Params};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::HashMap;

use crate::{Error, Result};

/// Index of a node in a [`Graph`].
pub type NodeId = usize;

/// Numeric width of stored values.
///
/// `Single` rounds every produced value through f32, so a training run is
/// bit-reproducible from f32 checkpoints; `Double` keeps full f64 precision
/// for gradient checks and test oracles. One code path, one flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[inline]
    fn store(self, x: f64) -> f64 {
        match self {
            Precision::Double => x,
            Precision::Single => x as f32 as f64,
        }
    }
}

/// Whether stochastic ops (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Floor applied to probabilities before `log`, tolerating f32 softmax
/// underflow without making losses infinite.
pub const PROB_FLOOR: f64 = 1e-8;

enum Op {
    /// Constant leaf; no gradient.
    Leaf,
    /// Gradient-tracked leaf that is not a parameter (adversarial probes).
    Var,
    /// Parameter leaf, values copied from a [`Params`] store.
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m, n] × [n] -> [m]`.
    MatVec(NodeId, NodeId),
    /// Inner product of two equal-length vectors.
    Dot(NodeId, NodeId),
    /// Vector scaled by a scalar node.
    MulScalar(NodeId, NodeId),
    /// Scalar reciprocal.
    Recip(NodeId),
    /// Row `i` of a matrix (embedding lookup).
    Row(NodeId, usize),
    /// Element `i` of a vector as a scalar.
    Elem(NodeId, usize),
    Concat(Vec<NodeId>),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// `ln(max(x, floor))` elementwise; zero slope below the floor.
    LogFloor(NodeId, f64),
    Softmax { x: NodeId, axis: usize },
    /// Sum of same-shaped tensors.
    SumList(Vec<NodeId>),
    /// Sum of all entries, as a scalar.
    SumElems(NodeId),
    /// Elementwise max over same-shaped tensors; winners fixed at forward.
    MaxList { xs: Vec<NodeId>, winners: Vec<usize> },
    /// Inverted-scaling dropout; mask fixed at forward.
    Dropout { x: NodeId, kept: Vec<bool>, scale: f64 },
    StopGrad(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
}

/// An operation tape plus the values it produced.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    rng: StdRng,
    param_cache: HashMap<ParamId, NodeId>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    /// A fresh graph. The seed fixes every stochastic op recorded on it.
    pub fn new(precision: Precision, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            rng: StdRng::seed_from_u64(seed),
            param_cache: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut values: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        if self.precision == Precision::Single {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op"
        );
        self.nodes.push(Node { op, shape, values, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant leaf. Zero extents are rejected: every tensor holds data.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        assert_eq!(numel(&shape), values.len(), "shape/value count mismatch");
        self.push(Op::Leaf, shape, values, false)
    }

    /// Gradient-tracked leaf that is not a parameter.
    pub fn var(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        assert_eq!(numel(&shape), values.len(), "shape/value count mismatch");
        self.push(Op::Var, shape, values, true)
    }

    /// Scalar constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    /// Load a parameter as a leaf. Cached: the same parameter maps to the
    /// same node within one graph, so shared modules share gradients.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_cache.get(&id) {
            return node;
        }
        let entry = params.entry(id);
        let needs_grad = !entry.frozen;
        let node = self.push(
            Op::Param(id),
            entry.shape.clone(),
            entry.values.clone(),
            needs_grad,
        );
        self.param_cache.insert(id, node);
        node
    }

    // ── Arithmetic ───────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "add: shape mismatch");
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), self.nodes[a].shape.clone(), values, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "sub: shape mismatch");
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), self.nodes[a].shape.clone(), values, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "mul: shape mismatch");
        let values = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), self.nodes[a].shape.clone(), values, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let values = self.nodes[x].values.iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(Op::Scale(x, c), self.nodes[x].shape.clone(), values, needs)
    }

    /// `w · x` for `w: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (m, n) = match self.nodes[w].shape[..] {
            [m, n] => (m, n),
            _ => panic!("matvec: weight must be rank 2"),
        };
        assert_eq!(self.nodes[x].shape, vec![n], "matvec: input length mismatch");
        let wv = &self.nodes[w].values;
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xv[j];
            }
            out[i] = acc;
        }
        let needs = self.needs(w) || self.needs(x);
        self.push(Op::MatVec(w, x), vec![m], out, needs)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "dot: shape mismatch");
        let v = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Dot(a, b), vec![], vec![v], needs)
    }

    /// Vector times a scalar node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].values.len(), 1, "mul_scalar: scalar expected");
        let sv = self.nodes[s].values[0];
        let values = self.nodes[x].values.iter().map(|v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::MulScalar(x, s), self.nodes[x].shape.clone(), values, needs)
    }

    /// Scalar reciprocal `1/x`.
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        assert_eq!(self.nodes[x].values.len(), 1, "recip: scalar expected");
        let v = 1.0 / self.nodes[x].values[0];
        let needs = self.needs(x);
        self.push(Op::Recip(x), vec![], vec![v], needs)
    }

    /// Row `i` of a rank-2 node.
    pub fn row(&mut self, x: NodeId, i: usize) -> NodeId {
        let (m, n) = match self.nodes[x].shape[..] {
            [m, n] => (m, n),
            _ => panic!("row: rank-2 node expected"),
        };
        assert!(i < m, "row index {i} out of range for {m} rows");
        let values = self.nodes[x].values[i * n..(i + 1) * n].to_vec();
        let needs = self.needs(x);
        self.push(Op::Row(x, i), vec![n], values, needs)
    }

    /// Element `i` of a rank-1 node, as a scalar.
    pub fn elem(&mut self, x: NodeId, i: usize) -> NodeId {
        assert_eq!(self.nodes[x].shape.len(), 1, "elem: rank-1 node expected");
        let v = self.nodes[x].values[i];
        let needs = self.needs(x);
        self.push(Op::Elem(x, i), vec![], vec![v], needs)
    }

    /// Concatenate rank-1 nodes.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat: needs at least one input");
        let mut values = Vec::new();
        let mut needs = false;
        for &x in xs {
            assert_eq!(self.nodes[x].shape.len(), 1, "concat: rank-1 nodes expected");
            values.extend_from_slice(&self.nodes[x].values);
            needs |= self.needs(x);
        }
        let len = values.len();
        self.push(Op::Concat(xs.to_vec()), vec![len], values, needs)
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(Op::Relu(x), self.nodes[x].shape.clone(), values, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        self.push(Op::Tanh(x), self.nodes[x].shape.clone(), values, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let values = self
            .nodes[x]
            .values
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), self.nodes[x].shape.clone(), values, needs)
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn log_floor(&mut self, x: NodeId, floor: f64) -> NodeId {
        let values = self.nodes[x].values.iter().map(|v| v.max(floor).ln()).collect();
        let needs = self.needs(x);
        self.push(Op::LogFloor(x, floor), self.nodes[x].shape.clone(), values, needs)
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Numerically stable softmax along `axis` of a rank-1 or rank-2 node.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        let rank = shape.len().max(1);
        if axis >= rank || shape.is_empty() {
            return Err(Error::InvalidAxis { axis, rank: shape.len() });
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyAxis);
        }
        let values = match shape[..] {
            [_] => softmax_slices(&self.nodes[x].values, shape[0], 1, 1),
            [m, n] => {
                if axis == 1 {
                    softmax_slices(&self.nodes[x].values, n, 1, m)
                } else {
                    softmax_slices(&self.nodes[x].values, m, n, n)
                }
            }
            _ => panic!("softmax: rank-1 or rank-2 node expected"),
        };
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, values, needs))
    }

    /// Softmax of a rank-1 node (the common case).
    pub fn softmax1d(&mut self, x: NodeId) -> NodeId {
        self.softmax(x, 0).expect("rank-1 softmax cannot fail")
    }

    /// Sum of same-shaped nodes.
    pub fn sum_list(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum_list: needs at least one input");
        let shape = self.nodes[xs[0]].shape.clone();
        let mut values = vec![0.0; numel(&shape)];
        let mut needs = false;
        for &x in xs {
            assert_eq!(self.nodes[x].shape, shape, "sum_list: shape mismatch");
            for (o, v) in values.iter_mut().zip(&self.nodes[x].values) {
                *o += v;
            }
            needs |= self.needs(x);
        }
        self.push(Op::SumList(xs.to_vec()), shape, values, needs)
    }

    /// Sum of all entries of a node, as a scalar.
    pub fn sum_elems(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].values.iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumElems(x), vec![], vec![v], needs)
    }

    /// Elementwise max over same-shaped nodes (max-over-time pooling).
    pub fn max_list(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "max_list: needs at least one input");
        let shape = self.nodes[xs[0]].shape.clone();
        let n = numel(&shape);
        let mut values = self.nodes[xs[0]].values.clone();
        let mut winners = vec![0usize; n];
        let mut needs = self.needs(xs[0]);
        for (k, &x) in xs.iter().enumerate().skip(1) {
            assert_eq!(self.nodes[x].shape, shape, "max_list: shape mismatch");
            for (j, v) in self.nodes[x].values.iter().enumerate() {
                if *v > values[j] {
                    values[j] = *v;
                    winners[j] = k;
                }
            }
            needs |= self.needs(x);
        }
        self.push(Op::MaxList { xs: xs.to_vec(), winners }, shape, values, needs)
    }

    /// Inverted-scaling dropout: in train mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// the input node is returned untouched.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidDropProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x].values.len();
        let kept: Vec<bool> = (0..n).map(|_| self.rng.gen::<f64>() >= p).collect();
        let scale = 1.0 / (1.0 - p);
        let values = self
            .nodes[x]
            .values
            .iter()
            .zip(&kept)
            .map(|(v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let needs = self.needs(x);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::Dropout { x, kept, scale }, shape, values, needs))
    }

    /// Mark a subgraph as a fixed target: values pass through, gradients do
    /// not. The guarded subtree receives exactly zero gradient from any loss
    /// built on top of this node.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x].values.clone();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::StopGrad(x), shape, values, false)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// gradient-tracked node, keyed by node and aggregated per parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss].shape.is_empty() && numel(&self.nodes[loss].shape) != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_param: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads[id] {
                    by_param
                        .entry(pid)
                        .and_modify(|acc| {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Gradients { nodes: grads, by_param })
    }

    fn backprop_one(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target].needs_grad {
                return;
            }
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].values.len()]);
            f(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf | Op::Var | Op::Param(_) | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                add_to(grads, *a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, *b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, *b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].values, &self.nodes[*b].values);
                add_to(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                add_to(grads, *b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c;
                    }
                });
            }
            Op::MatVec(w, x) => {
                let n = self.nodes[*x].values.len();
                let m = g.len();
                let xv = &self.nodes[*x].values;
                let wv = &self.nodes[*w].values;
                add_to(grads, *w, &mut |d| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let drow = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] += gi * xv[j];
                        }
                    }
                });
                add_to(grads, *x, &mut |d| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            d[j] += gi * row[j];
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let g0 = g[0];
                let (av, bv) = (&self.nodes[*a].values, &self.nodes[*b].values);
                add_to(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g0 * bv[i];
                    }
                });
                add_to(grads, *b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g0 * av[i];
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.nodes[*s].values[0];
                let xv = &self.nodes[*x].values;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sv;
                    }
                });
                add_to(grads, *s, &mut |d| {
                    let mut acc = 0.0;
                    for i in 0..xv.len() {
                        acc += g[i] * xv[i];
                    }
                    d[0] += acc;
                });
            }
            Op::Recip(x) => {
                let xv = self.nodes[*x].values[0];
                add_to(grads, *x, &mut |d| {
                    d[0] -= g[0] / (xv * xv);
                });
            }
            Op::Row(x, i) => {
                let n = g.len();
                let i = *i;
                add_to(grads, *x, &mut |d| {
                    let drow = &mut d[i * n..(i + 1) * n];
                    for j in 0..n {
                        drow[j] += g[j];
                    }
                });
            }
            Op::Elem(x, i) => {
                let i = *i;
                add_to(grads, *x, &mut |d| {
                    d[i] += g[0];
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x].values.len();
                    add_to(grads, x, &mut |d| {
                        for j in 0..n {
                            d[j] += g[offset + j];
                        }
                    });
                    offset += n;
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].values;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[id].values;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].values;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::LogFloor(x, floor) => {
                let xv = &self.nodes[*x].values;
                let floor = *floor;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] >= floor {
                            d[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].values;
                let shape = &self.nodes[id].shape;
                let (slice_len, stride, count) = match shape[..] {
                    [n] => (n, 1, 1),
                    [m, n] => {
                        if *axis == 1 {
                            (n, 1, m)
                        } else {
                            (m, n, n)
                        }
                    }
                    _ => unreachable!(),
                };
                add_to(grads, *x, &mut |d| {
                    for c in 0..count {
                        let base = if stride == 1 { c * slice_len } else { c };
                        let mut dot = 0.0;
                        for k in 0..slice_len {
                            let idx = base + k * stride;
                            dot += g[idx] * y[idx];
                        }
                        for k in 0..slice_len {
                            let idx = base + k * stride;
                            d[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::SumList(xs) => {
                for &x in xs {
                    add_to(grads, x, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += g[i];
                        }
                    });
                }
            }
            Op::SumElems(x) => {
                let g0 = g[0];
                add_to(grads, *x, &mut |d| {
                    for v in d.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::MaxList { xs, winners } => {
                for (j, &k) in winners.iter().enumerate() {
                    let x = xs[k];
                    add_to(grads, x, &mut |d| {
                        d[j] += g[j];
                    });
                }
            }
            Op::Dropout { x, kept, scale } => {
                let scale = *scale;
                add_to(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if kept[i] {
                            d[i] += g[i] * scale;
                        }
                    }
                });
            }
        }
    }
}

fn softmax_slices(values: &[f64], slice_len: usize, stride: usize, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for c in 0..count {
        let base = if stride == 1 { c * slice_len } else { c };
        let mut max = f64::NEG_INFINITY;
        for k in 0..slice_len {
            max = max.max(values[base + k * stride]);
        }
        let mut sum = 0.0;
        for k in 0..slice_len {
            let idx = base + k * stride;
            out[idx] = (values[idx] - max).exp();
            sum += out[idx];
        }
        for k in 0..slice_len {
            out[base + k * stride] /= sum;
        }
    }
    out
}

/// Gradients from one [`Graph::backward`] sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter, or `None` when no gradient reached it
    /// (which is an exact zero, not an approximation).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    /// Euclidean norm of a parameter's gradient; zero when absent.
    pub fn param_norm(&self, id: ParamId) -> f64 {
        self.param(id)
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    /// Gradient for an arbitrary node (used by adversarial perturbations).
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Accumulate `other` into `self` (same graph family), scaling by `w`.
    pub fn add_scaled(&mut self, other: &Gradients, w: f64) {
        for (pid, g) in &other.by_param {
            let acc = self
                .by_param
                .entry(*pid)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += w * b;
            }
        }
    }

    /// An empty gradient set.
    pub fn empty() -> Self {
        Gradients { nodes: Vec::new(), by_param: HashMap::new() }
    }
}

/// `Σ p · ln(p/q)` with `q` floored at [`PROB_FLOOR`] before the log and the
/// `0·ln 0 := 0` convention, averaged over rows for rank-2 inputs.
pub fn kl_divergence(g: &mut Graph, p: NodeId, q: NodeId) -> Result<NodeId> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::ShapeMismatch(format!(
            "kl_divergence: {:?} vs {:?}",
            g.shape(p),
            g.shape(q)
        )));
    }
    let rows = match g.shape(p)[..] {
        [] => 1,
        [_] => 1,
        [m, _] => m,
        _ => {
            return Err(Error::ShapeMismatch(
                "kl_divergence: rank-1 or rank-2 tensors expected".into(),
            ))
        }
    };
    let log_p = g.log_floor(p, PROB_FLOOR);
    let log_q = g.log_floor(q, PROB_FLOOR);
    let diff = g.sub(log_p, log_q);
    let weighted = g.mul(p, diff);
    let total = g.sum_elems(weighted);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Mean KL divergence over aligned per-position distribution pairs.
pub fn kl_mean(g: &mut Graph, pairs: &[(NodeId, NodeId)]) -> Result<NodeId> {
    assert!(!pairs.is_empty(), "kl_mean: needs at least one pair");
    let mut terms = Vec::with_capacity(pairs.len());
    for &(p, q) in pairs {
        terms.push(kl_divergence(g, p, q)?);
    }
    let total = g.sum_list(&terms);
    Ok(g.scale(total, 1.0 / pairs.len() as f64))
}

/// Cross-entropy `-Σ target · ln(pred)` of a distribution against a fixed
/// target distribution, as a scalar node.
pub fn cross_entropy(g: &mut Graph, target: NodeId, pred: NodeId) -> NodeId {
    let log_pred = g.log_floor(pred, PROB_FLOOR);
    let weighted = g.mul(target, log_pred);
    let total = g.sum_elems(weighted);
    g.scale(total, -1.0)
}

/// `(1-ε)·onehot(label) + ε/K`, the smoothed classification target.
pub fn smoothed_target(label: usize, classes: usize, epsilon: f64) -> Vec<f64> {
    let mut t = vec![epsilon / classes as f64; classes];
    t[label] += 1.0 - epsilon;
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph {
        Graph::new(Precision::Double, 7)
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut g = graph();
        let x = g.leaf(vec![0.0, 0.0], vec![2]);
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.values(s), &[0.5, 0.5]);

        let c = g.leaf(vec![3.25, 3.25, 3.25], vec![3]);
        let sc = g.softmax(c, 0).unwrap();
        for v in g.values(sc) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // invariance to adding a constant
        let a = g.leaf(vec![0.3, -1.2, 2.0], vec![3]);
        let b = g.leaf(vec![0.3 + 11.0, -1.2 + 11.0, 2.0 + 11.0], vec![3]);
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        for (x, y) in g.values(sa).iter().zip(g.values(sb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        // [ln 1, ln 3] -> [0.25, 0.75]
        let mut g = graph();
        let x = g.leaf(vec![0.0, 3.0f64.ln()], vec![2]);
        let s = g.softmax(x, 0).unwrap();
        assert!((g.values(s)[0] - 0.25).abs() < 1e-12);
        assert!((g.values(s)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_per_slice() {
        let mut g = graph();
        let x = g.leaf(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0], vec![2, 3]);
        let s = g.softmax(x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = g.values(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let s0 = g.softmax(x, 0).unwrap();
        for c in 0..3 {
            let sum: f64 = g.values(s0)[c] + g.values(s0)[3 + c];
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = graph();
        let x = g.leaf(vec![1.0, 2.0], vec![2]);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn kl_zero_on_identical_distributions() {
        let mut g = graph();
        let p = g.leaf(vec![0.3, 0.7], vec![2]);
        let kl = kl_divergence(&mut g, p, p).unwrap();
        assert_eq!(g.scalar_value(kl), 0.0);
    }

    #[test]
    fn kl_direct_summation() {
        let mut g = graph();
        // one-hot p against uniform q: ln 2, with 0·ln 0 := 0
        let p = g.leaf(vec![1.0, 0.0], vec![2]);
        let q = g.leaf(vec![0.5, 0.5], vec![2]);
        let kl = kl_divergence(&mut g, p, q).unwrap();
        assert!((g.scalar_value(kl) - 2.0f64.ln()).abs() < 1e-12);

        let p2 = g.leaf(vec![0.5, 0.5], vec![2]);
        let q2 = g.leaf(vec![0.25, 0.75], vec![2]);
        let kl2 = kl_divergence(&mut g, p2, q2).unwrap();
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((g.scalar_value(kl2) - expect).abs() < 1e-12);
        assert!(g.scalar_value(kl2) > 0.0);
    }

    #[test]
    fn kl_shape_mismatch_rejected() {
        let mut g = graph();
        let p = g.leaf(vec![1.0, 0.0], vec![2]);
        let q = g.leaf(vec![0.5, 0.25, 0.25], vec![3]);
        assert!(kl_divergence(&mut g, p, q).is_err());
    }

    #[test]
    fn kl_averages_over_rows() {
        let mut g = graph();
        let p = g.leaf(vec![1.0, 0.0, 1.0, 0.0], vec![2, 2]);
        let q = g.leaf(vec![0.5, 0.5, 0.5, 0.5], vec![2, 2]);
        let kl = kl_divergence(&mut g, p, q).unwrap();
        assert!((g.scalar_value(kl) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = graph();
        let x = g.leaf(vec![1.0, 2.0, 3.0], vec![3]);
        let y = g.dropout(x, 0.5, Mode::Eval).unwrap();
        assert_eq!(x, y);
        let z = g.dropout(x, 0.0, Mode::Train).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_rejects_full_drop() {
        let mut g = graph();
        let x = g.leaf(vec![1.0], vec![1]);
        assert!(g.dropout(x, 1.0, Mode::Train).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = graph();
        let n = 100_000;
        let x = g.leaf(vec![1.0; n], vec![n]);
        let y = g.dropout(x, 0.5, Mode::Train).unwrap();
        let mean: f64 = g.values(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_deterministic_under_seed() {
        let mut g1 = Graph::new(Precision::Double, 42);
        let mut g2 = Graph::new(Precision::Double, 42);
        let x1 = g1.leaf(vec![1.0; 64], vec![64]);
        let x2 = g2.leaf(vec![1.0; 64], vec![64]);
        let y1 = g1.dropout(x1, 0.3, Mode::Train).unwrap();
        let y2 = g2.dropout(x2, 0.3, Mode::Train).unwrap();
        assert_eq!(g1.values(y1), g2.values(y2));
    }

    #[test]
    fn backward_simple_square() {
        // loss = x² at x = 3 → dx = 6
        let mut params = Params::new(Precision::Double);
        let x = params.add_const("x", &[], &[3.0]);
        let mut g = graph();
        let xn = g.param(&params, x);
        let loss = g.mul(xn, xn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut params = Params::new(Precision::Double);
        let x = params.add_const("x", &[], &[0.0]);
        let mut g = graph();
        let xn = g.param(&params, x);
        let loss = g.tanh(xn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = graph();
        let x = g.var(vec![1.0, 2.0], vec![2]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn stop_grad_blocks_exactly() {
        // loss = kl(stop_grad(p(θ)), q(θ)): θ_p gets zero, θ_q does not
        let mut params = Params::new(Precision::Double);
        let tp = params.add_const("theta_p", &[2], &[0.2, -0.1]);
        let tq = params.add_const("theta_q", &[2], &[0.4, 0.3]);
        let mut g = graph();
        let pn = g.param(&params, tp);
        let qn = g.param(&params, tq);
        let p = g.softmax(pn, 0).unwrap();
        let q = g.softmax(qn, 0).unwrap();
        let p_fixed = g.stop_grad(p);
        let loss = kl_divergence(&mut g, p_fixed, q).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param_norm(tp), 0.0);
        assert!(grads.param_norm(tq) > 0.0);
    }

    #[test]
    fn param_loaded_once_per_graph() {
        let mut params = Params::new(Precision::Double);
        let w = params.add_const("w", &[2], &[1.0, 2.0]);
        let mut g = graph();
        let a = g.param(&params, w);
        let b = g.param(&params, w);
        assert_eq!(a, b);
    }

    #[test]
    fn shared_param_grads_accumulate() {
        // loss = w·w (dot) → grad = 2w
        let mut params = Params::new(Precision::Double);
        let w = params.add_const("w", &[2], &[1.5, -2.0]);
        let mut g = graph();
        let wn = g.param(&params, w);
        let loss = g.dot(wn, wn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn single_precision_rounds_through_f32() {
        let mut g = Graph::new(Precision::Single, 0);
        let third = 1.0f64 / 3.0;
        let x = g.leaf(vec![third], vec![1]);
        assert_eq!(g.values(x)[0], third as f32 as f64);
        assert_ne!(g.values(x)[0], third);
    }

    #[test]
    fn max_list_routes_gradient_to_winner() {
        let mut params = Params::new(Precision::Double);
        let a = params.add_const("a", &[2], &[1.0, 5.0]);
        let b = params.add_const("b", &[2], &[3.0, 2.0]);
        let mut g = graph();
        let an = g.param(&params, a);
        let bn = g.param(&params, b);
        let m = g.max_list(&[an, bn]);
        assert_eq!(g.values(m), &[3.0, 5.0]);
        let s = g.sum_elems(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(grads.param(b).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn smoothed_target_values() {
        let t = smoothed_target(0, 4, 0.1);
        assert!((t[0] - 0.925).abs() < 1e-12);
        for v in &t[1..] {
            assert!((v - 0.025).abs() < 1e-12);
        }
        let t5 = smoothed_target(2, 5, 0.1);
        assert!((t5[2] - 0.92).abs() < 1e-12);
        assert!((t5[0] - 0.02).abs() < 1e-12);
    }
}
