//! Minimal f64 tensor engine with tape-based reverse-mode autodiff.
//!
//! Every operation appends a node to a [`Graph`]; [`backward`] walks the tape
//! in reverse creation order. Adjoint computations are expressed through the
//! same public primitives, so when `create_graph` is set the backward pass is
//! itself recorded and can be differentiated again — that is how conservative
//! forces (`-dE/dpositions`) stay trainable without a dedicated higher-order
//! engine.
//!
//! Conventions:
//! - shapes are row-major, a scalar has shape `[]`;
//! - shape mismatches and non-finite results are hard errors (panics) that
//!   name the offending operation and both shapes — they indicate bugs, not
//!   recoverable states;
//! - `scatter_sum_rows` accumulates in ascending input-row order and is
//!   bitwise equal to the brute-force loop; `sum_all`/`sum_axis` use pairwise
//!   summation (so summing a tensor consisting of two identical halves yields
//!   exactly twice the half sum).

mod fd;
pub(crate) mod ops;

pub use fd::finite_difference_grad;
pub use ops::concat_last;

use std::cell::RefCell;
use std::rc::Rc;

// Several variants carry shape metadata that only the derived `Debug` impl
// reads; it stays because tracing a taped graph without shapes is miserable.
#[allow(dead_code)]
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis { a: usize, axis: usize },
    BroadcastScalar(usize),
    RepeatAxis { a: usize, axis: usize, reps: usize },
    ConcatLast(Vec<usize>),
    SliceLast { a: usize, start: usize, len: usize },
    PadLast { a: usize, total: usize, start: usize },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ScatterSumRows { a: usize, idx: Rc<Vec<usize>>, rows: usize },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    SoftmaxLast(usize),
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub op: Op,
    pub requires_grad: bool,
}

pub(crate) struct GraphInner {
    pub nodes: Vec<Node>,
    pub grad_enabled: bool,
}

/// A shared computation tape. Cheap to clone; all [`Var`]s hold a handle.
#[derive(Clone)]
pub struct Graph(pub(crate) Rc<RefCell<GraphInner>>);

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(RefCell::new(GraphInner {
            nodes: Vec::new(),
            grad_enabled: true,
        })))
    }

    /// Number of recorded nodes (diagnostics only).
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let mut inner = self.0.borrow_mut();
        let requires_grad = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        inner.nodes.push(Node { data, shape, op, requires_grad });
        Var { graph: self.clone(), id }
    }

    /// A differentiable input.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Var {
        check_finite(&data, "leaf");
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Var {
        check_finite(&data, "constant");
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "constant: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// A non-differentiable scalar.
    pub fn scalar(&self, v: f64) -> Var {
        self.constant(vec![v], &[])
    }

    pub(crate) fn grad_enabled(&self) -> bool {
        self.0.borrow().grad_enabled
    }

    pub(crate) fn set_grad_enabled(&self, on: bool) {
        self.0.borrow_mut().grad_enabled = on;
    }
}

/// A handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// A gradient-stopped copy of this node's current value.
    pub fn detach(&self) -> Var {
        let inner = self.graph.0.borrow();
        let node = &inner.nodes[self.id];
        let (data, shape) = (node.data.clone(), node.shape.clone());
        drop(inner);
        self.graph.constant(data, &shape)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.0.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.0.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.0.borrow().nodes[self.id].requires_grad
    }

    /// Copy the node's values out of the tape.
    pub fn data(&self) -> Vec<f64> {
        self.graph.0.borrow().nodes[self.id].data.clone()
    }

    /// The value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.0.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(
            node.data.len(),
            1,
            "scalar_value on tensor of shape {:?}",
            node.shape
        );
        node.data[0]
    }
}

pub(crate) fn check_finite(data: &[f64], op: &str) {
    for (i, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            panic!("{op}: non-finite value {v} at flat index {i}");
        }
    }
}

/// Pairwise (divide and conquer) summation: deterministic, and exact doubling
/// for inputs made of two identical halves.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let m = n / 2;
            pairwise_sum(&v[..m]) + pairwise_sum(&v[m..])
        }
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Adjoints produced by [`backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    /// Adjoint of `v` as a graph variable (present only if `v` was reached).
    pub fn get(&self, v: &Var) -> Option<Var> {
        self.grads.get(v.id).and_then(|g| g.clone())
    }

    /// Adjoint values of `v`; zeros if `v` was not reached by the backward pass.
    pub fn data_of(&self, v: &Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.data(),
            None => vec![0.0; v.numel()],
        }
    }
}

/// Reverse-mode sweep from a scalar `loss`.
///
/// With `create_graph` the adjoint computation is recorded on the same tape
/// and is differentiable; otherwise recording is suspended for the sweep.
/// Calling backward on a non-scalar is a hard error.
pub fn backward(loss: &Var, create_graph: bool) -> Gradients {
    {
        let inner = loss.graph.0.borrow();
        let node = &inner.nodes[loss.id];
        assert_eq!(
            node.data.len(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            node.shape
        );
    }
    let graph = loss.graph.clone();
    let saved = graph.grad_enabled();
    if !create_graph {
        graph.set_grad_enabled(false);
    }

    let mut adj: Vec<Option<Var>> = Vec::new();
    adj.resize(loss.id + 1, None);
    if loss.requires_grad() {
        let seed = graph.constant(vec![1.0], &loss.shape());
        adj[loss.id] = Some(seed);
    }

    for id in (0..=loss.id).rev() {
        let Some(gout) = adj[id].clone() else { continue };
        let op = graph.0.borrow().nodes[id].op.clone();
        for (pid, contrib) in ops::vjp(&graph, id, &op, &gout) {
            let entry = adj[pid].take();
            adj[pid] = Some(match entry {
                None => contrib,
                Some(prev) => prev.add(&contrib),
            });
        }
    }

    if !create_graph {
        graph.set_grad_enabled(saved);
    }
    Gradients { grads: adj }
}
