//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that feeds it.
//!
//! Matrices are row-major and two-dimensional; vectors are one-dimensional.
//! Element-wise operations require identical shapes, with [`Var::add_row`] as
//! the single broadcasting exception (bias addition).

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::ops;

use super::{DiffError, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Recip(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Gather(NodeId, Vec<usize>),
    PairwiseSqDist(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    SoftmaxXent(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    domain_error: Cell<Option<NodeId>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of the right length when `var` does not
    /// reach the root.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.len()],
        }
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf (input or parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// First node whose `log` saw a non-positive input, if any.
    pub fn domain_error(&self) -> Option<NodeId> {
        self.domain_error.get()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op });
        Var { tape: self, id }
    }

    fn value_of(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates d(root)/d(node) to every node that feeds `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, DiffError> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        if let Some(node) = self.domain_error.get() {
            if node <= root.id {
                return Err(DiffError::Domain { node });
            }
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &x in [a, b] {
                accumulate(grads, x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, *b, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, *b, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] / bv[i];
                }
            });
            accumulate(grads, *b, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::AddRow(a, b) => {
            let cols = val(*b).len();
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, *b, cols, |d| {
                for row in g.chunks_exact(cols) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
        }
        Op::AddScalar(a) => {
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::MatMul(a, b) => {
            // out[n×m] = a[n×k] · b[k×m]
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            let (ad, bd) = (av.data(), bv.data());
            accumulate(grads, *a, n * k, |d| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        d[i * k + p] += dot(grow, brow);
                    }
                }
            });
            accumulate(grads, *b, k * m, |d| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        if a_ip != 0.0 {
                            axpy(a_ip, grow, &mut d[p * m..(p + 1) * m]);
                        }
                    }
                }
            });
        }
        Op::MatMulT(a, b) => {
            // out[n×m] = a[n×k] · b[m×k]ᵀ
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.rows(), av.cols(), bv.rows());
            let (ad, bd) = (av.data(), bv.data());
            accumulate(grads, *a, n * k, |d| {
                for i in 0..n {
                    let drow = &mut d[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            axpy(gij, &bd[j * k..(j + 1) * k], drow);
                        }
                    }
                }
            });
            accumulate(grads, *b, m * k, |d| {
                for i in 0..n {
                    let arow = &ad[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            axpy(gij, arow, &mut d[j * k..(j + 1) * k]);
                        }
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let out = node.value.data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            });
        }
        Op::Relu(a) => {
            let inp = val(*a).data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    if inp[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Log(a) => {
            let inp = val(*a).data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] / inp[i];
                }
            });
        }
        Op::Exp(a) => {
            let out = node.value.data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * out[i];
                }
            });
        }
        Op::Square(a) => {
            let inp = val(*a).data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += 2.0 * g[i] * inp[i];
                }
            });
        }
        Op::Abs(a) => {
            let inp = val(*a).data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * sign(inp[i]);
                }
            });
        }
        Op::Recip(a) => {
            let out = node.value.data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    d[i] -= g[i] * out[i] * out[i];
                }
            });
        }
        Op::ClampMin(a, floor) => {
            let inp = val(*a).data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    if inp[i] >= *floor {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, n, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            let share = g[0] / n as f64;
            accumulate(grads, *a, n, |d| d.iter_mut().for_each(|d| *d += share));
        }
        Op::Gather(a, idx) => {
            let n = val(*a).len();
            accumulate(grads, *a, n, |d| {
                for (gi, &src) in g.iter().zip(idx) {
                    d[src] += gi;
                }
            });
        }
        Op::PairwiseSqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, m, k) = (av.rows(), bv.rows(), av.cols());
            let (ad, bd) = (av.data(), bv.data());
            let mut da = vec![0.0; n * k];
            let mut db = vec![0.0; m * k];
            for i in 0..n {
                for j in 0..m {
                    let gij = g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        let diff = 2.0 * gij * (ad[i * k + c] - bd[j * k + c]);
                        da[i * k + c] += diff;
                        db[j * k + c] -= diff;
                    }
                }
            }
            accumulate(grads, *a, n * k, |d| d.iter_mut().zip(&da).for_each(|(d, x)| *d += x));
            accumulate(grads, *b, m * k, |d| d.iter_mut().zip(&db).for_each(|(d, x)| *d += x));
        }
        Op::SliceCols(a, start, end) => {
            let av = val(*a);
            let (rows, cols) = (av.rows(), av.cols());
            let width = end - start;
            accumulate(grads, *a, rows * cols, |d| {
                for r in 0..rows {
                    for c in 0..width {
                        d[r * cols + start + c] += g[r * width + c];
                    }
                }
            });
        }
        Op::SoftmaxXent(a, labels) => {
            let av = val(*a);
            let (rows, cols) = (av.rows(), av.cols());
            let probs = softmax_rows(av.data(), cols);
            let share = g[0] / rows as f64;
            accumulate(grads, *a, rows * cols, |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                        d[r * cols + c] += share * (probs[r * cols + c] - onehot);
                    }
                }
            });
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

pub(crate) fn matmul_t(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Snapshot of the node's current value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.value_of(self.id).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.id);
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.data()[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.tape.value_of(self.id).map(f);
        self.tape.push(out, op)
    }

    fn zip(self, other: Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            assert_eq!(a.shape(), b.shape(), "shape mismatch in {name}");
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(out, op)
    }

    /// Adds `bias[m]` to every row of `self[n×m]`.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(bias.id);
            let cols = a.cols();
            assert_eq!(b.len(), cols, "add_row: bias length {} vs {} columns", b.len(), cols);
            let mut data = a.data().to_vec();
            for row in data.chunks_exact_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(x, b)| *x += b);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(out, Op::AddRow(self.id, bias.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `self[n×k] · rhs[k×m]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            assert_eq!(k, b.rows(), "matmul: {:?} · {:?}", a.shape(), b.shape());
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                let orow = &mut data[i * m..(i + 1) * m];
                for p in 0..k {
                    let a_ip = a.data()[i * k + p];
                    if a_ip != 0.0 {
                        axpy(a_ip, &b.data()[p * m..(p + 1) * m], orow);
                    }
                }
            }
            Tensor::from_parts(vec![n, m], data)
        };
        self.tape.push(out, Op::MatMul(self.id, rhs.id))
    }

    /// `self[n×k] · rhs[m×k]ᵀ`, the layout of an `out×in` weight matrix.
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            let (n, k, m) = (a.rows(), a.cols(), b.rows());
            assert_eq!(k, b.cols(), "matmul_t: {:?} · {:?}ᵀ", a.shape(), b.shape());
            Tensor::from_parts(vec![n, m], matmul_t(a.data(), n, k, b.data(), m))
        };
        self.tape.push(out, Op::MatMulT(self.id, rhs.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Natural log. A non-positive input is recorded as a domain error and
    /// surfaces from [`Tape::backward`].
    pub fn ln(self) -> Var<'t> {
        let bad = self.tape.value_of(self.id).data().iter().any(|&x| x <= 0.0);
        let out = self.unary(Op::Log(self.id), f64::ln);
        if bad && self.tape.domain_error.get().is_none() {
            self.tape.domain_error.set(Some(out.id));
        }
        out
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), f64::recip)
    }

    /// `max(x, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, floor), |x| x.max(floor))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.value_of(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let v = self.tape.value_of(self.id);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Flat gather: `out[i] = self.flat[index[i]]`.
    pub fn gather(self, index: Vec<usize>) -> Var<'t> {
        let out = {
            let v = self.tape.value_of(self.id);
            let data = index
                .iter()
                .map(|&i| {
                    assert!(i < v.len(), "gather index {i} out of range {}", v.len());
                    v.data()[i]
                })
                .collect::<Vec<_>>();
            Tensor::from_parts(vec![index.len()], data)
        };
        self.tape.push(out, Op::Gather(self.id, index))
    }

    /// `out[i, j] = ‖self_i − rhs_j‖²` for row sets `self[n×k]`, `rhs[m×k]`.
    pub fn pairwise_sq_dist(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(rhs.id);
            let (n, m, k) = (a.rows(), b.rows(), a.cols());
            assert_eq!(k, b.cols(), "pairwise_sq_dist: column mismatch");
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    data[i * m + j] = (0..k)
                        .map(|c| {
                            let d = a.data()[i * k + c] - b.data()[j * k + c];
                            d * d
                        })
                        .sum();
                }
            }
            Tensor::from_parts(vec![n, m], data)
        };
        self.tape.push(out, Op::PairwiseSqDist(self.id, rhs.id))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            let (rows, cols) = (a.rows(), a.cols());
            assert!(start < end && end <= cols, "slice_cols {start}..{end} of {cols}");
            let mut data = Vec::with_capacity(rows * (end - start));
            for row in a.data().chunks_exact(cols) {
                data.extend_from_slice(&row[start..end]);
            }
            Tensor::from_parts(vec![rows, end - start], data)
        };
        self.tape.push(out, Op::SliceCols(self.id, start, end))
    }

    /// Mean softmax cross-entropy of logit rows against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let loss = {
            let a = self.tape.value_of(self.id);
            let cols = a.cols();
            assert_eq!(a.rows(), labels.len(), "one label per logit row");
            let mut total = 0.0;
            for (row, &y) in a.data().chunks_exact(cols).zip(labels) {
                assert!(y < cols, "label {y} out of range {cols}");
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            total / labels.len() as f64
        };
        self.tape.push(Tensor::scalar(loss), Op::SoftmaxXent(self.id, labels.to_vec()))
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.zip(rhs, stringify!($method), Op::$variant(self.id, rhs.id), $f)
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = x * x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn log_derivative() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let g = tape.backward(x.ln()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5]);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let y = x.ln();
        let err = tape.backward(y.sum()).unwrap_err();
        assert!(matches!(err, DiffError::Domain { node } if node == y.id()));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let cases: Vec<(&str, fn(Var<'_>) -> Var<'_>, fn(f64) -> f64)> = vec![
            ("tanh", |v| v.tanh(), f64::tanh),
            ("exp", |v| v.exp(), f64::exp),
            ("abs", |v| v.abs(), f64::abs),
            ("recip", |v| v.recip(), f64::recip),
            ("square", |v| v.square(), |x| x * x),
        ];
        for (name, op, f) in cases {
            for x0 in [-1.3, 0.4, 2.2] {
                let tape = Tape::new();
                let x = tape.scalar(x0);
                let g = tape.backward(op(x)).unwrap().get(x).unwrap()[0];
                let want = fd(f, x0);
                assert!((g - want).abs() < 1e-6, "{name} at {x0}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn gather_accumulates_repeated_indices() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = x.gather(vec![2, 0, 2]).sum();
        assert_eq!(y.item(), 7.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0]));
        let bt = tape.leaf(Tensor::matrix(2, 3, vec![0.5, 2.0, 1.0, -1.0, 0.0, 1.0]));
        let p = a.matmul(b);
        let q = a.matmul_t(bt);
        assert_eq!(p.value(), q.value());
        assert_eq!(p.value().data(), &[7.5, 2.0, 18.0, 2.0]);
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 2.0]));
        let g = tape.backward(x.clamp_min(1e-9).sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        let y = tape.scalar(2.0);
        let g = tape.backward(x.square()).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zeros(y), vec![0.0]);
    }
}
