//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Operations append nodes to a tape in creation order, so inputs always
//! precede their consumers and the graph is acyclic by construction. A
//! backward pass sweeps the tape in reverse from a scalar loss, computing
//! vector-Jacobian products per op; gradients accumulate additively into
//! per-node storage, so a second backward without a reset doubles them.
//!
//! Tensors are strictly 2-D (rows x cols, row-major). Batch and sequence
//! dimensions are handled by explicit row blocking at call sites. The graph
//! is rebuilt every training step; nothing is retained across steps.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;

/// Handle to a node on the tape.
pub type NodeId = usize;

/// Degenerate-row threshold for `l2_normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    SoftmaxRows(NodeId, S),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    L2NormalizeRows(NodeId),
    RmsNorm { x: NodeId, gain: NodeId },
    Silu(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    KlDiv(NodeId, NodeId),
}

struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    /// Accumulated gradient; empty means "all zero, never touched".
    grad: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
    /// Saved per-row activations some backward rules need (norms, inv-rms).
    aux: Vec<S>,
}

struct GraphInner<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Shared handle to a tape. Cloning is cheap; a graph and its tensors are
/// confined to one worker.
pub struct Graph<S: Scalar> {
    inner: Rc<RefCell<GraphInner<S>>>,
}

impl<S: Scalar> Clone for Graph<S> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A 2-D tensor participating in a [`Graph`].
pub struct Tensor<S: Scalar> {
    graph: Graph<S>,
    id: NodeId,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { graph: self.graph.clone(), id: self.id, rows: self.rows, cols: self.cols }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("node", &self.id)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("values", &self.values())
            .finish()
    }
}

fn assert_finite<S: Scalar>(what: &str, values: &[S]) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "{what} produced a non-finite value"
    );
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new() })) }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<S>, requires_grad: bool, op: Op<S>, aux: Vec<S>) -> Tensor<S> {
        debug_assert_eq!(values.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, values, grad: Vec::new(), requires_grad, op, aux });
        Tensor { graph: self.clone(), id, rows, cols }
    }

    /// New leaf tensor from row-major values.
    pub fn tensor(&self, rows: usize, cols: usize, values: &[S], requires_grad: bool) -> Tensor<S> {
        assert_eq!(
            values.len(),
            rows * cols,
            "tensor expects {rows}x{cols}={} values, got {}",
            rows * cols,
            values.len()
        );
        assert!(values.iter().all(|v| v.is_finite()), "tensor rejects non-finite input values");
        self.push(rows, cols, values.to_vec(), requires_grad, Op::Leaf, Vec::new())
    }

    /// Constant leaf (no gradient).
    pub fn constant(&self, rows: usize, cols: usize, values: &[S]) -> Tensor<S> {
        self.tensor(rows, cols, values, false)
    }

    /// 1x1 constant.
    pub fn scalar(&self, v: S) -> Tensor<S> {
        self.tensor(1, 1, &[v], false)
    }

    pub fn zeros(&self, rows: usize, cols: usize, requires_grad: bool) -> Tensor<S> {
        self.push(rows, cols, vec![S::ZERO; rows * cols], requires_grad, Op::Leaf, Vec::new())
    }

    /// Reset every accumulated gradient on the tape to zero.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad.clear();
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn node_id(&self) -> NodeId {
        self.id
    }

    /// Handle to the graph this tensor lives on.
    pub fn graph(&self) -> Graph<S> {
        self.graph.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Row-major copy of the values.
    pub fn values(&self) -> Vec<S> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn value_at(&self, r: usize, c: usize) -> S {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of range for {}x{}", self.rows, self.cols);
        self.graph.inner.borrow().nodes[self.id].values[r * self.cols + c]
    }

    /// Scalar view of a 1x1 tensor.
    pub fn item(&self) -> S {
        assert_eq!((self.rows, self.cols), (1, 1), "item() requires a 1x1 tensor, got {}x{}", self.rows, self.cols);
        self.graph.inner.borrow().nodes[self.id].values[0]
    }

    /// Accumulated gradient (zeros if backward never reached this node).
    pub fn grad(&self) -> Vec<S> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.grad.is_empty() {
            vec![S::ZERO; node.rows * node.cols]
        } else {
            node.grad.clone()
        }
    }

    /// Overwrite the values of a leaf in place (shape fixed at creation).
    pub fn set_values(&self, values: &[S]) {
        let mut inner = self.graph.inner.borrow_mut();
        let node = &mut inner.nodes[self.id];
        assert!(matches!(node.op, Op::Leaf), "set_values only applies to leaf tensors");
        assert_eq!(values.len(), node.values.len(), "set_values shape mismatch");
        node.values.copy_from_slice(values);
    }

    fn graph_of(&self, other: &Tensor<S>) -> Graph<S> {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
        self.graph.clone()
    }

    /// Matrix product `self[r x k] . other[k x c]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let g = self.graph_of(other);
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} . {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (r, k, c) = (self.rows, self.cols, other.cols);
        let inner = g.inner.borrow();
        let a = &inner.nodes[self.id].values;
        let b = &inner.nodes[other.id].values;
        let out = dense_matmul(a, b, r, k, c);
        let rg = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        assert_finite("matmul", &out);
        g.push(r, c, out, rg, Op::Matmul(self.id, other.id), Vec::new())
    }

    pub fn transpose(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = node.values[i * c + j];
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        g.push(c, r, out, rg, Op::Transpose(self.id), Vec::new())
    }

    fn binary(&self, other: &Tensor<S>, name: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Tensor<S> {
        let g = self.graph_of(other);
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "{name} shape mismatch: {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let inner = g.inner.borrow();
        let a = &inner.nodes[self.id].values;
        let b = &inner.nodes[other.id].values;
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let rg = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        assert_finite(name, &out);
        g.push(self.rows, self.cols, out, rg, op, Vec::new())
    }

    /// Pointwise sum.
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    /// Pointwise difference.
    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Scalar broadcast multiply.
    pub fn scale(&self, c: S) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<S> = node.values.iter().map(|&x| x * c).collect();
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("scale", &out);
        g.push(self.rows, self.cols, out, rg, Op::Scale(self.id, c), Vec::new())
    }

    /// Row-wise temperature softmax, computed with max subtraction.
    pub fn softmax_rows(&self, temperature: S) -> Tensor<S> {
        assert!(temperature > S::ZERO, "softmax_rows requires temperature > 0");
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        assert!(c >= 1, "softmax_rows requires at least one column");
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            let row = &node.values[i * c..(i + 1) * c];
            softmax_into(row, temperature, &mut out[i * c..(i + 1) * c]);
        }
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("softmax_rows", &out);
        g.push(r, c, out, rg, Op::SoftmaxRows(self.id, temperature), Vec::new())
    }

    /// Row-wise log-softmax (unit temperature; scale inputs beforehand).
    pub fn log_softmax_rows(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        assert!(c >= 1, "log_softmax_rows requires at least one column");
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            let row = &node.values[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("log_softmax_rows", &out);
        g.push(r, c, out, rg, Op::LogSoftmaxRows(self.id), Vec::new())
    }

    /// Row-wise log-sum-exp reduction to a column vector.
    pub fn logsumexp_rows(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        assert!(c >= 1, "logsumexp_rows requires at least one column");
        let mut out = vec![S::ZERO; r];
        for i in 0..r {
            out[i] = log_sum_exp(&node.values[i * c..(i + 1) * c]);
        }
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("logsumexp_rows", &out);
        g.push(r, 1, out, rg, Op::LogSumExpRows(self.id), Vec::new())
    }

    /// Arithmetic mean across rows, yielding a `1 x cols` tensor.
    pub fn mean_rows(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        assert!(r >= 1, "mean_rows rejects an empty tensor");
        let inv = S::ONE / S::from_f64(r as f64);
        let mut out = vec![S::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += node.values[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("mean_rows", &out);
        g.push(1, c, out, rg, Op::MeanRows(self.id), Vec::new())
    }

    /// Sum of all entries, yielding a 1x1 tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let total: S = node.values.iter().copied().sum();
        let rg = node.requires_grad;
        drop(inner);
        g.push(1, 1, vec![total], rg, Op::SumAll(self.id), Vec::new())
    }

    /// Scale every row to unit L2 norm. Rejects rows with norm below 1e-12.
    pub fn l2_normalize_rows(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        let mut out = vec![S::ZERO; r * c];
        let mut norms = vec![S::ZERO; r];
        for i in 0..r {
            let row = &node.values[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            assert!(
                norm.to_f64() >= NORM_EPS,
                "l2_normalize_rows rejects degenerate row {i} with norm {:e}",
                norm.to_f64()
            );
            norms[i] = norm;
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        assert_finite("l2_normalize_rows", &out);
        g.push(r, c, out, rg, Op::L2NormalizeRows(self.id), norms)
    }

    /// Row-wise RMS normalization with a learned `1 x cols` gain.
    pub fn rms_norm(&self, gain: &Tensor<S>, eps: S) -> Tensor<S> {
        let g = self.graph_of(gain);
        assert_eq!(
            (gain.rows, gain.cols),
            (1, self.cols),
            "rms_norm gain must be 1x{}, got {}x{}",
            self.cols, gain.rows, gain.cols
        );
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let gvals = &inner.nodes[gain.id].values;
        let (r, c) = (node.rows, node.cols);
        let inv_c = S::ONE / S::from_f64(c as f64);
        let mut out = vec![S::ZERO; r * c];
        let mut inv_rms = vec![S::ZERO; r];
        for i in 0..r {
            let row = &node.values[i * c..(i + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_c;
            let inv = S::ONE / (ms + eps).sqrt();
            inv_rms[i] = inv;
            for j in 0..c {
                out[i * c + j] = row[j] * inv * gvals[j];
            }
        }
        let rg = node.requires_grad || inner.nodes[gain.id].requires_grad;
        drop(inner);
        assert_finite("rms_norm", &out);
        g.push(r, c, out, rg, Op::RmsNorm { x: self.id, gain: gain.id }, inv_rms)
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let out: Vec<S> = node.values.iter().map(|&x| x * sigmoid(x)).collect();
        let (rows, cols, rg) = (node.rows, node.cols, node.requires_grad);
        drop(inner);
        assert_finite("silu", &out);
        g.push(rows, cols, out, rg, Op::Silu(self.id), Vec::new())
    }

    /// Select rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        for &i in indices {
            assert!(i < r, "gather_rows index {i} out of range for {r} rows");
        }
        let mut out = vec![S::ZERO; indices.len() * c];
        for (k, &i) in indices.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&node.values[i * c..(i + 1) * c]);
        }
        let rg = node.requires_grad;
        drop(inner);
        g.push(indices.len(), c, out, rg, Op::GatherRows(self.id, indices.to_vec()), Vec::new())
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<S> {
        let g = self.graph.clone();
        let inner = g.inner.borrow();
        let node = &inner.nodes[self.id];
        let (r, c) = (node.rows, node.cols);
        assert!(start + len <= c, "slice_cols [{start},{}) out of range for {c} columns", start + len);
        let mut out = vec![S::ZERO; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&node.values[i * c + start..i * c + start + len]);
        }
        let rg = node.requires_grad;
        drop(inner);
        g.push(r, len, out, rg, Op::SliceCols { x: self.id, start, len }, Vec::new())
    }

    /// Leaf copy of the values with gradient flow cut.
    pub fn detach(&self) -> Tensor<S> {
        let values = self.values();
        self.graph.push(self.rows, self.cols, values, false, Op::Leaf, Vec::new())
    }

    /// Backpropagate from a 1x1 loss, accumulating into `grad` of every
    /// reachable tensor that requires gradients.
    pub fn backward(&self) {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "backward requires a scalar (1x1) loss, got {}x{}",
            self.rows, self.cols
        );
        let mut inner = self.graph.inner.borrow_mut();
        backward_sweep(&mut inner, self.id);
    }
}

/// Stack tensors vertically; all parts must share a column count.
pub fn concat_rows<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty(), "concat_rows requires at least one part");
    let g = parts[0].graph.clone();
    let c = parts[0].cols;
    let mut total_rows = 0;
    for p in parts {
        assert!(Rc::ptr_eq(&g.inner, &p.graph.inner), "tensors belong to different graphs");
        assert_eq!(p.cols, c, "concat_rows column mismatch: {} vs {}", c, p.cols);
        total_rows += p.rows;
    }
    let inner = g.inner.borrow();
    let mut out = Vec::with_capacity(total_rows * c);
    let mut rg = false;
    for p in parts {
        out.extend_from_slice(&inner.nodes[p.id].values);
        rg |= inner.nodes[p.id].requires_grad;
    }
    drop(inner);
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    g.push(total_rows, c, out, rg, Op::ConcatRows(ids), Vec::new())
}

/// Stack tensors horizontally; all parts must share a row count.
pub fn concat_cols<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty(), "concat_cols requires at least one part");
    let g = parts[0].graph.clone();
    let r = parts[0].rows;
    let mut total_cols = 0;
    for p in parts {
        assert!(Rc::ptr_eq(&g.inner, &p.graph.inner), "tensors belong to different graphs");
        assert_eq!(p.rows, r, "concat_cols row mismatch: {} vs {}", r, p.rows);
        total_cols += p.cols;
    }
    let inner = g.inner.borrow();
    let mut out = vec![S::ZERO; r * total_cols];
    let mut rg = false;
    let mut offset = 0;
    for p in parts {
        let pv = &inner.nodes[p.id].values;
        for i in 0..r {
            out[i * total_cols + offset..i * total_cols + offset + p.cols]
                .copy_from_slice(&pv[i * p.cols..(i + 1) * p.cols]);
        }
        offset += p.cols;
        rg |= inner.nodes[p.id].requires_grad;
    }
    drop(inner);
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    g.push(r, total_cols, out, rg, Op::ConcatCols(ids), Vec::new())
}

/// KL divergence `sum p_i ln(p_i / q_i)` with the `0 ln 0 = 0` convention.
///
/// Both operands must be entrywise nonnegative and `q` strictly positive
/// wherever `p` is positive. The output is 1x1.
pub fn kl_div<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Tensor<S> {
    let g = p.graph_of(q);
    assert_eq!(
        (p.rows, p.cols),
        (q.rows, q.cols),
        "kl_div shape mismatch: {}x{} vs {}x{}",
        p.rows, p.cols, q.rows, q.cols
    );
    let inner = g.inner.borrow();
    let pv = &inner.nodes[p.id].values;
    let qv = &inner.nodes[q.id].values;
    let mut total = S::ZERO;
    for (i, (&pi, &qi)) in pv.iter().zip(qv.iter()).enumerate() {
        assert!(pi >= S::ZERO && qi >= S::ZERO, "kl_div rejects negative entry at {i}");
        if pi > S::ZERO {
            assert!(qi > S::ZERO, "kl_div requires q > 0 where p > 0 (entry {i})");
            total += pi * (pi / qi).ln();
        }
    }
    let rg = inner.nodes[p.id].requires_grad || inner.nodes[q.id].requires_grad;
    drop(inner);
    assert!(total.is_finite(), "kl_div produced a non-finite value");
    g.push(1, 1, vec![total], rg, Op::KlDiv(p.id, q.id), Vec::new())
}

/// Plain row-major matrix product; the workhorse behind `matmul`.
pub(crate) fn dense_matmul<S: Scalar>(a: &[S], b: &[S], r: usize, k: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            for j in 0..c {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn softmax_into<S: Scalar>(row: &[S], temperature: S, out: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = S::ZERO;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = ((v - max) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = S::ZERO;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

fn ensure_grad<S: Scalar>(grad: &mut Vec<S>, len: usize) -> &mut [S] {
    if grad.is_empty() {
        grad.resize(len, S::ZERO);
    }
    grad
}

/// Per-call downstream gradient buffers; persistent `grad` storage only
/// receives the finished sums, so repeated backward calls accumulate
/// exactly additively.
fn backward_sweep<S: Scalar>(inner: &mut GraphInner<S>, loss_id: NodeId) {
    let n = inner.nodes.len();
    // Mark nodes that can receive gradient flow from the loss.
    let mut reachable = vec![false; n];
    if !inner.nodes[loss_id].requires_grad {
        return;
    }
    reachable[loss_id] = true;
    for id in (0..=loss_id).rev() {
        if !reachable[id] {
            continue;
        }
        let node = &inner.nodes[id];
        visit_inputs(&node.op, |input| {
            if inner.nodes[input].requires_grad {
                reachable[input] = true;
            }
        });
    }

    let mut flow: Vec<Vec<S>> = vec![Vec::new(); n];
    flow[loss_id] = vec![S::ONE];

    for id in (0..=loss_id).rev() {
        if !reachable[id] || flow[id].is_empty() {
            continue;
        }
        let dy = std::mem::take(&mut flow[id]);
        propagate(inner, id, &dy, &mut flow, &reachable);
        // Fold this sweep's flow into the persistent accumulator.
        let node = &mut inner.nodes[id];
        let len = node.rows * node.cols;
        let acc = ensure_grad(&mut node.grad, len);
        for (a, d) in acc.iter_mut().zip(dy.iter()) {
            *a += *d;
        }
        assert_finite("backward", acc);
    }
}

fn visit_inputs<S: Scalar>(op: &Op<S>, mut f: impl FnMut(NodeId)) {
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::KlDiv(a, b) => {
            f(*a);
            f(*b);
        }
        Op::RmsNorm { x, gain, .. } => {
            f(*x);
            f(*gain);
        }
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::SoftmaxRows(x, _)
        | Op::LogSoftmaxRows(x)
        | Op::LogSumExpRows(x)
        | Op::MeanRows(x)
        | Op::SumAll(x)
        | Op::L2NormalizeRows(x)
        | Op::Silu(x)
        | Op::GatherRows(x, _)
        | Op::SliceCols { x, .. } => f(*x),
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
            for &p in parts {
                f(p);
            }
        }
    }
}

fn add_into<S: Scalar>(flow: &mut Vec<S>, len: usize, f: impl Fn(usize) -> S) {
    if flow.is_empty() {
        flow.resize(len, S::ZERO);
    }
    for (i, slot) in flow.iter_mut().enumerate() {
        *slot += f(i);
    }
}

#[allow(clippy::needless_range_loop)]
fn propagate<S: Scalar>(
    inner: &GraphInner<S>,
    id: NodeId,
    dy: &[S],
    flow: &mut [Vec<S>],
    reachable: &[bool],
) {
    let node = &inner.nodes[id];
    let wants = |i: NodeId| reachable[i];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a_id, b_id) => {
            let a = &inner.nodes[*a_id];
            let b = &inner.nodes[*b_id];
            let (r, k, c) = (a.rows, a.cols, b.cols);
            if wants(*a_id) {
                // dA = dC . B^T
                let da = &mut flow[*a_id];
                if da.is_empty() {
                    da.resize(r * k, S::ZERO);
                }
                for i in 0..r {
                    for p in 0..k {
                        let mut s = S::ZERO;
                        let brow = &b.values[p * c..(p + 1) * c];
                        let drow = &dy[i * c..(i + 1) * c];
                        for j in 0..c {
                            s += drow[j] * brow[j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if wants(*b_id) {
                // dB = A^T . dC
                let db = &mut flow[*b_id];
                if db.is_empty() {
                    db.resize(k * c, S::ZERO);
                }
                for i in 0..r {
                    let arow = &a.values[i * k..(i + 1) * k];
                    let drow = &dy[i * c..(i + 1) * c];
                    for p in 0..k {
                        let aip = arow[p];
                        let dbrow = &mut db[p * c..(p + 1) * c];
                        for j in 0..c {
                            dbrow[j] += aip * drow[j];
                        }
                    }
                }
            }
        }
        Op::Transpose(x_id) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let (r, c) = (x.rows, x.cols);
                add_into(&mut flow[*x_id], r * c, |i| {
                    let (row, col) = (i / c, i % c);
                    dy[col * r + row]
                });
            }
        }
        Op::Add(a_id, b_id) => {
            for &i in [a_id, b_id].iter() {
                if wants(*i) {
                    add_into(&mut flow[*i], dy.len(), |j| dy[j]);
                }
            }
        }
        Op::Sub(a_id, b_id) => {
            if wants(*a_id) {
                add_into(&mut flow[*a_id], dy.len(), |j| dy[j]);
            }
            if wants(*b_id) {
                add_into(&mut flow[*b_id], dy.len(), |j| -dy[j]);
            }
        }
        Op::Mul(a_id, b_id) => {
            if wants(*a_id) {
                let b = &inner.nodes[*b_id].values;
                add_into(&mut flow[*a_id], dy.len(), |j| dy[j] * b[j]);
            }
            if wants(*b_id) {
                let a = &inner.nodes[*a_id].values;
                add_into(&mut flow[*b_id], dy.len(), |j| dy[j] * a[j]);
            }
        }
        Op::Scale(x_id, c) => {
            if wants(*x_id) {
                let c = *c;
                add_into(&mut flow[*x_id], dy.len(), |j| dy[j] * c);
            }
        }
        Op::SoftmaxRows(x_id, temperature) => {
            if wants(*x_id) {
                let y = &node.values;
                let (r, c) = (node.rows, node.cols);
                let inv_t = S::ONE / *temperature;
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dot: S = yr.iter().zip(dr.iter()).map(|(&yv, &dv)| yv * dv).sum();
                    for j in 0..c {
                        dx[i * c + j] += yr[j] * (dr[j] - dot) * inv_t;
                    }
                }
            }
        }
        Op::LogSoftmaxRows(x_id) => {
            if wants(*x_id) {
                let y = &node.values;
                let (r, c) = (node.rows, node.cols);
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dsum: S = dr.iter().copied().sum();
                    for j in 0..c {
                        dx[i * c + j] += dr[j] - yr[j].exp() * dsum;
                    }
                }
            }
        }
        Op::LogSumExpRows(x_id) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let (r, c) = (x.rows, x.cols);
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    let lse = node.values[i];
                    for j in 0..c {
                        dx[i * c + j] += dy[i] * (x.values[i * c + j] - lse).exp();
                    }
                }
            }
        }
        Op::MeanRows(x_id) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let (r, c) = (x.rows, x.cols);
                let inv = S::ONE / S::from_f64(r as f64);
                add_into(&mut flow[*x_id], r * c, |i| dy[i % c] * inv);
            }
        }
        Op::SumAll(x_id) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let d = dy[0];
                add_into(&mut flow[*x_id], x.rows * x.cols, |_| d);
            }
        }
        Op::L2NormalizeRows(x_id) => {
            if wants(*x_id) {
                let y = &node.values;
                let norms = &node.aux;
                let (r, c) = (node.rows, node.cols);
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dot: S = yr.iter().zip(dr.iter()).map(|(&yv, &dv)| yv * dv).sum();
                    let inv_n = S::ONE / norms[i];
                    for j in 0..c {
                        dx[i * c + j] += (dr[j] - yr[j] * dot) * inv_n;
                    }
                }
            }
        }
        Op::RmsNorm { x: x_id, gain: gain_id } => {
            let x = &inner.nodes[*x_id];
            let gvals = &inner.nodes[*gain_id].values;
            let inv_rms = &node.aux;
            let (r, c) = (x.rows, x.cols);
            let inv_c = S::ONE / S::from_f64(c as f64);
            if wants(*x_id) {
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    let xr = &x.values[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let inv = inv_rms[i];
                    let mut dot = S::ZERO;
                    for j in 0..c {
                        dot += dr[j] * gvals[j] * xr[j];
                    }
                    let coef = dot * inv * inv * inv * inv_c;
                    for j in 0..c {
                        dx[i * c + j] += dr[j] * gvals[j] * inv - xr[j] * coef;
                    }
                }
            }
            if wants(*gain_id) {
                let dg = &mut flow[*gain_id];
                if dg.is_empty() {
                    dg.resize(c, S::ZERO);
                }
                for i in 0..r {
                    let xr = &x.values[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let inv = inv_rms[i];
                    for j in 0..c {
                        dg[j] += dr[j] * xr[j] * inv;
                    }
                }
            }
        }
        Op::Silu(x_id) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id].values;
                add_into(&mut flow[*x_id], dy.len(), |j| {
                    let s = sigmoid(x[j]);
                    dy[j] * s * (S::ONE + x[j] * (S::ONE - s))
                });
            }
        }
        Op::GatherRows(x_id, indices) => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let (r, c) = (x.rows, x.cols);
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += dy[k * c + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let c = node.cols;
            let mut offset = 0;
            for &p in parts {
                let pr = inner.nodes[p].rows;
                if wants(p) {
                    let dp = &mut flow[p];
                    if dp.is_empty() {
                        dp.resize(pr * c, S::ZERO);
                    }
                    for (slot, &d) in dp.iter_mut().zip(dy[offset * c..(offset + pr) * c].iter()) {
                        *slot += d;
                    }
                }
                offset += pr;
            }
        }
        Op::SliceCols { x: x_id, start, len } => {
            if wants(*x_id) {
                let x = &inner.nodes[*x_id];
                let (r, c) = (x.rows, x.cols);
                let dx = &mut flow[*x_id];
                if dx.is_empty() {
                    dx.resize(r * c, S::ZERO);
                }
                for i in 0..r {
                    for j in 0..*len {
                        dx[i * c + start + j] += dy[i * len + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total_c) = (node.rows, node.cols);
            let mut offset = 0;
            for &p in parts {
                let pc = inner.nodes[p].cols;
                if wants(p) {
                    let dp = &mut flow[p];
                    if dp.is_empty() {
                        dp.resize(r * pc, S::ZERO);
                    }
                    for i in 0..r {
                        for j in 0..pc {
                            dp[i * pc + j] += dy[i * total_c + offset + j];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::KlDiv(p_id, q_id) => {
            let p = &inner.nodes[*p_id].values;
            let q = &inner.nodes[*q_id].values;
            let d = dy[0];
            if wants(*p_id) {
                add_into(&mut flow[*p_id], p.len(), |j| {
                    if p[j] > S::ZERO {
                        d * ((p[j] / q[j]).ln() + S::ONE)
                    } else {
                        S::ZERO
                    }
                });
            }
            if wants(*q_id) {
                add_into(&mut flow[*q_id], q.len(), |j| {
                    if p[j] > S::ZERO {
                        -d * p[j] / q[j]
                    } else {
                        S::ZERO
                    }
                });
            }
        }
    }
}
