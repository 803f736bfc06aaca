//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape is define-by-run: every operation computes its value eagerly and
//! appends a node. [`backward`] emits the adjoint computation as *new tape
//! nodes* built from the same elementary operations, so gradients are
//! themselves differentiable — a gradient-shaped quantity (such as a discrete
//! gradient assembled from transposed layer Jacobians) can sit inside a loss
//! and receive parameter gradients like any other value.
//!
//! Tapes are single-owner during recording; parallelism belongs above this
//! module, one tape per trajectory or batch.

use std::sync::Arc;

use crate::tensor::{
    conv1d_periodic, conv1d_periodic_kernel_grad, kernel_transpose_flip, stencil_periodic,
    Precision, Result, Tensor, TensorError,
};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs are earlier node ids; auxiliary payloads
/// (masks, stencil weights, static shapes) are stored inline.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `mul * x + add`, elementwise with scalar constants.
    Affine {
        x: NodeId,
        mul: f64,
        add: f64,
    },
    Matmul(NodeId, NodeId),
    /// `aᵀ · b`
    MatmulTN(NodeId, NodeId),
    /// `a · bᵀ`
    MatmulNT(NodeId, NodeId),
    /// Add a column vector to every column of a matrix (or vector + vector).
    AddCol {
        x: NodeId,
        col: NodeId,
    },
    /// Sum over columns: `[m,n] → [m]`.
    SumCols(NodeId),
    /// Repeat a column vector across `n_cols` columns: `[m] → [m,n]`.
    BroadcastCols {
        col: NodeId,
        n_cols: usize,
    },
    Tanh(NodeId),
    /// Sum of all entries, producing a rank-0 scalar.
    ReduceSum(NodeId),
    /// Fill `shape` with a scalar node's value.
    BroadcastScalar {
        x: NodeId,
        shape: Vec<usize>,
    },
    /// Per-block sums along the last axis: `[.., fields*len] → [.., fields]`.
    SegmentSum {
        x: NodeId,
        fields: usize,
    },
    /// Repeat each entry `reps` times along the last axis.
    SegmentBroadcast {
        x: NodeId,
        reps: usize,
    },
    /// Entrywise branch; the mask is data, not a differentiable input.
    Select {
        mask: Arc<Vec<bool>>,
        a: NodeId,
        b: NodeId,
    },
    /// Rows `[start, start+len)` of a matrix or vector.
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Scatter rows into a zero tensor of `rows` rows (adjoint of SliceRows).
    PadRows {
        x: NodeId,
        start: usize,
        rows: usize,
    },
    /// Stack two tensors along the first axis.
    ConcatRows(NodeId, NodeId),
    /// Periodic cross-correlation with a learnable kernel `[c_out,c_in,k]`.
    Conv1d {
        kernel: NodeId,
        x: NodeId,
        fields: usize,
    },
    /// Kernel gradient of `Conv1d`: correlates input with upstream gradient.
    Conv1dKernelGrad {
        x: NodeId,
        g: NodeId,
        k: usize,
        fields: usize,
    },
    /// Swap kernel channel axes and reverse taps (self-inverse permutation).
    KernelTransposeFlip(NodeId),
    /// Fixed-coefficient periodic stencil (non-learnable linear operator).
    Stencil {
        x: NodeId,
        weights: Arc<Vec<f64>>,
        transposed: bool,
        fields: usize,
    },
    /// Same data, different shape.
    Reshape {
        x: NodeId,
        shape: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulTN(a, b)
            | Op::MatmulNT(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::AddCol { x, col } => vec![*x, *col],
            Op::Select { a, b, .. } => vec![*a, *b],
            Op::Conv1d { kernel, x, .. } => vec![*kernel, *x],
            Op::Conv1dKernelGrad { x, g, .. } => vec![*x, *g],
            Op::Affine { x, .. }
            | Op::SumCols(x)
            | Op::BroadcastCols { col: x, .. }
            | Op::Tanh(x)
            | Op::ReduceSum(x)
            | Op::BroadcastScalar { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::SegmentBroadcast { x, .. }
            | Op::SliceRows { x, .. }
            | Op::PadRows { x, .. }
            | Op::KernelTransposeFlip(x)
            | Op::Stencil { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording tape. Node values are available immediately after insertion.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Registers an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        if value.precision() != self.precision {
            return Err(TensorError::PrecisionMismatch);
        }
        Ok(self.push(Op::Leaf, value))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        let t = Tensor::scalar(v, self.precision);
        self.push(Op::Leaf, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(x).affine(mul, add);
        self.push(Op::Affine { x, mul, add }, v)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_tn(self.value(b))?;
        Ok(self.push(Op::MatmulTN(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatmulNT(a, b), v))
    }

    /// `x + col` with `col` broadcast across columns when `x` is a matrix.
    pub fn add_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let cv = self.value(col);
        let v = match (xv.shape(), cv.shape()) {
            ([m], [m2]) if m == m2 => xv.add(cv)?,
            ([m, n], [m2]) if m == m2 => {
                let (m, n) = (*m, *n);
                let mut out = xv.to_vec();
                let c = cv.as_slice();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += c[i];
                    }
                }
                Tensor::from_raw(vec![m, n], out, xv.precision())
            }
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "add_col {:?} + {:?}",
                    xv.shape(),
                    cv.shape()
                )))
            }
        };
        Ok(self.push(Op::AddCol { x, col }, v))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = match xv.shape() {
            [m, n] => {
                let (m, n) = (*m, *n);
                let d = xv.as_slice();
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += d[i * n + j];
                    }
                    out[i] = acc;
                }
                Tensor::from_raw(vec![m], out, xv.precision())
            }
            [m] => xv.reshaped(vec![*m])?,
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "sum_cols expects a matrix, got {:?}",
                    xv.shape()
                )))
            }
        };
        Ok(self.push(Op::SumCols(x), v))
    }

    pub fn broadcast_cols(&mut self, col: NodeId, n_cols: usize) -> Result<NodeId> {
        let cv = self.value(col);
        let m = match cv.shape() {
            [m] => *m,
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "broadcast_cols expects a vector, got {:?}",
                    cv.shape()
                )))
            }
        };
        let c = cv.as_slice();
        let mut out = vec![0.0; m * n_cols];
        for i in 0..m {
            for j in 0..n_cols {
                out[i * n_cols + j] = c[i];
            }
        }
        let v = Tensor::from_raw(vec![m, n_cols], out, cv.precision());
        Ok(self.push(Op::BroadcastCols { col, n_cols }, v))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).tanh();
        self.push(Op::Tanh(x), v)
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum(), self.precision);
        self.push(Op::ReduceSum(x), v)
    }

    pub fn broadcast_scalar(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_scalar() {
            return Err(TensorError::ShapeMismatch(
                "broadcast_scalar expects a rank-0 input".into(),
            ));
        }
        let v = Tensor::filled(&shape, xv.item(), xv.precision());
        Ok(self.push(Op::BroadcastScalar { x, shape }, v))
    }

    /// Per-block sums along the last axis. A `[r, fields*len]` matrix becomes
    /// `[r, fields]`; a `[fields*len]` vector becomes `[fields]`.
    pub fn segment_sum(&mut self, x: NodeId, fields: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, total, is_vec) = match xv.shape() {
            [n] => (1usize, *n, true),
            [r, n] => (*r, *n, false),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "segment_sum expects rank 1 or 2, got {:?}",
                    xv.shape()
                )))
            }
        };
        if fields == 0 || total % fields != 0 {
            return Err(TensorError::Invalid("bad field split".into()));
        }
        let len = total / fields;
        let d = xv.as_slice();
        let mut out = vec![0.0; rows * fields];
        for r in 0..rows {
            for f in 0..fields {
                let mut acc = 0.0;
                for i in 0..len {
                    acc += d[r * total + f * len + i];
                }
                out[r * fields + f] = acc;
            }
        }
        let shape = if is_vec { vec![fields] } else { vec![rows, fields] };
        let v = Tensor::from_raw(shape, out, xv.precision());
        Ok(self.push(Op::SegmentSum { x, fields }, v))
    }

    /// Repeat each entry `reps` times along the last axis (adjoint of
    /// [`Tape::segment_sum`]).
    pub fn segment_broadcast(&mut self, x: NodeId, reps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, fields, is_vec) = match xv.shape() {
            [n] => (1usize, *n, true),
            [r, n] => (*r, *n, false),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "segment_broadcast expects rank 1 or 2, got {:?}",
                    xv.shape()
                )))
            }
        };
        let d = xv.as_slice();
        let mut out = vec![0.0; rows * fields * reps];
        for r in 0..rows {
            for f in 0..fields {
                let v = d[r * fields + f];
                for i in 0..reps {
                    out[(r * fields + f) * reps + i] = v;
                }
            }
        }
        let shape = if is_vec {
            vec![fields * reps]
        } else {
            vec![rows, fields * reps]
        };
        let v = Tensor::from_raw(shape, out, xv.precision());
        Ok(self.push(Op::SegmentBroadcast { x, reps }, v))
    }

    /// Entrywise branch. Gradient flows only through the chosen branch; the
    /// mask itself is treated as non-differentiable.
    pub fn select(&mut self, mask: Arc<Vec<bool>>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::select(&mask, self.value(a), self.value(b))?;
        Ok(self.push(Op::Select { mask, a, b }, v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols, is_vec) = match xv.shape() {
            [n] => (*n, 1usize, true),
            [r, c] => (*r, *c, false),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "slice_rows expects rank 1 or 2, got {:?}",
                    xv.shape()
                )))
            }
        };
        if start + len > rows {
            return Err(TensorError::Invalid(format!(
                "slice [{},{}) out of {} rows",
                start,
                start + len,
                rows
            )));
        }
        let d = xv.as_slice();
        let out = d[start * cols..(start + len) * cols].to_vec();
        let shape = if is_vec { vec![len] } else { vec![len, cols] };
        let v = Tensor::from_raw(shape, out, xv.precision());
        Ok(self.push(Op::SliceRows { x, start, len }, v))
    }

    pub fn pad_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (len, cols, is_vec) = match xv.shape() {
            [n] => (*n, 1usize, true),
            [r, c] => (*r, *c, false),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "pad_rows expects rank 1 or 2, got {:?}",
                    xv.shape()
                )))
            }
        };
        if start + len > rows {
            return Err(TensorError::Invalid("pad target too small".into()));
        }
        let d = xv.as_slice();
        let mut out = vec![0.0; rows * cols];
        out[start * cols..(start + len) * cols].copy_from_slice(d);
        let shape = if is_vec { vec![rows] } else { vec![rows, cols] };
        let v = Tensor::from_raw(shape, out, xv.precision());
        Ok(self.push(Op::PadRows { x, start, rows }, v))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let v = match (av.shape(), bv.shape()) {
            ([m], [n]) => {
                let mut out = av.to_vec();
                out.extend_from_slice(bv.as_slice());
                Tensor::from_raw(vec![m + n], out, av.precision())
            }
            ([m, c], [n, c2]) if c == c2 => {
                let mut out = av.to_vec();
                out.extend_from_slice(bv.as_slice());
                Tensor::from_raw(vec![m + n, *c], out, av.precision())
            }
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_rows {:?} + {:?}",
                    av.shape(),
                    bv.shape()
                )))
            }
        };
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    /// Periodic conv with a learnable kernel node. `fields` independent
    /// periodic blocks share the kernel (used for batched fields).
    pub fn conv1d(&mut self, kernel: NodeId, x: NodeId, fields: usize) -> Result<NodeId> {
        let v = conv1d_periodic(self.value(kernel), self.value(x), fields)?;
        Ok(self.push(Op::Conv1d { kernel, x, fields }, v))
    }

    pub fn conv1d_kernel_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        k: usize,
        fields: usize,
    ) -> Result<NodeId> {
        let v = conv1d_periodic_kernel_grad(self.value(x), self.value(g), k, fields)?;
        Ok(self.push(Op::Conv1dKernelGrad { x, g, k, fields }, v))
    }

    pub fn kernel_transpose_flip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernel_transpose_flip(self.value(x))?;
        Ok(self.push(Op::KernelTransposeFlip(x), v))
    }

    /// Fixed-coefficient periodic stencil (e.g. central differences).
    pub fn stencil(
        &mut self,
        x: NodeId,
        weights: Arc<Vec<f64>>,
        transposed: bool,
        fields: usize,
    ) -> Result<NodeId> {
        let v = stencil_periodic(self.value(x), &weights, transposed, fields)?;
        Ok(self.push(
            Op::Stencil {
                x,
                weights,
                transposed,
                fields,
            },
            v,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape.clone())?;
        Ok(self.push(Op::Reshape { x, shape }, v))
    }

    /// `w·x` treating a rank-1 `x` as a column; result keeps `x`'s rank.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.matmul(w, x)
    }

    /// Recomputes every node value from its inputs and checks bit equality.
    /// Leaves are taken as stored. Returns the index of the first mismatch.
    pub fn replay_check(&self) -> Option<usize> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed = match self.recompute(&node.op) {
                Some(v) => v,
                None => continue, // leaf
            };
            if recomputed.shape() != node.value.shape() {
                return Some(i);
            }
            let a = recomputed.as_slice();
            let b = node.value.as_slice();
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Some(i);
            }
        }
        None
    }

    fn recompute(&self, op: &Op) -> Option<Tensor> {
        let v = |id: &NodeId| self.value(*id);
        let out = match op {
            Op::Leaf => return None,
            Op::Add(a, b) => v(a).add(v(b)).unwrap(),
            Op::Sub(a, b) => v(a).sub(v(b)).unwrap(),
            Op::Mul(a, b) => v(a).mul(v(b)).unwrap(),
            Op::Div(a, b) => v(a).div(v(b)).unwrap(),
            Op::Affine { x, mul, add } => v(x).affine(*mul, *add),
            Op::Matmul(a, b) => v(a).matmul(v(b)).unwrap(),
            Op::MatmulTN(a, b) => v(a).matmul_tn(v(b)).unwrap(),
            Op::MatmulNT(a, b) => v(a).matmul_nt(v(b)).unwrap(),
            Op::Tanh(x) => v(x).tanh(),
            Op::ReduceSum(x) => Tensor::scalar(v(x).sum(), self.precision),
            Op::Select { mask, a, b } => Tensor::select(mask, v(a), v(b)).unwrap(),
            Op::Conv1d { kernel, x, fields } => {
                conv1d_periodic(v(kernel), v(x), *fields).unwrap()
            }
            Op::Conv1dKernelGrad { x, g, k, fields } => {
                conv1d_periodic_kernel_grad(v(x), v(g), *k, *fields).unwrap()
            }
            Op::KernelTransposeFlip(x) => kernel_transpose_flip(v(x)).unwrap(),
            Op::Stencil {
                x,
                weights,
                transposed,
                fields,
            } => stencil_periodic(v(x), weights, *transposed, *fields).unwrap(),
            Op::Reshape { x, shape } => v(x).reshaped(shape.clone()).unwrap(),
            // Structured ops replayed through a scratch tape for brevity.
            _ => {
                let mut scratch = Tape::new(self.precision);
                let op = op.clone();
                let mut remap = |id: NodeId, t: &mut Tape| t.leaf(self.value(id).clone()).unwrap();
                return Some(match op {
                    Op::AddCol { x, col } => {
                        let x2 = remap(x, &mut scratch);
                        let c2 = remap(col, &mut scratch);
                        let r = scratch.add_col(x2, c2).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::SumCols(x) => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.sum_cols(x2).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::BroadcastCols { col, n_cols } => {
                        let c2 = remap(col, &mut scratch);
                        let r = scratch.broadcast_cols(c2, n_cols).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::BroadcastScalar { x, shape } => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.broadcast_scalar(x2, shape).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::SegmentSum { x, fields } => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.segment_sum(x2, fields).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::SegmentBroadcast { x, reps } => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.segment_broadcast(x2, reps).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::SliceRows { x, start, len } => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.slice_rows(x2, start, len).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::PadRows { x, start, rows } => {
                        let x2 = remap(x, &mut scratch);
                        let r = scratch.pad_rows(x2, start, rows).unwrap();
                        scratch.value(r).clone()
                    }
                    Op::ConcatRows(a, b) => {
                        let a2 = remap(a, &mut scratch);
                        let b2 = remap(b, &mut scratch);
                        let r = scratch.concat_rows(a2, b2).unwrap();
                        scratch.value(r).clone()
                    }
                    _ => unreachable!(),
                });
            }
        };
        Some(out)
    }
}

/// Node → gradient-node mapping produced by [`backward`]. Gradients are tape
/// nodes of the same shape as the differentiated value.
pub struct GradMap {
    grads: Vec<Option<NodeId>>,
}

impl GradMap {
    /// Gradient node of `id`, if `root` depends on it.
    pub fn grad_node(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }

    /// Gradient value of `id`; zeros of the value's shape when absent.
    pub fn grad<'t>(&self, tape: &'t Tape, id: NodeId) -> Tensor {
        match self.grad_node(id) {
            Some(g) => tape.value(g).clone(),
            None => Tensor::zeros(tape.value(id).shape(), tape.precision()),
        }
    }
}

/// Reverse-mode sweep from a scalar `root`, restricted to nodes that lie on a
/// path from `root` to one of `targets`. The adjoints are emitted as new tape
/// nodes, so the returned gradients are themselves differentiable.
pub fn backward_for(tape: &mut Tape, root: NodeId, targets: &[NodeId]) -> Result<GradMap> {
    if !tape.value(root).is_scalar() {
        return Err(TensorError::Invalid(format!(
            "backward root must be scalar, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    let n = root.0 + 1;

    // feeds_target[i]: some target is reachable from i along input edges.
    let mut feeds_target = vec![false; n];
    for t in targets {
        if t.0 < n {
            feeds_target[t.0] = true;
        }
    }
    for i in 0..n {
        if feeds_target[i] {
            continue;
        }
        feeds_target[i] = tape.nodes[i]
            .op
            .inputs()
            .iter()
            .any(|inp| feeds_target[inp.0]);
    }

    // reached[i]: root depends on i.
    let mut reached = vec![false; n];
    reached[root.0] = true;
    for i in (0..n).rev() {
        if !reached[i] {
            continue;
        }
        for inp in tape.nodes[i].op.inputs() {
            reached[inp.0] = true;
        }
    }

    let relevant = |i: usize| reached[i] && feeds_target[i];

    let mut grads: Vec<Option<NodeId>> = vec![None; n];
    grads[root.0] = Some(tape.scalar(1.0));

    for i in (0..n).rev() {
        let g = match grads[i] {
            Some(g) if relevant(i) => g,
            _ => continue,
        };
        let op = tape.nodes[i].op.clone();
        let mut accumulate = |tape: &mut Tape,
                              grads: &mut Vec<Option<NodeId>>,
                              target: NodeId,
                              contribution: NodeId|
         -> Result<()> {
            if !relevant(target.0) {
                return Ok(());
            }
            grads[target.0] = Some(match grads[target.0] {
                Some(existing) => tape.add(existing, contribution)?,
                None => contribution,
            });
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(tape, &mut grads, a, g)?;
                accumulate(tape, &mut grads, b, g)?;
            }
            Op::Sub(a, b) => {
                accumulate(tape, &mut grads, a, g)?;
                if relevant(b.0) {
                    let ng = tape.neg(g);
                    accumulate(tape, &mut grads, b, ng)?;
                }
            }
            Op::Mul(a, b) => {
                if relevant(a.0) {
                    let da = tape.mul(g, b)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let db = tape.mul(g, a)?;
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::Div(a, b) => {
                // d(a/b) = g/b, -g·a/b²
                if relevant(a.0) {
                    let da = tape.div(g, b)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let q = tape.div(NodeId(i), b)?; // (a/b)/b = a/b²
                    let gq = tape.mul(g, q)?;
                    let db = tape.neg(gq);
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::Affine { x, mul, .. } => {
                if relevant(x.0) {
                    let dx = tape.scale(g, mul);
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::Matmul(a, b) => {
                // C = A·B ⇒ dA = G·Bᵀ, dB = Aᵀ·G
                if relevant(a.0) {
                    let da = tape.matmul_nt(g, b)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let db = tape.matmul_tn(a, g)?;
                    // Vector rhs keeps rank 1 through matmul_tn already.
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::MatmulTN(a, b) => {
                // C = Aᵀ·B ⇒ dA = B·Gᵀ, dB = A·G
                if relevant(a.0) {
                    let gb = ensure_matrix(tape, g)?;
                    let bb = ensure_matrix(tape, b)?;
                    let da = tape.matmul_nt(bb, gb)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let db = tape.matmul(a, g)?;
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::MatmulNT(a, b) => {
                // C = A·Bᵀ ⇒ dA = G·B, dB = Gᵀ·A
                if relevant(a.0) {
                    let da = tape.matmul(g, b)?;
                    let da = reshape_like(tape, da, a)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let ga = ensure_matrix(tape, g)?;
                    let aa = ensure_matrix(tape, a)?;
                    let db = tape.matmul_tn(ga, aa)?;
                    let db = reshape_like(tape, db, b)?;
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::AddCol { x, col } => {
                accumulate(tape, &mut grads, x, g)?;
                if relevant(col.0) {
                    let dc = if tape.value(g).shape().len() == 2 {
                        tape.sum_cols(g)?
                    } else {
                        g
                    };
                    accumulate(tape, &mut grads, col, dc)?;
                }
            }
            Op::SumCols(x) => {
                if relevant(x.0) {
                    let shape = tape.value(x).shape().to_vec();
                    let dx = match shape.as_slice() {
                        [_, n] => tape.broadcast_cols(g, *n)?,
                        _ => g,
                    };
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::BroadcastCols { col, .. } => {
                if relevant(col.0) {
                    let dc = tape.sum_cols(g)?;
                    accumulate(tape, &mut grads, col, dc)?;
                }
            }
            Op::Tanh(x) => {
                if relevant(x.0) {
                    // d tanh = 1 − tanh², reusing the forward value.
                    let y = NodeId(i);
                    let y2 = tape.mul(y, y)?;
                    let one_minus = tape.affine(y2, -1.0, 1.0);
                    let dx = tape.mul(g, one_minus)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::ReduceSum(x) => {
                if relevant(x.0) {
                    let shape = tape.value(x).shape().to_vec();
                    let dx = tape.broadcast_scalar(g, shape)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::BroadcastScalar { x, .. } => {
                if relevant(x.0) {
                    let dx = tape.reduce_sum(g);
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::SegmentSum { x, fields } => {
                if relevant(x.0) {
                    let total = last_axis(tape.value(x).shape());
                    let reps = total / fields;
                    let dx = tape.segment_broadcast(g, reps)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::SegmentBroadcast { x, reps } => {
                if relevant(x.0) {
                    let _ = reps;
                    let fields = last_axis(tape.value(x).shape());
                    let dx = tape.segment_sum(g, fields)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::Select { mask, a, b } => {
                let zero = {
                    let shape = tape.value(g).shape().to_vec();
                    let z = Tensor::zeros(&shape, tape.precision());
                    tape.leaf(z)?
                };
                if relevant(a.0) {
                    let da = tape.select(Arc::clone(&mask), g, zero)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let db = tape.select(Arc::clone(&mask), zero, g)?;
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::SliceRows { x, start, .. } => {
                if relevant(x.0) {
                    let rows = first_axis(tape.value(x).shape());
                    let dx = tape.pad_rows(g, start, rows)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::PadRows { x, start, .. } => {
                if relevant(x.0) {
                    let len = first_axis(tape.value(x).shape());
                    let dx = tape.slice_rows(g, start, len)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = first_axis(tape.value(a).shape());
                let rb = first_axis(tape.value(b).shape());
                if relevant(a.0) {
                    let da = tape.slice_rows(g, 0, ra)?;
                    accumulate(tape, &mut grads, a, da)?;
                }
                if relevant(b.0) {
                    let db = tape.slice_rows(g, ra, rb)?;
                    accumulate(tape, &mut grads, b, db)?;
                }
            }
            Op::Conv1d { kernel, x, fields } => {
                if relevant(kernel.0) {
                    let k = tape.value(kernel).shape()[2];
                    let dk = tape.conv1d_kernel_grad(x, g, k, fields)?;
                    accumulate(tape, &mut grads, kernel, dk)?;
                }
                if relevant(x.0) {
                    let kt = tape.kernel_transpose_flip(kernel)?;
                    let dx = tape.conv1d(kt, g, fields)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::Conv1dKernelGrad { x, g: gin, k, fields } => {
                // out[co,ci,j] = Σ g[co,n]·x[ci, wrap(n+j−half)] is bilinear.
                if relevant(x.0) {
                    let gt = tape.kernel_transpose_flip(g)?;
                    let dx = tape.conv1d(gt, gin, fields)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
                if relevant(gin.0) {
                    let _ = k;
                    let dg = tape.conv1d(g, x, fields)?;
                    accumulate(tape, &mut grads, gin, dg)?;
                }
            }
            Op::KernelTransposeFlip(x) => {
                if relevant(x.0) {
                    // Involution: the adjoint is the same permutation.
                    let dx = tape.kernel_transpose_flip(g)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::Stencil {
                x,
                weights,
                transposed,
                fields,
            } => {
                if relevant(x.0) {
                    let dx = tape.stencil(g, weights, !transposed, fields)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
            Op::Reshape { x, .. } => {
                if relevant(x.0) {
                    let shape = tape.value(x).shape().to_vec();
                    let dx = tape.reshape(g, shape)?;
                    accumulate(tape, &mut grads, x, dx)?;
                }
            }
        }
    }
    Ok(GradMap { grads })
}

/// Reverse-mode sweep computing adjoints for every node the root depends on.
pub fn backward(tape: &mut Tape, root: NodeId) -> Result<GradMap> {
    let all: Vec<NodeId> = (0..=root.0).map(NodeId).collect();
    backward_for(tape, root, &all)
}

fn first_axis(shape: &[usize]) -> usize {
    *shape.first().unwrap_or(&1)
}

fn last_axis(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn ensure_matrix(tape: &mut Tape, id: NodeId) -> Result<NodeId> {
    match tape.value(id).shape() {
        [n] => {
            let n = *n;
            tape.reshape(id, vec![n, 1])
        }
        _ => Ok(id),
    }
}

fn reshape_like(tape: &mut Tape, id: NodeId, reference: NodeId) -> Result<NodeId> {
    let want = tape.value(reference).shape().to_vec();
    if tape.value(id).shape() == want.as_slice() {
        Ok(id)
    } else {
        tape.reshape(id, want)
    }
}

/// Maximum relative disagreement between the tape gradient of `f` and a
/// central finite difference, per coordinate:
/// `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
///
/// `f` builds a scalar-rooted graph from a leaf holding `x`. An empty `x`
/// yields 0 by convention.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if x.numel() == 0 {
        return Ok(0.0);
    }
    let precision = x.precision();
    let mut tape = Tape::new(precision);
    let xn = tape.leaf(x.clone())?;
    let root = f(&mut tape, xn)?;
    let gmap = backward_for(&mut tape, root, &[xn])?;
    let analytic = gmap.grad(&tape, xn);

    let eval = |xv: &Tensor| -> Result<f64> {
        let mut t = Tape::new(precision);
        let xl = t.leaf(xv.clone())?;
        let r = f(&mut t, xl)?;
        Ok(t.value(r).item())
    };

    let mut worst: f64 = 0.0;
    let base = x.to_vec();
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval(&Tensor::from_raw(x.shape().to_vec(), plus, precision))?;
        let fm = eval(&Tensor::from_raw(x.shape().to_vec(), minus, precision))?;
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic.as_slice()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
