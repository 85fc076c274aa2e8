//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as an
//! append-only node list; node ids are topologically ordered because a
//! node can only consume already-recorded nodes. [`Tape::backward`]
//! walks the list in reverse, accumulating gradients for every node
//! reachable from a scalar root. The tape is rebuilt for each forward
//! pass and also serves as the executed-operation trace.
//!
//! Broadcasting follows the trailing-dimension rule: two operands are
//! compatible when their shapes are equal or one shape is a suffix of
//! the other (a scalar `[]` is a suffix of everything). A tape must not
//! be shared across threads; untracked [`Tensor`] values may be.

use crate::tensor::{numel, NodeId, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Max2(NodeId, NodeId),
    Min2(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    MaxReduce { x: NodeId, axis: Option<usize> },
    Row { x: NodeId, index: usize },
    Index { x: NodeId, index: usize },
    SliceCols { x: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max2(..) => "max2",
            Op::Min2(..) => "min2",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxReduce { .. } => "max_reduce",
            Op::Row { .. } => "row",
            Op::Index { .. } => "index",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One entry of the executed-operation trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub shape: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Computation tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Shared broadcast layout for a binary elementwise op.
/// `inner` is the element count of the smaller operand (tiled over
/// `outer` repetitions); `a_is_big` says which side has the full shape.
struct Broadcast {
    out_shape: Vec<usize>,
    outer: usize,
    inner: usize,
    a_is_big: bool,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast {
            out_shape: a.to_vec(),
            outer: 1,
            inner: numel(a),
            a_is_big: true,
        });
    }
    if is_suffix(b, a) {
        let inner = numel(b);
        Ok(Broadcast {
            out_shape: a.to_vec(),
            outer: numel(a) / inner,
            inner,
            a_is_big: true,
        })
    } else if is_suffix(a, b) {
        let inner = numel(a);
        Ok(Broadcast {
            out_shape: b.to_vec(),
            outer: numel(b) / inner,
            inner,
            a_is_big: false,
        })
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Layout of the lanes running along `axis` of `shape`.
/// Lane `l` starts at `(l / stride) * stride * len + (l % stride)` and
/// its elements are `stride` apart.
struct Lanes {
    count: usize,
    len: usize,
    stride: usize,
}

fn lanes(shape: &[usize], axis: usize) -> Lanes {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    Lanes {
        count: numel(shape) / len,
        len,
        stride,
    }
}

impl Lanes {
    fn base(&self, lane: usize) -> usize {
        (lane / self.stride) * self.stride * self.len + (lane % self.stride)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant or parameter value; returns a tracked handle.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        self.push(Op::Leaf, value.detached())
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.leaf(&Tensor::scalar(v))
    }

    /// Executed-operation trace: one entry per node, in execution order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .map(|n| TraceEntry {
                op: n.op.name(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Tensor {
        let id = self.nodes.len();
        let handle = value.detached().with_node(id);
        self.nodes.push(Node { op, value });
        handle
    }

    /// Validate an op output for finiteness before recording it.
    fn push_checked(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        debug_assert_eq!(numel(&shape), data.len());
        let t = Tensor::new(shape, data).expect("op produced malformed tensor");
        Ok(self.push(op, t))
    }

    /// Resolve an operand to a node id, lifting untracked values to leaves.
    fn operand(&mut self, t: &Tensor, op: &'static str) -> Result<NodeId> {
        match t.node() {
            Some(id) => {
                let known = self
                    .nodes
                    .get(id)
                    .ok_or(TensorError::ForeignNode { op, node: id })?;
                if known.value.shape() != t.shape() {
                    return Err(TensorError::ForeignNode { op, node: id });
                }
                Ok(id)
            }
            None => Ok(self.leaf(t).node().expect("leaf is tracked")),
        }
    }

    fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    // ---- binary elementwise -------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        let bc = broadcast(op_name, a.shape(), b.shape())?;
        let (big, small) = if bc.a_is_big { (a, b) } else { (b, a) };
        let mut out = Vec::with_capacity(bc.outer * bc.inner);
        for o in 0..bc.outer {
            let off = o * bc.inner;
            for i in 0..bc.inner {
                let (x, y) = if bc.a_is_big {
                    (big.data()[off + i], small.data()[i])
                } else {
                    (small.data()[i], big.data()[off + i])
                };
                out.push(f(x, y));
            }
        }
        let ia = self.operand(a, op_name)?;
        let ib = self.operand(b, op_name)?;
        self.push_checked(make(ia, ib), bc.out_shape, out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn max2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        // Ties take the first operand's subgradient.
        self.binary("max2", a, b, |x, y| if x >= y { x } else { y }, Op::Max2)
    }

    pub fn min2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("min2", a, b, |x, y| if x <= y { x } else { y }, Op::Min2)
    }

    pub fn add_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        let sc = Tensor::scalar(s);
        self.add(a, &sc)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        let sc = Tensor::scalar(s);
        self.mul(a, &sc)
    }

    // ---- unary elementwise --------------------------------------------

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
        op_name: &'static str,
    ) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let ia = self.operand(a, op_name)?;
        self.push_checked(make(ia), a.shape().to_vec(), out)
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| -x, Op::Neg, "neg")
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::exp, Op::Exp, "exp")
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.unary(a, f64::ln, Op::Log, "log")
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), Op::Relu, "relu")
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, sigmoid_stable, Op::Sigmoid, "sigmoid")
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::abs, Op::Abs, "abs")
    }

    // ---- matrix ops ----------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.data()[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b.data()[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        let ia = self.operand(a, "matmul")?;
        let ib = self.operand(b, "matmul")?;
        self.push_checked(Op::Matmul(ia, ib), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let ia = self.operand(a, "transpose")?;
        self.push_checked(Op::Transpose(ia), vec![c, r], out)
    }

    // ---- softmax / layernorm --------------------------------------------

    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.ndim() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: a.shape().to_vec(),
            });
        }
        let ln = lanes(a.shape(), axis);
        let mut out = vec![0.0; a.len()];
        for l in 0..ln.count {
            let base = ln.base(l);
            let mut max = f64::NEG_INFINITY;
            for k in 0..ln.len {
                max = max.max(a.data()[base + k * ln.stride]);
            }
            let mut sum = 0.0;
            for k in 0..ln.len {
                let e = (a.data()[base + k * ln.stride] - max).exp();
                out[base + k * ln.stride] = e;
                sum += e;
            }
            for k in 0..ln.len {
                out[base + k * ln.stride] /= sum;
            }
        }
        let ia = self.operand(a, "softmax")?;
        self.push_checked(Op::Softmax { x: ia, axis }, a.shape().to_vec(), out)
    }

    pub fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if x.ndim() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "layernorm",
                axis: 0,
                shape: vec![],
            });
        }
        let d = *x.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Domain {
                op: "layernorm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        let ix = self.operand(x, "layernorm")?;
        let ig = self.operand(gamma, "layernorm")?;
        let ib = self.operand(beta, "layernorm")?;
        self.push_checked(
            Op::LayerNorm { x: ix, gamma: ig, beta: ib, eps },
            x.shape().to_vec(),
            out,
        )
    }

    // ---- reductions ------------------------------------------------------

    fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => vec![],
            Some(ax) => {
                let mut s = shape.to_vec();
                s.remove(ax);
                s
            }
        }
    }

    fn reduce(
        &mut self,
        a: &Tensor,
        axis: Option<usize>,
        op_name: &'static str,
        fold: impl Fn(&[f64], usize, usize, usize) -> f64, // data, base, len, stride
        make: impl Fn(NodeId, Option<usize>) -> Op,
    ) -> Result<Tensor> {
        if let Some(ax) = axis {
            if ax >= a.ndim() {
                return Err(TensorError::InvalidAxis {
                    op: op_name,
                    axis: ax,
                    shape: a.shape().to_vec(),
                });
            }
        }
        let out = match axis {
            None => vec![fold(a.data(), 0, a.len(), 1)],
            Some(ax) => {
                let ln = lanes(a.shape(), ax);
                (0..ln.count)
                    .map(|l| fold(a.data(), ln.base(l), ln.len, ln.stride))
                    .collect()
            }
        };
        let shape = Self::reduced_shape(a.shape(), axis);
        let ia = self.operand(a, op_name)?;
        self.push_checked(make(ia, axis), shape, out)
    }

    pub fn sum(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(
            a,
            axis,
            "sum",
            |d, base, len, stride| (0..len).map(|k| d[base + k * stride]).sum(),
            |x, axis| Op::Sum { x, axis },
        )
    }

    pub fn mean(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(
            a,
            axis,
            "mean",
            |d, base, len, stride| (0..len).map(|k| d[base + k * stride]).sum::<f64>() / len as f64,
            |x, axis| Op::Mean { x, axis },
        )
    }

    /// Max reduction; the backward pass routes gradient to the first
    /// index attaining the maximum in each lane.
    pub fn max_reduce(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(
            a,
            axis,
            "max_reduce",
            |d, base, len, stride| {
                (0..len)
                    .map(|k| d[base + k * stride])
                    .fold(f64::NEG_INFINITY, f64::max)
            },
            |x, axis| Op::MaxReduce { x, axis },
        )
    }

    // ---- indexing / assembly ----------------------------------------------

    /// Row `index` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, a: &Tensor, index: usize) -> Result<Tensor> {
        if a.ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if index >= r {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                shape: a.shape().to_vec(),
            });
        }
        let out = a.data()[index * c..(index + 1) * c].to_vec();
        let ia = self.operand(a, "row")?;
        self.push_checked(Op::Row { x: ia, index }, vec![c], out)
    }

    /// Element `index` of a 1-D tensor as a scalar.
    pub fn index(&mut self, a: &Tensor, index: usize) -> Result<Tensor> {
        if a.ndim() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "index",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        if index >= a.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "index",
                index,
                shape: a.shape().to_vec(),
            });
        }
        let out = vec![a.data()[index]];
        let ia = self.operand(a, "index")?;
        self.push_checked(Op::Index { x: ia, index }, vec![], out)
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if a.ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                shape: a.shape().to_vec(),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * c + start..i * c + end]);
        }
        let ia = self.operand(a, "slice_cols")?;
        self.push_checked(Op::SliceCols { x: ia, start, end }, vec![r, w], out)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let r = parts[0].shape()[0];
        for p in parts {
            if p.ndim() != 2 || p.shape()[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = p.shape()[1];
                out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
            }
        }
        let ids = parts
            .iter()
            .map(|p| self.operand(p, "concat_cols"))
            .collect::<Result<Vec<_>>>()?;
        self.push_checked(Op::ConcatCols(ids), vec![r, total], out)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse accumulation from a tracked scalar root. Returns a
    /// gradient per node reachable from the root.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let rid = root.node().ok_or(TensorError::UntrackedRoot)?;
        if rid >= self.nodes.len() {
            return Err(TensorError::ForeignNode {
                op: "backward",
                node: rid,
            });
        }
        if self.nodes[rid].value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[rid].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[rid] = Some(Tensor::filled(self.nodes[rid].value.shape(), 1.0));

        for id in (0..=rid).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.dispatch_backward(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
        match &mut grads[id] {
            Some(g) => {
                for (dst, d) in g.data_mut().iter_mut().zip(delta) {
                    *dst += d;
                }
            }
            None => {
                grads[id] = Some(Tensor::raw(shape.to_vec(), delta.to_vec()));
            }
        }
    }

    fn broadcast_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        ia: NodeId,
        ib: NodeId,
        partial: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let a = self.value(ia);
        let b = self.value(ib);
        let bc = broadcast("backward", a.shape(), b.shape()).expect("validated in forward");
        let (big_id, small_id) = if bc.a_is_big { (ia, ib) } else { (ib, ia) };
        let big = self.value(big_id);
        let small = self.value(small_id);
        let mut gbig = vec![0.0; big.len()];
        let mut gsmall = vec![0.0; small.len()];
        for o in 0..bc.outer {
            let off = o * bc.inner;
            for i in 0..bc.inner {
                let g = gout.data()[off + i];
                let (x, y) = if bc.a_is_big {
                    (big.data()[off + i], small.data()[i])
                } else {
                    (small.data()[i], big.data()[off + i])
                };
                let (da, db) = partial(x, y);
                let (dbig, dsmall) = if bc.a_is_big { (da, db) } else { (db, da) };
                gbig[off + i] += dbig * g;
                gsmall[i] += dsmall * g;
            }
        }
        Self::accumulate(grads, big_id, big.shape(), &gbig);
        Self::accumulate(grads, small_id, small.shape(), &gsmall);
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        ix: NodeId,
        out_value: &Tensor,
        dfdx: impl Fn(f64, f64) -> f64, // (input, output) -> partial
    ) {
        let x = self.value(ix);
        let delta: Vec<f64> = x
            .data()
            .iter()
            .zip(out_value.data())
            .zip(gout.data())
            .map(|((&xv, &yv), &g)| dfdx(xv, yv) * g)
            .collect();
        Self::accumulate(grads, ix, x.shape(), &delta);
    }

    fn dispatch_backward(&self, id: NodeId, gout: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let out_value = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => self.broadcast_backward(grads, gout, *a, *b, |_, _| (1.0, 1.0)),
            Op::Sub(a, b) => self.broadcast_backward(grads, gout, *a, *b, |_, _| (1.0, -1.0)),
            Op::Mul(a, b) => self.broadcast_backward(grads, gout, *a, *b, |x, y| (y, x)),
            Op::Div(a, b) => {
                self.broadcast_backward(grads, gout, *a, *b, |x, y| (1.0 / y, -x / (y * y)))
            }
            Op::Max2(a, b) => self.broadcast_backward(grads, gout, *a, *b, |x, y| {
                if x >= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }),
            Op::Min2(a, b) => self.broadcast_backward(grads, gout, *a, *b, |x, y| {
                if x <= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }),
            Op::Neg(x) => self.unary_backward(grads, gout, *x, out_value, |_, _| -1.0),
            Op::Exp(x) => self.unary_backward(grads, gout, *x, out_value, |_, y| y),
            Op::Log(x) => self.unary_backward(grads, gout, *x, out_value, |xv, _| 1.0 / xv),
            Op::Relu(x) => {
                self.unary_backward(grads, gout, *x, out_value, |xv, _| {
                    if xv > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Sigmoid(x) => {
                self.unary_backward(grads, gout, *x, out_value, |_, y| y * (1.0 - y))
            }
            Op::Abs(x) => self.unary_backward(grads, gout, *x, out_value, |xv, _| {
                if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Matmul(ia, ib) => {
                let a = self.value(*ia);
                let b = self.value(*ib);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = dC · Bᵀ, with Bᵀ materialized so the inner loop
                // is a vectorizable accumulation.
                let mut bt = vec![0.0; n * k];
                for kk in 0..k {
                    for j in 0..n {
                        bt[j * k + kk] = b.data()[kk * n + j];
                    }
                }
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gout.data()[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (j, &g) in grow.iter().enumerate() {
                        let btrow = &bt[j * k..(j + 1) * k];
                        for (d, &bv) in darow.iter_mut().zip(btrow) {
                            *d += g * bv;
                        }
                    }
                }
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gout.data()[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
                Self::accumulate(grads, *ia, a.shape(), &da);
                Self::accumulate(grads, *ib, b.shape(), &db);
            }
            Op::Transpose(ix) => {
                let x = self.value(*ix);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = gout.data()[i * r + j];
                    }
                }
                Self::accumulate(grads, *ix, x.shape(), &dx);
            }
            Op::Softmax { x, axis } => {
                let xv = self.value(*x);
                let ln = lanes(xv.shape(), *axis);
                let mut dx = vec![0.0; xv.len()];
                for l in 0..ln.count {
                    let base = ln.base(l);
                    let mut dot = 0.0;
                    for k in 0..ln.len {
                        let idx = base + k * ln.stride;
                        dot += gout.data()[idx] * out_value.data()[idx];
                    }
                    for k in 0..ln.len {
                        let idx = base + k * ln.stride;
                        dx[idx] = out_value.data()[idx] * (gout.data()[idx] - dot);
                    }
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let g = &gout.data()[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = g[j] * gv.data()[j];
                        dgamma[j] += g[j] * xhat[j];
                        dbeta[j] += g[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
                Self::accumulate(grads, *gamma, &[d], &dgamma);
                Self::accumulate(grads, *beta, &[d], &dbeta);
            }
            Op::Sum { x, axis } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                match axis {
                    None => {
                        let g = gout.data()[0];
                        dx.iter_mut().for_each(|v| *v = g);
                    }
                    Some(ax) => {
                        let ln = lanes(xv.shape(), *ax);
                        for l in 0..ln.count {
                            let base = ln.base(l);
                            let g = gout.data()[l];
                            for k in 0..ln.len {
                                dx[base + k * ln.stride] = g;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Mean { x, axis } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                match axis {
                    None => {
                        let g = gout.data()[0] / xv.len() as f64;
                        dx.iter_mut().for_each(|v| *v = g);
                    }
                    Some(ax) => {
                        let ln = lanes(xv.shape(), *ax);
                        for l in 0..ln.count {
                            let base = ln.base(l);
                            let g = gout.data()[l] / ln.len as f64;
                            for k in 0..ln.len {
                                dx[base + k * ln.stride] = g;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::MaxReduce { x, axis } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                match axis {
                    None => {
                        let mut arg = 0;
                        for (i, &v) in xv.data().iter().enumerate() {
                            if v > xv.data()[arg] {
                                arg = i;
                            }
                        }
                        dx[arg] = gout.data()[0];
                    }
                    Some(ax) => {
                        let ln = lanes(xv.shape(), *ax);
                        for l in 0..ln.count {
                            let base = ln.base(l);
                            let mut arg = 0;
                            let mut best = f64::NEG_INFINITY;
                            for k in 0..ln.len {
                                let v = xv.data()[base + k * ln.stride];
                                if v > best {
                                    best = v;
                                    arg = k;
                                }
                            }
                            dx[base + arg * ln.stride] = gout.data()[l];
                        }
                    }
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Row { x, index } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                dx[index * c..(index + 1) * c].copy_from_slice(gout.data());
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::Index { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                dx[*index] = gout.data()[0];
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::SliceCols { x, start, end } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let w = end - start;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end]
                        .copy_from_slice(&gout.data()[i * w..(i + 1) * w]);
                }
                Self::accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::ConcatCols(ids) => {
                let r = out_value.shape()[0];
                let total = out_value.shape()[1];
                let mut offset = 0;
                for &pid in ids {
                    let pv = self.value(pid);
                    let c = pv.shape()[1];
                    let mut dp = vec![0.0; pv.len()];
                    for i in 0..r {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&gout.data()[i * total + offset..i * total + offset + c]);
                    }
                    Self::accumulate(grads, pid, pv.shape(), &dp);
                    offset += c;
                }
            }
        }
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut tape = Tape::new();
        let out = tape
            .add(&Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let out = tape.sigmoid(&Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn mul_by_scalar_zero_annihilates() {
        let mut tape = Tape::new();
        let out = tape.mul_scalar(&Tensor::vector(vec![2.0, 3.0]), 0.0).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_row_bias() {
        let mut tape = Tape::new();
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::vector(vec![10.0, 20.0, 30.0]);
        let out = tape.add(&m, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(matches!(
            tape.add(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.log(&Tensor::vector(vec![1.0, 0.0])),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(&a, &i).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_column_vector() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        let out = tape.matmul(&a, &ones).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::SplitMix64::new(11);
        let a_data: Vec<f64> = (0..12).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let a = t(&[3, 4], &a_data);
        let b = t(&[4, 2], &b_data);
        let mut tape = Tape::new();
        let out = tape.matmul(&a, &b).unwrap();
        // Independent naive product.
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
                assert!((out.at2(i, j) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut tape = Tape::new();
        let out = tape.softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);

        let big = tape.softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);

        let s = tape.softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = Tensor::vector(x.data().iter().map(|v| v + 7.5).collect());
        let a = tape.softmax(&x, 0).unwrap();
        let b = tape.softmax(&shifted, 0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let mut tape = Tape::new();
        let m = t(&[2, 3], &[1.0, 1.0, 1.0, 0.0, 0.0, 10.0]);
        let s = tape.softmax(&m, 1).unwrap();
        let third = 1.0 / 3.0;
        assert!((s.at2(0, 0) - third).abs() < 1e-12);
        assert!(s.at2(1, 2) > 0.99);
        for r in 0..2 {
            let sum: f64 = s.row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]);
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let out = tape.layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_centers_rows() {
        let mut tape = Tape::new();
        let x = t(&[2, 4], &[1.0, -2.0, 0.5, 3.0, 10.0, 20.0, -5.0, 0.0]);
        let gamma = Tensor::filled(&[4], 1.3);
        let beta = Tensor::zeros(&[4]);
        let out = tape.layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..2 {
            let mean: f64 = out.row_slice(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(tape.mean(&v, None).unwrap().to_scalar().unwrap(), 2.0);

        let ones = Tensor::filled(&[2, 3], 1.0);
        let s = tape.sum(&ones, Some(1)).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_reduce_backward_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 3.0, 3.0, 2.0]));
        let m = tape.max_reduce(&x, None).unwrap();
        let grads = tape.backward(&m).unwrap();
        let gx = grads.get(x.node().unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(2.0));
        let b = tape.leaf(&Tensor::scalar(3.0));
        let c = tape.mul(&a, &b).unwrap();
        let grads = tape.backward(&c).unwrap();
        assert_eq!(grads.get(a.node().unwrap()).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(b.node().unwrap()).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_repeated_operand_accumulates() {
        // d(x*x)/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(4.0));
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get(x.node().unwrap()).unwrap().data(), &[8.0]);
    }

    #[test]
    fn backward_disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(2.0));
        let b = tape.leaf(&Tensor::scalar(5.0));
        let c = tape.mul_scalar(&a, 3.0).unwrap();
        let grads = tape.backward(&c).unwrap();
        assert!(grads.get(b.node().unwrap()).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&a),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_rejects_untracked_root() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(&Tensor::scalar(1.0)),
            Err(TensorError::UntrackedRoot)
        ));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.exp(&Tensor::vector(vec![1000.0])),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let m = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = tape.slice_cols(&m, 0, 2).unwrap();
        let right = tape.slice_cols(&m, 2, 4).unwrap();
        let back = tape.concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn trace_records_ops_in_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(1.0));
        let b = tape.exp(&a).unwrap();
        let _ = tape.mul(&b, &b).unwrap();
        let trace = tape.trace();
        let ops: Vec<&str> = trace.iter().map(|e| e.op).collect();
        assert_eq!(ops, vec!["leaf", "exp", "mul"]);
    }

    #[test]
    fn deterministic_evaluation() {
        let run = || {
            let mut rng = crate::rng::SplitMix64::new(5);
            let data: Vec<f64> = (0..12).map(|_| rng.next_range(-2.0, 2.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[3, 4], &data));
            let s = tape.softmax(&x, 1).unwrap();
            let e = tape.exp(&s).unwrap();
            let out = tape.sum(&e, None).unwrap();
            out.to_scalar().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
