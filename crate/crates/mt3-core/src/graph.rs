//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! The graph is define-by-run: every operation evaluates eagerly and appends
//! a node recording its inputs. `backward` walks the tape in reverse and
//! *emits the vector-Jacobian products as ordinary graph nodes*, so with
//! `create_graph` the returned gradients are differentiable themselves — a
//! second `backward` then differentiates through a parameter-update step,
//! which is what the meta-gradient needs.
//!
//! A `Graph` is a single-threaded unit of work; distinct graphs may live on
//! distinct threads. Detached `Tensor`s are immutable and freely shared.

use std::cell::{Cell, RefCell};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::kernels::{conv_out_dim, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

pub type NodeId = usize;

/// Handle to a node in the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) NodeId);

impl Var {
    pub fn id(&self) -> NodeId {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: Option<String> },
    Identity(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    MaxConst { x: NodeId, threshold: f64 },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvInputGrad { gy: NodeId, w: NodeId, stride: usize, pad: usize, hw: (usize, usize) },
    ConvKernelGrad { gy: NodeId, x: NodeId, stride: usize, pad: usize, khw: (usize, usize) },
    AvgPool { x: NodeId, kernel: usize, stride: usize },
    AvgPoolGrad { gy: NodeId, kernel: usize, stride: usize, hw: (usize, usize) },
    Reshape(NodeId),
    BroadcastTo(NodeId),
    ReduceSum { x: NodeId, axes: Vec<usize>, keep_dims: bool },
    Slice { x: NodeId, ranges: Vec<(usize, usize)> },
    PadZero { x: NodeId, ranges: Vec<(usize, usize)> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Identity(x)
            | Op::Affine { x, .. }
            | Op::Recip(x)
            | Op::Sqrt(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::MaxConst { x, .. }
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::ReduceSum { x, .. }
            | Op::Slice { x, .. }
            | Op::PadZero { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            Op::ConvKernelGrad { gy, x, .. } => vec![*gy, *x],
            Op::AvgPool { x, .. } => vec![*x],
            Op::AvgPoolGrad { gy, .. } => vec![*gy],
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Debug hook: deliberately corrupts one backward kernel so the oracle
/// suite can prove it catches an injected sign error.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultInjection {
    MatmulLhsGradNegate,
}

/// Gradients returned by `backward`: one entry per requested root, in
/// request order. Entries are graph nodes; under `create_graph` they stay
/// connected to the tape, otherwise they are detached constants.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: IndexMap<NodeId, Var>,
}

impl GradientMap {
    pub fn get(&self, root: Var) -> Option<Var> {
        self.entries.get(&root.0).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Var)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<FaultInjection>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<FaultInjection>) {
        self.fault.set(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Value of a node. Cheap: tensors share their buffers.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn param_name(&self, v: Var) -> Option<String> {
        match &self.nodes.borrow()[v.0].op {
            Op::Leaf { name } => name.clone(),
            _ => None,
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf { name: None }, value)
    }

    /// Named leaf; the name surfaces in gradient diagnostics.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            value,
        )
    }

    /// Constant leaf carrying the current value of `v`; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    /// Pass-through node: same value, new identity in the graph. Used to give
    /// task-specific parameters their own nodes while keeping the gradient
    /// path back to the meta-parameters intact.
    pub fn identity(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push(Op::Identity(v.0), value)
    }

    // ---- elementwise --------------------------------------------------

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] + vb.data()[i]);
        Ok(self.push(Op::Add(a.0, b.0), out))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * vb.data()[i]);
        Ok(self.push(Op::Mul(a.0, b.0), out))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let rb = self.recip(b);
        self.mul(a, rb)
    }

    /// scale * x + shift, with compile-time constants (not differentiated).
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, h) = (T::from_f64(scale), T::from_f64(shift));
        let v = self.value(x);
        let out = v.map(|e| e * s + h);
        self.push(Op::Affine { x: x.0, scale, shift }, out)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn recip(&self, x: Var) -> Var {
        let out = self.value(x).map(|e| T::one() / e);
        self.push(Op::Recip(x.0), out)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let out = self.value(x).map(|e| e.sqrt());
        self.push(Op::Sqrt(x.0), out)
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).map(|e| e.exp());
        self.push(Op::Exp(x.0), out)
    }

    pub fn log(&self, x: Var) -> Var {
        let out = self.value(x).map(|e| e.ln());
        self.push(Op::Log(x.0), out)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(Op::Relu(x.0), out)
    }

    /// max(x, c) elementwise against a constant threshold.
    pub fn max_const(&self, x: Var, threshold: f64) -> Var {
        let c = T::from_f64(threshold);
        let out = self.value(x).map(|e| if e > c { e } else { c });
        self.push(Op::MaxConst { x: x.0, threshold }, out)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D matrix product with optional transposes of either operand.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = kernels::matmul(&self.value(a), &self.value(b), ta, tb, m, ka, n);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0, ta, tb }, out))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "kernel {:?} with stride {stride} pad {pad} does not fit input {:?}",
                    sw, sx
                ),
            });
        }
        Ok(ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            oc: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: conv_out_dim(sx[2], sw[2], stride, pad),
            ow: conv_out_dim(sx[3], sw[3], stride, pad),
        })
    }

    /// 2-D convolution (cross-correlation), NCHW input, OIHW kernel.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        let out = kernels::conv2d(&self.value(x), &self.value(w), &geom);
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, stride, pad }, out))
    }

    fn conv_input_grad(&self, gy: Var, w: Var, stride: usize, pad: usize, hw: (usize, usize)) -> Var {
        let (sg, sw) = (self.shape(gy), self.shape(w));
        let geom = ConvGeom {
            n: sg[0],
            c: sw[1],
            h: hw.0,
            w: hw.1,
            oc: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: sg[2],
            ow: sg[3],
        };
        let out = kernels::conv2d_input_grad(&self.value(gy), &self.value(w), &geom);
        self.push(Op::ConvInputGrad { gy: gy.0, w: w.0, stride, pad, hw }, out)
    }

    fn conv_kernel_grad(&self, gy: Var, x: Var, stride: usize, pad: usize, khw: (usize, usize)) -> Var {
        let (sg, sx) = (self.shape(gy), self.shape(x));
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            oc: sg[1],
            kh: khw.0,
            kw: khw.1,
            stride,
            pad,
            oh: sg[2],
            ow: sg[3],
        };
        let out = kernels::conv2d_kernel_grad(&self.value(gy), &self.value(x), &geom);
        self.push(Op::ConvKernelGrad { gy: gy.0, x: x.0, stride, pad, khw }, out)
    }

    pub fn avg_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || kernel == 0 || stride == 0 || kernel > sx[2] || kernel > sx[3] {
            return Err(Error::InvalidArgument {
                op: "avg-pool",
                msg: format!("kernel {kernel} stride {stride} on shape {:?}", sx),
            });
        }
        let out = kernels::avg_pool2d(&self.value(x), kernel, stride, sx[0], sx[1], sx[2], sx[3]);
        Ok(self.push(Op::AvgPool { x: x.0, kernel, stride }, out))
    }

    fn avg_pool2d_grad(&self, gy: Var, kernel: usize, stride: usize, hw: (usize, usize)) -> Var {
        let sg = self.shape(gy);
        let out =
            kernels::avg_pool2d_grad(&self.value(gy), kernel, stride, sg[0], sg[1], hw.0, hw.1);
        self.push(Op::AvgPoolGrad { gy: gy.0, kernel, stride, hw }, out)
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x.0), out))
    }

    pub fn broadcast_to(&self, x: Var, target: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() > target.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: sx,
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - sx.len();
        for (i, &d) in sx.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: sx,
                    rhs: target.to_vec(),
                });
            }
        }
        let out = kernels::broadcast_to(&self.value(x), target);
        Ok(self.push(Op::BroadcastTo(x.0), out))
    }

    pub fn reduce_sum(&self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let sx = self.shape(x);
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= sx.len()) {
            return Err(Error::InvalidArgument {
                op: "reduce-sum",
                msg: format!("axes {:?} out of range for shape {:?}", axes, sx),
            });
        }
        let out = kernels::reduce_sum(&self.value(x), &axes, keep_dims);
        Ok(self.push(Op::ReduceSum { x: x.0, axes, keep_dims }, out))
    }

    pub fn reduce_mean(&self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let sx = self.shape(x);
        let s = self.reduce_sum(x, axes, keep_dims)?;
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let count: usize = axes.iter().map(|&a| sx[a]).product();
        Ok(self.affine(s, 1.0 / count as f64, 0.0))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce_sum(x, &axes, false)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.affine(s, 1.0 / n as f64, 0.0))
    }

    pub fn slice(&self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let sx = self.shape(x);
        if ranges.len() != sx.len()
            || ranges
                .iter()
                .zip(&sx)
                .any(|(&(s, e), &d)| s >= e || e > d)
        {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("ranges {:?} invalid for shape {:?}", ranges, sx),
            });
        }
        let out = kernels::slice(&self.value(x), ranges);
        Ok(self.push(Op::Slice { x: x.0, ranges: ranges.to_vec() }, out))
    }

    /// Embed `x` at `ranges` inside a zero tensor of `full_shape`.
    pub fn pad_zero(&self, x: Var, ranges: &[(usize, usize)], full_shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let ok = ranges.len() == full_shape.len()
            && ranges.len() == sx.len()
            && ranges
                .iter()
                .zip(full_shape)
                .zip(&sx)
                .all(|((&(s, e), &d), &xd)| s < e && e <= d && e - s == xd);
        if !ok {
            return Err(Error::InvalidArgument {
                op: "pad-zero",
                msg: format!(
                    "ranges {:?} with input {:?} invalid for target {:?}",
                    ranges, sx, full_shape
                ),
            });
        }
        let out = kernels::pad_zero(&self.value(x), ranges, full_shape);
        Ok(self.push(Op::PadZero { x: x.0, ranges: ranges.to_vec() }, out))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(xs[0]);
        if axis >= first.len() {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {:?}", first),
            });
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (&a, &b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut full = first.clone();
        full[axis] = total;
        let mut offset = 0usize;
        let mut acc: Option<Var> = None;
        for &x in xs {
            let s = self.shape(x);
            let ranges: Vec<(usize, usize)> = s
                .iter()
                .enumerate()
                .map(|(i, &d)| if i == axis { (offset, offset + d) } else { (0, d) })
                .collect();
            let padded = self.pad_zero(x, &ranges, &full)?;
            acc = Some(match acc {
                None => padded,
                Some(a) => self.add(a, padded)?,
            });
            offset += s[axis];
        }
        Ok(acc.unwrap())
    }

    // ---- composite ops --------------------------------------------------

    /// x / ||x||_2 along `axis`. Errors on a zero-norm slice before dividing.
    pub fn l2_normalize(&self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::InvalidArgument {
                op: "l2-normalize",
                msg: format!("axis {axis} out of range for shape {:?}", sx),
            });
        }
        let sq = self.mul(x, x)?;
        let n2 = self.reduce_sum(sq, &[axis], true)?;
        if self.value(n2).data().iter().any(|v| *v == T::zero()) {
            return Err(Error::ZeroNorm { op: "l2-normalize" });
        }
        let n = self.sqrt(n2);
        let inv = self.recip(n);
        let invb = self.broadcast_to(inv, &sx)?;
        self.mul(x, invb)
    }

    /// Numerically stable softmax along `axis`. The row-max shift is a
    /// detached constant; softmax is exactly invariant to it, value and
    /// derivatives alike.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let e = self.exp_shifted(x, axis)?;
        let s = self.reduce_sum(e, &[axis], true)?;
        let inv = self.recip(s);
        let invb = self.broadcast_to(inv, &self.shape(x))?;
        self.mul(e, invb)
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        let shifted = self.shift_by_row_max(x, axis)?;
        let e = self.exp(shifted);
        let s = self.reduce_sum(e, &[axis], true)?;
        let ls = self.log(s);
        let lsb = self.broadcast_to(ls, &sx)?;
        self.sub(shifted, lsb)
    }

    fn shift_by_row_max(&self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", sx),
            });
        }
        let v = self.value(x);
        let mut keep = sx.clone();
        keep[axis] = 1;
        // Row maxima computed on values, attached as a constant.
        let maxes = reduce_max_values(&v, axis, &keep);
        let m = self.constant(maxes);
        let mb = self.broadcast_to(m, &sx)?;
        self.sub(x, mb)
    }

    fn exp_shifted(&self, x: Var, axis: usize) -> Result<Var> {
        let shifted = self.shift_by_row_max(x, axis)?;
        Ok(self.exp(shifted))
    }

    // ---- backward -------------------------------------------------------

    fn ancestors(&self, from: Var, upto: usize) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut mark = vec![false; upto];
        let mut stack = vec![from.0];
        while let Some(id) = stack.pop() {
            if mark[id] {
                continue;
            }
            mark[id] = true;
            for input in nodes[id].op.inputs() {
                if !mark[input] {
                    stack.push(input);
                }
            }
        }
        mark
    }

    /// d(loss)/d(root) for every root. `loss` must be scalar. Roots
    /// unreachable from the loss get a zero gradient of their own shape.
    ///
    /// With `create_graph` the results stay attached to the tape so a later
    /// backward differentiates through them; without it, every node emitted
    /// during this pass is discarded and the results are detached constants.
    pub fn backward(&self, loss: Var, roots: &[Var], create_graph: bool) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            });
        }
        let len0 = self.len();
        let reach = self.ancestors(loss, len0);

        let mut adj: Vec<Option<Var>> = vec![None; len0];
        adj[loss.0] = Some(self.constant(Tensor::full(loss_value.shape(), T::one())));

        for id in (0..=loss.0).rev() {
            if !reach[id] {
                continue;
            }
            let Some(upstream) = adj[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            self.emit_vjps(Var(id), &op, upstream, &mut adj)?;
        }

        let mut entries = IndexMap::new();
        let mut values: Vec<(NodeId, Tensor<T>)> = Vec::new();
        for &root in roots {
            if root.0 >= len0 {
                return Err(Error::InvalidArgument {
                    op: "backward",
                    msg: "root created after loss; not part of the differentiated graph".into(),
                });
            }
            let grad_value = match adj.get(root.0).and_then(|a| *a) {
                Some(g) => self.value(g),
                None => Tensor::zeros(&self.shape(root)),
            };
            if !grad_value.all_finite() {
                let label = self
                    .param_name(root)
                    .unwrap_or_else(|| format!("node {}", root.0));
                return Err(Error::NonFinite {
                    context: format!("gradient of {label}"),
                });
            }
            if create_graph {
                let var = match adj.get(root.0).and_then(|a| *a) {
                    Some(g) => g,
                    None => self.constant(grad_value.clone()),
                };
                entries.insert(root.0, var);
            } else {
                values.push((root.0, grad_value));
            }
        }

        if !create_graph {
            // Drop everything emitted during this pass and re-attach the
            // results as constants: first-order gradients carry no history.
            self.nodes.borrow_mut().truncate(len0);
            for (root, value) in values {
                let var = self.constant(value);
                entries.insert(root, var);
            }
        }

        Ok(GradientMap { entries })
    }

    fn accumulate(&self, adj: &mut [Option<Var>], target: NodeId, contrib: Var) -> Result<()> {
        if target >= adj.len() {
            return Ok(()); // node emitted during this backward pass; not differentiated here
        }
        adj[target] = Some(match adj[target] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    fn emit_vjps(
        &self,
        node: Var,
        op: &Op,
        u: Var,
        adj: &mut [Option<Var>],
    ) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::Identity(x) => self.accumulate(adj, *x, u)?,
            Op::Add(a, b) => {
                self.accumulate(adj, *a, u)?;
                self.accumulate(adj, *b, u)?;
            }
            Op::Mul(a, b) => {
                let db = self.mul(u, Var(*a))?;
                let da = self.mul(u, Var(*b))?;
                self.accumulate(adj, *a, da)?;
                self.accumulate(adj, *b, db)?;
            }
            Op::Affine { x, scale, .. } => {
                let dx = self.affine(u, *scale, 0.0);
                self.accumulate(adj, *x, dx)?;
            }
            Op::Recip(x) => {
                // d(1/x) = -y^2 du, with y the node itself
                let y2 = self.mul(node, node)?;
                let dx = self.neg(self.mul(u, y2)?);
                self.accumulate(adj, *x, dx)?;
            }
            Op::Sqrt(x) => {
                // d sqrt = du / (2 sqrt(x))
                let inv = self.recip(node);
                let half = self.affine(inv, 0.5, 0.0);
                let dx = self.mul(u, half)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::Exp(x) => {
                let dx = self.mul(u, node)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::Log(x) => {
                let inv = self.recip(Var(*x));
                let dx = self.mul(u, inv)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::Relu(x) => {
                let mask = self.constant(
                    self.value(Var(*x))
                        .map(|e| if e > T::zero() { T::one() } else { T::zero() }),
                );
                let dx = self.mul(u, mask)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::MaxConst { x, threshold } => {
                let c = T::from_f64(*threshold);
                let mask = self.constant(
                    self.value(Var(*x))
                        .map(|e| if e > c { T::one() } else { T::zero() }),
                );
                let dx = self.mul(u, mask)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let (a, b) = (Var(*a), Var(*b));
                let (mut da, db) = match (ta, tb) {
                    (false, false) => (self.matmul_t(u, b, false, true)?, self.matmul_t(a, u, true, false)?),
                    (false, true) => (self.matmul_t(u, b, false, false)?, self.matmul_t(u, a, true, false)?),
                    (true, false) => (self.matmul_t(b, u, false, true)?, self.matmul_t(a, u, false, false)?),
                    (true, true) => (self.matmul_t(b, u, true, true)?, self.matmul_t(u, a, true, true)?),
                };
                if self.fault.get() == Some(FaultInjection::MatmulLhsGradNegate) {
                    da = self.neg(da);
                }
                self.accumulate(adj, a.0, da)?;
                self.accumulate(adj, b.0, db)?;
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(Var(*x));
                let sw = self.shape(Var(*w));
                let dx = self.conv_input_grad(u, Var(*w), *stride, *pad, (sx[2], sx[3]));
                let dw = self.conv_kernel_grad(u, Var(*x), *stride, *pad, (sw[2], sw[3]));
                self.accumulate(adj, *x, dx)?;
                self.accumulate(adj, *w, dw)?;
            }
            Op::ConvInputGrad { gy, w, stride, pad, .. } => {
                // node = A(w)^T gy; upstream u is shaped like the conv input.
                let sw = self.shape(Var(*w));
                let dgy = self.conv2d(u, Var(*w), *stride, *pad)?;
                let dw = self.conv_kernel_grad(Var(*gy), u, *stride, *pad, (sw[2], sw[3]));
                self.accumulate(adj, *gy, dgy)?;
                self.accumulate(adj, *w, dw)?;
            }
            Op::ConvKernelGrad { gy, x, stride, pad, .. } => {
                // node = B(x)^T gy; upstream u is shaped like the kernel.
                let sx = self.shape(Var(*x));
                let dgy = self.conv2d(Var(*x), u, *stride, *pad)?;
                let dx = self.conv_input_grad(Var(*gy), u, *stride, *pad, (sx[2], sx[3]));
                self.accumulate(adj, *gy, dgy)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::AvgPool { x, kernel, stride } => {
                let sx = self.shape(Var(*x));
                let dx = self.avg_pool2d_grad(u, *kernel, *stride, (sx[2], sx[3]));
                self.accumulate(adj, *x, dx)?;
            }
            Op::AvgPoolGrad { gy, kernel, stride, .. } => {
                let dgy = self.avg_pool2d(u, *kernel, *stride)?;
                self.accumulate(adj, *gy, dgy)?;
            }
            Op::Reshape(x) => {
                let dx = self.reshape(u, &self.shape(Var(*x)))?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::BroadcastTo(x) => {
                let sx = self.shape(Var(*x));
                let su = self.shape(u);
                let offset = su.len() - sx.len();
                let axes: Vec<usize> = (0..su.len())
                    .filter(|&i| i < offset || sx[i - offset] != su[i])
                    .collect();
                let mut dx = if axes.is_empty() { u } else { self.reduce_sum(u, &axes, true)? };
                if self.shape(dx) != sx {
                    dx = self.reshape(dx, &sx)?;
                }
                self.accumulate(adj, *x, dx)?;
            }
            Op::ReduceSum { x, axes, keep_dims } => {
                let sx = self.shape(Var(*x));
                let mut keep = sx.clone();
                for &a in axes {
                    keep[a] = 1;
                }
                let mut du = u;
                if !keep_dims {
                    du = self.reshape(du, &keep)?;
                }
                let dx = self.broadcast_to(du, &sx)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::Slice { x, ranges } => {
                let sx = self.shape(Var(*x));
                let dx = self.pad_zero(u, ranges, &sx)?;
                self.accumulate(adj, *x, dx)?;
            }
            Op::PadZero { x, ranges } => {
                let dx = self.slice(u, ranges)?;
                self.accumulate(adj, *x, dx)?;
            }
        }
        Ok(())
    }

    // ---- gradient utilities ----------------------------------------------

    /// Global L2 norm over all entries of a gradient map, as a graph node.
    pub fn global_norm(&self, grads: &GradientMap) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (_, g) in grads.iter() {
            let sq = self.mul(g, g)?;
            let s = self.sum_all(sq)?;
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        let total = acc.ok_or_else(|| Error::InvalidArgument {
            op: "global-norm",
            msg: "empty gradient map".into(),
        })?;
        Ok(self.sqrt(total))
    }

    /// Scale every gradient by max_norm/norm when the global norm exceeds
    /// max_norm, else pass through. Differentiable; the scaling stays in the
    /// graph so the meta-gradient flows through the clip. Returns the clipped
    /// map and min(norm, max_norm).
    pub fn clip_by_global_norm(
        &self,
        grads: &GradientMap,
        max_norm: f64,
    ) -> Result<(GradientMap, Var)> {
        if max_norm <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "clip-by-global-norm",
                msg: format!("max-norm must be positive, got {max_norm}"),
            });
        }
        let norm = self.global_norm(grads)?;
        // factor = max_norm / max(norm, max_norm): 1 below the threshold.
        let denom = self.max_const(norm, max_norm);
        let factor = self.affine(self.recip(denom), max_norm, 0.0);
        let mut entries = IndexMap::new();
        for (root, g) in grads.iter() {
            let fb = self.broadcast_to(factor, &self.shape(g))?;
            entries.insert(root, self.mul(g, fb)?);
        }
        let clipped_norm = self.mul(norm, factor)?;
        Ok((GradientMap { entries }, clipped_norm))
    }

    /// One SGD step as graph nodes: phi' = phi - lr * grad for every entry.
    /// Backward through any function of phi' then yields the full
    /// second-order meta-gradient (or first-order if the grads are detached).
    pub fn sgd_step(
        &self,
        params: &IndexMap<String, Var>,
        grads: &GradientMap,
        lr: f64,
    ) -> Result<IndexMap<String, Var>> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "sgd-step",
                msg: format!("learning rate must be positive, got {lr}"),
            });
        }
        let missing: Vec<String> = params
            .iter()
            .filter(|(_, &v)| grads.get(v).is_none())
            .map(|(k, _)| k.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradients { names: missing });
        }
        let mut out = IndexMap::new();
        for (name, &p) in params {
            let g = grads.get(p).unwrap();
            let step = self.affine(g, -lr, 0.0);
            out.insert(name.clone(), self.add(p, step)?);
        }
        Ok(out)
    }
}

/// Max along one axis, computed on raw values (used for detached softmax shifts).
fn reduce_max_values<T: Scalar>(x: &Tensor<T>, axis: usize, keep_shape: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = crate::tensor::strides_of(shape);
    let keep_strides = crate::tensor::strides_of(keep_shape);
    let mut out = vec![T::neg_infinity(); numel_of(keep_shape)];
    for (idx, &v) in x.data().iter().enumerate() {
        let mut rem = idx;
        let mut off = 0usize;
        for d in 0..shape.len() {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            if d != axis {
                off += coord * keep_strides[d];
            }
        }
        if v > out[off] {
            out[off] = v;
        }
    }
    Tensor::new(keep_shape.to_vec(), out).expect("reduce max shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_l2_normalize_basics() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let v = g.constant(tensor(&[2], &[3.0, 4.0]));
        let n = g.l2_normalize(v, 0).unwrap();
        let data = g.value(n);
        assert!((data.data()[0] - 0.6).abs() < 1e-12);
        assert!((data.data()[1] - 0.8).abs() < 1e-12);

        let z = g.constant(tensor(&[2], &[0.0, 0.0]));
        assert!(matches!(g.l2_normalize(z, 0), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss, &[x], false).unwrap();
        let gx = g.value(grads.get(x).unwrap());
        assert_eq!(gx.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2], &[1.0, 2.0]));
        assert!(g.backward(x, &[x], false).is_err());
    }

    #[test]
    fn unreachable_root_gets_zero_gradient() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2], &[1.0, 2.0]));
        let other = g.constant(tensor(&[3], &[1.0, 1.0, 1.0]));
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss, &[other], false).unwrap();
        let go = g.value(grads.get(other).unwrap());
        assert_eq!(go.shape(), &[3]);
        assert!(go.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_create_graph_discards_emitted_nodes() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let len_before = g.len();
        let grads = g.backward(loss, &[x], false).unwrap();
        // graph grew by exactly the detached results
        assert_eq!(g.len(), len_before + 1);
        assert_eq!(g.value(grads.get(x).unwrap()).data(), &[2.0, 4.0]);
    }

    #[test]
    fn sgd_step_arithmetic_and_missing_grad_error() {
        let g = Graph::<f64>::new();
        let p = g.param("w", tensor(&[1], &[1.0]));
        let q = g.param("v", tensor(&[1], &[2.0]));
        let loss_term = g.mul(p, p).unwrap();
        let loss = g.sum_all(loss_term).unwrap();
        let grads = g.backward(loss, &[p], true).unwrap();

        let mut params = IndexMap::new();
        params.insert("w".to_string(), p);
        let half = g.affine(grads.get(p).unwrap(), 0.25, 0.0); // grad 2.0 -> 0.5
        let mut gm = GradientMap::default();
        gm.entries.insert(p.0, half);
        let stepped = g.sgd_step(&params, &gm, 0.1).unwrap();
        let v = g.value(stepped["w"]);
        assert!((v.data()[0] - 0.95).abs() < 1e-12);

        params.insert("v".to_string(), q);
        let err = g.sgd_step(&params, &gm, 0.1).unwrap_err();
        match err {
            Error::MissingGradients { names } => assert_eq!(names, vec!["v".to_string()]),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn clip_by_global_norm_scales_only_above_threshold() {
        let g = Graph::<f64>::new();
        let a = g.param("a", tensor(&[2], &[12.0, 16.0])); // norm 20
        let loss_t = g.mul(a, a).unwrap();
        let loss = g.sum_all(loss_t).unwrap();
        let _ = loss;

        let mut gm = GradientMap::default();
        gm.entries.insert(a.0, a);
        let (clipped, norm) = g.clip_by_global_norm(&gm, 10.0).unwrap();
        let c = g.value(clipped.get(a).unwrap());
        assert!((c.data()[0] - 6.0).abs() < 1e-12);
        assert!((c.data()[1] - 8.0).abs() < 1e-12);
        assert!((g.value(norm).item() - 10.0).abs() < 1e-12);

        let b = g.constant(tensor(&[2], &[3.0, 0.0])); // norm 3 < 10
        let mut gm2 = GradientMap::default();
        gm2.entries.insert(b.0, b);
        let (clipped2, norm2) = g.clip_by_global_norm(&gm2, 10.0).unwrap();
        assert_eq!(g.value(clipped2.get(b).unwrap()).data(), &[3.0, 0.0]);
        assert!((g.value(norm2).item() - 3.0).abs() < 1e-12);

        let z = g.constant(tensor(&[2], &[0.0, 0.0]));
        let mut gm3 = GradientMap::default();
        gm3.entries.insert(z.0, z);
        let (clipped3, norm3) = g.clip_by_global_norm(&gm3, 10.0).unwrap();
        assert_eq!(g.value(clipped3.get(z).unwrap()).data(), &[0.0, 0.0]);
        assert_eq!(g.value(norm3).item(), 0.0);
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let run = || -> Vec<f64> {
            let g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64) * 0.37 - 2.0));
            let w = g.constant(Tensor::from_fn(&[4, 4], |i| ((i * 7 % 5) as f64) * 0.21));
            let y = g.matmul(x, w).unwrap();
            let r = g.relu(y);
            let loss = g.mean_all(r).unwrap();
            let grads = g.backward(loss, &[x, w], false).unwrap();
            let mut out = g.value(grads.get(x).unwrap()).data().to_vec();
            out.extend_from_slice(g.value(grads.get(w).unwrap()).data());
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for row in 0..2 {
            let sum: f64 = v.data()[row * 3..row * 3 + 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = g.affine(x, 1.0, 123.5);
        let s2 = g.softmax(shifted, 1).unwrap();
        let v2 = g.value(s2);
        for (a, b) in v.data().iter().zip(v2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let g = Graph::<f64>::new();
        let a = g.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(tensor(&[1, 2], &[3.0, 4.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = g.slice(c, &[(1, 2), (0, 2)]).unwrap();
        assert_eq!(g.value(back).data(), &[3.0, 4.0]);
    }
}
