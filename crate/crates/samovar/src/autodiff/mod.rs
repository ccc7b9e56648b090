//! Dense reverse-mode autodiff over row-major tensors.
//!
//! A [`Graph`] is a tape of nodes created in topological order; [`Tensor`] is a
//! cheap handle (graph + node id). Tensors are immutable once created; calling
//! [`Tensor::backward`] on a scalar fills in gradients for every leaf created
//! with [`Graph::leaf`]. A graph supports exactly one backward call.
//!
//! The op set is the minimum needed by the forecaster stack: broadcast
//! elementwise arithmetic, batched matmul with transpose flags, cumulative sum,
//! shape movement (reshape / permute / gather / scatter / concat / slice),
//! reductions, `sqrt` / `softplus` / `gelu`, RMS and layer normalization with a
//! learnable gain, mask dropout with an explicit seeded RNG, and batched
//! triangular solves (used to invert LU-factorized mixing matrices with
//! gradients flowing through the solve).
//!
//! Every op validates shapes and, by default, scans its output for non-finite
//! values so numerical blowups surface at the op that produced them. Training
//! runs at `f32` or `f64` via the [`Scalar`] parameter; gradient oracles run at
//! `f64`.

mod check;
pub(crate) mod kernel;

pub use check::{finite_diff_check, FdReport};

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

/// Element type of tensors: `f32` for fast training, `f64` for oracles.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C <- alpha * A @ B + beta * C` over raw strided buffers.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by `m`/`k`/`n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced non-finite values (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward was already called on this graph")]
    BackwardTwice,
    #[error("backward target does not depend on any differentiable leaf")]
    DetachedBackward,
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, S),
    Scale(usize, S),
    Matmul { a: usize, b: usize, tb: bool },
    Cumsum { x: usize, axis: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Embed { x: usize, positions: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    Sqrt(usize),
    Softplus(usize),
    Gelu(usize),
    RmsNorm { x: usize, gain: usize, eps: S },
    LayerNorm { x: usize, gain: usize, eps: S },
    Dropout { x: usize, mask: Vec<S> },
    TriSolve { t: usize, b: usize, lower: bool, unit_diag: bool },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Cumsum { .. } => "cumsum",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::TriSolve { .. } => "tri_solve",
        }
    }
}

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

struct GraphInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    check_finite: bool,
}

/// Tape of tensor nodes. Confined to one logical execution; handles are `Rc`.
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

/// Handle to one node of a [`Graph`].
pub struct Tensor<S: Scalar> {
    g: Graph<S>,
    id: usize,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.g.inner.borrow();
        let n = &inner.nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("op", &n.op.name())
            .field("shape", &n.shape)
            .finish()
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { g: self.g.clone(), id: self.id }
    }
}

fn all_finite<S: Scalar>(data: &[S]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                backward_done: false,
                check_finite: true,
            })),
        }
    }

    /// Disable the per-op non-finite scan (oracle micro-benchmarks only).
    pub fn set_finite_checks(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    fn push(&self, op: Op<S>, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor<S>> {
        debug_assert_eq!(kernel::numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.check_finite && !all_finite(&data) {
            return Err(TensorError::NonFinite { op: op.name(), node: id });
        }
        inner.nodes.push(Node { data, shape, op, requires_grad, grad: None });
        Ok(Tensor { g: self.clone(), id })
    }

    /// Differentiable input; its gradient is available after `backward`.
    pub fn leaf(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        self.input(data, shape, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        self.input(data, shape, false)
    }

    fn input(&self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Tensor<S>> {
        if kernel::numel(shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: if requires_grad { "leaf" } else { "constant" },
                msg: format!("{} values do not fill shape {shape:?}", data.len()),
            });
        }
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.push(op, data, shape.to_vec(), requires_grad)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor<S>> {
        self.constant(vec![S::zero(); kernel::numel(shape)], shape)
    }

    pub fn full(&self, shape: &[usize], v: S) -> Result<Tensor<S>> {
        self.constant(vec![v; kernel::numel(shape)], shape)
    }

    /// Identity matrix constant.
    pub fn eye(&self, n: usize) -> Result<Tensor<S>> {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        self.constant(data, &[n, n])
    }

    fn same_graph(&self, other: &Graph<S>, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument { op, msg: "tensors belong to different graphs".into() })
        }
    }

    /// Concatenate along `axis`.
    pub fn concat(tensors: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = tensors.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "empty tensor list".into(),
        })?;
        let g = first.g.clone();
        let mut requires = false;
        let (data, shape) = {
            let inner = g.inner.borrow();
            let base_shape = inner.nodes[first.id].shape.clone();
            if axis >= base_shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    msg: format!("axis {axis} out of range for rank {}", base_shape.len()),
                });
            }
            let mut axis_total = 0usize;
            for t in tensors {
                g.same_graph(&t.g, "concat")?;
                let n = &inner.nodes[t.id];
                requires |= n.requires_grad;
                let mut want = base_shape.clone();
                want[axis] = n.shape[axis];
                if n.shape != want {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base_shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                axis_total += n.shape[axis];
            }
            let mut oshape = base_shape.clone();
            oshape[axis] = axis_total;
            let st = kernel::strides(&oshape);
            let inner_len = st[axis];
            let outer = kernel::numel(&oshape) / (inner_len * axis_total);
            let mut data = Vec::with_capacity(kernel::numel(&oshape));
            for o in 0..outer {
                for t in tensors {
                    let n = &inner.nodes[t.id];
                    let blk = n.shape[axis] * inner_len;
                    data.extend_from_slice(&n.data[o * blk..(o + 1) * blk]);
                }
            }
            (data, oshape)
        };
        let parts = tensors.iter().map(|t| t.id).collect();
        g.push(Op::Concat { parts, axis }, data, shape, requires)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn graph(&self) -> Graph<S> {
        self.g.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<S> {
        self.g.inner.borrow().nodes[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        let inner = self.g.inner.borrow();
        let n = &inner.nodes[self.id];
        if n.data.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                msg: format!("expected one element, shape is {:?}", n.shape),
            });
        }
        Ok(n.data[0])
    }

    /// Gradient of a leaf after `backward`; `None` before backward, on
    /// non-leaf nodes, and on leaves the loss never touched.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.g.inner.borrow().nodes[self.id].grad.clone()
    }

    fn with_nodes<R>(&self, f: impl FnOnce(&[Node<S>]) -> R) -> R {
        f(&self.g.inner.borrow().nodes)
    }

    fn binary(&self, other: &Tensor<S>, op_name: &'static str) -> Result<(Vec<usize>, bool)> {
        self.g.same_graph(&other.g, op_name)?;
        self.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let out = kernel::broadcast_shapes(&a.shape, &b.shape).ok_or(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })?;
            Ok((out, a.requires_grad || b.requires_grad))
        })
    }

    fn elementwise(
        &self,
        other: &Tensor<S>,
        op_name: &'static str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (oshape, requires) = self.binary(other, op_name)?;
        let data = self.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            kernel::binary_broadcast(&a.data, &a.shape, &b.data, &b.shape, &oshape, f)
        });
        self.g.push(op, data, oshape, requires)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn add_scalar(&self, c: S) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (a.data.iter().map(|&v| v + c).collect(), a.shape.clone(), a.requires_grad)
        });
        self.g.push(Op::AddScalar(self.id, c), data, shape, req)
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (a.data.iter().map(|&v| v * c).collect(), a.shape.clone(), a.requires_grad)
        });
        self.g.push(Op::Scale(self.id, c), data, shape, req)
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.scale(-S::one())
    }

    pub fn square(&self) -> Result<Tensor<S>> {
        self.mul(self)
    }

    /// `self @ other`; trailing two dims are matrices, leading dims broadcast.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, false)
    }

    /// `self @ otherᵀ` (transpose applies to the trailing two dims).
    pub fn matmul_t(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<S>, tb: bool) -> Result<Tensor<S>> {
        self.g.same_graph(&other.g, "matmul")?;
        let (data, shape, requires) = {
            let inner = self.g.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (data, shape) = kernel::matmul(&a.data, &a.shape, false, &b.data, &b.shape, tb)
                .map_err(|msg| TensorError::InvalidArgument { op: "matmul", msg })?;
            (data, shape, a.requires_grad || b.requires_grad)
        };
        self.g.push(Op::Matmul { a: self.id, b: other.id, tb }, data, shape, requires)
    }

    pub fn cumsum(&self, axis: usize) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "cumsum",
                    msg: format!("axis {axis} out of range for rank {}", a.shape.len()),
                });
            }
            Ok((kernel::cumsum(&a.data, &a.shape, axis), a.shape.clone(), a.requires_grad))
        })?;
        self.g.push(Op::Cumsum { x: self.id, axis }, data, shape, req)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let (data, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if kernel::numel(shape) != a.data.len() {
                return Err(TensorError::InvalidArgument {
                    op: "reshape",
                    msg: format!("cannot view {:?} as {shape:?}", a.shape),
                });
            }
            Ok((a.data.clone(), a.requires_grad))
        })?;
        self.g.push(Op::Reshape { x: self.id }, data, shape.to_vec(), req)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let mut seen = vec![false; a.shape.len()];
            if axes.len() != a.shape.len() || axes.iter().any(|&ax| ax >= seen.len() || std::mem::replace(&mut seen[ax], true)) {
                return Err(TensorError::InvalidArgument {
                    op: "permute",
                    msg: format!("{axes:?} is not a permutation of rank {}", a.shape.len()),
                });
            }
            let (d, s) = kernel::permute(&a.data, &a.shape, axes);
            Ok((d, s, a.requires_grad))
        })?;
        self.g.push(Op::Permute { x: self.id, axes: axes.to_vec() }, data, shape, req)
    }

    /// Transpose the trailing two dims.
    pub fn transpose2(&self) -> Result<Tensor<S>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: "transpose needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "index_select",
                    msg: format!("axis {axis} out of range for rank {}", a.shape.len()),
                });
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.shape[axis]) {
                return Err(TensorError::InvalidArgument {
                    op: "index_select",
                    msg: format!("index {bad} out of range for axis extent {}", a.shape[axis]),
                });
            }
            let (d, s) = kernel::index_select(&a.data, &a.shape, axis, indices);
            Ok((d, s, a.requires_grad))
        })?;
        self.g.push(Op::IndexSelect { x: self.id, axis, indices: indices.to_vec() }, data, shape, req)
    }

    /// Scatter this tensor's elements into a zero tensor of `out_shape`;
    /// `positions[i]` is the flat destination of element `i`. Positions must
    /// be distinct.
    pub fn embed(&self, out_shape: &[usize], positions: &[usize]) -> Result<Tensor<S>> {
        let out_len = kernel::numel(out_shape);
        let (data, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if positions.len() != a.data.len() {
                return Err(TensorError::InvalidArgument {
                    op: "embed",
                    msg: format!("{} positions for {} elements", positions.len(), a.data.len()),
                });
            }
            let mut seen = vec![false; out_len];
            let mut data = vec![S::zero(); out_len];
            for (&p, &v) in positions.iter().zip(&a.data) {
                if p >= out_len || std::mem::replace(&mut seen[p], true) {
                    return Err(TensorError::InvalidArgument {
                        op: "embed",
                        msg: format!("position {p} out of range or duplicated"),
                    });
                }
                data[p] = v;
            }
            Ok((data, a.requires_grad))
        })?;
        self.g.push(Op::Embed { x: self.id, positions: positions.to_vec() }, data, out_shape.to_vec(), req)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if axis >= a.shape.len() || start + len > a.shape[axis] {
                return Err(TensorError::InvalidArgument {
                    op: "slice",
                    msg: format!("range {start}..{} out of bounds on axis {axis} of {:?}", start + len, a.shape),
                });
            }
            let idx: Vec<usize> = (start..start + len).collect();
            let (d, s) = kernel::index_select(&a.data, &a.shape, axis, &idx);
            Ok((d, s, a.requires_grad))
        })?;
        self.g.push(Op::Slice { x: self.id, axis, start }, data, shape, req)
    }

    /// Sum along `axis`, keeping it as extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "sum_axis",
                    msg: format!("axis {axis} out of range for rank {}", a.shape.len()),
                });
            }
            let (d, s) = kernel::sum_axis(&a.data, &a.shape, axis);
            Ok((d, s, a.requires_grad))
        })?;
        self.g.push(Op::SumAxis { x: self.id, axis }, data, shape, req)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let n = self.shape().get(axis).copied().unwrap_or(0).max(1);
        self.sum_axis(axis)?.scale(S::one() / S::from_f64(n as f64))
    }

    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let (data, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (vec![a.data.iter().copied().sum()], a.requires_grad)
        });
        self.g.push(Op::SumAll { x: self.id }, data, vec![1], req)
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        let n = self.numel().max(1);
        self.sum_all()?.scale(S::one() / S::from_f64(n as f64))
    }

    fn unary(&self, op: Op<S>, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
        let (data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (a.data.iter().map(|&v| f(v)).collect(), a.shape.clone(), a.requires_grad)
        });
        self.g.push(op, data, shape, req)
    }

    pub fn sqrt(&self) -> Result<Tensor<S>> {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn softplus(&self) -> Result<Tensor<S>> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn gelu(&self) -> Result<Tensor<S>> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// RMS-normalize the last axis and multiply by `gain` (shape = last axis).
    pub fn rms_norm(&self, gain: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        self.norm_common(gain, eps, false)
    }

    /// Layer-normalize the last axis (mean/variance) and multiply by `gain`.
    pub fn layer_norm(&self, gain: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        self.norm_common(gain, eps, true)
    }

    fn norm_common(&self, gain: &Tensor<S>, eps: S, center: bool) -> Result<Tensor<S>> {
        let op_name = if center { "layer_norm" } else { "rms_norm" };
        self.g.same_graph(&gain.g, op_name)?;
        let (data, shape, req) = {
            let inner = self.g.inner.borrow();
            let (x, gn) = (&inner.nodes[self.id], &inner.nodes[gain.id]);
            let last = *x.shape.last().ok_or(TensorError::InvalidArgument {
                op: op_name,
                msg: "rank 0 input".into(),
            })?;
            if gn.shape != [last] {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: x.shape.clone(),
                    rhs: gn.shape.clone(),
                });
            }
            let mut data = vec![S::zero(); x.data.len()];
            let inv_n = S::one() / S::from_f64(last as f64);
            for (row_in, row_out) in x.data.chunks_exact(last).zip(data.chunks_exact_mut(last)) {
                let mu = if center {
                    row_in.iter().copied().sum::<S>() * inv_n
                } else {
                    S::zero()
                };
                let ms = row_in.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_n;
                let inv_r = S::one() / (ms + eps).sqrt();
                for ((o, &v), &g) in row_out.iter_mut().zip(row_in).zip(&gn.data) {
                    *o = (v - mu) * inv_r * g;
                }
            }
            (data, x.shape.clone(), x.requires_grad || gn.requires_grad)
        };
        let op = if center {
            Op::LayerNorm { x: self.id, gain: gain.id, eps }
        } else {
            Op::RmsNorm { x: self.id, gain: gain.id, eps }
        };
        self.g.push(op, data, shape, req)
    }

    /// Mask dropout: keeps each element with probability `1 - p`, scaling kept
    /// values by `1/(1-p)`. The mask is drawn from `rng` at graph build time,
    /// so a fixed seed gives a fixed mask stream. `p == 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let (mask, data, shape, req) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let mask: Vec<S> = (0..a.data.len())
                .map(|_| if rng.gen::<f64>() < p { S::zero() } else { scale })
                .collect();
            let data = a.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (mask, data, a.shape.clone(), a.requires_grad)
        });
        self.g.push(Op::Dropout { x: self.id, mask }, data, shape, req)
    }

    /// Solve `T X = B` where `self` is triangular in its trailing two dims.
    /// Batch dims broadcast as in `matmul`; gradients flow into both `T` and `B`.
    pub fn tri_solve(&self, b: &Tensor<S>, lower: bool, unit_diag: bool) -> Result<Tensor<S>> {
        self.g.same_graph(&b.g, "tri_solve")?;
        let (data, shape, req) = {
            let inner = self.g.inner.borrow();
            let (t, rhs) = (&inner.nodes[self.id], &inner.nodes[b.id]);
            let (d, s) = tri_solve_batched(&t.data, &t.shape, false, &rhs.data, &rhs.shape, lower, unit_diag)?;
            (d, s, t.requires_grad || rhs.requires_grad)
        };
        self.g.push(Op::TriSolve { t: self.id, b: b.id, lower, unit_diag }, data, shape, req)
    }

    /// Reverse-mode differentiation from a scalar node. Fills `grad` on leaves.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.g.inner.borrow_mut();
        if inner.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss = &inner.nodes[self.id];
        if loss.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        if !loss.requires_grad {
            return Err(TensorError::DetachedBackward);
        }
        inner.backward_done = true;
        let n_nodes = inner.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n_nodes];
        grads[self.id] = Some(vec![S::one()]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                inner.nodes[id].grad = Some(g);
                continue;
            }
            backprop_node(&inner.nodes, id, &g, &mut grads)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise scalar functions
// ---------------------------------------------------------------------------

fn softplus<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + exp(-|x|)) is stable for large |x|
    x.max(S::zero()) + x.abs().neg().exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Batched triangular solve (shared by forward and adjoint)
// ---------------------------------------------------------------------------

fn tri_solve_batched<S: Scalar>(
    t: &[S],
    tshape: &[usize],
    trans_t: bool,
    b: &[S],
    bshape: &[usize],
    lower: bool,
    unit_diag: bool,
) -> Result<(Vec<S>, Vec<usize>)> {
    let err = |msg: String| TensorError::InvalidArgument { op: "tri_solve", msg };
    if tshape.len() < 2 || bshape.len() < 2 {
        return Err(err(format!("needs rank >= 2 operands, got {tshape:?} and {bshape:?}")));
    }
    let (tbatch, tm) = tshape.split_at(tshape.len() - 2);
    let (bbatch, bm) = bshape.split_at(bshape.len() - 2);
    let n = tm[0];
    if tm[1] != n || bm[0] != n {
        return Err(err(format!("dimension mismatch: T {tm:?} vs B {bm:?}")));
    }
    let m = bm[1];
    let batch = kernel::broadcast_shapes(tbatch, bbatch)
        .ok_or_else(|| err(format!("batch dims incompatible: {tbatch:?} vs {bbatch:?}")))?;
    let nb = kernel::numel(&batch);
    let mut out = vec![S::zero(); nb * n * m];
    let st = broadcast_block_strides(tbatch, &batch);
    let sb = broadcast_block_strides(bbatch, &batch);
    let mut idx = vec![0usize; batch.len()];
    let (mut ot, mut ob) = (0usize, 0usize);
    for bi in 0..nb {
        kernel::tri_solve_block(
            &t[ot * n * n..(ot + 1) * n * n],
            n,
            lower,
            unit_diag,
            trans_t,
            &b[ob * n * m..(ob + 1) * n * m],
            m,
            &mut out[bi * n * m..(bi + 1) * n * m],
        )
        .map_err(|msg| TensorError::InvalidArgument { op: "tri_solve", msg })?;
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            ob += sb[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * batch[d];
            ob -= sb[d] * batch[d];
        }
    }
    let mut oshape = batch;
    oshape.push(n);
    oshape.push(m);
    Ok((out, oshape))
}

/// Per-batch-dim block strides of `shape` viewed through `out_batch`.
fn broadcast_block_strides(shape: &[usize], out_batch: &[usize]) -> Vec<usize> {
    let pad = out_batch.len() - shape.len();
    let st = kernel::strides(shape);
    let mut out = vec![0usize; out_batch.len()];
    for i in 0..out_batch.len() {
        if i >= pad && shape[i - pad] != 1 {
            out[i] = st[i - pad];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backward dispatch
// ---------------------------------------------------------------------------

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, delta: Vec<S>) {
    match slot {
        Some(buf) => {
            for (d, s) in buf.iter_mut().zip(delta) {
                *d += s;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Add `g` (shaped like node `out`) into input `input`'s slot, reducing over
/// broadcast dims first. Skips inputs that do not require gradients.
fn feed<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    input: usize,
    g: Vec<S>,
    gshape: &[usize],
) {
    if !nodes[input].requires_grad {
        return;
    }
    let target = &nodes[input].shape;
    let reduced = if gshape == &target[..] {
        g
    } else {
        kernel::reduce_to_shape(&g, gshape, target)
    };
    accumulate(&mut grads[input], reduced);
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<()> {
    let node = &nodes[id];
    let oshape = &node.shape;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            feed(nodes, grads, *a, g.to_vec(), oshape);
            feed(nodes, grads, *b, g.to_vec(), oshape);
        }
        Op::Sub(a, b) => {
            feed(nodes, grads, *a, g.to_vec(), oshape);
            feed(nodes, grads, *b, g.iter().map(|&v| -v).collect(), oshape);
        }
        Op::Mul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            if requires(nodes, *a) {
                let da = kernel::binary_broadcast(g, oshape, &nb.data, &nb.shape, oshape, |x, y| x * y);
                feed(nodes, grads, *a, da, oshape);
            }
            if requires(nodes, *b) {
                let db = kernel::binary_broadcast(g, oshape, &na.data, &na.shape, oshape, |x, y| x * y);
                feed(nodes, grads, *b, db, oshape);
            }
        }
        Op::Div(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            if requires(nodes, *a) {
                let da = kernel::binary_broadcast(g, oshape, &nb.data, &nb.shape, oshape, |x, y| x / y);
                feed(nodes, grads, *a, da, oshape);
            }
            if requires(nodes, *b) {
                // d/db (a/b) = -a / b^2
                let aexp = kernel::binary_broadcast(&na.data, &na.shape, &nb.data, &nb.shape, oshape, |x, y| {
                    -x / (y * y)
                });
                let db: Vec<S> = g.iter().zip(&aexp).map(|(&gv, &v)| gv * v).collect();
                feed(nodes, grads, *b, db, oshape);
            }
        }
        Op::AddScalar(a, _) => feed(nodes, grads, *a, g.to_vec(), oshape),
        Op::Scale(a, c) => feed(nodes, grads, *a, g.iter().map(|&v| v * *c).collect(), oshape),
        Op::Matmul { a, b, tb } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            if requires(nodes, *a) {
                // dA = G @ B'ᵀ  (B' = tb ? Bᵀ : B)
                let (da, dshape) = kernel::matmul(g, oshape, false, &nb.data, &nb.shape, !tb)
                    .map_err(|msg| TensorError::InvalidArgument { op: "matmul_backward", msg })?;
                feed(nodes, grads, *a, da, &dshape);
            }
            if requires(nodes, *b) {
                // dB' = A'ᵀ @ G; when tb, store its transpose Gᵀ @ A'.
                let (db, dshape) = if *tb {
                    kernel::matmul(g, oshape, true, &na.data, &na.shape, false)
                } else {
                    kernel::matmul(&na.data, &na.shape, true, g, oshape, false)
                }
                .map_err(|msg| TensorError::InvalidArgument { op: "matmul_backward", msg })?;
                feed(nodes, grads, *b, db, &dshape);
            }
        }
        Op::Cumsum { x, axis } => {
            let dx = kernel::cumsum_reverse(g, oshape, *axis);
            feed(nodes, grads, *x, dx, oshape);
        }
        Op::Reshape { x } => {
            feed(nodes, grads, *x, g.to_vec(), &nodes[*x].shape.clone());
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (dx, dshape) = kernel::permute(g, oshape, &inverse);
            feed(nodes, grads, *x, dx, &dshape);
        }
        Op::IndexSelect { x, axis, indices } => {
            let dx = kernel::index_scatter_add(g, *axis, indices, &nodes[*x].shape);
            let xshape = nodes[*x].shape.clone();
            feed(nodes, grads, *x, dx, &xshape);
        }
        Op::Embed { x, positions } => {
            let dx: Vec<S> = positions.iter().map(|&p| g[p]).collect();
            let xshape = nodes[*x].shape.clone();
            feed(nodes, grads, *x, dx, &xshape);
        }
        Op::Concat { parts, axis } => {
            let st = kernel::strides(oshape);
            let inner_len = st[*axis];
            let total = oshape[*axis];
            let outer = g.len() / (inner_len * total);
            let mut offset = 0usize;
            for &p in parts {
                let ext = nodes[p].shape[*axis];
                if requires(nodes, p) {
                    let mut dp = Vec::with_capacity(outer * ext * inner_len);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner_len;
                        dp.extend_from_slice(&g[base..base + ext * inner_len]);
                    }
                    let pshape = nodes[p].shape.clone();
                    feed(nodes, grads, p, dp, &pshape);
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            let idx: Vec<usize> = (*start..*start + oshape[*axis]).collect();
            let dx = kernel::index_scatter_add(g, *axis, &idx, &nodes[*x].shape);
            let xshape = nodes[*x].shape.clone();
            feed(nodes, grads, *x, dx, &xshape);
        }
        Op::SumAxis { x, axis } => {
            let xshape = nodes[*x].shape.clone();
            let extent = xshape[*axis];
            let st = kernel::strides(&xshape);
            let inner_len = st[*axis];
            let outer = kernel::numel(&xshape) / (inner_len * extent);
            let mut dx = vec![S::zero(); kernel::numel(&xshape)];
            for o in 0..outer {
                let src = &g[o * inner_len..(o + 1) * inner_len];
                for l in 0..extent {
                    let dst = &mut dx[(o * extent + l) * inner_len..(o * extent + l + 1) * inner_len];
                    dst.copy_from_slice(src);
                }
            }
            feed(nodes, grads, *x, dx, &xshape);
        }
        Op::SumAll { x } => {
            let xshape = nodes[*x].shape.clone();
            let dx = vec![g[0]; kernel::numel(&xshape)];
            feed(nodes, grads, *x, dx, &xshape);
        }
        Op::Sqrt(x) => {
            let half = S::from_f64(0.5);
            let dx: Vec<S> = g.iter().zip(&node.data).map(|(&gv, &y)| gv * half / y).collect();
            feed(nodes, grads, *x, dx, oshape);
        }
        Op::Softplus(x) => {
            let dx: Vec<S> = g.iter().zip(&nodes[*x].data).map(|(&gv, &v)| gv * sigmoid(v)).collect();
            feed(nodes, grads, *x, dx, oshape);
        }
        Op::Gelu(x) => {
            let dx: Vec<S> = g.iter().zip(&nodes[*x].data).map(|(&gv, &v)| gv * gelu_grad(v)).collect();
            feed(nodes, grads, *x, dx, oshape);
        }
        Op::RmsNorm { x, gain, eps } | Op::LayerNorm { x, gain, eps } => {
            let center = matches!(node.op, Op::LayerNorm { .. });
            let nx = &nodes[*x];
            let ng = &nodes[*gain];
            let last = *nx.shape.last().unwrap();
            let inv_n = S::one() / S::from_f64(last as f64);
            let mut dx = vec![S::zero(); nx.data.len()];
            let mut dgain = vec![S::zero(); last];
            for ((row_x, row_g), row_dx) in nx
                .data
                .chunks_exact(last)
                .zip(g.chunks_exact(last))
                .zip(dx.chunks_exact_mut(last))
            {
                let mu = if center {
                    row_x.iter().copied().sum::<S>() * inv_n
                } else {
                    S::zero()
                };
                let ms = row_x.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_n;
                let inv_r = S::one() / (ms + *eps).sqrt();
                // a_i = g_i * gain_i; dgain_i += g_i * xhat_i
                let mut dot_ax = S::zero();
                let mut mean_a = S::zero();
                for ((&gv, &xv), (&gnv, dg)) in
                    row_g.iter().zip(row_x).zip(ng.data.iter().zip(dgain.iter_mut()))
                {
                    let xhat = (xv - mu) * inv_r;
                    *dg += gv * xhat;
                    let a = gv * gnv;
                    dot_ax += a * xhat;
                    mean_a += a;
                }
                dot_ax *= inv_n;
                mean_a *= inv_n;
                for ((dxi, &gv), (&xv, &gnv)) in row_dx
                    .iter_mut()
                    .zip(row_g)
                    .zip(row_x.iter().zip(&ng.data))
                {
                    let xhat = (xv - mu) * inv_r;
                    let a = gv * gnv;
                    let mut v = a - xhat * dot_ax;
                    if center {
                        v = v - mean_a;
                    }
                    *dxi = v * inv_r;
                }
            }
            if requires(nodes, *x) {
                let xshape = nx.shape.clone();
                feed(nodes, grads, *x, dx, &xshape);
            }
            if requires(nodes, *gain) {
                feed(nodes, grads, *gain, dgain, &[last]);
            }
        }
        Op::Dropout { x, mask } => {
            let dx: Vec<S> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            feed(nodes, grads, *x, dx, oshape);
        }
        Op::TriSolve { t, b, lower, unit_diag } => {
            let nt = &nodes[*t];
            // dB = T⁻ᵀ G, broadcast over the same batch as the forward solve.
            let (db, dbshape) =
                tri_solve_batched(&nt.data, &nt.shape, true, g, oshape, *lower, *unit_diag)?;
            if requires(nodes, *t) {
                // dT = -dB @ Xᵀ, masked to the active triangle.
                let (mut dt, dtshape) = kernel::matmul(&db, &dbshape, false, &node.data, oshape, true)
                    .map_err(|msg| TensorError::InvalidArgument { op: "tri_solve_backward", msg })?;
                let n = *nt.shape.last().unwrap();
                for block in dt.chunks_exact_mut(n * n) {
                    for i in 0..n {
                        for j in 0..n {
                            let keep = if *lower { i > j || (i == j && !*unit_diag) } else { j > i || (i == j && !*unit_diag) };
                            if !keep {
                                block[i * n + j] = S::zero();
                            }
                        }
                    }
                }
                let dt: Vec<S> = dt.iter().map(|&v| -v).collect();
                feed(nodes, grads, *t, dt, &dtshape);
            }
            if requires(nodes, *b) {
                feed(nodes, grads, *b, db, &dbshape);
            }
        }
    }
    Ok(())
}

fn requires<S: Scalar>(nodes: &[Node<S>], id: usize) -> bool {
    nodes[id].requires_grad
}
