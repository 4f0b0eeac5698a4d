//! Recording graph with eager tangent propagation.
//!
//! Every operation computes its value immediately. When any operand carries a
//! tangent, the output tangent is computed alongside by the primitive's
//! forward-mode rule, so a JVP is a single evaluation with tangent-carrying
//! leaves. The same recording is replayed backwards by
//! [`Graph::backward`](crate::Graph::backward) for parameter gradients.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvDims, MatMulDims};
use crate::tensor::{numel, Tensor};

/// The complete set of differentiable operations. Everything else is composed
/// from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Reshape,
    Permute,
    Broadcast,
    Concat,
    Slice,
    Sum,
    Silu,
    Sin,
    Cos,
    Softmax,
    RmsNormalize,
    Conv1d,
    Gather,
    StopGradient,
}

impl Primitive {
    pub const ALL: [Primitive; 19] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::MatMul,
        Primitive::Reshape,
        Primitive::Permute,
        Primitive::Broadcast,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Sum,
        Primitive::Silu,
        Primitive::Sin,
        Primitive::Cos,
        Primitive::Softmax,
        Primitive::RmsNormalize,
        Primitive::Conv1d,
        Primitive::Gather,
        Primitive::StopGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Reshape => "reshape",
            Primitive::Permute => "permute",
            Primitive::Broadcast => "broadcast",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Sum => "sum",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Softmax => "softmax",
            Primitive::RmsNormalize => "rms_normalize",
            Primitive::Conv1d => "conv1d",
            Primitive::Gather => "gather",
            Primitive::StopGradient => "stop_gradient",
        }
    }
}

/// Which primitives a graph accepts, plus an optional fault hook that scales
/// one primitive's derivative rules (both modes). The hook exists so oracle
/// suites can prove they detect a wrong derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSet {
    enabled: BTreeSet<Primitive>,
    perturbed: Option<(Primitive, f64)>,
}

impl Default for PrimitiveSet {
    fn default() -> Self {
        Self::all()
    }
}

impl PrimitiveSet {
    pub fn all() -> Self {
        PrimitiveSet {
            enabled: Primitive::ALL.into_iter().collect(),
            perturbed: None,
        }
    }

    pub fn without(mut self, p: Primitive) -> Self {
        self.enabled.remove(&p);
        self
    }

    /// Multiply the tangent and adjoint rules of `p` by `factor`.
    pub fn with_perturbed_derivative(mut self, p: Primitive, factor: f64) -> Self {
        self.perturbed = Some((p, factor));
        self
    }

    pub fn contains(&self, p: Primitive) -> bool {
        self.enabled.contains(&p)
    }

    pub(crate) fn derivative_factor(&self, p: Primitive) -> Option<f64> {
        match self.perturbed {
            Some((q, f)) if q == p => Some(f),
            _ => None,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool, dims: MatMulDims },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Broadcast(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAll(Var),
    SumLast(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Softmax(Var),
    RmsNormalize { input: Var, eps: f64 },
    Conv1d { x: Var, w: Var, dims: ConvDims },
    Gather { table: Var, indices: Vec<usize> },
    StopGradient(Var),
}

impl Op {
    pub(crate) fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Permute(..) => Primitive::Permute,
            Op::Broadcast(..) => Primitive::Broadcast,
            Op::Concat { .. } => Primitive::Concat,
            Op::Slice { .. } => Primitive::Slice,
            Op::SumAll(..) | Op::SumLast(..) => Primitive::Sum,
            Op::Silu(..) => Primitive::Silu,
            Op::Sin(..) => Primitive::Sin,
            Op::Cos(..) => Primitive::Cos,
            Op::Softmax(..) => Primitive::Softmax,
            Op::RmsNormalize { .. } => Primitive::RmsNormalize,
            Op::Conv1d { .. } => Primitive::Conv1d,
            Op::Gather { .. } => Primitive::Gather,
            Op::StopGradient(..) => Primitive::StopGradient,
        })
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Broadcast(a)
            | Op::SumAll(a)
            | Op::SumLast(a)
            | Op::Silu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Softmax(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Slice { input, .. } | Op::RmsNormalize { input, .. } => vec![*input],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op,
    pub(crate) value: Tensor<T>,
    pub(crate) tangent: Option<Tensor<T>>,
    pub(crate) needs_grad: bool,
}

/// Computation record. Values are immutable once pushed.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) prims: PrimitiveSet,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu_scalar<T: Element>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_derivative<T: Element>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Numpy broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_primitives(PrimitiveSet::all())
    }

    pub fn with_primitives(prims: PrimitiveSet) -> Self {
        Graph {
            nodes: Vec::new(),
            prims,
        }
    }

    pub fn primitives(&self) -> &PrimitiveSet {
        &self.prims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Output tangent of `v`; `None` means identically zero.
    pub fn tangent(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].tangent.as_ref()
    }

    pub fn tangent_or_zeros(&self, v: Var) -> Tensor<T> {
        self.tangent(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf(&mut self, value: Tensor<T>, tangent: Option<Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            tangent,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value with zero tangent that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, None, false)
    }

    /// A differentiation input carrying an optional tangent.
    pub fn input(&mut self, value: Tensor<T>, tangent: Option<Tensor<T>>) -> Result<Var> {
        if let Some(t) = &tangent {
            if t.shape() != value.shape() {
                return Err(AutodiffError::shape("input tangent", value.shape(), t.shape()));
            }
        }
        Ok(self.leaf(value, tangent, false))
    }

    /// A leaf that accumulates a gradient in [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, None, true)
    }

    fn push(&mut self, op: Op, value: Vec<T>, shape: Vec<usize>, tangent: Option<Vec<T>>) -> Result<Var> {
        let prim = op.primitive().expect("push is only used for primitive ops");
        if !self.prims.contains(prim) {
            return Err(AutodiffError::UnregisteredPrimitive(prim));
        }
        let name = prim.name();
        if !value.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let tangent = match tangent {
            Some(mut t) => {
                if let Some(f) = self.prims.derivative_factor(prim) {
                    let f = T::from_f64(f);
                    t.iter_mut().for_each(|v| *v = *v * f);
                }
                if !t.iter().all(|v| v.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: name });
                }
                Some(Tensor::from_parts(shape.clone(), t))
            }
            None => None,
        };
        let needs_grad = match op {
            Op::StopGradient(_) => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, value),
            tangent,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tan(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tangent.as_ref().map(|t| t.data())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::shape(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let value = zip(self.data(a), self.data(b), |x, y| x + y);
        let tangent = match (self.tan(a), self.tan(b)) {
            (Some(ta), Some(tb)) => Some(zip(ta, tb, |x, y| x + y)),
            (Some(t), None) | (None, Some(t)) => Some(t.to_vec()),
            (None, None) => None,
        };
        self.push(Op::Add(a, b), value, shape, tangent)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let value = zip(self.data(a), self.data(b), |x, y| x - y);
        let tangent = match (self.tan(a), self.tan(b)) {
            (Some(ta), Some(tb)) => Some(zip(ta, tb, |x, y| x - y)),
            (Some(t), None) => Some(t.to_vec()),
            (None, Some(t)) => Some(t.iter().map(|&v| -v).collect()),
            (None, None) => None,
        };
        self.push(Op::Sub(a, b), value, shape, tangent)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let value = zip(xa, xb, |x, y| x * y);
        let tangent = match (self.tan(a), self.tan(b)) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = vec![T::zero(); value.len()];
                if let Some(ta) = ta {
                    t.iter_mut().zip(ta.iter().zip(xb)).for_each(|(o, (&d, &y))| *o = *o + d * y);
                }
                if let Some(tb) = tb {
                    t.iter_mut().zip(tb.iter().zip(xa)).for_each(|(o, (&d, &x))| *o = *o + x * d);
                }
                Some(t)
            }
        };
        self.push(Op::Mul(a, b), value, shape, tangent)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let kt = T::from_f64(k);
        let value = self.data(a).iter().map(|&v| v * kt).collect();
        let tangent = self.tan(a).map(|t| t.iter().map(|&v| v * kt).collect());
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, k), value, shape, tangent)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Batched product `[.., m, k] x [.., k, n]`. The right operand may be a
    /// plain `[k, n]` matrix shared across the batch. With `trans_b` the right
    /// operand is stored `[.., n, k]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(AutodiffError::invalid("matmul", format!("operands need rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(AutodiffError::shape("matmul", &sa, &sb));
        }
        let batch_dims = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *batch_dims {
            return Err(AutodiffError::shape("matmul", &sa, &sb));
        }
        let dims = MatMulDims {
            batch: batch_dims.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![T::zero(); numel(&out_shape)];
        kernels::matmul_forward(dims, self.data(a), self.data(b), trans_b, &mut value, T::zero());
        let tangent = match (self.tan(a), self.tan(b)) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = vec![T::zero(); value.len()];
                if let Some(ta) = ta {
                    kernels::matmul_forward(dims, ta, self.data(b), trans_b, &mut t, T::one());
                }
                if let Some(tb) = tb {
                    kernels::matmul_forward(dims, self.data(a), tb, trans_b, &mut t, T::one());
                }
                Some(t)
            }
        };
        self.push(Op::MatMul { a, b, trans_b, dims }, value, out_shape, tangent)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(AutodiffError::shape("reshape", self.shape(a), shape));
        }
        let value = self.data(a).to_vec();
        let tangent = self.tan(a).map(|t| t.to_vec());
        self.push(Op::Reshape(a), value, shape.to_vec(), tangent)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(AutodiffError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (value, out_shape) = kernels::permute(self.data(a), &shape, perm);
        let tangent = self.tan(a).map(|t| kernels::permute(t, &shape, perm).0);
        self.push(Op::Permute(a, perm.to_vec()), value, out_shape, tangent)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(AutodiffError::invalid("permute", "transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        if broadcast_shapes(&from, shape).as_deref() != Some(shape) {
            return Err(AutodiffError::shape("broadcast", shape, &from));
        }
        if from == shape {
            return Ok(a);
        }
        let value = kernels::broadcast(self.data(a), &from, shape);
        let tangent = self.tan(a).map(|t| kernels::broadcast(t, &from, shape));
        self.push(Op::Broadcast(a), value, shape.to_vec(), tangent)
    }

    fn broadcast_pair(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let target = broadcast_shapes(self.shape(a), self.shape(b))
            .ok_or_else(|| AutodiffError::shape(op, self.shape(a), self.shape(b)))?;
        Ok((self.broadcast_to(a, &target)?, self.broadcast_to(b, &target)?))
    }

    /// `a + b` after numpy broadcasting.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        self.add(a, b)
    }

    pub fn sub_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("sub", a, b)?;
        self.sub(a, b)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        self.mul(a, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::invalid("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let gather = |parts: &[&[T]]| {
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for (p, &v) in parts.iter().zip(inputs) {
                    let chunk = self.shape(v)[axis..].iter().product::<usize>();
                    out.extend_from_slice(&p[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        };
        let values: Vec<&[T]> = inputs.iter().map(|&v| self.data(v)).collect();
        let value = gather(&values);
        let tangent = if inputs.iter().any(|&v| self.tan(v).is_some()) {
            let zeros: Vec<Vec<T>> = inputs
                .iter()
                .map(|&v| if self.tan(v).is_none() { vec![T::zero(); numel(self.shape(v))] } else { Vec::new() })
                .collect();
            let parts: Vec<&[T]> = inputs
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| self.tan(v).unwrap_or(z.as_slice()))
                .collect();
            Some(gather(&parts))
        } else {
            None
        };
        self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value, out_shape, tangent)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let value = kernels::slice_axis(self.data(a), &shape, axis, start, len);
        let tangent = self.tan(a).map(|t| kernels::slice_axis(t, &shape, axis, start, len));
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Op::Slice { input: a, axis, start }, value, out_shape, tangent)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = vec![self.data(a).iter().copied().sum()];
        let tangent = self.tan(a).map(|t| vec![t.iter().copied().sum()]);
        self.push(Op::SumAll(a), value, Vec::new(), tangent)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = numel(self.shape(a)).max(1);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or_else(|| AutodiffError::invalid("sum", "rank-0 input"))?;
        let rows = |x: &[T]| x.chunks_exact(w.max(1)).map(|r| r.iter().copied().sum()).collect::<Vec<T>>();
        let value = rows(self.data(a));
        let tangent = self.tan(a).map(rows);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        self.push(Op::SumLast(a), value, out_shape, tangent)
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let w = *self.shape(a).last().unwrap_or(&1);
        let s = self.sum_last(a)?;
        self.scale(s, 1.0 / w.max(1) as f64)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let value = x.iter().map(|&v| silu_scalar(v)).collect();
        let tangent = self.tan(a).map(|t| zip(x, t, |v, d| silu_derivative(v) * d));
        let shape = self.shape(a).to_vec();
        self.push(Op::Silu(a), value, shape, tangent)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let value = x.iter().map(|v| v.sin()).collect();
        let tangent = self.tan(a).map(|t| zip(x, t, |v, d| v.cos() * d));
        let shape = self.shape(a).to_vec();
        self.push(Op::Sin(a), value, shape, tangent)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let value = x.iter().map(|v| v.cos()).collect();
        let tangent = self.tan(a).map(|t| zip(x, t, |v, d| -v.sin() * d));
        let shape = self.shape(a).to_vec();
        self.push(Op::Cos(a), value, shape, tangent)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or_else(|| AutodiffError::invalid("softmax", "rank-0 input"))?;
        let value = kernels::softmax_rows(self.data(a), w);
        let tangent = self.tan(a).map(|t| kernels::softmax_jacobian_apply(&value, t, w));
        self.push(Op::Softmax(a), value, shape, tangent)
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or_else(|| AutodiffError::invalid("rms_normalize", "rank-0 input"))?;
        if eps <= 0.0 {
            return Err(AutodiffError::invalid("rms_normalize", "eps must be positive"));
        }
        let x = self.data(a);
        let inv = kernels::inv_rms_rows(x, w, T::from_f64(eps));
        let value = x
            .chunks_exact(w)
            .zip(&inv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let tangent = self.tan(a).map(|t| kernels::rms_jacobian_apply(x, &inv, t, w));
        self.push(Op::RmsNormalize { input: a, eps }, value, shape, tangent)
    }

    /// Token-axis convolution: `x` is `[batch, len, c_in]`, `w` is
    /// `[taps, c_in, c_out]` with odd `taps` and zero padding `taps / 2`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sw[0] % 2 == 0 || sx[1] == 0 {
            return Err(AutodiffError::shape("conv1d", &sx, &sw));
        }
        let dims = ConvDims {
            batch: sx[0],
            len: sx[1],
            c_in: sx[2],
            c_out: sw[2],
            taps: sw[0],
        };
        let out_shape = vec![dims.batch, dims.len, dims.c_out];
        let mut value = vec![T::zero(); numel(&out_shape)];
        kernels::conv1d_forward(dims, self.data(x), self.data(w), &mut value, T::zero());
        let tangent = match (self.tan(x), self.tan(w)) {
            (None, None) => None,
            (tx, tw) => {
                let mut t = vec![T::zero(); value.len()];
                if let Some(tx) = tx {
                    kernels::conv1d_forward(dims, tx, self.data(w), &mut t, T::one());
                }
                if let Some(tw) = tw {
                    kernels::conv1d_forward(dims, self.data(x), tw, &mut t, T::one());
                }
                Some(t)
            }
        };
        self.push(Op::Conv1d { x, w, dims }, value, out_shape, tangent)
    }

    /// Row lookup: `table` is `[rows, width]`, output `[indices.len(), width]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::invalid("gather", format!("table must be rank 2, got {shape:?}")));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::invalid("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let pick = |src: &[T]| {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            out
        };
        let value = pick(self.data(table));
        let tangent = self.tan(table).map(pick);
        self.push(
            Op::Gather { table, indices: indices.to_vec() },
            value,
            vec![indices.len(), width],
            tangent,
        )
    }

    /// Identity on values; blocks tangents and gradients.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.data(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), value, shape, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }
}

fn zip<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_tangent_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(
                Tensor::new(vec![2], vec![2.0, 3.0]).unwrap(),
                Some(Tensor::ones(&[2])),
            )
            .unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.tangent(y).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_tangent() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), Some(Tensor::ones(&[3])))
            .unwrap();
        let y = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        assert!(g.tangent(y).is_none());
    }

    #[test]
    fn disabled_primitive_is_rejected() {
        let mut g = Graph::<f64>::with_primitives(PrimitiveSet::all().without(Primitive::Sin));
        let x = g.constant(Tensor::zeros(&[1]));
        assert_eq!(g.sin(x), Err(AutodiffError::UnregisteredPrimitive(Primitive::Sin)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(m, m), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        assert!(g.input(Tensor::zeros(&[2]), Some(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[1], 1e30).unwrap());
        assert_eq!(g.square(a), Err(AutodiffError::NonFinite { op: "mul" }));
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
        assert_eq!(broadcast_shapes(&[], &[5]), Some(vec![5]));
    }
}
