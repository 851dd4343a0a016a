//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Graph`] in execution order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Ops check their output for NaN/Inf and fail with
//! [`Error::NonFinite`] instead of letting a bad value propagate.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Sigmoid,
    Square,
    Neg,
    /// Derivative at 0 is taken as +1 (right derivative).
    Abs,
    /// `sign(x)·sqrt(|x|)`; the derivative floors `|x|` at [`SIGNED_SQRT_FLOOR`].
    SignedSqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Neg => "neg",
            Unary::Abs => "abs",
            Unary::SignedSqrt => "signed_sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// Negative inputs to `sqrt` within this distance of zero are treated as zero.
pub const SQRT_GUARD: f64 = 1e-12;
pub const SIGNED_SQRT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary(Binary, Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Shift(Var),
    Unary(Unary, Var),
    ClampMin(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LogSumExp(Var),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SelectPerRow {
        x: Var,
        index: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norm: f64,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An ordered record of executed operations.
///
/// A graph is single-threaded by construction; build one graph per batch
/// (or per utterance) and drop it after reading the gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_at: Option<usize>,
}

/// `(outer, len, inner)` such that the tensor is `outer × len × inner` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// `c = a·b + beta·c` with explicit row/column strides, `c` row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // row-major and transposed stride layouts used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(not(test))]
mod fault {
    #[inline(always)]
    pub(crate) fn flip_tanh() -> bool {
        false
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    /// `None` if backward has not run or `v` does not influence the target.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op,
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. A rank-1 left operand is a row vector and a rank-1
    /// right operand a column vector; the promoted unit dimension is dropped
    /// from the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k_a, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(mismatch()),
        };
        let (k_b, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(mismatch()),
        };
        if k_a != k_b {
            return Err(mismatch());
        }
        let k = k_a;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, m, k, n },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [r, c] = shape[..] else {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("expected a matrix, got {shape:?}"),
            });
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "transpose",
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(x),
            rg,
        )
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = kind.name();
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match kind {
            Binary::Add => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
            Binary::Sub => va.iter().zip(vb).map(|(x, y)| x - y).collect(),
            Binary::Mul => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            Binary::Div => va.iter().zip(vb).map(|(x, y)| x / y).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(
            name,
            Tensor::from_parts(shape, out),
            Op::Binary(kind, a, b),
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Adds `bias` (length `c`) to every row of `x` (last dimension `c`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let c = sb.iter().product::<usize>();
        if sb.len() != 1 || sx.last() != Some(&c) {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push(
            "add_bias",
            Tensor::from_parts(sx, out),
            Op::AddBias { x, bias },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "scale",
            Tensor::from_parts(shape, out),
            Op::Scale(x, factor),
            rg,
        )
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v + offset).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "add_scalar",
            Tensor::from_parts(shape, out),
            Op::Shift(x),
            rg,
        )
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let name = kind.name();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for &v in src {
            let y = match kind {
                Unary::Exp => v.exp(),
                Unary::Log => {
                    if v <= 0.0 {
                        return Err(Error::Domain { op: name, value: v });
                    }
                    v.ln()
                }
                Unary::Sqrt => {
                    if v < -SQRT_GUARD {
                        return Err(Error::Domain { op: name, value: v });
                    }
                    v.max(0.0).sqrt()
                }
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Square => v * v,
                Unary::Neg => -v,
                Unary::Abs => v.abs(),
                Unary::SignedSqrt => v.signum() * v.abs().sqrt(),
            };
            out.push(y);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(name, Tensor::from_parts(shape, out), Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::SignedSqrt, x)
    }

    /// `max(x, min)` elementwise; gradient flows only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.max(min)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "clamp_min",
            Tensor::from_parts(shape, out),
            Op::ClampMin(x, min),
            rg,
        )
    }

    // ---- normalisations -------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x).data(), &shape, axis);
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax { x, axis },
            rg,
        )
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let (max, tail) = lse_parts((0..n).map(|j| src[idx(j)]));
                for j in 0..n {
                    out[idx(j)] = (src[idx(j)] - max) - tail;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "log_softmax",
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x, axis },
            rg,
        )
    }

    /// `log(sum(exp(x)))` over every element, stable for large `|x|`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x).data();
        let lse = stable_lse(src.iter().copied());
        let rg = self.rg(&[x]);
        self.push("logsumexp", Tensor::scalar(lse), Op::LogSumExp(x), rg)
    }

    /// Scales the whole tensor to unit Euclidean norm, dividing by
    /// `max(‖x‖, eps)` so the zero tensor maps to zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x).data();
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        let out = src.iter().map(|v| v / denom).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x, norm, eps },
            rg,
        )
    }

    // ---- reductions -----------------------------------------------------

    fn reduce_shape(&self, op: &'static str, x: Var, axis: Option<usize>) -> Result<Vec<usize>> {
        match axis {
            None => Ok(vec![]),
            Some(a) => {
                self.check_axis(op, x, a)?;
                let mut s = self.shape(x).to_vec();
                s.remove(a);
                Ok(s)
            }
        }
    }

    fn sum_values(&self, x: Var, axis: Option<usize>) -> Vec<f64> {
        let src = self.value(x).data();
        match axis {
            None => vec![src.iter().sum()],
            Some(axis) => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += src[(o * n + j) * inner + i];
                        }
                    }
                }
                out
            }
        }
    }

    /// Sum over `axis` (removed from the shape), or over everything when `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.reduce_shape("sum", x, axis)?;
        let out = self.sum_values(x, axis);
        let rg = self.rg(&[x]);
        self.push(
            "sum",
            Tensor::from_parts(shape, out),
            Op::Sum { x, axis },
            rg,
        )
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.reduce_shape("mean", x, axis)?;
        let count = match axis {
            None => self.value(x).len(),
            Some(a) => self.shape(x)[a],
        } as f64;
        let out = self
            .sum_values(x, axis)
            .into_iter()
            .map(|v| v / count)
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            "mean",
            Tensor::from_parts(shape, out),
            Op::Mean { x, axis },
            rg,
        )
    }

    /// Maximum along `axis`. Ties resolve to the lowest index, which is also
    /// where the whole gradient is routed.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.reduce_shape("max", x, Some(axis))?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if src[(o * n + j) * inner + i] > src[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                argmax.push(best);
                out.push(src[(o * n + best) * inner + i]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "max",
            Tensor::from_parts(shape, out),
            Op::Max { x, axis, argmax },
            rg,
        )
    }

    // ---- structure ------------------------------------------------------

    /// Joins `parts` along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat"));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&src_shape, axis);
        if len == 0 || start + len > n {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!(
                    "range {start}..{} out of bounds for length {n}",
                    start + len
                ),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            "slice",
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("stack"));
        };
        let mut unit = vec![1];
        unit.extend_from_slice(self.shape(first));
        let rows = parts
            .iter()
            .map(|&p| self.reshape(p, unit.clone()))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&rows, 0)
    }

    /// Picks rows (slices along axis 0) of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let Some(&rows) = src_shape.first() else {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                detail: "scalar input".into(),
            });
        };
        if index.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let inner = numel(&src_shape[1..]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = src_shape;
        shape[0] = index.len();
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// `out[r] = x[r, index[r]]` for a `B×C` matrix.
    pub fn select_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::InvalidShape {
                op: "select_per_row",
                detail: format!("expected a matrix, got {shape:?}"),
            });
        };
        if index.len() != rows {
            return Err(Error::Shape {
                op: "select_per_row",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= cols) {
            return Err(Error::InvalidShape {
                op: "select_per_row",
                detail: format!("column {bad} out of range for {cols} columns"),
            });
        }
        let src = self.value(x).data();
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * cols + c])
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            "select_per_row",
            Tensor::from_parts(vec![rows], out),
            Op::SelectPerRow {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from the scalar `loss`. Gradients of earlier runs
    /// are discarded. Running it again without recording new ops is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_at == Some(self.nodes.len()) {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalar(loss_shape));
        }
        self.backward_at = Some(self.nodes.len());
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, g.data());
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Graph { nodes, grads, .. } = self;
        let nodes: &[Node] = nodes;
        let op = nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let ga = acc(nodes, grads, a).unwrap();
                    // ∂a = g·bᵀ
                    gemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, ga);
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let gb = acc(nodes, grads, b).unwrap();
                    // ∂b = aᵀ·g
                    gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::Transpose(x) => {
                let shape = nodes[x.0].value.shape();
                let (r, c) = (shape[0], shape[1]);
                if let Some(gx) = acc(nodes, grads, x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(nodes, grads, a) {
                    for j in 0..g.len() {
                        ga[j] += match kind {
                            Binary::Add | Binary::Sub => g[j],
                            Binary::Mul => g[j] * bv[j],
                            Binary::Div => g[j] / bv[j],
                        };
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for j in 0..g.len() {
                        gb[j] += match kind {
                            Binary::Add => g[j],
                            Binary::Sub => -g[j],
                            Binary::Mul => g[j] * av[j],
                            Binary::Div => -g[j] * av[j] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = acc(nodes, grads, bias) {
                    let c = gb.len();
                    for (j, s) in g.iter().enumerate() {
                        gb[j % c] += s;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Unary(kind, x) => {
                let xv = nodes[x.0].value.data();
                let yv = nodes[i].value.data();
                let flip = if kind == Unary::Tanh && fault::flip_tanh() {
                    -1.0
                } else {
                    1.0
                };
                if let Some(gx) = acc(nodes, grads, x) {
                    for j in 0..g.len() {
                        let (xj, yj) = (xv[j], yv[j]);
                        let d = match kind {
                            Unary::Exp => yj,
                            Unary::Log => 1.0 / xj,
                            Unary::Sqrt => 0.5 / yj,
                            Unary::Tanh => flip * (1.0 - yj * yj),
                            Unary::Relu => (xj > 0.0) as u8 as f64,
                            Unary::Sigmoid => yj * (1.0 - yj),
                            Unary::Square => 2.0 * xj,
                            Unary::Neg => -1.0,
                            Unary::Abs => {
                                if xj >= 0.0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Unary::SignedSqrt => 0.5 / xj.abs().max(SIGNED_SQRT_FLOOR).sqrt(),
                        };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::ClampMin(x, min) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for j in 0..g.len() {
                        if xv[j] > min {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = nodes[i].value.shape();
                let y = nodes[i].value.data();
                let (outer, n, inner) = split_axis(shape, axis);
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + c;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let shape = nodes[i].value.shape();
                let y = nodes[i].value.data();
                let (outer, n, inner) = split_axis(shape, axis);
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + c;
                            let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let lse = nodes[i].value.item();
                let xv = nodes[x.0].value.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for j in 0..xv.len() {
                        gx[j] += g[0] * (xv[j] - lse).exp();
                    }
                }
            }
            Op::L2Normalize { x, norm, eps } => {
                let y = nodes[i].value.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    if norm > eps {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..y.len() {
                            gx[j] += (g[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..y.len() {
                            gx[j] += g[j] / eps;
                        }
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let is_mean = matches!(nodes[i].op, Op::Mean { .. });
                let shape = nodes[x.0].value.shape();
                let total = numel(shape);
                if let Some(gx) = acc(nodes, grads, x) {
                    match axis {
                        None => {
                            let s = if is_mean { g[0] / total as f64 } else { g[0] };
                            gx.iter_mut().for_each(|d| *d += s);
                        }
                        Some(axis) => {
                            let (outer, n, inner) = split_axis(shape, axis);
                            let w = if is_mean { 1.0 / n as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..n {
                                    for c in 0..inner {
                                        gx[(o * n + j) * inner + c] += w * g[o * inner + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Max { x, axis, argmax } => {
                let shape = nodes[x.0].value.shape();
                let (_, n, inner) = split_axis(shape, axis);
                if let Some(gx) = acc(nodes, grads, x) {
                    for (r, &j) in argmax.iter().enumerate() {
                        let (o, c) = (r / inner, r % inner);
                        gx[(o * n + j) * inner + c] += g[r];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, axis);
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.shape()[axis];
                    if let Some(gp) = acc(nodes, grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for c in 0..n * inner {
                                gp[dst + c] += g[src + c];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = nodes[x.0].value.shape();
                let len = nodes[i].value.shape()[axis];
                let (outer, n, inner) = split_axis(src_shape, axis);
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for c in 0..len * inner {
                            gx[dst + c] += g[src + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let inner = numel(&nodes[x.0].value.shape()[1..]);
                if let Some(gx) = acc(nodes, grads, x) {
                    for (r, &src_row) in index.iter().enumerate() {
                        for c in 0..inner {
                            gx[src_row * inner + c] += g[r * inner + c];
                        }
                    }
                }
            }
            Op::SelectPerRow { x, index } => {
                let cols = nodes[x.0].value.shape()[1];
                if let Some(gx) = acc(nodes, grads, x) {
                    for (r, &c) in index.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()))
            .data_mut(),
    )
}

fn softmax_along(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for c in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + c;
            let max = (0..n)
                .map(|j| src[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

/// `log Σ exp(v)` split as `(max, ln_1p(Σ_{others} exp(v - max)))`, which
/// keeps full relative precision when one term dominates.
fn lse_parts(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (arg, max) = values
        .clone()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if !max.is_finite() {
        return (max, 0.0);
    }
    let rest: f64 = values
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max, rest.ln_1p())
}

fn stable_lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (max, tail) = lse_parts(values);
    max + tail
}

#[cfg(test)]
pub(crate) mod fault {
    //! Test-only switch that corrupts a backward rule, used to check that the
    //! gradient suite actually detects broken derivatives.
    use std::cell::Cell;

    thread_local! {
        static FLIP_TANH: Cell<bool> = const { Cell::new(false) };
    }

    pub(crate) fn set_flip_tanh(on: bool) {
        FLIP_TANH.with(|f| f.set(on));
    }

    pub(crate) fn flip_tanh() -> bool {
        FLIP_TANH.with(|f| f.get())
    }
}
