use std::collections::BTreeMap;

use super::gemm::gemm;
use super::special::{digamma, ln_gamma, trigamma};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Square-kernel convolution geometry over NHWC inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// The primitive set, for callers that dispatch generically
/// (see [`Graph::forward_primitive`]).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    ScaleRows,
    Scale(f64),
    AddScalar(f64),
    MinScalar(f64),
    Softplus,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    LnGamma,
    Digamma,
    Sum,
    Mean,
    SumLast,
    L2NormalizeLast,
    RowDot,
    LogSumExpLast,
    ConcatRows,
    ConcatLast,
    SliceRows(usize, usize),
    SliceLast(usize, usize),
    GatherRows(Vec<usize>),
    Reshape(Vec<usize>),
    Conv2d(Conv2dGeometry),
    GlobalAvgPool,
    StopGradient,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    StopGradient,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MinScalar(Var, f64),
    Softplus(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    LnGamma(Var),
    Digamma(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2NormalizeLast { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    LogSumExpLast(Var),
    ConcatRows(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceRows(Var, usize),
    SliceLast(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: Conv2dGeometry,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Epsilon added to the norm in [`Graph::l2_normalize_last`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// A single-use computation graph. Nodes are appended in creation order,
/// which is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    degenerate_norms: usize,
    stop_values: Vec<Tensor>,
    frozen_stops: Option<Vec<Tensor>>,
}

/// Adjoints of the parameter leaves of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let first = shape.first().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (first, if first == 0 { 0 } else { total / first })
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter leaves registered with [`Graph::param`], in creation order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Number of rows whose norm fell below the normalization epsilon.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_norms
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// A differentiable leaf; its adjoint is always present in the
    /// [`GradientMap`] returned by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Param, t, true);
        self.params.push(v);
        v
    }

    /// A graph whose `stop_gradient` outputs replay `values` (in call
    /// order) instead of their inputs. Finite-difference checks use this so
    /// perturbations do not re-enter through detached branches.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Graph {
            frozen_stops: Some(values),
            ..Self::default()
        }
    }

    /// Outputs of every `stop_gradient` call so far, in call order.
    pub fn stop_values(&self) -> &[Tensor] {
        &self.stop_values
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stop_values.len();
        let value = match &self.frozen_stops {
            Some(frozen) if k < frozen.len() && frozen[k].shape() == self.shape(x) => frozen[k].clone(),
            _ => self.value(x).clone(),
        };
        self.stop_values.push(value.clone());
        self.push(Op::StopGradient, value, false)
    }

    /// Generic entry point over [`Primitive`].
    pub fn forward_primitive(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        use Primitive as P;
        match kind {
            P::ConcatRows => self.concat_rows(inputs),
            P::ConcatLast => self.concat_last(inputs),
            P::MatMul | P::Add | P::Sub | P::Mul | P::Div | P::ScaleRows | P::RowDot | P::Conv2d(_) => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    P::MatMul => self.matmul(a, b),
                    P::Add => self.add(a, b),
                    P::Sub => self.sub(a, b),
                    P::Mul => self.mul(a, b),
                    P::Div => self.div(a, b),
                    P::ScaleRows => self.scale_rows(a, b),
                    P::RowDot => self.row_dot(a, b),
                    P::Conv2d(geom) => self.conv2d(a, b, *geom),
                    _ => unreachable!(),
                }
            }
            _ => {
                arity(1)?;
                let x = inputs[0];
                Ok(match kind {
                    P::Transpose => self.transpose(x)?,
                    P::Scale(c) => self.scale(x, *c),
                    P::AddScalar(c) => self.add_scalar(x, *c),
                    P::MinScalar(c) => self.min_scalar(x, *c),
                    P::Softplus => self.softplus(x),
                    P::Relu => self.relu(x),
                    P::Sigmoid => self.sigmoid(x),
                    P::Exp => self.exp(x),
                    P::Log => self.log(x),
                    P::Abs => self.abs(x),
                    P::Square => self.square(x),
                    P::LnGamma => self.ln_gamma(x),
                    P::Digamma => self.digamma(x),
                    P::Sum => self.sum(x),
                    P::Mean => self.mean(x),
                    P::SumLast => self.sum_last(x),
                    P::L2NormalizeLast => self.l2_normalize_last(x),
                    P::LogSumExpLast => self.logsumexp_last(x),
                    P::SliceRows(a, b) => self.slice_rows(x, *a, *b)?,
                    P::SliceLast(a, b) => self.slice_last(x, *a, *b)?,
                    P::GatherRows(idx) => self.gather_rows(x, idx)?,
                    P::Reshape(shape) => self.reshape(x, shape)?,
                    P::GlobalAvgPool => self.global_avg_pool(x)?,
                    P::StopGradient => self.stop_gradient(x),
                    _ => unreachable!(),
                })
            }
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data: out }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), Tensor { shape: vec![c, r], data: out }, rg))
    }

    // ---- broadcasting binary ops -----------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(tb.shape(), ta.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let bl = tb.len();
        let data = if bl == 0 {
            Vec::new()
        } else {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % bl]))
                .collect()
        };
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, Tensor { shape, data }, rg))
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies every last-axis row of `a` by the matching entry of `s`,
    /// where `s.shape == a.shape[..rank-1]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let sa = ta.shape();
        if sa.is_empty() || ts.shape() != &sa[..sa.len() - 1] {
            return Err(Error::shape("scale_rows", sa, ts.shape()));
        }
        let n = ta.last_dim();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * ts.data()[i / n.max(1)])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, s]);
        Ok(self.push(Op::ScaleRows(a, s), Tensor { shape, data }, rg))
    }

    // ---- unary elementwise -------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, value, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `min(x, c)` elementwise.
    pub fn min_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.min(c), Op::MinScalar(x, c))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn ln_gamma(&mut self, x: Var) -> Var {
        self.unary(x, ln_gamma, Op::LnGamma(x))
    }

    pub fn digamma(&mut self, x: Var) -> Var {
        self.unary(x, digamma, Op::Digamma(x))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    fn reduce_last(&self, x: Var, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let t = self.value(x);
        let n = t.last_dim();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let data = if n == 0 {
            vec![f(&[]); shape.iter().product()]
        } else {
            t.data().chunks(n).map(f).collect()
        };
        Tensor { shape, data }
    }

    /// `[..., n] → [...]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let value = self.reduce_last(x, |r| r.iter().sum());
        let rg = self.rg(&[x]);
        self.push(Op::SumLast(x), value, rg)
    }

    /// Row-wise `log Σ exp` over the last axis.
    pub fn logsumexp_last(&mut self, x: Var) -> Var {
        let value = self.reduce_last(x, |r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        });
        let rg = self.rg(&[x]);
        self.push(Op::LogSumExpLast(x), value, rg)
    }

    /// Row-wise dot product over the last axis; shapes must match.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("row_dot", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        let shape = ta.shape()[..ta.rank().saturating_sub(1)].to_vec();
        let data = ta
            .data()
            .chunks(n.max(1))
            .zip(tb.data().chunks(n.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::RowDot(a, b), Tensor { shape, data }, rg))
    }

    /// `x / (‖x‖₂ + ε)` along the last axis, with ε = [`NORMALIZE_EPS`].
    pub fn l2_normalize_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim().max(1);
        let mut norms = Vec::with_capacity(t.num_rows());
        let mut data = Vec::with_capacity(t.len());
        let mut degenerate = 0;
        for row in t.data().chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORMALIZE_EPS {
                degenerate += 1;
            }
            let denom = norm + NORMALIZE_EPS;
            data.extend(row.iter().map(|v| v / denom));
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        self.degenerate_norms += degenerate;
        let rg = self.rg(&[x]);
        self.push(Op::L2NormalizeLast { x, norms }, Tensor { shape, data }, rg)
    }

    // ---- structural ------------------------------------------------------

    /// Concatenates along axis 0; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor { shape, data }, rg))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_last of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() {
            return Err(Error::shape("concat_last", &s0, &[]));
        }
        let lead = &s0[..s0.len() - 1];
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat_last", &s0, s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                let n = t.last_dim();
                data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), Tensor { shape, data }, rg))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start, end]));
        }
        let (_, block) = rows_of(&s);
        let data = self.value(x).data()[start * block..end * block].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceRows(x, start), Tensor { shape, data }, rg))
    }

    /// Columns `start..end` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        let n = t.last_dim();
        if s.is_empty() || start > end || end > n {
            return Err(Error::shape("slice_last", &s, &[start, end]));
        }
        let data: Vec<f64> = t
            .data()
            .chunks(n.max(1))
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceLast(x, start), Tensor { shape, data }, rg))
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", &s, idx));
        }
        let (_, block) = rows_of(&s);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            data.extend_from_slice(&src[i * block..(i + 1) * block]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), Tensor { shape, data }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    // ---- convolution -----------------------------------------------------

    /// 2-D convolution. `input` is `[N, H, W, C]`, `weight` is
    /// `[k·k·C, C_out]` with rows ordered `(ky, kx, c)`; output is
    /// `[N, H_out, W_out, C_out]`, zero padded.
    pub fn conv2d(&mut self, input: Var, weight: Var, geom: Conv2dGeometry) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 2 || sw[0] != geom.kernel * geom.kernel * si[3] || geom.stride == 0 {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let (n, h, w, c) = (si[0], si[1], si[2], si[3]);
        let (ho, wo) = (geom.output_size(h), geom.output_size(w));
        let patch = sw[0];
        let cout = sw[1];
        let cols = im2col(self.value(input).data(), [n, h, w, c], geom, ho, wo);
        let mut out = vec![0.0; n * ho * wo * cout];
        gemm(n * ho * wo, patch, cout, &cols, false, self.value(weight).data(), false, 0.0, &mut out);
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            Tensor {
                shape: vec![n, ho, wo, cout],
                data: out,
            },
            rg,
        ))
    }

    /// `[N, H, W, C] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for p in 0..hw {
                let base = (i * hw + p) * c;
                for (k, acc) in o.iter_mut().enumerate() {
                    *acc += src[base + k];
                }
            }
            o.iter_mut().for_each(|v| *v /= hw as f64);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), Tensor { shape: vec![n, c], data: out }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every parameter leaf gets an
    /// entry, zero when no differentiable path reaches it.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let mut out = GradientMap::default();
        for &p in &self.params {
            let t = grads
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.shape(p)));
            out.grads.insert(p, t);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like the broadcast output) down to `shape`.
    fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        if n > 0 {
            for (i, v) in g.data().iter().enumerate() {
                out[i % n] += v;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: out,
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g.data()[j * r + i];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, Self::unbroadcast(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, *b, Self::unbroadcast(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bl = tb.len().max(1);
                if self.requires_grad(*a) {
                    let ga = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            let bv = tb.data()[i % bl];
                            if is_div {
                                gv / bv
                            } else {
                                gv * bv
                            }
                        })
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*b) {
                    let full = Tensor {
                        shape: ta.shape().to_vec(),
                        data: g
                            .data()
                            .iter()
                            .zip(ta.data())
                            .enumerate()
                            .map(|(i, (gv, av))| {
                                let bv = tb.data()[i % bl];
                                if is_div {
                                    -gv * av / (bv * bv)
                                } else {
                                    gv * av
                                }
                            })
                            .collect(),
                    };
                    self.accumulate(grads, *b, Self::unbroadcast(&full, tb.shape()));
                }
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let n = ta.last_dim().max(1);
                if self.requires_grad(*a) {
                    let ga = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * ts.data()[i / n])
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*s) {
                    let gs = g
                        .data()
                        .chunks(n)
                        .zip(ta.data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(p, q)| p * q).sum())
                        .collect();
                    self.accumulate(grads, *s, self.like(*s, gs));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MinScalar(x, c) => {
                let gx = self.zip_input(*x, g, |xv| if xv < *c { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.zip_input(*x, g, |xv| sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = self.zip_input(*x, g, |xv| if xv > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = self.zip_output(*x, y, g, |yv| yv * (1.0 - yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = self.zip_output(*x, y, g, |yv| yv);
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = self.zip_input(*x, g, |xv| 1.0 / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = self.zip_input(*x, g, |xv| {
                    if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = self.zip_input(*x, g, |xv| 2.0 * xv);
                self.accumulate(grads, *x, gx);
            }
            Op::LnGamma(x) => {
                let gx = self.zip_input(*x, g, |xv| digamma(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Digamma(x) => {
                let gx = self.zip_input(*x, g, |xv| trigamma(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                let gx = (0..self.value(*x).len()).map(|i| g.data()[i / n.max(1)]).collect();
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::LogSumExpLast(x) => {
                let t = self.value(*x);
                let n = t.last_dim().max(1);
                let mut gx = Vec::with_capacity(t.len());
                for (r, row) in t.data().chunks(n).enumerate() {
                    let lse = y.data()[r];
                    gx.extend(row.iter().map(|v| g.data()[r] * (v - lse).exp()));
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::RowDot(a, b) => {
                let n = self.value(*a).last_dim().max(1);
                for (src, dst) in [(*b, *a), (*a, *b)] {
                    if self.requires_grad(dst) {
                        let gd = self
                            .value(src)
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, v)| v * g.data()[i / n])
                            .collect();
                        self.accumulate(grads, dst, self.like(dst, gd));
                    }
                }
            }
            Op::L2NormalizeLast { x, norms } => {
                let t = self.value(*x);
                let n = t.last_dim().max(1);
                let mut gx = Vec::with_capacity(t.len());
                for ((row, grow), &norm) in t.data().chunks(n).zip(g.data().chunks(n)).zip(norms) {
                    let denom = norm + NORMALIZE_EPS;
                    let xg: f64 = row.iter().zip(grow).map(|(p, q)| p * q).sum();
                    let k = if norm > 0.0 { xg / (norm * denom * denom) } else { 0.0 };
                    gx.extend(row.iter().zip(grow).map(|(xv, gv)| gv / denom - xv * k));
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        let gp = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, *p, self.like(*p, gp));
                    }
                    offset += len;
                }
            }
            Op::ConcatLast(parts) => {
                let width = y.last_dim();
                let rows = y.num_rows();
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).last_dim();
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(rows * n);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * width + start..r * width + start + n]);
                        }
                        self.accumulate(grads, *p, self.like(*p, gp));
                    }
                    start += n;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, block) = rows_of(self.shape(*x));
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[start * block..start * block + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SliceLast(x, start) => {
                let n = self.value(*x).last_dim();
                let w = y.last_dim();
                let mut gx = vec![0.0; self.value(*x).len()];
                if w > 0 {
                    for (r, grow) in g.data().chunks(w).enumerate() {
                        gx[r * n + start..r * n + start + w].copy_from_slice(grow);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::GatherRows(x, idx) => {
                let (_, block) = rows_of(self.shape(*x));
                let mut gx = vec![0.0; self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..block {
                        gx[i * block + j] += g.data()[k * block + j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, g.data().to_vec()));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let [n, h, w, c] = [si[0], si[1], si[2], si[3]];
                let (ho, wo) = (y.shape()[1], y.shape()[2]);
                let (patch, cout) = (sw[0], sw[1]);
                let rows = n * ho * wo;
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0; patch * cout];
                    gemm(patch, rows, cout, cols, true, g.data(), false, 0.0, &mut gw);
                    self.accumulate(grads, *weight, self.like(*weight, gw));
                }
                if self.requires_grad(*input) {
                    let mut gcols = vec![0.0; rows * patch];
                    gemm(rows, cout, patch, g.data(), false, self.value(*weight).data(), true, 0.0, &mut gcols);
                    let gx = col2im(&gcols, [n, h, w, c], *geom, ho, wo);
                    self.accumulate(grads, *input, self.like(*input, gx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let mut gx = vec![0.0; n * hw * c];
                for i in 0..n {
                    for p in 0..hw {
                        for k in 0..c {
                            gx[(i * hw + p) * c + k] = g.data()[i * c + k] / hw as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
        }
    }

    fn zip_input(&self, x: Var, g: &Tensor, d: impl Fn(f64) -> f64) -> Tensor {
        let xs = self.value(x).data();
        self.like(x, xs.iter().zip(g.data()).map(|(&xv, &gv)| gv * d(xv)).collect())
    }

    fn zip_output(&self, x: Var, y: &Tensor, g: &Tensor, d: impl Fn(f64) -> f64) -> Tensor {
        self.like(x, y.data().iter().zip(g.data()).map(|(&yv, &gv)| gv * d(yv)).collect())
    }
}

fn im2col(src: &[f64], [n, h, w, c]: [usize; 4], geom: Conv2dGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let k = geom.kernel;
    let patch = k * k * c;
    let mut cols = vec![0.0; n * ho * wo * patch];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((img * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((img * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * k + kx) * c;
                        cols[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [n, h, w, c]: [usize; 4], geom: Conv2dGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let k = geom.kernel;
    let patch = k * k * c;
    let mut out = vec![0.0; n * h * w * c];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((img * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((img * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * k + kx) * c;
                        for j in 0..c {
                            out[d + j] += cols[s + j];
                        }
                    }
                }
            }
        }
    }
    out
}
