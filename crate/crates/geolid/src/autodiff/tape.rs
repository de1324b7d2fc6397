//! Recording tape and reverse sweep.
//!
//! Values live on the tape as nodes; a [`Var`] is a cheap handle to one node.
//! Every operation appends one node that remembers its inputs, and
//! [`Var::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because inputs are always recorded first.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    VarianceAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    LayerNorm {
        x: usize,
        eps: T,
    },
    BatchNorm {
        x: usize,
        eps: T,
    },
    BroadcastAdd(usize, usize),
    BroadcastMul(usize, usize),
    NormalizeRows {
        x: usize,
        eps: T,
    },
    MaxGroups {
        x: usize,
        group: usize,
    },
    AngularMargin {
        x: usize,
        labels: Vec<usize>,
        margin: T,
    },
    CrossEntropy {
        x: usize,
        labels: Vec<usize>,
    },
}

/// Geometry of a 1-D convolution over a `frames x channels` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_len: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// `floor((T + 2p - d(k-1) - 1) / r) + 1`, or `None` if the input is too short.
    pub fn out_len(&self) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = self.in_len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Var::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for a node; `None` if the node does not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get_id(v.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<T>> {
        self.grads
            .get(id)?
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for a node, zero-filled when the node is unreachable.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

/// Records operations for one forward/backward pass. Confined to one thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    detached: RefCell<Detached<T>>,
}

/// What [`Var::detach`] does with the values passing through it.
enum Detached<T> {
    Pass,
    Record(Vec<Tensor<T>>),
    /// Substitutes previously recorded values, in order.
    Replay(Vec<Tensor<T>>, usize),
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            detached: RefCell::new(Detached::Pass),
        }
    }

    /// A tape that keeps a copy of every detached value, see
    /// [`Tape::take_detached`].
    pub fn recording_detached() -> Self {
        let t = Self::new();
        *t.detached.borrow_mut() = Detached::Record(Vec::new());
        t
    }

    /// A tape whose detach outputs are the given values, in call order,
    /// instead of their inputs. Lets finite differences hold detached
    /// tensors fixed.
    pub fn replaying_detached(values: Vec<Tensor<T>>) -> Self {
        let t = Self::new();
        *t.detached.borrow_mut() = Detached::Replay(values, 0);
        t
    }

    /// Values recorded by a [`Tape::recording_detached`] tape.
    pub fn take_detached(&self) -> Vec<Tensor<T>> {
        match &mut *self.detached.borrow_mut() {
            Detached::Record(v) => std::mem::take(v),
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }
}

fn shape2(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match t.shape() {
        [c] => Ok((1, *c)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a 1-D or 2-D tensor, got {s:?}"))),
    }
}

fn t<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.record(v, op, &[self.id])
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other, name)?;
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(v, op, &[self.id, other.id]))
    }

    /// Same values; gradients stop here on the way back.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value().clone();
        let v = match &mut *self.tape.detached.borrow_mut() {
            Detached::Pass => v,
            Detached::Record(log) => {
                log.push(v.clone());
                v
            }
            Detached::Replay(values, next) => match values.get(*next) {
                Some(r) if r.shape() == v.shape() => {
                    *next += 1;
                    r.clone()
                }
                _ => v,
            },
        };
        self.tape.push(v, Op::Detach, false)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, s), |a| a * s)
    }

    pub fn square(&self) -> Var<'t, T> {
        self.mul(*self).expect("same shape")
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |a| if a > T::zero() { a } else { T::zero() })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let (c, k) = (t::<T>(GELU_C), t::<T>(GELU_A));
        let half = t::<T>(0.5);
        self.unary(Op::Gelu(self.id), move |x| {
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |a| a.tanh())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), |a| a.ln())
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |a| a.exp())
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), |a| a.sqrt())
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s: T = v.data().iter().copied().sum::<T>() / t(v.len() as f64);
        drop(v);
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn reduce_axis(&self, name: &'static str, axis: usize) -> Result<(usize, usize, Vec<T>)> {
        let v = self.value();
        if v.shape().len() != 2 || axis > 1 {
            return Err(Error::shape(
                name,
                format!("axis {axis} on shape {:?}", v.shape()),
            ));
        }
        let (r, c) = (v.rows(), v.cols());
        let d = v.data();
        let out = if axis == 0 {
            let mut o = vec![T::zero(); c];
            for row in d.chunks_exact(c) {
                for (acc, &x) in o.iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
            o
        } else {
            d.chunks_exact(c).map(|row| row.iter().copied().sum()).collect()
        };
        Ok((r, c, out))
    }

    /// Sum over `axis` of a 2-D tensor; the result is 1-D.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let (_, _, out) = self.reduce_axis("sum", axis)?;
        Ok(self
            .tape
            .record(Tensor::vector(out), Op::SumAxis(self.id, axis), &[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let (r, c, out) = self.reduce_axis("mean", axis)?;
        let n: T = t(if axis == 0 { r } else { c } as f64);
        let out = out.into_iter().map(|s| s / n).collect();
        Ok(self
            .tape
            .record(Tensor::vector(out), Op::MeanAxis(self.id, axis), &[self.id]))
    }

    /// Biased (population) variance over `axis` of a 2-D tensor.
    pub fn variance_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let (r, c, sums) = self.reduce_axis("variance", axis)?;
        let v = self.value();
        let d = v.data();
        let n = if axis == 0 { r } else { c };
        let nt: T = t(n as f64);
        let means: Vec<T> = sums.into_iter().map(|s| s / nt).collect();
        let mut out = vec![T::zero(); means.len()];
        for i in 0..r {
            for j in 0..c {
                let k = if axis == 0 { j } else { i };
                let dv = d[i * c + j] - means[k];
                out[k] = out[k] + dv * dv;
            }
        }
        drop(v);
        let out = out.into_iter().map(|s| s / nt).collect();
        Ok(self
            .tape
            .record(Tensor::vector(out), Op::VarianceAxis(self.id, axis), &[self.id]))
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other, "matmul")?;
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, n) = (a.rows(), b.cols());
            let mut out = vec![T::zero(); m * n];
            gemm(a.data(), m, a.cols(), false, b.data(), b.rows(), n, false, &mut out, false);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self
            .tape
            .record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// 1-D convolution. `self` is `frames x in_ch`, `weight` is
    /// `out_ch x in_ch x kernel`, `bias` has `out_ch` entries. Padding is
    /// symmetric zero padding.
    pub fn conv1d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight, "conv1d")?;
        if let Some(b) = &bias {
            self.same_tape(b, "conv1d")?;
        }
        let (x, w) = (self.value(), weight.value());
        let ws = w.shape();
        if x.shape().len() != 2 || ws.len() != 3 || ws[1] != x.cols() || stride == 0 || dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}, dilation {dilation}",
                    x.shape(),
                    ws
                ),
            ));
        }
        let geom = ConvGeom {
            in_len: x.rows(),
            in_ch: x.cols(),
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            dilation,
            padding,
        };
        let out_len = geom.out_len().ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("input length {} shorter than receptive field", geom.in_len),
            )
        })?;
        if let Some(b) = &bias {
            if b.value().len() != geom.out_ch {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?} for {} channels", b.value().shape(), geom.out_ch),
                ));
            }
        }
        let cols = im2col(x.data(), &geom, out_len);
        let ck = geom.in_ch * geom.kernel;
        let mut out = vec![T::zero(); out_len * geom.out_ch];
        gemm(&cols, out_len, ck, false, w.data(), geom.out_ch, ck, true, &mut out, false);
        if let Some(b) = &bias {
            let bv = b.value();
            for row in out.chunks_exact_mut(geom.out_ch) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        drop(x);
        drop(w);
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        let v = Tensor::new(vec![out_len, geom.out_ch], out)?;
        Ok(self.tape.record(
            v,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (_, c) = shape2("softmax", &v)?;
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let v2 = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.tape.record(v2, Op::Softmax(self.id), &[self.id]))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns). 1-D inputs only
    /// concatenate along axis 0.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p, "concat")?;
        }
        let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let nd = vals[0].shape().len();
        let bad = || {
            Error::shape(
                "concat",
                format!(
                    "axis {axis} over shapes {:?}",
                    vals.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
                ),
            )
        };
        let v = match (nd, axis) {
            (1, 0) => {
                if vals.iter().any(|v| v.shape().len() != 1) {
                    return Err(bad());
                }
                Tensor::vector(vals.iter().flat_map(|v| v.data().iter().copied()).collect())
            }
            (2, 0) => {
                let c = vals[0].cols();
                if vals.iter().any(|v| v.shape().len() != 2 || v.cols() != c) {
                    return Err(bad());
                }
                let r = vals.iter().map(|v| v.rows()).sum();
                Tensor::new(
                    vec![r, c],
                    vals.iter().flat_map(|v| v.data().iter().copied()).collect(),
                )?
            }
            (2, 1) => {
                let r = vals[0].rows();
                if vals.iter().any(|v| v.shape().len() != 2 || v.rows() != r) {
                    return Err(bad());
                }
                let c: usize = vals.iter().map(|v| v.cols()).sum();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for v in &vals {
                        out.extend_from_slice(v.row(i));
                    }
                }
                Tensor::new(vec![r, c], out)?
            }
            _ => return Err(bad()),
        };
        drop(vals);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::Concat(ids.clone(), axis), &ids))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape().to_vec();
        let bad = || Error::shape("slice", format!("[{start}..+{len}] on axis {axis} of {s:?}"));
        if len == 0 {
            return Err(bad());
        }
        let out = match (s.len(), axis) {
            (1, 0) if start + len <= s[0] => Tensor::vector(v.data()[start..start + len].to_vec()),
            (2, 0) if start + len <= s[0] => {
                let c = s[1];
                Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?
            }
            (2, 1) if start + len <= s[1] => {
                let data = v
                    .data()
                    .chunks_exact(s[1])
                    .flat_map(|row| row[start..start + len].iter().copied())
                    .collect();
                Tensor::new(vec![s[0], len], data)?
            }
            _ => return Err(bad()),
        };
        drop(v);
        Ok(self.tape.record(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        let d = v.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(v);
        Ok(self
            .tape
            .record(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().clone().reshape(shape.to_vec())?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layernorm(&self, eps: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let (_, c) = shape2("layernorm", &v)?;
        let mut out = v.data().to_vec();
        let n: T = t(c as f64);
        for row in out.chunks_exact_mut(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * inv;
            }
        }
        let o = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.tape.record(o, Op::LayerNorm { x: self.id, eps }, &[self.id]))
    }

    /// Normalizes each column with the statistics of the batch (rows), no affine.
    pub fn batchnorm(&self, eps: T) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::shape("batchnorm", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        let (mean, var) = column_stats(v.data(), r, c);
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) / (var[j] + eps).sqrt();
            }
        }
        let o = Tensor::new(vec![r, c], out)?;
        drop(v);
        Ok(self.tape.record(o, Op::BatchNorm { x: self.id, eps }, &[self.id]))
    }

    fn broadcast(
        &self,
        row: Var<'t, T>,
        name: &'static str,
        mul: bool,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&row, name)?;
        let (m, r) = (self.value(), row.value());
        if m.shape().len() != 2 || r.len() != m.cols() || (r.shape().len() == 2 && r.rows() != 1) {
            return Err(Error::shape(
                name,
                format!("matrix {:?} with row {:?}", m.shape(), r.shape()),
            ));
        }
        let c = m.cols();
        let mut out = m.data().to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o = if mul { *o * b } else { *o + b };
            }
        }
        let o = Tensor::new(m.shape().to_vec(), out)?;
        drop(m);
        drop(r);
        let op = if mul {
            Op::BroadcastMul(self.id, row.id)
        } else {
            Op::BroadcastAdd(self.id, row.id)
        };
        Ok(self.tape.record(o, op, &[self.id, row.id]))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn broadcast_add(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast(row, "broadcast-add", false)
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn broadcast_mul(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast(row, "broadcast-mul", true)
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_rows(&self, eps: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let (_, c) = shape2("normalize-rows", &v)?;
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let inv = T::one() / (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|x| *x = *x * inv);
        }
        let o = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self
            .tape
            .record(o, Op::NormalizeRows { x: self.id, eps }, &[self.id]))
    }

    /// Maximum over consecutive column groups of width `group`:
    /// `rows x (classes * group) -> rows x classes`.
    pub fn max_groups(&self, group: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (r, c) = shape2("max-groups", &v)?;
        if group == 0 || c % group != 0 {
            return Err(Error::shape(
                "max-groups",
                format!("group {group} over {:?}", v.shape()),
            ));
        }
        let out: Vec<T> = v
            .data()
            .chunks_exact(group)
            .map(|g| g.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let o = Tensor::new(vec![r, c / group], out)?;
        drop(v);
        Ok(self
            .tape
            .record(o, Op::MaxGroups { x: self.id, group }, &[self.id]))
    }

    /// Additive angular margin on the target column of each row:
    /// `cos(min(acos(x) + m, pi))`. Other entries pass through.
    pub fn angular_margin(&self, labels: &[usize], margin: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let (r, c) = shape2("angular-margin", &v)?;
        check_labels("angular-margin", labels, r, c)?;
        let mut out = v.data().to_vec();
        for (i, &y) in labels.iter().enumerate() {
            out[i * c + y] = margin_fwd(out[i * c + y], margin);
        }
        let o = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.tape.record(
            o,
            Op::AngularMargin {
                x: self.id,
                labels: labels.to_vec(),
                margin,
            },
            &[self.id],
        ))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (r, c) = shape2("cross-entropy", &v)?;
        check_labels("cross-entropy", labels, r, c)?;
        let mut total = T::zero();
        for (row, &y) in v.data().chunks_exact(c).zip(labels) {
            total = total + logsumexp(row) - row[y];
        }
        let loss = total / t(r as f64);
        drop(v);
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: self.id,
                labels: labels.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self) -> Result<Grads<T>> {
        let nodes = self.tape.nodes.borrow();
        if !nodes[self.id].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![T::one()]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes[..=self.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, cols: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {y} out of range for {cols} classes"
        )));
    }
    Ok(())
}

fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

fn logsumexp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn column_stats<T: Real>(d: &[T], r: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let n: T = t(r as f64);
    let mut mean = vec![T::zero(); c];
    for row in d.chunks_exact(c) {
        for j in 0..c {
            mean[j] = mean[j] + row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for row in d.chunks_exact(c) {
        for j in 0..c {
            let dv = row[j] - mean[j];
            var[j] = var[j] + dv * dv;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    (mean, var)
}

fn clamp_cos<T: Real>(x: T) -> T {
    let lim = T::one() - t::<T>(if T::DTYPE == "f32" { 1e-6 } else { 1e-12 });
    x.max(-lim).min(lim)
}

fn margin_fwd<T: Real>(x: T, m: T) -> T {
    let pi = t::<T>(std::f64::consts::PI);
    (clamp_cos(x).acos() + m).min(pi).cos()
}

fn margin_grad<T: Real>(x: T, m: T) -> T {
    let pi = t::<T>(std::f64::consts::PI);
    let xc = clamp_cos(x);
    if xc != x {
        return T::zero();
    }
    let theta = xc.acos();
    if theta + m >= pi {
        T::zero()
    } else {
        (theta + m).sin() / (T::one() - xc * xc).sqrt()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, out_len: usize) -> Vec<T> {
    let ck = g.in_ch * g.kernel;
    let mut cols = vec![T::zero(); out_len * ck];
    for o in 0..out_len {
        let row = &mut cols[o * ck..(o + 1) * ck];
        for j in 0..g.kernel {
            let pos = (o * g.stride + j * g.dilation) as isize - g.padding as isize;
            if pos < 0 || pos as usize >= g.in_len {
                continue;
            }
            let src = &x[pos as usize * g.in_ch..(pos as usize + 1) * g.in_ch];
            for ci in 0..g.in_ch {
                row[ci * g.kernel + j] = src[ci];
            }
        }
    }
    cols
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Real>(g: &[T], x: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| &nodes[i].value;
    let out = node.value.data();
    let mut acc = |id: usize, v: Vec<T>| accumulate(grads, nodes, id, v);
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Reshape(a) => acc(*a, g.to_vec()),
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(*a, elementwise(g, bv, |g, y| g * y));
            acc(*b, elementwise(g, av, |g, x| g * x));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(*a, elementwise(g, bv, |g, y| g / y));
            let gb = g
                .iter()
                .zip(av.iter().zip(bv))
                .map(|(&g, (&x, &y))| -g * x / (y * y))
                .collect();
            acc(*b, gb);
        }
        Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                let mut ga = vec![T::zero(); m * k];
                gemm(g, m, n, false, bv.data(), k, n, true, &mut ga, false);
                acc(*a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![T::zero(); k * n];
                gemm(av.data(), m, k, true, g, m, n, false, &mut gb, false);
                acc(*b, gb);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let out_len = node.value.rows();
            let ck = geom.in_ch * geom.kernel;
            if nodes[*w].requires_grad {
                let mut gw = vec![T::zero(); geom.out_ch * ck];
                gemm(g, out_len, geom.out_ch, true, cols, out_len, ck, false, &mut gw, false);
                acc(*w, gw);
            }
            if let Some(b) = b {
                let mut gb = vec![T::zero(); geom.out_ch];
                for row in g.chunks_exact(geom.out_ch) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                acc(*b, gb);
            }
            if nodes[*x].requires_grad {
                let mut gcols = vec![T::zero(); out_len * ck];
                gemm(g, out_len, geom.out_ch, false, val(*w).data(), geom.out_ch, ck, false, &mut gcols, false);
                let mut gx = vec![T::zero(); geom.in_len * geom.in_ch];
                for o in 0..out_len {
                    let row = &gcols[o * ck..(o + 1) * ck];
                    for j in 0..geom.kernel {
                        let pos = (o * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                        if pos < 0 || pos as usize >= geom.in_len {
                            continue;
                        }
                        let dst = &mut gx[pos as usize * geom.in_ch..(pos as usize + 1) * geom.in_ch];
                        for ci in 0..geom.in_ch {
                            dst[ci] = dst[ci] + row[ci * geom.kernel + j];
                        }
                    }
                }
                acc(*x, gx);
            }
        }
        Op::Relu(a) => acc(*a, elementwise(g, val(*a).data(), |g, x| if x > T::zero() { g } else { T::zero() })),
        Op::Gelu(a) => {
            let (c, k, half) = (t::<T>(GELU_C), t::<T>(GELU_A), t::<T>(0.5));
            let three = t::<T>(3.0);
            acc(
                *a,
                elementwise(g, val(*a).data(), |g, x| {
                    let th = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + th)
                        + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                    g * d
                }),
            )
        }
        Op::Tanh(a) => acc(*a, elementwise(g, out, |g, y| g * (T::one() - y * y))),
        Op::Sigmoid(a) => acc(*a, elementwise(g, out, |g, y| g * y * (T::one() - y))),
        Op::Log(a) => acc(*a, elementwise(g, val(*a).data(), |g, x| g / x)),
        Op::Exp(a) => acc(*a, elementwise(g, out, |g, y| g * y)),
        Op::Sqrt(a) => acc(*a, elementwise(g, out, |g, y| g * t::<T>(0.5) / y)),
        Op::Softmax(a) => {
            let c = node.value.cols();
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks_exact(c).zip(out.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            acc(*a, gx);
        }
        Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            acc(*a, vec![g[0] / t(n as f64); n]);
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(*a);
            let (r, c) = (x.rows(), x.cols());
            let scale = match node.op {
                Op::MeanAxis(..) => T::one() / t(if *axis == 0 { r } else { c } as f64),
                _ => T::one(),
            };
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[if *axis == 0 { j } else { i }] * scale;
                }
            }
            acc(*a, gx);
        }
        Op::VarianceAxis(a, axis) => {
            let x = val(*a);
            let (r, c) = (x.rows(), x.cols());
            let d = x.data();
            let n = if *axis == 0 { r } else { c };
            let nt: T = t(n as f64);
            let mut means = vec![T::zero(); if *axis == 0 { c } else { r }];
            for i in 0..r {
                for j in 0..c {
                    let k = if *axis == 0 { j } else { i };
                    means[k] = means[k] + d[i * c + j];
                }
            }
            means.iter_mut().for_each(|m| *m = *m / nt);
            let two = t::<T>(2.0);
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    let k = if *axis == 0 { j } else { i };
                    gx[i * c + j] = g[k] * two * (d[i * c + j] - means[k]) / nt;
                }
            }
            acc(*a, gx);
        }
        Op::Concat(ids, axis) => {
            if node.value.shape().len() == 1 || *axis == 0 {
                let mut off = 0;
                for &id in ids {
                    let n = val(id).len();
                    acc(id, g[off..off + n].to_vec());
                    off += n;
                }
            } else {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for &id in ids {
                    let w = val(id).cols();
                    let mut gi = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gi.extend_from_slice(&g[i * c + off..i * c + off + w]);
                    }
                    acc(id, gi);
                    off += w;
                }
            }
        }
        Op::Slice { x, axis, start } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.len()];
            if xv.shape().len() == 1 {
                gx[*start..*start + g.len()].copy_from_slice(g);
            } else if *axis == 0 {
                let c = xv.cols();
                gx[start * c..start * c + g.len()].copy_from_slice(g);
            } else {
                let (c, w) = (xv.cols(), node.value.cols());
                for (i, gr) in g.chunks_exact(w).enumerate() {
                    gx[i * c + start..i * c + start + w].copy_from_slice(gr);
                }
            }
            acc(*x, gx);
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[j * r + i] = g[i * c + j];
                }
            }
            acc(*a, gx);
        }
        Op::LayerNorm { x, eps } => {
            let xv = val(*x);
            let c = xv.cols();
            let n: T = t(c as f64);
            let mut gx = vec![T::zero(); g.len()];
            for ((xr, (gr, yr)), dst) in xv
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c).zip(out.chunks_exact(c)))
                .zip(gx.chunks_exact_mut(c))
            {
                let mu = xr.iter().copied().sum::<T>() / n;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                let inv = T::one() / (var + *eps).sqrt();
                let gm = gr.iter().copied().sum::<T>() / n;
                let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for j in 0..c {
                    dst[j] = inv * (gr[j] - gm - yr[j] * gym);
                }
            }
            acc(*x, gx);
        }
        Op::BatchNorm { x, eps } => {
            let xv = val(*x);
            let (r, c) = (xv.rows(), xv.cols());
            let (_, var) = column_stats(xv.data(), r, c);
            let n: T = t(r as f64);
            let mut gm = vec![T::zero(); c];
            let mut gym = vec![T::zero(); c];
            for (gr, yr) in g.chunks_exact(c).zip(out.chunks_exact(c)) {
                for j in 0..c {
                    gm[j] = gm[j] + gr[j];
                    gym[j] = gym[j] + gr[j] * yr[j];
                }
            }
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    let inv = T::one() / (var[j] + *eps).sqrt();
                    gx[i * c + j] = inv * (g[i * c + j] - gm[j] / n - out[i * c + j] * gym[j] / n);
                }
            }
            acc(*x, gx);
        }
        Op::BroadcastAdd(m, row) => {
            let c = node.value.cols();
            let mut gr = vec![T::zero(); c];
            for chunk in g.chunks_exact(c) {
                gr.iter_mut().zip(chunk).for_each(|(a, &v)| *a = *a + v);
            }
            acc(*m, g.to_vec());
            acc(*row, gr);
        }
        Op::BroadcastMul(m, row) => {
            let (mv, rv) = (val(*m), val(*row));
            let c = node.value.cols();
            let mut gr = vec![T::zero(); c];
            let mut gm = vec![T::zero(); g.len()];
            for ((gc, xc), dst) in g.chunks_exact(c).zip(mv.data().chunks_exact(c)).zip(gm.chunks_exact_mut(c)) {
                for j in 0..c {
                    gr[j] = gr[j] + gc[j] * xc[j];
                    dst[j] = gc[j] * rv.data()[j];
                }
            }
            acc(*m, gm);
            acc(*row, gr);
        }
        Op::NormalizeRows { x, eps } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![T::zero(); g.len()];
            for ((xr, (gr, yr)), dst) in xv
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c).zip(out.chunks_exact(c)))
                .zip(gx.chunks_exact_mut(c))
            {
                let inv = T::one() / (xr.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dst[j] = inv * (gr[j] - yr[j] * dot);
                }
            }
            acc(*x, gx);
        }
        Op::MaxGroups { x, group } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.len()];
            for (gi, chunk) in xv.data().chunks_exact(*group).enumerate() {
                let mut best = 0;
                for (k, &v) in chunk.iter().enumerate() {
                    if v > chunk[best] {
                        best = k;
                    }
                }
                gx[gi * group + best] = g[gi];
            }
            acc(*x, gx);
        }
        Op::AngularMargin { x, labels, margin } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = g.to_vec();
            for (i, &y) in labels.iter().enumerate() {
                gx[i * c + y] = g[i * c + y] * margin_grad(xv.data()[i * c + y], *margin);
            }
            acc(*x, gx);
        }
        Op::CrossEntropy { x, labels } => {
            let xv = val(*x);
            let (r, c) = (xv.rows(), xv.cols());
            let scale = g[0] / t(r as f64);
            let mut gx = xv.data().to_vec();
            for (row, &y) in gx.chunks_exact_mut(c).zip(labels) {
                softmax_in_place(row);
                row[y] = row[y] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            acc(*x, gx);
        }
    }
}
