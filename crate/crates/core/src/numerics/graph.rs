//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node in creation order,
//! so the node vector is already a topological order and the backward sweep
//! is a single reverse pass. Graphs are cheap and meant to be built once per
//! example, confined to one worker, then dropped after their parameter
//! gradients have been merged.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, broadcast_map, broadcast_shape, matmul_strided, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    BroadcastTo(Var),
    MatMul(Var, Var),
    /// `a @ b^T`.
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis(Var),
    LayerNorm { input: Var, inv_std: Vec<F> },
    Softmax { input: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
        padding: Option<usize>,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        padding: usize,
        cols: Vec<F>,
    },
    Upsample { input: Var, taps: Vec<(usize, usize, F)> },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
    backpropagated: bool,
    no_grad: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            backpropagated: false,
            no_grad: false,
        }
    }

    /// A graph that records no gradient information; used at inference.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() && self.parents_finite(&op) {
            return Err(Error::Invalid(format!(
                "non-finite output from {} on finite inputs",
                op_name(&op)
            )));
        }
        let needs_grad = needs_grad && !self.no_grad;
        let op = if self.no_grad { Op::Leaf } else { op };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents_finite(&self, op: &Op<F>) -> bool {
        parents(op).iter().all(|p| self.nodes[p.0].value.is_finite())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free differentiable leaf (not tied to a parameter store).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs_grad = !self.no_grad;
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let needs_grad = !self.no_grad;
        self.nodes.push(Node {
            value: Arc::clone(store.value_arc(id)),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    /// Same data, severed from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()))
            })?;
            let (ma, mb) = (broadcast_map(&shape, ta.shape()), broadcast_map(&shape, tb.shape()));
            let (da, db) = (ta.data(), tb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(&shape, data)?
        };
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if broadcast_shape(t.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let map = broadcast_map(shape, t.shape());
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::BroadcastTo(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (F::of(GELU_C), F::of(GELU_A));
        let half = F::of(0.5);
        self.unary(
            a,
            move |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ---- shape ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_strided(self.value(a), false, self.value(b), false)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_strided(self.value(a), false, self.value(b), true)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Slice { input: a, axis, start }, ng)
    }

    // ---- reductions ------------------------------------------------------------

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::SumAxis(a), ng)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self
            .value(a)
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, F::one() / F::of(len.max(1) as f64))
    }

    // ---- normalisation -----------------------------------------------------------

    /// Normalises each row over the last axis to zero mean, unit variance.
    /// Affine gain and bias are applied by the caller.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if cols == 0 {
            return Err(Error::shape("layer_norm", "empty feature axis"));
        }
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        let n = F::of(cols as f64);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let is = F::one() / (var + F::of(LN_EPS)).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|&x| (x - mean) * is));
        }
        let out = Tensor::new(t.shape(), data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::LayerNorm { input: a, inv_std }, ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut max = F::neg_infinity();
                for l in 0..len {
                    max = max.max(data[idx(l)]);
                }
                let mut z = F::zero();
                for l in 0..len {
                    let e = (data[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[idx(l)] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax { input: a, axis }, ng)
    }

    // ---- lookup / convolution --------------------------------------------------------

    /// Gathers rows of a 2-D `table`. Indices equal to `padding` yield a zero
    /// row and send no gradient to the table.
    pub fn embedding(&mut self, table: Var, indices: &[usize], padding: Option<usize>) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("embedding", format!("index {i} >= {rows}")));
            }
            if Some(i) == padding {
                data.extend(std::iter::repeat_n(F::zero(), d));
            } else {
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::new(&[indices.len(), d], data)?;
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
                padding,
            },
            ng,
        )
    }

    /// 1-D convolution over the rows of `input: [len, c_in]` with
    /// `weight: [kernel * c_in, c_out]` and optional `bias: [c_out]`, zero
    /// padding on both ends.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.ndim() != 2 || w.ndim() != 2 || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, weight {:?}, stride {stride}", x.shape(), w.shape()),
            ));
        }
        let (len, c_in) = (x.shape()[0], x.shape()[1]);
        let (kc, c_out) = (w.shape()[0], w.shape()[1]);
        if c_in == 0 || kc % c_in != 0 {
            return Err(Error::shape(
                "conv1d",
                format!("weight rows {kc} not a multiple of input channels {c_in}"),
            ));
        }
        let kernel = kc / c_in;
        if len + 2 * padding < kernel {
            return Err(Error::shape("conv1d", format!("length {len} shorter than kernel {kernel}")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv1d", "bias length != output channels"));
            }
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let mut cols = vec![F::zero(); out_len * kc];
        for o in 0..out_len {
            for k in 0..kernel {
                let pos = (o * stride + k) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    let src = x.row(pos as usize);
                    cols[o * kc + k * c_in..o * kc + (k + 1) * c_in].copy_from_slice(src);
                }
            }
        }
        let mut out = vec![F::zero(); out_len * c_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        super::tensor::gemm_into(out_len, kc, c_out, &cols, kc, false, w.data(), c_out, false, &mut out, beta);
        let out = Tensor::new(&[out_len, c_out], out)?;
        let mut vars = vec![input, weight];
        vars.extend(bias);
        let ng = self.ng(&vars);
        let cols = if ng { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
                padding,
                cols,
            },
            ng,
        )
    }

    /// Linear interpolation of `[len, c]` rows to `[out_len, c]`, endpoints
    /// aligned.
    pub fn upsample_linear(&mut self, a: Var, out_len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 || t.shape()[0] == 0 {
            return Err(Error::shape("upsample_linear", format!("{:?}", t.shape())));
        }
        let (len, c) = (t.shape()[0], t.shape()[1]);
        let mut taps = Vec::with_capacity(out_len);
        for o in 0..out_len {
            if len == 1 || out_len == 1 {
                taps.push((0, 0, F::zero()));
                continue;
            }
            let pos = o as f64 * (len - 1) as f64 / (out_len - 1) as f64;
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            taps.push((i0, i1, F::of(pos - i0 as f64)));
        }
        let mut data = Vec::with_capacity(out_len * c);
        for &(i0, i1, w1) in &taps {
            let (r0, r1) = (t.row(i0), t.row(i1));
            data.extend(r0.iter().zip(r1).map(|(&a, &b)| a * (F::one() - w1) + b * w1));
        }
        let out = Tensor::new(&[out_len, c], data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Upsample { input: a, taps }, ng)
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`, computed
    /// with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if target >= t.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {target} outside {} logits", t.len()),
            ));
        }
        let max = t.data().iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = t.data().iter().map(|&x| (x - max).exp()).collect();
        let z: F = exps.iter().copied().sum();
        let loss = z.ln() + max - t.data()[target];
        let probs = exps.into_iter().map(|e| e / z).collect();
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        )
    }

    // ---- backward -----------------------------------------------------------------------

    /// Fills gradient buffers for every node that depends on a differentiable
    /// leaf. A second call requires [`Graph::reset_grads`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Backward(
                "gradients already computed; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backpropagated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    /// Gradient of a leaf after [`Graph::backward`]; zero when the leaf did
    /// not participate.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Parameter gradients in first-use order. Parameters that did not
    /// participate are omitted.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads.get(v.0)?.as_ref().map(|g| (*id, g)))
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Sums a gradient of shape `out` back onto an input that was broadcast.
    fn unbroadcast(&self, g: &Tensor<F>, input: Var, scale: impl Fn(usize, usize) -> F) -> Tensor<F> {
        let in_shape = self.shape(input);
        let map = broadcast_map(g.shape(), in_shape);
        let mut acc = vec![F::zero(); in_shape.iter().product()];
        for (o, &i) in map.iter().enumerate() {
            acc[i] += g.data()[o] * scale(o, i);
        }
        Tensor::new(in_shape, acc).expect("shape preserved")
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<F>) -> Result<()> {
        let node_value = Arc::clone(&self.nodes[i].value);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backprop_op(&op, &node_value, g);
        self.nodes[i].op = op;
        result
    }

    fn backprop_op(&mut self, op: &Op<F>, y: &Tensor<F>, g: &Tensor<F>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.unbroadcast(g, *a, |_, _| F::one());
                let gb = self.unbroadcast(g, *b, |_, _| F::one());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.unbroadcast(g, *a, |_, _| F::one());
                let gb = self.unbroadcast(g, *b, |_, _| -F::one());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(op, Op::Div(..));
                let (va, vb) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let ma = broadcast_map(g.shape(), va.shape());
                let mb = broadcast_map(g.shape(), vb.shape());
                if self.nodes[a.0].needs_grad {
                    let ga = self.unbroadcast(g, *a, |o, _| {
                        let bv = vb.data()[mb[o]];
                        if is_div {
                            F::one() / bv
                        } else {
                            bv
                        }
                    });
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.unbroadcast(g, *b, |o, _| {
                        let av = va.data()[ma[o]];
                        if is_div {
                            let bv = vb.data()[mb[o]];
                            -av / (bv * bv)
                        } else {
                            av
                        }
                    });
                    self.accumulate(*b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(*a, g.clone()),
            Op::BroadcastTo(a) => {
                let ga = self.unbroadcast(g, *a, |_, _| F::one());
                self.accumulate(*a, ga);
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = matmul_strided(g, false, &self.nodes[b.0].value, true)?;
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = matmul_strided(&self.nodes[a.0].value, true, g, false)?;
                    self.accumulate(*b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = matmul_strided(g, false, &self.nodes[b.0].value, false)?;
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = matmul_strided(g, true, &self.nodes[a.0].value, false)?;
                    self.accumulate(*b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()?),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, g.clone().reshape(&shape)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(p, Tensor::new(&shape, data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let width = g.shape()[*axis];
                let mut data = vec![F::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    data[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(*input, Tensor::new(&shape, data)?);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::full(&shape, g.item()));
            }
            Op::SumAxis(input) => {
                let ga = self.unbroadcast_expand(g, *input);
                self.accumulate(*input, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = y.cols();
                let n = F::of(cols as f64);
                let mut data = Vec::with_capacity(y.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().copied().sum::<F>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    data.extend(gr.iter().zip(yr).map(|(&gv, &yv)| is * (gv - mean_g - yv * mean_gy)));
                }
                self.accumulate(*input, Tensor::new(y.shape(), data)?);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut data = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: F = (0..len).map(|l| g.data()[idx(l)] * y.data()[idx(l)]).sum();
                        for l in 0..len {
                            data[idx(l)] = y.data()[idx(l)] * (g.data()[idx(l)] - dot);
                        }
                    }
                }
                self.accumulate(*input, Tensor::new(y.shape(), data)?);
            }
            Op::Relu(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                let ga = g.zip_map(&x, |gv, xv| if xv > F::zero() { gv } else { F::zero() })?;
                self.accumulate(*a, ga);
            }
            Op::Gelu(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                let (c, k, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
                let three = F::of(3.0);
                let ga = g.zip_map(&x, |gv, xv| {
                    let th = (c * (xv + k * xv * xv * xv)).tanh();
                    let d = half * (F::one() + th)
                        + half * xv * (F::one() - th * th) * c * (F::one() + three * k * xv * xv);
                    gv * d
                })?;
                self.accumulate(*a, ga);
            }
            Op::Softplus(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                let ga = g.zip_map(&x, |gv, xv| gv * sigmoid(xv))?;
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => self.accumulate(*a, g.zip_map(y, |gv, yv| gv * yv)?),
            Op::Log(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                self.accumulate(*a, g.zip_map(&x, |gv, xv| gv / xv)?);
            }
            Op::Square(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                let two = F::of(2.0);
                self.accumulate(*a, g.zip_map(&x, |gv, xv| two * gv * xv)?);
            }
            Op::Embedding {
                table,
                indices,
                padding,
            } => {
                if self.nodes[table.0].needs_grad {
                    let shape = self.shape(*table).to_vec();
                    let d = shape[1];
                    let mut acc = Tensor::zeros(&shape);
                    for (r, &idx) in indices.iter().enumerate() {
                        if Some(idx) == *padding {
                            continue;
                        }
                        for (a, &b) in acc.row_mut(idx).iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                    self.accumulate(*table, acc);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
                padding,
                cols,
            } => {
                let (out_len, c_out) = (g.shape()[0], g.shape()[1]);
                let in_shape = self.shape(*input).to_vec();
                let (len, c_in) = (in_shape[0], in_shape[1]);
                let kc = kernel * c_in;
                if self.nodes[weight.0].needs_grad {
                    let mut gw = vec![F::zero(); kc * c_out];
                    super::tensor::gemm_into(kc, out_len, c_out, cols, kc, true, g.data(), c_out, false, &mut gw, F::zero());
                    self.accumulate(*weight, Tensor::new(&[kc, c_out], gw)?);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![F::zero(); c_out];
                        for row in g.data().chunks(c_out) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        let shape = self.shape(*b).to_vec();
                        self.accumulate(*b, Tensor::new(&shape, gb)?);
                    }
                }
                if self.nodes[input.0].needs_grad {
                    let w = Arc::clone(&self.nodes[weight.0].value);
                    let mut gcols = vec![F::zero(); out_len * kc];
                    super::tensor::gemm_into(out_len, c_out, kc, g.data(), c_out, false, w.data(), c_out, true, &mut gcols, F::zero());
                    let mut gx = vec![F::zero(); len * c_in];
                    for o in 0..out_len {
                        for k in 0..*kernel {
                            let pos = (o * stride + k) as isize - *padding as isize;
                            if pos >= 0 && (pos as usize) < len {
                                let p = pos as usize;
                                let src = &gcols[o * kc + k * c_in..o * kc + (k + 1) * c_in];
                                for (a, &v) in gx[p * c_in..(p + 1) * c_in].iter_mut().zip(src) {
                                    *a += v;
                                }
                            }
                        }
                    }
                    self.accumulate(*input, Tensor::new(&in_shape, gx)?);
                }
            }
            Op::Upsample { input, taps } => {
                let shape = self.shape(*input).to_vec();
                let c = shape[1];
                let mut acc = Tensor::zeros(&shape);
                for (o, &(i0, i1, w1)) in taps.iter().enumerate() {
                    let gr = &g.data()[o * c..(o + 1) * c];
                    for (a, &v) in acc.row_mut(i0).iter_mut().zip(gr) {
                        *a += v * (F::one() - w1);
                    }
                    for (a, &v) in acc.row_mut(i1).iter_mut().zip(gr) {
                        *a += v * w1;
                    }
                }
                self.accumulate(*input, acc);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let gv = g.item();
                let mut data: Vec<F> = probs.iter().map(|&p| p * gv).collect();
                data[*target] -= gv;
                let shape = self.shape(*logits).to_vec();
                self.accumulate(*logits, Tensor::new(&shape, data)?);
            }
        }
        Ok(())
    }

    /// Expands a reduced gradient back to the input shape (sum backward).
    fn unbroadcast_expand(&self, g: &Tensor<F>, input: Var) -> Tensor<F> {
        let shape = self.shape(input);
        let map = broadcast_map(shape, g.shape());
        Tensor::new(shape, map.iter().map(|&i| g.data()[i]).collect()).expect("shape preserved")
    }
}

#[inline]
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn parents<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::BroadcastTo(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SumAll(a)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a) => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Slice { input, .. }
        | Op::SumAxis(input)
        | Op::LayerNorm { input, .. }
        | Op::Softmax { input, .. }
        | Op::Upsample { input, .. } => vec![*input],
        Op::Embedding { table, .. } => vec![*table],
        Op::Conv1d {
            input, weight, bias, ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::BroadcastTo(..) => "broadcast_to",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::SumAll(..) => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Square(..) => "square",
        Op::Embedding { .. } => "embedding",
        Op::Conv1d { .. } => "conv1d",
        Op::Upsample { .. } => "upsample_linear",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
