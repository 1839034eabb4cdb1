//! Parameterised building blocks. Layers only hold [`ParamId`]s; values live
//! in a [`ParamStore`] so one model description serves any precision.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Scaled-normal initialiser: N(0, gain^2 / fan_in).
pub fn init_normal<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<F> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| F::of(rng.normal() * std)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<F: Scalar>(self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), init_normal(rng, &[fan_in, fan_out], fan_in, 1.0));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x: [rows, fan_in] -> [rows, fan_out]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with an activation between (not after) them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Layer normalisation over the feature axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
        zero_init: bool,
    ) -> Self {
        let shape = [kernel * c_in, c_out];
        let w = if zero_init {
            Tensor::zeros(&shape)
        } else {
            init_normal(rng, &shape, kernel * c_in, 2f64.sqrt())
        };
        Self {
            weight: store.add(format!("{name}.w"), w),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            kernel,
            stride,
            c_in,
            c_out,
        }
    }

    /// Same-length convolution at stride 1; `ceil(len / stride)` rows otherwise.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        g.conv1d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
        }
    }

    /// `x: [len, width]`; keys with `valid[j] == false` receive no attention.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, valid: &[bool]) -> Result<Var> {
        let (len, width) = (g.shape(x)[0], g.shape(x)[1]);
        if valid.len() != len {
            return Err(Error::shape("attention", format!("mask {} vs length {len}", valid.len())));
        }
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let head = width / self.heads;
        let scale = F::one() / F::of(head as f64).sqrt();
        let mask = valid.iter().any(|v| !v).then(|| {
            let row: Vec<F> = valid
                .iter()
                .map(|&ok| if ok { F::zero() } else { F::of(-1e30) })
                .collect();
            g.constant(Tensor::new(&[1, len], row).expect("mask row"))
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * head, (h + 1) * head)?;
            let kh = g.slice(k, 1, h * head, (h + 1) * head)?;
            let vh = g.slice(v, 1, h * head, (h + 1) * head)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.output.forward(g, store, cat)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub feed_forward: Mlp,
}

impl EncoderLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            feed_forward: Mlp::new(store, &format!("{name}.ffn"), &[width, 4 * width, width], Activation::Gelu, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, valid: &[bool]) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attention.forward(g, store, h, valid)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.feed_forward.forward(g, store, h)?;
        g.add(x, h)
    }
}
