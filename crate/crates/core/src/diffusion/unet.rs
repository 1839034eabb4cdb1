use crate::error::{shape, Result};
use crate::nn::{Conv1d, Linear};
use crate::numerics::{Graph, ParamStore, Rng, Scalar, Tensor, Var};

/// Predicts the clean drift from a noised drift, conditioned on the input
/// behaviors and the step index.
pub trait Approximator<F: Scalar> {
    /// `z_t, cond: [n, d]` to `[n, d]`.
    fn approximate(&self, g: &mut Graph<F>, store: &ParamStore<F>, z_t: Var, cond: Var, t: usize) -> Result<Var>;
}

/// Sinusoidal embedding of step `t` as `[1, dim]`.
pub fn step_embedding<F: Scalar>(t: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let angle = t as f64 * freq;
        out[i] = F::of(angle.sin());
        out[half + i] = F::of(angle.cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = F::of((t as f64).sin());
    }
    Tensor::new(&[1, dim], out).expect("length matches shape")
}

/// Two-level 1-D U-Net over the time axis. Channel widths 2d, 4d, 8d with
/// stride-2 downsampling, linear upsampling and skip concatenation.
#[derive(Debug, Clone)]
pub struct UNet {
    pub dim: usize,
    enc0: Conv1d,
    step: Linear,
    enc1: Conv1d,
    enc2: Conv1d,
    dec1: Conv1d,
    dec0: Conv1d,
    out: Conv1d,
}

impl UNet {
    /// Parameters are registered under `unet.`; the output conv starts at zero.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, dim: usize, rng: &mut Rng) -> Self {
        let d = dim;
        Self {
            dim,
            enc0: Conv1d::new(store, "unet.enc0", 2 * d, 2 * d, 3, 1, rng, false),
            step: Linear::new(store, "unet.step", d, 2 * d, true, rng),
            enc1: Conv1d::new(store, "unet.enc1", 2 * d, 4 * d, 3, 2, rng, false),
            enc2: Conv1d::new(store, "unet.enc2", 4 * d, 8 * d, 3, 2, rng, false),
            dec1: Conv1d::new(store, "unet.dec1", 12 * d, 4 * d, 3, 1, rng, false),
            dec0: Conv1d::new(store, "unet.dec0", 6 * d, 2 * d, 3, 1, rng, false),
            out: Conv1d::new(store, "unet.out", 2 * d, d, 3, 1, rng, true),
        }
    }

    /// Id of the zero-initialised output weight.
    pub fn output_weight(&self) -> crate::numerics::ParamId {
        self.out.weight
    }
}

impl<F: Scalar> Approximator<F> for UNet {
    fn approximate(&self, g: &mut Graph<F>, store: &ParamStore<F>, z_t: Var, cond: Var, t: usize) -> Result<Var> {
        let (zs, cs) = (g.shape(z_t).to_vec(), g.shape(cond).to_vec());
        if zs.len() != 2 || zs != cs || zs[1] != self.dim || zs[0] == 0 {
            return Err(shape(
                "approximate",
                format!("z_t {zs:?} and condition {cs:?} must both be [n, {}]", self.dim),
            ));
        }
        let n = zs[0];
        let x = g.concat(&[z_t, cond], 1)?;
        let h = self.enc0.forward(g, store, x)?;
        let emb = g.constant(step_embedding(t, self.dim));
        let emb = self.step.forward(g, store, emb)?;
        let emb = g.broadcast_to(emb, &[n, 2 * self.dim])?;
        let h = g.add(h, emb)?;
        let e0 = g.gelu(h)?;
        let e1 = self.enc1.forward(g, store, e0)?;
        let e1 = g.gelu(e1)?;
        let e2 = self.enc2.forward(g, store, e1)?;
        let e2 = g.gelu(e2)?;

        let len1 = g.shape(e1)[0];
        let u1 = g.upsample_linear(e2, len1)?;
        let d1 = g.concat(&[u1, e1], 1)?;
        let d1 = self.dec1.forward(g, store, d1)?;
        let d1 = g.gelu(d1)?;
        let u0 = g.upsample_linear(d1, n)?;
        let d0 = g.concat(&[u0, e0], 1)?;
        let d0 = self.dec0.forward(g, store, d0)?;
        let d0 = g.gelu(d0)?;
        self.out.forward(g, store, d0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract_and_zero_init() {
        for (n, d) in [(4, 8), (50, 8), (4, 64), (1, 3)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = Rng::new(1);
            let net = UNet::new(&mut store, d, &mut rng);
            let mut g = Graph::inference();
            let z = g.constant(rng.gaussian(&[n, d]));
            let c = g.constant(rng.gaussian(&[n, d]));
            let out = net.approximate(&mut g, &store, z, c, 7).unwrap();
            assert_eq!(g.shape(out), &[n, d]);
            assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let net = UNet::new(&mut store, 4, &mut Rng::new(0));
        let mut g = Graph::inference();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.constant(Tensor::zeros(&[2, 4]));
        assert!(net.approximate(&mut g, &store, z, c, 1).is_err());
    }

    #[test]
    fn step_embedding_distinguishes_steps() {
        let a: Tensor<f64> = step_embedding(1, 8);
        let b: Tensor<f64> = step_embedding(2, 8);
        assert_ne!(a, b);
        assert_eq!(a.shape(), &[1, 8]);
    }
}
