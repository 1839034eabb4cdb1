use super::drift::{drift_prepare, drift_utilize, similarity, DriftKind, DriftTensor};
use super::schedule::NoiseSchedule;
use super::unet::Approximator;
use crate::error::{shape, Result};
use crate::numerics::{Graph, ParamStore, Rng, Scalar, Tensor, Var};

/// What the diffusion module reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffusionTarget {
    /// Adjacent differences of the behavior sequence.
    #[default]
    Drift,
    /// The shifted sequence `X_{2:n+1}` itself, without drift preparation.
    Direct,
}

/// `sqrt(alpha_bar_r) z0 + sqrt(1 - alpha_bar_r) eps`.
pub fn q_sample<F: Scalar>(z0: &Tensor<F>, r: usize, eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_step(r)?;
    let ab = schedule.alpha_bar(r);
    let (c0, ce) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    z0.zip_map(eps, |z, e| c0 * z + ce * e)
}

/// One reverse step: posterior mean of `z_{t-1}` given `z_t` and `z0_hat`,
/// plus `sqrt(beta_tilde_t) eps_prime`.
pub fn fusion<F: Scalar>(
    z_t: &Tensor<F>,
    z0_hat: &Tensor<F>,
    t: usize,
    eps_prime: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    schedule.check_step(t)?;
    if z_t.shape() != z0_hat.shape() || z_t.shape() != eps_prime.shape() {
        return Err(shape(
            "fusion",
            format!("{:?} / {:?} / {:?}", z_t.shape(), z0_hat.shape(), eps_prime.shape()),
        ));
    }
    let (c0, ct) = schedule.posterior_mean_coefficients(t);
    let sigma = schedule.beta_tilde(t).sqrt();
    if t == 1 {
        // beta_tilde_1 = 0 and the mean reduces to z0_hat.
        return Ok(z0_hat.clone());
    }
    let (c0, ct, sigma) = (F::of(c0), F::of(ct), F::of(sigma));
    let data = z_t
        .data()
        .iter()
        .zip(z0_hat.data())
        .zip(eps_prime.data())
        .map(|((&zt, &z0), &e)| c0 * z0 + ct * zt + sigma * e)
        .collect();
    Tensor::new(z_t.shape(), data)
}

fn next_row<F: Scalar>(x_seq: &Tensor<F>, next: &Tensor<F>) -> Result<Tensor<F>> {
    if x_seq.ndim() != 2 || x_seq.rows() == 0 || next.len() != x_seq.cols() {
        return Err(shape(
            "train_step",
            format!("sequence {:?} with next behavior {:?}", x_seq.shape(), next.shape()),
        ));
    }
    let mut data = x_seq.data().to_vec();
    data.extend_from_slice(next.data());
    Tensor::new(&[x_seq.rows() + 1, x_seq.cols()], data)
}

fn clean_target<F: Scalar>(full: &Tensor<F>, target: DiffusionTarget) -> Result<DriftTensor<F>> {
    match target {
        DiffusionTarget::Drift => drift_prepare(full),
        DiffusionTarget::Direct => {
            let d = full.cols();
            let shifted = Tensor::new(&[full.rows() - 1, d], full.data()[d..].to_vec())?;
            Ok(DriftTensor::new(shifted, DriftKind::Z0))
        }
    }
}

/// Next behavior implied by a reconstructed target.
pub fn utilize<F: Scalar>(z0: &DriftTensor<F>, x_seq: &Tensor<F>, target: DiffusionTarget) -> Result<Tensor<F>> {
    match target {
        DiffusionTarget::Drift => drift_utilize(z0, x_seq),
        DiffusionTarget::Direct => {
            let v = &z0.values;
            Tensor::new(&[1, v.cols()], v.row(v.rows() - 1).to_vec())
        }
    }
}

/// Result of one training pass of the diffusion module.
#[derive(Debug, Clone)]
pub struct DiffusionStep<F: Scalar> {
    pub z0: Tensor<F>,
    pub z0_hat: Var,
    pub l_kl: Var,
    /// One-shot next-behavior estimate from `z0_hat`, detached.
    pub x_hat: Tensor<F>,
    pub step: usize,
    pub similarity: Option<f64>,
}

/// Training pass at a fixed step `r` and noise `eps`. `x_seq: [n, d]` and
/// `next: [1, d]` must already be detached from any embedding graph.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<F: Scalar, A: Approximator<F> + ?Sized>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    approx: &A,
    x_seq: &Tensor<F>,
    next: &Tensor<F>,
    r: usize,
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
    target: DiffusionTarget,
) -> Result<DiffusionStep<F>> {
    let full = next_row(x_seq, next)?;
    let z0 = clean_target(&full, target)?;
    let z_r = q_sample(&z0.values, r, eps, schedule)?;
    let z_r = g.constant(z_r);
    let cond = g.constant(x_seq.clone());
    let z0_hat = approx.approximate(g, store, z_r, cond, r)?;
    let z0_var = g.constant(z0.values.clone());
    let diff = g.sub(z0_hat, z0_var)?;
    let sq = g.square(diff)?;
    let l_kl = g.mean_all(sq)?;
    let estimate = DriftTensor::new(g.value(z0_hat).clone(), DriftKind::Estimate);
    let x_hat = utilize(&estimate, x_seq, target)?;
    let similarity = similarity(&z0.values, &estimate.values);
    Ok(DiffusionStep {
        z0: z0.values,
        z0_hat,
        l_kl,
        x_hat,
        step: r,
        similarity,
    })
}

/// Draws `r ~ Uniform{1..T}` and `eps ~ N(0, I)` and runs [`diffusion_loss`].
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Scalar, A: Approximator<F> + ?Sized>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    approx: &A,
    x_seq: &Tensor<F>,
    next: &Tensor<F>,
    rng: &mut Rng,
    schedule: &NoiseSchedule,
    target: DiffusionTarget,
) -> Result<DiffusionStep<F>> {
    let r = rng.int_inclusive(1, schedule.steps);
    let eps = rng.gaussian(x_seq.shape());
    diffusion_loss(g, store, approx, x_seq, next, r, &eps, schedule, target)
}

/// Reverse process from `z_T ~ N(0, I)` down to `z_0`, returning the
/// predicted next behavior `[1, d]`.
pub fn reverse_infer<F: Scalar, A: Approximator<F> + ?Sized>(
    store: &ParamStore<F>,
    approx: &A,
    x_seq: &Tensor<F>,
    rng: &mut Rng,
    schedule: &NoiseSchedule,
    target: DiffusionTarget,
) -> Result<Tensor<F>> {
    if x_seq.ndim() != 2 || x_seq.rows() == 0 {
        return Err(shape("reverse_infer", format!("sequence {:?}", x_seq.shape())));
    }
    let mut z = rng.gaussian::<F>(x_seq.shape());
    for t in (1..=schedule.steps).rev() {
        let mut g = Graph::inference();
        let zt = g.constant(z);
        let cond = g.constant(x_seq.clone());
        let out = approx.approximate(&mut g, store, zt, cond, t)?;
        let z0_hat = g.value(out).clone();
        let zt_value = g.value(zt).clone();
        let eps = if t > 1 {
            rng.gaussian(x_seq.shape())
        } else {
            Tensor::zeros(x_seq.shape())
        };
        z = fusion(&zt_value, &z0_hat, t, &eps, schedule)?;
    }
    utilize(&DriftTensor::new(z, DriftKind::Estimate), x_seq, target)
}
