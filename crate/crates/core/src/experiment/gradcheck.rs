use crate::data::BehaviorSequence;
use crate::diffusion::{diffusion_loss, DiffusionTarget, NoiseSchedule, UNet};
use crate::error::Result;
use crate::numerics::{grad_check_params_extrapolated, GradCheck, ParamId, ParamStore, Rng};
use crate::towers::{CandidateScope, ModelConfig, T2DiffModel, Variant};

/// Coarse step of the extrapolated central differences.
pub const GRADCHECK_STEP: f64 = 3e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn tiny_example(rng: &mut Rng, items: usize) -> BehaviorSequence {
    let n = 6;
    let mut ts = 1_000_000i64;
    let timestamps = (0..=n)
        .map(|j| {
            let t = ts;
            ts += if j >= 3 { 45 } else { 50_000 + rng.below(500_000) as i64 };
            t
        })
        .collect();
    BehaviorSequence {
        user: 1,
        items: (0..=n).map(|_| 1 + rng.below(items) as u32).collect(),
        timestamps,
        session_start: 3,
    }
}

/// Checks every parameter of a tiny model in 64-bit mode: the U-Net through
/// the diffusion loss on fixed inputs, the item table and user tower through
/// the softmax loss of the model without the diffusion branch.
pub fn check_tiny_model(seed: u64, coords_per_param: Option<usize>) -> Result<GradCheck> {
    let mut rng = Rng::stream(seed, "gradcheck", &[]);
    let (items, dim) = (9, 4);

    let mut store = ParamStore::<f64>::new();
    let unet = UNet::new(&mut store, dim, &mut rng);
    let out = unet.output_weight();
    let shape = store.value(out).shape().to_vec();
    // A zero output layer would hide every upstream gradient.
    *store.value_mut(out) = rng.gaussian::<f64>(&shape).map(|v| 0.3 * v);
    let schedule = NoiseSchedule::exponential(1e-4, 0.1, 20)?;
    let x = rng.gaussian::<f64>(&[5, dim]);
    let next = rng.gaussian::<f64>(&[1, dim]);
    let eps = rng.gaussian::<f64>(&[5, dim]);
    let r = rng.int_inclusive(1, schedule.steps);
    let ids: Vec<ParamId> = store.ids().collect();
    let diffusion = grad_check_params_extrapolated(
        |g, s| Ok(diffusion_loss(g, s, &unet, &x, &next, r, &eps, &schedule, DiffusionTarget::Drift)?.l_kl),
        &store,
        &ids,
        GRADCHECK_STEP,
        coords_per_param,
        seed,
    )?;

    let mut store = ParamStore::<f64>::new();
    let cfg = ModelConfig {
        items,
        dim,
        k_max: 4,
        heads: 2,
        layers: 1,
        attention_hidden: 8,
        variant: Variant::MixedAttentionOnly,
    };
    let model = T2DiffModel::new(cfg, &mut store, &mut rng);
    let ex = tiny_example(&mut rng, items);
    let ids: Vec<ParamId> = store.ids().collect();
    let tower = grad_check_params_extrapolated(
        |g, s| {
            let out = model.example_loss(g, s, &ex, &schedule, 1.0, &CandidateScope::Full, &mut Rng::new(0))?;
            Ok(out.loss)
        },
        &store,
        &ids,
        GRADCHECK_STEP,
        coords_per_param,
        seed,
    )?;
    Ok(diffusion.merge(tower))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes() {
        let report = check_tiny_model(0, Some(3)).unwrap();
        assert!(report.checked > 50);
        assert!(report.max_rel_err < GRADCHECK_TOLERANCE, "{report:?}");
    }
}
