//! Drift diffusion: noise schedules, forward corruption of behavior drift,
//! the conditional U-Net approximator and the reverse sampling loop.

mod drift;
mod process;
mod schedule;
mod unet;

pub use drift::{drift_prepare, drift_utilize, similarity, DriftKind, DriftTensor};
pub use process::{
    diffusion_loss, fusion, q_sample, reverse_infer, train_step, utilize, DiffusionStep, DiffusionTarget,
};
pub use schedule::{rate_for_endpoint, NoiseSchedule, ScheduleKind};
pub use unet::{step_embedding, Approximator, UNet};
