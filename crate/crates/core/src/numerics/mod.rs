//! Dense tensors, reverse-mode differentiation, seeded sampling and
//! finite-difference gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_extrapolated, GradCheck};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig, GradBuffer};
pub use params::{Param, ParamGroup, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rng::{derive_seed, Rng};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub(crate) use params::Cursor;
