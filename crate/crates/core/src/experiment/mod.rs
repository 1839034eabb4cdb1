//! Training orchestration, exact top-K evaluation, ablation grids and run
//! artifacts.

mod ablate;
mod config;
mod eval;
mod gradcheck;
mod run;
mod train;

pub use ablate::{ablate, ablation_configs, ablation_csv, ablation_summary, AblationAxis, AblationRow};
pub use config::TrainConfig;
pub use eval::{
    evaluate, metrics_from_ranks, normalize_ks, popularity_baseline, rank_example, rank_of, time_inference,
    EvalOptions, EvalReport,
};
pub use gradcheck::{check_tiny_model, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use run::{adopt, digest_bytes, digest_file, load_run, run_dir, save_run, RunManifest, CHECKPOINT_FILE, CONFIG_FILE};
pub use train::{
    build_model, similarity_csv, trace_csv, train, train_diffusion, DiffusionFit, TraceRow, TrainOutcome,
};
