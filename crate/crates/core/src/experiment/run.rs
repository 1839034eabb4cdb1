use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::train::{build_model, similarity_csv, trace_csv, TrainOutcome};
use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamStore};
use crate::towers::T2DiffModel;

pub const CHECKPOINT_FILE: &str = "checkpoint.t2pw";
pub const CONFIG_FILE: &str = "config.txt";

/// What a run produced and from which inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub data_digest: String,
    pub version: String,
    pub variant: String,
    pub param_count: usize,
    pub unet_param_count: usize,
    pub best_epoch: usize,
    pub steps: usize,
    pub outputs: Vec<String>,
}

/// Lower-case hex SHA-256 of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(digest_bytes(&fs::read(path)?))
}

/// `<out>/<config hash>`.
pub fn run_dir(out: impl AsRef<Path>, cfg: &TrainConfig) -> PathBuf {
    out.as_ref().join(cfg.hash())
}

/// Writes checkpoint, config, traces and manifest into `dir`.
pub fn save_run(dir: impl AsRef<Path>, cfg: &TrainConfig, outcome: &TrainOutcome, data_digest: &str) -> Result<RunManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut ckpt = Vec::new();
    outcome.store.write_checkpoint(&mut ckpt)?;
    let files: [(&str, Vec<u8>); 5] = [
        (CHECKPOINT_FILE, ckpt),
        (CONFIG_FILE, cfg.to_text().into_bytes()),
        ("trace.csv", trace_csv(&outcome.trace).into_bytes()),
        ("similarity.csv", similarity_csv(&outcome.trace).into_bytes()),
        (
            "validation.csv",
            std::iter::once("epoch,recall@20".to_string())
                .chain(outcome.validation.iter().map(|(e, r)| format!("{e},{r}")))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes(),
        ),
    ];
    let mut outputs = Vec::new();
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
        outputs.push(name.to_string());
    }
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        data_digest: data_digest.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        variant: cfg.variant.name().to_string(),
        param_count: outcome.store.count(None),
        unet_param_count: outcome.store.count(Some(ParamGroup::Diffusion)),
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a checkpoint and the `config.txt` beside it and rebuilds the model
/// for a vocabulary of `items` items.
pub fn load_run(checkpoint: impl AsRef<Path>, items: usize) -> Result<(TrainConfig, T2DiffModel, ParamStore<f32>)> {
    let checkpoint = checkpoint.as_ref();
    let bytes = fs::read(checkpoint)?;
    let loaded = ParamStore::<f32>::read_checkpoint(&bytes[..])?;
    let config_path = checkpoint.with_file_name(CONFIG_FILE);
    let cfg = TrainConfig::parse(&fs::read_to_string(&config_path)?)?;
    let (model, fresh) = build_model(&cfg, items);
    let store = adopt(&fresh, loaded)?;
    Ok((cfg, model, store))
}

/// Checks that `loaded` has exactly the layout of `template`.
pub fn adopt(template: &ParamStore<f32>, loaded: ParamStore<f32>) -> Result<ParamStore<f32>> {
    if template.len() != loaded.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            template.len()
        )));
    }
    for ((_, a), (_, b)) in template.iter().zip(loaded.iter()) {
        if a.name != b.name || a.value().shape() != b.value().shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter `{}` {:?} does not match model `{}` {:?}",
                b.name,
                b.value().shape(),
                a.name,
                a.value().shape()
            )));
        }
    }
    Ok(loaded)
}
