use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::diffusion::{rate_for_endpoint, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::towers::{ModelConfig, Variant};

/// Every setting of a training run. Serialised as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub max_len: usize,
    pub k_max: usize,
    pub gap_seconds: i64,
    pub min_count: usize,
    pub heads: usize,
    pub layers: usize,
    pub attention_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub schedule: ScheduleKind,
    pub schedule_a: f64,
    /// Rate of the exponential schedule; derived from `beta_end` when unset.
    pub schedule_b: Option<f64>,
    pub beta_end: f64,
    pub steps: usize,
    pub seed: u64,
    /// Sampled negatives per example; 0 scores the full vocabulary.
    pub negatives: usize,
    pub variant: Variant,
    pub patience: usize,
    /// Validation users used for early stopping; 0 means all.
    pub validation_users: usize,
    /// Examples per parallel work unit.
    pub chunk: usize,
    pub filter_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            k_max: 10,
            gap_seconds: 1800,
            min_count: 5,
            heads: 2,
            layers: 1,
            attention_hidden: 64,
            batch_size: 256,
            epochs: 100,
            max_steps: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1.0,
            schedule: ScheduleKind::Exp,
            schedule_a: 1e-4,
            schedule_b: None,
            beta_end: 0.02,
            steps: 50,
            seed: 0,
            negatives: 0,
            variant: Variant::Full,
            patience: 5,
            validation_users: 0,
            chunk: 8,
            filter_seen: false,
        }
    }
}

const KEYS: &[&str] = &[
    "dim",
    "max_len",
    "k_max",
    "gap_seconds",
    "min_count",
    "heads",
    "layers",
    "attention_hidden",
    "batch_size",
    "epochs",
    "max_steps",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda",
    "schedule",
    "schedule_a",
    "schedule_b",
    "beta_end",
    "steps",
    "seed",
    "negatives",
    "ablation",
    "mixed_attention_only",
    "no_drift_prep",
    "patience",
    "validation_users",
    "chunk",
    "filter_seen",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut flags = Flags::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim(), &mut flags)?;
        }
        cfg.finish(flags)
    }

    /// Applies `T2DIFF_<KEY>` overrides from `lookup` (normally the process
    /// environment) on top of this config.
    pub fn with_overrides(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut flags = Flags::default();
        let mut any = false;
        for key in KEYS {
            if let Some(v) = lookup(&format!("T2DIFF_{}", key.to_ascii_uppercase())) {
                self.set(key, v.trim(), &mut flags)?;
                any = true;
            }
        }
        if !any {
            return Ok(self);
        }
        self.finish(flags)
    }

    fn set(&mut self, key: &str, value: &str, flags: &mut Flags) -> Result<()> {
        match key {
            "dim" => self.dim = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "k_max" => self.k_max = num(key, value)?,
            "gap_seconds" => self.gap_seconds = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "attention_hidden" => self.attention_hidden = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "schedule_a" => self.schedule_a = num(key, value)?,
            "schedule_b" => {
                self.schedule_b = match value {
                    "" | "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "beta_end" => self.beta_end = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "negatives" => self.negatives = num(key, value)?,
            "ablation" => flags.ablation = Some(value.parse()?),
            "mixed_attention_only" => flags.mixed = Some(flag(key, value)?),
            "no_drift_prep" => flags.no_dp = Some(flag(key, value)?),
            "patience" => self.patience = num(key, value)?,
            "validation_users" => self.validation_users = num(key, value)?,
            "chunk" => self.chunk = num(key, value)?,
            "filter_seen" => self.filter_seen = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn finish(mut self, flags: Flags) -> Result<Self> {
        let mut chosen: Vec<Variant> = Vec::new();
        if let Some(v) = flags.ablation {
            chosen.push(v);
        }
        if flags.mixed == Some(true) {
            chosen.push(Variant::MixedAttentionOnly);
        }
        if flags.no_dp == Some(true) {
            chosen.push(Variant::NoDriftPrep);
        }
        chosen.dedup();
        match chosen.as_slice() {
            [] => {}
            [v] => self.variant = *v,
            _ => {
                let names: Vec<_> = chosen.iter().map(|v| v.name()).collect();
                return Err(Error::Config(format!(
                    "ablation flags are mutually exclusive, got {}",
                    names.join(" and ")
                )));
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("max_len", self.max_len),
            ("k_max", self.k_max),
            ("heads", self.heads),
            ("attention_hidden", self.attention_hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps", self.steps),
            ("chunk", self.chunk),
            ("patience", self.patience),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("`dim` {} not divisible by `heads` {}", self.dim, self.heads)));
        }
        if self.gap_seconds <= 0 {
            return Err(Error::Config("`gap_seconds` must be positive".into()));
        }
        for (k, v) in [("lr", self.lr), ("schedule_a", self.schedule_a), ("beta_end", self.beta_end)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("`lambda` must be non-negative".into()));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1)")));
            }
        }
        if self.variant.uses_diffusion() {
            self.noise_schedule()?;
        }
        Ok(())
    }

    /// Exponential rate actually used.
    pub fn rate(&self) -> f64 {
        self.schedule_b
            .unwrap_or_else(|| rate_for_endpoint(self.schedule_a, self.beta_end, self.steps))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.schedule_a, self.rate(), self.steps)
    }

    pub fn model_config(&self, items: usize) -> ModelConfig {
        ModelConfig {
            items,
            dim: self.dim,
            k_max: self.k_max,
            heads: self.heads,
            layers: self.layers,
            attention_hidden: self.attention_hidden,
            variant: self.variant,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dim", self.dim.to_string());
        kv("max_len", self.max_len.to_string());
        kv("k_max", self.k_max.to_string());
        kv("gap_seconds", self.gap_seconds.to_string());
        kv("min_count", self.min_count.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("attention_hidden", self.attention_hidden.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", format!("{:e}", self.adam_eps));
        kv("lambda", self.lambda.to_string());
        kv("schedule", self.schedule.name().to_string());
        kv("schedule_a", format!("{:e}", self.schedule_a));
        kv("schedule_b", self.schedule_b.map_or("auto".into(), |b| b.to_string()));
        kv("beta_end", self.beta_end.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("negatives", self.negatives.to_string());
        kv("ablation", self.variant.name().to_string());
        kv("patience", self.patience.to_string());
        kv("validation_users", self.validation_users.to_string());
        kv("chunk", self.chunk.to_string());
        kv("filter_seen", self.filter_seen.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `(key, value)` pairs of the canonical text, for report echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

#[derive(Default)]
struct Flags {
    ablation: Option<Variant>,
    mixed: Option<bool>,
    no_dp: Option<bool>,
}
