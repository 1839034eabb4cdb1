use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::config::TrainConfig;
use super::eval::{evaluate, time_inference, EvalOptions};
use super::train::train;
use crate::data::DatasetSplit;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::towers::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Variant,
    Schedule,
    Steps,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Variant => "variant",
            AblationAxis::Schedule => "schedule",
            AblationAxis::Steps => "steps",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variant" | "model" => Ok(AblationAxis::Variant),
            "schedule" => Ok(AblationAxis::Schedule),
            "steps" | "t" => Ok(AblationAxis::Steps),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// Grid points of one axis, labelled.
///
/// Schedule forms share the base exponential endpoints. Step counts each
/// re-derive the rate so that the last beta equals `beta_end`.
pub fn ablation_configs(base: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    match axis {
        AblationAxis::Variant => Variant::ALL
            .iter()
            .map(|&v| {
                let cfg = TrainConfig {
                    variant: v,
                    ..base.clone()
                };
                (v.name().to_string(), cfg)
            })
            .collect(),
        AblationAxis::Schedule => [ScheduleKind::Linear, ScheduleKind::Log, ScheduleKind::Exp]
            .iter()
            .map(|&k| {
                let cfg = TrainConfig {
                    schedule: k,
                    schedule_b: Some(base.rate()),
                    variant: Variant::Full,
                    ..base.clone()
                };
                (k.name().to_string(), cfg)
            })
            .collect(),
        AblationAxis::Steps => [10, 50, 200]
            .iter()
            .map(|&t| {
                let cfg = TrainConfig {
                    steps: t,
                    schedule_b: None,
                    variant: Variant::Full,
                    ..base.clone()
                };
                (format!("T={t}"), cfg)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub seed: u64,
    pub recall: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    /// Median single-thread milliseconds per user, when timed.
    pub infer_ms: Option<f64>,
}

/// Trains and tests every grid point of `axis` for every seed.
pub fn ablate(
    split: &DatasetSplit,
    base: &TrainConfig,
    axis: AblationAxis,
    seeds: &[u64],
    ks: &[usize],
    timing_samples: usize,
    mode: Parallelism,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_configs(base, axis) {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = train(split, &cfg, mode)?;
            let schedule = cfg.noise_schedule()?;
            let opts = EvalOptions {
                ks: ks.to_vec(),
                seed,
                filter_seen: cfg.filter_seen,
                max_users: 0,
            };
            let report = evaluate(&out.model, &out.store, &split.test, &schedule, &opts, mode)?;
            let infer_ms = if timing_samples > 0 {
                Some(time_inference(&out.model, &out.store, &split.test, &schedule, timing_samples, 10)?)
            } else {
                None
            };
            rows.push(AblationRow {
                axis: axis.name().to_string(),
                label: label.clone(),
                seed,
                recall: report.recall,
                mrr: report.mrr,
                infer_ms,
            });
        }
    }
    Ok(rows)
}

/// One CSV row per grid point and seed.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let ks: Vec<usize> = rows.first().map(|r| r.recall.keys().copied().collect()).unwrap_or_default();
    let mut s = String::from("axis,label,seed");
    for k in &ks {
        let _ = write!(s, ",recall@{k},mrr@{k}");
    }
    s.push_str(",infer_ms\n");
    for r in rows {
        let _ = write!(s, "{},{},{}", r.axis, r.label, r.seed);
        for k in &ks {
            let _ = write!(s, ",{},{}", r.recall[k], r.mrr[k]);
        }
        let _ = writeln!(s, ",{}", r.infer_ms.map_or(String::new(), |v| v.to_string()));
    }
    s
}

/// Mean over seeds per label, in grid order.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let ks: Vec<usize> = rows.first().map(|r| r.recall.keys().copied().collect()).unwrap_or_default();
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut s = String::from("label");
    for k in &ks {
        let _ = write!(s, "\trecall@{k}\tmrr@{k}");
    }
    s.push_str("\tinfer_ms\n");
    for label in labels {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| r.label == label).collect();
        let n = group.len() as f64;
        let _ = write!(s, "{label}");
        for k in &ks {
            let rec = group.iter().map(|r| r.recall[k]).sum::<f64>() / n;
            let mrr = group.iter().map(|r| r.mrr[k]).sum::<f64>() / n;
            let _ = write!(s, "\t{rec:.5}\t{mrr:.5}");
        }
        let times: Vec<f64> = group.iter().filter_map(|r| r.infer_ms).collect();
        if times.is_empty() {
            s.push_str("\t-\n");
        } else {
            let _ = writeln!(s, "\t{:.3}", times.iter().sum::<f64>() / times.len() as f64);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let base = TrainConfig::default();
        let steps = ablation_configs(&base, AblationAxis::Steps);
        assert_eq!(steps.len(), 3);
        for (_, cfg) in &steps {
            let s = cfg.noise_schedule().unwrap();
            assert!((s.beta(s.steps) - 0.02).abs() < 1e-12);
        }
        let sched = ablation_configs(&base, AblationAxis::Schedule);
        let exp = sched[2].1.noise_schedule().unwrap();
        for (_, cfg) in &sched {
            let s = cfg.noise_schedule().unwrap();
            assert!((s.beta(1) - exp.beta(1)).abs() < 1e-15);
            assert!((s.beta(50) - exp.beta(50)).abs() < 1e-12);
        }
        let labels: Vec<_> = ablation_configs(&base, AblationAxis::Variant).into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels, ["full", "mixed_attention_only", "no_drift_prep"]);
        assert!("bogus".parse::<AblationAxis>().is_err());
    }
}
