use std::fmt::Write as _;

use serde::Serialize;

use super::config::TrainConfig;
use super::eval::{evaluate, EvalOptions};
use crate::data::{BehaviorSequence, DatasetSplit};
use crate::diffusion::{train_step, DiffusionTarget, NoiseSchedule, UNet};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Adam, AdamConfig, GradBuffer, Graph, ParamStore, Rng, Scalar, Tensor};
use crate::par::{self, Parallelism};
use crate::towers::{CandidateScope, T2DiffModel};

/// Batch means logged after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub l_tower: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub similarity: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,epoch,l_tower,l_kl,l_total,similarity\n");
    for r in rows {
        let sim = r.similarity.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{},{sim}", r.step, r.epoch, r.l_tower, r.l_kl, r.l_total);
    }
    s
}

/// `iteration,cosine` rows; steps without a defined similarity are skipped.
pub fn similarity_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,cosine\n");
    for r in rows {
        if let Some(c) = r.similarity {
            let _ = writeln!(s, "{},{c}", r.step);
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: T2DiffModel,
    /// Parameters of the best validation epoch (or the last one).
    pub store: ParamStore<f32>,
    pub trace: Vec<TraceRow>,
    /// `(epoch, validation recall@20)`.
    pub validation: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Freshly initialised model and parameters for `items` items.
pub fn build_model(cfg: &TrainConfig, items: usize) -> (T2DiffModel, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = Rng::stream(cfg.seed, "init", &[]);
    let model = T2DiffModel::new(cfg.model_config(items), &mut store, &mut rng);
    (model, store)
}

#[derive(Default)]
struct Partial {
    l_tower: f64,
    l_kl: f64,
    l_total: f64,
    sim_sum: f64,
    sim_count: usize,
}

fn sample_scope(cfg: &TrainConfig, items: usize, target: u32, rng: &mut Rng) -> CandidateScope {
    if cfg.negatives == 0 {
        return CandidateScope::Full;
    }
    let mut negs = Vec::with_capacity(cfg.negatives);
    while negs.len() < cfg.negatives {
        let cand = 1 + rng.below(items) as u32;
        if cand != target || items == 1 {
            negs.push(cand);
        }
    }
    CandidateScope::Sampled(negs)
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: &T2DiffModel,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    items: usize,
    examples: &[(usize, &BehaviorSequence)],
    epoch: usize,
) -> Result<(GradBuffer<f32>, Partial)> {
    let mut grads = GradBuffer::new(store.len());
    let mut part = Partial::default();
    for &(idx, ex) in examples {
        let mut rng = Rng::stream(cfg.seed, "example", &[epoch as u64, idx as u64]);
        let scope = sample_scope(cfg, items, ex.target(), &mut rng);
        let mut g = Graph::new();
        let out = model.example_loss(&mut g, store, ex, schedule, cfg.lambda, &scope, &mut rng)?;
        let total = g.value(out.loss).item().f64();
        if !total.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss on example {idx}")));
        }
        g.backward(out.loss)?;
        for (id, grad) in g.param_grads() {
            grads.add(id, grad);
        }
        part.l_total += total;
        part.l_tower += g.value(out.l_tower).item().f64();
        part.l_kl += out.l_kl.map_or(0.0, |v| g.value(v).item().f64());
        if let Some(s) = out.similarity {
            part.sim_sum += s;
            part.sim_count += 1;
        }
    }
    Ok((grads, part))
}

/// Minibatch Adam over the training examples with early stopping on
/// validation recall@20.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig, mode: Parallelism) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("split has no training examples".into()));
    }
    let items = split.item_count as usize;
    let schedule = cfg.noise_schedule()?;
    let (model, mut store) = build_model(cfg, items);
    let frozen = model.frozen_rows();
    let mut adam = Adam::new(cfg.adam(), store.len());
    let mut trace = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let eval_opts = EvalOptions {
        ks: vec![20],
        seed: derive_seed(cfg.seed, "validation", &[]),
        filter_seen: cfg.filter_seen,
        max_users: cfg.validation_users,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        Rng::stream(cfg.seed, "shuffle", &[epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let work: Vec<(usize, &BehaviorSequence)> = batch.iter().map(|&i| (i, &split.train[i])).collect();
            let results = par::map_chunks(&work, cfg.chunk, mode, |chunk| {
                run_chunk(&model, &store, cfg, &schedule, items, chunk, epoch)
            });
            let mut grads = GradBuffer::new(store.len());
            let mut sum = Partial::default();
            for r in results {
                let (g, p) = r.map_err(|e| Error::Diverged {
                    step: step + 1,
                    detail: e.to_string(),
                })?;
                grads.merge(g);
                sum.l_tower += p.l_tower;
                sum.l_kl += p.l_kl;
                sum.l_total += p.l_total;
                sum.sim_sum += p.sim_sum;
                sum.sim_count += p.sim_count;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n as f32);
            step += 1;
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(&mut store, &grads, &frozen);
            trace.push(TraceRow {
                step,
                epoch,
                l_tower: sum.l_tower / n,
                l_kl: sum.l_kl / n,
                l_total: sum.l_total / n,
                similarity: (sum.sim_count > 0).then(|| sum.sim_sum / sum.sim_count as f64),
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                validate_epoch(
                    &model, &store, split, &schedule, &eval_opts, mode, epoch, &mut validation, &mut best,
                    &mut since_best,
                )?;
                break 'epochs;
            }
        }
        let improved = validate_epoch(
            &model, &store, split, &schedule, &eval_opts, mode, epoch, &mut validation, &mut best, &mut since_best,
        )?;
        if !improved && since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (validation.last().map_or(0, |v: &(usize, f64)| v.0), store),
    };
    Ok(TrainOutcome {
        model,
        store,
        trace,
        validation,
        best_epoch,
        steps: step,
    })
}

#[allow(clippy::too_many_arguments)]
fn validate_epoch(
    model: &T2DiffModel,
    store: &ParamStore<f32>,
    split: &DatasetSplit,
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
    mode: Parallelism,
    epoch: usize,
    history: &mut Vec<(usize, f64)>,
    best: &mut Option<(f64, usize, ParamStore<f32>)>,
    since_best: &mut usize,
) -> Result<bool> {
    if split.validation.is_empty() {
        *best = Some((0.0, epoch, store.clone()));
        return Ok(true);
    }
    let report = evaluate(model, store, &split.validation, schedule, opts, mode)?;
    let recall = report.recall[&20];
    history.push((epoch, recall));
    let improved = best.as_ref().is_none_or(|(b, _, _)| recall > *b);
    if improved {
        *best = Some((recall, epoch, store.clone()));
        *since_best = 0;
    } else {
        *since_best += 1;
    }
    Ok(improved)
}

/// Settings for [`train_diffusion`].
#[derive(Debug, Clone)]
pub struct DiffusionFit {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub chunk: usize,
    pub target: DiffusionTarget,
}

/// Trains a U-Net alone on continuous sequences (`[n + 1, d]` each, last row
/// the next behavior). Returns the parameters and the per-step mean cosine
/// similarity between `z0` and its reconstruction.
pub fn train_diffusion<F: Scalar>(
    sequences: &[Tensor<F>],
    schedule: &NoiseSchedule,
    fit: &DiffusionFit,
    mode: Parallelism,
) -> Result<(UNet, ParamStore<F>, Vec<f64>)> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::EmptyDataset("no sequences".into()))?;
    let dim = first.cols();
    let mut store = ParamStore::new();
    let unet = UNet::new(&mut store, dim, &mut Rng::stream(fit.seed, "init", &[]));
    let mut adam = Adam::new(fit.adam, store.len());
    let mut trace = Vec::new();
    let split_rows = |s: &Tensor<F>| -> Result<(Tensor<F>, Tensor<F>)> {
        let n = s.rows() - 1;
        let x = Tensor::new(&[n, dim], s.data()[..n * dim].to_vec())?;
        let next = Tensor::new(&[1, dim], s.row(n).to_vec())?;
        Ok((x, next))
    };
    for epoch in 0..fit.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        Rng::stream(fit.seed, "shuffle", &[epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(fit.batch_size) {
            let results = par::map_chunks(batch, fit.chunk, mode, |chunk| -> Result<(GradBuffer<F>, f64, usize)> {
                let mut grads = GradBuffer::new(store.len());
                let (mut sim, mut count) = (0.0, 0);
                for &i in chunk {
                    let (x, next) = split_rows(&sequences[i])?;
                    let mut rng = Rng::stream(fit.seed, "example", &[epoch as u64, i as u64]);
                    let mut g = Graph::new();
                    let step = train_step(&mut g, &store, &unet, &x, &next, &mut rng, schedule, fit.target)?;
                    g.backward(step.l_kl)?;
                    for (id, grad) in g.param_grads() {
                        grads.add(id, grad);
                    }
                    if let Some(s) = step.similarity {
                        sim += s;
                        count += 1;
                    }
                }
                Ok((grads, sim, count))
            });
            let mut grads = GradBuffer::new(store.len());
            let (mut sim, mut count) = (0.0, 0);
            for r in results {
                let (g, s, c) = r?;
                grads.merge(g);
                sim += s;
                count += c;
            }
            grads.scale(F::one() / F::of(batch.len() as f64));
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step: trace.len() + 1,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(&mut store, &grads, &[]);
            trace.push(if count > 0 { sim / count as f64 } else { 0.0 });
        }
    }
    Ok((unet, store, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_sequences, leave_one_out, synthetic, SessionRule};

    fn tiny_split() -> DatasetSplit {
        let log = synthetic::ring_log(synthetic::RingLogConfig {
            users: 12,
            items: 15,
            min_len: 5,
            max_len: 8,
            ..Default::default()
        });
        let seqs = build_sequences(&log.interactions, 10, 3);
        leave_one_out(&seqs, log.user_count(), log.item_count(), SessionRule::default())
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            heads: 2,
            attention_hidden: 8,
            batch_size: 8,
            epochs: 2,
            steps: 5,
            chunk: 3,
            ..Default::default()
        }
    }

    #[test]
    fn runs_and_is_mode_independent() {
        let split = tiny_split();
        let cfg = tiny_config();
        let a = train(&split, &cfg, Parallelism::Rayon).unwrap();
        let b = train(&split, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(a.steps > 0);
        assert!(a.trace.iter().all(|r| r.l_total.is_finite()));
        for (id, p) in a.store.iter() {
            assert_eq!(p.value(), b.store.value(id));
        }
        assert!(a.store.value(a.model.embedding.id).row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_shapes() {
        let rows = vec![TraceRow {
            step: 1,
            epoch: 0,
            l_tower: 1.0,
            l_kl: 0.5,
            l_total: 1.5,
            similarity: None,
        }];
        assert_eq!(trace_csv(&rows).lines().count(), 2);
        assert_eq!(similarity_csv(&rows).lines().count(), 1);
    }
}
