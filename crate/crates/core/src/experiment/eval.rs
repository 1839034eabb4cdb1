use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::data::{BehaviorSequence, DatasetSplit};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Scalar};
use crate::par::{self, Parallelism};
use crate::towers::T2DiffModel;

/// 1-based rank of `target` (an index into `scores`). Higher scores rank
/// first; ties go to the lower index. Indices with `excluded[i]` set are not
/// candidates.
pub fn rank_of<F: Scalar>(scores: &[F], target: usize, excluded: Option<&[bool]>) -> usize {
    let st = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == target || excluded.is_some_and(|e| e[i]) {
            continue;
        }
        if s > st || (s == st && i < target) {
            rank += 1;
        }
    }
    rank
}

/// `(recall@K, mrr@K)` for every K over a list of ranks.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut recall = BTreeMap::new();
    let mut mrr = BTreeMap::new();
    let n = ranks.len().max(1) as f64;
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        let rr: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).sum();
        recall.insert(k, hits / n);
        mrr.insert(k, rr / n);
    }
    (recall, mrr)
}

/// Sorted, deduplicated, all positive.
pub fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("K values must be positive integers, got {ks:?}")));
    }
    let mut out = ks.to_vec();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub seed: u64,
    pub filter_seen: bool,
    /// Evaluate only the first this-many examples; 0 means all.
    pub max_users: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![2, 20],
            seed: 0,
            filter_seen: false,
            max_users: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub recall: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    pub users: usize,
    /// Mean wall-clock per user, reverse loop and scoring included.
    pub per_sample_ms: f64,
    pub param_count: usize,
    pub similarity_trace: Option<String>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    /// Same numbers, ignoring timing.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        self.recall == other.recall && self.mrr == other.mrr && self.users == other.users
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `metric,k,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value\n");
        for (k, v) in &self.recall {
            let _ = writeln!(s, "recall,{k},{v}");
        }
        for (k, v) in &self.mrr {
            let _ = writeln!(s, "mrr,{k},{v}");
        }
        s
    }

    /// Human-readable table, one row per K.
    pub fn table(&self) -> String {
        let mut s = String::from("K\trecall\tmrr\n");
        for (k, r) in &self.recall {
            let _ = writeln!(s, "{k}\t{r:.5}\t{:.5}", self.mrr[k]);
        }
        s
    }
}

fn exclusion_mask(ex: &BehaviorSequence, items: usize) -> Vec<bool> {
    let mut mask = vec![false; items];
    for &i in DatasetSplit::seen_items(ex) {
        if i != ex.target() && i >= 1 {
            mask[i as usize - 1] = true;
        }
    }
    mask
}

fn limit<'a>(examples: &'a [BehaviorSequence], max: usize) -> &'a [BehaviorSequence] {
    if max == 0 {
        examples
    } else {
        &examples[..max.min(examples.len())]
    }
}

/// Rank of one example's target under the model.
pub fn rank_example<F: Scalar>(
    model: &T2DiffModel,
    store: &ParamStore<F>,
    ex: &BehaviorSequence,
    schedule: &NoiseSchedule,
    seed: u64,
    filter_seen: bool,
) -> Result<usize> {
    let mut rng = Rng::stream(seed, "infer", &[ex.user as u64, ex.n() as u64]);
    let e_u = model.infer_user(store, ex, schedule, &mut rng)?;
    let scores = model.score_items(store, &e_u)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("non-finite score for user {}", ex.user),
        });
    }
    let mask = filter_seen.then(|| exclusion_mask(ex, scores.len()));
    Ok(rank_of(&scores, ex.target() as usize - 1, mask.as_deref()))
}

/// Exact top-K evaluation over `examples`, one seeded reverse sample each.
pub fn evaluate<F: Scalar>(
    model: &T2DiffModel,
    store: &ParamStore<F>,
    examples: &[BehaviorSequence],
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
    mode: Parallelism,
) -> Result<EvalReport> {
    let ks = normalize_ks(&opts.ks)?;
    let examples = limit(examples, opts.max_users);
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation examples".into()));
    }
    let start = Instant::now();
    let ranks = par::try_map(examples, mode, |ex| {
        rank_example(model, store, ex, schedule, opts.seed, opts.filter_seen)
    })?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let (recall, mrr) = metrics_from_ranks(&ranks, &ks);
    Ok(EvalReport {
        recall,
        mrr,
        users: ranks.len(),
        per_sample_ms: elapsed / ranks.len() as f64,
        param_count: store.count(None),
        similarity_trace: None,
        config: BTreeMap::new(),
    })
}

/// Ranks items by training frequency (ties to the lower index).
pub fn popularity_baseline(
    split: &DatasetSplit,
    examples: &[BehaviorSequence],
    ks: &[usize],
    filter_seen: bool,
) -> Result<EvalReport> {
    let ks = normalize_ks(ks)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation examples".into()));
    }
    let freq = split.train_item_frequency();
    let scores: Vec<f64> = freq[1..].iter().map(|&c| c as f64).collect();
    let ranks: Vec<usize> = examples
        .iter()
        .map(|ex| {
            let mask = filter_seen.then(|| exclusion_mask(ex, scores.len()));
            rank_of(&scores, ex.target() as usize - 1, mask.as_deref())
        })
        .collect();
    let (recall, mrr) = metrics_from_ranks(&ranks, &ks);
    Ok(EvalReport {
        recall,
        mrr,
        users: ranks.len(),
        per_sample_ms: 0.0,
        param_count: 0,
        similarity_trace: None,
        config: BTreeMap::new(),
    })
}

/// Median single-threaded wall-clock milliseconds per user over up to
/// `samples` examples (cycled if fewer), after `warmup` untimed users.
pub fn time_inference<F: Scalar>(
    model: &T2DiffModel,
    store: &ParamStore<F>,
    examples: &[BehaviorSequence],
    schedule: &NoiseSchedule,
    samples: usize,
    warmup: usize,
) -> Result<f64> {
    if examples.is_empty() || samples == 0 {
        return Err(Error::EmptyDataset("no examples to time".into()));
    }
    for i in 0..warmup {
        rank_example(model, store, &examples[i % examples.len()], schedule, 0, false)?;
    }
    let mut times = Vec::with_capacity(samples);
    for i in 0..samples {
        let ex = &examples[i % examples.len()];
        let t = Instant::now();
        rank_example(model, store, ex, schedule, i as u64, false)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}
