use std::collections::BTreeMap;

use super::{BehaviorSequence, Interaction};

/// Session boundary rule: a gap of at least `gap_seconds` between adjacent
/// behaviors starts a new session; sessions hold at most `k_max` behaviors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionRule {
    pub gap_seconds: i64,
    pub k_max: usize,
}

impl Default for SessionRule {
    fn default() -> Self {
        Self {
            gap_seconds: 1800,
            k_max: 10,
        }
    }
}

/// Groups interactions per user, sorts them by time (stable for ties), drops
/// users with fewer than `min_count` events and keeps the most recent
/// `max_len + 1` events of the rest. Output is ordered by user index.
pub fn build_sequences(interactions: &[Interaction], max_len: usize, min_count: usize) -> Vec<BehaviorSequence> {
    let mut per_user: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
    for it in interactions {
        per_user.entry(it.user).or_default().push((it.timestamp, it.item));
    }
    per_user
        .into_iter()
        .filter(|(_, events)| events.len() >= min_count)
        .map(|(user, mut events)| {
            events.sort_by_key(|&(ts, _)| ts);
            let keep = (max_len + 1).min(events.len());
            let events = &events[events.len() - keep..];
            let mut seq = BehaviorSequence {
                user,
                items: events.iter().map(|e| e.1).collect(),
                timestamps: events.iter().map(|e| e.0).collect(),
                session_start: 0,
            };
            seq.session_start = seq.n().saturating_sub(1);
            seq
        })
        .collect()
}

/// Marks the current session: the longest suffix of the input sequence whose
/// adjacent gaps are all below the threshold, capped at `k_max`, never empty.
pub fn split_session(mut seq: BehaviorSequence, rule: SessionRule) -> BehaviorSequence {
    let n = seq.n();
    if n == 0 {
        seq.session_start = 0;
        return seq;
    }
    let cap = rule.k_max.max(1);
    let mut start = n - 1;
    while start > 0 && n - start < cap && seq.timestamps[start] - seq.timestamps[start - 1] < rule.gap_seconds {
        start -= 1;
    }
    seq.session_start = start;
    seq
}
