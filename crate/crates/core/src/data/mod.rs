//! Interaction logs, per-user behavior sequences and dataset splits.

mod parse;
mod sequence;
mod split;
mod store;
pub mod synthetic;

pub use parse::{parse_kuairand, parse_kuairand_reader, parse_ml1m, parse_ml1m_reader};
pub use sequence::{build_sequences, split_session, SessionRule};
pub use split::{leave_one_out, DatasetSplit};
pub use store::{load_split, persist_split, read_split, write_split, DATASET_MAGIC, DATASET_VERSION};

use std::collections::BTreeMap;

/// Index reserved for left padding; real users and items start at 1.
pub const PADDING: u32 = 0;

/// One positive user-item event with contiguous 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// Seconds since epoch.
    pub timestamp: i64,
}

/// Raw identifier to contiguous index map, assigned in ascending raw order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    index: BTreeMap<u64, u32>,
}

impl Vocabulary {
    pub fn from_raw(raw: impl IntoIterator<Item = u64>) -> Self {
        let mut index: BTreeMap<u64, u32> = raw.into_iter().map(|r| (r, 0)).collect();
        for (i, v) in index.values_mut().enumerate() {
            *v = i as u32 + 1;
        }
        Self { index }
    }

    pub fn get(&self, raw: u64) -> Option<u32> {
        self.index.get(&raw).copied()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Parsed positives plus the vocabularies that produced their indices.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub users: Vocabulary,
    pub items: Vocabulary,
}

impl InteractionLog {
    /// Remaps `(raw user, raw item, timestamp)` triples to contiguous indices.
    pub fn from_raw(raw: &[(u64, u64, i64)]) -> Self {
        let users = Vocabulary::from_raw(raw.iter().map(|r| r.0));
        let items = Vocabulary::from_raw(raw.iter().map(|r| r.1));
        let interactions = raw
            .iter()
            .map(|&(u, i, ts)| Interaction {
                user: users.get(u).expect("user in vocabulary"),
                item: items.get(i).expect("item in vocabulary"),
                timestamp: ts,
            })
            .collect();
        Self {
            interactions,
            users,
            items,
        }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }
}

/// One user's time-ordered positives. `items[..n]` is the input sequence and
/// `items[n]` the target; `items[session_start..n]` is the current session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
    pub session_start: usize,
}

impl BehaviorSequence {
    /// Input length (history plus session).
    pub fn n(&self) -> usize {
        self.items.len().saturating_sub(1)
    }

    /// Session length.
    pub fn k(&self) -> usize {
        self.n() - self.session_start
    }

    pub fn sequence(&self) -> &[u32] {
        &self.items[..self.n()]
    }

    pub fn history(&self) -> &[u32] {
        &self.items[..self.session_start]
    }

    pub fn session(&self) -> &[u32] {
        &self.items[self.session_start..self.n()]
    }

    pub fn target(&self) -> u32 {
        self.items[self.n()]
    }

    /// Timestamp of the most recent input behavior.
    pub fn last_input_timestamp(&self) -> i64 {
        self.timestamps[self.n().saturating_sub(1)]
    }

    /// Prefix ending at (and targeting) position `end`.
    pub fn prefix(&self, end: usize) -> BehaviorSequence {
        BehaviorSequence {
            user: self.user,
            items: self.items[..=end].to_vec(),
            timestamps: self.timestamps[..=end].to_vec(),
            session_start: 0,
        }
    }
}
