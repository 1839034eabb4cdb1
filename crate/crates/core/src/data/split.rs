use super::{split_session, BehaviorSequence, SessionRule};

/// Leave-one-out split: per user the last event is the test target, the
/// second-to-last the validation target, and every earlier position with
/// at least one preceding event is a training target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<BehaviorSequence>,
    pub validation: Vec<BehaviorSequence>,
    pub test: Vec<BehaviorSequence>,
    pub item_count: u32,
    pub user_count: u32,
    /// Sequences dropped for having fewer than three events.
    pub excluded: u32,
}

pub fn leave_one_out(
    sequences: &[BehaviorSequence],
    user_count: usize,
    item_count: usize,
    rule: SessionRule,
) -> DatasetSplit {
    let mut split = DatasetSplit {
        item_count: item_count as u32,
        user_count: user_count as u32,
        ..Default::default()
    };
    for seq in sequences {
        let len = seq.items.len();
        if len < 3 {
            split.excluded += 1;
            continue;
        }
        for end in 1..len - 2 {
            split.train.push(split_session(seq.prefix(end), rule));
        }
        split.validation.push(split_session(seq.prefix(len - 2), rule));
        split.test.push(split_session(seq.prefix(len - 1), rule));
    }
    split
}

impl DatasetSplit {
    /// Items the user interacted with before `example`'s target.
    pub fn seen_items(example: &BehaviorSequence) -> &[u32] {
        example.sequence()
    }

    /// Events per item over the training inputs and targets, indexed by item
    /// (index 0 unused).
    pub fn train_item_frequency(&self) -> Vec<u64> {
        let mut freq = vec![0u64; self.item_count as usize + 1];
        // Each user's longest training prefix covers all of their training events.
        let mut last_per_user: std::collections::BTreeMap<u32, &BehaviorSequence> = Default::default();
        for ex in &self.train {
            let e = last_per_user.entry(ex.user).or_insert(ex);
            if ex.items.len() > e.items.len() {
                *e = ex;
            }
        }
        for ex in last_per_user.values() {
            for &it in &ex.items {
                freq[it as usize] += 1;
            }
        }
        freq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[u32]) -> BehaviorSequence {
        BehaviorSequence {
            user: 1,
            items: items.to_vec(),
            timestamps: (0..items.len() as i64).collect(),
            session_start: 0,
        }
    }

    /// Hand enumeration of every prefix of a four-event sequence.
    #[test]
    fn four_items() {
        let (a, b, c, d) = (1, 2, 3, 4);
        let split = leave_one_out(&[seq(&[a, b, c, d])], 1, 4, SessionRule::default());
        assert_eq!(split.test.len(), 1);
        assert_eq!((split.test[0].sequence(), split.test[0].target()), (&[a, b, c][..], d));
        assert_eq!((split.validation[0].sequence(), split.validation[0].target()), (&[a, b][..], c));
        let train: Vec<_> = split.train.iter().map(|e| (e.sequence().to_vec(), e.target())).collect();
        assert_eq!(train, vec![(vec![a], b)]);
    }

    #[test]
    fn short_sequences() {
        let split = leave_one_out(&[seq(&[1, 2, 3]), seq(&[1, 2])], 2, 3, SessionRule::default());
        assert_eq!(split.excluded, 1);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.validation.len(), 1);
        assert!(split.train.is_empty());
    }

    #[test]
    fn no_leakage() {
        let split = leave_one_out(&[seq(&[5, 6, 7, 8, 9, 10])], 1, 10, SessionRule::default());
        let test = &split.test[0];
        for ex in split.train.iter().chain(&split.validation) {
            assert!(ex.n() < test.n());
        }
        assert_eq!(split.train.len(), 3);
    }
}
