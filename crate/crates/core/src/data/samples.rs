use serde::{Deserialize, Serialize};

use super::stages::Session;

/// A `(prefix, next item)` pair; item indices are dense, 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Every prefix of every session paired with its next item. Prefixes longer
/// than `max_seq_len` keep their most recent `max_seq_len` items.
pub fn build_samples(sessions: &[Session], max_seq_len: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.items.len() {
            let start = t.saturating_sub(max_seq_len);
            out.push(Sample {
                prefix: s.items[start..t].to_vec(),
                target: s.items[t],
            });
        }
    }
    out
}

/// Keeps samples whose target is among items `1..=known_items`; unknown
/// prefix items are dropped and samples left with an empty prefix removed.
pub fn filter_test(samples: Vec<Sample>, known_items: usize) -> Vec<Sample> {
    let known = |i: usize| i >= 1 && i <= known_items;
    samples
        .into_iter()
        .filter(|s| known(s.target))
        .filter_map(|mut s| {
            s.prefix.retain(|&i| known(i));
            (!s.prefix.is_empty()).then_some(s)
        })
        .collect()
}
