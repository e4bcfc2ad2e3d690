use serde::{Deserialize, Serialize};

use super::ingest::InteractionEvent;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Synthetic stream whose category popularity shifts from stage to stage.
///
/// Each session starts in a category drawn from its stage's popularity
/// vector. Before every later item it moves to a freshly drawn category with
/// probability `switch_prob`. Inside a category the item is the successor of
/// its predecessor with probability `follow_prob`, otherwise uniform; the
/// first item after a switch is always uniform. Items are named `i<n>` with
/// category `n / items_per_category`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScenario {
    pub n_categories: usize,
    pub items_per_category: usize,
    /// One probability vector over categories per stage.
    pub stage_popularity: Vec<Vec<f64>>,
    pub sessions_per_stage: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    /// Stage `m` occupies `[m·stage_seconds, (m+1)·stage_seconds)`.
    pub stage_seconds: i64,
    pub seed: u64,
    #[serde(default)]
    pub follow_prob: f64,
    #[serde(default)]
    pub switch_prob: f64,
}

impl DriftScenario {
    /// Checks ranges and renormalizes popularity vectors to sum to one.
    pub fn validated(mut self) -> Result<Self> {
        if self.n_categories == 0 || self.items_per_category == 0 {
            return Err(Error::Config("scenario needs at least one category and one item".into()));
        }
        if self.stage_popularity.is_empty() || self.sessions_per_stage == 0 {
            return Err(Error::Config("scenario needs at least one non-empty stage".into()));
        }
        for (name, v) in [("follow_prob", self.follow_prob), ("switch_prob", self.switch_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} not in [0,1]")));
            }
        }
        if self.min_session_len == 0 || self.min_session_len > self.max_session_len {
            return Err(Error::Config("session length range is invalid".into()));
        }
        let per_stage_span = self.sessions_per_stage as i64 * self.max_session_len as i64;
        if self.stage_seconds < per_stage_span {
            return Err(Error::Config(format!(
                "stage_seconds must be at least sessions_per_stage * max_session_len = {per_stage_span}"
            )));
        }
        for (m, p) in self.stage_popularity.iter_mut().enumerate() {
            if p.len() != self.n_categories {
                return Err(Error::Config(format!("stage {m}: popularity has {} entries", p.len())));
            }
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("stage {m}: popularity must be non-negative")));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("stage {m}: popularity sums to {total}, not 1")));
            }
            p.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self)
    }

    pub fn n_stages(&self) -> usize {
        self.stage_popularity.len()
    }

    pub fn item_id(&self, category: usize, offset: usize) -> String {
        format!("i{}", category * self.items_per_category + offset)
    }

    /// Offset that follows `offset` inside a category: a fixed stride that
    /// visits every item when `items_per_category` is odd or coprime to 7.
    pub fn successor(&self, offset: usize) -> usize {
        (offset * 7 + 3) % self.items_per_category
    }

    /// `popularity` is consulted only when the session switches category.
    fn session(&self, rng: &mut Rng, mut category: usize, popularity: &[f64]) -> Vec<String> {
        let len = rng.range_inclusive(self.min_session_len, self.max_session_len);
        let mut cur = rng.below(self.items_per_category);
        let mut out = Vec::with_capacity(len);
        for j in 0..len {
            if j > 0 {
                cur = if self.switch_prob > 0.0 && rng.uniform() < self.switch_prob {
                    category = rng.categorical(popularity);
                    rng.below(self.items_per_category)
                } else if self.follow_prob > 0.0 && rng.uniform() < self.follow_prob {
                    self.successor(cur)
                } else {
                    rng.below(self.items_per_category)
                };
            }
            out.push(self.item_id(category, cur));
        }
        out
    }
}

/// Category of a generated item id, or `None` for foreign ids.
pub fn category_of(item: &str, items_per_category: usize) -> Option<usize> {
    item.strip_prefix('i')?.parse::<usize>().ok().map(|n| n / items_per_category)
}

pub fn generate_drift(scenario: &DriftScenario) -> Result<Vec<InteractionEvent>> {
    let sc = scenario.clone().validated()?;
    let mut rng = Rng::new(sc.seed);
    let spacing = sc.stage_seconds / sc.sessions_per_stage as i64;
    let mut events = Vec::new();
    for (m, popularity) in sc.stage_popularity.iter().enumerate() {
        let stage_start = m as i64 * sc.stage_seconds;
        for k in 0..sc.sessions_per_stage {
            let category = rng.categorical(popularity);
            let user = format!("s{m}-{k}");
            let t0 = stage_start + k as i64 * spacing;
            for (j, item) in sc.session(&mut rng, category, popularity).into_iter().enumerate() {
                events.push(InteractionEvent {
                    user: user.clone(),
                    item,
                    timestamp: t0 + j as i64,
                });
            }
        }
    }
    Ok(events)
}

/// Held-back sessions from a single category, drawn from an independent stream.
pub fn generate_probe(scenario: &DriftScenario, category: usize, n_sessions: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let sc = scenario.clone().validated()?;
    if category >= sc.n_categories {
        return Err(Error::Invalid(format!("category {category} out of range")));
    }
    let mut rng = Rng::with_stream(seed, 77);
    let mut only = vec![0.0; sc.n_categories];
    only[category] = 1.0;
    Ok((0..n_sessions).map(|_| sc.session(&mut rng, category, &only)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(pop: Vec<Vec<f64>>, sessions: usize) -> DriftScenario {
        DriftScenario {
            n_categories: pop[0].len(),
            items_per_category: 5,
            stage_popularity: pop,
            sessions_per_stage: sessions,
            min_session_len: 1,
            max_session_len: 1,
            stage_seconds: 10_000_000,
            seed: 9,
            follow_prob: 0.0,
            switch_prob: 0.0,
        }
    }

    #[test]
    fn single_category() {
        let ev = generate_drift(&scenario(vec![vec![1.0]], 50)).unwrap();
        assert!(ev.iter().all(|e| category_of(&e.item, 5) == Some(0)));
    }

    #[test]
    fn balanced_split_converges() {
        let ev = generate_drift(&scenario(vec![vec![0.5, 0.5]], 100_000)).unwrap();
        let first = ev.iter().filter(|e| category_of(&e.item, 5) == Some(0)).count();
        let frac = first as f64 / ev.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn flipped_stage_excludes_category() {
        let sc = scenario(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 200);
        let ev = generate_drift(&sc).unwrap();
        let second: Vec<_> = ev.iter().filter(|e| e.timestamp >= sc.stage_seconds).collect();
        assert!(!second.is_empty());
        assert!(second.iter().all(|e| category_of(&e.item, 5) == Some(1)));
    }

    #[test]
    fn popularity_is_normalized_and_checked() {
        let sc = scenario(vec![vec![0.1, 0.2, 0.7]], 1).validated().unwrap();
        assert!((sc.stage_popularity[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(scenario(vec![vec![0.5, 0.6]], 1).validated().is_err());
    }

    #[test]
    fn successor_chain_is_followed() {
        let mut sc = scenario(vec![vec![1.0]], 200);
        sc.items_per_category = 50;
        sc.min_session_len = 4;
        sc.max_session_len = 4;
        sc.follow_prob = 1.0;
        let ev = generate_drift(&sc).unwrap();
        for w in ev.chunks(4) {
            for pair in w.windows(2) {
                let a: usize = pair[0].item[1..].parse().unwrap();
                let b: usize = pair[1].item[1..].parse().unwrap();
                assert_eq!(b, sc.successor(a));
            }
        }
        sc.follow_prob = 1.5;
        assert!(sc.validated().is_err());
    }

    #[test]
    fn seeded() {
        let sc = scenario(vec![vec![0.3, 0.7]], 100);
        assert_eq!(generate_drift(&sc).unwrap(), generate_drift(&sc).unwrap());
    }
}
