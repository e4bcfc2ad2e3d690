use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ingest::InteractionEvent;
use super::samples::{build_samples, filter_test, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

const WEEK: i64 = 7 * 24 * 3600;
const DAY: i64 = 24 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageMode {
    /// Consecutive windows of `seconds` starting at the earliest event.
    FixedWindow { seconds: i64 },
    /// The earliest `base_fraction` of events, then `n_blocks` equal blocks.
    BasePlusBlocks { base_fraction: f64, n_blocks: usize },
}

impl StageMode {
    pub fn week() -> Self {
        StageMode::FixedWindow { seconds: WEEK }
    }

    pub fn day() -> Self {
        StageMode::FixedWindow { seconds: DAY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub mode: StageMode,
    pub k_core: usize,
    pub max_seq_len: usize,
    pub valid_fraction: f64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            mode: StageMode::week(),
            k_core: 2,
            max_seq_len: 50,
            valid_fraction: 0.1,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            StageMode::FixedWindow { seconds } if seconds <= 0 => {
                return Err(Error::Config(format!("window length must be positive, got {seconds}")))
            }
            StageMode::BasePlusBlocks { base_fraction, n_blocks } => {
                if !(base_fraction > 0.0 && base_fraction < 1.0) {
                    return Err(Error::Config(format!("base_fraction must lie in (0,1), got {base_fraction}")));
                }
                if n_blocks == 0 {
                    return Err(Error::Config("n_blocks must be at least 1".into()));
                }
            }
            _ => {}
        }
        if self.k_core == 0 {
            return Err(Error::Config("k_core must be at least 1".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One user's time-ordered items within a stage, as raw ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSession {
    pub user: String,
    pub items: Vec<String>,
}

/// A session after re-indexing items to `1..=|I|` (0 is padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: String,
    pub items: Vec<usize>,
}

/// Dense item index shared by every stage of a run; ids are numbered in
/// order of first appearance so stage `m` owns the prefix `1..=vocab(m)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ItemIndex {
    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.lookup.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        let i = self.ids.len();
        self.lookup.insert(id.to_string(), i);
        i
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    /// Raw id for a dense index (`1..=len`).
    pub fn id_of(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.ids.get(i)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StageDataset {
    pub index: usize,
    /// Items `1..=vocab_size` have been seen up to and including this stage.
    pub vocab_size: usize,
    pub sessions: Vec<Session>,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    /// Sessions of the following stage, reserved for testing this stage's model.
    pub test_sessions: Option<Vec<Session>>,
    pub raw_events: usize,
}

impl StageDataset {
    pub fn interactions(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    /// Next-stage samples restricted to items this stage's model knows.
    pub fn test_samples(&self, max_seq_len: usize) -> Vec<Sample> {
        match &self.test_sessions {
            Some(sessions) => filter_test(build_samples(sessions, max_seq_len), self.vocab_size),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Staged {
    pub items: ItemIndex,
    pub stages: Vec<StageDataset>,
    pub raw: Vec<Vec<RawSession>>,
}

/// Splits time-ordered events into per-stage event lists (before any filtering).
pub fn partition_events(events: &[InteractionEvent], mode: &StageMode) -> Result<Vec<Vec<InteractionEvent>>> {
    if events.is_empty() {
        return Err(Error::Invalid("no events to split".into()));
    }
    let mut ordered = events.to_vec();
    ordered.sort_by_key(|e| e.timestamp);

    let stages: Vec<Vec<InteractionEvent>> = match *mode {
        StageMode::FixedWindow { seconds } => {
            let t0 = ordered[0].timestamp;
            let last = ((ordered[ordered.len() - 1].timestamp - t0) / seconds) as usize;
            let mut out = vec![Vec::new(); last + 1];
            for e in ordered {
                out[((e.timestamp - t0) / seconds) as usize].push(e);
            }
            out
        }
        StageMode::BasePlusBlocks { base_fraction, n_blocks } => {
            let n = ordered.len();
            let base = (n as f64 * base_fraction).round() as usize;
            let rest = n - base;
            let mut cuts = vec![0, base];
            for b in 1..=n_blocks {
                cuts.push(base + rest * b / n_blocks);
            }
            // equal timestamps never straddle a boundary
            for c in cuts.iter_mut().skip(1) {
                while *c > 0 && *c < n && ordered[*c].timestamp == ordered[*c - 1].timestamp {
                    *c += 1;
                }
            }
            cuts.windows(2).map(|w| ordered[w[0]..w[1].max(w[0])].to_vec()).collect()
        }
    };

    if let Some(i) = stages.iter().position(Vec::is_empty) {
        return Err(Error::EmptyStage {
            index: i,
            reason: "no events fall into this stage".into(),
        });
    }
    Ok(stages)
}

/// Groups a stage's events into per-user sessions (time order, first-seen
/// user order) and drops sessions shorter than `k_core`.
pub fn sessions_of(events: &[InteractionEvent], k_core: usize) -> Vec<RawSession> {
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&InteractionEvent>> = HashMap::new();
    for e in events {
        by_user
            .entry(e.user.as_str())
            .or_insert_with(|| {
                order.push(e.user.clone());
                Vec::new()
            })
            .push(e);
    }
    order
        .into_iter()
        .filter_map(|user| {
            let mut evs = by_user.remove(user.as_str()).unwrap_or_default();
            evs.sort_by_key(|e| e.timestamp);
            (evs.len() >= k_core).then(|| RawSession {
                user,
                items: evs.into_iter().map(|e| e.item.clone()).collect(),
            })
        })
        .collect()
}

/// Temporal staging, per-stage k-core filtering, cumulative item indexing
/// and seeded 90:10 train/validation split by session.
pub fn split_stages(events: &[InteractionEvent], plan: &StagePlan, seed: u64) -> Result<Staged> {
    plan.validate()?;
    let parts = partition_events(events, &plan.mode)?;
    let raw_counts: Vec<usize> = parts.iter().map(Vec::len).collect();
    let raw: Vec<Vec<RawSession>> = parts.iter().map(|p| sessions_of(p, plan.k_core)).collect();
    let mut staged = assemble_stages(raw, plan, seed)?;
    for (s, n) in staged.stages.iter_mut().zip(raw_counts) {
        s.raw_events = n;
    }
    Ok(staged)
}

/// Builds stage datasets from already filtered per-stage sessions.
pub fn assemble_stages(raw: Vec<Vec<RawSession>>, plan: &StagePlan, seed: u64) -> Result<Staged> {
    plan.validate()?;
    if let Some(i) = raw.iter().position(Vec::is_empty) {
        return Err(Error::EmptyStage {
            index: i,
            reason: format!("no session survives {}-core filtering", plan.k_core),
        });
    }
    let mut items = ItemIndex::default();
    let mut indexed: Vec<Vec<Session>> = Vec::with_capacity(raw.len());
    let mut vocab = Vec::with_capacity(raw.len());
    for stage in &raw {
        let sessions = stage
            .iter()
            .map(|s| Session {
                user: s.user.clone(),
                items: s.items.iter().map(|id| items.intern(id)).collect(),
            })
            .collect();
        indexed.push(sessions);
        vocab.push(items.len());
    }

    let mut stages = Vec::with_capacity(raw.len());
    for (m, sessions) in indexed.iter().enumerate() {
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        Rng::with_stream(seed, 1000 + m as u64).shuffle(&mut order);
        let n_valid = (sessions.len() as f64 * plan.valid_fraction).round() as usize;
        let n_valid = n_valid.min(sessions.len().saturating_sub(1));
        let pick = |ids: &[usize]| -> Vec<Session> { ids.iter().map(|&i| sessions[i].clone()).collect() };
        let valid_sessions = pick(&order[..n_valid]);
        let train_sessions = pick(&order[n_valid..]);
        stages.push(StageDataset {
            index: m,
            vocab_size: vocab[m],
            sessions: sessions.clone(),
            train: build_samples(&train_sessions, plan.max_seq_len),
            valid: build_samples(&valid_sessions, plan.max_seq_len),
            test_sessions: indexed.get(m + 1).cloned(),
            raw_events: sessions.iter().map(|s| s.items.len()).sum(),
        });
    }
    Ok(Staged { items, stages, raw })
}

/// Distinct users that appear in a list of sessions.
pub(crate) fn users_of(sessions: &[Session]) -> HashSet<&str> {
    sessions.iter().map(|s| s.user.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, item: &str, t: i64) -> InteractionEvent {
        InteractionEvent {
            user: user.into(),
            item: item.into(),
            timestamp: t,
        }
    }

    fn plan(mode: StageMode, k: usize) -> StagePlan {
        StagePlan {
            mode,
            k_core: k,
            max_seq_len: 50,
            valid_fraction: 0.1,
        }
    }

    #[test]
    fn base_plus_blocks_sizes() {
        let events: Vec<_> = (0..100).map(|i| ev(&format!("u{}", i / 5), &format!("i{}", i % 7), i)).collect();
        let parts = partition_events(
            &events,
            &StageMode::BasePlusBlocks {
                base_fraction: 0.6,
                n_blocks: 4,
            },
        )
        .unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![60, 10, 10, 10, 10]);
    }

    #[test]
    fn one_week_is_one_stage() {
        let events: Vec<_> = (0..20).map(|i| ev("u", &format!("i{i}"), 1000 + i * 3600)).collect();
        let parts = partition_events(&events, &StageMode::week()).unwrap();
        assert_eq!(parts.len(), 1);
    }

    #[test]
    fn empty_window_is_reported() {
        let events = vec![ev("u", "a", 0), ev("u", "b", 3 * DAY)];
        match partition_events(&events, &StageMode::day()) {
            Err(Error::EmptyStage { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn k_core_drops_short_sessions() {
        let events = vec![
            ev("a", "x", 1),
            ev("a", "y", 2),
            ev("b", "x", 3),
            ev("b", "y", 4),
            ev("b", "z", 5),
        ];
        let sessions = sessions_of(&events, 3);
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].user, "b");
    }

    #[test]
    fn vocab_is_cumulative_and_test_is_next_stage() {
        let mut events = Vec::new();
        for u in 0..10 {
            events.push(ev(&format!("u{u}"), "a", u));
            events.push(ev(&format!("u{u}"), "b", u + 1));
        }
        for u in 0..10 {
            events.push(ev(&format!("v{u}"), "b", DAY + u));
            events.push(ev(&format!("v{u}"), "c", DAY + u + 1));
            events.push(ev(&format!("v{u}"), "a", DAY + u + 2));
        }
        let staged = split_stages(&events, &plan(StageMode::day(), 2), 7).unwrap();
        assert_eq!(staged.stages.len(), 2);
        assert_eq!(staged.stages[0].vocab_size, 2);
        assert_eq!(staged.stages[1].vocab_size, 3);
        let test = staged.stages[0].test_samples(50);
        // `c` is unknown to stage 0: ([b],c) is dropped and ([b,c],a) loses `c`
        assert_eq!(test.len(), 10);
        assert!(test.iter().all(|s| s.prefix == vec![2] && s.target == 1));
        assert!(staged.stages[1].test_sessions.is_none());
    }

    #[test]
    fn validation_split_is_seeded() {
        let events: Vec<_> = (0..200).map(|i| ev(&format!("u{}", i / 4), &format!("i{}", i % 13), i)).collect();
        let p = plan(StageMode::week(), 2);
        let a = split_stages(&events, &p, 1).unwrap();
        let b = split_stages(&events, &p, 1).unwrap();
        assert_eq!(a.stages[0].valid, b.stages[0].valid);
        assert_eq!(a.stages[0].valid.len(), 5 * 3);
    }

    #[test]
    fn filtered_out_stage_is_an_error() {
        let events = vec![ev("a", "x", 0), ev("a", "y", 1), ev("b", "z", DAY)];
        assert!(matches!(
            split_stages(&events, &plan(StageMode::day(), 2), 0),
            Err(Error::EmptyStage { index: 1, .. })
        ));
    }

    #[test]
    fn plan_validation() {
        let bad = plan(
            StageMode::BasePlusBlocks {
                base_fraction: 1.0,
                n_blocks: 4,
            },
            2,
        );
        assert!(bad.validate().is_err());
        assert!(plan(StageMode::week(), 0).validate().is_err());
    }
}
