use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::{users_of, RawSession, Staged};
use crate::error::{Error, Result};

/// Per-stage dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub users: usize,
    pub new_users: usize,
    pub items: usize,
    pub new_items: usize,
    pub interactions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
}

/// On-disk record of one prepared stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: usize,
    pub raw_events: usize,
    pub stats: StageStats,
    pub sessions: Vec<RawSession>,
}

impl Staged {
    pub fn stats(&self) -> Vec<StageStats> {
        let mut seen_users: HashSet<&str> = HashSet::new();
        let mut prev_vocab = 0;
        self.stages
            .iter()
            .map(|stage| {
                let users = users_of(&stage.sessions);
                let new_users = users.iter().filter(|u| !seen_users.contains(*u)).count();
                let items: HashSet<usize> = stage.sessions.iter().flat_map(|s| s.items.iter().copied()).collect();
                let interactions = stage.interactions();
                let stats = StageStats {
                    users: users.len(),
                    new_users,
                    items: items.len(),
                    new_items: stage.vocab_size - prev_vocab,
                    interactions,
                    avg_actions_per_user: interactions as f64 / users.len().max(1) as f64,
                    avg_actions_per_item: interactions as f64 / items.len().max(1) as f64,
                };
                seen_users.extend(users);
                prev_vocab = stage.vocab_size;
                stats
            })
            .collect()
    }

    pub fn manifests(&self) -> Vec<StageManifest> {
        self.stats()
            .into_iter()
            .zip(&self.stages)
            .zip(&self.raw)
            .map(|((stats, stage), raw)| StageManifest {
                stage: stage.index,
                raw_events: stage.raw_events,
                stats,
                sessions: raw.clone(),
            })
            .collect()
    }
}

pub fn manifest_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage_{stage}.manifest"))
}

/// Writes `stage_<m>.manifest` files (one JSON document each) into `dir`.
pub fn write_manifests(staged: &Staged, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    staged
        .manifests()
        .iter()
        .map(|m| {
            let path = manifest_path(dir, m.stage);
            let text = serde_json::to_string(m)?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Reads `stage_0.manifest`, `stage_1.manifest`, … until the first gap.
pub fn read_manifests(dir: &Path) -> Result<Vec<StageManifest>> {
    let mut out = Vec::new();
    loop {
        let path = manifest_path(dir, out.len());
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.push(serde_json::from_str(&text)?);
    }
    if out.is_empty() {
        return Err(Error::io(
            manifest_path(dir, 0),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no stage manifests; run `prepare` first"),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_stages, InteractionEvent, StageMode, StagePlan};

    #[test]
    fn stats_and_round_trip() {
        let mut events = Vec::new();
        for (u, items) in [("a", ["x", "y"]), ("b", ["x", "x"])] {
            for (j, it) in items.iter().enumerate() {
                events.push(InteractionEvent {
                    user: u.into(),
                    item: (*it).into(),
                    timestamp: j as i64,
                });
            }
        }
        events.push(InteractionEvent { user: "a".into(), item: "z".into(), timestamp: 90_000 });
        events.push(InteractionEvent { user: "a".into(), item: "x".into(), timestamp: 90_001 });
        let plan = StagePlan {
            mode: StageMode::day(),
            k_core: 2,
            max_seq_len: 5,
            valid_fraction: 0.1,
        };
        let staged = split_stages(&events, &plan, 0).unwrap();
        let stats = staged.stats();
        assert_eq!(stats[0].users, 2);
        assert_eq!(stats[0].items, 2);
        assert_eq!(stats[0].interactions, 4);
        assert_eq!(stats[1].new_users, 0);
        assert_eq!(stats[1].new_items, 1);
        assert!((stats[0].avg_actions_per_item - 2.0).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        write_manifests(&staged, dir.path()).unwrap();
        let back = read_manifests(dir.path()).unwrap();
        assert_eq!(back, staged.manifests());
    }
}
