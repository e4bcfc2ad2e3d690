//! Interaction logs, temporal staging, next-item samples and synthetic drift.

mod drift;
mod ingest;
mod manifest;
mod samples;
mod stages;

pub use drift::{category_of, generate_drift, generate_probe, DriftScenario};
pub use ingest::{ingest, InputFormat, InteractionEvent};
pub use manifest::{read_manifests, write_manifests, StageManifest, StageStats};
pub use samples::{build_samples, filter_test, Sample};
pub use stages::{
    assemble_stages, partition_events, sessions_of, split_stages, ItemIndex, RawSession, Session, StageDataset,
    StageMode, StagePlan, Staged,
};
