//! Experiment runner: configuration, checkpoint persistence, pipeline
//! orchestration, the ablation grid and report emission.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod report;

pub use ablate::{AblationGrid, Toggles};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Sidecar, SidecarDraft};
pub use config::{EvalConfig, RunConfig};
