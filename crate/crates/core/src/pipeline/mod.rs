//! The three-phase generation procedure and its on-disk artifacts.
//!
//! 1. A vanilla pass records self-attention values.
//! 2. A crossing-only pass yields subject masks and patch correspondences.
//! 3. The final pass applies the configured scheme.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod output;
pub mod phases;
pub mod store;

pub use config::RunConfig;
pub use experiments::{ablate, ablation_grid, compare_schemes, ExperimentReport, ExperimentRun};
pub use manifest::{Manifest, ManifestRow};
pub use output::{
    run_all, run_dir, write_phase1, write_phase2, write_phase3, Phase3Artifacts, Phase3Inputs, RunArtifacts,
};
pub use phases::{
    phase1_vanilla, phase2_correspondence, phase3_final, Phase1Output, Phase2Output, Phase3Output, Session,
};
pub use store::ValueStore;
