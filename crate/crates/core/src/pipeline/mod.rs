//! End-to-end runs: configuration, per-video processing, artifacts, resume,
//! re-scoring and ablation sweeps.
//!
//! Output layout of a run directory:
//!
//! ```text
//! <output_dir>/config.json        config snapshot
//! <output_dir>/videos/<id>.json   transcript, budget plan, raw outputs, verdicts
//! <output_dir>/report.jsonl       one record per verdict plus an aggregate record
//! <output_dir>/summary.txt        human-readable table
//! <output_dir>/run.json           counters and stage timings
//! ```

pub mod ablation;
pub mod artifact;
pub mod config;
pub mod run;

pub use ablation::{ablation_table, run_ablation, AblationResult, AblationRow, AblationVariant};
pub use artifact::{read_artifact, RunStats, VideoArtifact};
pub use config::{ConfigError, DropSpec, Endpoints, RunConfig};
pub use run::{interpret, rescore_run, run_pipeline, GatewayCaptionSource, PipelineError, RunOutcome};
