#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vidlang::gateway::MockRegistry;
use vidlang::pipeline::{Endpoints, RunConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Mocks resolving scene files under the fixtures directory, with the answer
/// key of `manifest` loaded for `always-gold`.
pub fn registry(manifest: &str) -> MockRegistry {
    let videos = vidlang::load_manifests(fixtures().join(manifest)).expect("fixture manifest loads");
    MockRegistry::new().with_base_dir(fixtures()).with_answer_key(&videos)
}

pub fn config(manifest: &str, llm_profile: &str, out: &Path) -> RunConfig {
    RunConfig::new(fixtures().join(manifest), Endpoints::mock("scene", "scene", llm_profile), out)
}
