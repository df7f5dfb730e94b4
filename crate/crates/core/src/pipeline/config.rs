use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::DropTarget;
use crate::exec::ExecMode;
use crate::gateway::{BackendEndpoint, Role, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TEMPERATURE};
use crate::tokens::CounterSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub captioner: BackendEndpoint,
    pub asr: BackendEndpoint,
    pub llm: BackendEndpoint,
    /// Grades open-ended answers when set; otherwise normalized exact match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendEndpoint>,
}

impl Endpoints {
    /// All three required roles served by mocks.
    pub fn mock(captioner: &str, asr: &str, llm: &str) -> Self {
        Self {
            captioner: BackendEndpoint::mock(Role::Captioner, captioner),
            asr: BackendEndpoint::mock(Role::Asr, asr),
            llm: BackendEndpoint::mock(Role::Llm, llm),
            judge: None,
        }
    }

    fn all(&self) -> impl Iterator<Item = (Role, &BackendEndpoint)> {
        [(Role::Captioner, &self.captioner), (Role::Asr, &self.asr), (Role::Llm, &self.llm)]
            .into_iter()
            .chain(self.judge.iter().map(|j| (Role::Judge, j)))
    }
}

/// Drop a fraction of one transcript block after budgeting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropSpec {
    pub target: DropTarget,
    pub rate: f64,
}

fn default_context_limit() -> usize {
    64_000
}
fn default_initial_clip_length() -> f64 {
    crate::budget::DEFAULT_INITIAL_CLIP_LENGTH
}
fn default_true() -> bool {
    true
}
fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn default_video_concurrency() -> usize {
    4
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_open() -> String {
    "<think>".into()
}
fn default_close() -> String {
    "</think>".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub counter: CounterSpec,
    #[serde(default = "default_context_limit")]
    pub context_limit: usize,
    #[serde(default = "default_initial_clip_length")]
    pub initial_clip_length: f64,
    /// Use one clip length and skip adaptive reduction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_clip_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_spec: Option<DropSpec>,
    #[serde(default = "default_true")]
    pub time_aware: bool,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_video_concurrency")]
    pub video_concurrency: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub resume: bool,
    /// Per-question backend failures tolerated before the run counts as failed.
    #[serde(default)]
    pub max_failures: usize,
    #[serde(default = "default_open")]
    pub reasoning_open: String,
    #[serde(default = "default_close")]
    pub reasoning_close: String,
    #[serde(default)]
    pub exec_mode: ExecMode,
}

impl RunConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, endpoints: Endpoints, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            endpoints,
            counter: CounterSpec::default(),
            context_limit: default_context_limit(),
            initial_clip_length: default_initial_clip_length(),
            fixed_clip_length: None,
            drop_spec: None,
            time_aware: true,
            max_in_flight: default_max_in_flight(),
            video_concurrency: default_video_concurrency(),
            temperature: default_temperature(),
            max_output_tokens: None,
            cache_root: None,
            output_dir: output_dir.into(),
            resume: false,
            max_failures: 0,
            reasoning_open: default_open(),
            reasoning_close: default_close(),
            exec_mode: ExecMode::default(),
        }
    }

    /// Load a TOML config. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), reason: e.to_string() })?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest_path);
        fix(&mut self.output_dir);
        if let Some(c) = &mut self.cache_root {
            fix(c);
        }
        if let Some(v) = &mut self.counter.vocabulary_uri {
            fix(v);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (role, ep) in self.endpoints.all() {
            if ep.role != role {
                return invalid(format!("endpoint under `{role}` declares role `{}`", ep.role));
            }
            ep.validate().map_err(ConfigError::Invalid)?;
        }
        if self.context_limit == 0 {
            return invalid("context_limit must be positive".into());
        }
        if !(self.initial_clip_length.is_finite() && self.initial_clip_length > 0.0) {
            return invalid(format!("initial_clip_length must be positive, got {}", self.initial_clip_length));
        }
        if let Some(l) = self.fixed_clip_length {
            if !(l.is_finite() && l > 0.0) {
                return invalid(format!("fixed_clip_length must be positive, got {l}"));
            }
        }
        if let Some(d) = &self.drop_spec {
            if !(0.0..1.0).contains(&d.rate) {
                return invalid(format!("drop rate must be in [0, 1), got {}", d.rate));
            }
        }
        if self.max_in_flight == 0 || self.video_concurrency == 0 {
            return invalid("max_in_flight and video_concurrency must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid(format!("temperature must be non-negative, got {}", self.temperature));
        }
        if self.reasoning_open.is_empty() != self.reasoning_close.is_empty() {
            return invalid("reasoning_open and reasoning_close must both be set or both be empty".into());
        }
        Ok(())
    }

    pub(crate) fn reasoning_markers(&self) -> Option<(String, String)> {
        (!self.reasoning_open.is_empty()).then(|| (self.reasoning_open.clone(), self.reasoning_close.clone()))
    }

    /// Digest of every field that affects verdicts. Paths of outputs, resume
    /// and scheduling knobs are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_root = None;
        c.resume = false;
        c.max_failures = 0;
        c.max_in_flight = 1;
        c.video_concurrency = 1;
        c.exec_mode = ExecMode::Sequential;
        for ep in [&mut c.endpoints.captioner, &mut c.endpoints.asr, &mut c.endpoints.llm]
            .into_iter()
            .chain(c.endpoints.judge.as_mut())
        {
            ep.timeout_secs = 0.0;
            ep.max_retries = 0;
            ep.auth_token_env = None;
        }
        let bytes = serde_json::to_vec(&c).expect("configs serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::new("m.jsonl", Endpoints::mock("echo", "silent", "always-A"), "out")
    }

    #[test]
    fn defaults() {
        let c = cfg();
        assert_eq!((c.initial_clip_length, c.max_in_flight, c.temperature, c.time_aware), (1.0, 64, 1.0, true));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_rebase() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let text = r#"
manifest_path = "data/m.jsonl"
output_dir = "out"
fixed_clip_length = 8.0

[drop_spec]
target = "subtitles"
rate = 0.75

[endpoints.captioner]
role = "captioner"
base_url = "mock:scene"
model_name = "NVILA-8B-Video"

[endpoints.asr]
role = "asr"
base_url = "mock:scene"
model_name = "whisper-large-v3"

[endpoints.llm]
role = "llm"
base_url = "https://example.invalid/v1"
model_name = "deepseek-r1"
auth_token_env = "LLM_TOKEN"
"#;
        std::fs::write(&path, text).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.manifest_path, dir.path().join("data/m.jsonl"));
        assert_eq!(c.fixed_clip_length, Some(8.0));
        assert_eq!(c.drop_spec, Some(DropSpec { target: DropTarget::Subtitles, rate: 0.75 }));
        assert_eq!(c.endpoints.llm.auth_token_env.as_deref(), Some("LLM_TOKEN"));
        assert!(c.validate().is_ok());
        let back: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "manifest_path = \"m\"\noutput_dir = \"o\"\nclip = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn validation() {
        let mut c = cfg();
        c.drop_spec = Some(DropSpec { target: DropTarget::Captions, rate: 1.0 });
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.endpoints.asr.role = Role::Llm;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.fixed_clip_length = Some(-2.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_scheduling() {
        let a = cfg();
        let mut b = cfg();
        b.output_dir = "elsewhere".into();
        b.max_in_flight = 3;
        b.resume = true;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.context_limit = 10;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
