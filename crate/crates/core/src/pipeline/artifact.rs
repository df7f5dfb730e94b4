use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::BudgetPlan;
use crate::eval::{Prediction, Verdict};
use crate::fsutil::{safe_file_stem, write_atomic};
use crate::transcript::Transcript;

/// Version of the per-video artifact format.
pub const ARTIFACT_VERSION: u32 = 1;

/// Everything recorded about one question of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub prompt_tokens: usize,
    /// Model output as received, reasoning included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    /// Output with the reasoning trace removed; what the parser saw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    pub parsed: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judged_correct: Option<bool>,
    pub cached: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub transcribe_ms: u64,
    pub budget_ms: u64,
    pub complete_ms: u64,
    pub score_ms: u64,
}

impl StageTimings {
    pub fn add(&mut self, other: &StageTimings) {
        self.transcribe_ms += other.transcribe_ms;
        self.budget_ms += other.budget_ms;
        self.complete_ms += other.complete_ms;
        self.score_ms += other.score_ms;
    }

    pub fn sum(&self) -> u64 {
        self.transcribe_ms + self.budget_ms + self.complete_ms + self.score_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoArtifact {
    pub artifact_version: u32,
    pub video_id: String,
    pub config_fingerprint: String,
    pub subtitle_segments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Transcript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<BudgetPlan>,
    /// Extra budgeting rounds after the model reported a context overflow.
    pub rebudget_rounds: u32,
    /// Video-level failure (ASR, captioning), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub questions: Vec<QuestionRecord>,
    pub timings: StageTimings,
}

impl VideoArtifact {
    /// True when every question got a verdict without a backend failure.
    pub fn is_complete(&self, question_ids: &[&str]) -> bool {
        self.error.is_none()
            && self.questions.len() == question_ids.len()
            && self
                .questions
                .iter()
                .zip(question_ids)
                .all(|(r, q)| r.question_id == *q && r.verdict.error.is_none())
    }
}

pub fn videos_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("videos")
}

pub fn artifact_path(output_dir: &Path, video_id: &str) -> PathBuf {
    videos_dir(output_dir).join(format!("{}.json", safe_file_stem(video_id)))
}

pub fn write_artifact(output_dir: &Path, artifact: &VideoArtifact) -> std::io::Result<()> {
    let bytes = serde_json::to_vec_pretty(artifact).expect("artifacts serialize");
    write_atomic(&artifact_path(output_dir, &artifact.video_id), &bytes)
}

/// `None` when the file is missing, unreadable, or from another format version.
pub fn read_artifact(output_dir: &Path, video_id: &str) -> Option<VideoArtifact> {
    let path = artifact_path(output_dir, video_id);
    let text = std::fs::read_to_string(&path).ok()?;
    match serde_json::from_str::<VideoArtifact>(&text) {
        Ok(a) if a.artifact_version == ARTIFACT_VERSION && a.video_id == video_id => Some(a),
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable artifact {}: {e}", path.display());
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub videos: usize,
    pub questions: usize,
    pub resumed_videos: usize,
    /// Backend requests actually sent, retries included; cache hits excluded.
    pub network_requests: usize,
    pub cached_responses: usize,
    pub peak_in_flight: usize,
    pub failures: usize,
    /// Per-stage time summed over videos. With more than one video in
    /// flight these add up to more than `wall_ms`.
    pub stages: StageTimings,
    pub wall_ms: u64,
}
