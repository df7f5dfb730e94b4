//! Language-space video question answering.
//!
//! Videos are turned into text: speech becomes timestamped subtitles, fixed
//! length clips become captions, and both are fused into a single transcript
//! that a reasoning LLM answers questions over. The transcript is fitted into
//! the model's context window by coarsening the clip length until it fits.
//!
//! Module map:
//!
//! - [`manifest`]: videos, questions, subtitle/caption units, manifest ingestion.
//! - [`transcript`]: clip planning, timestamp rendering, transcript assembly.
//! - [`tokens`] and [`budget`]: token counting, adaptive token reduction, line dropping.
//! - [`gateway`]: captioner / ASR / LLM clients, mocks, retry, cache, batching.
//! - [`prompt`] and [`parse`]: task prompts and model output parsing.
//! - [`eval`]: accuracy, interval IoU, knowledge gain, reports.
//! - [`pipeline`]: run configuration, end-to-end runs, ablations, artifacts.

pub mod budget;
pub mod eval;
pub mod exec;
pub mod gateway;
pub mod manifest;
pub mod parse;
pub mod pipeline;
pub mod prompt;
pub mod tokens;
pub mod transcript;

mod fsutil;

pub use budget::{adaptive_token_reduction, drop_tokens, BudgetOutcome, BudgetParams, BudgetPlan};
pub use eval::{build_report, delta_knowledge, interval_iou, mean_iou, score_mcq, EvalReport, Verdict};
pub use exec::ExecMode;
pub use manifest::{
    load_manifests, normalize_subtitles, ClipCaption, Interval, Question, QuestionKind,
    SubtitleSegment, VideoManifest,
};
pub use parse::{parse_intervals, parse_letter, IntervalPrediction};
pub use prompt::{render_prompt, TemplateKind};
pub use tokens::TokenCounter;
pub use transcript::{build_transcript, plan_clips, render_timestamp, ClipPlan, Transcript};
