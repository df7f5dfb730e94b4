//! Clip planning and transcript rendering.
//!
//! A transcript is the subtitle block followed by the caption block. Both use
//! one line per unit; with time-aware rendering each line is prefixed with
//! `HH:MM:SS --> HH:MM:SS: ` (floor of the boundary seconds).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ClipCaption, SubtitleSegment};
use crate::tokens::TokenCounter;

/// Upper bound on clips in a single plan.
pub const MAX_CLIPS: usize = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum TranscriptError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositiveInput { what: &'static str, value: f64 },
    #[error("plan would need {0} clips (limit {MAX_CLIPS})")]
    TooManyClips(f64),
    #[error("negative time {0}")]
    NegativeTime(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub clip_length: f64,
    pub clips: Vec<(f64, f64)>,
}

impl ClipPlan {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Tile `[0, duration]` with clips of `clip_length`; the last clip keeps the
/// remainder.
pub fn plan_clips(duration: f64, clip_length: f64) -> Result<ClipPlan, TranscriptError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(TranscriptError::NonPositiveInput { what: "duration", value: duration });
    }
    if !(clip_length.is_finite() && clip_length > 0.0) {
        return Err(TranscriptError::NonPositiveInput { what: "clip_length", value: clip_length });
    }
    let ratio = (duration / clip_length).ceil();
    if ratio > MAX_CLIPS as f64 {
        return Err(TranscriptError::TooManyClips(ratio));
    }
    let mut n = (ratio as usize).max(1);
    // Rounding in the division can leave a phantom zero-length tail.
    while n > 1 && (n - 1) as f64 * clip_length >= duration {
        n -= 1;
    }
    let clips = (0..n)
        .map(|i| {
            let start = i as f64 * clip_length;
            let end = if i + 1 == n { duration } else { (i + 1) as f64 * clip_length };
            (start, end)
        })
        .collect();
    Ok(ClipPlan { clip_length, clips })
}

/// `HH:MM:SS` of the floored second; hours grow past two digits as needed.
pub fn render_timestamp(t: f64) -> Result<String, TranscriptError> {
    if t.is_nan() || t < 0.0 {
        return Err(TranscriptError::NegativeTime(t));
    }
    Ok(stamp(t))
}

fn stamp(t: f64) -> String {
    let secs = t.max(0.0).floor() as u64;
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

fn render_line(start: f64, end: f64, text: &str, time_aware: bool, out: &mut String) {
    if time_aware {
        out.push_str(&stamp(start));
        out.push_str(" --> ");
        out.push_str(&stamp(end));
        out.push_str(": ");
    }
    // One unit per line: embedded line breaks would split a unit.
    for (i, part) in text.trim().split(['\n', '\r']).filter(|p| !p.is_empty()).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(part.trim());
    }
}

fn render_block<'a>(units: impl Iterator<Item = (f64, f64, &'a str)>, time_aware: bool) -> String {
    let mut out = String::new();
    for (i, (s, e, text)) in units.enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_line(s, e, text, time_aware, &mut out);
    }
    out
}

pub fn render_caption_block(captions: &[ClipCaption], time_aware: bool) -> String {
    render_block(captions.iter().map(|c| (c.start, c.end, c.text.as_str())), time_aware)
}

pub fn render_subtitle_block(subtitles: &[SubtitleSegment], time_aware: bool) -> String {
    render_block(subtitles.iter().map(|s| (s.start, s.end, s.text.as_str())), time_aware)
}

/// The fused text handed to the reasoning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub subtitle_block: String,
    pub caption_block: String,
    pub clip_length: f64,
    pub full_text: String,
    pub token_count: usize,
}

impl Transcript {
    /// Join two rendered blocks (newline between them when both are present)
    /// and count tokens.
    pub fn from_blocks(subtitle_block: String, caption_block: String, clip_length: f64, counter: &TokenCounter) -> Self {
        let full_text = match (subtitle_block.is_empty(), caption_block.is_empty()) {
            (true, _) => caption_block.clone(),
            (false, true) => subtitle_block.clone(),
            (false, false) => format!("{subtitle_block}\n{caption_block}"),
        };
        let token_count = counter.count(&full_text);
        Self { subtitle_block, caption_block, clip_length, full_text, token_count }
    }

    pub fn from_lines(subtitles: &[&str], captions: &[&str], clip_length: f64, counter: &TokenCounter) -> Self {
        Self::from_blocks(subtitles.join("\n"), captions.join("\n"), clip_length, counter)
    }

    pub fn empty(clip_length: f64) -> Self {
        Self {
            subtitle_block: String::new(),
            caption_block: String::new(),
            clip_length,
            full_text: String::new(),
            token_count: 0,
        }
    }

    pub fn subtitle_lines(&self) -> Vec<&str> {
        block_lines(&self.subtitle_block)
    }

    pub fn caption_lines(&self) -> Vec<&str> {
        block_lines(&self.caption_block)
    }
}

fn block_lines(block: &str) -> Vec<&str> {
    if block.is_empty() {
        Vec::new()
    } else {
        block.split('\n').collect()
    }
}

pub fn build_transcript(
    subtitles: &[SubtitleSegment],
    captions: &[ClipCaption],
    clip_length: f64,
    counter: &TokenCounter,
    time_aware: bool,
) -> Transcript {
    Transcript::from_blocks(
        render_subtitle_block(subtitles, time_aware),
        render_caption_block(captions, time_aware),
        clip_length,
        counter,
    )
}
