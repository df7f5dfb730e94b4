//! Context budgeting: adaptive token reduction and static line dropping.
//!
//! Adaptive token reduction starts from a fine clip length and doubles it
//! until the fused transcript (plus the prompt skeleton) fits the model's
//! context window. Growth stops at the first clip length covering the whole
//! video; if the transcript still does not fit, lines are truncated: caption
//! lines first, then subtitle lines, each from the middle outward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ClipCaption, SubtitleSegment, VideoManifest};
use crate::tokens::TokenCounter;
use crate::transcript::{build_transcript, plan_clips, ClipPlan, Transcript, TranscriptError};

/// Finest clip length in seconds; the loop only ever coarsens.
pub const DEFAULT_INITIAL_CLIP_LENGTH: f64 = 1.0;

#[derive(Debug, Error)]
#[error("caption source failed on clip [{start}, {end}]: {reason}")]
pub struct CaptionSourceError {
    pub start: f64,
    pub end: f64,
    pub reason: String,
}

/// Produces one caption per planned clip.
pub trait CaptionSource: Sync {
    fn captions(&self, video: &VideoManifest, plan: &ClipPlan) -> Result<Vec<ClipCaption>, CaptionSourceError>;
}

impl<F> CaptionSource for F
where
    F: Fn(&VideoManifest, &ClipPlan) -> Result<Vec<ClipCaption>, CaptionSourceError> + Sync,
{
    fn captions(&self, video: &VideoManifest, plan: &ClipPlan) -> Result<Vec<ClipCaption>, CaptionSourceError> {
        self(video, plan)
    }
}

#[derive(Debug, Error)]
pub enum BudgetError {
    #[error(transparent)]
    CaptionSource(#[from] CaptionSourceError),
    #[error(transparent)]
    Plan(#[from] TranscriptError),
    #[error("caption source returned {got} captions for {expected} clips")]
    CaptionCountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetOutcome {
    Fit,
    FitAfterTruncation,
    QuestionTooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub clip_length: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub initial_clip_length: f64,
    pub final_clip_length: f64,
    pub context_limit: usize,
    pub final_token_count: usize,
    pub trace: Vec<TraceEntry>,
    pub outcome: BudgetOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetParams {
    pub context_limit: usize,
    pub initial_clip_length: f64,
    /// Tokens of the prompt around the transcript (template + question).
    pub prompt_overhead: usize,
    pub time_aware: bool,
}

impl Default for BudgetParams {
    fn default() -> Self {
        Self {
            context_limit: 64_000,
            initial_clip_length: DEFAULT_INITIAL_CLIP_LENGTH,
            prompt_overhead: 0,
            time_aware: true,
        }
    }
}

fn transcript_at(
    video: &VideoManifest,
    subtitles: &[SubtitleSegment],
    source: &dyn CaptionSource,
    counter: &TokenCounter,
    clip_length: f64,
    time_aware: bool,
) -> Result<Transcript, BudgetError> {
    let plan = plan_clips(video.duration, clip_length)?;
    let captions = source.captions(video, &plan)?;
    if captions.len() != plan.len() {
        return Err(BudgetError::CaptionCountMismatch { expected: plan.len(), got: captions.len() });
    }
    Ok(build_transcript(subtitles, &captions, clip_length, counter, time_aware))
}

/// Fit a video's transcript into `params.context_limit`.
pub fn adaptive_token_reduction(
    video: &VideoManifest,
    subtitles: &[SubtitleSegment],
    source: &dyn CaptionSource,
    counter: &TokenCounter,
    params: &BudgetParams,
) -> Result<(Transcript, BudgetPlan), BudgetError> {
    let l0 = params.initial_clip_length;
    if !(l0.is_finite() && l0 > 0.0) {
        return Err(TranscriptError::NonPositiveInput { what: "initial_clip_length", value: l0 }.into());
    }
    if params.prompt_overhead >= params.context_limit {
        return Ok(question_too_large(params));
    }
    let budget = params.context_limit - params.prompt_overhead;

    let mut clip_length = l0;
    let mut trace = Vec::new();
    loop {
        let transcript = transcript_at(video, subtitles, source, counter, clip_length, params.time_aware)?;
        trace.push(TraceEntry { clip_length, token_count: transcript.token_count });
        if transcript.token_count <= budget {
            return Ok(finish(transcript, trace, params, BudgetOutcome::Fit));
        }
        if clip_length >= video.duration {
            let truncated = truncate_to_budget(&transcript, counter, budget);
            return Ok(finish(truncated, trace, params, BudgetOutcome::FitAfterTruncation));
        }
        clip_length *= 2.0;
    }
}

/// Single pass at a fixed clip length (no coarsening). Truncates when the
/// transcript does not fit.
pub fn fixed_clip_budget(
    video: &VideoManifest,
    subtitles: &[SubtitleSegment],
    source: &dyn CaptionSource,
    counter: &TokenCounter,
    params: &BudgetParams,
    clip_length: f64,
) -> Result<(Transcript, BudgetPlan), BudgetError> {
    let params = BudgetParams { initial_clip_length: clip_length, ..*params };
    if params.prompt_overhead >= params.context_limit {
        return Ok(question_too_large(&params));
    }
    let budget = params.context_limit - params.prompt_overhead;
    let transcript = transcript_at(video, subtitles, source, counter, clip_length, params.time_aware)?;
    let trace = vec![TraceEntry { clip_length, token_count: transcript.token_count }];
    if transcript.token_count <= budget {
        Ok(finish(transcript, trace, &params, BudgetOutcome::Fit))
    } else {
        let truncated = truncate_to_budget(&transcript, counter, budget);
        Ok(finish(truncated, trace, &params, BudgetOutcome::FitAfterTruncation))
    }
}

fn question_too_large(params: &BudgetParams) -> (Transcript, BudgetPlan) {
    let plan = BudgetPlan {
        initial_clip_length: params.initial_clip_length,
        final_clip_length: params.initial_clip_length,
        context_limit: params.context_limit,
        final_token_count: 0,
        trace: Vec::new(),
        outcome: BudgetOutcome::QuestionTooLarge,
    };
    (Transcript::empty(params.initial_clip_length), plan)
}

fn finish(
    transcript: Transcript,
    trace: Vec<TraceEntry>,
    params: &BudgetParams,
    outcome: BudgetOutcome,
) -> (Transcript, BudgetPlan) {
    let plan = BudgetPlan {
        initial_clip_length: params.initial_clip_length,
        final_clip_length: transcript.clip_length,
        context_limit: params.context_limit,
        final_token_count: transcript.token_count,
        trace,
        outcome,
    };
    (transcript, plan)
}

/// Removal order for `n` lines: nearest the middle first, the first and last
/// lines last. Ties go to the earlier line.
pub fn middle_out_order(n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // distance to the center, doubled to stay in integers
    let center2 = n.saturating_sub(1) as i64;
    idx.sort_by_key(|&i| ((2 * i as i64 - center2).abs(), i));
    idx
}

fn without(lines: &[&str], order: &[usize], removed: usize) -> Vec<String> {
    let mut keep = vec![true; lines.len()];
    for &i in &order[..removed] {
        keep[i] = false;
    }
    lines.iter().zip(keep).filter(|(_, k)| *k).map(|(l, _)| l.to_string()).collect()
}

/// Drop caption lines, then subtitle lines (each middle-out) until the
/// transcript fits `budget` tokens. Finds the fewest removals by bisection
/// over the removal count.
fn truncate_to_budget(t: &Transcript, counter: &TokenCounter, budget: usize) -> Transcript {
    let subs = t.subtitle_lines();
    let caps = t.caption_lines();
    let cap_order = middle_out_order(caps.len());
    let sub_order = middle_out_order(subs.len());
    let total = caps.len() + subs.len();

    let build = |k: usize| {
        let caps_removed = k.min(caps.len());
        let subs_removed = k - caps_removed;
        let c = without(&caps, &cap_order, caps_removed);
        let s = without(&subs, &sub_order, subs_removed);
        Transcript::from_blocks(s.join("\n"), c.join("\n"), t.clip_length, counter)
    };

    let (mut lo, mut hi) = (0usize, total);
    let mut best = build(total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let cand = build(mid);
        if cand.token_count <= budget {
            hi = mid;
            best = cand;
        } else {
            lo = mid + 1;
        }
    }
    if best.token_count > budget {
        // non-monotone counter: fall back to the empty transcript
        best = Transcript::from_blocks(String::new(), String::new(), t.clip_length, counter);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropTarget {
    Subtitles,
    Captions,
}

#[derive(Debug, Error, PartialEq)]
#[error("drop rate must be in [0, 1), got {0}")]
pub struct InvalidRate(pub f64);

/// Indices kept when dropping `rate` of `n` items with a uniform stride.
///
/// Item `i` is kept iff `ceil((i + 1) * keep) > ceil(i * keep)` where
/// `keep = 1 - rate`, which keeps exactly `ceil(n * keep)` items and always
/// keeps item 0.
pub fn retained_indices(n: usize, rate: f64) -> Result<Vec<usize>, InvalidRate> {
    if !(0.0..1.0).contains(&rate) {
        return Err(InvalidRate(rate));
    }
    let keep = 1.0 - rate;
    // absorb representation error (1 - 0.7 = 0.30000000000000004)
    let ceil = |x: f64| (x - 1e-9).ceil() as i64;
    Ok((0..n).filter(|&i| ceil((i + 1) as f64 * keep) > ceil(i as f64 * keep)).collect())
}

/// Drop a fraction of rendered lines. `target` only labels which block the
/// lines came from; the stride rule is the same for both.
pub fn drop_tokens<T: Clone>(items: &[T], rate: f64, _target: DropTarget) -> Result<Vec<T>, InvalidRate> {
    Ok(retained_indices(items.len(), rate)?.into_iter().map(|i| items[i].clone()).collect())
}

/// Apply a line drop to one block of a transcript and recount.
pub fn drop_transcript_lines(
    t: &Transcript,
    rate: f64,
    target: DropTarget,
    counter: &TokenCounter,
) -> Result<Transcript, InvalidRate> {
    let (subs, caps) = match target {
        DropTarget::Subtitles => (drop_tokens(&t.subtitle_lines(), rate, target)?, t.caption_lines()),
        DropTarget::Captions => (t.subtitle_lines(), drop_tokens(&t.caption_lines(), rate, target)?),
    };
    Ok(Transcript::from_lines(&subs, &caps, t.clip_length, counter))
}
