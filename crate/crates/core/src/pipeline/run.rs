use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use super::artifact::{
    read_artifact, write_artifact, QuestionRecord, RunStats, StageTimings, VideoArtifact, ARTIFACT_VERSION,
};
use super::config::{ConfigError, RunConfig};
use crate::budget::{
    adaptive_token_reduction, drop_transcript_lines, fixed_clip_budget, BudgetOutcome, BudgetParams, BudgetPlan,
    CaptionSource, CaptionSourceError,
};
use crate::eval::{build_report, category_labels, write_report, EvalError, EvalReport, Prediction, Verdict};
use crate::exec::{self, ExecMode};
use crate::fsutil::write_atomic;
use crate::gateway::{
    caption_defaults, execute_batch, BackendEndpoint, CaptionRequest, Completion, Decode, GatewayError,
    InFlightLimiter, LlmRequest, MockRegistry, ModelClient, ResponseCache, RetryPolicy,
};
use crate::manifest::{load_manifests, ClipCaption, GroundTruth, ManifestError, PairRole, Question, QuestionKind, VideoManifest};
use crate::parse::{clean_open_answer, parse_intervals, parse_letter};
use crate::prompt::{render_prompt, TemplateKind};
use crate::tokens::{TokenCounter, VocabularyLoadFailure};
use crate::transcript::{ClipPlan, Transcript};

/// Rounds of re-budgeting after the model reports a context overflow.
pub const MAX_REBUDGET_ROUNDS: u32 = 2;

const JUDGE_PROMPT: &str = "You are grading a short answer to a question about a video.\n\n\
Question: {question}\nReference answer: {reference}\nCandidate answer: {candidate}\n\n\
Does the candidate answer mean the same as the reference answer? Reply with only yes or no.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Counter(#[from] VocabularyLoadFailure),
    #[error("cannot set up backend: {0}")]
    Gateway(#[from] GatewayError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no artifacts found under {0}")]
    MissingRun(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// In manifest order.
    pub verdicts: Vec<Verdict>,
    pub stats: RunStats,
}

impl RunOutcome {
    pub fn over_failure_budget(&self, max_failures: usize) -> bool {
        self.stats.failures > max_failures
    }
}

/// Captions each planned clip through the captioner backend, as one batch.
pub struct GatewayCaptionSource<'a> {
    pub client: &'a ModelClient,
    pub max_in_flight: usize,
    pub mode: ExecMode,
}

impl CaptionSource for GatewayCaptionSource<'_> {
    fn captions(&self, video: &VideoManifest, plan: &ClipPlan) -> Result<Vec<ClipCaption>, CaptionSourceError> {
        let (prompt, max_new_tokens) = caption_defaults(&self.client.endpoint().model_name);
        let requests: Vec<CaptionRequest> = plan
            .clips
            .iter()
            .map(|&interval| CaptionRequest {
                video_id: video.video_id.clone(),
                media_uri: video.media_uri.clone(),
                interval,
                prompt: prompt.to_string(),
                max_new_tokens,
                decode: Decode::Greedy,
            })
            .collect();
        let fail = |r: &CaptionRequest, reason: String| CaptionSourceError { start: r.interval.0, end: r.interval.1, reason };
        let mut results = execute_batch(self.client, &requests, self.max_in_flight, self.mode)
            .map_err(|e| fail(&requests[0], e.to_string()))?;
        requests
            .iter()
            .map(|r| match results.remove(&r.request_id()) {
                Some(Ok(c)) => Ok(c),
                Some(Err(e)) => Err(fail(r, e.to_string())),
                None => Err(fail(r, "no result for clip".into())),
            })
            .collect()
    }
}

struct Clients {
    captioner: ModelClient,
    asr: ModelClient,
    llm: ModelClient,
    judge: Option<ModelClient>,
    limiter: Arc<InFlightLimiter>,
}

impl Clients {
    fn new(config: &RunConfig, registry: &MockRegistry) -> Result<Self, GatewayError> {
        let limiter = Arc::new(InFlightLimiter::new(config.max_in_flight));
        let cache = config.cache_root.as_ref().map(ResponseCache::new);
        let make = |ep: &BackendEndpoint| -> Result<ModelClient, GatewayError> {
            let retry = if ep.mock_profile().is_some() { RetryPolicy::immediate() } else { RetryPolicy::default() };
            Ok(ModelClient::new(ep.clone(), registry.transport(ep)?)
                .with_retry(retry)
                .with_cache(cache.clone())
                .with_limiter(limiter.clone())
                .with_reasoning_markers(config.reasoning_markers()))
        };
        let e = &config.endpoints;
        Ok(Self {
            captioner: make(&e.captioner)?,
            asr: make(&e.asr)?,
            llm: make(&e.llm)?,
            judge: e.judge.as_ref().map(make).transpose()?,
            limiter,
        })
    }

    fn all(&self) -> impl Iterator<Item = &ModelClient> {
        [&self.captioner, &self.asr, &self.llm].into_iter().chain(self.judge.as_ref())
    }
}

struct Ctx<'a> {
    config: &'a RunConfig,
    counter: TokenCounter,
    clients: Clients,
    fingerprint: String,
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

/// Smallest clip length the reduction loop can end at that covers the video.
fn coarsest_clip_length(config: &RunConfig, duration: f64) -> f64 {
    match config.fixed_clip_length {
        Some(l) => l,
        None => {
            let mut l = config.initial_clip_length;
            while l < duration {
                l *= 2.0;
            }
            l
        }
    }
}

fn prompt_transcript<'t>(q: &Question, transcript: &'t Transcript, blank: &'t Transcript) -> &'t Transcript {
    if q.kind == QuestionKind::KnowledgePair && q.pre_post_role == PairRole::Pre {
        blank
    } else {
        transcript
    }
}

/// Tokens of the largest prompt around an empty transcript.
fn prompt_overhead(ctx: &Ctx<'_>, video: &VideoManifest) -> usize {
    let blank = Transcript::empty(coarsest_clip_length(ctx.config, video.duration));
    video
        .questions
        .iter()
        .filter_map(|q| render_prompt(TemplateKind::for_question(q.kind), &blank, q).ok())
        .map(|p| ctx.counter.count(&p))
        .max()
        .unwrap_or(0)
}

/// Turn the model's answer into a prediction; the note says why parsing failed.
pub fn interpret(question: &Question, answer: &str) -> (Prediction, Option<String>) {
    match question.kind {
        QuestionKind::MultipleChoice | QuestionKind::KnowledgePair => {
            match parse_letter(answer, &question.option_letters()) {
                Ok(l) => (Prediction::Letter(l), None),
                Err(e) => (Prediction::Abstain, Some(e.to_string())),
            }
        }
        QuestionKind::GroundedQa => match parse_intervals(answer) {
            Ok(p) => (Prediction::Intervals(p.to_intervals()), None),
            Err(e) => (Prediction::Abstain, Some(e.to_string())),
        },
        QuestionKind::OpenEnded => match clean_open_answer(answer) {
            a if a.is_empty() => (Prediction::Abstain, Some("empty answer".into())),
            a => (Prediction::Text(a), None),
        },
    }
}

fn judge(client: &ModelClient, question: &Question, candidate: &str, temperature: f64, id: String) -> Option<bool> {
    let GroundTruth::Text(reference) = &question.ground_truth else {
        return None;
    };
    let prompt = JUDGE_PROMPT
        .replace("{question}", question.text.trim())
        .replace("{reference}", reference.trim())
        .replace("{candidate}", candidate.trim());
    let mut req = LlmRequest::new(prompt, id);
    req.temperature = temperature;
    match client.complete(&req) {
        Ok(c) => {
            let first = c.text.trim().split(|ch: char| !ch.is_alphabetic()).next().unwrap_or("").to_lowercase();
            match first.as_str() {
                "yes" => Some(true),
                "no" => Some(false),
                _ => None,
            }
        }
        Err(e) => {
            log::warn!("judge failed on {}: {e}", question.question_id);
            None
        }
    }
}

fn failed_record(video: &VideoManifest, q: &Question, error: &str) -> QuestionRecord {
    let verdict = Verdict::score(&video.video_id, q, Prediction::Abstain, video.category_labels.get(&q.question_id).cloned())
        .with_error(error);
    QuestionRecord {
        question_id: q.question_id.clone(),
        prompt_tokens: 0,
        raw_output: None,
        reasoning: None,
        answer_text: None,
        parsed: Prediction::Abstain,
        parse_error: None,
        judged_correct: None,
        cached: false,
        verdict,
    }
}

fn budget(
    ctx: &Ctx<'_>,
    video: &VideoManifest,
    subtitles: &[crate::manifest::SubtitleSegment],
    context_limit: usize,
    overhead: usize,
) -> Result<(Transcript, BudgetPlan), String> {
    let c = ctx.config;
    let params = BudgetParams {
        context_limit,
        initial_clip_length: c.initial_clip_length,
        prompt_overhead: overhead,
        time_aware: c.time_aware,
    };
    let source = GatewayCaptionSource { client: &ctx.clients.captioner, max_in_flight: c.max_in_flight, mode: c.exec_mode };
    let (mut transcript, plan) = match c.fixed_clip_length {
        Some(l) => fixed_clip_budget(video, subtitles, &source, &ctx.counter, &params, l),
        None => adaptive_token_reduction(video, subtitles, &source, &ctx.counter, &params),
    }
    .map_err(|e| e.to_string())?;
    if let (Some(d), false) = (&c.drop_spec, plan.outcome == BudgetOutcome::QuestionTooLarge) {
        transcript = drop_transcript_lines(&transcript, d.rate, d.target, &ctx.counter).map_err(|e| e.to_string())?;
    }
    Ok((transcript, plan))
}

type Answers = BTreeMap<String, Result<Completion, GatewayError>>;

fn ask(ctx: &Ctx<'_>, video: &VideoManifest, transcript: &Transcript, round: u32) -> (Answers, BTreeMap<String, (String, usize)>) {
    let blank = Transcript::empty(transcript.clip_length);
    let mut requests = Vec::new();
    let mut prompts = BTreeMap::new();
    let mut answers = Answers::new();
    for q in &video.questions {
        let id = LlmRequest::id_for(&video.video_id, &q.question_id, round);
        let t = prompt_transcript(q, transcript, &blank);
        match render_prompt(TemplateKind::for_question(q.kind), t, q) {
            Ok(prompt) => {
                let tokens = ctx.counter.count(&prompt);
                let mut req = LlmRequest::new(prompt, id.clone());
                req.temperature = ctx.config.temperature;
                req.max_output_tokens = ctx.config.max_output_tokens;
                requests.push(req);
                prompts.insert(q.question_id.clone(), (id, tokens));
            }
            Err(e) => {
                answers.insert(id.clone(), Err(GatewayError::InvalidRequest(e.to_string())));
                prompts.insert(q.question_id.clone(), (id, 0));
            }
        }
    }
    match execute_batch(&ctx.clients.llm, &requests, ctx.config.max_in_flight, ctx.config.exec_mode) {
        Ok(out) => answers.extend(out),
        Err(e) => answers.extend(requests.iter().map(|r| (r.request_id.clone(), Err(e.clone())))),
    }
    (answers, prompts)
}

fn process_video(ctx: &Ctx<'_>, video: &VideoManifest) -> (VideoArtifact, bool) {
    let config = ctx.config;
    let question_ids: Vec<&str> = video.questions.iter().map(|q| q.question_id.as_str()).collect();
    if config.resume {
        if let Some(a) = read_artifact(&config.output_dir, &video.video_id) {
            if a.config_fingerprint == ctx.fingerprint && a.is_complete(&question_ids) {
                log::info!("{}: resumed from artifact", video.video_id);
                return (a, true);
            }
        }
    }

    let mut timings = StageTimings::default();
    let mut artifact = VideoArtifact {
        artifact_version: ARTIFACT_VERSION,
        video_id: video.video_id.clone(),
        config_fingerprint: ctx.fingerprint.clone(),
        subtitle_segments: 0,
        transcript: None,
        plan: None,
        rebudget_rounds: 0,
        error: None,
        questions: Vec::new(),
        timings,
    };
    let fail_all = |mut a: VideoArtifact, error: String| {
        log::warn!("{}: {error}", video.video_id);
        a.questions = video.questions.iter().map(|q| failed_record(video, q, &error)).collect();
        a.error = Some(error);
        a
    };

    let t = Instant::now();
    let subtitles = match ctx.clients.asr.transcribe(video) {
        Ok(s) => s,
        Err(e) => return (fail_all(artifact, format!("transcription failed: {e}")), false),
    };
    timings.transcribe_ms = ms(t);
    artifact.subtitle_segments = subtitles.len();

    let overhead = prompt_overhead(ctx, video);
    let mut limit = config.context_limit;
    let mut round = 0;
    let (transcript, plan, answers, prompts) = loop {
        let t = Instant::now();
        let budgeted = budget(ctx, video, &subtitles, limit, overhead);
        timings.budget_ms += ms(t);
        let (transcript, plan) = match budgeted {
            Ok(x) => x,
            Err(e) => {
                artifact.timings = timings;
                return (fail_all(artifact, format!("budgeting failed: {e}")), false);
            }
        };
        if plan.outcome == BudgetOutcome::QuestionTooLarge {
            artifact.timings = timings;
            artifact.plan = Some(plan);
            let e = format!("prompt alone needs {overhead} tokens, context limit is {limit}");
            return (fail_all(artifact, e), false);
        }
        let t = Instant::now();
        let (answers, prompts) = ask(ctx, video, &transcript, round);
        timings.complete_ms += ms(t);
        let overflowed = answers.values().any(|r| matches!(r, Err(GatewayError::ContextLengthExceeded(_))));
        if overflowed && round < MAX_REBUDGET_ROUNDS {
            round += 1;
            limit = limit * 3 / 4;
            log::info!("{}: context overflow, re-budgeting at {limit} tokens", video.video_id);
            continue;
        }
        break (transcript, plan, answers, prompts);
    };
    artifact.rebudget_rounds = round;

    let t = Instant::now();
    let mut answers = answers;
    for q in &video.questions {
        let (id, prompt_tokens) = prompts[&q.question_id].clone();
        let category = video.category_labels.get(&q.question_id).cloned();
        let record = match answers.remove(&id) {
            Some(Ok(c)) => {
                let (parsed, parse_error) = interpret(q, &c.text);
                let mut verdict = Verdict::score(&video.video_id, q, parsed.clone(), category);
                let judged_correct = match (&ctx.clients.judge, &parsed) {
                    (Some(j), Prediction::Text(answer)) => {
                        judge(j, q, answer, config.temperature, format!("{id}/judge"))
                    }
                    _ => None,
                };
                if let Some(ok) = judged_correct {
                    verdict = verdict.with_judgement(ok);
                }
                QuestionRecord {
                    question_id: q.question_id.clone(),
                    prompt_tokens,
                    raw_output: Some(c.raw),
                    reasoning: c.reasoning,
                    answer_text: Some(c.text),
                    parsed,
                    parse_error,
                    judged_correct,
                    cached: c.cached,
                    verdict,
                }
            }
            Some(Err(e)) => QuestionRecord { prompt_tokens, ..failed_record(video, q, &e.to_string()) },
            None => failed_record(video, q, "no completion returned"),
        };
        artifact.questions.push(record);
    }
    timings.score_ms = ms(t);
    artifact.timings = timings;
    artifact.transcript = Some(transcript);
    artifact.plan = Some(plan);
    (artifact, false)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), PipelineError> {
    let bytes = serde_json::to_vec_pretty(value).expect("values serialize");
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Run every video of the manifest through transcription, budgeting,
/// prompting, completion and scoring, writing artifacts under
/// `config.output_dir`.
///
/// Backend failures never abort the run: the affected questions are recorded
/// as abstentions with an error note and counted in `stats.failures`.
pub fn run_pipeline(config: &RunConfig, registry: &MockRegistry) -> Result<RunOutcome, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let videos = load_manifests(&config.manifest_path)?;
    let ctx = Ctx {
        config,
        counter: config.counter.build()?,
        clients: Clients::new(config, registry)?,
        fingerprint: config.fingerprint(),
    };
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), config)?;

    let artifacts = exec::map_bounded(config.exec_mode, config.video_concurrency, &videos, |v| {
        let (artifact, resumed) = process_video(&ctx, v);
        if !resumed {
            if let Err(e) = write_artifact(out, &artifact) {
                log::error!("cannot write artifact for {}: {e}", v.video_id);
            }
        }
        (artifact, resumed)
    });

    let mut stats = RunStats { videos: videos.len(), ..RunStats::default() };
    let mut verdicts = Vec::new();
    for (artifact, resumed) in &artifacts {
        stats.resumed_videos += usize::from(*resumed);
        stats.stages.add(&artifact.timings);
        for r in &artifact.questions {
            stats.questions += 1;
            stats.failures += usize::from(r.verdict.error.is_some());
            stats.cached_responses += usize::from(r.cached);
            verdicts.push(r.verdict.clone());
        }
    }
    let report = build_report(&verdicts, &category_labels(&videos))?;
    write_report(out, &verdicts, &report).map_err(io_err(out))?;

    stats.network_requests = ctx.clients.all().map(ModelClient::requests_sent).sum();
    stats.peak_in_flight = ctx.clients.limiter.peak();
    stats.wall_ms = ms(started);
    write_json(&out.join("run.json"), &stats)?;
    log::info!(
        "{} videos, {} questions, {} failures, {} requests sent, peak in flight {}",
        stats.videos,
        stats.questions,
        stats.failures,
        stats.network_requests,
        stats.peak_in_flight
    );
    Ok(RunOutcome { report, verdicts, stats })
}

/// Re-parse and re-score the stored model outputs of a finished run.
pub fn rescore_run(output_dir: &Path) -> Result<RunOutcome, PipelineError> {
    let config_path = output_dir.join("config.json");
    let text = std::fs::read_to_string(&config_path).map_err(|_| PipelineError::MissingRun(output_dir.into()))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: config_path.clone(), reason: e.to_string() })?;
    let videos = load_manifests(&config.manifest_path)?;
    let per_video = exec::map(config.exec_mode, &videos, |video| {
        let artifact = read_artifact(output_dir, &video.video_id);
        video
            .questions
            .iter()
            .map(|q| {
                let record = artifact.as_ref().and_then(|a| a.questions.iter().find(|r| r.question_id == q.question_id));
                let category = video.category_labels.get(&q.question_id).cloned();
                match record {
                    Some(r) => match &r.answer_text {
                        Some(answer) => {
                            let v = Verdict::score(&video.video_id, q, interpret(q, answer).0, category);
                            match r.judged_correct {
                                Some(ok) => v.with_judgement(ok),
                                None => v,
                            }
                        }
                        None => r.verdict.clone(),
                    },
                    None => failed_record(video, q, "no artifact for this question").verdict,
                }
            })
            .collect::<Vec<_>>()
    });
    let verdicts: Vec<Verdict> = per_video.into_iter().flatten().collect();
    let stats = RunStats {
        videos: videos.len(),
        questions: verdicts.len(),
        failures: verdicts.iter().filter(|v| v.error.is_some()).count(),
        ..RunStats::default()
    };
    let report = build_report(&verdicts, &category_labels(&videos))?;
    write_report(output_dir, &verdicts, &report).map_err(io_err(output_dir))?;
    Ok(RunOutcome { report, verdicts, stats })
}
