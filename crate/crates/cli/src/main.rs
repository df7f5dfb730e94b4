//! `vidlang` command line: run, ablate, re-score and inspect evaluation runs.
//!
//! Exit codes: 0 success, 1 configuration or other fatal error, 2 more
//! per-question backend failures than `--max-failures` allows.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidlang::budget::DropTarget;
use vidlang::eval::summary_table;
use vidlang::gateway::{BackendEndpoint, MockRegistry, Role};
use vidlang::load_manifests;
use vidlang::pipeline::{
    ablation_table, read_artifact, rescore_run, run_ablation, run_pipeline, AblationVariant, DropSpec, Endpoints,
    PipelineError, RunConfig, RunOutcome,
};
use vidlang::tokens::CounterKind;
use vidlang::ExecMode;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILURE_BUDGET: u8 = 2;

#[derive(Parser)]
#[command(name = "vidlang", version, about = "Language-space video question answering evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every question of a manifest.
    Run(RunArgs),
    /// Run several clip-length / drop variants of one config and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Variant spec: `atr`, `fixed=<seconds>`, `drop=<subtitles|captions>:<rate>`,
        /// or several joined with `+`. Repeatable.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
    },
    /// Re-parse and re-score the stored outputs of a finished run.
    Score {
        run_dir: PathBuf,
    },
    /// Print the stored transcript and budget trace of one video.
    Inspect {
        run_dir: PathBuf,
        /// Omit to list the videos of the run.
        video_id: Option<String>,
        /// Print the whole artifact as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Captioner base URL, or `mock:<profile>`.
    #[arg(long)]
    captioner: Option<String>,
    #[arg(long)]
    captioner_model: Option<String>,
    /// ASR base URL, or `mock:<profile>`.
    #[arg(long)]
    asr: Option<String>,
    #[arg(long)]
    asr_model: Option<String>,
    /// LLM base URL, or `mock:<profile>`.
    #[arg(long)]
    llm: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    /// Environment variable holding the LLM bearer token.
    #[arg(long)]
    llm_token_env: Option<String>,
    /// Optional judge for open-ended answers.
    #[arg(long)]
    judge: Option<String>,
    #[arg(long)]
    context_limit: Option<usize>,
    #[arg(long)]
    initial_clip_length: Option<f64>,
    /// Use one clip length instead of adaptive reduction.
    #[arg(long)]
    fixed_clip_length: Option<f64>,
    /// `<subtitles|captions>:<rate>`.
    #[arg(long, value_parser = parse_drop)]
    drop: Option<DropSpec>,
    /// Render transcript lines without time stamps.
    #[arg(long)]
    no_timestamps: bool,
    /// Count tokens with a BPE merges file instead of the character heuristic.
    #[arg(long)]
    bpe_vocabulary: Option<PathBuf>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    video_concurrency: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_output_tokens: Option<u32>,
    #[arg(long)]
    cache_root: Option<PathBuf>,
    /// Reuse complete per-video artifacts from an earlier run.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_failures: Option<usize>,
    /// Process everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Directory that scene files of the `scene` mock are resolved against.
    /// Defaults to the manifest's directory.
    #[arg(long)]
    mock_base_dir: Option<PathBuf>,
}

fn parse_drop(s: &str) -> Result<DropSpec, String> {
    let (target, rate) = s.split_once(':').ok_or("expected <subtitles|captions>:<rate>")?;
    let target = match target {
        "subtitles" => DropTarget::Subtitles,
        "captions" => DropTarget::Captions,
        other => return Err(format!("unknown drop target `{other}`")),
    };
    let rate = rate.parse().map_err(|_| format!("drop rate `{rate}` is not a number"))?;
    Ok(DropSpec { target, rate })
}

fn endpoint(role: Role, url: &str) -> BackendEndpoint {
    BackendEndpoint::new(role, url)
}

impl RunArgs {
    fn into_config(self) -> Result<(RunConfig, Option<PathBuf>), String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
            None => {
                let manifest = self.manifest.clone().ok_or("--manifest is required without --config")?;
                let output = self.output.clone().ok_or("--output is required without --config")?;
                let missing = |flag: &str| format!("--{flag} is required without --config");
                let endpoints = Endpoints {
                    captioner: endpoint(Role::Captioner, self.captioner.as_deref().ok_or_else(|| missing("captioner"))?),
                    asr: endpoint(Role::Asr, self.asr.as_deref().ok_or_else(|| missing("asr"))?),
                    llm: endpoint(Role::Llm, self.llm.as_deref().ok_or_else(|| missing("llm"))?),
                    judge: None,
                };
                RunConfig::new(manifest, endpoints, output)
            }
        };
        let eps = &mut cfg.endpoints;
        if let Some(v) = self.manifest {
            cfg.manifest_path = v;
        }
        if let Some(v) = self.output {
            cfg.output_dir = v;
        }
        if let Some(v) = self.captioner {
            eps.captioner.base_url = v;
        }
        if let Some(v) = self.captioner_model {
            eps.captioner.model_name = v;
        }
        if let Some(v) = self.asr {
            eps.asr.base_url = v;
        }
        if let Some(v) = self.asr_model {
            eps.asr.model_name = v;
        }
        if let Some(v) = self.llm {
            eps.llm.base_url = v;
        }
        if let Some(v) = self.llm_model {
            eps.llm.model_name = v;
        }
        if let Some(v) = self.llm_token_env {
            eps.llm.auth_token_env = Some(v);
        }
        if let Some(v) = self.judge {
            eps.judge = Some(endpoint(Role::Judge, &v));
        }
        if let Some(v) = self.context_limit {
            cfg.context_limit = v;
        }
        if let Some(v) = self.initial_clip_length {
            cfg.initial_clip_length = v;
        }
        if self.fixed_clip_length.is_some() {
            cfg.fixed_clip_length = self.fixed_clip_length;
        }
        if self.drop.is_some() {
            cfg.drop_spec = self.drop;
        }
        if self.no_timestamps {
            cfg.time_aware = false;
        }
        if let Some(v) = self.bpe_vocabulary {
            cfg.counter.kind = CounterKind::VocabularyBpe;
            cfg.counter.vocabulary_uri = Some(v);
        }
        if let Some(v) = self.max_in_flight {
            cfg.max_in_flight = v;
        }
        if let Some(v) = self.video_concurrency {
            cfg.video_concurrency = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if self.max_output_tokens.is_some() {
            cfg.max_output_tokens = self.max_output_tokens;
        }
        if self.cache_root.is_some() {
            cfg.cache_root = self.cache_root;
        }
        if self.resume {
            cfg.resume = true;
        }
        if let Some(v) = self.max_failures {
            cfg.max_failures = v;
        }
        if self.sequential {
            cfg.exec_mode = ExecMode::Sequential;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok((cfg, self.mock_base_dir))
    }
}

fn registry(cfg: &RunConfig, base_dir: Option<PathBuf>) -> Result<MockRegistry, PipelineError> {
    let base = base_dir
        .or_else(|| cfg.manifest_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let videos = load_manifests(&cfg.manifest_path)?;
    Ok(MockRegistry::new().with_base_dir(base).with_answer_key(&videos))
}

fn fatal(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn report(outcome: &RunOutcome, out: &Path) {
    print!("{}", summary_table(&outcome.report));
    let s = &outcome.stats;
    println!(
        "videos {} (resumed {}), questions {}, failures {}, requests {}, cached {}, peak in flight {}, wall {} ms",
        s.videos, s.resumed_videos, s.questions, s.failures, s.network_requests, s.cached_responses, s.peak_in_flight, s.wall_ms
    );
    println!("results in {}", out.display());
}

fn budget_exit(failures: usize, max: usize) -> ExitCode {
    if failures > max {
        eprintln!("{failures} question failures exceed the budget of {max}");
        ExitCode::from(EXIT_FAILURE_BUDGET)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(args: RunArgs) -> ExitCode {
    let (cfg, base) = match args.into_config() {
        Ok(x) => x,
        Err(e) => return fatal(e),
    };
    let outcome = match registry(&cfg, base).and_then(|reg| run_pipeline(&cfg, &reg)) {
        Ok(o) => o,
        Err(e) => return fatal(e),
    };
    report(&outcome, &cfg.output_dir);
    budget_exit(outcome.stats.failures, cfg.max_failures)
}

fn ablate(args: RunArgs, specs: Vec<String>) -> ExitCode {
    let (cfg, base) = match args.into_config() {
        Ok(x) => x,
        Err(e) => return fatal(e),
    };
    let variants = match specs.iter().map(|s| AblationVariant::from_spec(&cfg, s)).collect::<Result<Vec<_>, _>>() {
        Ok(v) => v,
        Err(e) => return fatal(e),
    };
    let result = match registry(&cfg, base).and_then(|reg| run_ablation(&variants, &reg)) {
        Ok(r) => r,
        Err(e) => return fatal(e),
    };
    let table = ablation_table(&result.rows);
    print!("{table}");
    let path = cfg.output_dir.join("ablation.txt");
    if let Err(e) = std::fs::write(&path, &table) {
        return fatal(format!("cannot write {}: {e}", path.display()));
    }
    let worst = result.outcomes.iter().map(|o| o.stats.failures).max().unwrap_or(0);
    budget_exit(worst, cfg.max_failures)
}

fn score(run_dir: &Path) -> ExitCode {
    match rescore_run(run_dir) {
        Ok(outcome) => {
            report(&outcome, run_dir);
            ExitCode::SUCCESS
        }
        Err(e) => fatal(e),
    }
}

fn inspect(run_dir: &Path, video_id: Option<&str>, json: bool) -> ExitCode {
    let Some(id) = video_id else {
        let dir = run_dir.join("videos");
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) => return fatal(format!("cannot list {}: {e}", dir.display())),
        };
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        names.sort();
        names.iter().for_each(|n| println!("{n}"));
        return ExitCode::SUCCESS;
    };
    let Some(artifact) = read_artifact(run_dir, id) else {
        return fatal(format!("no artifact for video `{id}` under {}", run_dir.display()));
    };
    if json {
        match serde_json::to_string_pretty(&artifact) {
            Ok(s) => println!("{s}"),
            Err(e) => return fatal(e),
        }
        return ExitCode::SUCCESS;
    }
    println!("video {}", artifact.video_id);
    if let Some(e) = &artifact.error {
        println!("error: {e}");
    }
    if let Some(plan) = &artifact.plan {
        println!(
            "budget: {:?}, limit {}, final clip length {} s, {} tokens, rebudget rounds {}",
            plan.outcome, plan.context_limit, plan.final_clip_length, plan.final_token_count, artifact.rebudget_rounds
        );
        for step in &plan.trace {
            println!("  L = {:>8} s  {:>9} tokens", step.clip_length, step.token_count);
        }
    }
    if let Some(t) = &artifact.transcript {
        println!("\n{}\n", t.full_text);
    }
    for q in &artifact.questions {
        let answer = q.answer_text.as_deref().unwrap_or("-");
        let note = q.verdict.error.as_deref().or(q.parse_error.as_deref()).unwrap_or("");
        println!("{}: {:?} -> {:?} {}", q.question_id, answer, q.verdict.score, note);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => run(args),
        Command::Ablate { run, variants } => ablate(run, variants),
        Command::Score { run_dir } => score(&run_dir),
        Command::Inspect { run_dir, video_id, json } => inspect(&run_dir, video_id.as_deref(), json),
    }
}
