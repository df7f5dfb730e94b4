use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::artifact::read_artifact;
use super::config::{ConfigError, DropSpec, RunConfig};
use super::run::{run_pipeline, PipelineError, RunOutcome};
use crate::budget::DropTarget;
use crate::fsutil::safe_file_stem;
use crate::gateway::MockRegistry;

#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub label: String,
    pub config: RunConfig,
}

impl AblationVariant {
    /// Derive a variant from `base` with a spec such as `atr`, `fixed=8`,
    /// `drop=subtitles:0.75` or `fixed=8+drop=captions:0.5`. The variant writes
    /// to `<base.output_dir>/<label>`.
    pub fn from_spec(base: &RunConfig, spec: &str) -> Result<Self, ConfigError> {
        let bad = |why: &str| ConfigError::Invalid(format!("variant `{spec}`: {why}"));
        let mut config = base.clone();
        config.fixed_clip_length = None;
        config.drop_spec = None;
        for part in spec.split('+').map(str::trim) {
            match part.split_once('=') {
                None if part == "atr" => config.fixed_clip_length = None,
                Some(("fixed", l)) => {
                    config.fixed_clip_length = Some(l.parse().map_err(|_| bad("clip length is not a number"))?)
                }
                Some(("drop", d)) => {
                    let (target, rate) = d.split_once(':').ok_or_else(|| bad("expected drop=<target>:<rate>"))?;
                    let target = match target {
                        "subtitles" => DropTarget::Subtitles,
                        "captions" => DropTarget::Captions,
                        _ => return Err(bad("drop target must be subtitles or captions")),
                    };
                    let rate = rate.parse().map_err(|_| bad("drop rate is not a number"))?;
                    config.drop_spec = Some(DropSpec { target, rate });
                }
                _ => return Err(bad("expected atr, fixed=<seconds> or drop=<target>:<rate>")),
            }
        }
        config.output_dir = base.output_dir.join(safe_file_stem(spec));
        config.validate()?;
        Ok(Self { label: spec.to_string(), config })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub clip_length: String,
    pub drop: String,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub delta_knowledge: Option<f64>,
    pub mean_final_clip_length: Option<f64>,
    pub mean_transcript_tokens: Option<f64>,
    pub failures: usize,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub outcomes: Vec<RunOutcome>,
}

/// Everything but the fields an ablation may vary.
fn comparable(c: &RunConfig) -> String {
    let mut c = c.clone();
    c.fixed_clip_length = None;
    c.initial_clip_length = 1.0;
    c.drop_spec = None;
    c.fingerprint()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn row(v: &AblationVariant, outcome: &RunOutcome) -> AblationRow {
    let c = &v.config;
    let video_ids: BTreeSet<&str> = outcome.verdicts.iter().map(|x| x.video_id.as_str()).collect();
    let plans: Vec<_> = video_ids
        .iter()
        .filter_map(|id| read_artifact(&c.output_dir, id))
        .filter_map(|a| Some((a.plan?.final_clip_length, a.transcript?.token_count as f64)))
        .collect();
    AblationRow {
        label: v.label.clone(),
        clip_length: match c.fixed_clip_length {
            Some(l) => format!("fixed {l}s"),
            None => format!("adaptive from {}s", c.initial_clip_length),
        },
        drop: match &c.drop_spec {
            Some(d) => format!("{:?} {:.0}%", d.target, d.rate * 100.0).to_lowercase(),
            None => "none".into(),
        },
        accuracy: outcome.report.accuracy_overall,
        miou: outcome.report.miou,
        delta_knowledge: outcome.report.knowledge.as_ref().and_then(|k| k.delta_knowledge),
        mean_final_clip_length: mean(&plans.iter().map(|p| p.0).collect::<Vec<_>>()),
        mean_transcript_tokens: mean(&plans.iter().map(|p| p.1).collect::<Vec<_>>()),
        failures: outcome.stats.failures,
        output_dir: c.output_dir.clone(),
    }
}

/// Run each variant and collect one comparison row per variant.
///
/// Variants may differ only in clip length, drop settings and output
/// location; anything else would confound the comparison.
pub fn run_ablation(variants: &[AblationVariant], registry: &MockRegistry) -> Result<AblationResult, PipelineError> {
    let Some(first) = variants.first() else {
        return Err(ConfigError::Invalid("no ablation variants given".into()).into());
    };
    let reference = comparable(&first.config);
    let mut labels = BTreeSet::new();
    for v in variants {
        if comparable(&v.config) != reference {
            return Err(ConfigError::Invalid(format!(
                "variant `{}` differs from `{}` in more than clip length or drop settings",
                v.label, first.label
            ))
            .into());
        }
        if !labels.insert(v.label.as_str()) {
            return Err(ConfigError::Invalid(format!("duplicate variant label `{}`", v.label)).into());
        }
    }
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for v in variants {
        log::info!("ablation variant {}", v.label);
        let outcome = run_pipeline(&v.config, registry)?;
        rows.push(row(v, &outcome));
        outcomes.push(outcome);
    }
    Ok(AblationResult { rows, outcomes })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

/// Plain-text comparison table, one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:<22} {:<16} {:>8} {:>8} {:>8} {:>9} {:>10} {:>8}",
        "variant", "clip length", "drop", "acc", "miou", "dknow", "final L", "tokens", "failed"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:<22} {:<16} {:>8} {:>8} {:>8} {:>9} {:>10} {:>8}",
            r.label,
            r.clip_length,
            r.drop,
            cell(r.accuracy),
            cell(r.miou),
            cell(r.delta_knowledge),
            cell(r.mean_final_clip_length),
            cell(r.mean_transcript_tokens),
            r.failures
        );
    }
    s
}
