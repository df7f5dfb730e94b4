//! Scoring: multiple-choice accuracy, interval IoU, knowledge gain, reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::manifest::{GroundTruth, Interval, PairRole, Question, QuestionKind};

/// Version of the `report.jsonl` and `summary.txt` formats.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to score")]
    EmptyInput,
    #[error("pre-viewing accuracy is 100%, so knowledge gain is undefined")]
    DegenerateBaseline,
    #[error("{what} = {value} is outside [0, 100]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("category label for `{question_id}` in video `{video_id}` matches no scored question")]
    UnknownCategoryLabel { video_id: String, question_id: String },
}

/// Percent of `(prediction, gold)` pairs that agree; abstentions count as wrong.
pub fn score_mcq(pairs: &[(Option<char>, char)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = pairs.iter().filter(|(p, g)| *p == Some(*g)).count();
    Ok(correct as f64 / pairs.len() as f64 * 100.0)
}

/// Sorted, disjoint cover of the non-empty input intervals. Touching spans merge.
pub fn union_intervals(intervals: &[Interval]) -> Vec<Interval> {
    let mut ivs: Vec<Interval> = intervals.iter().copied().filter(|i| !i.is_empty()).collect();
    ivs.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<Interval> = Vec::with_capacity(ivs.len());
    for iv in ivs {
        match out.last_mut() {
            Some(last) if iv.start <= last.end => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out
}

fn total_len(ivs: &[Interval]) -> f64 {
    ivs.iter().map(Interval::len).sum()
}

fn intersection_len(a: &[Interval], b: &[Interval]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].start.max(b[j].start);
        let hi = a[i].end.min(b[j].end);
        if hi > lo {
            acc += hi - lo;
        }
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    acc
}

/// Intersection over union of the two interval sets, each unioned first.
/// Two empty sets score 0.
pub fn interval_iou(pred: &[Interval], gold: &[Interval]) -> f64 {
    let a = union_intervals(pred);
    let b = union_intervals(gold);
    let inter = intersection_len(&a, &b);
    let union = total_len(&a) + total_len(&b) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Mean IoU in percent. `None` marks a prediction that failed to parse and scores 0.
pub fn mean_iou(ious: &[Option<f64>]) -> Result<f64, EvalError> {
    if ious.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let sum: f64 = ious.iter().map(|x| x.unwrap_or(0.0)).sum();
    Ok(sum / ious.len() as f64 * 100.0)
}

/// `(post - pre) / (100 - pre) * 100`, in percent.
pub fn delta_knowledge(acc_pre: f64, acc_post: f64) -> Result<f64, EvalError> {
    for (what, value) in [("acc_pre", acc_pre), ("acc_post", acc_post)] {
        if !(0.0..=100.0).contains(&value) {
            return Err(EvalError::OutOfRange { what, value });
        }
    }
    if acc_pre == 100.0 {
        return Err(EvalError::DegenerateBaseline);
    }
    Ok((acc_post - acc_pre) / (100.0 - acc_pre) * 100.0)
}

/// Lowercased, punctuation removed, whitespace collapsed.
pub fn normalize_text_answer(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Letter(char),
    Text(String),
    Intervals(Vec<Interval>),
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Correct(bool),
    Iou(f64),
}

impl Score {
    pub fn is_correct(self) -> bool {
        matches!(self, Score::Correct(true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub video_id: String,
    pub question_id: String,
    pub kind: QuestionKind,
    pub predicted: Prediction,
    pub gold: GroundTruth,
    pub score: Score,
    pub abstained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub pair_role: PairRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Verdict {
    /// Score `predicted` against the question's answer key.
    ///
    /// Text answers are compared after [`normalize_text_answer`]; use
    /// [`Verdict::with_judgement`] to override with an external judge.
    pub fn score(video_id: &str, question: &Question, predicted: Prediction, category: Option<String>) -> Self {
        let abstained = matches!(predicted, Prediction::Abstain);
        let score = match (&question.ground_truth, &predicted) {
            (GroundTruth::Intervals(gold), Prediction::Intervals(p)) => Score::Iou(interval_iou(p, gold)),
            (GroundTruth::Intervals(_), _) => Score::Iou(0.0),
            (GroundTruth::Letter(g), Prediction::Letter(p)) => Score::Correct(g == p),
            (GroundTruth::Text(g), Prediction::Text(p)) => {
                Score::Correct(normalize_text_answer(g) == normalize_text_answer(p))
            }
            _ => Score::Correct(false),
        };
        Verdict {
            video_id: video_id.to_string(),
            question_id: question.question_id.clone(),
            kind: question.kind,
            predicted,
            gold: question.ground_truth.clone(),
            score,
            abstained,
            category,
            pair_role: question.pre_post_role,
            error: None,
        }
    }

    pub fn with_error(mut self, error: impl Into<String>) -> Self {
        self.error = Some(error.into());
        self
    }

    /// Replace a correctness score with an external judgement. IoU scores and
    /// abstentions are left alone.
    pub fn with_judgement(mut self, correct: bool) -> Self {
        if matches!(self.score, Score::Correct(_)) && !self.abstained {
            self.score = Score::Correct(correct);
        }
        self
    }

    fn key(&self) -> (&str, &str) {
        (&self.video_id, &self.question_id)
    }
}

/// Category labels keyed by `(video_id, question_id)`.
pub type CategoryLabels = BTreeMap<(String, String), String>;

pub fn category_labels(videos: &[crate::manifest::VideoManifest]) -> CategoryLabels {
    videos
        .iter()
        .flat_map(|v| v.category_labels.iter().map(|(q, c)| ((v.video_id.clone(), q.clone()), c.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBlock {
    pub acc_pre: f64,
    pub acc_post: f64,
    pub delta_knowledge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    /// Multiple-choice and open-ended questions.
    pub accuracy_scored: usize,
    pub correct: usize,
    pub grounded: usize,
    pub knowledge_pre: usize,
    pub knowledge_post: usize,
    pub abstentions: usize,
    pub errors: usize,
}

/// Aggregate scores, percentages in [0, 100].
///
/// Overall and per-category accuracy cover multiple-choice and open-ended
/// questions. Grounded questions feed `miou`; knowledge pairs feed `knowledge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_overall: Option<f64>,
    pub accuracy_by_category: BTreeMap<String, CategoryScore>,
    pub miou: Option<f64>,
    pub knowledge: Option<KnowledgeBlock>,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64 * 100.0)
}

pub fn build_report(verdicts: &[Verdict], labels: &CategoryLabels) -> Result<EvalReport, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let known: std::collections::BTreeSet<(&str, &str)> = verdicts.iter().map(Verdict::key).collect();
    if let Some((v, q)) = labels.keys().find(|(v, q)| !known.contains(&(v.as_str(), q.as_str()))) {
        return Err(EvalError::UnknownCategoryLabel { video_id: v.clone(), question_id: q.clone() });
    }

    let mut counts = Counts { total: verdicts.len(), ..Counts::default() };
    let mut by_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut ious = Vec::new();
    let (mut pre, mut post) = ((0, 0), (0, 0));

    for v in verdicts {
        counts.abstentions += usize::from(v.abstained);
        counts.errors += usize::from(v.error.is_some());
        let correct = v.score.is_correct();
        match (v.kind, v.score) {
            (QuestionKind::GroundedQa, score) => {
                counts.grounded += 1;
                ious.push(match score {
                    Score::Iou(x) => Some(x),
                    Score::Correct(_) => None,
                });
            }
            (QuestionKind::KnowledgePair, _) => {
                let slot = if v.pair_role == PairRole::Pre { &mut pre } else { &mut post };
                slot.0 += usize::from(correct);
                slot.1 += 1;
            }
            _ => {
                counts.accuracy_scored += 1;
                counts.correct += usize::from(correct);
                let label = labels
                    .get(&(v.video_id.clone(), v.question_id.clone()))
                    .or(v.category.as_ref());
                if let Some(label) = label {
                    let e = by_cat.entry(label.clone()).or_default();
                    e.0 += usize::from(correct);
                    e.1 += 1;
                }
            }
        }
    }
    counts.knowledge_pre = pre.1;
    counts.knowledge_post = post.1;

    let knowledge = match (percent(pre.0, pre.1), percent(post.0, post.1)) {
        (Some(acc_pre), Some(acc_post)) => {
            let (delta, note) = match delta_knowledge(acc_pre, acc_post) {
                Ok(d) => (Some(d), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Some(KnowledgeBlock { acc_pre, acc_post, delta_knowledge: delta, note })
        }
        _ => None,
    };

    Ok(EvalReport {
        accuracy_overall: percent(counts.correct, counts.accuracy_scored),
        accuracy_by_category: by_cat
            .into_iter()
            .map(|(k, (c, t))| (k, CategoryScore { accuracy: c as f64 / t as f64 * 100.0, correct: c, total: t }))
            .collect(),
        miou: if ious.is_empty() { None } else { mean_iou(&ious).ok() },
        knowledge,
        counts,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportRecord {
    Verdict {
        report_version: u32,
        #[serde(flatten)]
        verdict: Verdict,
    },
    Aggregate {
        report_version: u32,
        #[serde(flatten)]
        report: EvalReport,
    },
}

/// One JSON line per verdict, then one aggregate line.
pub fn report_jsonl(verdicts: &[Verdict], report: &EvalReport) -> String {
    let mut out = String::new();
    for v in verdicts {
        let rec = ReportRecord::Verdict { report_version: REPORT_VERSION, verdict: v.clone() };
        out.push_str(&serde_json::to_string(&rec).expect("verdicts serialize"));
        out.push('\n');
    }
    let agg = ReportRecord::Aggregate { report_version: REPORT_VERSION, report: report.clone() };
    out.push_str(&serde_json::to_string(&agg).expect("reports serialize"));
    out.push('\n');
    out
}

#[derive(Debug, Error)]
pub enum ReportReadError {
    #[error("cannot read report: {0}")]
    Io(#[from] std::io::Error),
    #[error("report line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Parse a `report.jsonl` back into verdicts and the aggregate.
pub fn read_report_jsonl(text: &str) -> Result<(Vec<Verdict>, Option<EvalReport>), ReportReadError> {
    let mut verdicts = Vec::new();
    let mut aggregate = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ReportRecord =
            serde_json::from_str(line).map_err(|e| ReportReadError::Malformed { line: i + 1, reason: e.to_string() })?;
        match rec {
            ReportRecord::Verdict { report_version, .. } | ReportRecord::Aggregate { report_version, .. }
                if report_version != REPORT_VERSION =>
            {
                return Err(ReportReadError::Malformed {
                    line: i + 1,
                    reason: format!("unsupported report_version {report_version}"),
                })
            }
            ReportRecord::Verdict { verdict, .. } => verdicts.push(verdict),
            ReportRecord::Aggregate { report, .. } => aggregate = Some(report),
        }
    }
    Ok((verdicts, aggregate))
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text summary table.
pub fn summary_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let c = &report.counts;
    let _ = writeln!(s, "# vidlang summary v{REPORT_VERSION}");
    let _ = writeln!(s, "{:<28} {:>8} {:>9}", "metric", "value", "n");
    let _ = writeln!(s, "{:<28} {:>8} {:>9}", "accuracy", cell(report.accuracy_overall), c.accuracy_scored);
    for (name, cat) in &report.accuracy_by_category {
        let _ = writeln!(s, "{:<28} {:>8} {:>9}", format!("  {name}"), cell(Some(cat.accuracy)), cat.total);
    }
    let _ = writeln!(s, "{:<28} {:>8} {:>9}", "miou", cell(report.miou), c.grounded);
    if let Some(k) = &report.knowledge {
        let _ = writeln!(s, "{:<28} {:>8} {:>9}", "acc_pre", cell(Some(k.acc_pre)), c.knowledge_pre);
        let _ = writeln!(s, "{:<28} {:>8} {:>9}", "acc_post", cell(Some(k.acc_post)), c.knowledge_post);
        let _ = writeln!(s, "{:<28} {:>8} {:>9}", "delta_knowledge", cell(k.delta_knowledge), "");
        if let Some(note) = &k.note {
            let _ = writeln!(s, "  note: {note}");
        }
    }
    let _ = writeln!(s, "{:<28} {:>8} {:>9}", "abstentions", c.abstentions, c.total);
    let _ = writeln!(s, "{:<28} {:>8} {:>9}", "errors", c.errors, c.total);
    s
}

/// Write `report.jsonl` and `summary.txt` into `dir`.
pub fn write_report(dir: &Path, verdicts: &[Verdict], report: &EvalReport) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.jsonl"), report_jsonl(verdicts, report).as_bytes())?;
    write_atomic(&dir.join("summary.txt"), summary_table(report).as_bytes())
}
