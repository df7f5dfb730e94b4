//! Videos, questions, and the timestamped text units derived from them.
//!
//! Manifests are stored one video per line as JSON records (see
//! `docs/manifest.md`). Every record carries `schema_version`; unknown fields
//! are rejected so typos in large benchmark files fail loudly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current manifest record schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Suffixes pairing the two halves of a knowledge-acquisition question.
pub const PRE_SUFFIX: &str = "::pre";
pub const POST_SUFFIX: &str = "::post";

/// A closed-open time span in seconds. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end.partial_cmp(&self.start) != Some(std::cmp::Ordering::Greater)
    }
}

impl From<(f64, f64)> for Interval {
    fn from((start, end): (f64, f64)) -> Self {
        Self { start, end }
    }
}

impl From<Interval> for (f64, f64) {
    fn from(i: Interval) -> Self {
        (i.start, i.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    MultipleChoice,
    OpenEnded,
    GroundedQa,
    KnowledgePair,
}

impl QuestionKind {
    pub fn has_options(self) -> bool {
        matches!(self, QuestionKind::MultipleChoice | QuestionKind::KnowledgePair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    Pre,
    Post,
    #[default]
    None,
}

impl PairRole {
    fn is_none(&self) -> bool {
        matches!(self, PairRole::None)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub letter: char,
    pub text: String,
}

/// Answer key. The variant must match the question kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruth {
    Letter(char),
    Text(String),
    Intervals(Vec<Interval>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub question_id: String,
    pub text: String,
    pub kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<AnswerOption>,
    pub ground_truth: GroundTruth,
    #[serde(default, skip_serializing_if = "PairRole::is_none")]
    pub pre_post_role: PairRole,
}

impl Question {
    pub fn option_letters(&self) -> Vec<char> {
        self.options.iter().map(|o| o.letter).collect()
    }

    /// Pair id of a knowledge-pair question (`q7::pre` -> `q7`).
    pub fn pair_id(&self) -> Option<&str> {
        self.question_id
            .strip_suffix(PRE_SUFFIX)
            .or_else(|| self.question_id.strip_suffix(POST_SUFFIX))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoManifest {
    pub video_id: String,
    pub media_uri: String,
    pub duration: f64,
    pub questions: Vec<Question>,
    pub category_labels: BTreeMap<String, String>,
}

/// On-disk line record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    schema_version: u32,
    video_id: String,
    media_uri: String,
    duration: f64,
    questions: Vec<Question>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    category_labels: BTreeMap<String, String>,
}

/// A timestamped span of transcribed speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleSegment {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

impl SubtitleSegment {
    pub fn new(start: f64, end: f64, text: impl Into<String>) -> Self {
        Self { start, end, text: text.into() }
    }
}

/// Caption of one planned clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCaption {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

impl ClipCaption {
    pub fn new(start: f64, end: f64, text: impl Into<String>) -> Self {
        Self { start, end, text: text.into() }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate video id `{video_id}`")]
    DuplicateVideoId { line: usize, video_id: String },
    #[error("video `{video_id}`: {violation}")]
    InvariantViolation { video_id: String, violation: Violation },
}

/// Which manifest invariant failed.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveDuration(f64),
    DuplicateQuestionId(String),
    UnknownCategoryTarget(String),
    Options { question_id: String, reason: String },
    GroundTruth { question_id: String, reason: String },
    Interval { question_id: String, start: f64, end: f64 },
    Pairing { question_id: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveDuration(d) => write!(f, "duration must be positive, got {d}"),
            Violation::DuplicateQuestionId(q) => write!(f, "duplicate question id `{q}`"),
            Violation::UnknownCategoryTarget(q) => {
                write!(f, "category label refers to unknown question `{q}`")
            }
            Violation::Options { question_id, reason } => {
                write!(f, "question `{question_id}`: options {reason}")
            }
            Violation::GroundTruth { question_id, reason } => {
                write!(f, "question `{question_id}`: ground truth {reason}")
            }
            Violation::Interval { question_id, start, end } => write!(
                f,
                "question `{question_id}`: interval [{start}, {end}] must satisfy 0 <= start < end <= duration"
            ),
            Violation::Pairing { question_id, reason } => {
                write!(f, "question `{question_id}`: {reason}")
            }
        }
    }
}

impl VideoManifest {
    pub fn question(&self, question_id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == question_id)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        self.check().map_err(|violation| ManifestError::InvariantViolation {
            video_id: self.video_id.clone(),
            violation,
        })
    }

    fn check(&self) -> Result<(), Violation> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Violation::NonPositiveDuration(self.duration));
        }
        let mut ids = HashSet::new();
        for q in &self.questions {
            if !ids.insert(q.question_id.as_str()) {
                return Err(Violation::DuplicateQuestionId(q.question_id.clone()));
            }
        }
        for qid in self.category_labels.keys() {
            if !ids.contains(qid.as_str()) {
                return Err(Violation::UnknownCategoryTarget(qid.clone()));
            }
        }
        for q in &self.questions {
            self.check_question(q, &ids)?;
        }
        Ok(())
    }

    fn check_question(&self, q: &Question, ids: &HashSet<&str>) -> Result<(), Violation> {
        let qid = || q.question_id.clone();
        if q.kind.has_options() {
            if q.options.len() < 2 {
                return Err(Violation::Options { question_id: qid(), reason: "need at least 2 entries".into() });
            }
            if q.options.len() > 26 {
                return Err(Violation::Options { question_id: qid(), reason: "more than 26 entries".into() });
            }
            for (i, opt) in q.options.iter().enumerate() {
                let expected = (b'A' + i as u8) as char;
                if opt.letter != expected {
                    return Err(Violation::Options {
                        question_id: qid(),
                        reason: format!("letter #{} is `{}`, expected `{expected}`", i + 1, opt.letter),
                    });
                }
            }
            match &q.ground_truth {
                GroundTruth::Letter(l) if q.options.iter().any(|o| o.letter == *l) => {}
                GroundTruth::Letter(l) => {
                    return Err(Violation::GroundTruth { question_id: qid(), reason: format!("letter `{l}` is not an option") })
                }
                _ => {
                    return Err(Violation::GroundTruth { question_id: qid(), reason: "must be a letter".into() })
                }
            }
        } else if !q.options.is_empty() {
            return Err(Violation::Options { question_id: qid(), reason: "only allowed for choice questions".into() });
        }

        match q.kind {
            QuestionKind::OpenEnded => {
                if !matches!(q.ground_truth, GroundTruth::Text(_)) {
                    return Err(Violation::GroundTruth { question_id: qid(), reason: "must be text".into() });
                }
            }
            QuestionKind::GroundedQa => {
                let GroundTruth::Intervals(ivs) = &q.ground_truth else {
                    return Err(Violation::GroundTruth { question_id: qid(), reason: "must be an interval list".into() });
                };
                if ivs.is_empty() {
                    return Err(Violation::GroundTruth { question_id: qid(), reason: "interval list is empty".into() });
                }
                for iv in ivs {
                    let ok = iv.start.is_finite()
                        && iv.end.is_finite()
                        && 0.0 <= iv.start
                        && iv.start < iv.end
                        && iv.end <= self.duration;
                    if !ok {
                        return Err(Violation::Interval { question_id: qid(), start: iv.start, end: iv.end });
                    }
                }
            }
            _ => {}
        }

        match (q.kind, q.pre_post_role) {
            (QuestionKind::KnowledgePair, PairRole::None) => Err(Violation::Pairing {
                question_id: qid(),
                reason: "knowledge pair question needs pre_post_role".into(),
            }),
            (QuestionKind::KnowledgePair, role) => {
                let (own, other) = match role {
                    PairRole::Pre => (PRE_SUFFIX, POST_SUFFIX),
                    _ => (POST_SUFFIX, PRE_SUFFIX),
                };
                let Some(pair) = q.question_id.strip_suffix(own) else {
                    return Err(Violation::Pairing {
                        question_id: qid(),
                        reason: format!("id must end with `{own}`"),
                    });
                };
                let partner = format!("{pair}{other}");
                if !ids.contains(partner.as_str()) {
                    return Err(Violation::Pairing {
                        question_id: qid(),
                        reason: format!("missing partner `{partner}`"),
                    });
                }
                let partner_kind = self.question(&partner).map(|p| p.kind);
                if partner_kind != Some(QuestionKind::KnowledgePair) {
                    return Err(Violation::Pairing {
                        question_id: qid(),
                        reason: format!("partner `{partner}` is not a knowledge pair question"),
                    });
                }
                Ok(())
            }
            (_, PairRole::None) => Ok(()),
            _ => Err(Violation::Pairing {
                question_id: qid(),
                reason: "pre_post_role is only valid for knowledge pair questions".into(),
            }),
        }
    }

    /// One manifest line (no trailing newline).
    pub fn to_record_line(&self) -> String {
        let rec = ManifestRecord {
            schema_version: SCHEMA_VERSION,
            video_id: self.video_id.clone(),
            media_uri: self.media_uri.clone(),
            duration: self.duration,
            questions: self.questions.clone(),
            category_labels: self.category_labels.clone(),
        };
        serde_json::to_string(&rec).expect("manifest records always serialize")
    }

    /// Parse and validate a single record line.
    pub fn from_record_line(line: &str) -> Result<Self, ManifestError> {
        parse_line(1, line)
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<VideoManifest, ManifestError> {
    let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| ManifestError::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    if rec.schema_version != SCHEMA_VERSION {
        return Err(ManifestError::MalformedRecord {
            line: line_no,
            reason: format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", rec.schema_version),
        });
    }
    let manifest = VideoManifest {
        video_id: rec.video_id,
        media_uri: rec.media_uri,
        duration: rec.duration,
        questions: rec.questions,
        category_labels: rec.category_labels,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Load and validate a line-delimited manifest file. Blank lines are skipped.
pub fn load_manifests(path: impl AsRef<Path>) -> Result<Vec<VideoManifest>, ManifestError> {
    let path = path.as_ref();
    let io_err = |source| ManifestError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    read_manifests(BufReader::new(file)).map_err(|e| match e {
        ManifestError::Io { source, .. } => io_err(source),
        other => other,
    })
}

pub fn read_manifests(reader: impl BufRead) -> Result<Vec<VideoManifest>, ManifestError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => ManifestError::MalformedRecord {
                line: line_no,
                reason: "not valid UTF-8".into(),
            },
            _ => ManifestError::Io { path: PathBuf::new(), source: e },
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let m = parse_line(line_no, &line)?;
        if !seen.insert(m.video_id.clone()) {
            return Err(ManifestError::DuplicateVideoId { line: line_no, video_id: m.video_id });
        }
        out.push(m);
    }
    Ok(out)
}

pub fn write_manifests(path: impl AsRef<Path>, manifests: &[VideoManifest]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for m in manifests {
        writeln!(buf, "{}", m.to_record_line())?;
    }
    crate::fsutil::write_atomic(path.as_ref(), &buf)
}

/// Sort, drop blank or degenerate segments, and merge overlaps.
///
/// Overlapping segments collapse into their envelope with texts joined by a
/// single space. Segments that merely touch (`end == next.start`) are kept
/// apart. Negative starts are clamped to 0.
pub fn normalize_subtitles(raw: &[SubtitleSegment]) -> Vec<SubtitleSegment> {
    let mut segs: Vec<SubtitleSegment> = raw
        .iter()
        .filter_map(|s| {
            let text = s.text.trim();
            let start = s.start.max(0.0);
            let ok = !text.is_empty() && start.is_finite() && s.end.is_finite() && start < s.end;
            ok.then(|| SubtitleSegment::new(start, s.end, text))
        })
        .collect();
    segs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));

    let mut out: Vec<SubtitleSegment> = Vec::with_capacity(segs.len());
    for seg in segs {
        match out.last_mut() {
            Some(prev) if seg.start < prev.end => {
                prev.end = prev.end.max(seg.end);
                prev.text.push(' ');
                prev.text.push_str(&seg.text);
            }
            _ => out.push(seg),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mcq(id: &str, gold: char) -> Question {
        Question {
            question_id: id.into(),
            text: "What is shown?".into(),
            kind: QuestionKind::MultipleChoice,
            options: vec![
                AnswerOption { letter: 'A', text: "a cat".into() },
                AnswerOption { letter: 'B', text: "a dog".into() },
            ],
            ground_truth: GroundTruth::Letter(gold),
            pre_post_role: PairRole::None,
        }
    }

    fn video(questions: Vec<Question>) -> VideoManifest {
        VideoManifest {
            video_id: "v1".into(),
            media_uri: "file:///v1.mp4".into(),
            duration: 10.0,
            questions,
            category_labels: BTreeMap::new(),
        }
    }

    #[test]
    fn loads_one_video_with_two_mcq() {
        let v = video(vec![mcq("q1", 'A'), mcq("q2", 'B')]);
        let text = format!("{}\n\n", v.to_record_line());
        let got = read_manifests(text.as_bytes()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].questions.len(), 2);
    }

    #[test]
    fn grounded_interval_inside_duration_is_accepted() {
        let line = r#"{"schema_version":1,"video_id":"g","media_uri":"x","duration":10,"questions":[{"question_id":"q","text":"where?","kind":"grounded_qa","ground_truth":{"intervals":[[5,7]]}}]}"#;
        let m = VideoManifest::from_record_line(line).unwrap();
        assert_eq!(m.questions[0].ground_truth, GroundTruth::Intervals(vec![Interval::new(5.0, 7.0)]));
    }

    #[test]
    fn inverted_interval_is_an_invariant_violation() {
        let line = r#"{"schema_version":1,"video_id":"g","media_uri":"x","duration":10,"questions":[{"question_id":"q","text":"where?","kind":"grounded_qa","ground_truth":{"intervals":[[8,5]]}}]}"#;
        let err = VideoManifest::from_record_line(line).unwrap_err();
        assert!(matches!(err, ManifestError::InvariantViolation { violation: Violation::Interval { .. }, .. }), "{err}");
    }

    #[test]
    fn rejects_unknown_fields_and_bad_versions() {
        let unknown = r#"{"schema_version":1,"video_id":"g","media_uri":"x","duration":10,"questions":[],"extra":1}"#;
        assert!(matches!(VideoManifest::from_record_line(unknown), Err(ManifestError::MalformedRecord { .. })));
        let version = r#"{"schema_version":9,"video_id":"g","media_uri":"x","duration":10,"questions":[]}"#;
        assert!(matches!(VideoManifest::from_record_line(version), Err(ManifestError::MalformedRecord { .. })));
    }

    #[test]
    fn reports_line_numbers_and_duplicates() {
        let v = video(vec![mcq("q1", 'A')]);
        let text = format!("{0}\nnot json\n", v.to_record_line());
        match read_manifests(text.as_bytes()) {
            Err(ManifestError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = format!("{0}\n{0}\n", v.to_record_line());
        assert!(matches!(read_manifests(text.as_bytes()), Err(ManifestError::DuplicateVideoId { line: 2, .. })));
    }

    #[test]
    fn option_letters_must_run_from_a() {
        let mut q = mcq("q1", 'A');
        q.options[1].letter = 'C';
        assert!(video(vec![q]).validate().is_err());
        let mut q = mcq("q1", 'A');
        q.options.truncate(1);
        assert!(video(vec![q]).validate().is_err());
        assert!(video(vec![mcq("q1", 'Z')]).validate().is_err());
    }

    #[test]
    fn duplicate_question_ids_and_dangling_labels_fail() {
        assert!(video(vec![mcq("q1", 'A'), mcq("q1", 'B')]).validate().is_err());
        let mut v = video(vec![mcq("q1", 'A')]);
        v.category_labels.insert("nope".into(), "Temporal Reasoning".into());
        assert!(v.validate().is_err());
        v.duration = 0.0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn knowledge_pairs_need_both_halves() {
        let mut pre = mcq("k1::pre", 'A');
        pre.kind = QuestionKind::KnowledgePair;
        pre.pre_post_role = PairRole::Pre;
        let mut post = mcq("k1::post", 'B');
        post.kind = QuestionKind::KnowledgePair;
        post.pre_post_role = PairRole::Post;
        assert!(video(vec![pre.clone(), post.clone()]).validate().is_ok());
        assert_eq!(pre.pair_id(), Some("k1"));
        assert!(video(vec![pre.clone()]).validate().is_err());
        let mut wrong = post.clone();
        wrong.pre_post_role = PairRole::Pre;
        assert!(video(vec![pre, wrong]).validate().is_err());
    }

    #[test]
    fn normalize_examples() {
        assert!(normalize_subtitles(&[]).is_empty());
        let merged = normalize_subtitles(&[SubtitleSegment::new(0.0, 2.0, "a"), SubtitleSegment::new(1.0, 3.0, "b")]);
        assert_eq!(merged, vec![SubtitleSegment::new(0.0, 3.0, "a b")]);
        let sorted = normalize_subtitles(&[SubtitleSegment::new(5.0, 6.0, "x"), SubtitleSegment::new(0.0, 1.0, "y")]);
        assert_eq!(sorted, vec![SubtitleSegment::new(0.0, 1.0, "y"), SubtitleSegment::new(5.0, 6.0, "x")]);
        let blanks = normalize_subtitles(&[SubtitleSegment::new(0.0, 1.0, "  "), SubtitleSegment::new(2.0, 2.0, "z")]);
        assert!(blanks.is_empty());
    }

    fn arb_segments() -> impl Strategy<Value = Vec<SubtitleSegment>> {
        prop::collection::vec(
            (0u32..100, 1u32..20, "[a-c ]{0,4}").prop_map(|(s, len, t)| {
                SubtitleSegment::new(s as f64 / 2.0, (s + len) as f64 / 2.0, t)
            }),
            0..30,
        )
    }

    fn arb_question(idx: usize) -> impl Strategy<Value = Question> {
        (2usize..6, "[a-z ]{1,12}", 0usize..6, prop::bool::ANY).prop_map(move |(n, text, gold, grounded)| {
            if grounded {
                Question {
                    question_id: format!("q{idx}"),
                    text,
                    kind: QuestionKind::GroundedQa,
                    options: vec![],
                    ground_truth: GroundTruth::Intervals(vec![Interval::new(1.5, 4.0)]),
                    pre_post_role: PairRole::None,
                }
            } else {
                Question {
                    question_id: format!("q{idx}"),
                    text: text.clone(),
                    kind: QuestionKind::MultipleChoice,
                    options: (0..n)
                        .map(|i| AnswerOption { letter: (b'A' + i as u8) as char, text: format!("{text}{i}") })
                        .collect(),
                    ground_truth: GroundTruth::Letter((b'A' + (gold % n) as u8) as char),
                    pre_post_role: PairRole::None,
                }
            }
        })
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_monotone(raw in arb_segments()) {
            let once = normalize_subtitles(&raw);
            let twice = normalize_subtitles(&once);
            prop_assert_eq!(&once, &twice);
            for w in once.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }

        #[test]
        fn manifest_lines_round_trip(
            qs in (0usize..4).prop_flat_map(|n| (0..n).map(arb_question).collect::<Vec<_>>()),
            dur in 5.0f64..5000.0,
            label in prop::option::of("[A-Za-z ]{1,10}"),
        ) {
            let mut v = video(qs);
            v.duration = dur;
            if let (Some(label), Some(q)) = (label, v.questions.first()) {
                v.category_labels.insert(q.question_id.clone(), label);
            }
            let back = VideoManifest::from_record_line(&v.to_record_line()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
