//! Task prompt templates.
//!
//! Templates live in `templates/*.v1.txt` and use `{Subtitles}`,
//! `{Captions}`, `{ClipLength}`, `{Question}`, `{Options}` as slot markers.
//! Slot values are substituted in a single pass, so a value that happens to
//! contain a marker is never expanded again.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Question, QuestionKind};
use crate::transcript::Transcript;

pub const MULTIPLE_CHOICE_V1: &str = include_str!("../templates/multiple_choice.v1.txt");
pub const OPEN_ENDED_V1: &str = include_str!("../templates/open_ended.v1.txt");
pub const GROUNDED_QA_V1: &str = include_str!("../templates/grounded_qa.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    MultipleChoice,
    OpenEnded,
    GroundedQa,
}

impl TemplateKind {
    pub fn for_question(kind: QuestionKind) -> Self {
        match kind {
            QuestionKind::MultipleChoice | QuestionKind::KnowledgePair => TemplateKind::MultipleChoice,
            QuestionKind::OpenEnded => TemplateKind::OpenEnded,
            QuestionKind::GroundedQa => TemplateKind::GroundedQa,
        }
    }

    fn accepts(self, kind: QuestionKind) -> bool {
        TemplateKind::for_question(kind) == self
    }

    fn slots(self) -> &'static [Slot] {
        match self {
            TemplateKind::MultipleChoice => &[Slot::Subtitles, Slot::Captions, Slot::ClipLength, Slot::Question, Slot::Options],
            _ => &[Slot::Subtitles, Slot::Captions, Slot::ClipLength, Slot::Question],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Subtitles,
    Captions,
    ClipLength,
    Question,
    Options,
}

impl Slot {
    const ALL: [Slot; 5] = [Slot::Subtitles, Slot::Captions, Slot::ClipLength, Slot::Question, Slot::Options];

    pub fn marker(self) -> &'static str {
        match self {
            Slot::Subtitles => "{Subtitles}",
            Slot::Captions => "{Captions}",
            Slot::ClipLength => "{ClipLength}",
            Slot::Question => "{Question}",
            Slot::Options => "{Options}",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template slot {marker} appears {count} times (expected {expected})")]
    BadTemplate { marker: &'static str, count: usize, expected: usize },
    #[error("question `{0}` has no options")]
    MissingOptions(String),
    #[error("a {question:?} question cannot use the {template:?} template")]
    IncompatibleKind { template: TemplateKind, question: QuestionKind },
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    pieces: Vec<Piece>,
}

/// Values for the slots of one prompt.
#[derive(Debug, Clone, Default)]
pub struct SlotValues<'a> {
    pub subtitles: &'a str,
    pub captions: &'a str,
    pub clip_length: String,
    pub question: &'a str,
    pub options: String,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: &str) -> Result<Self, PromptError> {
        for slot in Slot::ALL {
            let count = body.matches(slot.marker()).count();
            let expected = usize::from(kind.slots().contains(&slot));
            if count != expected {
                return Err(PromptError::BadTemplate { marker: slot.marker(), count, expected });
            }
        }
        let mut pieces = Vec::new();
        let mut rest = body;
        while let Some((pos, slot)) = Slot::ALL
            .iter()
            .filter_map(|s| rest.find(s.marker()).map(|p| (p, *s)))
            .min_by_key(|(p, _)| *p)
        {
            if pos > 0 {
                pieces.push(Piece::Text(rest[..pos].to_string()));
            }
            pieces.push(Piece::Slot(slot));
            rest = &rest[pos + slot.marker().len()..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self { kind, pieces })
    }

    pub fn builtin(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::MultipleChoice => MULTIPLE_CHOICE_V1,
            TemplateKind::OpenEnded => OPEN_ENDED_V1,
            TemplateKind::GroundedQa => GROUNDED_QA_V1,
        };
        Self::new(kind, body).expect("bundled templates are well formed")
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn render(&self, values: &SlotValues<'_>) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::Subtitles) => out.push_str(values.subtitles),
                Piece::Slot(Slot::Captions) => out.push_str(values.captions),
                Piece::Slot(Slot::ClipLength) => out.push_str(&values.clip_length),
                Piece::Slot(Slot::Question) => out.push_str(values.question),
                Piece::Slot(Slot::Options) => out.push_str(&values.options),
            }
        }
        out
    }
}

/// Whole seconds print as integers, anything else with one decimal.
pub fn format_clip_length(seconds: f64) -> String {
    if seconds.fract() == 0.0 && seconds.abs() < 1e15 {
        format!("{}", seconds as i64)
    } else {
        format!("{seconds:.1}")
    }
}

/// Options as `A. text` lines.
pub fn format_options(question: &Question) -> String {
    question
        .options
        .iter()
        .map(|o| format!("{}. {}", o.letter, o.text.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(kind: TemplateKind, transcript: &Transcript, question: &Question) -> Result<String, PromptError> {
    render_with(&PromptTemplate::builtin(kind), transcript, question)
}

pub fn render_with(template: &PromptTemplate, transcript: &Transcript, question: &Question) -> Result<String, PromptError> {
    if !template.kind.accepts(question.kind) {
        return Err(PromptError::IncompatibleKind { template: template.kind, question: question.kind });
    }
    if template.kind == TemplateKind::MultipleChoice && question.options.is_empty() {
        return Err(PromptError::MissingOptions(question.question_id.clone()));
    }
    Ok(template.render(&SlotValues {
        subtitles: &transcript.subtitle_block,
        captions: &transcript.caption_block,
        clip_length: format_clip_length(transcript.clip_length),
        question: question.text.trim(),
        options: format_options(question),
    }))
}
