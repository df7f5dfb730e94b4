//! Token counting.
//!
//! Two counters are available: a character heuristic (`ceil(chars / 4)`) and a
//! byte-pair-encoding counter driven by a merges file (format in
//! `docs/bpe_vocabulary.md`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("cannot load BPE vocabulary {path}: {reason}")]
pub struct VocabularyLoadFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterKind {
    #[default]
    HeuristicCharQuarter,
    VocabularyBpe,
}

/// Counter selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterSpec {
    #[serde(default)]
    pub kind: CounterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_uri: Option<PathBuf>,
}

impl CounterSpec {
    pub fn build(&self) -> Result<TokenCounter, VocabularyLoadFailure> {
        match (self.kind, &self.vocabulary_uri) {
            (CounterKind::HeuristicCharQuarter, _) => Ok(TokenCounter::Heuristic),
            (CounterKind::VocabularyBpe, Some(path)) => Ok(TokenCounter::Bpe(Arc::new(BpeVocabulary::load(path)?))),
            (CounterKind::VocabularyBpe, None) => Err(VocabularyLoadFailure {
                path: PathBuf::new(),
                reason: "vocabulary_uri is required for the BPE counter".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum TokenCounter {
    #[default]
    Heuristic,
    Bpe(Arc<BpeVocabulary>),
}

impl TokenCounter {
    pub fn count(&self, text: &str) -> usize {
        match self {
            TokenCounter::Heuristic => text.chars().count().div_ceil(4),
            TokenCounter::Bpe(vocab) => vocab.count(text),
        }
    }

    pub fn kind(&self) -> CounterKind {
        match self {
            TokenCounter::Heuristic => CounterKind::HeuristicCharQuarter,
            TokenCounter::Bpe(_) => CounterKind::VocabularyBpe,
        }
    }
}

/// Merge table of a byte-pair encoder.
///
/// Symbols are Unicode scalar values; space, newline, and tab are spelled
/// `Ġ`, `Ċ`, `ĉ` in the merges file.
#[derive(Debug)]
pub struct BpeVocabulary {
    ranks: HashMap<(String, String), usize>,
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("static regex")
    })
}

fn visible(c: char) -> char {
    match c {
        ' ' => 'Ġ',
        '\n' => 'Ċ',
        '\t' => 'ĉ',
        other => other,
    }
}

impl BpeVocabulary {
    pub fn load(path: &Path) -> Result<Self, VocabularyLoadFailure> {
        let fail = |reason: String| VocabularyLoadFailure { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        Self::parse(&text).map_err(fail)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut ranks = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    let rank = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(format!("line {}: expected `<left> <right>`", idx + 1)),
            }
        }
        Ok(Self { ranks })
    }

    pub fn merges(&self) -> usize {
        self.ranks.len()
    }

    pub fn count(&self, text: &str) -> usize {
        pretokenizer().find_iter(text).map(|m| self.encode_piece(m.as_str()).len()).sum()
    }

    /// Apply merges to one pre-token, lowest rank first.
    pub fn encode_piece(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece.chars().map(|c| visible(c).to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}
