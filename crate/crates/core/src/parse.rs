//! Parsing model output: answer letters and interval lists.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_INTERVALS: usize = 5;

/// Letter extraction only looks at this many trailing characters for the
/// answer patterns; final answers sit at the end of long outputs.
const TAIL_CHARS: usize = 400;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no answer letter found")]
pub struct NoAnswerFound;

fn answer_patterns() -> &'static [Regex] {
    static RES: OnceLock<Vec<Regex>> = OnceLock::new();
    RES.get_or_init(|| {
        [
            r"(?i)answer\s+is\s*[:\-]?\s*\**\s*\(?\s*([A-Za-z])\s*\)?(?:[^A-Za-z]|$)",
            r"(?i)answer\s*:\s*\**\s*\(?\s*([A-Za-z])\s*\)?(?:[^A-Za-z]|$)",
            r"\(([A-Z])\)",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("static regex"))
        .collect()
    })
}

fn standalone_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").expect("static regex"))
}

fn tail(text: &str) -> &str {
    let n = text.chars().count();
    if n <= TAIL_CHARS {
        return text;
    }
    let (idx, _) = text.char_indices().nth(n - TAIL_CHARS).expect("index in range");
    &text[idx..]
}

/// Extract a choice letter.
///
/// Rules, in order: the whole trimmed text is one allowed letter (optionally
/// wrapped as `(B)`, `B.` or `B)`); an answer phrase (`answer is X`,
/// `answer: X`, `(X)`) in the tail of the text; the first standalone allowed
/// capital letter anywhere.
pub fn parse_letter(text: &str, allowed: &[char]) -> Result<char, NoAnswerFound> {
    let ok = |c: char| allowed.contains(&c);
    let trimmed = text.trim();
    let bare = trimmed.trim_start_matches('(').trim_end_matches(['.', ')']).trim();
    let mut chars = bare.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        let c = c.to_ascii_uppercase();
        if ok(c) {
            return Ok(c);
        }
    }

    let tail = tail(trimmed);
    for re in answer_patterns() {
        for caps in re.captures_iter(tail) {
            let c = caps[1].chars().next().map(|c| c.to_ascii_uppercase());
            if let Some(c) = c.filter(|c| ok(*c)) {
                return Ok(c);
            }
        }
    }

    standalone_letter()
        .captures_iter(trimmed)
        .filter_map(|c| c[1].chars().next())
        .find(|c| ok(*c))
        .ok_or(NoAnswerFound)
}

/// Up to five `[start, end]` spans in whole seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalPrediction {
    pub intervals: Vec<(u64, u64)>,
}

impl fmt::Display for IntervalPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, (s, e)) in self.intervals.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "[{s}, {e}]")?;
        }
        f.write_str("]")
    }
}

impl IntervalPrediction {
    pub fn to_intervals(&self) -> Vec<crate::manifest::Interval> {
        self.intervals.iter().map(|&(s, e)| crate::manifest::Interval::new(s as f64, e as f64)).collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IntervalParseError {
    #[error("cannot parse intervals at byte {at}: {reason}")]
    ParseFailure { at: usize, reason: &'static str },
    #[error("{0} intervals given, at most {MAX_INTERVALS} allowed")]
    TooManyIntervals(usize),
    #[error("no intervals given")]
    EmptyPrediction,
    #[error("bound `{0}` is not a non-negative integer")]
    NonIntegerBound(String),
    #[error("interval [{0}, {1}] does not have start < end")]
    InvertedInterval(u64, u64),
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

struct Cursor<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && is_ws(self.src[self.pos]) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn fail(&self, reason: &'static str) -> IntervalParseError {
        IntervalParseError::ParseFailure { at: self.pos, reason }
    }

    fn expect(&mut self, b: u8, reason: &'static str) -> Result<(), IntervalParseError> {
        self.skip_ws();
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.fail(reason))
        }
    }

    /// A number-like token: digits with an optional sign, fraction, or
    /// exponent. Anything but plain digits is a non-integer bound.
    fn bound(&mut self) -> Result<u64, IntervalParseError> {
        self.skip_ws();
        let start = self.pos;
        let number_byte = |b: u8| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E');
        while self.peek().is_some_and(number_byte) {
            self.pos += 1;
        }
        let token = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii token");
        if token.is_empty() {
            return Err(self.fail("expected an integer"));
        }
        if !token.bytes().all(|b| b.is_ascii_digit()) {
            return Err(IntervalParseError::NonIntegerBound(token.to_string()));
        }
        token.parse().map_err(|_| IntervalParseError::NonIntegerBound(token.to_string()))
    }
}

/// Strict parser for `[[s, e], [s, e], ...]`.
///
/// Grammar (whitespace is space, tab, CR, LF):
///
/// ```text
/// prediction := ws '[' ws pair (ws ',' ws pair)* ws ']' ws
/// pair       := '[' ws uint ws ',' ws uint ws ']'
/// uint       := [0-9]+
/// ```
///
/// `[]` is an empty prediction rather than a syntax error.
pub fn parse_intervals(text: &str) -> Result<IntervalPrediction, IntervalParseError> {
    let mut cur = Cursor { src: text.as_bytes(), pos: 0 };
    cur.expect(b'[', "expected `[`")?;
    cur.skip_ws();
    if cur.peek() == Some(b']') {
        cur.pos += 1;
        cur.skip_ws();
        return if cur.pos == cur.src.len() {
            Err(IntervalParseError::EmptyPrediction)
        } else {
            Err(cur.fail("trailing characters"))
        };
    }
    let mut intervals = Vec::new();
    loop {
        cur.expect(b'[', "expected `[` opening an interval")?;
        let s = cur.bound()?;
        cur.expect(b',', "expected `,` between bounds")?;
        let e = cur.bound()?;
        cur.expect(b']', "expected `]` closing an interval")?;
        intervals.push((s, e));
        cur.skip_ws();
        match cur.peek() {
            Some(b',') => cur.pos += 1,
            Some(b']') => {
                cur.pos += 1;
                break;
            }
            _ => return Err(cur.fail("expected `,` or `]`")),
        }
    }
    cur.skip_ws();
    if cur.pos != cur.src.len() {
        return Err(cur.fail("trailing characters"));
    }
    if intervals.len() > MAX_INTERVALS {
        return Err(IntervalParseError::TooManyIntervals(intervals.len()));
    }
    if let Some(&(s, e)) = intervals.iter().find(|(s, e)| s >= e) {
        return Err(IntervalParseError::InvertedInterval(s, e));
    }
    Ok(IntervalPrediction { intervals })
}

/// Open-ended answers: trimmed of surrounding whitespace and punctuation.
pub fn clean_open_answer(text: &str) -> String {
    text.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ABCD: [char; 4] = ['A', 'B', 'C', 'D'];

    #[test]
    fn letter_examples() {
        assert_eq!(parse_letter("B", &ABCD), Ok('B'));
        assert_eq!(parse_letter("  (c). ", &ABCD), Ok('C'));
        assert_eq!(parse_letter("The answer is: C", &ABCD), Ok('C'));
        assert_eq!(parse_letter("I believe (D) because it fits.", &ABCD), Ok('D'));
        assert_eq!(parse_letter("no idea", &ABCD), Err(NoAnswerFound));
        assert_eq!(parse_letter("The answer is: E", &ABCD), Err(NoAnswerFound));
    }

    #[test]
    fn answer_phrase_beats_earlier_mentions() {
        let text = "Option A is wrong and (B) is tempting. After checking, the answer is C.";
        assert_eq!(parse_letter(text, &ABCD), Ok('C'));
    }

    #[test]
    fn interval_examples() {
        assert_eq!(parse_intervals("[[5, 7]]").unwrap().intervals, vec![(5, 7)]);
        assert_eq!(parse_intervals(" [[200, 207], [209, 213], [214, 220]]\n").unwrap().intervals.len(), 3);
        assert_eq!(
            parse_intervals("[[1,2],[3,4],[5,6],[7,8],[9,10],[11,12]]"),
            Err(IntervalParseError::TooManyIntervals(6))
        );
        assert_eq!(parse_intervals("[[7, 5]]"), Err(IntervalParseError::InvertedInterval(7, 5)));
        assert_eq!(parse_intervals("[[5, 5]]"), Err(IntervalParseError::InvertedInterval(5, 5)));
        assert_eq!(parse_intervals("[[5.5, 7]]"), Err(IntervalParseError::NonIntegerBound("5.5".into())));
        assert_eq!(parse_intervals("[[-1, 7]]"), Err(IntervalParseError::NonIntegerBound("-1".into())));
        assert_eq!(parse_intervals("[]"), Err(IntervalParseError::EmptyPrediction));
        for bad in ["", "[[5, 7]", "[[5, 7],]", "[5, 7]", "[[5 7]]", "Answer: [[5, 7]]", "[[5, 7]] x", "[[5, 7]]]"] {
            assert!(matches!(parse_intervals(bad), Err(IntervalParseError::ParseFailure { .. })), "{bad:?}");
        }
        assert!(matches!(parse_intervals("[[99999999999999999999999, 1]]"), Err(IntervalParseError::NonIntegerBound(_))));
    }

    #[test]
    fn open_answers_are_trimmed() {
        assert_eq!(clean_open_answer("  blue.\n"), "blue");
        assert_eq!(clean_open_answer("\"a red kite\""), "a red kite");
    }

    proptest! {
        #[test]
        fn display_round_trips(ivs in prop::collection::vec((0u64..10_000, 1u64..500), 1..=5)) {
            let p = IntervalPrediction { intervals: ivs.iter().map(|&(s, l)| (s, s + l)).collect() };
            prop_assert_eq!(parse_intervals(&p.to_string()).unwrap(), p);
        }

        #[test]
        fn letters_stay_in_allowed(text in ".{0,80}", n in 1usize..6) {
            let allowed: Vec<char> = (0..n).map(|i| (b'A' + i as u8) as char).collect();
            if let Ok(c) = parse_letter(&text, &allowed) {
                prop_assert!(allowed.contains(&c));
            }
        }
    }
}
