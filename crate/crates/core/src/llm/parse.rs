use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_number, normalize_numeric, normalize_text, TaskKind};

/// Reason text used when a response is entirely blank.
pub const EMPTY_REASON: &str = "(empty response)";

static ANSWER_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(answer|topic)\s*:").unwrap());
static REASON_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\breason\s*:").unwrap());
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[\(\[]?([A-Za-z])[\)\]]?(?:[\s.,:;!]|$)").unwrap());
static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z])\)").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?(?:\d[\d,]*(?:\.\d+)?|\.\d+)").unwrap());

/// A normalized answer, or an abstention when none could be extracted.
/// Serialized as the label string or `null`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum Answer {
    Label(String),
    Abstain,
}

impl Answer {
    pub fn label(&self) -> Option<&str> {
        match self {
            Answer::Label(l) => Some(l),
            Answer::Abstain => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Answer::Abstain)
    }

    /// Exact match against a normalized gold label; abstentions never match.
    pub fn matches(&self, gold: &str) -> bool {
        self.label() == Some(gold)
    }
}

impl From<Option<String>> for Answer {
    fn from(v: Option<String>) -> Self {
        v.map_or(Answer::Abstain, Answer::Label)
    }
}

impl From<Answer> for Option<String> {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Label(l) => Some(l),
            Answer::Abstain => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Label(l) => f.write_str(l),
            Answer::Abstain => f.write_str("ABSTAIN"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub answer: Answer,
    /// Never empty.
    pub reason: String,
    pub raw: String,
}

/// Extract the answer and reasoning path from a model response. Total: anything
/// unparseable becomes [`Answer::Abstain`] with the raw text as the reason.
///
/// The answer is read from the line after the last `Answer:` / `Topic:` marker;
/// the reason is the text after the last `Reason:` marker.
pub fn parse_response(raw: &str, task: TaskKind) -> ParsedResponse {
    let answer_at = ANSWER_MARKER.find_iter(raw).last();
    let reason_at = REASON_MARKER.find_iter(raw).last();

    let answer = match answer_at {
        None => Answer::Abstain,
        Some(m) => {
            let rest = &raw[m.end()..];
            let mut line = rest.lines().next().unwrap_or("");
            if let Some(r) = REASON_MARKER.find(line) {
                line = &line[..r.start()];
            }
            extract_answer(line, task).map_or(Answer::Abstain, Answer::Label)
        }
    };

    let reason = reason_at
        .map(|r| {
            let mut tail = &raw[r.end()..];
            if let Some(a) = answer_at.filter(|a| a.start() > r.start()) {
                let line_start = raw[..a.start()].rfind('\n').map_or(0, |nl| nl + 1);
                let cut = if line_start > r.end() { line_start } else { a.start() };
                tail = &raw[r.end()..cut];
            }
            tail.trim().to_string()
        })
        .filter(|r| !r.is_empty())
        .unwrap_or_else(|| {
            if raw.trim().is_empty() {
                EMPTY_REASON.to_string()
            } else {
                raw.to_string()
            }
        });

    ParsedResponse {
        answer,
        reason,
        raw: raw.to_string(),
    }
}

fn extract_answer(line: &str, task: TaskKind) -> Option<String> {
    if task.is_multiple_choice() {
        let letter = LEADING_LETTER
            .captures(line)
            .or_else(|| PAREN_LETTER.captures(line))
            .map(|c| c[1].to_string())?;
        return task.normalize_label(&letter);
    }
    if task.label_space().is_none() {
        if let Some(m) = NUMBER.find_iter(line).last() {
            let digits: String = m.as_str().chars().filter(|&c| c != ',').collect();
            if let Some(n) = canonical_number(&digits) {
                return Some(n);
            }
        }
        let text = normalize_numeric(line);
        return (!text.is_empty()).then_some(text);
    }
    if let Some(label) = task.normalize_label(line) {
        return Some(label);
    }
    normalize_text(line)
        .split(|c: char| !(c.is_alphanumeric() || c == '/' || c == '-'))
        .filter(|w| !w.is_empty())
        .find_map(|w| task.normalize_label(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn multiple_choice_with_reason() {
        let p = parse_response("Answer: D\nReason: John cleans...", TaskKind::CommonsenseReasoning);
        assert_eq!(p.answer, Answer::Label("d".into()));
        assert_eq!(p.reason, "John cleans...");
    }

    #[test]
    fn topic_marker() {
        let p = parse_response("Topic: Technology\nReason: mentions OpenAI", TaskKind::TopicClassification);
        assert_eq!(p.answer, Answer::Label("technology".into()));
        assert_eq!(p.reason, "mentions OpenAI");
    }

    #[test]
    fn no_marker_abstains_with_raw_reason() {
        let raw = "I think the answer is (B) because...";
        let p = parse_response(raw, TaskKind::CommonsenseReasoning);
        assert_eq!(p.answer, Answer::Abstain);
        assert_eq!(p.reason, raw);
    }

    #[test]
    fn last_marker_wins() {
        let raw = "The response should follow the format: Answer: {A, B, C, D or E}\nLet me think.\nAnswer: (C) library\nReason: books gather dust";
        let p = parse_response(raw, TaskKind::CommonsenseReasoning);
        assert_eq!(p.answer, Answer::Label("c".into()));
        assert_eq!(p.reason, "books gather dust");
    }

    #[test]
    fn reason_before_answer_is_cut() {
        let raw = "Reason: 3 apples plus 4 apples\nAnswer: 7";
        let p = parse_response(raw, TaskKind::MathematicalReasoning);
        assert_eq!(p.answer, Answer::Label("7".into()));
        assert_eq!(p.reason, "3 apples plus 4 apples");
    }

    #[test]
    fn math_takes_last_number() {
        let p = parse_response("Answer: 12 + 3 = 1,215.0 dollars\nReason: sum", TaskKind::MathematicalReasoning);
        assert_eq!(p.answer, Answer::Label("1215".into()));
    }

    #[test]
    fn yes_no_variants() {
        let qa = TaskKind::QuestionAnswering;
        assert_eq!(parse_response("Answer: No, it is not.", qa).answer, Answer::Label("no".into()));
        assert_eq!(parse_response("Answer: True", qa).answer, Answer::Label("yes".into()));
        assert_eq!(parse_response("Answer: perhaps", qa).answer, Answer::Abstain);
    }

    #[test]
    fn invalid_letter_abstains() {
        let p = parse_response("Answer: E\nReason: x", TaskKind::LogicalReasoning);
        assert_eq!(p.answer, Answer::Abstain);
    }

    #[test]
    fn blank_response() {
        let p = parse_response("   ", TaskKind::TopicClassification);
        assert_eq!(p.answer, Answer::Abstain);
        assert_eq!(p.reason, EMPTY_REASON);
        let p = parse_response("Answer: yes\nReason:", TaskKind::QuestionAnswering);
        assert_eq!(p.reason, "Answer: yes\nReason:");
    }

    #[test]
    fn answer_serializes_as_nullable_string() {
        assert_eq!(serde_json::to_string(&Answer::Label("a".into())).unwrap(), "\"a\"");
        assert_eq!(serde_json::to_string(&Answer::Abstain).unwrap(), "null");
        assert_eq!(serde_json::from_str::<Answer>("null").unwrap(), Answer::Abstain);
    }

    fn labels_for(task: TaskKind) -> Vec<String> {
        match task.label_space() {
            Some(space) => space.iter().map(|s| s.to_string()).collect(),
            None => vec!["0".into(), "42".into(), "-7".into(), "3.25".into(), "1200".into()],
        }
    }

    proptest! {
        #[test]
        fn scripted_replies_round_trip(task_idx in 0usize..5, reason in "[A-Za-z0-9 ,.]{0,40}", pick in 0usize..5) {
            let task = TaskKind::ALL[task_idx];
            let labels = labels_for(task);
            let label = &labels[pick % labels.len()];
            let raw = format!("{}: {}\nReason: {}", task.answer_marker(), task.display_label(label), reason);
            let p = parse_response(&raw, task);
            prop_assert_eq!(p.answer, Answer::Label(label.clone()));
            prop_assert!(!p.reason.is_empty());
        }

        #[test]
        fn never_panics_and_reason_non_empty(raw in "\\PC{0,200}", task_idx in 0usize..5) {
            let task = TaskKind::ALL[task_idx];
            let p = parse_response(&raw, task);
            prop_assert!(!p.reason.is_empty());
            if let (Some(space), Answer::Label(l)) = (task.label_space(), &p.answer) {
                prop_assert!(space.contains(&l.as_str()));
            }
        }
    }
}
