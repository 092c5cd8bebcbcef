use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChatTurn, LlmError};
use crate::corpus::{Example, TaskKind};

pub const TEST_DATA_HEADER: &str = "Here is the test data.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// No demonstrations; elicits a first reasoning path.
    ZeroShotCot,
    /// Demonstrations plus an answer/reason format instruction.
    IclWithCot,
}

/// The zero-shot chain-of-thought trigger phrase appended to every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct CotTrigger(String);

impl CotTrigger {
    pub const DEFAULT: &'static str = "Let's think step by step.";
    pub const TRIGGER1: &'static str =
        "Let's work this out in a step by step way to be sure we have the right answer.";
    pub const TRIGGER2: &'static str = "Let's solve this problem step by step";

    pub fn custom(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl Default for CotTrigger {
    fn default() -> Self {
        Self(Self::DEFAULT.into())
    }
}

impl fmt::Display for CotTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CotTrigger {
    type Err = String;

    /// `default`, `trigger1`, `trigger2` or `custom:<text>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self(Self::DEFAULT.into())),
            "trigger1" => Ok(Self(Self::TRIGGER1.into())),
            "trigger2" => Ok(Self(Self::TRIGGER2.into())),
            _ => match s.strip_prefix("custom:") {
                Some(text) if !text.trim().is_empty() => Ok(Self(text.into())),
                _ => Err(format!(
                    "unknown trigger `{s}` (expected default, trigger1, trigger2 or custom:<text>)"
                )),
            },
        }
    }
}

impl From<CotTrigger> for String {
    fn from(t: CotTrigger) -> Self {
        t.0
    }
}

impl TryFrom<String> for CotTrigger {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.trim().is_empty() {
            Err("trigger text is empty".into())
        } else {
            Ok(Self(s))
        }
    }
}

/// Task header shown at the top of every prompt.
pub fn instruction(task: TaskKind) -> &'static str {
    match task {
        TaskKind::TopicClassification => {
            "Which topic does the text belong to? Choose from world, sports, business or technology."
        }
        TaskKind::QuestionAnswering => "Answer the question about the passage with yes or no.",
        TaskKind::CommonsenseReasoning => "Which choice is the correct answer to the question?",
        TaskKind::LogicalReasoning => {
            "Read the context and decide which choice is the correct answer to the question."
        }
        TaskKind::MathematicalReasoning => "Solve the math problem and give the final numerical answer.",
    }
}

/// A rendered prompt, kept in parts so callers can split it across turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: PromptMode,
    pub instruction: String,
    /// `Examples:` block; empty in zero-shot mode.
    pub demos: String,
    /// Output format instruction; empty in zero-shot mode.
    pub format_line: String,
    pub test_block: String,
    pub cot_trigger: String,
}

impl PromptBundle {
    fn body_sections(&self) -> impl Iterator<Item = &str> {
        [
            self.demos.as_str(),
            self.format_line.as_str(),
            self.test_block.as_str(),
            self.cot_trigger.as_str(),
        ]
        .into_iter()
        .filter(|s| !s.is_empty())
    }

    /// Everything after the instruction.
    pub fn body(&self) -> String {
        self.body_sections().collect::<Vec<_>>().join("\n\n")
    }

    /// The full prompt as one text.
    pub fn text(&self) -> String {
        std::iter::once(self.instruction.as_str())
            .chain(self.body_sections())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// A single user turn, or a system turn with the instruction followed by
    /// a user turn with the rest.
    pub fn to_turns(&self, instruction_as_system: bool) -> Vec<ChatTurn> {
        if instruction_as_system {
            vec![ChatTurn::system(self.instruction.clone()), ChatTurn::user(self.body())]
        } else {
            vec![ChatTurn::user(self.text())]
        }
    }
}

fn clean(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

/// Render the prompt for `query`.
///
/// Demonstrations show only input and gold answer, never a reasoning path.
/// Zero-shot mode has no demonstrations, no format line and no test-data header.
pub fn render_prompt(
    task: TaskKind,
    demos: &[&Example],
    query: &Example,
    mode: PromptMode,
    trigger: &CotTrigger,
) -> Result<PromptBundle, LlmError> {
    let query_text = clean(&query.input_text);
    if query_text.is_empty() {
        return Err(LlmError::EmptyQuery);
    }
    match (mode, demos.is_empty()) {
        (PromptMode::ZeroShotCot, false) => {
            return Err(LlmError::InvalidPrompt("zero-shot prompts take no demonstrations".into()))
        }
        (PromptMode::IclWithCot, true) => {
            return Err(LlmError::InvalidPrompt("in-context prompts need at least one demonstration".into()))
        }
        _ => {}
    }
    let input_marker = task.input_marker();
    let query_line = format!("{input_marker}: {query_text}");
    let (demo_block, format_line, test_block) = match mode {
        PromptMode::ZeroShotCot => (String::new(), String::new(), query_line),
        PromptMode::IclWithCot => {
            let rendered: Vec<String> = demos
                .iter()
                .map(|d| {
                    format!(
                        "{input_marker}: {}\n{}: {}",
                        clean(&d.input_text),
                        task.answer_marker(),
                        task.display_label(&d.label_text)
                    )
                })
                .collect();
            (
                format!("Examples:\n{}", rendered.join("\n\n")),
                task.answer_format_line(),
                format!("{TEST_DATA_HEADER}\n{query_line}"),
            )
        }
    };
    Ok(PromptBundle {
        mode,
        instruction: instruction(task).to_string(),
        demos: demo_block,
        format_line,
        test_block,
        cot_trigger: clean(trigger.text()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_example;

    fn ex(id: usize, task: TaskKind, input: &str, label: &str) -> Example {
        build_example(id, task, input.into(), label.into(), None).unwrap()
    }

    #[test]
    fn zero_shot_has_trigger_and_no_test_header() {
        let q = ex(0, TaskKind::TopicClassification, "OpenAI releases a new model", "technology");
        let p = render_prompt(TaskKind::TopicClassification, &[], &q, PromptMode::ZeroShotCot, &CotTrigger::default())
            .unwrap();
        let text = p.text();
        assert!(text.contains("Let's think step by step."));
        assert!(!text.contains(TEST_DATA_HEADER));
        assert!(p.demos.is_empty());
    }

    #[test]
    fn topic_format_line() {
        let d = ex(0, TaskKind::TopicClassification, "Stocks fall", "business");
        let q = ex(1, TaskKind::TopicClassification, "Team wins", "sports");
        let p = render_prompt(TaskKind::TopicClassification, &[&d], &q, PromptMode::IclWithCot, &CotTrigger::default())
            .unwrap();
        assert!(p
            .format_line
            .contains("Topic: {world, sports, business or technology}"));
        assert!(p.text().contains("Text: Stocks fall\nTopic: Business"));
        assert!(!p.demos.lines().any(|l| l.starts_with("Reason:")));
    }

    #[test]
    fn mode_and_demo_mismatch_is_rejected() {
        let d = ex(0, TaskKind::QuestionAnswering, "a", "yes");
        let q = ex(1, TaskKind::QuestionAnswering, "b", "no");
        assert!(render_prompt(TaskKind::QuestionAnswering, &[&d], &q, PromptMode::ZeroShotCot, &CotTrigger::default()).is_err());
        assert!(render_prompt(TaskKind::QuestionAnswering, &[], &q, PromptMode::IclWithCot, &CotTrigger::default()).is_err());
    }

    #[test]
    fn empty_query_is_rejected() {
        let mut q = ex(1, TaskKind::QuestionAnswering, "b", "no");
        q.input_text = "  ".into();
        assert!(matches!(
            render_prompt(TaskKind::QuestionAnswering, &[], &q, PromptMode::ZeroShotCot, &CotTrigger::default()),
            Err(LlmError::EmptyQuery)
        ));
    }

    #[test]
    fn system_split_keeps_all_text() {
        let d = ex(0, TaskKind::MathematicalReasoning, "1+1?", "2");
        let q = ex(1, TaskKind::MathematicalReasoning, "2+2?", "4");
        let p = render_prompt(TaskKind::MathematicalReasoning, &[&d], &q, PromptMode::IclWithCot, &CotTrigger::default())
            .unwrap();
        let turns = p.to_turns(true);
        assert_eq!(turns.len(), 2);
        assert_eq!(format!("{}\n\n{}", turns[0].content, turns[1].content), p.text());
        assert_eq!(p.to_turns(false)[0].content, p.text());
    }

    #[test]
    fn trigger_parsing() {
        assert_eq!("trigger1".parse::<CotTrigger>().unwrap().text(), CotTrigger::TRIGGER1);
        assert_eq!("custom:Think.".parse::<CotTrigger>().unwrap().text(), "Think.");
        assert!("nope".parse::<CotTrigger>().is_err());
        assert!("custom:".parse::<CotTrigger>().is_err());
    }
}
