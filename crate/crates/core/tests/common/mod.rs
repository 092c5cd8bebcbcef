#![allow(dead_code)]

use std::path::PathBuf;

use ids_core::corpus::build_example;
use ids_core::llm::{render_prompt, CotTrigger, PromptMode};
use ids_core::{Example, TaskKind};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn demo_data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/demo")
}

fn ex(id: usize, task: TaskKind, input: &str, label: &str, choices: &[&str]) -> Example {
    let choices = (!choices.is_empty()).then(|| choices.iter().map(|c| c.to_string()).collect());
    build_example(id, task, input.into(), label.into(), choices).unwrap()
}

/// Two demonstrations and a query per task family.
pub fn golden_examples(task: TaskKind) -> (Vec<Example>, Example) {
    use TaskKind::*;
    match task {
        TopicClassification => (
            vec![
                ex(0, task, "Stocks rallied after the central bank held rates steady.", "business", &[]),
                ex(1, task, "The striker scored twice in the final minutes.", "sports", &[]),
            ],
            ex(0, task, "A new smartphone chip promises longer battery life.", "technology", &[]),
        ),
        QuestionAnswering => (
            vec![
                ex(0, task, "Is the ocean salty?", "yes", &[]),
                ex(1, task, "Do snakes have legs?", "no", &[]),
            ],
            ex(0, task, "Is the sky blue on a clear day?", "yes", &[]),
        ),
        CommonsenseReasoning => (
            vec![
                ex(0, task, "Where would you find books gathering dust?", "library",
                   &["library", "ocean", "oven", "cloud", "river"]),
                ex(1, task, "What do people use to cut paper?", "b",
                   &["spoon", "scissors", "pillow", "bucket", "lamp"]),
            ],
            ex(0, task, "John cleans his room every day. What is his room likely to be?", "d",
               &["messy", "dark", "cold", "tidy", "empty"]),
        ),
        LogicalReasoning => (
            vec![
                ex(0, task, "All birds lay eggs. A robin is a bird. What follows?", "a",
                   &["A robin lays eggs.", "A robin cannot fly.", "All eggs are robins.", "Nothing follows."]),
                ex(1, task, "If it rains, the street is wet. The street is dry. What follows?", "c",
                   &["It rained.", "The street is wet.", "It did not rain.", "It will rain."]),
            ],
            ex(0, task, "Every manager attends the meeting. Sara does not attend. What follows?", "b",
               &["Sara is a manager.", "Sara is not a manager.", "The meeting is cancelled.", "Nobody attends."]),
        ),
        MathematicalReasoning => (
            vec![
                ex(0, task, "Tom has 3 apples and buys 4 more. How many apples does he have?", "7", &[]),
                ex(1, task, "A book costs $12 and a pen costs $3. What do both cost together?", "15", &[]),
            ],
            ex(0, task, "A train travels 60 miles per hour for 2.5 hours. How far does it go?", "150", &[]),
        ),
    }
}

pub fn mode_name(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::ZeroShotCot => "zero_shot_cot",
        PromptMode::IclWithCot => "icl_with_cot",
    }
}

pub fn render_golden(task: TaskKind, mode: PromptMode) -> String {
    let (demos, query) = golden_examples(task);
    let refs: Vec<&Example> = match mode {
        PromptMode::ZeroShotCot => Vec::new(),
        PromptMode::IclWithCot => demos.iter().collect(),
    };
    render_prompt(task, &refs, &query, mode, &CotTrigger::default()).unwrap().text()
}

pub fn golden_path(task: TaskKind, mode: PromptMode) -> PathBuf {
    golden_dir().join(format!("{}_{}.txt", task.as_str(), mode_name(mode)))
}
