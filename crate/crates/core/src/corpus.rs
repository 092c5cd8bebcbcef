//! Task datasets: JSON-Lines loading, label normalization and seeded subsampling.
//!
//! Each line of a split file is an object with a required `input`, a required
//! `label` (string, number or boolean) and optional `choices`. Multiple-choice
//! options are folded into the query text as `Answer Choices: (A) ... (B) ...`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0} contains no examples")]
    EmptySplit(PathBuf),
    #[error("train example {train_id} and test example {test_id} have identical content")]
    Overlap { train_id: usize, test_id: usize },
    #[error("unknown task kind `{0}` (expected one of: topic_classification, question_answering, commonsense_reasoning, logical_reasoning, mathematical_reasoning)")]
    UnknownTask(String),
}

/// The five task families the prompt renderer knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TopicClassification,
    QuestionAnswering,
    CommonsenseReasoning,
    LogicalReasoning,
    MathematicalReasoning,
}

const TOPICS: &[&str] = &["world", "sports", "business", "technology"];
const YES_NO: &[&str] = &["yes", "no"];
const FIVE_CHOICES: &[&str] = &["a", "b", "c", "d", "e"];
const FOUR_CHOICES: &[&str] = &["a", "b", "c", "d"];

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::TopicClassification,
        TaskKind::QuestionAnswering,
        TaskKind::CommonsenseReasoning,
        TaskKind::LogicalReasoning,
        TaskKind::MathematicalReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TopicClassification => "topic_classification",
            TaskKind::QuestionAnswering => "question_answering",
            TaskKind::CommonsenseReasoning => "commonsense_reasoning",
            TaskKind::LogicalReasoning => "logical_reasoning",
            TaskKind::MathematicalReasoning => "mathematical_reasoning",
        }
    }

    /// Normalized labels the task accepts, or `None` for free-form numeric answers.
    pub fn label_space(self) -> Option<&'static [&'static str]> {
        match self {
            TaskKind::TopicClassification => Some(TOPICS),
            TaskKind::QuestionAnswering => Some(YES_NO),
            TaskKind::CommonsenseReasoning => Some(FIVE_CHOICES),
            TaskKind::LogicalReasoning => Some(FOUR_CHOICES),
            TaskKind::MathematicalReasoning => None,
        }
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(
            self,
            TaskKind::CommonsenseReasoning | TaskKind::LogicalReasoning
        )
    }

    /// Field name that precedes the answer in demonstrations and model output.
    pub fn answer_marker(self) -> &'static str {
        match self {
            TaskKind::TopicClassification => "Topic",
            _ => "Answer",
        }
    }

    /// Field name that precedes a query in demonstrations and the test block.
    pub fn input_marker(self) -> &'static str {
        match self {
            TaskKind::TopicClassification => "Text",
            _ => "Question",
        }
    }

    /// Braced answer placeholder used inside the format instruction.
    pub fn answer_placeholder(self) -> &'static str {
        match self {
            TaskKind::TopicClassification => "{world, sports, business or technology}",
            TaskKind::QuestionAnswering => "{yes or no}",
            TaskKind::CommonsenseReasoning => "{A, B, C, D or E}",
            TaskKind::LogicalReasoning => "{A, B, C or D}",
            TaskKind::MathematicalReasoning => "{number}",
        }
    }

    pub fn answer_format_line(self) -> String {
        format!(
            "The response should follow the format: {}: {}\nReason: {{reason}}",
            self.answer_marker(),
            self.answer_placeholder()
        )
    }

    /// Normalize a label for this task. Returns `None` when the text cannot be
    /// mapped into the label space (or is empty for free-form tasks).
    pub fn normalize_label(self, raw: &str) -> Option<String> {
        match self.label_space() {
            None => {
                let n = normalize_numeric(raw);
                (!n.is_empty()).then_some(n)
            }
            Some(space) => {
                let t = normalize_text(raw);
                let t = match (self, t.as_str()) {
                    (TaskKind::QuestionAnswering, "true") => "yes".to_string(),
                    (TaskKind::QuestionAnswering, "false") => "no".to_string(),
                    (TaskKind::TopicClassification, "sci/tech" | "sci-tech" | "science/technology" | "science") => {
                        "technology".to_string()
                    }
                    _ => t,
                };
                space.contains(&t.as_str()).then_some(t)
            }
        }
    }

    /// Human-facing rendering of a normalized label, as shown in demonstrations.
    pub fn display_label(self, normalized: &str) -> String {
        match self {
            TaskKind::CommonsenseReasoning | TaskKind::LogicalReasoning => {
                normalized.to_uppercase()
            }
            TaskKind::TopicClassification => {
                let mut chars = normalized.chars();
                match chars.next() {
                    Some(c) => c.to_uppercase().chain(chars).collect(),
                    None => String::new(),
                }
            }
            _ => normalized.to_string(),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| CorpusError::UnknownTask(s.to_string()))
    }
}

/// Trim, case-fold and strip surrounding punctuation.
pub fn normalize_text(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Numeric normalization: commas removed, surrounding punctuation stripped and
/// the number written canonically (`1,200.50` -> `1200.5`, `7.0` -> `7`).
/// Text that is not a plain number falls back to [`normalize_text`].
pub fn normalize_numeric(raw: &str) -> String {
    let no_commas: String = raw.trim().chars().filter(|&c| c != ',').collect();
    let cleaned = no_commas
        .trim_start_matches(|c: char| !(c.is_ascii_digit() || c == '-' || c == '.'))
        .trim_end_matches(|c: char| !c.is_alphanumeric());
    canonical_number(cleaned).unwrap_or_else(|| {
        let text = normalize_text(&no_commas);
        canonical_number(&text).unwrap_or(text)
    })
}

/// Canonical form of a decimal literal like `-0012.500`, or `None` if `s` is not one.
pub(crate) fn canonical_number(s: &str) -> Option<String> {
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac_part = frac_part.trim_end_matches('0');
    let mut out = String::new();
    if negative && !(int_part == "0" && frac_part.is_empty()) {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    Some(out)
}

/// Fields exactly as they appeared in the source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub input: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    /// Query text, with answer choices folded in when present.
    pub input_text: String,
    /// Gold answer in normalized form.
    pub label_text: String,
    pub raw: RawRecord,
}

impl Example {
    pub fn content_hash(&self) -> String {
        content_hash(&self.input_text)
    }
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// `input` followed by ` Answer Choices: (A) .. (B) ..`.
pub fn fold_choices(input: &str, choices: &[String]) -> String {
    let rendered: Vec<String> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", choice_letter(i), c.trim()))
        .collect();
    format!("{} Answer Choices: {}", input.trim_end(), rendered.join(" "))
}

fn choice_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Load both splits and check that no test query also appears in train.
    pub fn load(
        name: impl Into<String>,
        task: TaskKind,
        train_path: &Path,
        test_path: &Path,
    ) -> Result<Self, CorpusError> {
        let train = load_split(train_path, task)?;
        let test = load_split(test_path, task)?;
        Self::new(name, task, train, test)
    }

    pub fn new(
        name: impl Into<String>,
        task: TaskKind,
        train: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self, CorpusError> {
        let train_hashes: HashMap<String, usize> = train
            .iter()
            .map(|e| (e.content_hash(), e.id))
            .collect();
        for e in &test {
            if let Some(&train_id) = train_hashes.get(&e.content_hash()) {
                return Err(CorpusError::Overlap {
                    train_id,
                    test_id: e.id,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            task,
            train,
            test,
        })
    }

    /// Seeded subsample of both splits. Requests at or above a split's size keep
    /// the whole split untouched; otherwise the sampled examples keep their
    /// parent ids and original order.
    pub fn subsample(&self, n_train: usize, n_test: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = sample_split(&self.train, n_train, &mut rng);
        let test = sample_split(&self.test, n_test, &mut rng);
        Dataset {
            name: self.name.clone(),
            task: self.task,
            train,
            test,
        }
    }

    pub fn train_example(&self, id: usize) -> Option<&Example> {
        lookup(&self.train, id)
    }

    pub fn test_example(&self, id: usize) -> Option<&Example> {
        lookup(&self.test, id)
    }
}

fn lookup(split: &[Example], id: usize) -> Option<&Example> {
    match split.get(id) {
        Some(e) if e.id == id => Some(e),
        _ => split.iter().find(|e| e.id == id),
    }
}

fn sample_split(split: &[Example], n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    if n >= split.len() {
        return split.to_vec();
    }
    let mut picked = rand::seq::index::sample(rng, split.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| split[i].clone()).collect()
}

#[derive(Deserialize)]
struct LineRecord {
    input: Option<String>,
    label: Option<serde_json::Value>,
    #[serde(default)]
    choices: Option<Vec<String>>,
}

/// Load one split. Ids are assigned sequentially from 0 in file order; blank
/// lines are skipped.
pub fn load_split(path: &Path, task: TaskKind) -> Result<Vec<Example>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let schema = |message: String| CorpusError::Schema {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: LineRecord =
            serde_json::from_str(&line).map_err(|e| schema(format!("invalid JSON: {e}")))?;
        let input = rec
            .input
            .ok_or_else(|| schema("missing field `input`".into()))?;
        let label = match rec.label {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(serde_json::Value::Bool(b)) => b.to_string(),
            Some(other) => return Err(schema(format!("`label` must be a string, number or boolean, got {other}"))),
            None => return Err(schema("missing field `label`".into())),
        };
        let example = build_example(examples.len(), task, input, label, rec.choices).map_err(schema)?;
        examples.push(example);
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptySplit(path.to_path_buf()));
    }
    Ok(examples)
}

/// Validate and normalize one record into an [`Example`].
pub fn build_example(
    id: usize,
    task: TaskKind,
    input: String,
    label: String,
    choices: Option<Vec<String>>,
) -> Result<Example, String> {
    if input.trim().is_empty() {
        return Err("`input` is empty".into());
    }
    if let (Some(choices), Some(space)) = (&choices, task.label_space()) {
        if task.is_multiple_choice() && choices.len() > space.len() {
            return Err(format!(
                "{} choices given but {task} allows at most {}",
                choices.len(),
                space.len()
            ));
        }
    }
    let input_text = match &choices {
        Some(c) if !c.is_empty() => fold_choices(&input, c),
        _ => input.clone(),
    };
    let label_text = task
        .normalize_label(&label)
        .or_else(|| label_from_choice_text(task, &label, choices.as_deref()))
        .ok_or_else(|| format!("label `{label}` is not valid for {task}"))?;
    Ok(Example {
        id,
        input_text,
        label_text,
        raw: RawRecord {
            input,
            label,
            choices,
        },
    })
}

fn label_from_choice_text(task: TaskKind, label: &str, choices: Option<&[String]>) -> Option<String> {
    if !task.is_multiple_choice() {
        return None;
    }
    let wanted = normalize_text(label);
    let pos = choices?.iter().position(|c| normalize_text(c) == wanted)?;
    task.normalize_label(&choice_letter(pos).to_string())
}

/// Write examples back out in canonical form (normalized label).
pub fn write_split(path: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for e in examples {
        let rec = RawRecord {
            input: e.raw.input.clone(),
            label: e.label_text.clone(),
            choices: e.raw.choices.clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    #[test]
    fn three_lines_give_three_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            &dir,
            "train.jsonl",
            &[
                r#"{"input": "Stocks rally", "label": "Business"}"#,
                r#"{"input": "Team wins cup", "label": "sports"}"#,
                r#"{"input": "New chip", "label": "Sci/Tech"}"#,
            ],
        );
        let ex = load_split(&p, TaskKind::TopicClassification).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(ex[2].label_text, "technology");
    }

    #[test]
    fn missing_label_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            &dir,
            "t.jsonl",
            &[r#"{"input": "a", "label": "yes"}"#, r#"{"input": "b"}"#],
        );
        let err = load_split(&p, TaskKind::QuestionAnswering).unwrap_err();
        match &err {
            CorpusError::Schema { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn duplicate_across_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let shared = r#"{"input": "Is the sky blue?", "label": true}"#;
        let train = write_lines(&dir, "train.jsonl", &[r#"{"input": "Is fire cold?", "label": false}"#, shared]);
        let test = write_lines(&dir, "test.jsonl", &[shared]);
        let err = Dataset::load("d", TaskKind::QuestionAnswering, &train, &test).unwrap_err();
        assert!(matches!(err, CorpusError::Overlap { train_id: 1, test_id: 0 }));
    }

    #[test]
    fn empty_split_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_lines(&dir, "e.jsonl", &[""]);
        assert!(matches!(
            load_split(&empty, TaskKind::QuestionAnswering),
            Err(CorpusError::EmptySplit(_))
        ));
        let bad = write_lines(&dir, "b.jsonl", &[r#"{"input": "q", "label": "maybe"}"#]);
        assert!(matches!(
            load_split(&bad, TaskKind::QuestionAnswering),
            Err(CorpusError::Schema { line: 1, .. })
        ));
        let missing = dir.path().join("nope.jsonl");
        assert!(matches!(
            load_split(&missing, TaskKind::QuestionAnswering),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn choices_fold_into_input() {
        let e = build_example(
            0,
            TaskKind::CommonsenseReasoning,
            "Dust accumulates where?".into(),
            "most buildings".into(),
            Some(vec!["ceiling".into(), "library".into(), "surface of earth".into(), "most buildings".into(), "desktop".into()]),
        )
        .unwrap();
        assert_eq!(
            e.input_text,
            "Dust accumulates where? Answer Choices: (A) ceiling (B) library (C) surface of earth (D) most buildings (E) desktop"
        );
        assert_eq!(e.label_text, "d");
    }

    #[test]
    fn numeric_normalization() {
        let t = TaskKind::MathematicalReasoning;
        assert_eq!(t.normalize_label("1,200").as_deref(), Some("1200"));
        assert_eq!(t.normalize_label("18.0").as_deref(), Some("18"));
        assert_eq!(t.normalize_label(" $42. ").as_deref(), Some("42"));
        assert_eq!(t.normalize_label("-3.50").as_deref(), Some("-3.5"));
        assert_eq!(t.normalize_label("0.25").as_deref(), Some("0.25"));
        assert_eq!(t.normalize_label("   ").as_deref(), None);
    }

    #[test]
    fn subsample_whole_set_is_identity() {
        let train: Vec<Example> = (0..20)
            .map(|i| build_example(i, TaskKind::MathematicalReasoning, format!("q{i}"), i.to_string(), None).unwrap())
            .collect();
        let test = vec![build_example(0, TaskKind::MathematicalReasoning, "t".into(), "1".into(), None).unwrap()];
        let d = Dataset::new("m", TaskKind::MathematicalReasoning, train, test).unwrap();
        let a = d.subsample(20, 1, 1);
        let b = d.subsample(500, 5, 99);
        assert_eq!(a.train, d.train);
        assert_eq!(b.train, d.train);
        assert_eq!(d.subsample(5, 1, 7).train, d.subsample(5, 1, 7).train);
    }

    #[test]
    fn subsample_seeds_differ() {
        let train: Vec<Example> = (0..100)
            .map(|i| build_example(i, TaskKind::MathematicalReasoning, format!("q{i}"), i.to_string(), None).unwrap())
            .collect();
        let test = vec![build_example(0, TaskKind::MathematicalReasoning, "t".into(), "1".into(), None).unwrap()];
        let d = Dataset::new("m", TaskKind::MathematicalReasoning, train, test).unwrap();
        let a = d.subsample(5, 1, 1);
        let b = d.subsample(5, 1, 2);
        assert_ne!(a.train, b.train);
        // ids are the parent's ids
        for e in &a.train {
            assert_eq!(d.train[e.id], *e);
        }
    }

    #[test]
    fn task_kind_parses() {
        assert_eq!("topic_classification".parse::<TaskKind>().unwrap(), TaskKind::TopicClassification);
        assert_eq!("Logical-Reasoning".parse::<TaskKind>().unwrap(), TaskKind::LogicalReasoning);
        assert!("poetry".parse::<TaskKind>().is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,24}", task_idx in 0usize..5) {
            let task = TaskKind::ALL[task_idx];
            prop_assert_eq!(normalize_text(&normalize_text(&s)), normalize_text(&s));
            let n = normalize_numeric(&s);
            prop_assert_eq!(normalize_numeric(&n), n);
            if let Some(label) = task.normalize_label(&s) {
                prop_assert_eq!(task.normalize_label(&label), Some(label));
            }
        }

        #[test]
        fn serialize_then_load_keeps_canonical_fields(
            rows in prop::collection::vec(("[a-z ]{1,20}[a-z]", 0usize..5, prop::option::of(prop::collection::vec("[a-z]{1,8}", 2..5))), 1..8)
        ) {
            let task = TaskKind::CommonsenseReasoning;
            let examples: Vec<Example> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (input, label, choices))| {
                    build_example(i, task, input, FIVE_CHOICES[label].to_uppercase(), choices).unwrap()
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.jsonl");
            write_split(&p, &examples).unwrap();
            let back = load_split(&p, task).unwrap();
            prop_assert_eq!(back.len(), examples.len());
            for (a, b) in examples.iter().zip(&back) {
                prop_assert_eq!(&a.input_text, &b.input_text);
                prop_assert_eq!(&a.label_text, &b.label_text);
                prop_assert_eq!(&a.raw.choices, &b.raw.choices);
            }
        }
    }
}
