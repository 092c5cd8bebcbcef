//! The IDS loop, self-consistency baselines, voting and evaluation.
//!
//! An [`Experiment`] embeds the training split once and then answers test
//! queries independently, so queries can be spread over worker threads while
//! each query's own iterations stay sequential.

mod store;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, TaskKind};
use crate::embedding::{Embedder, EmbeddingError, EmbeddingVector};
use crate::llm::{
    parse_response, render_prompt, Answer, ChatProvider, ChatRequest, CotTrigger, GenerationParams, LlmError,
    PromptMode,
};
use crate::metrics::{self, CostReport, MetricsBlock};
use crate::selectors::{
    cluster_representatives, kmeans_partition, knn_top_k, mmr_k, random_k, DemonstrationSet, KMeansConfig,
    SelectError,
};

pub use store::{new_run_id, DatasetInfo, RunDir, RunManifest};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{0}")]
    Mismatch(String),
    #[error("run store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ids,
    TopkConsistency,
    RandomVoting,
    ClusterVoting,
    MmrConsistency,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ids,
        Strategy::TopkConsistency,
        Strategy::RandomVoting,
        Strategy::ClusterVoting,
        Strategy::MmrConsistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ids => "ids",
            Strategy::TopkConsistency => "topk_consistency",
            Strategy::RandomVoting => "random_voting",
            Strategy::ClusterVoting => "cluster_voting",
            Strategy::MmrConsistency => "mmr_consistency",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|st| st.as_str()).collect();
                format!("unknown strategy `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Everything that determines a run's outcome besides the data and providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Demonstrations per prompt.
    pub k: usize,
    /// IDS iterations, or decoding paths for the baselines.
    pub q: usize,
    pub generation: GenerationParams,
    pub seed: u64,
    pub trigger: CotTrigger,
    pub mmr_lambda: f64,
    /// `seed` is ignored; each cluster-voting run derives its own.
    pub kmeans: KMeansConfig,
    /// Send the task instruction as a system turn instead of inlining it.
    pub instruction_as_system: bool,
    pub chat_provider: String,
    pub embedding_provider: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ids,
            k: 4,
            q: 3,
            generation: GenerationParams::default(),
            seed: 0,
            trigger: CotTrigger::default(),
            mmr_lambda: 0.5,
            kmeans: KMeansConfig::default(),
            instruction_as_system: false,
            chat_provider: "scripted".into(),
            embedding_provider: "offline".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.q == 0 {
            return Err(PipelineError::Config("q must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return Err(PipelineError::Config(format!("mmr_lambda must lie in [0, 1], got {}", self.mmr_lambda)));
        }
        if !(self.generation.temperature >= 0.0) {
            return Err(PipelineError::Config("temperature must be non-negative".into()));
        }
        if !(self.generation.top_p > 0.0 && self.generation.top_p <= 1.0) {
            return Err(PipelineError::Config("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The zero-shot chain-of-thought step that seeds the IDS loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRecord {
    pub prompt: String,
    pub raw_response: String,
    pub reasoning_path: String,
}

/// One in-context completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// The reasoning path used as the retrieval key; `None` for baselines.
    pub reasoning_path_in: Option<String>,
    pub demo_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_scores: Option<Vec<f64>>,
    pub prompt: String,
    pub raw_response: String,
    pub answer: Answer,
    pub reasoning_path_out: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Provider,
    Embedding,
    Selection,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceError {
    pub kind: FailureKind,
    pub message: String,
}

impl TraceError {
    fn new(kind: FailureKind, err: impl fmt::Display) -> Self {
        Self {
            kind,
            message: err.to_string(),
        }
    }
}

impl From<EmbeddingError> for TraceError {
    fn from(e: EmbeddingError) -> Self {
        Self::new(FailureKind::Embedding, e)
    }
}

impl From<SelectError> for TraceError {
    fn from(e: SelectError) -> Self {
        Self::new(FailureKind::Selection, e)
    }
}

/// Everything that happened while answering one test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub query_id: usize,
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<ZeroShotRecord>,
    pub iterations: Vec<IterationRecord>,
    pub answer_set: Vec<Answer>,
    pub final_answer: Answer,
    pub chat_calls: usize,
    /// Reasoning paths sent to the embedder.
    pub path_embeddings: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TraceError>,
}

impl IterationTrace {
    fn start(query: &Example) -> Self {
        Self {
            query_id: query.id,
            gold_label: query.label_text.clone(),
            zero_shot: None,
            iterations: Vec::new(),
            answer_set: Vec::new(),
            final_answer: Answer::Abstain,
            chat_calls: 0,
            path_embeddings: 0,
            error: None,
        }
    }

    fn finish(mut self, outcome: Result<(), TraceError>) -> Self {
        self.answer_set = self.iterations.iter().map(|r| r.answer.clone()).collect();
        self.final_answer = if self.answer_set.is_empty() {
            Answer::Abstain
        } else {
            majority_vote(&self.answer_set)
        };
        self.error = outcome.err();
        self
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    pub fn is_correct(&self) -> bool {
        self.final_answer.matches(&self.gold_label)
    }
}

/// Most frequent answer; ties go to the answer that appeared first.
/// Abstentions only win when every entry abstains.
pub fn majority_vote(answers: &[Answer]) -> Answer {
    let mut tally: Vec<(&Answer, usize)> = Vec::new();
    for a in answers.iter().filter(|a| !a.is_abstain()) {
        match tally.iter_mut().find(|(seen, _)| *seen == a) {
            Some((_, n)) => *n += 1,
            None => tally.push((a, 1)),
        }
    }
    // `tally` is in first-occurrence order, so keeping the first maximum
    // implements the tie rule.
    let mut best: Option<(&Answer, usize)> = None;
    for (a, n) in tally {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((a, n));
        }
    }
    best.map_or(Answer::Abstain, |(a, _)| a.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    /// Included in `wrong`.
    pub abstained: usize,
}

/// Exact-match accuracy of final answers against normalized gold labels.
pub fn evaluate(traces: &[IterationTrace], test: &[Example]) -> Result<Evaluation, PipelineError> {
    if traces.len() != test.len() {
        return Err(PipelineError::Mismatch(format!(
            "{} traces for {} test examples",
            traces.len(),
            test.len()
        )));
    }
    let by_id: HashMap<usize, &IterationTrace> = traces.iter().map(|t| (t.query_id, t)).collect();
    let (mut correct, mut abstained) = (0, 0);
    for ex in test {
        let trace = by_id
            .get(&ex.id)
            .ok_or_else(|| PipelineError::Mismatch(format!("no trace for test example {}", ex.id)))?;
        if trace.final_answer.matches(&ex.label_text) {
            correct += 1;
        } else if trace.final_answer.is_abstain() {
            abstained += 1;
        }
    }
    let total = test.len();
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        total,
        correct,
        wrong: total - correct,
        abstained,
    })
}

/// Mix `parts` into `base` (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// A dataset, providers and config with the training split already embedded.
pub struct Experiment<'a> {
    dataset: &'a Dataset,
    chat: &'a dyn ChatProvider,
    embedder: &'a Embedder,
    cfg: RunConfig,
    train_vecs: Vec<EmbeddingVector>,
    /// One representative set per cluster-voting run.
    cluster_sets: Vec<DemonstrationSet>,
}

impl<'a> Experiment<'a> {
    pub fn prepare(
        dataset: &'a Dataset,
        chat: &'a dyn ChatProvider,
        embedder: &'a Embedder,
        cfg: RunConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let n = dataset.train.len();
        if n == 0 {
            return Err(SelectError::EmptyCorpus.into());
        }
        if cfg.k > n {
            return Err(PipelineError::Config(format!("k = {} exceeds the {n} training examples", cfg.k)));
        }
        let texts: Vec<String> = dataset.train.iter().map(|e| e.input_text.clone()).collect();
        let train_vecs = embedder.embed(&texts)?;
        let cluster_sets = if cfg.strategy == Strategy::ClusterVoting {
            (0..cfg.q)
                .map(|j| {
                    let km = KMeansConfig {
                        seed: derive_seed(cfg.seed, &[j as u64]),
                        ..cfg.kmeans
                    };
                    let result = kmeans_partition(&train_vecs, cfg.k, &km)?;
                    Ok(cluster_representatives(&result, &train_vecs))
                })
                .collect::<Result<Vec<_>, SelectError>>()?
        } else {
            Vec::new()
        };
        tracing::debug!(train = n, strategy = %cfg.strategy, "experiment prepared");
        Ok(Self {
            dataset,
            chat,
            embedder,
            cfg,
            train_vecs,
            cluster_sets,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn train_vectors(&self) -> &[EmbeddingVector] {
        &self.train_vecs
    }

    fn task(&self) -> TaskKind {
        self.dataset.task
    }

    pub fn run_query(&self, query: &Example) -> IterationTrace {
        match self.cfg.strategy {
            Strategy::Ids => self.run_ids(query),
            _ => self.run_baseline(query),
        }
    }

    /// Zero-shot CoT, then `q` rounds of: embed the current reasoning path,
    /// retrieve its nearest training examples, answer in context, and carry
    /// the new reasoning path forward. The final answer is the majority vote.
    pub fn run_ids(&self, query: &Example) -> IterationTrace {
        let mut trace = IterationTrace::start(query);
        let outcome = (|| -> Result<(), TraceError> {
            let mut path = self.zero_shot(query, &mut trace)?;
            for j in 1..=self.cfg.q {
                let key = self.embedder.embed_one(&path)?;
                trace.path_embeddings += 1;
                let demos = knn_top_k(&key, &self.train_vecs, self.cfg.k)?;
                let record = self.icl_step(query, j, Some(path), demos, &mut trace)?;
                path = record.reasoning_path_out.clone();
                trace.iterations.push(record);
            }
            Ok(())
        })();
        trace.finish(outcome)
    }

    /// Self-consistency over `q` decoding paths. Query-based selectors pick
    /// once; random and cluster voting draw a fresh set per path.
    pub fn run_baseline(&self, query: &Example) -> IterationTrace {
        let mut trace = IterationTrace::start(query);
        let outcome = (|| -> Result<(), TraceError> {
            let n = self.train_vecs.len();
            let fixed = match self.cfg.strategy {
                Strategy::TopkConsistency => {
                    Some(knn_top_k(&self.embedder.embed_one(&query.input_text)?, &self.train_vecs, self.cfg.k)?)
                }
                Strategy::MmrConsistency => Some(mmr_k(
                    &self.embedder.embed_one(&query.input_text)?,
                    &self.train_vecs,
                    self.cfg.k,
                    self.cfg.mmr_lambda,
                )?),
                _ => None,
            };
            for j in 1..=self.cfg.q {
                let demos = match (&fixed, self.cfg.strategy) {
                    (Some(set), _) => set.clone(),
                    (None, Strategy::ClusterVoting) => self.cluster_sets[j - 1].clone(),
                    (None, _) => random_k(n, self.cfg.k, derive_seed(self.cfg.seed, &[query.id as u64, j as u64]))?,
                };
                let record = self.icl_step(query, j, None, demos, &mut trace)?;
                trace.iterations.push(record);
            }
            Ok(())
        })();
        trace.finish(outcome)
    }

    fn send(&self, query: &Example, turns: Vec<crate::llm::ChatTurn>, trace: &mut IterationTrace) -> Result<String, LlmError> {
        trace.chat_calls += 1;
        let request = ChatRequest::new(turns, self.cfg.generation.clone()).for_query(query.id);
        self.chat.complete(&request)
    }

    fn zero_shot(&self, query: &Example, trace: &mut IterationTrace) -> Result<String, TraceError> {
        let bundle = render_prompt(self.task(), &[], query, PromptMode::ZeroShotCot, &self.cfg.trigger)
            .map_err(|e| TraceError::new(FailureKind::Prompt, e))?;
        let raw = self
            .send(query, bundle.to_turns(self.cfg.instruction_as_system), trace)
            .map_err(|e| TraceError::new(FailureKind::Provider, e))?;
        let parsed = parse_response(&raw, self.task());
        let record = ZeroShotRecord {
            prompt: bundle.text(),
            raw_response: raw,
            reasoning_path: parsed.reason,
        };
        let path = record.reasoning_path.clone();
        trace.zero_shot = Some(record);
        Ok(path)
    }

    /// Render, complete and parse one in-context prompt. When the prompt is too
    /// long for the model, the last (least relevant) demonstration is dropped
    /// and the prompt re-rendered, down to a single demonstration.
    fn icl_step(
        &self,
        query: &Example,
        iteration: usize,
        reasoning_path_in: Option<String>,
        mut demos: DemonstrationSet,
        trace: &mut IterationTrace,
    ) -> Result<IterationRecord, TraceError> {
        loop {
            let examples: Vec<&Example> = demos.indices.iter().map(|&i| &self.dataset.train[i]).collect();
            let bundle = render_prompt(self.task(), &examples, query, PromptMode::IclWithCot, &self.cfg.trigger)
                .map_err(|e| TraceError::new(FailureKind::Prompt, e))?;
            match self.send(query, bundle.to_turns(self.cfg.instruction_as_system), trace) {
                Ok(raw) => {
                    let parsed = parse_response(&raw, self.task());
                    return Ok(IterationRecord {
                        iteration,
                        reasoning_path_in,
                        demo_indices: demos.indices,
                        demo_scores: demos.scores,
                        prompt: bundle.text(),
                        raw_response: raw,
                        answer: parsed.answer,
                        reasoning_path_out: parsed.reason,
                    });
                }
                Err(LlmError::ContextLength(_)) if demos.indices.len() > 1 => {
                    tracing::warn!(query = query.id, iteration, "prompt too long, dropping a demonstration");
                    demos.indices.pop();
                    if let Some(s) = demos.scores.as_mut() {
                        s.pop();
                    }
                }
                Err(e) => return Err(TraceError::new(FailureKind::Provider, e)),
            }
        }
    }

    /// Answer `queries` on `workers` threads, calling `on_trace` as each
    /// finishes. Returned traces are sorted by query id.
    pub fn run_all(
        &self,
        queries: &[&Example],
        workers: usize,
        on_trace: &(dyn Fn(&IterationTrace) + Sync),
    ) -> Vec<IterationTrace> {
        let results = Mutex::new(Vec::with_capacity(queries.len()));
        let work = || {
            rayon::scope(|s| {
                for &q in queries {
                    let results = &results;
                    s.spawn(move |_| {
                        let trace = self.run_query(q);
                        on_trace(&trace);
                        results.lock().push(trace);
                    });
                }
            })
        };
        match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        }
        let mut traces = results.into_inner();
        traces.sort_by_key(|t| t.query_id);
        traces
    }

    /// Evaluation, similarity, overlap and cost for a finished set of traces.
    pub fn metrics(&self, traces: &[IterationTrace]) -> Result<MetricsBlock, PipelineError> {
        let evaluation = evaluate(traces, &self.dataset.test)?;
        let texts: Vec<String> = traces
            .iter()
            .map(|t| {
                self.dataset
                    .test_example(t.query_id)
                    .map(|e| e.input_text.clone())
                    .ok_or_else(|| PipelineError::Mismatch(format!("no test example {}", t.query_id)))
            })
            .collect::<Result<_, _>>()?;
        let query_vecs = if texts.is_empty() {
            Vec::new()
        } else {
            self.embedder.embed(&texts)?
        };
        let similarity = metrics::similarity_report(traces, &query_vecs, &self.train_vecs)?;
        let overlap = (2..=self.cfg.q)
            .map(|j| metrics::overlap_proportions(traces, j))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetricsBlock {
            evaluation,
            similarity,
            overlap,
            cost: CostReport::from_traces(traces),
        })
    }

    /// Answer every test query and compute metrics, without persistence.
    pub fn run(&self, workers: usize) -> Result<RunRecord, PipelineError> {
        let queries: Vec<&Example> = self.dataset.test.iter().collect();
        let traces = self.run_all(&queries, workers, &|_| {});
        let metrics = if traces.iter().all(IterationTrace::is_complete) {
            Some(self.metrics(&traces)?)
        } else {
            None
        };
        let now = store::timestamp();
        Ok(RunRecord {
            run_id: String::new(),
            created_at: now.clone(),
            completed_at: metrics.as_ref().map(|_| now),
            dataset: DatasetInfo::of(self.dataset),
            config: self.cfg.clone(),
            traces,
            metrics,
        })
    }

    /// Run into `dir`, skipping queries that already have a complete trace.
    /// Metrics are written, and the run sealed, only when every query succeeded.
    pub fn run_persisted(&self, dir: &RunDir, workers: usize) -> Result<RunRecord, PipelineError> {
        if dir.is_complete() {
            return Err(dir.error("run is complete; start a new run instead"));
        }
        let manifest = dir.manifest()?;
        if manifest.config != self.cfg {
            return Err(dir.error("stored config differs from the requested config"));
        }
        let mut latest: HashMap<usize, IterationTrace> =
            dir.load_traces()?.into_iter().map(|t| (t.query_id, t)).collect();
        let pending: Vec<&Example> = self
            .dataset
            .test
            .iter()
            .filter(|e| latest.get(&e.id).is_none_or(|t| !t.is_complete()))
            .collect();
        let write_error = Mutex::new(None);
        let fresh = self.run_all(&pending, workers, &|t| {
            if let Err(e) = dir.append_trace(t) {
                write_error.lock().get_or_insert(e);
            }
        });
        if let Some(e) = write_error.into_inner() {
            return Err(e);
        }
        for t in fresh {
            latest.insert(t.query_id, t);
        }
        let mut traces: Vec<IterationTrace> = latest.into_values().collect();
        traces.sort_by_key(|t| t.query_id);
        let (metrics, completed_at) = if traces.iter().all(IterationTrace::is_complete) {
            let m = self.metrics(&traces)?;
            let at = dir.write_metrics(&m)?;
            (Some(m), Some(at))
        } else {
            (None, None)
        };
        Ok(RunRecord {
            run_id: manifest.run_id,
            created_at: manifest.created_at,
            completed_at,
            dataset: manifest.dataset,
            config: manifest.config,
            traces,
            metrics,
        })
    }
}

/// A run's config, traces and metrics.
///
/// Equality ignores the run id, timestamps and the name of the chat transport,
/// so a recorded run and its replay compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: String,
    pub completed_at: Option<String>,
    pub dataset: DatasetInfo,
    pub config: RunConfig,
    pub traces: Vec<IterationTrace>,
    pub metrics: Option<MetricsBlock>,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        let transport_free = |c: &RunConfig| RunConfig {
            chat_provider: String::new(),
            ..c.clone()
        };
        self.dataset == other.dataset
            && transport_free(&self.config) == transport_free(&other.config)
            && self.traces == other.traces
            && self.metrics == other.metrics
    }
}

impl RunRecord {
    pub fn failures(&self) -> impl Iterator<Item = &IterationTrace> {
        self.traces.iter().filter(|t| !t.is_complete())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_example;
    use crate::llm::ScriptedProvider;

    fn a(s: &str) -> Answer {
        Answer::Label(s.into())
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[a("a"), a("a"), a("b")]), a("a"));
        assert_eq!(majority_vote(&[a("a"), a("b"), a("c")]), a("a"));
        assert_eq!(majority_vote(&[a("c"), a("b"), a("b"), a("c")]), a("c"));
        assert_eq!(majority_vote(&[Answer::Abstain, a("b"), a("b")]), a("b"));
        assert_eq!(majority_vote(&[Answer::Abstain, Answer::Abstain, a("b")]), a("b"));
        assert_eq!(majority_vote(&[Answer::Abstain, Answer::Abstain]), Answer::Abstain);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert_eq!("topk-consistency".parse::<Strategy>().unwrap(), Strategy::TopkConsistency);
        assert!("best".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig { q: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { k: 0, ..RunConfig::default() }.validate().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"strategy": "random_voting", "q": 5}"#).unwrap();
        assert_eq!((cfg.strategy, cfg.q, cfg.k), (Strategy::RandomVoting, 5, 4));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }

    fn qa_dataset() -> Dataset {
        let task = TaskKind::QuestionAnswering;
        let train = ["is water wet", "is fire cold", "do birds fly", "can fish walk", "is ice hot"]
            .iter()
            .enumerate()
            .map(|(i, t)| build_example(i, task, t.to_string(), if i % 2 == 0 { "yes" } else { "no" }.into(), None).unwrap())
            .collect();
        let test = ["is snow white", "do cats bark"]
            .iter()
            .enumerate()
            .map(|(i, t)| build_example(i, task, t.to_string(), if i == 0 { "yes" } else { "no" }.into(), None).unwrap())
            .collect();
        Dataset::new("qa", task, train, test).unwrap()
    }

    #[test]
    fn ids_issues_q_plus_one_calls() {
        let ds = qa_dataset();
        let chat = ScriptedProvider::new();
        chat.add_rule(regex::Regex::new("(?s).*").unwrap(), "Answer: yes\nReason: it is so");
        let embedder = Embedder::offline();
        let cfg = RunConfig { k: 2, q: 3, ..RunConfig::default() };
        let exp = Experiment::prepare(&ds, &chat, &embedder, cfg).unwrap();
        let record = exp.run(2).unwrap();
        for t in &record.traces {
            assert_eq!(t.chat_calls, 4);
            assert_eq!(t.path_embeddings, 3);
            assert_eq!(t.answer_set.len(), 3);
            assert!(t.iterations.windows(2).all(|w| w[1].reasoning_path_in.as_deref() == Some(&w[0].reasoning_path_out)));
            assert_eq!(t.iterations[0].reasoning_path_in.as_deref(), Some(t.zero_shot.as_ref().unwrap().reasoning_path.as_str()));
        }
        let m = record.metrics.unwrap();
        assert_eq!(m.evaluation.correct, 1);
        assert_eq!(m.cost.chat_calls, 8);
    }

    #[test]
    fn provider_failure_leaves_partial_trace() {
        let ds = qa_dataset();
        let chat = ScriptedProvider::new();
        chat.push_for_query(0, "Reason: first\nAnswer: yes");
        chat.push_for_query(0, "Answer: yes\nReason: second");
        let embedder = Embedder::offline();
        let exp = Experiment::prepare(&ds, &chat, &embedder, RunConfig { k: 2, ..RunConfig::default() }).unwrap();
        let t = exp.run_ids(&ds.test[0]);
        assert_eq!(t.iterations.len(), 1);
        assert_eq!(t.error.as_ref().unwrap().kind, FailureKind::Provider);
        assert_eq!(t.final_answer, a("yes"));
    }

    struct Overflowing;

    impl ChatProvider for Overflowing {
        fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
            let text = request.prompt_text();
            if text.matches("\nAnswer: ").count() > 1 {
                Err(LlmError::ContextLength("too long".into()))
            } else {
                Ok("Answer: no\nReason: short".into())
            }
        }
    }

    #[test]
    fn context_overflow_drops_demonstrations() {
        let ds = qa_dataset();
        let embedder = Embedder::offline();
        let cfg = RunConfig {
            strategy: Strategy::TopkConsistency,
            k: 3,
            q: 1,
            ..RunConfig::default()
        };
        let exp = Experiment::prepare(&ds, &Overflowing, &embedder, cfg).unwrap();
        let t = exp.run_query(&ds.test[1]);
        assert!(t.is_complete(), "{:?}", t.error);
        assert_eq!(t.iterations[0].demo_indices.len(), 1);
        assert_eq!(t.chat_calls, 3);
    }

    #[test]
    fn evaluate_counts() {
        let ds = qa_dataset();
        let mk = |id: usize, ans: Answer| IterationTrace {
            final_answer: ans,
            ..IterationTrace::start(&ds.test[id])
        };
        let e = evaluate(&[mk(0, a("yes")), mk(1, Answer::Abstain)], &ds.test).unwrap();
        assert_eq!((e.accuracy, e.correct, e.wrong, e.abstained), (0.5, 1, 1, 1));
        assert!(evaluate(&[mk(0, a("yes"))], &ds.test).is_err());
    }
}
