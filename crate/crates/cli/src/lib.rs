//! `ids` command-line driver: run experiments, record/replay provider
//! sessions and compare finished runs.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid configuration,
//! 3 provider failure (the run can be continued with `--resume`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ids_core::corpus::CorpusError;
use ids_core::embedding::{EmbeddingCache, EmbeddingError, EmbeddingProvider, HttpEmbeddingProvider, OfflineEmbedder};
use ids_core::llm::{
    ChatProvider, CotTrigger, RateLimiter, RecordingProvider, ReplayProvider, ResilientProvider, ScriptedProvider,
};
use ids_core::metrics::MetricsBlock;
use ids_core::pipeline::{
    new_run_id, Experiment, FailureKind, PipelineError, RunConfig, RunDir, RunManifest, RunRecord, Strategy,
};
use ids_core::selectors::KMeansConfig;
use ids_core::{Dataset, Embedder, GenerationParams, RetryPolicy, TaskKind};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;

pub const API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const BASE_URL_ENV: &str = "OPENAI_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn provider(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PROVIDER,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) | PipelineError::Select(_) => EXIT_CONFIG,
            PipelineError::Embedding(EmbeddingError::Transport { .. } | EmbeddingError::Rejected { .. }) => EXIT_PROVIDER,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => Self::other(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ids", version, about = "Iterative demonstration selection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and persist its traces and metrics.
    Run(RunArgs),
    /// Like `run`, also appending every chat exchange to a session file.
    Record(SessionArgs),
    /// Like `run`, answering every chat call from a recorded session.
    Replay(SessionArgs),
    /// Compare finished runs as a table, also written as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON file with any of the settings below (flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue a run that stopped on failed queries.
    #[arg(long, value_name = "RUN_ID")]
    pub resume: Option<String>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    /// Session file (JSONL) to write or read.
    #[arg(long)]
    pub session: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run ids to compare.
    #[arg(required = true)]
    pub run_ids: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub run_dir: PathBuf,
    /// Iteration at which to report demonstration overlap.
    #[arg(long, default_value_t = 2)]
    pub overlap_at: usize,
    #[arg(long, default_value = "report.csv")]
    pub csv: PathBuf,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: CorpusError| e.to_string())
}

/// Experiment settings. Every field is optional so that flags and the
/// `--config` file can be layered; the same names are used as JSON keys.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Training split (JSONL with `input`, `label`, optional `choices`).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test split, same format.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// topic_classification, question_answering, commonsense_reasoning,
    /// logical_reasoning or mathematical_reasoning.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// ids, topk_consistency, random_voting, cluster_voting or mmr_consistency.
    #[arg(long, value_parser = Strategy::from_str)]
    pub strategy: Option<Strategy>,
    /// Demonstrations per prompt (default 4).
    #[arg(long)]
    pub k: Option<usize>,
    /// Iterations / decoding paths (default 3).
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sampling temperature (default 0.7).
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Chat model id (default gpt-3.5-turbo).
    #[arg(long)]
    pub model: Option<String>,
    /// default, trigger1, trigger2 or custom:<text>.
    #[arg(long, value_parser = CotTrigger::from_str)]
    pub trigger: Option<CotTrigger>,
    /// scripted:<fixture.jsonl>, replay:<session.jsonl> or openai[:<model>].
    #[arg(long, value_parser = ProviderSpec::from_str)]
    pub provider: Option<ProviderSpec>,
    /// offline or openai[:<model>].
    #[arg(long, value_parser = EmbedSpec::from_str)]
    pub embed_provider: Option<EmbedSpec>,
    /// Queries answered concurrently (default 4).
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Root directory for run directories (default ./runs).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Explicit id for a new run.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Seeded subsample of the training split.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Seeded subsample of the test split.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub mmr_lambda: Option<f64>,
    /// Chat requests per minute for remote providers.
    #[arg(long)]
    pub rpm: Option<f64>,
    /// Send the task instruction as a system message.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub instruction_as_system: Option<bool>,
}

macro_rules! layer {
    ($base:ident, $top:ident, $($field:ident),+) => {
        Settings { $($field: $top.$field.or($base.$field)),+ }
    };
}

impl Settings {
    /// `self` over `base`: fields set here win.
    pub fn over(self, base: Settings) -> Settings {
        let top = self;
        layer!(
            base, top, train, test, task, strategy, k, q, seed, temperature, top_p, max_tokens, model, trigger,
            provider, embed_provider, parallel, run_dir, run_id, n_train, n_test, mmr_lambda, rpm,
            instruction_as_system
        )
    }

    pub fn from_file(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::other(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("--config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ProviderSpec {
    Scripted(PathBuf),
    Replay(PathBuf),
    OpenAi(Option<String>),
}

impl FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("scripted", Some(p)) if !p.is_empty() => Ok(Self::Scripted(p.into())),
            ("replay", Some(p)) if !p.is_empty() => Ok(Self::Replay(p.into())),
            ("openai", None) => Ok(Self::OpenAi(None)),
            ("openai", Some(m)) if !m.is_empty() => Ok(Self::OpenAi(Some(m.into()))),
            _ => Err(format!(
                "unknown provider `{s}` (expected scripted:<path>, replay:<path> or openai[:<model>])"
            )),
        }
    }
}

impl std::fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Scripted(p) => write!(f, "scripted:{}", p.display()),
            Self::Replay(p) => write!(f, "replay:{}", p.display()),
            Self::OpenAi(None) => f.write_str("openai"),
            Self::OpenAi(Some(m)) => write!(f, "openai:{m}"),
        }
    }
}

impl From<ProviderSpec> for String {
    fn from(p: ProviderSpec) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for ProviderSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EmbedSpec {
    Offline,
    OpenAi(Option<String>),
}

impl FromStr for EmbedSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Self::Offline),
            "openai" => Ok(Self::OpenAi(None)),
            _ => match s.strip_prefix("openai:") {
                Some(m) if !m.is_empty() => Ok(Self::OpenAi(Some(m.into()))),
                _ => Err(format!("unknown embedding provider `{s}` (expected offline or openai[:<model>])")),
            },
        }
    }
}

impl std::fmt::Display for EmbedSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Offline => f.write_str("offline"),
            Self::OpenAi(None) => f.write_str("openai"),
            Self::OpenAi(Some(m)) => write!(f, "openai:{m}"),
        }
    }
}

impl From<EmbedSpec> for String {
    fn from(p: EmbedSpec) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for EmbedSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Fully resolved settings; persisted in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub task: TaskKind,
    pub provider: ProviderSpec,
    pub embed_provider: EmbedSpec,
    pub parallel: usize,
    pub run_dir: PathBuf,
    pub run_id: Option<String>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub rpm: Option<f64>,
    /// Session file written while recording.
    pub record_session: Option<PathBuf>,
    pub run: RunConfig,
}

const DEFAULT_EMBED_MODEL: &str = "text-embedding-ada-002";

impl CliConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(flags: Settings, file: Option<Settings>) -> Result<CliConfig, CliError> {
        let s = flags.over(file.unwrap_or_default());
        let required = |v: Option<PathBuf>, flag: &str| v.ok_or_else(|| CliError::config(format!("missing required setting --{flag}")));
        let train = required(s.train, "train")?;
        let test = required(s.test, "test")?;
        let task = s.task.ok_or_else(|| CliError::config("missing required setting --task"))?;
        let provider = s
            .provider
            .ok_or_else(|| CliError::config("missing required setting --provider"))?;
        let embed_provider = s.embed_provider.unwrap_or(EmbedSpec::Offline);

        let defaults = RunConfig::default();
        let mut generation = GenerationParams::default();
        if let Some(m) = s.model {
            generation.model_id = m;
        }
        if let ProviderSpec::OpenAi(Some(m)) = &provider {
            generation.model_id = m.clone();
        }
        if let Some(t) = s.temperature {
            generation.temperature = t;
        }
        if let Some(p) = s.top_p {
            generation.top_p = p;
        }
        if s.max_tokens.is_some() {
            generation.max_tokens = s.max_tokens;
        }
        let embedding_provider = match &embed_provider {
            EmbedSpec::Offline => format!("{}:{}", OfflineEmbedder::PROVIDER_ID, OfflineEmbedder::MODEL_ID),
            EmbedSpec::OpenAi(m) => format!("openai:{}", m.as_deref().unwrap_or(DEFAULT_EMBED_MODEL)),
        };
        let run = RunConfig {
            strategy: s.strategy.unwrap_or(defaults.strategy),
            k: s.k.unwrap_or(defaults.k),
            q: s.q.unwrap_or(defaults.q),
            generation,
            seed: s.seed.unwrap_or(defaults.seed),
            trigger: s.trigger.unwrap_or_default(),
            mmr_lambda: s.mmr_lambda.unwrap_or(defaults.mmr_lambda),
            kmeans: KMeansConfig::default(),
            instruction_as_system: s.instruction_as_system.unwrap_or(false),
            chat_provider: provider.to_string(),
            embedding_provider,
        };
        run.validate().map_err(|e| CliError::config(e.to_string()))?;
        let parallel = s.parallel.unwrap_or(4);
        if parallel == 0 {
            return Err(CliError::config("--parallel must be at least 1"));
        }
        if let Some(rpm) = s.rpm {
            if !(rpm > 0.0) {
                return Err(CliError::config("--rpm must be positive"));
            }
        }
        Ok(CliConfig {
            train,
            test,
            task,
            provider,
            embed_provider,
            parallel,
            run_dir: s.run_dir.unwrap_or_else(|| PathBuf::from("runs")),
            run_id: s.run_id,
            n_train: s.n_train,
            n_test: s.n_test,
            rpm: s.rpm,
            record_session: None,
            run,
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let name = self
            .test
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.task.to_string());
        let ds = Dataset::load(name, self.task, &self.train, &self.test)?;
        Ok(match (self.n_train, self.n_test) {
            (None, None) => ds,
            (a, b) => ds.subsample(a.unwrap_or(usize::MAX), b.unwrap_or(usize::MAX), self.run.seed),
        })
    }
}

fn api_key() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

fn base_url() -> String {
    std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.into())
}

fn chat_provider(cfg: &CliConfig) -> Result<Arc<dyn ChatProvider>, CliError> {
    let provider: Arc<dyn ChatProvider> = match &cfg.provider {
        ProviderSpec::Scripted(path) => Arc::new(
            ScriptedProvider::from_fixture(path).map_err(|e| CliError::config(format!("--provider: {e}")))?,
        ),
        ProviderSpec::Replay(path) => {
            Arc::new(ReplayProvider::open(path).map_err(|e| CliError::config(format!("--provider: {e}")))?)
        }
        ProviderSpec::OpenAi(_) => {
            let key = api_key().ok_or_else(|| CliError::config(format!("--provider openai needs {API_KEY_ENV}")))?;
            let limiter = cfg.rpm.map(|rpm| Arc::new(RateLimiter::new(rpm, cfg.parallel as u32)));
            let http = ids_core::llm::OpenAiChatProvider::new(base_url(), Some(key));
            Arc::new(ResilientProvider::new(Arc::new(http), RetryPolicy::default(), limiter))
        }
    };
    Ok(match &cfg.record_session {
        Some(session) => Arc::new(
            RecordingProvider::create(provider, session).map_err(|e| CliError::other(format!("--session: {e}")))?,
        ),
        None => provider,
    })
}

fn embedder(cfg: &CliConfig, dir: &RunDir) -> Result<Embedder, CliError> {
    let provider: Arc<dyn EmbeddingProvider> = match &cfg.embed_provider {
        EmbedSpec::Offline => Arc::new(OfflineEmbedder),
        EmbedSpec::OpenAi(model) => {
            let key =
                api_key().ok_or_else(|| CliError::config(format!("--embed-provider openai needs {API_KEY_ENV}")))?;
            Arc::new(HttpEmbeddingProvider::new(
                base_url(),
                model.clone().unwrap_or_else(|| DEFAULT_EMBED_MODEL.into()),
                Some(key),
            ))
        }
    };
    let cache = EmbeddingCache::open(&dir.embedding_cache_path()).map_err(|e| CliError::other(e.to_string()))?;
    Ok(Embedder::new(provider, Arc::new(cache)))
}

/// What `cmd_run` hands back to the caller.
#[derive(Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub record: RunRecord,
    pub summary: String,
}

/// Start a new run, or continue `resume` from its persisted configuration.
/// Returns an error with [`EXIT_PROVIDER`] when queries failed; the run stays
/// open for `--resume`.
pub fn cmd_run(cfg: CliConfig, resume: Option<&str>, parallel_override: Option<usize>) -> Result<RunOutcome, CliError> {
    let (cfg, dataset, dir) = match resume {
        Some(run_id) => {
            let dir = RunDir::open(&cfg.run_dir, run_id)?;
            let manifest = dir.manifest()?;
            let mut stored: CliConfig = serde_json::from_value(manifest.settings.clone())
                .map_err(|e| CliError::other(format!("run {run_id}: unreadable settings: {e}")))?;
            stored.run_dir = cfg.run_dir.clone();
            if let Some(p) = parallel_override {
                stored.parallel = p;
            }
            let dataset = stored.load_dataset()?;
            (stored, dataset, dir)
        }
        None => {
            let dataset = cfg.load_dataset()?;
            let run_id = cfg.run_id.clone().unwrap_or_else(|| new_run_id(cfg.run.strategy.as_str()));
            let mut manifest = RunManifest::new(run_id, &dataset, cfg.run.clone());
            manifest.settings = serde_json::to_value(&cfg).map_err(|e| CliError::other(e.to_string()))?;
            let dir = RunDir::create(&cfg.run_dir, &manifest)?;
            (cfg, dataset, dir)
        }
    };
    let chat = chat_provider(&cfg)?;
    let embedder = embedder(&cfg, &dir)?;
    let exp = Experiment::prepare(&dataset, chat.as_ref(), &embedder, cfg.run.clone())?;
    let record = exp.run_persisted(&dir, cfg.parallel)?;
    let run_id = record.run_id.clone();

    let failures: Vec<_> = record.failures().collect();
    if !failures.is_empty() {
        let provider_failed = failures
            .iter()
            .any(|t| t.error.as_ref().is_some_and(|e| e.kind == FailureKind::Provider));
        let first = failures[0].error.as_ref().map(|e| e.message.clone()).unwrap_or_default();
        let message = format!(
            "{} of {} queries failed (first: query {}: {first}); continue with `ids run --resume {run_id} --run-dir {}`",
            failures.len(),
            record.traces.len(),
            failures[0].query_id,
            cfg.run_dir.display()
        );
        return Err(if provider_failed {
            CliError::provider(message)
        } else {
            CliError::other(message)
        });
    }
    let metrics = record.metrics.as_ref().ok_or_else(|| CliError::other("run finished without metrics"))?;
    let summary = summarize(&run_id, &record, metrics);
    Ok(RunOutcome {
        run_id,
        record,
        summary,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn summarize(run_id: &str, record: &RunRecord, m: &MetricsBlock) -> String {
    let mut out = String::new();
    let e = &m.evaluation;
    let _ = writeln!(out, "run {run_id} ({}, k={}, q={})", record.config.strategy, record.config.k, record.config.q);
    let _ = writeln!(
        out,
        "accuracy            {:.4}  ({} correct, {} wrong of which {} abstained, {} total)",
        e.accuracy, e.correct, e.wrong, e.abstained, e.total
    );
    let _ = writeln!(out, "query-demo sim      {:.4}", m.similarity.avg_query_demo_similarity);
    let _ = writeln!(out, "pairwise sim        {}", fmt_opt(m.similarity.avg_pairwise_similarity));
    for o in &m.overlap {
        let _ = writeln!(out, "overlap@{:<3}         prop_pre {:.4}  prop_pre_wrong {:.4}", o.iteration, o.prop_pre, o.prop_pre_wrong);
    }
    let c = &m.cost;
    let _ = write!(
        out,
        "chat calls          {} ({} zero-shot, {} in-context; {:.2} per query), path embeddings {}",
        c.chat_calls, c.zero_shot_calls, c.icl_calls, c.chat_calls_per_query, c.path_embeddings
    );
    out
}

const REPORT_COLUMNS: [&str; 15] = [
    "run_id",
    "strategy",
    "task",
    "k",
    "q",
    "queries",
    "accuracy",
    "abstained",
    "query_demo_sim",
    "pairwise_sim",
    "prop_pre",
    "prop_pre_wrong",
    "chat_calls",
    "zero_shot_calls",
    "path_embeddings",
];

/// Render the comparison table and write it as CSV to `args.csv`.
pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut notes = Vec::new();
    for id in &args.run_ids {
        let dir = RunDir::open(&args.run_dir, id).map_err(|e| CliError::other(e.to_string()))?;
        let record = dir.load_record()?;
        let m = record
            .metrics
            .as_ref()
            .ok_or_else(|| CliError::other(format!("run {id} is not complete (no metrics.json)")))?;
        let overlap = m.overlap_at(args.overlap_at);
        if overlap.is_none() {
            notes.push(format!(
                "note: overlap@{} is not available for run {id} (q = {})",
                args.overlap_at, record.config.q
            ));
        }
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        rows.push(vec![
            id.clone(),
            record.config.strategy.to_string(),
            record.dataset.task.to_string(),
            record.config.k.to_string(),
            record.config.q.to_string(),
            m.evaluation.total.to_string(),
            format!("{:.4}", m.evaluation.accuracy),
            m.evaluation.abstained.to_string(),
            format!("{:.4}", m.similarity.avg_query_demo_similarity),
            cell(m.similarity.avg_pairwise_similarity),
            cell(overlap.map(|o| o.prop_pre)),
            cell(overlap.map(|o| o.prop_pre_wrong)),
            m.cost.chat_calls.to_string(),
            m.cost.zero_shot_calls.to_string(),
            m.cost.path_embeddings.to_string(),
        ]);
    }

    let mut header: Vec<String> = REPORT_COLUMNS.iter().map(|c| c.to_string()).collect();
    header[10] = format!("prop_pre@{}", args.overlap_at);
    header[11] = format!("prop_pre_wrong@{}", args.overlap_at);

    let mut writer = csv::Writer::from_path(&args.csv)
        .map_err(|e| CliError::other(format!("--csv {}: {e}", args.csv.display())))?;
    for row in std::iter::once(&header).chain(&rows) {
        writer.write_record(row).map_err(|e| CliError::other(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::other(e.to_string()))?;

    let widths: Vec<usize> = (0..header.len())
        .map(|c| std::iter::once(&header).chain(&rows).map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    for n in notes {
        let _ = writeln!(out, "{n}");
    }
    let _ = write!(out, "csv written to {}", args.csv.display());
    Ok(out)
}

fn resolve_run_args(args: RunArgs) -> Result<(CliConfig, Option<String>, Option<usize>), CliError> {
    let parallel = args.settings.parallel;
    if let Some(run_id) = args.resume {
        // everything else comes from the stored run
        let run_dir = args.settings.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let placeholder = CliConfig {
            train: PathBuf::new(),
            test: PathBuf::new(),
            task: TaskKind::QuestionAnswering,
            provider: ProviderSpec::OpenAi(None),
            embed_provider: EmbedSpec::Offline,
            parallel: parallel.unwrap_or(4),
            run_dir,
            run_id: None,
            n_train: None,
            n_test: None,
            rpm: None,
            record_session: None,
            run: RunConfig::default(),
        };
        return Ok((placeholder, Some(run_id), parallel));
    }
    let file = args.config.as_deref().map(Settings::from_file).transpose()?;
    Ok((CliConfig::resolve(args.settings, file)?, None, None))
}

/// Parse-free entry point used by `main` and the tests. Returns the text to
/// print on success.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, resume, parallel) = resolve_run_args(args)?;
            Ok(cmd_run(cfg, resume.as_deref(), parallel)?.summary)
        }
        Command::Record(args) => {
            if args.run.resume.is_some() {
                return Err(CliError::config("--resume cannot be combined with record"));
            }
            let (mut cfg, _, _) = resolve_run_args(args.run)?;
            if matches!(cfg.provider, ProviderSpec::Replay(_)) {
                return Err(CliError::config("record needs a live or scripted --provider, not replay"));
            }
            cfg.record_session = Some(args.session.clone());
            let out = cmd_run(cfg, None, None)?;
            Ok(format!("{}\nsession written to {}", out.summary, args.session.display()))
        }
        Command::Replay(args) => {
            if args.run.resume.is_some() {
                return Err(CliError::config("--resume cannot be combined with replay"));
            }
            let mut settings = args.run.settings;
            settings.provider = Some(ProviderSpec::Replay(args.session));
            let file = args.run.config.as_deref().map(Settings::from_file).transpose()?;
            let cfg = CliConfig::resolve(settings, file)?;
            Ok(cmd_run(cfg, None, None)?.summary)
        }
        Command::Report(args) => cmd_report(&args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_specs_round_trip() {
        for s in ["scripted:a/b.jsonl", "replay:s.jsonl", "openai", "openai:gpt-4"] {
            assert_eq!(s.parse::<ProviderSpec>().unwrap().to_string(), s);
        }
        for s in ["scripted", "scripted:", "replay", "anthropic", "openai:"] {
            assert!(s.parse::<ProviderSpec>().is_err(), "{s}");
        }
        for s in ["offline", "openai", "openai:text-embedding-3-small"] {
            assert_eq!(s.parse::<EmbedSpec>().unwrap().to_string(), s);
        }
        assert!("local".parse::<EmbedSpec>().is_err());
    }

    #[test]
    fn layering_prefers_the_top() {
        let file = Settings {
            k: Some(2),
            q: Some(5),
            seed: Some(1),
            ..Default::default()
        };
        let flags = Settings {
            q: Some(1),
            ..Default::default()
        };
        let s = flags.over(file);
        assert_eq!((s.k, s.q, s.seed, s.parallel), (Some(2), Some(1), Some(1), None));
    }

    #[test]
    fn resolve_requires_dataset_and_provider() {
        let err = CliConfig::resolve(Settings::default(), None).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("--train"));

        let s = Settings {
            train: Some("t".into()),
            test: Some("e".into()),
            task: Some(TaskKind::QuestionAnswering),
            provider: Some("openai:gpt-4".parse().unwrap()),
            ..Default::default()
        };
        let cfg = CliConfig::resolve(s, None).unwrap();
        assert_eq!(cfg.run.generation.model_id, "gpt-4");
        assert_eq!(cfg.parallel, 4);
        assert_eq!(cfg.run.k, RunConfig::default().k);
        let back: CliConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
