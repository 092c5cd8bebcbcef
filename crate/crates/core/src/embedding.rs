//! Text embeddings: providers, a content-addressed cache and cosine similarity.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fnv::FnvHasher;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::content_hash;
use crate::http::{self, RetryPolicy};

/// Dimension of the offline hashed-n-gram embedding.
pub const OFFLINE_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no texts to embed")]
    EmptyInput,
    #[error("embedding transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("embedding provider rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("dimension mismatch: expected {expected}, got {got} (did the embedding model change?)")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("embedding cache {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding cache {path}:{line}: {message}")]
    CacheCorrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// A dense vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((a.dot(b) / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingCacheKey {
    pub provider_id: String,
    pub model_id: String,
    pub content_hash: String,
}

impl EmbeddingCacheKey {
    pub fn new(provider_id: &str, model_id: &str, text: &str) -> Self {
        Self {
            provider_id: provider_id.to_string(),
            model_id: model_id.to_string(),
            content_hash: content_hash(text),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    /// One raw vector per input text, order-aligned.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Deterministic bag-of-hashed-n-grams embedding.
///
/// Features are lowercase word unigrams (weight 1) plus the character bigrams of
/// each word with boundary markers (weight 0.5), hashed into [`OFFLINE_DIM`]
/// buckets and L2-normalized. Word order does not matter. Text without any
/// alphanumeric token maps to a reserved unit vector.
#[derive(Debug, Clone, Default)]
pub struct OfflineEmbedder;

impl OfflineEmbedder {
    pub const PROVIDER_ID: &'static str = "offline";
    pub const MODEL_ID: &'static str = "hashed-ngrams-256";

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        offline_embed(text)
    }
}

fn bucket(kind: u8, feature: &str) -> usize {
    let mut h = FnvHasher::default();
    h.write_u8(kind);
    h.write(feature.as_bytes());
    (h.finish() % OFFLINE_DIM as u64) as usize
}

/// The reserved vector returned for text with no tokens.
pub fn empty_text_vector() -> EmbeddingVector {
    let mut v = vec![0.0; OFFLINE_DIM];
    v[0] = 1.0;
    EmbeddingVector::new(v)
}

pub fn offline_embed(text: &str) -> EmbeddingVector {
    let lowered = text.to_lowercase();
    let mut acc = vec![0.0f64; OFFLINE_DIM];
    let mut any = false;
    for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        any = true;
        acc[bucket(b'w', token)] += 1.0;
        let chars: Vec<char> = std::iter::once('^')
            .chain(token.chars())
            .chain(std::iter::once('$'))
            .collect();
        for pair in chars.windows(2) {
            let bigram: String = pair.iter().collect();
            acc[bucket(b'c', &bigram)] += 0.5;
        }
    }
    if !any {
        return empty_text_vector();
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    EmbeddingVector::new(acc.into_iter().map(|v| v / norm).collect())
}

impl EmbeddingProvider for OfflineEmbedder {
    fn provider_id(&self) -> &str {
        Self::PROVIDER_ID
    }

    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| offline_embed(t).into()).collect())
    }
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbeddingProvider {
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            retry: RetryPolicy::default(),
            agent: http::agent(Duration::from_secs(120)),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

enum Attempt {
    Transient(String, Option<Duration>),
    Fatal(EmbeddingError),
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "http"
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let url = http::join_url(&self.base_url, "embeddings");
        let body = EmbeddingsRequest {
            model: &self.model,
            input: texts,
        };
        let reply = self.retry.run(
            |_| match http::post_json(&self.agent, &url, self.api_key.as_deref(), &body) {
                Err(msg) => Err(Attempt::Transient(msg, None)),
                Ok(r) if http::is_transient_status(r.status) => {
                    Err(Attempt::Transient(format!("HTTP {}: {}", r.status, r.body), r.retry_after))
                }
                Ok(r) if r.status >= 400 => Err(Attempt::Fatal(EmbeddingError::Rejected {
                    status: r.status,
                    message: r.body,
                })),
                Ok(r) => Ok(r.body),
            },
            |e| match e {
                Attempt::Transient(_, hint) => Some(*hint),
                Attempt::Fatal(_) => None,
            },
        );
        let body = match reply {
            Ok(b) => b,
            Err((Attempt::Transient(message, _), attempts)) => {
                return Err(EmbeddingError::Transport { message, attempts })
            }
            Err((Attempt::Fatal(e), _)) => return Err(e),
        };
        let mut parsed: EmbeddingsResponse =
            serde_json::from_str(&body).map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    #[serde(flatten)]
    key: EmbeddingCacheKey,
    vector: Vec<f64>,
}

/// Content-addressed embedding store, optionally backed by an append-only JSONL file.
///
/// Concurrent misses on the same key may both fetch; the later insert wins.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<EmbeddingCacheKey, EmbeddingVector>>,
    dims: RwLock<HashMap<(String, String), usize>>,
    sink: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Load every record already in `path` and append new ones to it.
    pub fn open(path: &Path) -> Result<Self, EmbeddingError> {
        let io_err = |source| EmbeddingError::CacheIo {
            path: path.to_path_buf(),
            source,
        };
        let cache = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::CacheCorrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                cache.insert_unlogged(rec.key, EmbeddingVector::new(rec.vector))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            sink: Some((path.to_path_buf(), Mutex::new(BufWriter::new(file)))),
            ..cache
        })
    }

    pub fn get(&self, key: &EmbeddingCacheKey) -> Option<EmbeddingVector> {
        self.entries.read().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_dim(&self, key: &EmbeddingCacheKey, dim: usize) -> Result<(), EmbeddingError> {
        let model = (key.provider_id.clone(), key.model_id.clone());
        if let Some(&expected) = self.dims.read().get(&model) {
            if expected != dim {
                return Err(EmbeddingError::DimensionMismatch { expected, got: dim });
            }
            return Ok(());
        }
        let mut dims = self.dims.write();
        let expected = *dims.entry(model).or_insert(dim);
        if expected != dim {
            return Err(EmbeddingError::DimensionMismatch { expected, got: dim });
        }
        Ok(())
    }

    fn insert_unlogged(&self, key: EmbeddingCacheKey, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        self.check_dim(&key, vector.dim())?;
        self.entries.write().insert(key, vector);
        Ok(())
    }

    pub fn insert(&self, key: EmbeddingCacheKey, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        self.check_dim(&key, vector.dim())?;
        if let Some((path, sink)) = &self.sink {
            let rec = CacheRecord {
                key: key.clone(),
                vector: vector.values().to_vec(),
            };
            let line = serde_json::to_string(&rec).expect("cache record serializes");
            let mut w = sink.lock();
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| EmbeddingError::CacheIo {
                    path: path.clone(),
                    source,
                })?;
        }
        self.entries.write().insert(key, vector);
        Ok(())
    }
}

/// Provider plus cache: the entry point the pipeline uses.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<EmbeddingCache>,
    embed_calls: AtomicUsize,
    fetched_texts: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Arc<EmbeddingCache>) -> Self {
        Self {
            provider,
            cache,
            embed_calls: AtomicUsize::new(0),
            fetched_texts: AtomicUsize::new(0),
        }
    }

    pub fn offline() -> Self {
        Self::new(Arc::new(OfflineEmbedder), Arc::new(EmbeddingCache::in_memory()))
    }

    pub fn key_for(&self, text: &str) -> EmbeddingCacheKey {
        EmbeddingCacheKey::new(self.provider.provider_id(), self.provider.model_id(), text)
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Number of `embed` calls served so far.
    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::Relaxed)
    }

    /// Number of texts actually sent to the provider (cache misses).
    pub fn fetched_texts(&self) -> usize {
        self.fetched_texts.load(Ordering::Relaxed)
    }

    /// Embed `texts`, serving repeats from the cache. Duplicate texts within one
    /// call are fetched once.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        let keys: Vec<EmbeddingCacheKey> = texts.iter().map(|t| self.key_for(t)).collect();
        let mut found: HashMap<&EmbeddingCacheKey, EmbeddingVector> = HashMap::new();
        let mut missing: Vec<(&EmbeddingCacheKey, &String)> = Vec::new();
        for (key, text) in keys.iter().zip(texts) {
            if found.contains_key(key) || missing.iter().any(|(k, _)| *k == key) {
                continue;
            }
            match self.cache.get(key) {
                Some(v) => {
                    found.insert(key, v);
                }
                None => missing.push((key, text)),
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|(_, t)| (*t).clone()).collect();
            self.fetched_texts.fetch_add(batch.len(), Ordering::Relaxed);
            let vectors = self.provider.embed_batch(&batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbeddingError::Malformed(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            for ((key, _), raw) in missing.into_iter().zip(vectors) {
                let v = EmbeddingVector::new(raw);
                self.cache.insert(key.clone(), v.clone())?;
                found.insert(key, v);
            }
        }
        Ok(keys.iter().map(|k| found[k].clone()).collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Counting {
        inner: OfflineEmbedder,
        calls: AtomicUsize,
        texts: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn provider_id(&self) -> &str {
            "counting"
        }
        fn model_id(&self) -> &str {
            "m"
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.texts.fetch_add(texts.len(), Ordering::Relaxed);
            self.inner.embed_batch(texts)
        }
    }

    fn counting() -> Arc<Counting> {
        Arc::new(Counting {
            inner: OfflineEmbedder,
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        })
    }

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec())
    }

    #[test]
    fn cosine_basics() {
        let a = v(&[1.0, 2.0, 2.0]);
        let b = v(&[2.0, 1.0, 2.0]);
        // dot = 8, |a| = |b| = 3
        assert!((cosine(&a, &b).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &a), Err(EmbeddingError::DimensionMismatch { .. })));
        assert!(matches!(cosine(&v(&[0.0, 0.0, 0.0]), &a), Err(EmbeddingError::ZeroNorm)));
    }

    #[test]
    fn second_embed_hits_cache() {
        let p = counting();
        let e = Embedder::new(p.clone(), Arc::new(EmbeddingCache::in_memory()));
        let a = e.embed_one("the same text").unwrap();
        let b = e.embed_one("the same text").unwrap();
        assert_eq!(a, b);
        assert_eq!(p.calls.load(Ordering::Relaxed), 1);
        assert_eq!(e.fetched_texts(), 1);
        assert_eq!(e.embed_calls(), 2);
    }

    #[test]
    fn offline_properties() {
        let x = offline_embed("alpha beta");
        assert_eq!(x, offline_embed("alpha beta"));
        assert_eq!(offline_embed("beta alpha"), x);
        assert_eq!(x.dim(), OFFLINE_DIM);
        assert!((x.norm() - 1.0).abs() < 1e-12);
        let second = cosine(&x, &offline_embed("alpha gamma")).unwrap();
        let third = cosine(&x, &offline_embed("delta epsilon")).unwrap();
        assert!(second > third, "{second} <= {third}");
        assert_eq!(offline_embed(""), empty_text_vector());
        assert_eq!(offline_embed("  ?! "), empty_text_vector());
        assert!((empty_text_vector().norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shared_tokens_beat_disjoint_tokens() {
        let base = offline_embed("the quick brown fox jumps over the lazy dog");
        let shared = offline_embed("the quick brown fox sleeps under the lazy cat");
        let disjoint = offline_embed("seven purple elephants compute integrals");
        assert!(cosine(&base, &shared).unwrap() > cosine(&base, &disjoint).unwrap());
    }

    #[test]
    fn persisted_cache_reloads_and_detects_model_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        {
            let cache = Arc::new(EmbeddingCache::open(&path).unwrap());
            let e = Embedder::new(Arc::new(OfflineEmbedder), cache);
            e.embed(&["one".into(), "two".into()]).unwrap();
        }
        let cache = Arc::new(EmbeddingCache::open(&path).unwrap());
        assert_eq!(cache.len(), 2);
        let e = Embedder::new(Arc::new(OfflineEmbedder), cache.clone());
        e.embed(&["one".into(), "two".into()]).unwrap();
        assert_eq!(e.fetched_texts(), 0);

        let key = EmbeddingCacheKey::new(OfflineEmbedder::PROVIDER_ID, OfflineEmbedder::MODEL_ID, "three");
        let err = cache.insert(key, v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionMismatch { expected: 256, got: 2 }));
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(Embedder::offline().embed(&[]), Err(EmbeddingError::EmptyInput)));
    }

    proptest! {
        #[test]
        fn provider_sees_each_distinct_text_once(
            calls in prop::collection::vec(prop::collection::vec(0usize..6, 1..5), 1..12)
        ) {
            let words = ["a b", "c", "d e f", "a b", "g", "h i"];
            let p = counting();
            let e = Embedder::new(p.clone(), Arc::new(EmbeddingCache::in_memory()));
            let mut distinct = std::collections::HashSet::new();
            for call in &calls {
                let texts: Vec<String> = call.iter().map(|&i| words[i].to_string()).collect();
                distinct.extend(texts.iter().cloned());
                let out = e.embed(&texts).unwrap();
                prop_assert_eq!(out.len(), texts.len());
                for (t, vec) in texts.iter().zip(&out) {
                    prop_assert_eq!(vec, &offline_embed(t));
                }
            }
            prop_assert_eq!(p.texts.load(Ordering::Relaxed), distinct.len());
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in prop::collection::vec(-100.0f64..100.0, 8),
            b in prop::collection::vec(-100.0f64..100.0, 8),
        ) {
            let (a, b) = (EmbeddingVector::new(a), EmbeddingVector::new(b));
            prop_assume!(a.norm() > 0.0 && b.norm() > 0.0);
            let ab = cosine(&a, &b).unwrap();
            let ba = cosine(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-15);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }
    }
}
