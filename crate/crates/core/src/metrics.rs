//! Post-hoc diagnostics over finished traces: how close demonstrations sit to
//! their query, how similar they are to each other, and how often later
//! iterations re-select earlier demonstrations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, EmbeddingVector};
use crate::pipeline::{Evaluation, IterationTrace};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("pairwise similarity needs at least two demonstrations, got {0}")]
    TooFewDemos(usize),
    #[error("no demonstrations to compare against")]
    NoDemos,
    #[error("iteration {j} is out of range (shortest trace has {available} iterations)")]
    IterationOutOfRange { j: usize, available: usize },
    #[error("{traces} traces but {queries} query vectors")]
    Misaligned { traces: usize, queries: usize },
    #[error("demonstration index {0} is outside the training split")]
    BadIndex(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Mean cosine over all unordered pairs of `demos`.
pub fn pairwise_diversity(demos: &[EmbeddingVector]) -> Result<f64, MetricsError> {
    let k = demos.len();
    if k < 2 {
        return Err(MetricsError::TooFewDemos(k));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += cosine(&demos[i], &demos[j])?;
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// Mean cosine between `query` and each demonstration.
pub fn query_demo_similarity(query: &EmbeddingVector, demos: &[EmbeddingVector]) -> Result<f64, MetricsError> {
    if demos.is_empty() {
        return Err(MetricsError::NoDemos);
    }
    let mut sum = 0.0;
    for d in demos {
        sum += cosine(query, d)?;
    }
    Ok(sum / demos.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySimilarity {
    pub query_id: usize,
    /// Averaged over the query's demonstration sets.
    pub query_demo_similarity: f64,
    /// `None` when every set has fewer than two demonstrations.
    pub pairwise_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub avg_query_demo_similarity: f64,
    pub avg_pairwise_similarity: Option<f64>,
    pub per_query: Vec<QuerySimilarity>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-query means over each iteration's demonstration set, then the mean
/// over queries. `query_vecs[i]` belongs to `traces[i]`.
pub fn similarity_report(
    traces: &[IterationTrace],
    query_vecs: &[EmbeddingVector],
    train: &[EmbeddingVector],
) -> Result<SimilarityReport, MetricsError> {
    if traces.len() != query_vecs.len() {
        return Err(MetricsError::Misaligned {
            traces: traces.len(),
            queries: query_vecs.len(),
        });
    }
    let mut per_query = Vec::with_capacity(traces.len());
    for (trace, qv) in traces.iter().zip(query_vecs) {
        let mut sims = Vec::new();
        let mut pairs = Vec::new();
        for it in &trace.iterations {
            let demos = it
                .demo_indices
                .iter()
                .map(|&i| train.get(i).cloned().ok_or(MetricsError::BadIndex(i)))
                .collect::<Result<Vec<_>, _>>()?;
            sims.push(query_demo_similarity(qv, &demos)?);
            if demos.len() >= 2 {
                pairs.push(pairwise_diversity(&demos)?);
            }
        }
        let Some(sim) = mean(sims) else { continue };
        per_query.push(QuerySimilarity {
            query_id: trace.query_id,
            query_demo_similarity: sim,
            pairwise_similarity: mean(pairs),
        });
    }
    Ok(SimilarityReport {
        avg_query_demo_similarity: mean(per_query.iter().map(|q| q.query_demo_similarity)).unwrap_or(0.0),
        avg_pairwise_similarity: mean(per_query.iter().filter_map(|q| q.pairwise_similarity)),
        per_query,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// 1-based iteration examined.
    pub iteration: usize,
    /// Share of that iteration's demonstration slots already used by an
    /// earlier iteration of the same query.
    pub prop_pre: f64,
    /// Share already used by an earlier iteration that answered wrongly.
    pub prop_pre_wrong: f64,
    pub slots: usize,
}

/// Re-selection rates at iteration `j`, counted per demonstration slot.
/// Abstentions count as wrong answers.
pub fn overlap_proportions(traces: &[IterationTrace], j: usize) -> Result<OverlapReport, MetricsError> {
    let available = traces.iter().map(|t| t.iterations.len()).min().unwrap_or(0);
    if j == 0 || j > available {
        return Err(MetricsError::IterationOutOfRange { j, available });
    }
    let (mut slots, mut pre, mut pre_wrong) = (0usize, 0usize, 0usize);
    for trace in traces {
        let mut seen = HashSet::new();
        let mut seen_wrong = HashSet::new();
        for it in &trace.iterations[..j - 1] {
            let wrong = !it.answer.matches(&trace.gold_label);
            for &i in &it.demo_indices {
                seen.insert(i);
                if wrong {
                    seen_wrong.insert(i);
                }
            }
        }
        for i in &trace.iterations[j - 1].demo_indices {
            slots += 1;
            pre += usize::from(seen.contains(i));
            pre_wrong += usize::from(seen_wrong.contains(i));
        }
    }
    let frac = |n: usize| if slots == 0 { 0.0 } else { n as f64 / slots as f64 };
    Ok(OverlapReport {
        iteration: j,
        prop_pre: frac(pre),
        prop_pre_wrong: frac(pre_wrong),
        slots,
    })
}

/// Request counts. IDS spends one extra chat call per query on the zero-shot step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub queries: usize,
    pub chat_calls: usize,
    pub zero_shot_calls: usize,
    pub icl_calls: usize,
    pub path_embeddings: usize,
    pub chat_calls_per_query: f64,
}

impl CostReport {
    pub fn from_traces(traces: &[IterationTrace]) -> Self {
        let chat_calls: usize = traces.iter().map(|t| t.chat_calls).sum();
        let zero_shot_calls = traces.iter().filter(|t| t.zero_shot.is_some()).count();
        Self {
            queries: traces.len(),
            chat_calls,
            zero_shot_calls,
            icl_calls: chat_calls - zero_shot_calls,
            path_embeddings: traces.iter().map(|t| t.path_embeddings).sum(),
            chat_calls_per_query: if traces.is_empty() { 0.0 } else { chat_calls as f64 / traces.len() as f64 },
        }
    }
}

/// The `metrics.json` payload of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub evaluation: Evaluation,
    pub similarity: SimilarityReport,
    /// One entry per iteration from 2 to q.
    pub overlap: Vec<OverlapReport>,
    pub cost: CostReport,
}

impl MetricsBlock {
    pub fn overlap_at(&self, j: usize) -> Option<&OverlapReport> {
        self.overlap.iter().find(|o| o.iteration == j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Answer;
    use crate::pipeline::IterationRecord;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec())
    }

    #[test]
    fn pairwise_identical_and_orthogonal() {
        let same = vec![v(&[1.0, 2.0]); 4];
        assert!((pairwise_diversity(&same).unwrap() - 1.0).abs() < 1e-12);
        let basis = [v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])];
        assert_eq!(pairwise_diversity(&basis).unwrap(), 0.0);
        assert!(matches!(pairwise_diversity(&basis[..1]), Err(MetricsError::TooFewDemos(1))));
    }

    #[test]
    fn query_similarity_examples() {
        let q = v(&[0.0, 3.0]);
        assert!((query_demo_similarity(&q, &[q.clone(), q.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(query_demo_similarity(&q, &[v(&[2.0, 0.0])]).unwrap(), 0.0);
        assert!(query_demo_similarity(&q, &[]).is_err());
    }

    pub(crate) fn record(iteration: usize, demos: &[usize], answer: &str) -> IterationRecord {
        IterationRecord {
            iteration,
            reasoning_path_in: None,
            demo_indices: demos.to_vec(),
            demo_scores: None,
            prompt: String::new(),
            raw_response: String::new(),
            answer: Answer::Label(answer.into()),
            reasoning_path_out: String::new(),
        }
    }

    fn trace(gold: &str, iterations: Vec<IterationRecord>) -> IterationTrace {
        let answer_set: Vec<Answer> = iterations.iter().map(|r| r.answer.clone()).collect();
        IterationTrace {
            query_id: 0,
            gold_label: gold.into(),
            zero_shot: None,
            final_answer: crate::pipeline::majority_vote(&answer_set),
            answer_set,
            iterations,
            chat_calls: 0,
            path_embeddings: 0,
            error: None,
        }
    }

    #[test]
    fn overlap_hand_built() {
        let t = trace(
            "a",
            vec![record(1, &[0, 1, 2, 3], "b"), record(2, &[4, 5, 6, 7], "a"), record(3, &[0, 1, 4, 9], "a")],
        );
        let r = overlap_proportions(&[t.clone()], 3).unwrap();
        assert_eq!((r.prop_pre, r.prop_pre_wrong), (0.75, 0.5));
        assert_eq!(overlap_proportions(&[t.clone()], 1).unwrap().prop_pre, 0.0);
        assert!(overlap_proportions(&[t.clone()], 4).is_err());
        assert!(overlap_proportions(&[t], 0).is_err());
    }

    #[test]
    fn overlap_repeat_and_fresh() {
        let repeat = trace("a", vec![record(1, &[1, 2], "a"), record(2, &[2, 1], "a")]);
        assert_eq!(overlap_proportions(&[repeat], 2).unwrap().prop_pre, 1.0);
        let fresh = trace("a", vec![record(1, &[1, 2], "a"), record(2, &[3, 4], "a")]);
        assert_eq!(overlap_proportions(&[fresh], 2).unwrap().prop_pre, 0.0);
    }

    proptest! {
        #[test]
        fn pairwise_permutation_and_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 4), 2..7),
            scale in 0.01f64..100.0,
            rot in 0usize..7,
        ) {
            let vs: Vec<EmbeddingVector> = rows.iter().map(|r| v(r)).collect();
            let base = pairwise_diversity(&vs).unwrap();
            let mut rotated = vs.clone();
            rotated.rotate_left(rot % vs.len());
            prop_assert!((pairwise_diversity(&rotated).unwrap() - base).abs() < 1e-12);
            let scaled: Vec<EmbeddingVector> = vs.iter().map(|x| x.scaled(scale)).collect();
            prop_assert!((pairwise_diversity(&scaled).unwrap() - base).abs() < 1e-12);
            let q = v(&rows[0]);
            let s = query_demo_similarity(&q, &vs).unwrap();
            prop_assert!((query_demo_similarity(&q.scaled(scale), &scaled).unwrap() - s).abs() < 1e-12);
        }
    }
}
