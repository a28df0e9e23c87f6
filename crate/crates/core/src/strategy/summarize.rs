use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::similarity::{SimilarityError, SimilarityMatrix};
use crate::model::{CommitRecord, StrategySummary};
use crate::provider::{CompletionProvider, CompletionRequest, Embedder, ProviderError};

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("at least one summary candidate is required")]
    NoCandidates,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

pub fn summary_prompt(commit: &CommitRecord) -> String {
    format!(
        "The following commit from the codebase `{repo}` optimizes the performance of the function \
         `{func}`.\n\nCommit message:\n{msg}\n\nDiff:\n{diff}\n\
         Summarize, in exactly one sentence, the general optimization strategy this commit applies. \
         Describe the reusable technique, not the specific identifiers.\n",
        repo = commit.repo_id,
        func = commit.function_name,
        msg = commit.message.trim(),
        diff = commit.diff,
    )
}

/// `m` independent summaries of the commit's strategy, in draw order.
pub fn summarize_commit(
    commit: &CommitRecord,
    provider: &dyn CompletionProvider,
    m: usize,
    temperature: f64,
) -> Result<Vec<String>, ProviderError> {
    let prompt = summary_prompt(commit);
    (0..m)
        .map(|i| {
            let req = CompletionRequest::new(&prompt, temperature).with_sample(i as u32);
            provider.complete(&req).map(|s| s.trim().to_string())
        })
        .collect()
}

/// Embeds every candidate and keeps the one with the highest mean cosine
/// similarity to the others (lowest index on ties).
pub fn select_summary(
    commit_hash: &str,
    candidates: &[String],
    embedder: &dyn Embedder,
) -> Result<StrategySummary, SummarizeError> {
    if candidates.is_empty() {
        return Err(SummarizeError::NoCandidates);
    }
    let embeddings: Vec<Vec<f64>> = candidates.iter().map(|c| embedder.embed(c)).collect::<Result<_, _>>()?;
    let best = SimilarityMatrix::from_vectors(&embeddings)?.most_central().expect("non-empty");
    Ok(StrategySummary {
        commit_hash: commit_hash.to_string(),
        text: candidates[best].clone(),
        embedding: embeddings[best].clone(),
        candidate_texts: candidates.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub id: String,
    pub dim: usize,
}

/// Output of the summarize stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBatch {
    pub embedder: EmbedderInfo,
    pub summaries: Vec<StrategySummary>,
    /// Commits whose summarization or embedding failed; excluded downstream.
    pub unsummarized: Vec<String>,
}

/// Summarizes and selects for every commit, in parallel. Failures are
/// logged and recorded in `unsummarized` instead of aborting the batch.
pub fn summarize_all(
    commits: &[CommitRecord],
    provider: &dyn CompletionProvider,
    embedder: &dyn Embedder,
    m: usize,
    temperature: f64,
) -> SummaryBatch {
    let results: Vec<Result<StrategySummary, SummarizeError>> = commits
        .par_iter()
        .map(|c| {
            let candidates = summarize_commit(c, provider, m, temperature)?;
            select_summary(&c.commit_hash, &candidates, embedder)
        })
        .collect();
    let mut batch = SummaryBatch {
        embedder: EmbedderInfo { id: embedder.identity(), dim: embedder.dim() },
        summaries: Vec::new(),
        unsummarized: Vec::new(),
    };
    for (c, r) in commits.iter().zip(results) {
        match r {
            Ok(s) => batch.summaries.push(s),
            Err(e) => {
                warn!(commit = %c.commit_hash, error = %e, "commit left unsummarized");
                batch.unsummarized.push(c.commit_hash.clone());
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{function_diff, Language};
    use crate::provider::{ReplayEmbedder, ReplayProvider, ReplayScript};
    use std::sync::Arc;

    fn commit() -> CommitRecord {
        let (b, a) = ("int f(int x) {\n  return g(x) && x;\n}\n", "int f(int x) {\n  return x && g(x);\n}\n");
        CommitRecord {
            repo_id: "acme/engine".into(),
            commit_hash: "1".repeat(40),
            message: "Optimize f: test cheap operand first".into(),
            function_name: "f".into(),
            code_before: b.into(),
            code_after: a.into(),
            diff: function_diff(b, a),
            language: Language::C,
        }
    }

    #[test]
    fn prompt_contains_required_context() {
        let c = commit();
        let p = summary_prompt(&c);
        for needle in ["acme/engine", "Optimize f", "`f`", &c.diff] {
            assert!(p.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn m_summaries_in_draw_order() {
        let c = commit();
        let mut s = ReplayScript::new();
        s.insert_samples(&summary_prompt(&c), vec!["one".into(), "two".into(), "three".into()]);
        let p = ReplayProvider::new(Arc::new(s));
        assert_eq!(summarize_commit(&c, &p, 3, 0.0).unwrap(), ["one", "two", "three"]);
        assert_eq!(summarize_commit(&c, &p, 1, 0.0).unwrap(), ["one"]);
    }

    fn embedder(table: &[(&str, Vec<f64>)]) -> ReplayEmbedder {
        let mut s = ReplayScript::new();
        for (t, v) in table {
            s.insert_embedding(t, v.clone());
        }
        ReplayEmbedder::new(Arc::new(s)).unwrap()
    }

    #[test]
    fn duplicate_majority_wins() {
        let e = embedder(&[("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0])]);
        let cands = vec!["A".to_string(), "A".to_string(), "B".to_string()];
        assert_eq!(select_summary("h", &cands, &e).unwrap().text, "A");
    }

    #[test]
    fn single_candidate_is_selected() {
        let e = embedder(&[("only", vec![0.3, 0.4])]);
        let s = select_summary("h", &["only".to_string()], &e).unwrap();
        assert_eq!(s.text, "only");
        assert_eq!(s.candidate_texts, ["only"]);
        assert!(select_summary("h", &[], &e).is_err());
    }

    #[test]
    fn scripted_triple_matches_hand_computed_matrix() {
        // sims: s(0,1)=0.6, s(0,2)=0.0, s(1,2)=0.8 -> means 0.3, 0.7, 0.4
        let e = embedder(&[("x", vec![1.0, 0.0]), ("y", vec![0.6, 0.8]), ("z", vec![0.0, 1.0])]);
        let cands: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let s = select_summary("h", &cands, &e).unwrap();
        assert_eq!(s.text, "y");
        assert!((s.embedding[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let c = commit();
        let mut other = c.clone();
        other.commit_hash = "2".repeat(40);
        other.repo_id = "elsewhere".into();
        let mut s = ReplayScript::new();
        s.insert_samples(&summary_prompt(&c), vec!["A".into()]);
        s.insert_embedding("A", vec![1.0, 0.0]);
        let script = Arc::new(s);
        let batch = summarize_all(
            &[c.clone(), other.clone()],
            &ReplayProvider::new(script.clone()),
            &ReplayEmbedder::new(script).unwrap(),
            1,
            0.0,
        );
        assert_eq!(batch.summaries.len(), 1);
        assert_eq!(batch.unsummarized, vec![other.commit_hash]);
        assert_eq!(batch.embedder.dim, 2);
    }
}
