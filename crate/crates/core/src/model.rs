//! Domain records passed between pipeline stages.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("commit hash `{0}` is not 40 lowercase hex characters")]
    BadCommitHash(String),
    #[error("commit {0}: code before and after are identical")]
    NoChange(String),
    #[error("commit {0}: diff does not reproduce code_after from code_before")]
    InconsistentDiff(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[default]
    #[serde(rename = "C")]
    C,
    #[serde(rename = "CPP")]
    Cpp,
}

impl Language {
    /// Language inferred from a source file extension. Headers count as C.
    pub fn from_path(path: &str) -> Option<Self> {
        let ext = Path::new(path).extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "c" | "h" => Some(Self::C),
            "cc" | "cpp" | "cxx" | "c++" | "hpp" | "hh" | "hxx" | "inl" => Some(Self::Cpp),
            _ => None,
        }
    }

    /// Identifier the rule engine uses in a rule's `languages` list.
    pub fn engine_id(self) -> &'static str {
        match self {
            Self::C => "c",
            Self::Cpp => "cpp",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::C => "c",
            Self::Cpp => "cpp",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::C => "C",
            Self::Cpp => "C++",
        })
    }
}

pub fn is_commit_hash(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// One mined single-function optimization commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub repo_id: String,
    pub commit_hash: String,
    pub message: String,
    pub function_name: String,
    pub code_before: String,
    pub code_after: String,
    /// Function-level unified diff from `code_before` to `code_after`.
    pub diff: String,
    pub language: Language,
}

impl CommitRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_commit_hash(&self.commit_hash) {
            return Err(ModelError::BadCommitHash(self.commit_hash.clone()));
        }
        if self.code_before == self.code_after {
            return Err(ModelError::NoChange(self.commit_hash.clone()));
        }
        let applied = diffy::Patch::from_str(&self.diff)
            .ok()
            .and_then(|p| diffy::apply(&self.code_before, &p).ok());
        if applied.as_deref() != Some(self.code_after.as_str()) {
            return Err(ModelError::InconsistentDiff(self.commit_hash.clone()));
        }
        Ok(())
    }

    pub fn short_hash(&self) -> &str {
        &self.commit_hash[..self.commit_hash.len().min(12)]
    }
}

/// Unified diff between two function bodies, in the form stored on records.
pub fn function_diff(before: &str, after: &str) -> String {
    diffy::create_patch(before, after).to_string()
}

/// The representative one-sentence strategy summary of a commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary<T = f64> {
    pub commit_hash: String,
    pub text: String,
    pub embedding: Vec<T>,
    pub candidate_texts: Vec<String>,
}

/// A group of commits sharing one optimization strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCluster {
    pub cluster_id: String,
    /// Summary of the medoid member.
    pub strategy_text: String,
    pub member_hashes: Vec<String>,
    pub size: usize,
    pub medoid_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleStatus {
    Validated,
    Failed,
}

/// A rule-engine rule synthesized from one commit of a cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRule {
    pub rule_id: String,
    pub cluster_id: String,
    pub source_commit: String,
    pub source_repo: String,
    pub yaml_text: String,
    pub attempt_index: u32,
    pub iterations_used: u32,
    pub status: RuleStatus,
}

/// Hyperparameters of every stage. Defaults are the reference setup
/// where one exists; `min_pts` and `min_cluster_size` are local choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub m_summaries: usize,
    pub eps_sim: f64,
    pub min_cluster_size: usize,
    pub n_sample_commits: usize,
    pub n_attempts: u32,
    pub max_iterations: u32,
    pub top_k_locations: usize,
    pub temperature: f64,
    pub min_pts: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m_summaries: 3,
            eps_sim: 0.89,
            min_cluster_size: 3,
            n_sample_commits: 10,
            n_attempts: 5,
            max_iterations: 7,
            top_k_locations: 25,
            temperature: 0.0,
            min_pts: 2,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("m_summaries", self.m_summaries),
            ("min_cluster_size", self.min_cluster_size),
            ("n_sample_commits", self.n_sample_commits),
            ("n_attempts", self.n_attempts as usize),
            ("max_iterations", self.max_iterations as usize),
            ("top_k_locations", self.top_k_locations),
            ("min_pts", self.min_pts),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !(self.eps_sim > 0.0 && self.eps_sim < 1.0) {
            return Err(ModelError::Config(format!("eps_sim must lie in (0,1), got {}", self.eps_sim)));
        }
        if !(self.temperature >= 0.0) {
            return Err(ModelError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Cosine-distance radius equivalent to the similarity threshold.
    pub fn eps_distance(&self) -> f64 {
        1.0 - self.eps_sim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(before: &str, after: &str) -> CommitRecord {
        CommitRecord {
            repo_id: "r".into(),
            commit_hash: "a".repeat(40),
            message: "m".into(),
            function_name: "f".into(),
            code_before: before.into(),
            code_after: after.into(),
            diff: function_diff(before, after),
            language: Language::C,
        }
    }

    #[test]
    fn defaults_are_the_reference_setup() {
        let c = PipelineConfig::default();
        assert_eq!(c.m_summaries, 3);
        assert_eq!(c.eps_sim, 0.89);
        assert_eq!(c.n_sample_commits, 10);
        assert_eq!(c.n_attempts, 5);
        assert_eq!(c.max_iterations, 7);
        assert_eq!(c.top_k_locations, 25);
        assert_eq!(c.temperature, 0.0);
        c.validate().unwrap();
    }

    #[test]
    fn config_rejects_out_of_range() {
        let mut c = PipelineConfig { eps_sim: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.eps_sim = 0.5;
        c.n_attempts = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn record_validation() {
        let r = record("int f() {\n  return 1;\n}\n", "int f() {\n  return 2;\n}\n");
        r.validate().unwrap();
        let mut bad = r.clone();
        bad.commit_hash = "ABC".into();
        assert!(matches!(bad.validate(), Err(ModelError::BadCommitHash(_))));
        let mut same = r.clone();
        same.code_after = same.code_before.clone();
        assert!(matches!(same.validate(), Err(ModelError::NoChange(_))));
        let mut wrong = r;
        wrong.code_after.push_str("// extra\n");
        assert!(matches!(wrong.validate(), Err(ModelError::InconsistentDiff(_))));
    }

    #[test]
    fn language_from_extension() {
        assert_eq!(Language::from_path("src/a.c"), Some(Language::C));
        assert_eq!(Language::from_path("x/y.CPP"), Some(Language::Cpp));
        assert_eq!(Language::from_path("README.md"), None);
    }
}
