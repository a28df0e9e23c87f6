//! On-disk strategy library:
//!
//! ```text
//! library_root/
//!   index.json                      version, config, seed, embedder, cluster ids, rule metadata
//!   clusters/<cluster_id>/meta.json strategy_text, member_hashes, size, medoid
//!   rules/<rule_id>.yaml            one rule per file
//! ```
//!
//! The index is written last, so a library without `index.json` is never
//! considered complete.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnalysisRule, PipelineConfig, RuleStatus, StrategyCluster};
use crate::strategy::EmbedderInfo;

pub const LIBRARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("library io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("rule {rule_id} references unknown cluster {cluster_id}")]
    UnknownCluster { rule_id: String, cluster_id: String },
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("unsafe id for a file name: {0:?}")]
    UnsafeId(String),
    #[error("unsupported library version {0}")]
    Version(u32),
    #[error("no library at {0} (index.json missing)")]
    Missing(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub config: PipelineConfig,
    pub embedder: EmbedderInfo,
    pub clusters: Vec<StrategyCluster>,
    pub rules: Vec<AnalysisRule>,
    /// Clusters for which rule generation produced nothing; never scanned.
    pub ruleless_clusters: Vec<String>,
    pub noise: Vec<String>,
    pub unsummarized: Vec<String>,
    /// False for a freshly clustered library that has not been through
    /// rule generation yet.
    pub rules_generated: bool,
}

impl Library {
    pub fn cluster(&self, id: &str) -> Option<&StrategyCluster> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    pub fn validated_rules(&self) -> impl Iterator<Item = &AnalysisRule> {
        self.rules.iter().filter(|r| r.status == RuleStatus::Validated)
    }

    /// Copy without the rules for which `drop` holds. Strategy texts are
    /// kept: they are cluster-level descriptions, not any one commit.
    pub fn without_rules(&self, drop: impl Fn(&AnalysisRule) -> bool) -> Library {
        let mut out = self.clone();
        out.rules.retain(|r| !drop(r));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RuleEntry {
    rule_id: String,
    cluster_id: String,
    source_commit: String,
    source_repo: String,
    attempt_index: u32,
    iterations_used: u32,
    status: RuleStatus,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    config: PipelineConfig,
    seed: u64,
    embedder: EmbedderInfo,
    /// Cosine-distance radius equivalent to `config.eps_sim`.
    eps_distance: f64,
    cluster_ids: Vec<String>,
    rules: Vec<RuleEntry>,
    ruleless_clusters: Vec<String>,
    noise: Vec<String>,
    unsummarized: Vec<String>,
    rules_generated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterMeta {
    cluster_id: String,
    strategy_text: String,
    member_hashes: Vec<String>,
    size: usize,
    medoid_hash: String,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn safe_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::UnsafeId(id.to_string()))
    }
}

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn check(library: &Library) -> Result<(), StoreError> {
    let mut ids = BTreeSet::new();
    for c in &library.clusters {
        safe_id(&c.cluster_id)?;
        if !ids.insert(c.cluster_id.as_str()) {
            return Err(StoreError::Duplicate(c.cluster_id.clone()));
        }
    }
    let mut rule_ids = BTreeSet::new();
    for r in &library.rules {
        safe_id(&r.rule_id)?;
        if !ids.contains(r.cluster_id.as_str()) {
            return Err(StoreError::UnknownCluster { rule_id: r.rule_id.clone(), cluster_id: r.cluster_id.clone() });
        }
        if !rule_ids.insert(r.rule_id.as_str()) {
            return Err(StoreError::Duplicate(r.rule_id.clone()));
        }
    }
    Ok(())
}

/// Validates, clears any previous library at `root`, writes cluster and
/// rule files, then the index.
pub fn write_library(root: &Path, library: &Library) -> Result<(), StoreError> {
    check(library)?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let index_path = root.join("index.json");
    if index_path.exists() {
        fs::remove_file(&index_path).map_err(io_err(&index_path))?;
    }
    for sub in ["clusters", "rules"] {
        let d = root.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(io_err(&d))?;
        }
    }
    for c in &library.clusters {
        let meta = ClusterMeta {
            cluster_id: c.cluster_id.clone(),
            strategy_text: c.strategy_text.clone(),
            member_hashes: c.member_hashes.clone(),
            size: c.size,
            medoid_hash: c.medoid_hash.clone(),
        };
        write_atomic(&root.join("clusters").join(&c.cluster_id).join("meta.json"), to_pretty_json(&meta).as_bytes())?;
    }
    fs::create_dir_all(root.join("rules")).map_err(io_err(root))?;
    let mut entries = Vec::new();
    for r in &library.rules {
        let file = format!("rules/{}.yaml", r.rule_id);
        write_atomic(&root.join(&file), r.yaml_text.as_bytes())?;
        entries.push(RuleEntry {
            rule_id: r.rule_id.clone(),
            cluster_id: r.cluster_id.clone(),
            source_commit: r.source_commit.clone(),
            source_repo: r.source_repo.clone(),
            attempt_index: r.attempt_index,
            iterations_used: r.iterations_used,
            status: r.status,
            file,
        });
    }
    let index = Index {
        version: LIBRARY_VERSION,
        config: library.config.clone(),
        seed: library.config.seed,
        embedder: library.embedder.clone(),
        eps_distance: library.config.eps_distance(),
        cluster_ids: library.clusters.iter().map(|c| c.cluster_id.clone()).collect(),
        rules: entries,
        ruleless_clusters: library.ruleless_clusters.clone(),
        noise: library.noise.clone(),
        unsummarized: library.unsummarized.clone(),
        rules_generated: library.rules_generated,
    };
    write_atomic(&index_path, to_pretty_json(&index).as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Malformed { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_library(root: &Path) -> Result<Library, StoreError> {
    let index_path = root.join("index.json");
    if !index_path.exists() {
        return Err(StoreError::Missing(root.to_path_buf()));
    }
    let index: Index = read_json(&index_path)?;
    if index.version != LIBRARY_VERSION {
        return Err(StoreError::Version(index.version));
    }
    let mut clusters = Vec::new();
    for id in &index.cluster_ids {
        safe_id(id)?;
        let meta: ClusterMeta = read_json(&root.join("clusters").join(id).join("meta.json"))?;
        clusters.push(StrategyCluster {
            cluster_id: meta.cluster_id,
            strategy_text: meta.strategy_text,
            member_hashes: meta.member_hashes,
            size: meta.size,
            medoid_hash: meta.medoid_hash,
        });
    }
    let mut rules = Vec::new();
    for e in index.rules {
        safe_id(&e.rule_id)?;
        let path = root.join(&e.file);
        rules.push(AnalysisRule {
            yaml_text: fs::read_to_string(&path).map_err(io_err(&path))?,
            rule_id: e.rule_id,
            cluster_id: e.cluster_id,
            source_commit: e.source_commit,
            source_repo: e.source_repo,
            attempt_index: e.attempt_index,
            iterations_used: e.iterations_used,
            status: e.status,
        });
    }
    let library = Library {
        config: index.config,
        embedder: index.embedder,
        clusters,
        rules,
        ruleless_clusters: index.ruleless_clusters,
        noise: index.noise,
        unsummarized: index.unsummarized,
        rules_generated: index.rules_generated,
    };
    check(&library)?;
    Ok(library)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::path_digest;

    fn lib(n_clusters: usize, n_rules: usize) -> Library {
        let clusters: Vec<StrategyCluster> = (0..n_clusters)
            .map(|i| StrategyCluster {
                cluster_id: format!("cluster-{i:04}"),
                strategy_text: format!("strategy {i}"),
                member_hashes: vec![format!("{i}").repeat(40), "f".repeat(40)],
                size: 2,
                medoid_hash: format!("{i}").repeat(40),
            })
            .collect();
        let rules = (0..n_rules)
            .map(|j| AnalysisRule {
                rule_id: format!("cluster-{:04}-r{j}", j % n_clusters),
                cluster_id: format!("cluster-{:04}", j % n_clusters),
                source_commit: "f".repeat(40),
                source_repo: "acme/x".into(),
                yaml_text: format!("rules:\n- id: r{j}\n"),
                attempt_index: 1,
                iterations_used: 2,
                status: RuleStatus::Validated,
            })
            .collect();
        Library {
            config: PipelineConfig::default(),
            embedder: EmbedderInfo { id: "hashing-64".into(), dim: 64 },
            clusters,
            rules,
            ruleless_clusters: vec![],
            noise: vec!["e".repeat(40)],
            unsummarized: vec![],
            rules_generated: true,
        }
    }

    #[test]
    fn empty_library_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = lib(1, 0);
        l.clusters.clear();
        write_library(dir.path(), &l).unwrap();
        assert_eq!(read_library(dir.path()).unwrap(), l);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let l = lib(2, 3);
        write_library(a.path(), &l).unwrap();
        let back = read_library(a.path()).unwrap();
        assert_eq!(back, l);
        write_library(b.path(), &back).unwrap();
        assert_eq!(path_digest(a.path(), &[]).unwrap(), path_digest(b.path(), &[]).unwrap());
    }

    #[test]
    fn unknown_cluster_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = lib(2, 1);
        l.rules[0].cluster_id = "cluster-9999".into();
        assert!(matches!(write_library(dir.path(), &l), Err(StoreError::UnknownCluster { .. })));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rewrite_drops_stale_rules() {
        let dir = tempfile::tempdir().unwrap();
        write_library(dir.path(), &lib(2, 3)).unwrap();
        write_library(dir.path(), &lib(2, 1)).unwrap();
        assert_eq!(fs::read_dir(dir.path().join("rules")).unwrap().count(), 1);
        assert!(matches!(read_library(&dir.path().join("nope")), Err(StoreError::Missing(_))));
    }

    #[test]
    fn path_like_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = lib(1, 0);
        l.clusters[0].cluster_id = "../escape".into();
        assert!(matches!(write_library(dir.path(), &l), Err(StoreError::UnsafeId(_))));
    }
}
