//! Stage orchestration. Every stage reads declared inputs, writes its
//! artifacts plus a [`RunManifest`], and is skipped when the manifest shows
//! the same inputs already produced the current outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tracing::info;

use crate::config::{ConfigError, EmbedderKind, ToolConfig};
use crate::digest::{path_digest, sha256_hex};
use crate::engine::{CachedEngine, EngineError, RuleEngine, SemgrepEngine};
use crate::eval::{export_review, run_benchmark, BenchResources, BenchSettings, BenchTask, Bm25Params};
use crate::forge::{build_rule_sets, verify_rules, AttemptOutcome, CountingEngine, ForgeContext};
use crate::manifest::{now, RunManifest, TOOL_VERSION};
use crate::miner::{load_corpus, load_keywords, mine, MineOptions};
use crate::model::CommitRecord;
use crate::optimizer::{aggregate_and_rank, optimize_locations, scan, AblationMode, CandidateStatus, FunctionIndex, OptimizeRun};
use crate::perf::{combine, identify_hotspots, load_reports, ProfileEntry};
use crate::provider::{
    CompletionProvider, Embedder, HashingEmbedder, LiveEmbedder, LiveProvider, ProviderError, ReplayEmbedder,
    ReplayProvider, ReplayScript,
};
use crate::store::{read_library, to_pretty_json, write_atomic, write_library, Library, StoreError};
use crate::strategy::{cluster_summaries, prune_clusters, summarize_all, SummaryBatch};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing {what} at {path} (produced by stage `{producer}`)")]
    MissingArtifact { what: String, path: PathBuf, producer: &'static str },
    #[error("stage `{stage}` needs {what}")]
    MissingInput { stage: &'static str, what: String },
    #[error("stage `{stage}` failed: {message}")]
    Failed { stage: &'static str, message: String },
    #[error("io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Mine,
    Summarize,
    Cluster,
    Rules,
    Verify,
    Scan,
    Optimize,
    Eval,
    Perf,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Mine,
        Stage::Summarize,
        Stage::Cluster,
        Stage::Rules,
        Stage::Verify,
        Stage::Scan,
        Stage::Optimize,
        Stage::Eval,
        Stage::Perf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::Summarize => "summarize",
            Stage::Cluster => "cluster",
            Stage::Rules => "rules",
            Stage::Verify => "verify",
            Stage::Scan => "scan",
            Stage::Optimize => "optimize",
            Stage::Eval => "eval",
            Stage::Perf => "perf",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}; expected one of mine, summarize, cluster, rules, verify, scan, optimize, eval, perf"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

type EnginePair = (Arc<dyn RuleEngine>, Arc<dyn RuleEngine>);

/// Providers and the rule engine for one run. The engine is created on
/// first use so stages that never run rules do not need it installed.
pub struct Services {
    pub provider: Arc<dyn CompletionProvider>,
    pub embedder: Arc<dyn Embedder>,
    engine_config: crate::config::EngineConfig,
    engines: Mutex<Option<EnginePair>>,
}

impl Services {
    pub fn from_config(config: &ToolConfig, replay: Option<&Path>) -> Result<Self> {
        let (provider, embedder): (Arc<dyn CompletionProvider>, Arc<dyn Embedder>) = match replay {
            Some(path) => {
                let script = Arc::new(ReplayScript::load(path)?);
                let embedder: Arc<dyn Embedder> = match config.embedder.kind {
                    EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(config.embedder.hashing_dim)),
                    EmbedderKind::Live => Arc::new(ReplayEmbedder::new(script.clone())?),
                };
                (Arc::new(ReplayProvider::new(script)), embedder)
            }
            None => {
                let embedder: Arc<dyn Embedder> = match config.embedder.kind {
                    EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(config.embedder.hashing_dim)),
                    EmbedderKind::Live => Arc::new(LiveEmbedder::new(config.provider.clone())?),
                };
                (Arc::new(LiveProvider::new(config.provider.clone())?), embedder)
            }
        };
        Ok(Self { provider, embedder, engine_config: config.engine.clone(), engines: Mutex::new(None) })
    }

    /// Services with a fixed engine; `verify` is used for re-validation
    /// and `forge` for rule generation and scanning.
    pub fn with_engines(
        provider: Arc<dyn CompletionProvider>,
        embedder: Arc<dyn Embedder>,
        forge: Arc<dyn RuleEngine>,
        verify: Arc<dyn RuleEngine>,
    ) -> Self {
        Self {
            provider,
            embedder,
            engine_config: Default::default(),
            engines: Mutex::new(Some((forge, verify))),
        }
    }

    fn engines(&self) -> Result<EnginePair> {
        let mut slot = self.engines.lock().expect("engine lock");
        if let Some(pair) = slot.as_ref() {
            return Ok(pair.clone());
        }
        let cfg = &self.engine_config;
        let semgrep = SemgrepEngine::new(&cfg.binary, cfg.version.as_deref())?;
        let verify: Arc<dyn RuleEngine> = Arc::new(semgrep.clone());
        let forge: Arc<dyn RuleEngine> =
            if cfg.cache { Arc::new(CachedEngine::new(semgrep)) } else { verify.clone() };
        *slot = Some((forge.clone(), verify.clone()));
        Ok((forge, verify))
    }

    /// Engine for rule generation, scanning and evaluation (may memoize).
    pub fn engine(&self) -> Result<Arc<dyn RuleEngine>> {
        Ok(self.engines()?.0)
    }

    /// Uncached engine for re-validation.
    pub fn verify_engine(&self) -> Result<Arc<dyn RuleEngine>> {
        Ok(self.engines()?.1)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(write_atomic(path, to_pretty_json(value).as_bytes())?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("serializable"));
        text.push('\n');
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Malformed {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn require(path: &Path, what: &str, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact { what: what.to_string(), path: path.to_path_buf(), producer })
    }
}

fn require_library(path: &Path, with_rules: bool) -> Result<Library> {
    require(&path.join("index.json"), "strategy library", "cluster")?;
    let lib = read_library(path)?;
    if with_rules && !lib.rules_generated {
        return Err(PipelineError::MissingArtifact {
            what: "rule set (library has clusters only)".into(),
            path: path.to_path_buf(),
            producer: "rules",
        });
    }
    Ok(lib)
}

fn load_commits(path: &Path) -> Result<Vec<CommitRecord>> {
    require(path, "mined commits", "mine")?;
    read_jsonl(path)
}

fn digest(path: &Path) -> Result<String> {
    path_digest(path, &["manifest.json"]).map_err(io(path))
}

struct StageSpec<'a> {
    stage: Stage,
    manifest: PathBuf,
    inputs: Vec<(&'a str, &'a Path)>,
    outputs: Vec<(&'a str, &'a Path)>,
    params: Value,
    engine: bool,
    embedder: bool,
}

pub struct Runner<'a> {
    pub config: &'a ToolConfig,
    pub services: &'a Services,
    /// Re-run stages even when their inputs are unchanged.
    pub force: bool,
}

impl Runner<'_> {
    fn execute(&self, spec: StageSpec<'_>, body: impl FnOnce() -> Result<Value>) -> Result<StageStatus> {
        let name = spec.stage.name();
        let mut inputs = BTreeMap::new();
        for (role, p) in &spec.inputs {
            inputs.insert(role.to_string(), digest(p)?);
        }
        let engine_id = if spec.engine { Some(self.services.engine()?.identity()) } else { None };
        let embedder_id = spec.embedder.then(|| self.services.embedder.identity());
        let provider_id = self.services.provider.identity();
        let key = sha256_hex(
            json!({
                "stage": name,
                "config": self.config,
                "inputs": inputs,
                "params": spec.params,
                "provider": provider_id,
                "embedder": embedder_id,
                "engine": engine_id,
            })
            .to_string(),
        );
        if !self.force {
            if let Some(old) = RunManifest::load(&spec.manifest) {
                let current: Option<BTreeMap<String, String>> =
                    spec.outputs.iter().map(|(r, p)| digest(p).ok().map(|d| (r.to_string(), d))).collect();
                if old.input_key == key && current.as_ref() == Some(&old.outputs) {
                    info!(stage = name, "inputs unchanged; skipped");
                    return Ok(StageStatus::Skipped);
                }
            }
        }
        let started_at = now();
        info!(stage = name, "running");
        let summary = body()?;
        let mut outputs = BTreeMap::new();
        for (role, p) in &spec.outputs {
            outputs.insert(role.to_string(), digest(p)?);
        }
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            stage: name.to_string(),
            config: self.config.clone(),
            seed: self.config.pipeline.seed,
            provider: provider_id,
            embedder: embedder_id,
            engine: engine_id,
            inputs,
            input_key: key,
            outputs,
            started_at,
            finished_at: now(),
            summary,
        }
        .save(&spec.manifest)?;
        Ok(StageStatus::Ran)
    }

    pub fn mine(&self, corpus: &Path, keywords: Option<&Path>, out: &Path, manifest: &Path) -> Result<StageStatus> {
        if !corpus.is_dir() {
            return Err(PipelineError::MissingInput { stage: "mine", what: format!("corpus directory {}", corpus.display()) });
        }
        let mut inputs = vec![("corpus", corpus)];
        if let Some(k) = keywords {
            inputs.push(("keywords", k));
        }
        let spec = StageSpec {
            stage: Stage::Mine,
            manifest: manifest.to_path_buf(),
            inputs,
            outputs: vec![("commits", out)],
            params: json!({}),
            engine: false,
            embedder: false,
        };
        self.execute(spec, || {
            let raw = load_corpus(corpus).map_err(|e| PipelineError::Failed { stage: "mine", message: e.to_string() })?;
            let keywords = match keywords {
                Some(p) => load_keywords(p).map_err(|e| PipelineError::Failed { stage: "mine", message: e.to_string() })?,
                None => self.config.miner.keywords.clone(),
            };
            let opts = MineOptions {
                keywords,
                llm_verify: self.config.miner.llm_verify,
                temperature: self.config.pipeline.temperature,
            };
            let (records, report) = mine(&raw, &opts, Some(self.services.provider.as_ref()))
                .map_err(|e| PipelineError::Failed { stage: "mine", message: e.to_string() })?;
            write_jsonl(out, &records)?;
            Ok(serde_json::to_value(report).expect("report serializes"))
        })
    }

    pub fn summarize(&self, commits: &Path, out: &Path, manifest: &Path) -> Result<StageStatus> {
        require(commits, "mined commits", "mine")?;
        let spec = StageSpec {
            stage: Stage::Summarize,
            manifest: manifest.to_path_buf(),
            inputs: vec![("commits", commits)],
            outputs: vec![("summaries", out)],
            params: json!({}),
            engine: false,
            embedder: true,
        };
        self.execute(spec, || {
            let records = load_commits(commits)?;
            let p = &self.config.pipeline;
            let batch = summarize_all(
                &records,
                self.services.provider.as_ref(),
                self.services.embedder.as_ref(),
                p.m_summaries,
                p.temperature,
            );
            write_json(out, &batch)?;
            Ok(json!({ "summarized": batch.summaries.len(), "unsummarized": batch.unsummarized.len() }))
        })
    }

    pub fn cluster(&self, summaries: &Path, library: &Path, manifest: &Path) -> Result<StageStatus> {
        require(summaries, "strategy summaries", "summarize")?;
        let spec = StageSpec {
            stage: Stage::Cluster,
            manifest: manifest.to_path_buf(),
            inputs: vec![("summaries", summaries)],
            outputs: vec![("library", library)],
            params: json!({}),
            engine: false,
            embedder: false,
        };
        self.execute(spec, || {
            let batch: SummaryBatch = read_json(summaries)?;
            if let Some(bad) = batch.summaries.iter().find(|s| s.embedding.len() != batch.embedder.dim) {
                return Err(PipelineError::Failed {
                    stage: "cluster",
                    message: format!(
                        "summary {} has dimension {}, library embedder {} has {}",
                        bad.commit_hash,
                        bad.embedding.len(),
                        batch.embedder.id,
                        batch.embedder.dim
                    ),
                });
            }
            let p = &self.config.pipeline;
            let fail = |e: crate::strategy::SimilarityError| PipelineError::Failed { stage: "cluster", message: e.to_string() };
            let clustering = cluster_summaries(&batch.summaries, p.eps_sim, p.min_pts).map_err(fail)?;
            let found = clustering.clusters.len();
            let kept = prune_clusters(clustering.clusters.clone(), &batch.summaries, p.min_cluster_size).map_err(fail)?;
            // members of pruned clusters join the noise list, so every hash stays accounted for
            let mut noise = clustering.noise;
            for c in &clustering.clusters {
                if !kept.iter().any(|k| k.cluster_id == c.cluster_id) {
                    noise.extend(c.member_hashes.iter().cloned());
                }
            }
            noise.sort();
            let lib = Library {
                config: p.clone(),
                embedder: batch.embedder.clone(),
                clusters: kept,
                rules: Vec::new(),
                ruleless_clusters: Vec::new(),
                noise,
                unsummarized: batch.unsummarized.clone(),
                rules_generated: false,
            };
            write_library(library, &lib)?;
            Ok(json!({ "clusters_found": found, "clusters_kept": lib.clusters.len(), "noise": lib.noise.len() }))
        })
    }

    pub fn rules(
        &self,
        library_in: &Path,
        commits: &Path,
        library_out: &Path,
        traces: Option<&Path>,
        manifest: &Path,
    ) -> Result<StageStatus> {
        require_library(library_in, false)?;
        require(commits, "mined commits", "mine")?;
        let mut outputs = vec![("library", library_out)];
        if let Some(t) = traces {
            outputs.push(("traces", t));
        }
        let spec = StageSpec {
            stage: Stage::Rules,
            manifest: manifest.to_path_buf(),
            inputs: vec![("library", library_in), ("commits", commits)],
            outputs,
            params: json!({}),
            engine: true,
            embedder: false,
        };
        self.execute(spec, || {
            let mut lib = read_library(library_in)?;
            let records = load_commits(commits)?;
            let by_hash: BTreeMap<&str, &CommitRecord> = records.iter().map(|r| (r.commit_hash.as_str(), r)).collect();
            let engine = self.services.engine()?;
            let counting = CountingEngine::new(engine.as_ref());
            let ctx = ForgeContext {
                provider: self.services.provider.as_ref(),
                engine: &counting,
                config: &self.config.pipeline,
            };
            let out = build_rule_sets(&ctx, &lib.clusters, &by_hash);
            if out.clusters.iter().flat_map(|c| &c.traces).any(|t| t.outcome == AttemptOutcome::EngineUnavailable) {
                return Err(PipelineError::Failed { stage: "rules", message: "rule engine unavailable".into() });
            }
            lib.rules = out.rules();
            lib.ruleless_clusters = out.ruleless();
            lib.rules_generated = true;
            write_library(library_out, &lib)?;
            if let Some(t) = traces {
                write_json(t, &out)?;
            }
            let per_cluster: BTreeMap<&str, Value> = out
                .clusters
                .iter()
                .map(|c| (c.cluster_id.as_str(), json!({ "sampled": c.sampled.len(), "rules": c.rules.len(), "engine_runs": c.engine_runs })))
                .collect();
            Ok(json!({ "rules": lib.rules.len(), "ruleless": lib.ruleless_clusters, "clusters": per_cluster }))
        })
    }

    /// Re-validates every rule with the uncached engine. Fails the stage
    /// (after writing the report) when any rule no longer matches.
    pub fn verify(&self, library: &Path, commits: &Path, out: &Path, manifest: &Path) -> Result<StageStatus> {
        require_library(library, true)?;
        require(commits, "mined commits", "mine")?;
        let spec = StageSpec {
            stage: Stage::Verify,
            manifest: manifest.to_path_buf(),
            inputs: vec![("library", library), ("commits", commits)],
            outputs: vec![("report", out)],
            params: json!({}),
            engine: true,
            embedder: false,
        };
        self.execute(spec, || {
            let lib = read_library(library)?;
            let records = load_commits(commits)?;
            let by_hash: BTreeMap<&str, &CommitRecord> = records.iter().map(|r| (r.commit_hash.as_str(), r)).collect();
            let rules: Vec<_> = lib.validated_rules().cloned().collect();
            let checks = verify_rules(&rules, &by_hash, self.services.verify_engine()?.as_ref());
            write_json(out, &checks)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.ok).map(|c| c.rule_id.as_str()).collect();
            if !failed.is_empty() {
                return Err(PipelineError::Failed { stage: "verify", message: format!("rules failed re-validation: {}", failed.join(", ")) });
            }
            Ok(json!({ "verified": checks.len() }))
        })
    }

    pub fn scan(&self, library: &Path, target: &Path, out: &Path, manifest: &Path) -> Result<StageStatus> {
        require_library(library, true)?;
        if !target.exists() {
            return Err(PipelineError::MissingInput { stage: "scan", what: format!("target {}", target.display()) });
        }
        let spec = StageSpec {
            stage: Stage::Scan,
            manifest: manifest.to_path_buf(),
            inputs: vec![("library", library), ("target", target)],
            outputs: vec![("scan", out)],
            params: json!({}),
            engine: true,
            embedder: false,
        };
        self.execute(spec, || {
            let lib = read_library(library)?;
            let report = scan(target, &lib, self.services.engine()?.as_ref());
            let (index, _) = FunctionIndex::build(target).map_err(io(target))?;
            let ranked = aggregate_and_rank(&report.hits, &index, self.config.pipeline.top_k_locations);
            write_json(out, &json!({ "hits": report.hits, "skipped": report.skipped, "ranked": ranked }))?;
            Ok(json!({ "hits": report.hits.len(), "locations": ranked.len(), "skipped_rules": report.skipped.len() }))
        })
    }

    pub fn optimize(&self, library: &Path, target: &Path, mode: AblationMode, out_dir: &Path, manifest: &Path) -> Result<StageStatus> {
        require_library(library, true)?;
        if !target.exists() {
            return Err(PipelineError::MissingInput { stage: "optimize", what: format!("target {}", target.display()) });
        }
        let candidates_dir = out_dir.join("candidates");
        let spec = StageSpec {
            stage: Stage::Optimize,
            manifest: manifest.to_path_buf(),
            inputs: vec![("library", library), ("target", target)],
            outputs: vec![("candidates", &candidates_dir)],
            params: json!({ "mode": mode }),
            engine: true,
            embedder: false,
        };
        self.execute(spec, || {
            let lib = read_library(library)?;
            let report = scan(target, &lib, self.services.engine()?.as_ref());
            let (index, sources) = FunctionIndex::build(target).map_err(io(target))?;
            let ranked = aggregate_and_rank(&report.hits, &index, self.config.pipeline.top_k_locations);
            let run = OptimizeRun { provider: self.services.provider.as_ref(), temperature: self.config.pipeline.temperature, mode };
            let candidates = optimize_locations(&run, &ranked, &sources, &index, &lib);
            if candidates_dir.exists() {
                fs::remove_dir_all(&candidates_dir).map_err(io(&candidates_dir))?;
            }
            fs::create_dir_all(&candidates_dir).map_err(io(&candidates_dir))?;
            let mut produced = 0;
            for (i, c) in candidates.iter().enumerate() {
                write_json(&candidates_dir.join(format!("{i:04}.json")), c)?;
                if let CandidateStatus::Candidate { diff, .. } = &c.status {
                    write_atomic(&candidates_dir.join(format!("{i:04}.diff")), diff.as_bytes())?;
                    produced += 1;
                }
            }
            Ok(json!({ "locations": ranked.len(), "candidates": produced }))
        })
    }

    pub fn eval(
        &self,
        bench: &Path,
        settings: &BenchSettings,
        library: Option<&Path>,
        kb: Option<&Path>,
        out_dir: &Path,
        manifest: &Path,
    ) -> Result<StageStatus> {
        require(bench, "benchmark tasks", "mine")?;
        let lib = match library {
            Some(l) => Some(require_library(l, true)?),
            None => None,
        };
        let mut inputs = vec![("bench", bench)];
        if let Some(l) = library {
            inputs.push(("library", l));
        }
        if let Some(k) = kb {
            inputs.push(("kb", k));
        }
        let report_path = out_dir.join("report.json");
        let review = out_dir.join("review");
        let spec = StageSpec {
            stage: Stage::Eval,
            manifest: manifest.to_path_buf(),
            inputs,
            outputs: vec![("report", &report_path), ("review", &review)],
            params: serde_json::to_value(settings).expect("settings serialize"),
            engine: library.is_some(),
            embedder: false,
        };
        self.execute(spec, || {
            let tasks: Vec<BenchTask> = read_jsonl(bench)?;
            let knowledge_base: Vec<CommitRecord> = match kb {
                Some(k) => read_jsonl(k)?,
                None => Vec::new(),
            };
            let engine = if lib.is_some() { Some(self.services.engine()?) } else { None };
            let res = BenchResources {
                provider: self.services.provider.as_ref(),
                knowledge_base: &knowledge_base,
                library: lib.as_ref(),
                engine: engine.as_deref(),
            };
            let report = run_benchmark(&tasks, settings, &res)
                .map_err(|e| PipelineError::Failed { stage: "eval", message: e.to_string() })?;
            if review.exists() {
                fs::remove_dir_all(&review).map_err(io(&review))?;
            }
            fs::create_dir_all(&review).map_err(io(&review))?;
            export_review(&review, &tasks, &report).map_err(|e| PipelineError::Failed { stage: "eval", message: e.to_string() })?;
            write_json(&report_path, &report)?;
            Ok(json!({ "tasks": report.total, "em_solved": report.em_solved, "em_per_repeat": report.em_per_repeat }))
        })
    }

    pub fn perf(&self, reports: &Path, profile: Option<&Path>, out_dir: &Path, manifest: &Path) -> Result<StageStatus> {
        if !reports.is_dir() {
            return Err(PipelineError::MissingInput { stage: "perf", what: format!("variant report directory {}", reports.display()) });
        }
        let mut inputs = vec![("reports", reports)];
        if let Some(p) = profile {
            inputs.push(("profile", p));
        }
        let selection_path = out_dir.join("selection.json");
        let hotspots_path = out_dir.join("hotspots.json");
        let mut outputs = vec![("selection", selection_path.as_path())];
        if profile.is_some() {
            outputs.push(("hotspots", hotspots_path.as_path()));
        }
        let spec = StageSpec {
            stage: Stage::Perf,
            manifest: manifest.to_path_buf(),
            inputs,
            outputs,
            params: json!({}),
            engine: false,
            embedder: false,
        };
        self.execute(spec, || {
            let by_function = load_reports(reports).map_err(|e| PipelineError::Failed { stage: "perf", message: e.to_string() })?;
            let selection = combine(&by_function);
            write_json(&selection_path, &selection)?;
            if let Some(p) = profile {
                let entries: Vec<ProfileEntry> = read_json(p)?;
                write_json(&hotspots_path, &identify_hotspots(&entries, self.config.perf.hotspot_threshold))?;
            }
            Ok(json!({ "functions": selection.len() }))
        })
    }
}

/// External inputs of a full run.
#[derive(Debug, Clone, Default)]
pub struct PipelineInputs {
    pub corpus: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub bench: Option<PathBuf>,
    /// Knowledge base for retrieval; defaults to the mined commits.
    pub kb: Option<PathBuf>,
    pub perf_reports: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub mode: Option<AblationMode>,
}

/// Fixed artifact locations under a work directory.
pub struct WorkLayout {
    pub root: PathBuf,
}

impl WorkLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.dir(stage).join("manifest.json")
    }

    pub fn commits(&self) -> PathBuf {
        self.dir(Stage::Mine).join("commits.jsonl")
    }

    pub fn summaries(&self) -> PathBuf {
        self.dir(Stage::Summarize).join("summaries.json")
    }

    pub fn clustered_library(&self) -> PathBuf {
        self.dir(Stage::Cluster).join("library")
    }

    pub fn library(&self) -> PathBuf {
        self.dir(Stage::Rules).join("library")
    }

    pub fn traces(&self) -> PathBuf {
        self.dir(Stage::Rules).join("traces.json")
    }
}

/// Stages to run when none are named: the library chain, plus every later
/// stage whose external input was supplied.
pub fn default_stages(inputs: &PipelineInputs) -> Vec<Stage> {
    let mut s = vec![Stage::Mine, Stage::Summarize, Stage::Cluster, Stage::Rules, Stage::Verify];
    if inputs.target.is_some() {
        s.extend([Stage::Scan, Stage::Optimize]);
    }
    if inputs.bench.is_some() {
        s.push(Stage::Eval);
    }
    if inputs.perf_reports.is_some() {
        s.push(Stage::Perf);
    }
    s
}

/// Runs `stages` in canonical order, halting at the first failure.
pub fn run_pipeline(
    runner: &Runner<'_>,
    work: &Path,
    inputs: &PipelineInputs,
    stages: &[Stage],
) -> Result<Vec<(Stage, StageStatus)>> {
    let w = WorkLayout::new(work);
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut done = Vec::new();
    for stage in ordered {
        fs::create_dir_all(w.dir(stage)).map_err(io(work))?;
        let m = w.manifest(stage);
        let missing = |what: &str| PipelineError::MissingInput { stage: stage.name(), what: what.to_string() };
        let status = match stage {
            Stage::Mine => {
                let corpus = inputs.corpus.as_deref().ok_or_else(|| missing("--corpus"))?;
                runner.mine(corpus, inputs.keywords.as_deref(), &w.commits(), &m)?
            }
            Stage::Summarize => runner.summarize(&w.commits(), &w.summaries(), &m)?,
            Stage::Cluster => runner.cluster(&w.summaries(), &w.clustered_library(), &m)?,
            Stage::Rules => {
                let traces = w.traces();
                runner.rules(&w.clustered_library(), &w.commits(), &w.library(), Some(&traces), &m)?
            }
            Stage::Verify => runner.verify(&w.library(), &w.commits(), &w.dir(stage).join("report.json"), &m)?,
            Stage::Scan => {
                let target = inputs.target.as_deref().ok_or_else(|| missing("--target"))?;
                runner.scan(&w.library(), target, &w.dir(stage).join("scan.json"), &m)?
            }
            Stage::Optimize => {
                let target = inputs.target.as_deref().ok_or_else(|| missing("--target"))?;
                let mode = inputs.mode.unwrap_or(AblationMode::Full);
                runner.optimize(&w.library(), target, mode, &w.dir(stage), &m)?
            }
            Stage::Eval => {
                let bench = inputs.bench.as_deref().ok_or_else(|| missing("--bench"))?;
                let kb = inputs.kb.clone().unwrap_or_else(|| w.commits());
                let e = &runner.config.eval;
                let settings = BenchSettings {
                    approach: e.approach,
                    leakage: e.leakage,
                    repeats: e.repeats,
                    k: e.k,
                    bm25: Bm25Params { k1: e.bm25_k1, b: e.bm25_b },
                    mode: e.mode,
                    top_k_locations: runner.config.pipeline.top_k_locations,
                    temperature: runner.config.pipeline.temperature,
                };
                let library = w.library();
                runner.eval(bench, &settings, Some(&library), Some(&kb), &w.dir(stage), &m)?
            }
            Stage::Perf => {
                let reports = inputs.perf_reports.as_deref().ok_or_else(|| missing("--perf-reports"))?;
                runner.perf(reports, inputs.profile.as_deref(), &w.dir(stage), &m)?
            }
        };
        info!(stage = stage.name(), ?status, "stage finished");
        done.push((stage, status));
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn rules_without_library_names_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToolConfig::default();
        let services = Services::with_engines(
            Arc::new(ReplayProvider::new(Arc::new(ReplayScript::new()))),
            Arc::new(HashingEmbedder::new(8)),
            Arc::new(SemgrepEngineStub),
            Arc::new(SemgrepEngineStub),
        );
        let runner = Runner { config: &cfg, services: &services, force: false };
        let err = run_pipeline(&runner, dir.path(), &PipelineInputs::default(), &[Stage::Rules]).unwrap_err();
        assert!(err.to_string().contains("stage `cluster`"), "{err}");
    }

    struct SemgrepEngineStub;

    impl RuleEngine for SemgrepEngineStub {
        fn run(&self, _: &crate::engine::EngineJob) -> Result<crate::engine::EngineRun, EngineError> {
            Ok(Default::default())
        }
        fn identity(&self) -> String {
            "stub".into()
        }
    }
}
