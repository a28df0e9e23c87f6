//! Benchmark harness: Exact Match scoring, a BM25 retrieval-augmented
//! baseline, strategy-library runs with leakage exclusion, and export of
//! patch pairs for manual review.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::engine::{EngineJob, RuleEngine};
use crate::model::{function_diff, CommitRecord, Language};
use crate::normalize::exact_match;
use crate::optimizer::{
    aggregate_and_rank, build_prompt, generate_optimization, AblationMode, FunctionIndex, Generation, ScanHit,
};
use crate::cfunc::scan_functions;
use crate::provider::CompletionProvider;
use crate::store::{write_atomic, Library, StoreError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("knowledge base is empty after exclusion")]
    EmptyKnowledgeBase,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchTask {
    pub repo_id: String,
    pub commit_hash: String,
    pub code_before: String,
    pub code_after: String,
    #[serde(default)]
    pub language: Language,
}

impl From<&CommitRecord> for BenchTask {
    fn from(c: &CommitRecord) -> Self {
        Self {
            repo_id: c.repo_id.clone(),
            commit_hash: c.commit_hash.clone(),
            code_before: c.code_before.clone(),
            code_after: c.code_after.clone(),
            language: c.language,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Okapi BM25 score of every document for `query`, with the
/// non-negative idf `ln((N - n + 0.5) / (n + 0.5) + 1)`.
pub fn bm25_scores<D: AsRef<str>>(query: &str, docs: &[D], params: Bm25Params) -> Vec<f64> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d.as_ref())).collect();
    let n_docs = tokenized.len() as f64;
    if tokenized.is_empty() {
        return Vec::new();
    }
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n_docs;
    let mut df: HashMap<&str, usize> = HashMap::new();
    let tfs: Vec<HashMap<&str, usize>> = tokenized
        .iter()
        .map(|toks| {
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t).or_default() += 1;
            }
            tf
        })
        .collect();
    let query_terms = tokenize(query);
    tfs.iter()
        .zip(&tokenized)
        .map(|(tf, toks)| {
            let len_norm = 1.0 - params.b + params.b * toks.len() as f64 / avgdl.max(f64::MIN_POSITIVE);
            query_terms
                .iter()
                .map(|q| {
                    let f = *tf.get(q.as_str()).unwrap_or(&0) as f64;
                    if f == 0.0 {
                        return 0.0;
                    }
                    let n = *df.get(q.as_str()).unwrap_or(&0) as f64;
                    let idf = ((n_docs - n + 0.5) / (n + 0.5) + 1.0).ln();
                    idf * f * (params.k1 + 1.0) / (f + params.k1 * len_norm)
                })
                .sum()
        })
        .collect()
}

/// What a task may not see.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub commit_hash: Option<String>,
    pub code: Option<String>,
    pub repo_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageMode {
    /// Exclude the task's own commit and anything with identical code.
    #[default]
    Standard,
    /// Additionally exclude everything from the task's repository.
    Degraded,
}

impl std::str::FromStr for LeakageMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(Self::Standard),
            "degraded" => Ok(Self::Degraded),
            other => Err(format!("unknown leakage mode {other:?} (standard | degraded)")),
        }
    }
}

impl Exclusion {
    pub fn for_task(task: &BenchTask, mode: LeakageMode) -> Self {
        Self {
            commit_hash: Some(task.commit_hash.clone()),
            code: Some(task.code_before.clone()),
            repo_id: (mode == LeakageMode::Degraded).then(|| task.repo_id.clone()),
        }
    }

    pub fn excludes(&self, commit_hash: &str, repo_id: &str, code: Option<&str>) -> bool {
        self.commit_hash.as_deref() == Some(commit_hash)
            || self.repo_id.as_deref() == Some(repo_id)
            || matches!((self.code.as_deref(), code), (Some(a), Some(b)) if a == b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved<'a> {
    pub record: &'a CommitRecord,
    pub score: f64,
}

/// The `k` best-scoring knowledge-base entries for `query_code` (scored on
/// their pre-commit code), returned in ascending score order so the most
/// similar example comes last. Excluded entries are removed before scoring;
/// ties rank the earlier-inserted entry higher.
pub fn bm25_retrieve<'a>(
    query_code: &str,
    knowledge_base: &'a [CommitRecord],
    k: usize,
    exclusion: &Exclusion,
    params: Bm25Params,
) -> Result<Vec<Retrieved<'a>>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let kept: Vec<&CommitRecord> = knowledge_base
        .iter()
        .filter(|r| !exclusion.excludes(&r.commit_hash, &r.repo_id, Some(&r.code_before)))
        .collect();
    if kept.is_empty() {
        return Err(EvalError::EmptyKnowledgeBase);
    }
    let docs: Vec<&str> = kept.iter().map(|r| r.code_before.as_str()).collect();
    let scores = bm25_scores(query_code, &docs, params);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.reverse();
    Ok(order.into_iter().map(|i| Retrieved { record: kept[i], score: scores[i] }).collect())
}

pub fn direct_prompt(task: &BenchTask) -> String {
    format!(
        "Optimize the performance of the following {lang} function while preserving its behavior.\n\
         ```{lang}\n{code}```\n\
         Provide the complete content of the optimized code in a single fenced code block.\n",
        lang = task.language.engine_id(),
        code = task.code_before,
    )
}

/// Retrieval-augmented prompt; `examples` are in ascending similarity.
pub fn rag_prompt(task: &BenchTask, examples: &[Retrieved<'_>]) -> String {
    let lang = task.language.engine_id();
    let mut p = String::from("Here are examples of performance optimizations from other code:\n\n");
    for (i, ex) in examples.iter().enumerate() {
        p.push_str(&format!(
            "Example {n}, before:\n```{lang}\n{b}```\nExample {n}, after:\n```{lang}\n{a}```\n\n",
            n = i + 1,
            b = ex.record.code_before,
            a = ex.record.code_after,
        ));
    }
    p.push_str(&direct_prompt(task));
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Direct,
    Rag,
    StrategyLib,
}

impl std::str::FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "rag" => Ok(Self::Rag),
            "strategy-lib" | "strategy_lib" => Ok(Self::StrategyLib),
            other => Err(format!("unknown approach {other:?} (direct | rag | strategy-lib)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub approach: Approach,
    pub leakage: LeakageMode,
    pub repeats: u32,
    pub k: usize,
    pub bm25: Bm25Params,
    pub mode: AblationMode,
    pub top_k_locations: usize,
    pub temperature: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            approach: Approach::Direct,
            leakage: LeakageMode::Standard,
            repeats: 3,
            k: 4,
            bm25: Bm25Params::default(),
            mode: AblationMode::Full,
            top_k_locations: 25,
            temperature: 0.0,
        }
    }
}

pub struct BenchResources<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub knowledge_base: &'a [CommitRecord],
    pub library: Option<&'a Library>,
    pub engine: Option<&'a dyn RuleEngine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub commit_hash: String,
    pub repo_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RepeatOutcome {
    Generated { code: String, exact_match: bool },
    NoChange,
    Failed { error: String },
}

impl RepeatOutcome {
    pub fn is_match(&self) -> bool {
        matches!(self, Self::Generated { exact_match: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: usize,
    pub repo_id: String,
    pub commit_hash: String,
    /// Retrieved examples (RAG) or rules that matched the task (library).
    pub provenance: Vec<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<(usize, usize)>,
    pub repeats: Vec<RepeatOutcome>,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub settings: BenchSettings,
    pub tasks: Vec<TaskRecord>,
    pub total: usize,
    /// Tasks with at least one exact-matching repeat.
    pub em_solved: usize,
    /// Exact matches per repeat index.
    pub em_per_repeat: Vec<usize>,
    pub em_mean: f64,
}

fn generate(
    prompt: &str,
    res: &BenchResources<'_>,
    task: &BenchTask,
    temperature: f64,
    repeat: u32,
) -> RepeatOutcome {
    match generate_optimization(prompt, res.provider, &task.code_before, temperature, repeat) {
        Ok(Generation::Changed { optimized_code, .. }) => RepeatOutcome::Generated {
            exact_match: exact_match(&optimized_code, &task.code_after),
            code: optimized_code,
        },
        Ok(Generation::NoChange) => RepeatOutcome::NoChange,
        Err(e) => RepeatOutcome::Failed { error: e.to_string() },
    }
}

/// Library copy without rules the task may not see: its own commit, its
/// own code (when the source commit is in the knowledge base), and in
/// degraded mode its whole repository.
pub fn filtered_library(library: &Library, exclusion: &Exclusion, knowledge_base: &[CommitRecord]) -> Library {
    let code_of: BTreeMap<&str, &str> =
        knowledge_base.iter().map(|r| (r.commit_hash.as_str(), r.code_before.as_str())).collect();
    library.without_rules(|r| {
        exclusion.excludes(&r.source_commit, &r.source_repo, code_of.get(r.source_commit.as_str()).copied())
    })
}

/// Scans the task's code with the library and returns merged, ranked hits.
fn library_locations(
    task: &BenchTask,
    library: &Library,
    engine: &dyn RuleEngine,
    top_k: usize,
) -> (Vec<crate::optimizer::RankedLocation>, Vec<Provenance>) {
    let file = format!("task.{}", task.language.extension());
    let mut hits = Vec::new();
    let mut used = BTreeMap::new();
    for rule in library.validated_rules() {
        if library.ruleless_clusters.contains(&rule.cluster_id) {
            continue;
        }
        match engine.run(&EngineJob::on_code(&rule.yaml_text, &task.code_before, task.language)) {
            Ok(run) if run.is_clean() => {
                for f in &run.findings {
                    hits.push(ScanHit {
                        file_path: file.clone(),
                        start_line: f.start_line,
                        end_line: f.end_line.max(f.start_line),
                        rule_id: rule.rule_id.clone(),
                        cluster_id: rule.cluster_id.clone(),
                    });
                }
                if !run.findings.is_empty() {
                    used.insert(
                        rule.rule_id.clone(),
                        Provenance {
                            id: rule.rule_id.clone(),
                            commit_hash: rule.source_commit.clone(),
                            repo_id: rule.source_repo.clone(),
                            score: None,
                        },
                    );
                }
            }
            Ok(run) => warn!(rule = %rule.rule_id, diagnostics = %run.diagnostics(), "rule skipped"),
            Err(e) => warn!(rule = %rule.rule_id, error = %e, "rule skipped"),
        }
    }
    hits.sort();
    let index = FunctionIndex::from_spans(BTreeMap::from([(file, scan_functions(&task.code_before))]));
    (aggregate_and_rank(&hits, &index, top_k), used.into_values().collect())
}

fn run_task(index: usize, task: &BenchTask, settings: &BenchSettings, res: &BenchResources<'_>) -> TaskRecord {
    let exclusion = Exclusion::for_task(task, settings.leakage);
    let mut record = TaskRecord {
        index,
        repo_id: task.repo_id.clone(),
        commit_hash: task.commit_hash.clone(),
        provenance: Vec::new(),
        location: None,
        repeats: Vec::new(),
        solved: false,
    };
    let fail_all = |record: &mut TaskRecord, error: String| {
        warn!(task = index, %error, "task failed");
        record.repeats = (0..settings.repeats).map(|_| RepeatOutcome::Failed { error: error.clone() }).collect();
    };
    let prompt = match settings.approach {
        Approach::Direct => Ok(direct_prompt(task)),
        Approach::Rag => bm25_retrieve(&task.code_before, res.knowledge_base, settings.k, &exclusion, settings.bm25)
            .map(|examples| {
                record.provenance = examples
                    .iter()
                    .map(|e| Provenance {
                        id: e.record.commit_hash.clone(),
                        commit_hash: e.record.commit_hash.clone(),
                        repo_id: e.record.repo_id.clone(),
                        score: Some(e.score),
                    })
                    .collect();
                rag_prompt(task, &examples)
            })
            .map_err(|e| e.to_string()),
        Approach::StrategyLib => match (res.library, res.engine) {
            (Some(lib), Some(engine)) => {
                let visible = filtered_library(lib, &exclusion, res.knowledge_base);
                let (locations, used) = library_locations(task, &visible, engine, settings.top_k_locations);
                record.provenance = used;
                match locations.first() {
                    Some(top) => {
                        record.location = Some((top.start_line, top.end_line));
                        let strategy = visible.cluster(&top.cluster_id).map(|c| c.strategy_text.as_str()).unwrap_or("");
                        build_prompt(&task.code_before, top.start_line, top.end_line, strategy, settings.mode)
                            .map_err(|e| e.to_string())
                    }
                    None => Err("no rule matched the task code".to_string()),
                }
            }
            _ => Err("strategy-lib approach needs a library and a rule engine".to_string()),
        },
    };
    match prompt {
        Ok(p) => {
            record.repeats = (0..settings.repeats).map(|r| generate(&p, res, task, settings.temperature, r)).collect();
        }
        Err(e) => fail_all(&mut record, e),
    }
    record.solved = record.repeats.iter().any(RepeatOutcome::is_match);
    record
}

/// Runs every task `repeats` times; a task counts as solved when any
/// repeat exactly matches the ground truth.
pub fn run_benchmark(tasks: &[BenchTask], settings: &BenchSettings, res: &BenchResources<'_>) -> Result<Report, EvalError> {
    if settings.repeats == 0 {
        return Err(EvalError::ZeroRepeats);
    }
    let records: Vec<TaskRecord> = tasks.par_iter().enumerate().map(|(i, t)| run_task(i, t, settings, res)).collect();
    let em_per_repeat: Vec<usize> = (0..settings.repeats as usize)
        .map(|r| records.iter().filter(|t| t.repeats.get(r).is_some_and(RepeatOutcome::is_match)).count())
        .collect();
    let em_mean = em_per_repeat.iter().sum::<usize>() as f64 / settings.repeats as f64;
    Ok(Report {
        settings: settings.clone(),
        total: records.len(),
        em_solved: records.iter().filter(|t| t.solved).count(),
        em_per_repeat,
        em_mean,
        tasks: records,
    })
}

/// Writes `review/<index>-<hash12>/` with the ground-truth diff and one
/// diff per generated repeat, for manual semantic-equivalence judging.
pub fn export_review(dir: &Path, tasks: &[BenchTask], report: &Report) -> Result<(), EvalError> {
    for rec in &report.tasks {
        let task = &tasks[rec.index];
        let sub = dir.join(format!("{:04}-{}", rec.index, &task.commit_hash[..task.commit_hash.len().min(12)]));
        write_atomic(&sub.join("ground_truth.diff"), function_diff(&task.code_before, &task.code_after).as_bytes())?;
        for (r, outcome) in rec.repeats.iter().enumerate() {
            if let RepeatOutcome::Generated { code, .. } = outcome {
                write_atomic(&sub.join(format!("repeat{r}.diff")), function_diff(&task.code_before, code).as_bytes())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ReplayProvider, ReplayScript};
    use std::sync::Arc;

    fn rec(repo: &str, h: char, before: &str, after: &str) -> CommitRecord {
        CommitRecord {
            repo_id: repo.into(),
            commit_hash: h.to_string().repeat(40),
            message: "m".into(),
            function_name: "f".into(),
            code_before: before.into(),
            code_after: after.into(),
            diff: function_diff(before, after),
            language: Language::C,
        }
    }

    #[test]
    fn tokenizer_splits_identifiers() {
        assert_eq!(tokenize("for(int i_0=0;I_0<N;)"), ["for", "int", "i_0", "0", "i_0", "n"]);
    }

    #[test]
    fn scores_match_hand_computation() {
        // two docs, query "a": df=1, N=2 -> idf = ln(1.5/1.5 + 1) = ln 2
        let s = bm25_scores("a", &["a b", "c d"], Bm25Params::default());
        // len_norm = 1 for equal lengths -> tf part = 2.2 / 2.2 = 1
        assert!((s[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn retrieval_contract() {
        let kb = vec![
            rec("r1", 'a', "int sum(int *a, int n) { int s = 0; for (int i = 0; i < n; i++) s += a[i]; return s; }", "x"),
            rec("r2", 'b', "void copy(char *d, const char *s) { while (*s) *d++ = *s++; }", "y"),
            rec("r3", 'c', "int max(int *a, int n) { int m = a[0]; for (int i = 1; i < n; i++) if (a[i] > m) m = a[i]; return m; }", "z"),
            rec("r1", 'd', "double mean(double *v, int n) { double s = 0; for (int i = 0; i < n; i++) s += v[i]; return s / n; }", "w"),
            rec("r2", 'e', "size_t len(const char *s) { size_t n = 0; while (s[n]) n++; return n; }", "v"),
        ];
        let q = kb[2].code_before.clone();
        let got = bm25_retrieve(&q, &kb, 4, &Exclusion::default(), Bm25Params::default()).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got.windows(2).all(|w| w[0].score <= w[1].score));
        assert_eq!(got.last().unwrap().record.commit_hash, kb[2].commit_hash);
        let ex = Exclusion { repo_id: Some("r3".into()), ..Default::default() };
        let got = bm25_retrieve(&q, &kb, 4, &ex, Bm25Params::default()).unwrap();
        assert!(got.iter().all(|r| r.record.repo_id != "r3"));
        let all = Exclusion { code: None, commit_hash: None, repo_id: Some("r1".into()) };
        assert!(bm25_retrieve(&q, &kb[..1], 4, &all, Bm25Params::default()).is_err());
    }

    #[test]
    fn benchmark_counts_em() {
        let tasks: Vec<BenchTask> = ["a", "b", "c"]
            .iter()
            .map(|n| BenchTask {
                repo_id: "r".into(),
                commit_hash: n.repeat(40),
                code_before: format!("int {n}(void) {{ return slow(); }}\n"),
                code_after: format!("int {n}(void) {{ return fast(); }}\n"),
                language: Language::C,
            })
            .collect();
        let mut s = ReplayScript::new();
        s.insert_text(&direct_prompt(&tasks[0]), "```c\nint a(void) { return fast(); } // better\n```");
        s.insert_text(&direct_prompt(&tasks[1]), "```c\nint b(void) { return quick(); }\n```");
        s.insert_text(&direct_prompt(&tasks[2]), "no code");
        let p = ReplayProvider::new(Arc::new(s));
        let res = BenchResources { provider: &p, knowledge_base: &[], library: None, engine: None };
        let report = run_benchmark(&tasks, &BenchSettings::default(), &res).unwrap();
        assert_eq!(report.settings.repeats, 3);
        assert_eq!(report.em_solved, 1);
        assert_eq!(report.em_per_repeat, [1, 1, 1]);
        assert!(matches!(report.tasks[2].repeats[0], RepeatOutcome::Failed { .. }));
        let dir = tempfile::tempdir().unwrap();
        export_review(dir.path(), &tasks, &report).unwrap();
        assert!(dir.path().join(format!("0000-{}", "a".repeat(12))).join("repeat0.diff").exists());
        assert!(!dir.path().join(format!("0002-{}", "c".repeat(12))).join("repeat0.diff").exists());
    }
}
