//! Rule synthesis: for each strategy cluster, sample commits and run an
//! understand → generate → validate/repair loop that turns each commit into
//! a Semgrep rule matching the code it optimized.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_yaml::Value as Yaml;
use tracing::{debug, warn};

use crate::digest::sha256_hex;
use crate::engine::{EngineError, EngineJob, RuleEngine};
use crate::model::{AnalysisRule, CommitRecord, PipelineConfig, RuleStatus, StrategyCluster};
use crate::provider::{CompletionProvider, CompletionRequest};

pub const ZERO_FINDINGS: &str = "rule produced zero findings on the known-optimizable code";
pub const NO_RULE_BLOCK: &str = "no rule block: the response must contain exactly one fenced ```yaml block";
pub const MULTIPLE_RULE_BLOCKS: &str = "multiple rule blocks: the response must contain exactly one fenced ```yaml block";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttemptOutcome {
    Validated,
    ExhaustedIterations,
    EngineUnavailable,
    /// The provider failed or answered with nothing usable outside the
    /// repair loop (e.g. an empty analysis); no rule was produced.
    ProviderFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptTrace {
    pub commit_hash: String,
    pub attempt_index: u32,
    pub transcript: Vec<Exchange>,
    pub engine_errors: Vec<String>,
    pub outcome: AttemptOutcome,
    pub iterations_used: u32,
    pub engine_runs: u32,
    /// The validated rule text, when the outcome is `Validated`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_yaml: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl AttemptTrace {
    fn new(commit_hash: &str, attempt_index: u32) -> Self {
        Self {
            commit_hash: commit_hash.to_string(),
            attempt_index,
            transcript: Vec::new(),
            engine_errors: Vec::new(),
            outcome: AttemptOutcome::ProviderFailed,
            iterations_used: 0,
            engine_runs: 0,
            rule_yaml: None,
            failure: None,
        }
    }
}

/// Seed for one cluster's sample, derived from the run seed and cluster id.
fn cluster_seed(seed: u64, cluster_id: &str) -> u64 {
    let h = sha256_hex(format!("{seed}:{cluster_id}"));
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Up to `n` distinct member hashes, chosen by a seeded shuffle of the
/// members sorted by hash.
pub fn sample_members(cluster: &StrategyCluster, n: usize, seed: u64) -> Vec<String> {
    let mut members = cluster.member_hashes.clone();
    members.sort();
    members.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cluster_seed(seed, &cluster.cluster_id));
    members.shuffle(&mut rng);
    members.truncate(n);
    members
}

pub fn sample_commits<'a>(
    cluster: &StrategyCluster,
    records: &BTreeMap<&str, &'a CommitRecord>,
    n: usize,
    seed: u64,
) -> Vec<&'a CommitRecord> {
    sample_members(cluster, n, seed).iter().filter_map(|h| records.get(h.as_str()).copied()).collect()
}

pub fn rule_id(cluster_id: &str, commit_hash: &str, attempt_index: u32) -> String {
    format!("{cluster_id}-{}-a{attempt_index}", &commit_hash[..commit_hash.len().min(12)])
}

pub fn understand_prompt(commit: &CommitRecord) -> String {
    format!(
        "You are a performance engineer. Study the following commit from `{repo}`, which optimizes \
         the function `{func}`.\n\nCommit message:\n{msg}\n\nDiff:\n{diff}\n\
         Thoroughly analyze and explain the optimization strategy: what inefficiency existed in the \
         original code, which syntactic pattern exhibits it, and under which conditions the \
         transformation applies. Do NOT write any Semgrep rule, YAML or code block in this answer.\n",
        repo = commit.repo_id,
        func = commit.function_name,
        msg = commit.message.trim(),
        diff = commit.diff,
    )
}

pub fn generate_prompt(commit: &CommitRecord, analysis: &str) -> String {
    format!(
        "Optimization analysis:\n{analysis}\n\nOriginal ({lang}) code before the optimization:\n```{lang}\n{code}```\n\n\
         Write one Semgrep rule that detects code where this optimization strategy applies. It must \
         match the original code above. Requirements: strictly valid Semgrep syntax; a top-level \
         `rules:` list with exactly one rule having `id`, `languages: [{lang}]`, `severity`, `message` \
         and a pattern; answer with exactly one fenced ```yaml block.\n",
        lang = commit.language.engine_id(),
        code = commit.code_before,
    )
}

pub fn numbered(code: &str) -> String {
    code.lines().enumerate().map(|(i, l)| format!("{:>4} | {l}\n", i + 1)).collect()
}

pub fn repair_prompt(commit: &CommitRecord, rule_text: &str, error: &str) -> String {
    format!(
        "The following Semgrep rule was meant to detect an optimization opportunity in the code \
         below, but validating it failed.\n\nRule:\n```yaml\n{rule}\n```\n\nError:\n{error}\n\n\
         Code ({lang}, with line numbers):\n{code}\n\
         Fix the rule so that it is valid Semgrep syntax and matches the code. Answer with exactly \
         one fenced ```yaml block containing the complete revised rule.\n",
        rule = rule_text.trim_end(),
        error = error.trim(),
        lang = commit.language.engine_id(),
        code = numbered(&commit.code_before),
    )
}

struct Fence {
    lang: String,
    body: String,
    span: (usize, usize),
}

/// Fenced code blocks of a markdown-ish response, with byte spans.
fn fences(text: &str) -> Vec<Fence> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize, usize)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        match &open {
            None if t.starts_with("```") => {
                open = Some((t[3..].trim().to_lowercase(), offset, offset + line.len()));
            }
            Some((lang, start, body_start)) if t == "```" => {
                out.push(Fence {
                    lang: lang.clone(),
                    body: text[*body_start..offset].to_string(),
                    span: (*start, offset + line.len()),
                });
                open = None;
            }
            _ => {}
        }
        offset += line.len();
    }
    out
}

fn is_yaml_fence(f: &Fence) -> bool {
    matches!(f.lang.as_str(), "yaml" | "yml") || (f.lang.is_empty() && f.body.trim_start().starts_with("rules:"))
}

/// Removes fenced YAML blocks; returns the cleaned text and whether any
/// were found.
pub fn strip_yaml_blocks(text: &str) -> (String, bool) {
    let blocks: Vec<Fence> = fences(text).into_iter().filter(is_yaml_fence).collect();
    let mut out = text.to_string();
    for f in blocks.iter().rev() {
        out.replace_range(f.span.0..f.span.1, "");
    }
    (out, !blocks.is_empty())
}

/// The single fenced YAML block of a response, or the synthetic error fed
/// back to repair.
pub fn extract_rule(response: &str) -> Result<String, String> {
    let mut blocks: Vec<Fence> = fences(response).into_iter().filter(is_yaml_fence).collect();
    match blocks.len() {
        0 => Err(NO_RULE_BLOCK.to_string()),
        1 => Ok(blocks.remove(0).body),
        _ => Err(MULTIPLE_RULE_BLOCKS.to_string()),
    }
}

/// Sets the single rule's `id`. YAML that does not parse is returned
/// unchanged so the engine's own diagnostics become the repair feedback;
/// parseable YAML without exactly one rule is a synthetic failure.
pub fn rewrite_rule_id(yaml: &str, id: &str) -> Result<String, String> {
    let Ok(mut doc) = serde_yaml::from_str::<Yaml>(yaml) else {
        return Ok(yaml.to_string());
    };
    let rules = doc.get_mut("rules").and_then(Yaml::as_sequence_mut);
    match rules {
        Some(rules) if rules.len() == 1 && rules[0].is_mapping() => {
            rules[0]["id"] = Yaml::String(id.to_string());
        }
        Some(rules) => return Err(format!("expected exactly one rule under `rules`, found {}", rules.len())),
        None => return Err("missing top-level `rules:` list".to_string()),
    }
    serde_yaml::to_string(&doc).map_err(|e| e.to_string())
}

/// Canonical form for deduplication: key-sorted JSON of the rule with its
/// identifier removed.
pub fn normalized_rule(yaml: &str) -> String {
    match serde_yaml::from_str::<serde_json::Value>(yaml) {
        Ok(mut v) => {
            if let Some(r) = v.get_mut("rules").and_then(|r| r.get_mut(0)).and_then(|r| r.as_object_mut()) {
                r.remove("id");
            }
            v.to_string()
        }
        Err(_) => yaml.trim().to_string(),
    }
}

pub struct ForgeContext<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub engine: &'a dyn RuleEngine,
    pub config: &'a PipelineConfig,
}

impl ForgeContext<'_> {
    fn ask(&self, prompt: &str, sample: u32, trace: &mut AttemptTrace) -> Result<String, String> {
        let req = CompletionRequest::new(prompt, self.config.temperature).with_sample(sample);
        match self.provider.complete(&req) {
            Ok(response) => {
                trace.transcript.push(Exchange { prompt: prompt.to_string(), response: response.clone() });
                Ok(response)
            }
            Err(e) => {
                trace.transcript.push(Exchange { prompt: prompt.to_string(), response: String::new() });
                Err(e.to_string())
            }
        }
    }
}

/// Phase 1. Returns the analysis with any fenced YAML removed.
pub fn phase_understand(
    ctx: &ForgeContext<'_>,
    commit: &CommitRecord,
    sample: u32,
    trace: &mut AttemptTrace,
) -> Result<String, String> {
    let response = ctx.ask(&understand_prompt(commit), sample, trace)?;
    let (analysis, had_yaml) = strip_yaml_blocks(&response);
    if had_yaml {
        warn!(commit = %commit.commit_hash, "analysis contained YAML; stripped");
    }
    if analysis.trim().is_empty() {
        return Err("provider returned an empty analysis".to_string());
    }
    Ok(analysis)
}

/// Phase 2. The outer error is a provider failure; the inner one is an
/// iteration failure (no usable rule block) to be repaired.
pub fn phase_generate(
    ctx: &ForgeContext<'_>,
    commit: &CommitRecord,
    analysis: &str,
    id: &str,
    sample: u32,
    trace: &mut AttemptTrace,
) -> Result<Result<String, String>, String> {
    let response = ctx.ask(&generate_prompt(commit, analysis), sample, trace)?;
    Ok(extract_rule(&response).and_then(|y| rewrite_rule_id(&y, id)))
}

/// Phase 3. Each iteration evaluates one candidate; the loop stops on the
/// first clean run with at least one finding on `code_before`, or after
/// `max_iterations` candidates.
pub fn validate_and_repair(
    ctx: &ForgeContext<'_>,
    commit: &CommitRecord,
    mut candidate: Result<String, String>,
    id: &str,
    sample: u32,
    mut trace: AttemptTrace,
) -> AttemptTrace {
    let max = ctx.config.max_iterations;
    // rule text shown to the repair prompt when the candidate itself was unusable
    let mut last_text = String::new();
    for iteration in 1..=max {
        trace.iterations_used = iteration;
        let error = match &candidate {
            Ok(yaml) => {
                last_text = yaml.clone();
                trace.engine_runs += 1;
                match ctx.engine.run(&EngineJob::on_code(yaml, &commit.code_before, commit.language)) {
                    Err(EngineError::Unavailable(msg)) => {
                        trace.outcome = AttemptOutcome::EngineUnavailable;
                        trace.failure = Some(msg);
                        return trace;
                    }
                    Err(e) => e.to_string(),
                    Ok(run) if run.is_clean() && !run.findings.is_empty() => {
                        trace.outcome = AttemptOutcome::Validated;
                        trace.rule_yaml = Some(yaml.clone());
                        return trace;
                    }
                    Ok(run) if run.is_clean() => ZERO_FINDINGS.to_string(),
                    Ok(run) => run.diagnostics(),
                }
            }
            Err(synthetic) => synthetic.clone(),
        };
        debug!(commit = %commit.short_hash(), iteration, %error, "candidate rejected");
        trace.engine_errors.push(error.clone());
        if iteration == max {
            break;
        }
        match ctx.ask(&repair_prompt(commit, &last_text, &error), sample, &mut trace) {
            Ok(response) => candidate = extract_rule(&response).and_then(|y| rewrite_rule_id(&y, id)),
            Err(e) => {
                trace.outcome = AttemptOutcome::ProviderFailed;
                trace.failure = Some(e);
                return trace;
            }
        }
    }
    trace.outcome = AttemptOutcome::ExhaustedIterations;
    trace
}

/// One independent attempt (fresh transcript, phase 1 re-run).
pub fn run_attempt(
    ctx: &ForgeContext<'_>,
    cluster_id: &str,
    commit: &CommitRecord,
    attempt_index: u32,
) -> AttemptTrace {
    let mut trace = AttemptTrace::new(&commit.commit_hash, attempt_index);
    let sample = attempt_index - 1;
    let id = rule_id(cluster_id, &commit.commit_hash, attempt_index);
    let analysis = match phase_understand(ctx, commit, sample, &mut trace) {
        Ok(a) => a,
        Err(e) => {
            trace.failure = Some(e);
            return trace;
        }
    };
    match phase_generate(ctx, commit, &analysis, &id, sample, &mut trace) {
        Ok(candidate) => validate_and_repair(ctx, commit, candidate, &id, sample, trace),
        Err(e) => {
            trace.failure = Some(e);
            trace
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterForge {
    pub cluster_id: String,
    pub sampled: Vec<String>,
    pub rules: Vec<AnalysisRule>,
    pub traces: Vec<AttemptTrace>,
    pub engine_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeOutput {
    pub clusters: Vec<ClusterForge>,
}

impl ForgeOutput {
    pub fn rules(&self) -> Vec<AnalysisRule> {
        self.clusters.iter().flat_map(|c| c.rules.iter().cloned()).collect()
    }

    pub fn ruleless(&self) -> Vec<String> {
        self.clusters.iter().filter(|c| c.rules.is_empty()).map(|c| c.cluster_id.clone()).collect()
    }
}

/// Runs every (cluster, sampled commit, attempt) triple in parallel and
/// assembles each cluster's rules in (commit hash, attempt) order,
/// collapsing rules whose normalized YAML is identical.
pub fn build_rule_sets(
    ctx: &ForgeContext<'_>,
    clusters: &[StrategyCluster],
    records: &BTreeMap<&str, &CommitRecord>,
) -> ForgeOutput {
    let cfg = ctx.config;
    let plans: Vec<(&StrategyCluster, Vec<&CommitRecord>)> = clusters
        .iter()
        .map(|c| {
            let mut sampled = sample_commits(c, records, cfg.n_sample_commits, cfg.seed);
            sampled.sort_by(|a, b| a.commit_hash.cmp(&b.commit_hash));
            (c, sampled)
        })
        .collect();
    let jobs: Vec<(usize, &CommitRecord, u32)> = plans
        .iter()
        .enumerate()
        .flat_map(|(ci, (_, commits))| {
            commits.iter().flat_map(move |c| (1..=cfg.n_attempts).map(move |a| (ci, *c, a)))
        })
        .collect();
    let traces: Vec<(usize, AttemptTrace)> = jobs
        .par_iter()
        .map(|&(ci, commit, a)| (ci, run_attempt(ctx, &plans[ci].0.cluster_id, commit, a)))
        .collect();

    let mut out: Vec<ClusterForge> = plans
        .iter()
        .map(|(c, commits)| ClusterForge {
            cluster_id: c.cluster_id.clone(),
            sampled: commits.iter().map(|r| r.commit_hash.clone()).collect(),
            rules: Vec::new(),
            traces: Vec::new(),
            engine_runs: 0,
        })
        .collect();
    let mut seen: Vec<BTreeSet<String>> = vec![BTreeSet::new(); out.len()];
    for (ci, trace) in traces {
        let slot = &mut out[ci];
        slot.engine_runs += trace.engine_runs as usize;
        if let (AttemptOutcome::Validated, Some(yaml)) = (trace.outcome, &trace.rule_yaml) {
            if seen[ci].insert(normalized_rule(yaml)) {
                let commit = records[trace.commit_hash.as_str()];
                slot.rules.push(AnalysisRule {
                    rule_id: rule_id(&slot.cluster_id, &commit.commit_hash, trace.attempt_index),
                    cluster_id: slot.cluster_id.clone(),
                    source_commit: commit.commit_hash.clone(),
                    source_repo: commit.repo_id.clone(),
                    yaml_text: yaml.clone(),
                    attempt_index: trace.attempt_index,
                    iterations_used: trace.iterations_used,
                    status: RuleStatus::Validated,
                });
            }
        }
        slot.traces.push(trace);
    }
    for c in &out {
        if c.rules.is_empty() {
            warn!(cluster = %c.cluster_id, "no validated rule; cluster recorded as ruleless");
        }
    }
    ForgeOutput { clusters: out }
}

pub fn build_rule_set(
    ctx: &ForgeContext<'_>,
    cluster: &StrategyCluster,
    records: &BTreeMap<&str, &CommitRecord>,
) -> ClusterForge {
    build_rule_sets(ctx, std::slice::from_ref(cluster), records).clusters.remove(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub rule_id: String,
    pub ok: bool,
    pub findings: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Re-runs every rule on its source commit's pre-image.
pub fn verify_rules(
    rules: &[AnalysisRule],
    records: &BTreeMap<&str, &CommitRecord>,
    engine: &dyn RuleEngine,
) -> Vec<RuleCheck> {
    rules
        .par_iter()
        .map(|r| {
            let Some(commit) = records.get(r.source_commit.as_str()) else {
                return RuleCheck {
                    rule_id: r.rule_id.clone(),
                    ok: false,
                    findings: 0,
                    error: Some(format!("source commit {} not in corpus", r.source_commit)),
                };
            };
            match engine.run(&EngineJob::on_code(&r.yaml_text, &commit.code_before, commit.language)) {
                Ok(run) => RuleCheck {
                    rule_id: r.rule_id.clone(),
                    ok: run.is_clean() && !run.findings.is_empty(),
                    findings: run.findings.len(),
                    error: (!run.is_clean()).then(|| run.diagnostics()),
                },
                Err(e) => RuleCheck { rule_id: r.rule_id.clone(), ok: false, findings: 0, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Counts engine runs passing through; used to report per-stage totals.
pub struct CountingEngine<'a> {
    inner: &'a dyn RuleEngine,
    count: AtomicUsize,
}

impl<'a> CountingEngine<'a> {
    pub fn new(inner: &'a dyn RuleEngine) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl RuleEngine for CountingEngine<'_> {
    fn run(&self, job: &EngineJob) -> Result<crate::engine::EngineRun, EngineError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.run(job)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}
