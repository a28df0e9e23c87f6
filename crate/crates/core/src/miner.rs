//! Filters a local commit corpus down to deduplicated single-function C/C++
//! optimization commits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::cfunc::{self, FunctionSpan};
use crate::diff::{self, DiffParseError, HunkLine};
use crate::model::{function_diff, CommitRecord, Language};
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError};

pub const DEFAULT_KEYWORDS: &[&str] = &[
    "optimize",
    "optimization",
    "speed up",
    "speedup",
    "faster",
    "performance",
    "perf",
    "reduce overhead",
    "avoid copy",
    "cache",
];

#[derive(Debug, Error)]
pub enum MineError {
    #[error("{path}:{line}: {message}")]
    Corpus { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid keyword list: {0}")]
    Keywords(String),
}

/// Full contents of one file touched by a raw commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileContents {
    pub path: String,
    #[serde(default)]
    pub before: Option<String>,
    #[serde(default)]
    pub after: Option<String>,
}

/// One commit of the input corpus, as supplied on a JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCommit {
    pub repo_id: String,
    pub commit_hash: String,
    pub message: String,
    pub diff: String,
    #[serde(default)]
    pub files: Vec<FileContents>,
}

impl RawCommit {
    fn file(&self, path: &str) -> Option<&FileContents> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn pre_images(&self) -> BTreeMap<&str, &str> {
        self.files
            .iter()
            .filter_map(|f| f.before.as_deref().map(|b| (f.path.as_str(), b)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

/// Changed region attributed to a function (or to no function).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangedFunction {
    pub file_path: String,
    /// `None` when the changed lines lie outside every detected function.
    pub function_name: Option<String>,
    /// Pre-image lines covering the changes.
    pub hunk_span: LineSpan,
    /// Span of the enclosing function in the pre-image, when known.
    #[serde(skip)]
    pub function_span: Option<FunctionSpan>,
}

/// Attributes every changed line of `diff` to the function containing it.
///
/// Functions are located by scanning the pre-image of each file when it is
/// available in `pre_images`; otherwise the hunk header's context text is
/// used. Insertions count for a function when they fall strictly inside its
/// span.
pub fn parse_changed_functions(
    diff_text: &str,
    pre_images: &BTreeMap<&str, &str>,
) -> Result<Vec<ChangedFunction>, DiffParseError> {
    let files = diff::parse_unified_diff(diff_text)?;
    let mut out: Vec<ChangedFunction> = Vec::new();

    for file in &files {
        let path = file.path().to_string();
        let pre = file.old_path.as_deref().and_then(|p| pre_images.get(p).copied());
        let spans = pre.map(cfunc::scan_functions);

        let mut record = |name: Option<String>, span: Option<&FunctionSpan>, line: usize| {
            let key_match = |c: &ChangedFunction| c.file_path == path && c.function_name == name;
            if let Some(existing) = out.iter_mut().find(|c| key_match(c)) {
                existing.hunk_span.start = existing.hunk_span.start.min(line);
                existing.hunk_span.end = existing.hunk_span.end.max(line);
            } else {
                out.push(ChangedFunction {
                    file_path: path.clone(),
                    function_name: name,
                    hunk_span: LineSpan { start: line, end: line },
                    function_span: span.cloned(),
                });
            }
        };

        for hunk in &file.hunks {
            let fallback = if file.old_path.is_some() { cfunc::name_from_signature(&hunk.context) } else { None };
            // With a zero-length old side the start names the preceding line.
            let mut cursor = if hunk.old_len == 0 { hunk.old_start + 1 } else { hunk.old_start };
            for l in &hunk.lines {
                let (changed_line, insertion) = match l {
                    HunkLine::Context(_) => {
                        cursor += 1;
                        continue;
                    }
                    HunkLine::Removed(_) => {
                        cursor += 1;
                        (cursor - 1, false)
                    }
                    HunkLine::Added(_) => (cursor.saturating_sub(1), true),
                };
                match &spans {
                    Some(spans) => {
                        let owner = spans.iter().find(|s| {
                            if insertion {
                                s.start_line <= changed_line && changed_line < s.end_line
                            } else {
                                s.contains(changed_line)
                            }
                        });
                        record(owner.map(|s| s.name.clone()), owner, changed_line.max(1));
                    }
                    None => record(fallback.clone(), None, changed_line.max(1)),
                }
            }
        }
    }
    Ok(out)
}

/// Case-insensitive whole-word (or whole-phrase) keyword match.
pub struct KeywordMatcher {
    re: Option<Regex>,
}

impl KeywordMatcher {
    pub fn new<S: AsRef<str>>(keywords: &[S]) -> Result<Self, MineError> {
        let alts: Vec<String> = keywords
            .iter()
            .map(|k| k.as_ref().trim())
            .filter(|k| !k.is_empty())
            .map(|k| k.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
            .collect();
        if alts.is_empty() {
            return Ok(Self { re: None });
        }
        let re = Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|")))
            .map_err(|e| MineError::Keywords(e.to_string()))?;
        Ok(Self { re: Some(re) })
    }

    pub fn matches(&self, message: &str) -> bool {
        self.re.as_ref().is_some_and(|re| re.is_match(message))
    }
}

pub fn is_optimization_candidate<S: AsRef<str>>(message: &str, keywords: &[S]) -> bool {
    KeywordMatcher::new(keywords).map(|m| m.matches(message)).unwrap_or(false)
}

pub fn verification_prompt(commit: &RawCommit) -> String {
    format!(
        "You are reviewing a commit from the repository `{repo}`.\n\
         Decide whether the primary purpose of this change is to improve runtime performance \
         (speed, memory traffic, or resource usage) without changing behavior.\n\
         Answer with a single word, YES or NO, followed by an optional one-line reason.\n\n\
         Commit message:\n{msg}\n\nDiff:\n{diff}\n",
        repo = commit.repo_id,
        msg = commit.message.trim(),
        diff = commit.diff,
    )
}

/// Parses a leading YES/NO token. `None` for anything else.
pub fn parse_yes_no(answer: &str) -> Option<bool> {
    let first = answer.split_whitespace().next()?;
    let token = first.trim_matches(|c: char| !c.is_alphanumeric());
    match token.to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Asks the provider whether the commit is an optimization. Unparseable
/// answers count as `false`.
pub fn llm_verify_optimization(
    commit: &RawCommit,
    provider: &dyn CompletionProvider,
    temperature: f64,
) -> Result<bool, ProviderError> {
    let prompt = verification_prompt(commit);
    let answer = provider.complete(&CompletionRequest::new(&prompt, temperature))?;
    Ok(parse_yes_no(&answer).unwrap_or_else(|| {
        warn!(commit = %commit.commit_hash, answer = %answer.chars().take(80).collect::<String>(), "unparseable verification answer");
        false
    }))
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}

/// Keeps the first occurrence of each commit; later commits whose
/// normalized message or normalized diff equals that of a kept commit are
/// dropped.
pub fn dedupe(commits: Vec<CommitRecord>) -> Vec<CommitRecord> {
    let mut messages = HashSet::new();
    let mut diffs = HashSet::new();
    commits
        .into_iter()
        .filter(|c| {
            let (m, d) = (squash(&c.message), squash(&c.diff));
            if messages.contains(&m) || diffs.contains(&d) {
                return false;
            }
            messages.insert(m);
            diffs.insert(d);
            true
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    MalformedDiff,
    NotSingleFunction,
    NotCOrCpp,
    MissingSource,
    NoKeyword,
    NotVerified,
    ProviderFailure,
    NoChange,
}

/// Builds the function-level record for a commit touching exactly one
/// function of a C/C++ file.
pub fn extract_single_function(raw: &RawCommit) -> Result<CommitRecord, Rejection> {
    let pre = raw.pre_images();
    let changes = parse_changed_functions(&raw.diff, &pre).map_err(|_| Rejection::MalformedDiff)?;
    let source_changes: Vec<_> = changes.iter().filter(|c| Language::from_path(&c.file_path).is_some()).collect();
    if changes.iter().any(|c| Language::from_path(&c.file_path).is_none())
        && source_changes.is_empty()
    {
        return Err(Rejection::NotCOrCpp);
    }
    let [change] = source_changes.as_slice() else {
        return Err(Rejection::NotSingleFunction);
    };
    let (Some(name), Some(span)) = (&change.function_name, &change.function_span) else {
        return Err(if change.function_name.is_some() { Rejection::MissingSource } else { Rejection::NotSingleFunction });
    };
    let language = Language::from_path(&change.file_path).ok_or(Rejection::NotCOrCpp)?;
    let file = raw.file(&change.file_path).ok_or(Rejection::MissingSource)?;
    let (Some(before_src), Some(after_src)) = (&file.before, &file.after) else {
        return Err(Rejection::MissingSource);
    };

    // nth definition with this name in the pre-image maps to the nth in the post-image
    let pre_spans = cfunc::scan_functions(before_src);
    let ordinal = pre_spans.iter().filter(|s| s.name == *name).position(|s| s == span).unwrap_or(0);
    let post_span = cfunc::scan_functions(after_src)
        .into_iter()
        .filter(|s| s.name == *name)
        .nth(ordinal)
        .ok_or(Rejection::NotSingleFunction)?;

    let code_before = cfunc::extract_lines(before_src, span.start_line, span.end_line);
    let code_after = cfunc::extract_lines(after_src, post_span.start_line, post_span.end_line);
    if code_before == code_after {
        return Err(Rejection::NoChange);
    }
    let diff = function_diff(&code_before, &code_after);
    Ok(CommitRecord {
        repo_id: raw.repo_id.clone(),
        commit_hash: raw.commit_hash.to_ascii_lowercase(),
        message: raw.message.clone(),
        function_name: name.clone(),
        code_before,
        code_after,
        diff,
        language,
    })
}

#[derive(Debug, Clone)]
pub struct MineOptions {
    pub keywords: Vec<String>,
    pub llm_verify: bool,
    pub temperature: f64,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            llm_verify: true,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineReport {
    pub input: usize,
    pub malformed_diff: usize,
    pub not_single_function: usize,
    pub not_c_or_cpp: usize,
    pub missing_source: usize,
    pub no_change: usize,
    pub no_keyword: usize,
    pub not_verified: usize,
    pub provider_failure: usize,
    pub duplicates: usize,
    pub output: usize,
}

impl MineReport {
    fn count(&mut self, r: Rejection) {
        match r {
            Rejection::MalformedDiff => self.malformed_diff += 1,
            Rejection::NotSingleFunction => self.not_single_function += 1,
            Rejection::NotCOrCpp => self.not_c_or_cpp += 1,
            Rejection::MissingSource => self.missing_source += 1,
            Rejection::NoKeyword => self.no_keyword += 1,
            Rejection::NotVerified => self.not_verified += 1,
            Rejection::ProviderFailure => self.provider_failure += 1,
            Rejection::NoChange => self.no_change += 1,
        }
    }
}

/// Runs every filter over `corpus` (in order) and deduplicates survivors.
pub fn mine(
    corpus: &[RawCommit],
    options: &MineOptions,
    provider: Option<&dyn CompletionProvider>,
) -> Result<(Vec<CommitRecord>, MineReport), MineError> {
    let matcher = KeywordMatcher::new(&options.keywords)?;
    let results: Vec<Result<CommitRecord, Rejection>> = corpus
        .par_iter()
        .map(|raw| {
            if !matcher.matches(&raw.message) {
                return Err(Rejection::NoKeyword);
            }
            let record = extract_single_function(raw)?;
            if options.llm_verify {
                let provider = provider.ok_or(Rejection::ProviderFailure)?;
                match llm_verify_optimization(raw, provider, options.temperature) {
                    Ok(true) => {}
                    Ok(false) => return Err(Rejection::NotVerified),
                    Err(e) => {
                        warn!(commit = %raw.commit_hash, error = %e, "verification call failed");
                        return Err(Rejection::ProviderFailure);
                    }
                }
            }
            Ok(record)
        })
        .collect();

    let mut report = MineReport { input: corpus.len(), ..Default::default() };
    let mut survivors = Vec::new();
    for (raw, r) in corpus.iter().zip(results) {
        match r {
            Ok(rec) => survivors.push(rec),
            Err(why) => {
                debug!(commit = %raw.commit_hash, ?why, "rejected");
                report.count(why);
            }
        }
    }
    let before = survivors.len();
    let kept = dedupe(survivors);
    report.duplicates = before - kept.len();
    report.output = kept.len();
    Ok((kept, report))
}

/// Reads every `*.jsonl` file of `dir` (sorted by name) as raw commits.
pub fn load_corpus(dir: &Path) -> Result<Vec<RawCommit>, MineError> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let reader = io::BufReader::new(fs::File::open(&path)?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawCommit = serde_json::from_str(&line).map_err(|e| MineError::Corpus {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            out.push(raw);
        }
    }
    Ok(out)
}

pub fn load_keywords(path: &Path) -> Result<Vec<String>, MineError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}
