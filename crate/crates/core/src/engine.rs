//! Rule-engine adapter: runs one Semgrep rule against a code snippet or a
//! path and parses the JSON report.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::model::Language;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("rule engine unavailable: {0}")]
    Unavailable(String),
    #[error("engine io: {0}")]
    Io(#[from] io::Error),
    #[error("unparseable engine output: {0}")]
    Output(String),
    #[error("engine version mismatch: pinned {pinned}, found {found}")]
    Version { pinned: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Code { code: String, language: Language },
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EngineJob {
    pub rule_yaml: String,
    pub target: Target,
}

impl EngineJob {
    pub fn on_code(rule_yaml: &str, code: &str, language: Language) -> Self {
        Self { rule_yaml: rule_yaml.to_string(), target: Target::Code { code: code.to_string(), language } }
    }

    pub fn on_path(rule_yaml: &str, path: &Path) -> Self {
        Self { rule_yaml: rule_yaml.to_string(), target: Target::Path(path.to_path_buf()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub check_id: String,
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
}

/// Result of one engine process run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EngineRun {
    pub exit_code: Option<i32>,
    pub findings: Vec<Finding>,
    /// Error-level diagnostics from the report (rule parse errors, invalid YAML, ...).
    pub errors: Vec<String>,
    pub stderr: String,
}

impl EngineRun {
    pub fn is_clean(&self) -> bool {
        self.exit_code == Some(0) && self.errors.is_empty()
    }

    /// Text fed back to the repair phase when the run is not clean.
    pub fn diagnostics(&self) -> String {
        let mut out = self.errors.join("\n");
        if out.is_empty() {
            out = self.stderr.trim().to_string();
        }
        if out.is_empty() {
            out = format!("engine exited with status {:?}", self.exit_code);
        }
        out
    }
}

pub trait RuleEngine: Send + Sync {
    fn run(&self, job: &EngineJob) -> Result<EngineRun, EngineError>;
    fn identity(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct SemgrepEngine {
    binary: PathBuf,
    version: String,
}

impl SemgrepEngine {
    /// Locates the binary and checks its version against `pin` when given.
    pub fn new(binary: impl Into<PathBuf>, pin: Option<&str>) -> Result<Self, EngineError> {
        let binary = binary.into();
        let out = base_command(&binary).arg("--version").output().map_err(|e| spawn_error(&binary, e))?;
        let version = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if !out.status.success() || version.is_empty() {
            return Err(EngineError::Unavailable(format!("`{} --version` failed", binary.display())));
        }
        if let Some(pinned) = pin {
            if pinned != version {
                return Err(EngineError::Version { pinned: pinned.to_string(), found: version });
            }
        }
        Ok(Self { binary, version })
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

fn base_command(binary: &Path) -> Command {
    let mut cmd = Command::new(binary);
    cmd.env("SEMGREP_ENABLE_VERSION_CHECK", "0").env("SEMGREP_SEND_METRICS", "off");
    cmd
}

fn spawn_error(binary: &Path, e: io::Error) -> EngineError {
    if e.kind() == io::ErrorKind::NotFound {
        EngineError::Unavailable(format!("{} not found", binary.display()))
    } else {
        EngineError::Io(e)
    }
}

impl RuleEngine for SemgrepEngine {
    fn run(&self, job: &EngineJob) -> Result<EngineRun, EngineError> {
        // private working directory per run: rule file, snippet, empty ignore file
        let dir = tempfile::tempdir()?;
        std::fs::write(dir.path().join("rule.yaml"), &job.rule_yaml)?;
        std::fs::write(dir.path().join(".semgrepignore"), "")?;
        let target = match &job.target {
            Target::Code { code, language } => {
                let name = format!("target.{}", language.extension());
                std::fs::write(dir.path().join(&name), code)?;
                PathBuf::from(name)
            }
            Target::Path(p) => std::path::absolute(p)?,
        };
        let out = base_command(&self.binary)
            .current_dir(dir.path())
            .args(["--config", "rule.yaml", "--json", "--metrics=off", "--disable-version-check", "--quiet"])
            .arg("--no-git-ignore")
            .arg(&target)
            .output()
            .map_err(|e| spawn_error(&self.binary, e))?;
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        let mut run = parse_report(&String::from_utf8_lossy(&out.stdout)).unwrap_or_else(|e| EngineRun {
            errors: vec![format!("no JSON report ({e})")],
            ..EngineRun::default()
        });
        run.exit_code = out.status.code();
        run.stderr = stderr;
        Ok(run)
    }

    fn identity(&self) -> String {
        format!("semgrep@{}", self.version)
    }
}

/// Parses a Semgrep `--json` report. Only error-level entries of
/// `errors[]` count as errors; warnings (e.g. partial target parses) are
/// ignored.
pub fn parse_report(stdout: &str) -> Result<EngineRun, EngineError> {
    let v: Value = serde_json::from_str(stdout.trim()).map_err(|e| EngineError::Output(e.to_string()))?;
    let mut findings = Vec::new();
    for r in v["results"].as_array().into_iter().flatten() {
        let line = |k: &str| r[k]["line"].as_u64().map(|l| l as usize);
        let (Some(start_line), Some(end_line)) = (line("start"), line("end")) else {
            return Err(EngineError::Output(format!("result without line span: {r}")));
        };
        findings.push(Finding {
            check_id: r["check_id"].as_str().unwrap_or_default().to_string(),
            path: r["path"].as_str().unwrap_or_default().to_string(),
            start_line,
            end_line,
        });
    }
    findings.sort();
    let errors = v["errors"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|e| e["level"].as_str().map_or(true, |l| l == "error"))
        .map(|e| {
            let kind = e["type"].as_str().map(str::to_string).unwrap_or_else(|| e["type"].to_string());
            format!("{kind}: {}", e["message"].as_str().unwrap_or("").trim())
        })
        .collect();
    Ok(EngineRun { exit_code: None, findings, errors, stderr: String::new() })
}

/// Memoizes snippet runs by (rule, code, language). Path targets are never
/// cached since the files behind them may change.
pub struct CachedEngine<E> {
    inner: E,
    cache: Mutex<HashMap<String, EngineRun>>,
}

impl<E: RuleEngine> CachedEngine<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Cache key plus the single rule's id. The id is left out of the key:
    /// it never changes what matches, and attempts that regenerate the
    /// same rule under a fresh id should share one engine run.
    fn key(job: &EngineJob) -> Option<(String, Option<String>)> {
        let Target::Code { code, language } = &job.target else {
            return None;
        };
        let (rule, id) = match serde_yaml::from_str::<serde_json::Value>(&job.rule_yaml) {
            Ok(mut doc) => {
                let id = match doc.get_mut("rules").and_then(|r| r.as_array_mut()) {
                    Some(rules) if rules.len() == 1 => rules[0]
                        .as_object_mut()
                        .and_then(|r| r.remove("id"))
                        .and_then(|v| v.as_str().map(str::to_string)),
                    _ => None,
                };
                match id {
                    Some(id) => (doc.to_string(), Some(id)),
                    None => (job.rule_yaml.clone(), None),
                }
            }
            Err(_) => (job.rule_yaml.clone(), None),
        };
        Some((sha256_hex(format!("{}\0{}\0{}", rule, language.engine_id(), code)), id))
    }
}

impl<E: RuleEngine> RuleEngine for CachedEngine<E> {
    fn run(&self, job: &EngineJob) -> Result<EngineRun, EngineError> {
        let Some((key, id)) = Self::key(job) else {
            return self.inner.run(job);
        };
        let hit = self.cache.lock().expect("cache lock").get(&key).cloned();
        let mut run = match hit {
            Some(run) => run,
            None => {
                let run = self.inner.run(job)?;
                self.cache.lock().expect("cache lock").insert(key, run.clone());
                run
            }
        };
        if let Some(id) = id {
            for f in &mut run.findings {
                f.check_id = id.clone();
            }
        }
        Ok(run)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<E: RuleEngine + ?Sized> RuleEngine for &E {
    fn run(&self, job: &EngineJob) -> Result<EngineRun, EngineError> {
        (**self).run(job)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}
