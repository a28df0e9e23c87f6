//! Performance harness: hotspot selection, the measurement protocol,
//! improvement ratios, the effectiveness gate and per-function variant
//! selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("measurement {case}: values must be positive and finite")]
    NonPositive { case: String },
    #[error("at least {min} runs required, got {got}")]
    TooFewRuns { min: usize, got: usize },
    #[error("`{step}` failed with status {status:?}: {stderr}")]
    CommandFailed { step: String, status: Option<i32>, stderr: String },
    #[error("bad metric pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("run {run}: no test-case values parsed from perf output")]
    NoValues { run: usize },
    #[error("run {run}: test cases differ from the first kept run")]
    InconsistentCases { run: usize },
    #[error("baseline has no value for test case {0}")]
    MissingBaseline(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    #[serde(alias = "function")]
    pub function_name: String,
    #[serde(alias = "fraction")]
    pub self_fraction: f64,
}

pub const DEFAULT_HOTSPOT_THRESHOLD: f64 = 0.001;

/// Functions whose share of runtime is strictly above `threshold`, by
/// fraction descending then name.
pub fn identify_hotspots(profile: &[ProfileEntry], threshold: f64) -> Vec<String> {
    let mut hot: Vec<&ProfileEntry> = profile.iter().filter(|e| e.self_fraction > threshold).collect();
    hot.sort_by(|a, b| b.self_fraction.total_cmp(&a.self_fraction).then_with(|| a.function_name.cmp(&b.function_name)));
    hot.into_iter().map(|e| e.function_name.clone()).collect()
}

/// Adapter for `perf report --stdio` text: lines like
/// `  12.50%  app  app  [.] parse_row`. Percentages of repeated symbols
/// are summed.
pub fn parse_perf_report(text: &str) -> Vec<ProfileEntry> {
    let line = Regex::new(r"^\s*(\d+(?:\.\d+)?)%\s+(?:\d+(?:\.\d+)?%\s+)?.*\[[.kgu]\]\s+(\S.*?)\s*$").expect("static regex");
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for l in text.lines().filter(|l| !l.trim_start().starts_with('#')) {
        if let Some(c) = line.captures(l) {
            let pct: f64 = c[1].parse().unwrap_or(0.0);
            *acc.entry(c[2].to_string()).or_default() += pct / 100.0;
        }
    }
    acc.into_iter().map(|(function_name, self_fraction)| ProfileEntry { function_name, self_fraction }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfMeasurement<T = f64> {
    pub test_case_id: String,
    pub direction: Direction,
    pub before: T,
    pub after: T,
}

impl<T: Scalar> PerfMeasurement<T> {
    pub fn new(test_case_id: &str, direction: Direction, before: T, after: T) -> Self {
        Self { test_case_id: test_case_id.to_string(), direction, before, after }
    }
}

/// `(y - x) / x` when higher is better, `(x - y) / y` when lower is better.
pub fn improvement_ratio<T: Scalar>(m: &PerfMeasurement<T>) -> Result<T, PerfError> {
    let zero = T::zero();
    // `!(v > 0)` also rejects NaN
    if !(m.before > zero) || !(m.after > zero) {
        return Err(PerfError::NonPositive { case: m.test_case_id.clone() });
    }
    let (x, y) = (m.before.clone(), m.after.clone());
    Ok(match m.direction {
        Direction::HigherBetter => (y - x.clone()) / x,
        Direction::LowerBetter => (x - y.clone()) / y,
    })
}

/// More than 5% better on some test case and no more than 2% worse on any.
pub fn is_effective<T: Scalar>(measurements: &[PerfMeasurement<T>]) -> Result<bool, PerfError> {
    let gain = T::from_ratio(5, 100);
    let floor = T::from_ratio(-2, 100);
    let ratios = measurements.iter().map(improvement_ratio).collect::<Result<Vec<T>, _>>()?;
    Ok(ratios.iter().any(|r| *r > gain) && ratios.iter().all(|r| *r >= floor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport<T = f64> {
    pub function_name: String,
    pub variant_id: String,
    pub measurements: Vec<PerfMeasurement<T>>,
    pub effective: bool,
    /// Sum of improvement ratios over all measurements, negatives included.
    pub total_score: T,
}

impl<T: Scalar> VariantReport<T> {
    pub fn from_measurements(
        function_name: &str,
        variant_id: &str,
        measurements: Vec<PerfMeasurement<T>>,
    ) -> Result<Self, PerfError> {
        let mut total = T::zero();
        for m in &measurements {
            total = total + improvement_ratio(m)?;
        }
        Ok(Self {
            function_name: function_name.to_string(),
            variant_id: variant_id.to_string(),
            effective: !measurements.is_empty() && is_effective(&measurements)?,
            total_score: total,
            measurements,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Variant(String),
    Original,
}

/// Per function, the effective variant with the highest total score
/// (smallest variant id on ties), or `Original` when none is effective.
pub fn combine<T: Scalar>(variants_by_function: &BTreeMap<String, Vec<VariantReport<T>>>) -> BTreeMap<String, Selection> {
    variants_by_function
        .iter()
        .map(|(func, variants)| {
            let mut best: Option<&VariantReport<T>> = None;
            for v in variants.iter().filter(|v| v.effective) {
                best = match best {
                    Some(b)
                        if b.total_score > v.total_score
                            || (b.total_score == v.total_score && b.variant_id <= v.variant_id) =>
                    {
                        Some(b)
                    }
                    _ => Some(v),
                };
            }
            let sel = best.map_or(Selection::Original, |b| Selection::Variant(b.variant_id.clone()));
            (func.clone(), sel)
        })
        .collect()
}

/// How to read per-test-case numbers out of the perf command's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRule {
    /// Regex with named groups `case` and `value`.
    pub pattern: String,
    pub direction: Direction,
}

/// Shell commands run in a project (variant) directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectManifest {
    #[serde(default)]
    pub build: Option<String>,
    pub unit_test: String,
    pub perf: String,
    pub metrics: Vec<MetricRule>,
}

impl ProjectManifest {
    pub fn load(path: &Path) -> Result<Self, PerfError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| PerfError::Pattern { pattern: path.display().to_string(), message: e.to_string() })
    }

    fn compiled(&self) -> Result<Vec<(Regex, Direction)>, PerfError> {
        self.metrics
            .iter()
            .map(|m| {
                let re = Regex::new(&m.pattern)
                    .map_err(|e| PerfError::Pattern { pattern: m.pattern.clone(), message: e.to_string() })?;
                let names: Vec<_> = re.capture_names().flatten().collect();
                if !names.contains(&"case") || !names.contains(&"value") {
                    return Err(PerfError::Pattern {
                        pattern: m.pattern.clone(),
                        message: "needs named groups `case` and `value`".into(),
                    });
                }
                Ok((re, m.direction))
            })
            .collect()
    }
}

fn shell(step: &str, cmd: &str, dir: &Path) -> Result<String, PerfError> {
    info!(step, cmd, dir = %dir.display(), "running");
    let out = Command::new("sh").arg("-c").arg(cmd).current_dir(dir).output()?;
    if !out.status.success() {
        return Err(PerfError::CommandFailed {
            step: step.to_string(),
            status: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Per-test-case values parsed from one run of the perf command.
pub fn parse_metrics(
    output: &str,
    rules: &[(Regex, Direction)],
) -> BTreeMap<String, (f64, Direction)> {
    let mut values = BTreeMap::new();
    for (re, dir) in rules {
        for c in re.captures_iter(output) {
            if let Ok(v) = c["value"].parse::<f64>() {
                values.insert(c["case"].to_string(), (v, *dir));
            }
        }
    }
    values
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub direction: Direction,
    /// Mean over the kept runs.
    pub mean: f64,
    /// Every run's value, the discarded first run included.
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMeasurement {
    pub runs: usize,
    pub discarded: usize,
    pub cases: BTreeMap<String, CaseResult>,
}

pub const DEFAULT_RUNS: usize = 6;

/// Mean of runs 2..n per test case; run 1 (cold) is discarded.
pub fn summarize_runs(per_run: &[BTreeMap<String, (f64, Direction)>]) -> Result<SuiteMeasurement, PerfError> {
    if per_run.len() < 2 {
        return Err(PerfError::TooFewRuns { min: 2, got: per_run.len() });
    }
    let kept = &per_run[1..];
    let reference: Vec<&String> = kept[0].keys().collect();
    for (i, run) in kept.iter().enumerate() {
        if run.is_empty() {
            return Err(PerfError::NoValues { run: i + 2 });
        }
        if run.keys().collect::<Vec<_>>() != reference {
            return Err(PerfError::InconsistentCases { run: i + 2 });
        }
    }
    let cases = kept[0]
        .iter()
        .map(|(case, &(_, direction))| {
            let raw: Vec<f64> = per_run.iter().map(|r| r.get(case).map_or(f64::NAN, |v| v.0)).collect();
            let mean = raw[1..].iter().sum::<f64>() / kept.len() as f64;
            (case.clone(), CaseResult { direction, mean, raw })
        })
        .collect();
    Ok(SuiteMeasurement { runs: per_run.len(), discarded: 1, cases })
}

/// Executes the perf command `runs` times, strictly one after another.
pub fn measure(manifest: &ProjectManifest, dir: &Path, runs: usize) -> Result<SuiteMeasurement, PerfError> {
    if runs < 2 {
        return Err(PerfError::TooFewRuns { min: 2, got: runs });
    }
    let rules = manifest.compiled()?;
    let mut per_run = Vec::with_capacity(runs);
    for run in 1..=runs {
        let out = shell(&format!("perf run {run}"), &manifest.perf, dir)?;
        let values = parse_metrics(&out, &rules);
        if values.is_empty() {
            return Err(PerfError::NoValues { run });
        }
        per_run.push(values);
    }
    summarize_runs(&per_run)
}

/// Build, unit-test gate, then measurement. A failing unit test aborts
/// before any timing.
pub fn run_variant(manifest: &ProjectManifest, dir: &Path, runs: usize) -> Result<SuiteMeasurement, PerfError> {
    if let Some(build) = &manifest.build {
        shell("build", build, dir)?;
    }
    shell("unit tests", &manifest.unit_test, dir)?;
    measure(manifest, dir, runs)
}

/// Pairs a variant's measurement with the baseline's, case by case.
pub fn compare(
    function_name: &str,
    variant_id: &str,
    baseline: &SuiteMeasurement,
    variant: &SuiteMeasurement,
) -> Result<VariantReport<f64>, PerfError> {
    let measurements = variant
        .cases
        .iter()
        .map(|(case, after)| {
            let before = baseline.cases.get(case).ok_or_else(|| PerfError::MissingBaseline(case.clone()))?;
            Ok(PerfMeasurement::new(case, after.direction, before.mean, after.mean))
        })
        .collect::<Result<Vec<_>, PerfError>>()?;
    let report = VariantReport::from_measurements(function_name, variant_id, measurements)?;
    if !report.effective {
        warn!(function_name, variant_id, "variant not effective");
    }
    Ok(report)
}

/// Reads every `*.json` variant report in `dir`, grouped by function.
pub fn load_reports(dir: &Path) -> Result<BTreeMap<String, Vec<VariantReport<f64>>>, PerfError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut out: BTreeMap<String, Vec<VariantReport<f64>>> = BTreeMap::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        match serde_json::from_str::<VariantReport<f64>>(&text) {
            Ok(r) => out.entry(r.function_name.clone()).or_default().push(r),
            Err(e) => warn!(path = %p.display(), error = %e, "not a variant report; skipped"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    fn entry(name: &str, f: f64) -> ProfileEntry {
        ProfileEntry { function_name: name.into(), self_fraction: f }
    }

    #[test]
    fn hotspots() {
        assert!(identify_hotspots(&[], DEFAULT_HOTSPOT_THRESHOLD).is_empty());
        assert!(identify_hotspots(&[entry("edge", 0.001)], 0.001).is_empty());
        let p = [entry("c", 0.0005), entry("b", 0.002), entry("a", 0.05), entry("z", 0.002)];
        assert_eq!(identify_hotspots(&p, 0.001), ["a", "b", "z"]);
    }

    #[test]
    fn perf_report_adapter() {
        let text = "# Samples: 1K\n#\n    42.10%  app  app        [.] parse_row\n     3.00%  app  libc.so.6  [.] memcpy\n     1.00%  app  app        [.] parse_row\n";
        let p = parse_perf_report(text);
        assert_eq!(p.len(), 2);
        assert!((p.iter().find(|e| e.function_name == "parse_row").unwrap().self_fraction - 0.431).abs() < 1e-12);
    }

    #[test]
    fn ratios() {
        let h = PerfMeasurement::new("t", Direction::HigherBetter, 10.0, 20.0);
        let l = PerfMeasurement::new("t", Direction::LowerBetter, 20.0, 10.0);
        assert_eq!(improvement_ratio(&h).unwrap(), 1.0);
        assert_eq!(improvement_ratio(&l).unwrap(), 1.0);
        assert_eq!(improvement_ratio(&PerfMeasurement::new("t", Direction::LowerBetter, 3.0, 3.0)).unwrap(), 0.0);
        assert!(improvement_ratio(&PerfMeasurement::new("t", Direction::LowerBetter, 0.0, 3.0)).is_err());
        assert!(improvement_ratio(&PerfMeasurement::new("t", Direction::LowerBetter, f64::NAN, 3.0)).is_err());
        let r = PerfMeasurement::new("t", Direction::HigherBetter, Rational64::from(10), Rational64::from(20));
        assert_eq!(improvement_ratio(&r).unwrap(), Rational64::from(1));
    }

    fn with_ratios(rs: &[(i64, i64)]) -> Vec<PerfMeasurement<Rational64>> {
        // HigherBetter from 1 to 1 + r gives ratio r exactly
        rs.iter()
            .map(|&(n, d)| {
                PerfMeasurement::new("t", Direction::HigherBetter, Rational64::from(1), Rational64::new(d + n, d))
            })
            .collect()
    }

    #[test]
    fn gate_examples() {
        assert!(is_effective(&with_ratios(&[(6, 100), (-1, 100)])).unwrap());
        assert!(!is_effective(&with_ratios(&[(6, 100), (-3, 100)])).unwrap());
        assert!(!is_effective(&with_ratios(&[(4, 100), (4, 100)])).unwrap());
        assert!(!is_effective(&with_ratios(&[(5, 100)])).unwrap());
        assert!(is_effective(&with_ratios(&[(51, 1000), (-2, 100)])).unwrap());
    }

    fn report(f: &str, id: &str, rs: &[(i64, i64)]) -> VariantReport<Rational64> {
        VariantReport::from_measurements(f, id, with_ratios(rs)).unwrap()
    }

    #[test]
    fn total_score_sums_negatives() {
        let r = report("f", "v1", &[(10, 100), (-1, 100)]);
        assert_eq!(r.total_score, Rational64::new(9, 100));
    }

    #[test]
    fn combine_selection() {
        let mut m = BTreeMap::new();
        m.insert("one".to_string(), vec![report("one", "v1", &[(10, 100)])]);
        m.insert("argmax".to_string(), vec![report("argmax", "a", &[(10, 100)]), report("argmax", "b", &[(25, 100)])]);
        m.insert("none".to_string(), vec![report("none", "v", &[(1, 100)])]);
        m.insert("tie".to_string(), vec![report("tie", "z", &[(10, 100)]), report("tie", "m", &[(10, 100)])]);
        let s = combine(&m);
        assert_eq!(s["one"], Selection::Variant("v1".into()));
        assert_eq!(s["argmax"], Selection::Variant("b".into()));
        assert_eq!(s["none"], Selection::Original);
        assert_eq!(s["tie"], Selection::Variant("m".into()));
        m.get_mut("tie").unwrap().reverse();
        assert_eq!(combine(&m)["tie"], Selection::Variant("m".into()));
    }

    #[test]
    fn protocol_discards_first_run() {
        let run = |v: f64| BTreeMap::from([("case".to_string(), (v, Direction::LowerBetter))]);
        let per_run: Vec<_> = [100.0, 10.0, 10.0, 10.0, 10.0, 10.0].iter().map(|&v| run(v)).collect();
        let m = summarize_runs(&per_run).unwrap();
        assert_eq!(m.cases["case"].mean, 10.0);
        assert_eq!(m.cases["case"].raw.len(), 6);
        assert_eq!(summarize_runs(&per_run[..2]).unwrap().cases["case"].mean, 10.0);
        assert!(summarize_runs(&per_run[..1]).is_err());
    }

    #[test]
    fn runner_gates_on_unit_tests_and_parses_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let counter = dir.path().join("n");
        let manifest = ProjectManifest {
            build: Some("true".into()),
            unit_test: "true".into(),
            perf: format!(
                "n=$(cat {c} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {c}; \
                 if [ $n -eq 1 ]; then echo 'case=a ms=500'; else echo 'case=a ms=10'; fi; echo 'case=b ops=7'",
                c = counter.display()
            ),
            metrics: vec![
                MetricRule { pattern: r"case=(?P<case>\w+) ms=(?P<value>[\d.]+)".into(), direction: Direction::LowerBetter },
                MetricRule { pattern: r"case=(?P<case>\w+) ops=(?P<value>[\d.]+)".into(), direction: Direction::HigherBetter },
            ],
        };
        let m = run_variant(&manifest, dir.path(), 6).unwrap();
        assert_eq!(m.cases["a"].mean, 10.0);
        assert_eq!(m.cases["a"].raw[0], 500.0);
        assert_eq!(m.cases["b"].direction, Direction::HigherBetter);

        let failing = ProjectManifest { unit_test: "exit 3".into(), ..manifest.clone() };
        std::fs::remove_file(&counter).unwrap();
        assert!(matches!(run_variant(&failing, dir.path(), 6), Err(PerfError::CommandFailed { .. })));
        assert!(!counter.exists(), "no perf run after failing unit tests");

        let bad = ProjectManifest { metrics: vec![MetricRule { pattern: "(?P<case>x)".into(), direction: Direction::LowerBetter }], ..manifest };
        assert!(matches!(measure(&bad, dir.path(), 6), Err(PerfError::Pattern { .. })));
    }

    #[test]
    fn compare_builds_report() {
        let suite = |v: f64| SuiteMeasurement {
            runs: 6,
            discarded: 1,
            cases: BTreeMap::from([("a".to_string(), CaseResult { direction: Direction::LowerBetter, mean: v, raw: vec![] })]),
        };
        let r = compare("f", "v1", &suite(20.0), &suite(10.0)).unwrap();
        assert_eq!(r.total_score, 1.0);
        assert!(r.effective);
    }
}
