//! Fixture corpus for end-to-end runs: twelve single-function commits in
//! two strategy families, plus a replay script that answers every prompt
//! the pipeline asks about them.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use strat_forge_core::digest::sha256_hex;
use strat_forge_core::forge::{generate_prompt, repair_prompt, strip_yaml_blocks, understand_prompt, NO_RULE_BLOCK};
use strat_forge_core::miner::{extract_single_function, verification_prompt, FileContents, RawCommit};
use strat_forge_core::model::function_diff;
use strat_forge_core::provider::ReplayScript;
use strat_forge_core::strategy::summary_prompt;
use strat_forge_core::CommitRecord;

pub struct Fixture {
    pub corpus: PathBuf,
    pub replay: PathBuf,
    pub raw: Vec<RawCommit>,
    pub records: Vec<CommitRecord>,
}

pub struct Family {
    summaries: [&'static str; 3],
    analysis: &'static str,
    rule: &'static str,
    axis: usize,
}

const STRLEN: Family = Family {
    summaries: [
        "Hoist a loop-invariant string length computation out of the loop condition.",
        "Compute the string length once before the loop instead of on every iteration.",
        "Cache an invariant strlen result in a local variable outside the loop.",
    ],
    analysis: "The loop condition calls strlen on a string that the loop never modifies, so the \
               length is recomputed on every iteration, making the loop quadratic. Any call of \
               strlen in a loop condition whose argument is loop-invariant can be hoisted.",
    rule: "rules:\n  - id: draft\n    languages: [c]\n    severity: INFO\n    message: strlen recomputed in a loop condition\n    pattern: strlen($S)\n",
    axis: 0,
};

const POW2: Family = Family {
    summaries: [
        "Replace a generic power call with exponent two by a single multiplication.",
        "Square a value with multiplication instead of calling pow.",
        "Avoid the library pow function for squaring; multiply the operand by itself.",
    ],
    analysis: "pow(x, 2) goes through the general floating-point power routine although squaring \
               needs one multiplication. Every pow call whose exponent is the literal 2 can be \
               rewritten as x * x when x has no side effects.",
    rule: "rules:\n  - id: draft\n    languages: [c]\n    severity: INFO\n    message: pow with exponent 2\n    pattern: pow($X, 2)\n",
    axis: 1,
};

fn strlen_sources(name: &str, cond: &str) -> (String, String) {
    let before = format!(
        "#include <string.h>\n\nint {name}(const char *s, char c)\n{{\n    int n = 0;\n    for (size_t i = 0; i < strlen(s); i++) {{\n        if ({cond})\n            n++;\n    }}\n    return n;\n}}\n"
    );
    let after = before.replace(
        "    for (size_t i = 0; i < strlen(s); i++) {",
        "    size_t len = strlen(s);\n    for (size_t i = 0; i < len; i++) {",
    );
    (before, after)
}

fn pow_sources(name: &str, term: &str) -> (String, String) {
    let before = format!(
        "#include <math.h>\n\ndouble {name}(const double *v, int n)\n{{\n    double e = 0.0;\n    for (int i = 0; i < n; i++)\n        e += pow({term}, 2);\n    return e;\n}}\n"
    );
    let after = before.replace(&format!("pow({term}, 2)"), &format!("{term} * {term}"));
    (before, after)
}

fn raw(repo: &str, path: &str, name: &str, message: &str, before: &str, after: &str) -> RawCommit {
    let diff = function_diff(before, after).replacen("--- original\n+++ modified", &format!("--- a/{path}\n+++ b/{path}"), 1);
    RawCommit {
        repo_id: repo.into(),
        commit_hash: sha256_hex(format!("{repo}/{name}"))[..40].to_string(),
        message: message.into(),
        diff,
        files: vec![FileContents { path: path.into(), before: Some(before.into()), after: Some(after.into()) }],
    }
}

/// Unit-ish vector near the family axis; `wobble` keeps the three
/// candidates distinct but far above the 0.89 similarity threshold.
fn embedding(axis: usize, wobble: usize) -> Vec<f64> {
    let mut v = vec![0.0; 8];
    v[axis] = 1.0;
    v[4 + wobble] = 0.08 * (wobble as f64 + 1.0);
    v
}

pub fn commits() -> Vec<(RawCommit, &'static Family)> {
    let strlen = [
        ("count_char", "s[i] == c"),
        ("count_digits", "s[i] >= '0' && s[i] <= '9'"),
        ("count_spaces", "s[i] == ' '"),
        ("count_upper", "s[i] >= 'A' && s[i] <= 'Z'"),
        ("count_not", "s[i] != c"),
        ("count_vowels", "s[i] == 'a' || s[i] == 'e'"),
    ];
    let pow = [
        ("energy", "v[i]"),
        ("sum_squares", "v[i] * 0.5"),
        ("variance_acc", "v[i] - 1.0"),
        ("norm2", "v[i] / 3.0"),
        ("power_sum", "2.0 * v[i]"),
        ("residual", "v[i] + 0.5"),
    ];
    let mut out = Vec::new();
    for (i, (name, cond)) in strlen.iter().enumerate() {
        let (b, a) = strlen_sources(name, cond);
        let repo = if i % 2 == 0 { "acme/strings" } else { "zeta/text" };
        let msg = format!("Optimize {name}: stop recomputing strlen in the loop");
        out.push((raw(repo, &format!("src/{name}.c"), name, &msg, &b, &a), &STRLEN));
    }
    for (i, (name, term)) in pow.iter().enumerate() {
        let (b, a) = pow_sources(name, term);
        let repo = if i % 2 == 0 { "acme/numeric" } else { "zeta/physics" };
        let msg = format!("Speed up {name}: square by multiplication (performance)");
        out.push((raw(repo, &format!("lib/{name}.c"), name, &msg, &b, &a), &POW2));
    }
    out
}

/// Writes `corpus/commits.jsonl` and `replay.json` under `dir`.
pub fn write_fixture(dir: &Path) -> Fixture {
    let corpus = dir.join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    let mut script = ReplayScript::new();
    let mut lines = String::new();
    let mut raws = Vec::new();
    let mut records = Vec::new();
    for (n, (raw, fam)) in commits().into_iter().enumerate() {
        lines.push_str(&serde_json::to_string(&raw).unwrap());
        lines.push('\n');
        script.insert_text(&verification_prompt(&raw), "YES - removes redundant work");
        let rec = extract_single_function(&raw).expect("fixture commit is single-function");
        script.insert_samples(&summary_prompt(&rec), fam.summaries.iter().map(|s| s.to_string()).collect());
        for (w, s) in fam.summaries.iter().enumerate() {
            script.insert_embedding(s, embedding(fam.axis, w));
        }
        let analysis = strip_yaml_blocks(fam.analysis).0;
        script.insert_text(&understand_prompt(&rec), fam.analysis);
        let block = format!("```yaml\n{}```\n", fam.rule);
        if n == 7 {
            // first draft forgets the rule block; the repair round supplies it
            script.insert_text(&generate_prompt(&rec, &analysis), "The rule should flag calls of pow with exponent 2.");
            script.insert_text(&repair_prompt(&rec, "", NO_RULE_BLOCK), block);
        } else {
            script.insert_text(&generate_prompt(&rec, &analysis), block);
        }
        raws.push(raw);
        records.push(rec);
    }
    fs::write(corpus.join("commits.jsonl"), lines).unwrap();
    let replay = dir.join("replay.json");
    script.save(&replay).unwrap();
    Fixture { corpus, replay, raw: raws, records }
}

/// Every file under `root` except run manifests, as (relative path, bytes).
pub fn artifact_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else if !p.file_name().unwrap().to_string_lossy().ends_with("manifest.json") {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
