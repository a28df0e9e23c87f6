//! Multi-file unified diff parsing.

use once_cell_regex::hunk_header;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("diff line {line}: {message}")]
pub struct DiffParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Removed(String),
    Added(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    /// Text after the closing `@@`, usually the enclosing function signature.
    pub context: String,
    pub lines: Vec<HunkLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FileDiff {
    /// `None` for created files.
    pub old_path: Option<String>,
    /// `None` for deleted files.
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FileDiff {
    /// Path used to identify the file (post-image, falling back to pre-image).
    pub fn path(&self) -> &str {
        self.new_path.as_deref().or(self.old_path.as_deref()).unwrap_or("")
    }
}

fn strip_path(raw: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    let p = raw.strip_prefix("a/").or_else(|| raw.strip_prefix("b/")).unwrap_or(raw);
    Some(p.to_string())
}

mod once_cell_regex {
    use regex::Regex;
    use std::sync::OnceLock;

    pub fn hunk_header() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@ ?(.*)$").unwrap())
    }
}

/// Parses a `git diff`/`diff -u` style patch. Preamble text (commit headers,
/// `diff --git`, `index` lines) is skipped; hunk bodies must match their
/// declared line counts.
pub fn parse_unified_diff(text: &str) -> Result<Vec<FileDiff>, DiffParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files: Vec<FileDiff> = Vec::new();
    let mut i = 0;
    let err = |line: usize, message: String| DiffParseError { line: line + 1, message };

    while i < lines.len() {
        let line = lines[i];
        if let Some(old) = line.strip_prefix("--- ") {
            let new = lines
                .get(i + 1)
                .and_then(|l| l.strip_prefix("+++ "))
                .ok_or_else(|| err(i + 1, "expected `+++` after `---`".into()))?;
            files.push(FileDiff { old_path: strip_path(old), new_path: strip_path(new), hunks: Vec::new() });
            i += 2;
            continue;
        }
        if line.starts_with("@@") {
            let file = files.last_mut().ok_or_else(|| err(i, "hunk before any file header".into()))?;
            let caps = hunk_header()
                .captures(line)
                .ok_or_else(|| err(i, format!("malformed hunk header `{line}`")))?;
            let num = |k: usize| caps.get(k).map_or(Ok(1), |m| m.as_str().parse::<usize>());
            let (old_start, old_len, new_start, new_len) = match (num(1), num(2), num(3), num(4)) {
                (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
                _ => return Err(err(i, "hunk header number out of range".into())),
            };
            let mut hunk = Hunk {
                old_start,
                old_len,
                new_start,
                new_len,
                context: caps.get(5).map_or("", |m| m.as_str()).trim().to_string(),
                lines: Vec::new(),
            };
            let (mut old_seen, mut new_seen) = (0usize, 0usize);
            i += 1;
            while old_seen < old_len || new_seen < new_len {
                let Some(&body) = lines.get(i) else {
                    return Err(err(i, "hunk truncated at end of input".into()));
                };
                match body.chars().next() {
                    Some(' ') => {
                        hunk.lines.push(HunkLine::Context(body[1..].to_string()));
                        old_seen += 1;
                        new_seen += 1;
                    }
                    None => {
                        hunk.lines.push(HunkLine::Context(String::new()));
                        old_seen += 1;
                        new_seen += 1;
                    }
                    Some('-') => {
                        hunk.lines.push(HunkLine::Removed(body[1..].to_string()));
                        old_seen += 1;
                    }
                    Some('+') => {
                        hunk.lines.push(HunkLine::Added(body[1..].to_string()));
                        new_seen += 1;
                    }
                    Some('\\') => {}
                    Some(_) => return Err(err(i, format!("unexpected line inside hunk: `{body}`"))),
                }
                i += 1;
            }
            if old_seen != old_len || new_seen != new_len {
                return Err(err(i - 1, "hunk body does not match header line counts".into()));
            }
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            file.hunks.push(hunk);
            continue;
        }
        i += 1;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_FILES: &str = "\
diff --git a/src/a.c b/src/a.c
index 111..222 100644
--- a/src/a.c
+++ b/src/a.c
@@ -1,3 +1,3 @@ int f(void)
 int f(void) {
-  return 1;
+  return 2;
 }
--- /dev/null
+++ b/src/new.c
@@ -0,0 +1,2 @@
+int g(void) {
+}
";

    #[test]
    fn parses_files_and_hunks() {
        let files = parse_unified_diff(TWO_FILES).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(files[0].old_path.as_deref(), Some("src/a.c"));
        assert_eq!(files[0].hunks[0].context, "int f(void)");
        assert_eq!(files[0].hunks[0].lines.len(), 4);
        assert_eq!(files[1].old_path, None);
        assert_eq!(files[1].path(), "src/new.c");
        assert_eq!(files[1].hunks[0].old_len, 0);
    }

    #[test]
    fn malformed_header_reports_line() {
        let bad = "--- a/x.c\n+++ b/x.c\n@@ -1 +1 @\n";
        let e = parse_unified_diff(bad).unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn truncated_hunk_is_an_error() {
        let bad = "--- a/x.c\n+++ b/x.c\n@@ -1,3 +1,3 @@\n a\n-b\n";
        let e = parse_unified_diff(bad).unwrap_err();
        assert!(e.message.contains("truncated"), "{e}");
    }

    #[test]
    fn hunk_without_file_header() {
        let e = parse_unified_diff("@@ -1 +1 @@\n-a\n+b\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn no_newline_marker_is_skipped() {
        let d = "--- a/x.c\n+++ b/x.c\n@@ -1 +1 @@\n-a\n\\ No newline at end of file\n+b\n\\ No newline at end of file\n";
        let files = parse_unified_diff(d).unwrap();
        assert_eq!(files[0].hunks[0].lines.len(), 2);
    }
}
