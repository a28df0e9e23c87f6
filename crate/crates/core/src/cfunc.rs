//! Brace-balance scanner locating function definitions in C/C++ source.
//!
//! This is not a parser. It skips comments, string/char literals and
//! preprocessor lines, treats `namespace`/`class`/`struct`/`union`/`extern`
//! bodies as transparent, and reports every other top-level `{ ... }` whose
//! header looks like `name(...)` as a function. Macro-heavy code and K&R
//! parameter lists can defeat it.

use serde::{Deserialize, Serialize};

/// 1-based inclusive line span of a function definition, from the first
/// line of its signature to the closing brace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpan {
    pub name: String,
    pub start_line: usize,
    pub end_line: usize,
}

impl FunctionSpan {
    pub fn contains(&self, line: usize) -> bool {
        (self.start_line..=self.end_line).contains(&line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Container,
    Function,
    Other,
}

const NON_FUNCTION_WORDS: &[&str] = &[
    "if", "for", "while", "switch", "catch", "return", "sizeof", "decltype", "alignas", "noexcept",
    "throw", "__attribute__", "__declspec", "asm", "__asm__", "defined", "do", "else",
];

const ACCESS_LABELS: &[&str] = &["public:", "private:", "protected:"];

/// All function definitions in `source`, in order of appearance.
pub fn scan_functions(source: &str) -> Vec<FunctionSpan> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut stack: Vec<(Block, Option<(String, usize)>)> = Vec::new();
    let mut header = String::new();
    let mut header_line = 0usize;
    let mut line = 1usize;
    let mut at_line_start = true;
    let mut i = 0;

    let at_container_level = |stack: &Vec<(Block, Option<(String, usize)>)>| {
        stack.last().map_or(true, |(b, _)| *b == Block::Container)
    };

    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();

        if c == '\n' {
            line += 1;
            at_line_start = true;
            header.push(' ');
            i += 1;
            continue;
        }
        if at_line_start && c == '#' {
            // preprocessor directive, honoring backslash continuations
            while i < chars.len() && chars[i] != '\n' {
                if chars[i] == '\\' && chars.get(i + 1) == Some(&'\n') {
                    line += 1;
                    i += 1;
                }
                i += 1;
            }
            continue;
        }
        if c.is_whitespace() {
            header.push(' ');
            i += 1;
            continue;
        }
        at_line_start = false;

        if c == '/' && next == Some('/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && next == Some('*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                if chars[i] == '\n' {
                    line += 1;
                }
                i += 1;
            }
            i += 2;
            header.push(' ');
            continue;
        }
        if header.trim().is_empty() {
            header_line = line;
        }
        if c == '"' || c == '\'' {
            // literal: keep a placeholder so headers stay well-formed
            header.push(c);
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                if chars.get(i) == Some(&'\n') {
                    line += 1;
                }
                i += 1;
            }
            header.push(c);
            i += 1;
            continue;
        }

        match c {
            '{' => {
                if at_container_level(&stack) {
                    match classify(&header) {
                        HeaderKind::Function(name) => stack.push((Block::Function, Some((name, header_line)))),
                        HeaderKind::Container => stack.push((Block::Container, None)),
                        HeaderKind::Other => stack.push((Block::Other, None)),
                    }
                } else {
                    stack.push((Block::Other, None));
                }
                header.clear();
            }
            '}' => {
                if let Some((Block::Function, Some((name, start)))) = stack.pop() {
                    out.push(FunctionSpan { name, start_line: start, end_line: line });
                }
                if at_container_level(&stack) {
                    header.clear();
                }
            }
            ';' => {
                if at_container_level(&stack) {
                    header.clear();
                }
            }
            _ => {
                header.push(c);
                if c == ':' && ACCESS_LABELS.iter().any(|l| header.trim_end().ends_with(l)) {
                    header.clear();
                }
            }
        }
        i += 1;
    }
    out
}

enum HeaderKind {
    Function(String),
    Container,
    Other,
}

fn classify(header: &str) -> HeaderKind {
    let h = header.trim();
    let mut depth = 0i32;
    for (pos, ch) in h.char_indices() {
        match ch {
            '(' if depth == 0 => {
                if let Some(name) = name_before(&h[..pos]) {
                    if !NON_FUNCTION_WORDS.contains(&name.rsplit("::").next().unwrap_or(&name)) {
                        if h[..pos].contains('=') && !name.starts_with("operator") {
                            return HeaderKind::Other;
                        }
                        return HeaderKind::Function(name);
                    }
                }
                depth += 1;
            }
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
    }
    let words: Vec<&str> = h.split(|c: char| !(c.is_alphanumeric() || c == '_')).collect();
    let container = words.first() == Some(&"extern")
        || words.iter().any(|w| matches!(*w, "namespace" | "class" | "struct" | "union"));
    if container && !h.contains('=') && !h.contains('(') {
        HeaderKind::Container
    } else {
        HeaderKind::Other
    }
}

/// Qualified identifier (or `operator` token) ending right before `(`.
fn name_before(prefix: &str) -> Option<String> {
    let p = prefix.trim_end();
    if let Some(op_pos) = p.rfind("operator") {
        let tail = p[op_pos + "operator".len()..].trim();
        if !tail.is_empty() && tail.chars().all(|c| !c.is_alphanumeric() || c == '_') || tail == "()" {
            let start = p[..op_pos]
                .rfind(|c: char| !(c.is_alphanumeric() || c == '_' || c == ':' || c == '~'))
                .map_or(0, |i| i + 1);
            return Some(format!("{}{}", &p[start..op_pos + "operator".len()], tail.replace(' ', "")));
        }
    }
    let start = p
        .rfind(|c: char| !(c.is_alphanumeric() || c == '_' || c == ':' || c == '~'))
        .map_or(0, |i| i + 1);
    let name = &p[start..];
    let last = name.rsplit("::").next().unwrap_or(name).trim_start_matches('~');
    let valid = last.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_');
    valid.then(|| name.to_string())
}

/// Function name suggested by a hunk-header context line such as
/// `static int parse(const char *s)`.
pub fn name_from_signature(text: &str) -> Option<String> {
    let pos = text.find('(')?;
    let name = name_before(&text[..pos])?;
    let last = name.rsplit("::").next().unwrap_or(&name).to_string();
    (!NON_FUNCTION_WORDS.contains(&last.as_str())).then_some(name)
}

/// Innermost-first search is unnecessary: spans never nest.
pub fn enclosing_function(spans: &[FunctionSpan], line: usize) -> Option<&FunctionSpan> {
    spans.iter().find(|s| s.contains(line))
}

/// Lines `start..=end` (1-based) of `source`, each terminated by `\n`.
pub fn extract_lines(source: &str, start: usize, end: usize) -> String {
    let mut out = String::new();
    for l in source.lines().skip(start.saturating_sub(1)).take(end + 1 - start.max(1)) {
        out.push_str(l);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = r#"#include <stdio.h>
#define MAX(a, b) \
  ((a) > (b) ? (a) : (b))

/* a comment with { braces } */
static int table[] = { 1, 2, 3 };

struct point { int x; int y; };

static int
count_positive(const int *a, int n)
{
    int c = 0;
    for (int i = 0; i < n; i++) {
        if (a[i] > 0) { c++; }
    }
    const char *s = "}{";
    return c;
}

namespace util {
class Buf : public Base {
public:
    void push(char ch) {
        data_[len_++] = ch;
    }
    bool operator==(const Buf &o) const { return len_ == o.len_; }
};

Buf::Buf(int cap) : cap_(cap), len_(0) {
    data_ = new char[cap];
}
}  // namespace util

extern "C" {
int c_entry(void) { return 0; }
}
"#;

    #[test]
    fn finds_functions_and_spans() {
        let spans = scan_functions(SRC);
        let names: Vec<_> = spans.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["count_positive", "push", "operator==", "Buf::Buf", "c_entry"]);
        assert_eq!((spans[0].start_line, spans[0].end_line), (10, 19));
        assert_eq!((spans[1].start_line, spans[1].end_line), (24, 26));
        assert_eq!((spans[3].start_line, spans[3].end_line), (30, 32));
        assert_eq!((spans[4].start_line, spans[4].end_line), (36, 36));
    }

    #[test]
    fn control_flow_and_initializers_are_not_functions() {
        let src = "int x = f(1) ? 2 : 3;\nauto g = [](int a) { return a; };\nvoid h() { if (x) { } }\n";
        let spans = scan_functions(src);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].name, "h");
    }

    #[test]
    fn signature_name() {
        assert_eq!(name_from_signature("static int parse(const char *s)").as_deref(), Some("parse"));
        assert_eq!(name_from_signature("void Foo::bar() const").as_deref(), Some("Foo::bar"));
        assert_eq!(name_from_signature("if (x)"), None);
        assert_eq!(name_from_signature("struct foo"), None);
    }

    #[test]
    fn extract_is_inclusive() {
        assert_eq!(extract_lines("a\nb\nc\n", 2, 3), "b\nc\n");
        assert_eq!(extract_lines("a\nb\nc", 1, 1), "a\n");
    }
}
