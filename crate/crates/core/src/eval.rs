//! Comparison of generated output against a reference: screenshots pixel by
//! pixel, scripts by their call sequence and attribute assignments.

use std::collections::HashMap;
use std::path::Path;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CHANNEL_TOLERANCE: u8 = 3;
pub const DEFAULT_DIFFERING_THRESHOLD: f64 = 0.02;
/// Share of pixels near the modal color above which an image is flagged as
/// near-uniform (likely blank).
pub const NEAR_UNIFORM_SHARE: f64 = 0.995;

const PY_KEYWORDS: &[&str] = &[
    "and", "as", "assert", "async", "await", "class", "def", "del", "elif", "else", "except", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with",
    "yield",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident {
        name: String,
        call: bool,
    },
    Str,
    Punct(char),
    /// `=` used for assignment (not `==`, `<=`, `!=`, ...).
    Assign,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    tok: Tok,
    depth: usize,
}

/// Python-ish tokenizer, just enough to find calls and attribute assignments.
/// Returns logical statements, each a list of tokens with their nesting depth.
fn statements(src: &str) -> Vec<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    let n = chars.len();
    let flush = |current: &mut Vec<Token>, out: &mut Vec<Vec<Token>>| {
        if !current.is_empty() {
            out.push(std::mem::take(current));
        }
    };
    while i < n {
        let c = chars[i];
        match c {
            '#' => {
                while i < n && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => i += 2,
            '\n' | ';' => {
                if depth == 0 {
                    flush(&mut current, &mut out);
                }
                i += 1;
            }
            '\'' | '"' => {
                i = skip_string(&chars, i);
                current.push(Token { tok: Tok::Str, depth });
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < n && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                // String prefixes such as r'', b"", f''.
                if i < n
                    && (chars[i] == '\'' || chars[i] == '"')
                    && word.len() <= 2
                    && word.chars().all(|p| "rRbBuUfF".contains(p))
                {
                    i = skip_string(&chars, i);
                    current.push(Token { tok: Tok::Str, depth });
                    continue;
                }
                let call = chars.get(i) == Some(&'(');
                current.push(Token {
                    tok: Tok::Ident { name: word, call },
                    depth,
                });
            }
            '(' | '[' | '{' => {
                current.push(Token {
                    tok: Tok::Punct(c),
                    depth,
                });
                depth += 1;
                i += 1;
            }
            ')' | ']' | '}' => {
                depth = depth.saturating_sub(1);
                current.push(Token {
                    tok: Tok::Punct(c),
                    depth,
                });
                i += 1;
            }
            '=' => {
                let prev = if i > 0 { chars[i - 1] } else { ' ' };
                let next = chars.get(i + 1).copied().unwrap_or(' ');
                if next == '=' {
                    current.push(Token { tok: Tok::Other, depth });
                    i += 2;
                } else if "<>!=+-*/%&|^@:".contains(prev) {
                    current.push(Token { tok: Tok::Other, depth });
                    i += 1;
                } else {
                    current.push(Token {
                        tok: Tok::Assign,
                        depth,
                    });
                    i += 1;
                }
            }
            '.' => {
                current.push(Token {
                    tok: Tok::Punct('.'),
                    depth,
                });
                i += 1;
            }
            c if c.is_whitespace() => i += 1,
            _ => {
                current.push(Token { tok: Tok::Other, depth });
                i += 1;
            }
        }
    }
    flush(&mut current, &mut out);
    out
}

/// Index just past the string literal starting at `i`. Unterminated strings
/// run to the end of the line (single-quoted) or the text (triple-quoted).
fn skip_string(chars: &[char], i: usize) -> usize {
    let q = chars[i];
    let n = chars.len();
    let triple = i + 2 < n && chars[i + 1] == q && chars[i + 2] == q;
    let mut j = if triple { i + 3 } else { i + 1 };
    while j < n {
        let c = chars[j];
        if c == '\\' {
            j += 2;
            continue;
        }
        if triple {
            if c == q && j + 2 < n && chars[j + 1] == q && chars[j + 2] == q {
                return j + 3;
            }
        } else if c == q {
            return j + 1;
        } else if c == '\n' {
            return j;
        }
        j += 1;
    }
    n
}

fn is_call(tokens: &[Token], idx: usize) -> Option<&str> {
    let t = &tokens[idx];
    match &t.tok {
        Tok::Ident { name, call: true } if t.depth == 0 => {
            if PY_KEYWORDS.contains(&name.as_str()) {
                return None;
            }
            if idx > 0 {
                if let Tok::Ident { name: prev, .. } = &tokens[idx - 1].tok {
                    if prev == "def" || prev == "class" {
                        return None;
                    }
                }
            }
            Some(name)
        }
        _ => None,
    }
}

/// Names called at the top nesting level of each statement, in source order.
/// Method calls count by their method name; comments and strings are skipped.
pub fn extract_call_sequence(script: &str) -> Vec<String> {
    let mut calls = Vec::new();
    for stmt in statements(script) {
        for idx in 0..stmt.len() {
            if let Some(name) = is_call(&stmt, idx) {
                calls.push(name.to_string());
            }
        }
    }
    calls
}

/// A `target.attr[.attr...] = value` statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeAssignment {
    /// 1-based source line of the statement.
    pub line: usize,
    pub variable: String,
    /// The call whose result was bound to `variable`, if seen earlier.
    pub bound_to: Option<String>,
    pub path: Vec<String>,
}

impl AttributeAssignment {
    /// `Glyph.Scalars` style key; the variable name stands in when the binding
    /// is unknown.
    pub fn key(&self) -> String {
        let head = self.bound_to.as_deref().unwrap_or(&self.variable);
        format!("{head}.{}", self.path.join("."))
    }
}

fn line_starts(src: &str) -> Vec<usize> {
    // Statement line numbers: first line of each logical statement with code.
    let mut starts = Vec::new();
    let mut depth = 0i32;
    let mut fresh = true;
    let chars: Vec<char> = src.chars().collect();
    let mut line = 1;
    let mut i = 0;
    let mut continued = false;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                continued = true;
                line += 1;
                i += 2;
                continue;
            }
            '\n' => {
                line += 1;
                if depth == 0 && !continued {
                    fresh = true;
                }
                continued = false;
            }
            ';' if depth == 0 => fresh = true,
            '\'' | '"' => {
                if fresh {
                    starts.push(line);
                    fresh = false;
                }
                let end = skip_string(&chars, i);
                line += chars[i..end].iter().filter(|c| **c == '\n').count();
                i = end;
                continue;
            }
            '(' | '[' | '{' => {
                if fresh {
                    starts.push(line);
                    fresh = false;
                }
                depth += 1;
            }
            ')' | ']' | '}' => depth = (depth - 1).max(0),
            c if c.is_whitespace() => {}
            _ => {
                if fresh {
                    starts.push(line);
                    fresh = false;
                }
            }
        }
        i += 1;
    }
    starts
}

/// Attribute assignments in source order, with each target variable resolved
/// to the call that produced it where possible.
pub fn extract_attribute_assignments(script: &str) -> Vec<AttributeAssignment> {
    let stmts = statements(script);
    let lines = line_starts(script);
    let mut bindings: HashMap<String, String> = HashMap::new();
    let mut out = Vec::new();
    for (si, stmt) in stmts.iter().enumerate() {
        let line = lines.get(si).copied().unwrap_or(0);
        let Some(eq) = stmt.iter().position(|t| t.depth == 0 && t.tok == Tok::Assign) else {
            continue;
        };
        let lhs = &stmt[..eq];
        let rhs_call = (eq + 1..stmt.len()).find_map(|i| is_call(stmt, i).map(str::to_string));
        // Dotted target: Ident ('.' Ident)+
        let mut names = Vec::new();
        let mut dotted = !lhs.is_empty();
        for (k, t) in lhs.iter().enumerate() {
            match (&t.tok, k % 2) {
                (Tok::Ident { name, call: false }, 0) => names.push(name.clone()),
                (Tok::Punct('.'), 1) => {}
                _ => {
                    dotted = false;
                    break;
                }
            }
        }
        if !dotted || lhs.len() % 2 == 0 {
            continue;
        }
        if names.len() == 1 {
            match rhs_call {
                Some(call) => {
                    bindings.insert(names[0].clone(), call);
                }
                None => {
                    // `a = b` copies a binding; anything else clears it.
                    let alias = match &stmt[eq + 1..] {
                        [Token {
                            tok: Tok::Ident { name, call: false },
                            ..
                        }] => bindings.get(name).cloned(),
                        _ => None,
                    };
                    match alias {
                        Some(b) => bindings.insert(names[0].clone(), b),
                        None => bindings.remove(&names[0]),
                    };
                }
            }
            continue;
        }
        let variable = names[0].clone();
        out.push(AttributeAssignment {
            line,
            bound_to: bindings.get(&variable).cloned(),
            variable,
            path: names[1..].to_vec(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptComparison {
    pub calls_reference: Vec<String>,
    pub calls_candidate: Vec<String>,
    /// Reference calls absent from the candidate, as a multiset difference.
    pub missing: Vec<String>,
    /// Candidate calls absent from the reference, as a multiset difference.
    pub extra: Vec<String>,
    /// Shared calls appear in the same relative order in both scripts.
    pub order_preserved: bool,
    pub attributes_reference: Vec<String>,
    pub attributes_candidate: Vec<String>,
    pub attributes_missing: Vec<String>,
    pub attributes_extra: Vec<String>,
}

impl ScriptComparison {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty()
    }
}

fn multiset_difference(a: &[String], b: &[String]) -> Vec<String> {
    let mut budget: HashMap<&str, usize> = HashMap::new();
    for x in b {
        *budget.entry(x.as_str()).or_default() += 1;
    }
    a.iter()
        .filter(|x| match budget.get_mut(x.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                false
            }
            _ => true,
        })
        .cloned()
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn compare_scripts(candidate: &str, reference: &str) -> ScriptComparison {
    let calls_reference = extract_call_sequence(reference);
    let calls_candidate = extract_call_sequence(candidate);
    let missing = multiset_difference(&calls_reference, &calls_candidate);
    let extra = multiset_difference(&calls_candidate, &calls_reference);
    let shared = calls_reference.len() - missing.len();
    let order_preserved = lcs_len(&calls_reference, &calls_candidate) == shared;
    let keys = |s: &str| -> Vec<String> {
        extract_attribute_assignments(s)
            .iter()
            .map(AttributeAssignment::key)
            .collect()
    };
    let attributes_reference = keys(reference);
    let attributes_candidate = keys(candidate);
    ScriptComparison {
        attributes_missing: multiset_difference(&attributes_reference, &attributes_candidate),
        attributes_extra: multiset_difference(&attributes_candidate, &attributes_reference),
        calls_reference,
        calls_candidate,
        missing,
        extra,
        order_preserved,
        attributes_reference,
        attributes_candidate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageVerdict {
    Match,
    Mismatch,
    Incomparable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub per_channel_tol: u8,
    pub differing_threshold: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            per_channel_tol: DEFAULT_CHANNEL_TOLERANCE,
            differing_threshold: DEFAULT_DIFFERING_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageComparison {
    pub candidate_size: Option<(u32, u32)>,
    pub reference_size: Option<(u32, u32)>,
    pub dimensions_match: bool,
    pub differing_fraction: f64,
    pub max_channel_delta: u8,
    pub mean_abs_error: f64,
    /// Advisory: the candidate is almost a single color.
    pub near_uniform: bool,
    pub verdict: ImageVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    pub options: CompareOptions,
}

impl ImageComparison {
    fn incomparable(
        cause: String,
        candidate_size: Option<(u32, u32)>,
        reference_size: Option<(u32, u32)>,
        options: CompareOptions,
    ) -> Self {
        Self {
            candidate_size,
            reference_size,
            dimensions_match: false,
            differing_fraction: 1.0,
            max_channel_delta: 0,
            mean_abs_error: 0.0,
            near_uniform: false,
            verdict: ImageVerdict::Incomparable,
            cause: Some(cause),
            options,
        }
    }
}

/// True when at least [`NEAR_UNIFORM_SHARE`] of pixels lie within `tol` of
/// the most common color.
pub fn is_near_uniform(img: &RgbaImage, tol: u8) -> bool {
    let total = img.pixels().len();
    if total == 0 {
        return true;
    }
    let mut counts: HashMap<[u8; 4], usize> = HashMap::new();
    for p in img.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    let (mode, _) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(c, n)| (*c, *n))
        .unwrap();
    let near: usize = counts
        .iter()
        .filter(|(c, _)| c.iter().zip(mode).all(|(x, y)| x.abs_diff(y) <= tol))
        .map(|(_, n)| n)
        .sum();
    near as f64 >= NEAR_UNIFORM_SHARE * total as f64
}

/// Pixel comparison of two decoded images.
pub fn compare_rgba(candidate: &RgbaImage, reference: &RgbaImage, options: CompareOptions) -> ImageComparison {
    let cs = candidate.dimensions();
    let rs = reference.dimensions();
    if cs != rs {
        return ImageComparison::incomparable(
            format!("dimensions differ: {}x{} vs {}x{}", cs.0, cs.1, rs.0, rs.1),
            Some(cs),
            Some(rs),
            options,
        );
    }
    let tol = options.per_channel_tol;
    let mut differing = 0usize;
    let mut max_delta = 0u8;
    let mut abs_sum = 0u64;
    for (a, b) in candidate
        .as_raw()
        .chunks_exact(4)
        .zip(reference.as_raw().chunks_exact(4))
    {
        let mut over = false;
        for k in 0..4 {
            let d = a[k].abs_diff(b[k]);
            abs_sum += d as u64;
            max_delta = max_delta.max(d);
            over |= d > tol;
        }
        differing += over as usize;
    }
    let pixels = (cs.0 as usize) * (cs.1 as usize);
    let differing_fraction = if pixels == 0 {
        0.0
    } else {
        differing as f64 / pixels as f64
    };
    let mean_abs_error = if pixels == 0 {
        0.0
    } else {
        abs_sum as f64 / (pixels * 4) as f64
    };
    let verdict = if differing_fraction <= options.differing_threshold {
        ImageVerdict::Match
    } else {
        ImageVerdict::Mismatch
    };
    ImageComparison {
        candidate_size: Some(cs),
        reference_size: Some(rs),
        dimensions_match: true,
        differing_fraction,
        max_channel_delta: max_delta,
        mean_abs_error,
        near_uniform: is_near_uniform(candidate, tol),
        verdict,
        cause: None,
        options,
    }
}

/// Compares two image files. Unreadable files yield an incomparable verdict
/// carrying the cause rather than an error.
pub fn compare_images(candidate: &Path, reference: &Path, options: CompareOptions) -> ImageComparison {
    let load = |p: &Path| image::open(p).map(|img| img.to_rgba8());
    match (load(candidate), load(reference)) {
        (Ok(c), Ok(r)) => compare_rgba(&c, &r, options),
        (c, r) => {
            let mut causes = Vec::new();
            if let Err(e) = &c {
                causes.push(format!("{}: {e}", candidate.display()));
            }
            if let Err(e) = &r {
                causes.push(format!("{}: {e}", reference.display()));
            }
            ImageComparison::incomparable(
                causes.join("; "),
                c.ok().map(|i| i.dimensions()),
                r.ok().map(|i| i.dimensions()),
                options,
            )
        }
    }
}
