//! Error extraction from captured interpreter output.
//!
//! The extractor walks the output line by line. A traceback block opens at a
//! `Traceback (most recent call last):` header or at a bare `File "...", line N`
//! frame, collects frame and context lines, and closes at the first
//! column-zero `<Identifier>: <text>` line naming an exception. Standalone
//! ParaView/VTK `ERROR:` lines and warning lines become `tool_error` reports.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Default per-report character budget when rendering errors into a prompt.
pub const DEFAULT_RENDER_BUDGET: usize = 4000;

const TRUNCATION_MARKER: &str = "\n…[truncated]…\n";

/// Exception names accepted as terminal lines even though they do not end in
/// `Error`, `Exception` or `Warning`.
pub const KNOWN_EXCEPTIONS: &[&str] = &[
    "KeyboardInterrupt",
    "SystemExit",
    "StopIteration",
    "StopAsyncIteration",
    "GeneratorExit",
];

/// Exceptions that end the session rather than trigger a repair.
pub const FATAL_EXCEPTIONS: &[&str] = &["KeyboardInterrupt", "SystemExit"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    Traceback,
    ToolError,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub file: String,
    pub line: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

/// One structured error pulled out of interpreter output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    #[serde(default)]
    pub frames: Vec<FrameRef>,
    pub raw: String,
    pub source: ReportSource,
}

impl ErrorReport {
    /// A report that did not come from the interpreter output, such as a
    /// missing screenshot or an execution timeout.
    pub fn synthesized(kind: impl Into<String>, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            kind: kind.into(),
            raw: message.clone(),
            message,
            frames: Vec::new(),
            source: ReportSource::Synthesized,
        }
    }

    pub fn artifact_missing(path: &str) -> Self {
        Self::synthesized("MissingOutput", format!("expected output file {path} was not created"))
    }

    pub fn timeout(seconds: f64) -> Self {
        Self::synthesized(
            "TimeoutError",
            format!("execution timed out after {} s", format_seconds(seconds)),
        )
    }

    pub fn is_warning(&self) -> bool {
        self.kind.ends_with("Warning")
    }

    pub fn is_fatal(&self) -> bool {
        self.source == ReportSource::Traceback && FATAL_EXCEPTIONS.contains(&self.kind.as_str())
    }

    /// Errors raised by the interpreter itself, as opposed to ones the
    /// orchestrator synthesized.
    pub fn is_interpreter_error(&self) -> bool {
        self.source != ReportSource::Synthesized && !self.is_warning()
    }
}

fn format_seconds(seconds: f64) -> String {
    if seconds.fract() == 0.0 {
        format!("{}", seconds as u64)
    } else {
        format!("{seconds:.1}")
    }
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*Traceback \(most recent call last\):\s*$").unwrap())
}

fn frame_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^\s*File "([^"]+)", line (\d+)(?:, in (.+?))?\s*$"#).unwrap())
}

fn terminal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_.]*)(?::.*)?\s*$").unwrap())
}

fn python_warning_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:.*?:\d+: )?([A-Za-z_][A-Za-z0-9_]*Warning): (.*)$").unwrap())
}

fn vtk_object_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*vtk[A-Za-z0-9_]* \(0x[0-9a-fA-F]+\): ").unwrap())
}

/// Returns the exception name when `line` is a traceback terminal line.
fn terminal_kind(line: &str) -> Option<&str> {
    let caps = terminal_re().captures(line)?;
    let ident = caps.get(1)?.as_str();
    let last = ident.rsplit('.').next().unwrap_or(ident);
    let named = last.ends_with("Error")
        || last.ends_with("Exception")
        || last.ends_with("Warning")
        || KNOWN_EXCEPTIONS.contains(&last);
    if !named {
        return None;
    }
    Some(ident)
}

fn parse_frame(line: &str) -> Option<FrameRef> {
    let caps = frame_re().captures(line)?;
    let line_no: u32 = caps[2].parse().ok()?;
    Some(FrameRef {
        file: caps[1].to_string(),
        line: line_no,
        context: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ToolLine {
    Error,
    Warning,
}

fn classify_tool_line(line: &str) -> Option<ToolLine> {
    let trimmed = line.trim_start();
    if trimmed.starts_with("ERROR:") || line.contains(" ERR| ") {
        return Some(ToolLine::Error);
    }
    if line.contains("vtkOutputWindow") {
        let lower = line.to_ascii_lowercase();
        if lower.contains("error") {
            return Some(ToolLine::Error);
        }
        if lower.contains("warn") {
            return Some(ToolLine::Warning);
        }
    }
    if trimmed.starts_with("Warning:") || line.contains(" WARN| ") {
        return Some(ToolLine::Warning);
    }
    if python_warning_re().is_match(line) {
        return Some(ToolLine::Warning);
    }
    None
}

/// A line with its byte span in the scanned text, excluding the newline.
struct Line<'a> {
    text: &'a str,
    start: usize,
    end: usize,
}

fn split_lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for piece in text.split_inclusive('\n') {
        let mut body = piece.strip_suffix('\n').unwrap_or(piece);
        body = body.strip_suffix('\r').unwrap_or(body);
        out.push(Line {
            text: body,
            start,
            end: start + body.len(),
        });
        start += piece.len();
    }
    out
}

struct OpenBlock {
    start: usize,
    end: usize,
    frames: Vec<FrameRef>,
    awaiting_context: bool,
}

fn close_unterminated(text: &str, block: OpenBlock, out: &mut Vec<ErrorReport>) {
    let raw = &text[block.start..block.end];
    let message = raw
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string();
    out.push(ErrorReport {
        kind: "UnknownError".to_string(),
        message,
        frames: block.frames,
        raw: raw.to_string(),
        source: ReportSource::Traceback,
    });
}

fn scan_stream(text: &str, out: &mut Vec<ErrorReport>) {
    let lines = split_lines(text);
    let mut block: Option<OpenBlock> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = &lines[i];
        if let Some(open) = block.as_mut() {
            if header_re().is_match(line.text) {
                let finished = block.take().unwrap();
                close_unterminated(text, finished, out);
                continue;
            }
            if let Some(frame) = parse_frame(line.text) {
                open.frames.push(frame);
                open.awaiting_context = true;
                open.end = line.end;
            } else if !line.text.starts_with(char::is_whitespace) && !line.text.is_empty() {
                if let Some(kind) = terminal_kind(line.text) {
                    let finished = block.take().unwrap();
                    out.push(ErrorReport {
                        kind: kind.to_string(),
                        message: line.text.trim_end().to_string(),
                        frames: finished.frames,
                        raw: text[finished.start..line.end].to_string(),
                        source: ReportSource::Traceback,
                    });
                } else {
                    open.end = line.end;
                    open.awaiting_context = false;
                }
            } else {
                if open.awaiting_context && !line.text.trim().is_empty() {
                    if let Some(last) = open.frames.last_mut() {
                        last.context = Some(line.text.trim().to_string());
                    }
                }
                open.awaiting_context = false;
                open.end = line.end;
            }
            i += 1;
            continue;
        }

        if header_re().is_match(line.text) {
            block = Some(OpenBlock {
                start: line.start,
                end: line.end,
                frames: Vec::new(),
                awaiting_context: false,
            });
            i += 1;
            continue;
        }
        if let Some(frame) = parse_frame(line.text) {
            block = Some(OpenBlock {
                start: line.start,
                end: line.end,
                frames: vec![frame],
                awaiting_context: true,
            });
            i += 1;
            continue;
        }
        if let Some(tool) = classify_tool_line(line.text) {
            // Classic VTK messages put the offending object on the next line.
            let mut end = line.end;
            let mut detail = None;
            if let Some(next) = lines.get(i + 1) {
                if vtk_object_re().is_match(next.text) {
                    end = next.end;
                    detail = Some(next.text.trim());
                    i += 1;
                }
            }
            out.push(tool_report(tool, line.text, detail, &text[line.start..end]));
            i += 1;
            continue;
        }
        i += 1;
    }
    if let Some(open) = block {
        close_unterminated(text, open, out);
    }
}

fn tool_report(tool: ToolLine, line: &str, detail: Option<&str>, raw: &str) -> ErrorReport {
    let trimmed = line.trim();
    let kind = match tool {
        ToolLine::Error => "ToolError".to_string(),
        ToolLine::Warning => python_warning_re()
            .captures(line)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| "ToolWarning".to_string()),
    };
    let message = match detail {
        Some(d) => d.to_string(),
        None => trimmed.to_string(),
    };
    ErrorReport {
        kind,
        message,
        frames: Vec::new(),
        raw: raw.to_string(),
        source: ReportSource::ToolError,
    }
}

/// Extracts error reports from captured interpreter output.
///
/// `stderr` is scanned before `stdout`. Reports come back in encounter order
/// with exact duplicates (same `raw` text) dropped.
pub fn extract_errors(stdout: &str, stderr: &str) -> Vec<ErrorReport> {
    let mut found = Vec::new();
    scan_stream(stderr, &mut found);
    scan_stream(stdout, &mut found);
    let mut seen = std::collections::HashSet::new();
    found.retain(|r| seen.insert(r.raw.clone()));
    found
}

/// Renders a report for inclusion in a repair prompt, keeping it within
/// `budget` characters.
///
/// Oversized reports keep roughly the first 60% and last 40% of the budget.
/// The terminal exception line is never cut, even if that alone exceeds the
/// budget.
pub fn render_for_llm(report: &ErrorReport, budget: usize) -> String {
    debug_assert!(budget >= 200, "render budget must be at least 200");
    if report.source == ReportSource::Synthesized {
        return report.message.clone();
    }
    let raw = report.raw.as_str();
    let total = raw.chars().count();
    if total <= budget {
        return raw.to_string();
    }

    let terminal = raw.rsplit('\n').next().unwrap_or(raw);
    let terminal_len = terminal.chars().count();
    let marker_len = TRUNCATION_MARKER.chars().count();
    let available = budget.saturating_sub(marker_len);
    if terminal_len >= available {
        return terminal.to_string();
    }
    let tail_len = (available * 2 / 5).max(terminal_len);
    let head_len = available - tail_len;

    let head: String = raw.chars().take(head_len).collect();
    let tail: String = raw.chars().skip(total - tail_len).collect();
    format!("{head}{TRUNCATION_MARKER}{tail}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const GLYPH_TRACE: &str = "Traceback (most recent call last):
  File \"/work/iter1/script.py\", line 23, in <module>
    coneGlyph.Scalars = ['POINTS', 'Temp']
  File \"/opt/paraview/lib/python3.10/site-packages/paraview/servermanager.py\", line 318, in __setattr__
    _bc.setattr(self, name, value)
AttributeError: type object 'Glyph' has no attribute 'Scalars'
";

    #[test]
    fn glyph_attribute_error() {
        let reports = extract_errors("", GLYPH_TRACE);
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!(r.kind, "AttributeError");
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.frames[0].line, 23);
        assert_eq!(
            r.frames[0].context.as_deref(),
            Some("coneGlyph.Scalars = ['POINTS', 'Temp']")
        );
        assert_eq!(
            r.message,
            "AttributeError: type object 'Glyph' has no attribute 'Scalars'"
        );
        assert!(GLYPH_TRACE.contains(&r.raw));
        assert_eq!(r.source, ReportSource::Traceback);
    }

    #[test]
    fn empty_output_has_no_errors() {
        assert!(extract_errors("", "").is_empty());
    }

    #[test]
    fn two_tracebacks_between_log_lines() {
        let text = "loading ml-100.vtk\n\
Traceback (most recent call last):\n  File \"script.py\", line 4, in <module>\n    contour = Contuor(Input=reader)\nNameError: name 'Contuor' is not defined\n\
rendering...\n\
Traceback (most recent call last):\n  File \"script.py\", line 9, in <module>\n    SaveScreenshot(1920)\nTypeError: SaveScreenshot() missing 1 required positional argument\n\
done\n";
        let reports = extract_errors(text, "");
        let kinds: Vec<_> = reports.iter().map(|r| r.kind.as_str()).collect();
        assert_eq!(kinds, ["NameError", "TypeError"]);
        assert_eq!(reports[0].frames.len(), 1);
        assert_eq!(reports[1].frames[0].line, 9);
    }

    #[test]
    fn stderr_is_scanned_first() {
        let a = "Traceback (most recent call last):\n  File \"a.py\", line 1, in <module>\nValueError: bad\n";
        let b = "Traceback (most recent call last):\n  File \"b.py\", line 1, in <module>\nKeyError: 'x'\n";
        let reports = extract_errors(a, b);
        assert_eq!(reports[0].kind, "KeyError");
        assert_eq!(reports[1].kind, "ValueError");
    }

    #[test]
    fn unterminated_traceback_is_unknown_error() {
        let text = "Traceback (most recent call last):\n  File \"s.py\", line 2, in <module>\n    Show(x)\n";
        let reports = extract_errors("", text);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, "UnknownError");
        assert_eq!(reports[0].frames.len(), 1);
        assert!(text.contains(&reports[0].raw));
    }

    #[test]
    fn syntax_error_without_header() {
        let text = "  File \"/w/script.py\", line 3\n    reader = LegacyVTKReader(FileNames=['ml-100.vtk']\n                                                      ^\nSyntaxError: '(' was never closed\n";
        let reports = extract_errors("", text);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, "SyntaxError");
        assert_eq!(reports[0].frames[0].line, 3);
        assert!(reports[0].frames[0].context.is_some());
    }

    #[test]
    fn paraview_error_line_with_object_detail() {
        let text = "ERROR: In /builds/vtk/IO/Legacy/vtkDataReader.cxx, line 410\nvtkStructuredPointsReader (0x55d5c8a3b2c0): Unable to open file: ml-100.vtk\n\nnext\n";
        let reports = extract_errors(text, "");
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!(r.source, ReportSource::ToolError);
        assert_eq!(r.kind, "ToolError");
        assert!(r.raw.ends_with("Unable to open file: ml-100.vtk"));
        assert!(r.message.contains("Unable to open file"));
    }

    #[test]
    fn warnings_are_tool_errors_flagged_as_warnings() {
        let text = "/w/script.py:5: DeprecationWarning: 'GetDisplayProperties' is deprecated\n";
        let reports = extract_errors("", text);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, "DeprecationWarning");
        assert!(reports[0].is_warning());
        assert!(!reports[0].is_interpreter_error());
    }

    #[test]
    fn duplicates_removed() {
        let block = "Traceback (most recent call last):\n  File \"s.py\", line 1, in <module>\nNameError: name 'x' is not defined\n";
        let reports = extract_errors(block, block);
        assert_eq!(reports.len(), 1);
    }

    #[test]
    fn bare_keyboard_interrupt_is_fatal() {
        let text = "Traceback (most recent call last):\n  File \"s.py\", line 7, in <module>\n    time.sleep(100)\nKeyboardInterrupt\n";
        let reports = extract_errors("", text);
        assert_eq!(reports[0].kind, "KeyboardInterrupt");
        assert!(reports[0].is_fatal());
    }

    #[test]
    fn prose_is_ignored() {
        let text = "Rendering 45%|████▌     | 45/100\nFile sizes: 3 MB\nNote: error bars shown\nThe Error: none\n";
        assert!(extract_errors(text, text).is_empty());
    }

    #[test]
    fn render_short_report_verbatim() {
        let r = extract_errors("", GLYPH_TRACE).remove(0);
        assert!(r.raw.chars().count() < 4000);
        assert_eq!(render_for_llm(&r, 4000), r.raw);
    }

    #[test]
    fn render_long_report_truncates_and_keeps_terminal_line() {
        let mut raw = String::from("Traceback (most recent call last):\n");
        while raw.len() < 10_000 {
            raw.push_str("  File \"deep.py\", line 12, in recurse\n    return recurse(n - 1)\n");
        }
        raw.push_str("RecursionError: maximum recursion depth exceeded");
        let r = extract_errors("", &raw).remove(0);
        assert_eq!(r.kind, "RecursionError");
        let rendered = render_for_llm(&r, 4000);
        assert!(rendered.chars().count() <= 4000);
        assert!(rendered.ends_with("RecursionError: maximum recursion depth exceeded"));
        assert!(rendered.contains("…[truncated]…"));
        assert!(rendered.starts_with("Traceback (most recent call last):"));
    }

    #[test]
    fn render_synthesized_is_message_only() {
        let r = ErrorReport::artifact_missing("ml-dvr-screenshot.png");
        assert_eq!(
            render_for_llm(&r, 4000),
            "expected output file ml-dvr-screenshot.png was not created"
        );
    }

    #[test]
    fn timeout_message_format() {
        assert_eq!(ErrorReport::timeout(120.0).message, "execution timed out after 120 s");
    }
}
