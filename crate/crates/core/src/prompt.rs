//! Prompt construction: request refinement, few-shot generation prompts and
//! repair prompts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{OperationTag, Snippet};
use crate::executor::CandidateScript;
use crate::llm::{ChatMessage, LlmProvider, ModelParams};
use crate::traceback::{render_for_llm, ErrorReport, DEFAULT_RENDER_BUDGET};

pub const DEFAULT_PARAVIEW_VERSION: &str = "5.12.0";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}` uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unclosed placeholder")]
    Unclosed { template: String },
    #[error("request text is empty")]
    EmptyRequest,
    #[error("example pair has an empty side")]
    EmptyExample,
    #[error("reading templates: {0}")]
    Io(#[from] std::io::Error),
}

/// A plain-text template with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    /// Checks that every placeholder in `text` is one of `allowed`.
    pub fn new(name: &str, text: &str, allowed: &[&str]) -> Result<Self, PromptError> {
        let template = Self {
            name: name.to_string(),
            text: text.trim_end().to_string(),
        };
        for placeholder in template.placeholders()? {
            if !allowed.contains(&placeholder.as_str()) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.to_string(),
                    name: placeholder,
                });
            }
        }
        Ok(template)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn placeholders(&self) -> Result<Vec<String>, PromptError> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| PromptError::Unclosed {
                template: self.name.clone(),
            })?;
            out.push(after[..close].trim().to_string());
            rest = &after[close + 2..];
        }
        Ok(out)
    }

    /// Substitutes placeholders in a single pass; substituted values are not
    /// re-scanned. Placeholders without a value render as empty text.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            // Validated at construction, so a closing brace exists.
            let close = after.find("}}").unwrap_or(after.len());
            let key = after[..close].trim();
            if let Some((_, value)) = vars.iter().find(|(k, _)| *k == key) {
                out.push_str(value);
            }
            rest = after.get(close + 2..).unwrap_or("");
        }
        out.push_str(rest);
        out
    }
}

/// The full template set, overridable per file from a directory.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub refine_system: Template,
    pub refine_user: Template,
    pub generate_system: Template,
    pub generate_examples: Template,
    pub generate_user: Template,
    pub repair_system: Template,
    pub repair_user: Template,
}

const TEMPLATE_SPECS: &[(&str, &str, &[&str])] = &[
    ("refine_system", include_str!("../templates/refine_system.txt"), &[]),
    (
        "refine_user",
        include_str!("../templates/refine_user.txt"),
        &["example_request", "example_refined", "request"],
    ),
    (
        "generate_system",
        include_str!("../templates/generate_system.txt"),
        &["paraview_version"],
    ),
    (
        "generate_examples",
        include_str!("../templates/generate_examples.txt"),
        &["snippets"],
    ),
    (
        "generate_user",
        include_str!("../templates/generate_user.txt"),
        &["task"],
    ),
    (
        "repair_system",
        include_str!("../templates/repair_system.txt"),
        &["paraview_version"],
    ),
    (
        "repair_user",
        include_str!("../templates/repair_user.txt"),
        &["task", "script", "errors"],
    ),
];

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::build(|_| Ok(None)).expect("shipped templates are valid")
    }

    /// Loads `<name>.txt` files from `dir` where present, falling back to the
    /// built-in text for the rest.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        Self::build(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                Ok(Some(fs::read_to_string(path)?))
            } else {
                Ok(None)
            }
        })
    }

    fn build(mut source: impl FnMut(&str) -> Result<Option<String>, PromptError>) -> Result<Self, PromptError> {
        let mut built = Vec::with_capacity(TEMPLATE_SPECS.len());
        for (name, default, allowed) in TEMPLATE_SPECS {
            let text = source(name)?.unwrap_or_else(|| default.to_string());
            built.push(Template::new(name, &text, allowed)?);
        }
        let mut it = built.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            refine_system: next(),
            refine_user: next(),
            generate_system: next(),
            generate_examples: next(),
            generate_user: next(),
            repair_system: next(),
            repair_user: next(),
        })
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        TEMPLATE_SPECS.iter().map(|(n, _, _)| *n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRequest {
    pub text: String,
    pub session_id: String,
}

impl UserRequest {
    pub fn new(text: impl Into<String>, session_id: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PromptError::EmptyRequest);
        }
        Ok(Self {
            text,
            session_id: session_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementSource {
    LlmRefined,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub preamble: String,
    pub steps: Vec<String>,
    pub source: RefinementSource,
}

impl RefinedPrompt {
    /// The request text as a single step.
    pub fn passthrough(request: &UserRequest) -> Self {
        Self {
            preamble: String::new(),
            steps: vec![request.text.trim().to_string()],
            source: RefinementSource::Passthrough,
        }
    }

    pub fn render(&self) -> String {
        if self.source == RefinementSource::Passthrough && self.preamble.is_empty() {
            return self.steps.join("\n");
        }
        let mut out = String::new();
        if !self.preamble.is_empty() {
            out.push_str(&self.preamble);
            out.push('\n');
        }
        for step in &self.steps {
            out.push_str("- ");
            out.push_str(step);
            out.push('\n');
        }
        out.truncate(out.trim_end().len());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub example_request: String,
    pub example_refined: String,
}

impl ExamplePair {
    pub fn new(request: impl Into<String>, refined: impl Into<String>) -> Result<Self, PromptError> {
        let pair = Self {
            example_request: request.into().trim().to_string(),
            example_refined: refined.into().trim().to_string(),
        };
        if pair.example_request.is_empty() || pair.example_refined.is_empty() {
            return Err(PromptError::EmptyExample);
        }
        Ok(pair)
    }

    pub fn builtin() -> Self {
        Self::new(
            include_str!("../templates/example_request.txt"),
            include_str!("../templates/example_refined.txt"),
        )
        .expect("shipped example is valid")
    }
}

fn filename_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)[\w\-.]+\.(?:vtk|vtu|vti|vtp|vts|vtr|pvd|ex2|exo|e|nc|csv|png|jpe?g)\b").unwrap()
    })
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d+(?:\.\d+)?\b").unwrap())
}

fn step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$").unwrap())
}

/// Concrete parameters in a request: file names and numbers.
pub fn parameter_tokens(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let found = filename_re()
        .find_iter(text)
        .chain(number_re().find_iter(text))
        .map(|m| m.as_str().to_string());
    for t in found {
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }
    tokens
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut start = 0;
        let bytes = line.as_bytes();
        for i in 0..bytes.len() {
            if bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_whitespace) {
                out.push(line[start..=i].trim());
                start = i + 1;
            }
        }
        out.push(line[start..].trim());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Operations mentioned in `text`, by case-insensitive keyword match.
pub fn detect_operations(text: &str) -> BTreeSet<OperationTag> {
    let lower = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    let mut tags = BTreeSet::new();
    if filename_re().is_match(&lower) || lower.contains("screenshot") {
        tags.extend([OperationTag::Reader, OperationTag::CameraView, OperationTag::Screenshot]);
    }
    let keywords: &[(&[&str], OperationTag)] = &[
        (&["isosurface", "contour"], OperationTag::Contour),
        (&["slice"], OperationTag::Slice),
        (&["clip"], OperationTag::Clip),
        (&["volume rendering"], OperationTag::VolumeRender),
        (&["delaunay"], OperationTag::Delaunay3d),
        (&["streamline", "stream tracer"], OperationTag::StreamTracer),
        (&["tube"], OperationTag::Tube),
        (&["glyph"], OperationTag::Glyph),
        (&["color"], OperationTag::ColorBy),
        (&["layout"], OperationTag::Layout),
    ];
    for (words, tag) in keywords {
        if words.iter().any(|w| lower.contains(w)) {
            tags.insert(*tag);
        }
    }
    tags
}

/// Splits an LLM-written instruction list into preamble and steps.
pub fn parse_refined(text: &str) -> Option<(String, Vec<String>)> {
    let mut preamble = Vec::new();
    let mut steps: Vec<String> = Vec::new();
    let mut list_ended = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        if let Some(caps) = step_re().captures(line) {
            if !list_ended {
                steps.push(caps[1].to_string());
                continue;
            }
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if steps.is_empty() {
            preamble.push(trimmed);
        } else if !list_ended && line.starts_with(char::is_whitespace) {
            let last = steps.last_mut().unwrap();
            last.push(' ');
            last.push_str(trimmed);
        } else {
            list_ended = true;
        }
    }
    if steps.is_empty() {
        // No list: every non-empty line is a step.
        let lines: Vec<String> = preamble.iter().map(|s| s.to_string()).collect();
        if lines.is_empty() {
            return None;
        }
        return Some((String::new(), lines));
    }
    Some((preamble.join(" "), steps))
}

/// Messages for a generation call plus their total content length, so callers
/// can enforce a context budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub messages: Vec<ChatMessage>,
    pub total_chars: usize,
}

/// Builds every prompt the session sends.
#[derive(Debug, Clone)]
pub struct PromptEngine {
    pub templates: PromptTemplates,
    pub example: ExamplePair,
    pub paraview_version: String,
    /// Per-report character budget for errors in repair prompts.
    pub error_budget: usize,
}

impl Default for PromptEngine {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::builtin(),
            example: ExamplePair::builtin(),
            paraview_version: DEFAULT_PARAVIEW_VERSION.to_string(),
            error_budget: DEFAULT_RENDER_BUDGET,
        }
    }
}

impl PromptEngine {
    pub fn refine_messages(&self, request: &UserRequest) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.templates.refine_system.render(&[])),
            ChatMessage::user(self.templates.refine_user.render(&[
                ("example_request", &self.example.example_request),
                ("example_refined", &self.example.example_refined),
                ("request", request.text.trim()),
            ])),
        ]
    }

    /// Asks the model for a step-by-step rewrite of the request.
    ///
    /// Never fails: on provider error or an unusable reply the request text
    /// becomes a single passthrough step. Parameters the model dropped are
    /// restored by appending the request sentences that carry them.
    pub fn refine(&self, request: &UserRequest, llm: &dyn LlmProvider, params: &ModelParams) -> RefinedPrompt {
        let reply = match llm.complete(&self.refine_messages(request), params) {
            Ok(reply) => reply,
            Err(err) => {
                log::warn!("refinement failed, passing request through: {err}");
                return RefinedPrompt::passthrough(request);
            }
        };
        let Some((preamble, mut steps)) = parse_refined(&reply) else {
            log::warn!("refinement reply had no steps, passing request through");
            return RefinedPrompt::passthrough(request);
        };
        restore_parameters(&request.text, &mut steps);
        RefinedPrompt {
            preamble,
            steps,
            source: RefinementSource::LlmRefined,
        }
    }

    pub fn build_generation_messages(&self, refined: &RefinedPrompt, snippets: &[Snippet]) -> GenerationPrompt {
        let mut messages = vec![ChatMessage::system(
            self.templates
                .generate_system
                .render(&[("paraview_version", &self.paraview_version)]),
        )];
        if !snippets.is_empty() {
            let rendered: Vec<String> = snippets
                .iter()
                .map(|s| format!("# {} ({})\n{}", s.title, s.tag, s.body))
                .collect();
            messages.push(ChatMessage::user(
                self.templates
                    .generate_examples
                    .render(&[("snippets", &rendered.join("\n\n"))]),
            ));
        }
        messages.push(ChatMessage::user(
            self.templates.generate_user.render(&[("task", &refined.render())]),
        ));
        let total_chars = messages.iter().map(|m| m.content.chars().count()).sum();
        GenerationPrompt { messages, total_chars }
    }

    /// A self-contained repair request: the task, the full failing script
    /// and every error rendered within the per-report budget, in order.
    pub fn build_repair_messages(
        &self,
        task: &RefinedPrompt,
        script: &CandidateScript,
        errors: &[ErrorReport],
    ) -> Vec<ChatMessage> {
        let rendered: Vec<String> = errors
            .iter()
            .enumerate()
            .map(|(i, e)| format!("Error {}:\n{}", i + 1, render_for_llm(e, self.error_budget)))
            .collect();
        vec![
            ChatMessage::system(
                self.templates
                    .repair_system
                    .render(&[("paraview_version", &self.paraview_version)]),
            ),
            ChatMessage::user(self.templates.repair_user.render(&[
                ("task", &task.render()),
                ("script", &script.body),
                ("errors", &rendered.join("\n\n")),
            ])),
        ]
    }
}

fn restore_parameters(request: &str, steps: &mut Vec<String>) {
    let sentences = sentences(request);
    for token in parameter_tokens(request) {
        if steps.iter().any(|s| s.contains(&token)) {
            continue;
        }
        let carrier = sentences.iter().find(|s| s.contains(&token));
        let step = match carrier {
            Some(sentence) => sentence.to_string(),
            None => format!("Use the value {token} exactly as given."),
        };
        if !steps.contains(&step) {
            steps.push(step);
        }
    }
}
