//! The generate → execute → extract → repair loop.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::executor::{check_artifacts, CandidateScript, ExecError, ExecutionOutcome, ScriptExecutor};
use crate::llm::{extract_script_text, messages_digest, ChatMessage, LlmProvider, ModelParams};
use crate::prompt::{detect_operations, parameter_tokens, PromptEngine, RefinedPrompt, UserRequest};
use crate::traceback::{extract_errors, ErrorReport, ReportSource};

pub const SESSION_FILE: &str = "session.json";
pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const DEFAULT_EXECUTION_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub max_iterations: u32,
    pub execution_timeout: Duration,
    /// Session directories are created under this path.
    pub workdir: PathBuf,
    /// Relative paths the script must produce. When empty, image file names
    /// found in the request are used.
    pub expected_artifacts: Vec<String>,
    pub model_params: ModelParams,
    /// Ask the model for a step-by-step rewrite before generating.
    pub refine: bool,
    /// Include catalog snippets in the generation prompt.
    pub snippets: bool,
    /// Treat warnings like errors when deciding whether to repair.
    pub warnings_trigger_repair: bool,
    /// Data files copied into every iteration directory before execution.
    pub input_files: Vec<PathBuf>,
    pub prompts: PromptEngine,
    pub catalog: Catalog,
}

impl SessionConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            execution_timeout: DEFAULT_EXECUTION_TIMEOUT,
            workdir: workdir.into(),
            expected_artifacts: Vec::new(),
            model_params: ModelParams::default(),
            refine: true,
            snippets: true,
            warnings_trigger_repair: false,
            input_files: Vec::new(),
            prompts: PromptEngine::default(),
            catalog: Catalog::builtin(),
        }
    }

    /// Single-shot generation: no refinement, no snippets, no repair.
    pub fn unassisted(mut self) -> Self {
        self.refine = false;
        self.snippets = false;
        self.max_iterations = 1;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 {
            return Err(ConfigError::Invalid("max_iterations must be at least 1".into()));
        }
        if self.execution_timeout.is_zero() {
            return Err(ConfigError::Invalid("execution_timeout must be positive".into()));
        }
        self.model_params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid session config: {0}")]
    Invalid(String),
}

/// Image files named in a request, in order of appearance.
pub fn expected_artifacts_from_request(text: &str) -> Vec<String> {
    parameter_tokens(text)
        .into_iter()
        .filter(|t| {
            let lower = t.to_ascii_lowercase();
            [".png", ".jpg", ".jpeg"].iter().any(|ext| lower.ends_with(ext))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Repairable,
    Fatal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub verdict: Verdict,
    /// Errors that drive the verdict, including synthesized ones.
    pub errors: Vec<ErrorReport>,
    /// Warnings set aside because they do not trigger repair.
    pub warnings: Vec<ErrorReport>,
    pub missing_artifacts: Vec<String>,
}

/// Decides what an execution means for the loop.
///
/// Success needs exit code 0, no errors and every expected artifact. A clean
/// exit that leaves an artifact missing is repairable, with one synthesized
/// report per missing file. So is a timeout, and a nonzero exit that printed
/// nothing recognizable.
pub fn classify_outcome(
    outcome: &ExecutionOutcome,
    extracted: &[ErrorReport],
    expected: &[String],
    warnings_trigger_repair: bool,
) -> Classification {
    let (warnings, mut errors): (Vec<_>, Vec<_>) = extracted
        .iter()
        .cloned()
        .partition(|e| e.is_warning() && !warnings_trigger_repair);
    let missing = check_artifacts(outcome, expected);
    if errors.iter().any(ErrorReport::is_fatal) {
        return Classification {
            verdict: Verdict::Fatal,
            errors,
            warnings,
            missing_artifacts: missing,
        };
    }
    if outcome.timed_out {
        errors.push(ErrorReport::timeout(outcome.duration_s.round()));
    }
    if errors.is_empty() {
        errors.extend(missing.iter().map(|p| ErrorReport::artifact_missing(p)));
    }
    if errors.is_empty() && outcome.exit_code != Some(0) {
        let status = outcome.exit_code.map_or_else(
            || "no status (killed by a signal)".to_string(),
            |c| format!("status {c}"),
        );
        let tail: String = {
            let s = outcome.stderr.trim_end();
            let start = s.char_indices().rev().nth(999).map_or(0, |(i, _)| i);
            s[start..].to_string()
        };
        let mut message = format!("the interpreter exited with {status} without a recognizable error");
        if !tail.is_empty() {
            message.push_str("; last output:\n");
            message.push_str(&tail);
        }
        errors.push(ErrorReport::synthesized("NonzeroExit", message));
    }
    let verdict = if errors.is_empty() {
        Verdict::Success
    } else {
        Verdict::Repairable
    };
    Classification {
        verdict,
        errors,
        warnings,
        missing_artifacts: missing,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub index: u32,
    pub prompt_messages: Vec<ChatMessage>,
    pub script: CandidateScript,
    pub outcome: ExecutionOutcome,
    pub errors: Vec<ErrorReport>,
    pub warnings: Vec<ErrorReport>,
    pub missing_artifacts: Vec<String>,
    pub verdict: Verdict,
}

impl IterationRecord {
    /// Errors reported by the interpreter itself, as opposed to ones the
    /// session synthesized (missing artifact, timeout, empty reply).
    pub fn interpreter_errors(&self) -> impl Iterator<Item = &ErrorReport> {
        self.errors.iter().filter(|e| e.is_interpreter_error())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Succeeded,
    Exhausted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub request: UserRequest,
    pub refined: RefinedPrompt,
    pub iterations: Vec<IterationRecord>,
    pub final_status: FinalStatus,
    pub final_script: Option<CandidateScript>,
    pub abort_cause: Option<String>,
    pub expected_artifacts: Vec<String>,
    /// Directory holding `session.json` and the `iter<k>` subdirectories.
    pub dir: PathBuf,
    pub started_at: String,
    pub ended_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn iteration_dir(session_dir: &Path, index: u32) -> PathBuf {
    session_dir.join(format!("iter{index}"))
}

fn fresh_dir(dir: &Path, inputs: &[PathBuf]) -> io::Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    for input in inputs {
        let name = input
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "input path has no file name"))?;
        fs::copy(input, dir.join(name))?;
    }
    Ok(())
}

fn failed_iteration(
    index: u32,
    messages: Vec<ChatMessage>,
    body: &str,
    error: ErrorReport,
    verdict: Verdict,
) -> IterationRecord {
    IterationRecord {
        index,
        prompt_messages: messages,
        script: CandidateScript::new(body, index),
        outcome: ExecutionOutcome::not_run(),
        errors: vec![error],
        warnings: Vec::new(),
        missing_artifacts: Vec::new(),
        verdict,
    }
}

/// Runs one request to completion and writes the session directory
/// `<workdir>/<session_id>/`.
///
/// Every iteration runs in a fresh `iter<k>` subdirectory. The loop stops at
/// the first success, a fatal error, or after `max_iterations` attempts.
/// Provider failures and unusable working directories abort the session;
/// they are recorded as a final fatal iteration rather than returned as
/// errors. Only an invalid config is an `Err`.
pub fn run_session(
    request: &UserRequest,
    config: &SessionConfig,
    llm: &dyn LlmProvider,
    executor: &dyn ScriptExecutor,
) -> Result<SessionRecord, ConfigError> {
    config.validate()?;
    let started_at = now();
    let dir = config.workdir.join(&request.session_id);
    let expected = if config.expected_artifacts.is_empty() {
        expected_artifacts_from_request(&request.text)
    } else {
        config.expected_artifacts.clone()
    };
    let engine = &config.prompts;
    let params = &config.model_params;

    let refined = if config.refine {
        engine.refine(request, llm, params)
    } else {
        RefinedPrompt::passthrough(request)
    };
    let snippets = if config.snippets {
        config.catalog.select(&detect_operations(&request.text))
    } else {
        Vec::new()
    };
    let mut messages = engine.build_generation_messages(&refined, &snippets).messages;

    let mut iterations = Vec::new();
    let mut abort_cause = None;
    let mut status = FinalStatus::Exhausted;
    for index in 1..=config.max_iterations {
        let record = run_iteration(index, &dir, &messages, &expected, config, llm, executor);
        let verdict = record.verdict;
        if let Err(e) = persist_iteration(&dir, &record) {
            log::warn!("cannot write iteration {index} files: {e}");
        }
        if verdict == Verdict::Repairable {
            messages = engine.build_repair_messages(&refined, &record.script, &record.errors);
        }
        iterations.push(record);
        match verdict {
            Verdict::Success => {
                status = FinalStatus::Succeeded;
                break;
            }
            Verdict::Fatal => {
                status = FinalStatus::Aborted;
                abort_cause = iterations.last().and_then(|r: &IterationRecord| {
                    r.errors
                        .iter()
                        .find(|e| e.is_fatal() || e.source == ReportSource::Synthesized)
                        .or(r.errors.first())
                        .map(|e| e.message.clone())
                });
                break;
            }
            Verdict::Repairable => {}
        }
    }

    let final_script = (status == FinalStatus::Succeeded)
        .then(|| iterations.last().map(|r| r.script.clone()))
        .flatten();
    let record = SessionRecord {
        request: request.clone(),
        refined,
        iterations,
        final_status: status,
        final_script,
        abort_cause,
        expected_artifacts: expected,
        dir,
        started_at,
        ended_at: now(),
    };
    if let Err(e) = record.write_json() {
        log::warn!("cannot write {}: {e}", record.dir.join(SESSION_FILE).display());
    }
    Ok(record)
}

fn run_iteration(
    index: u32,
    session_dir: &Path,
    messages: &[ChatMessage],
    expected: &[String],
    config: &SessionConfig,
    llm: &dyn LlmProvider,
    executor: &dyn ScriptExecutor,
) -> IterationRecord {
    let completion = match llm.complete(messages, &config.model_params) {
        Ok(text) => text,
        Err(e) => {
            let report = ErrorReport::synthesized("ProviderError", format!("model request failed: {e}"));
            return failed_iteration(index, messages.to_vec(), "", report, Verdict::Fatal);
        }
    };
    let script = match extract_script_text(&completion) {
        Ok((body, path)) => CandidateScript::new(body, index).with_extraction(path),
        Err(_) => {
            let report = ErrorReport::synthesized(
                "EmptyScript",
                "the reply contained no script; return the complete script",
            );
            return failed_iteration(index, messages.to_vec(), "", report, Verdict::Repairable);
        }
    };
    let dir = iteration_dir(session_dir, index);
    if let Err(e) = fresh_dir(&dir, &config.input_files) {
        let report = ErrorReport::synthesized("WorkdirError", format!("cannot prepare {}: {e}", dir.display()));
        return failed_iteration(index, messages.to_vec(), &script.body, report, Verdict::Fatal);
    }
    let outcome = match executor.execute(&script, &dir, config.execution_timeout) {
        Ok(outcome) => outcome,
        Err(e) => {
            let kind = match e {
                ExecError::InterpreterMissing(_) => "InterpreterMissing",
                ExecError::Workdir { .. } => "WorkdirError",
                ExecError::Spawn(_) => "SpawnError",
            };
            let report = ErrorReport::synthesized(kind, e.to_string());
            return failed_iteration(index, messages.to_vec(), &script.body, report, Verdict::Fatal);
        }
    };
    let extracted = extract_errors(&outcome.stdout, &outcome.stderr);
    let class = classify_outcome(&outcome, &extracted, expected, config.warnings_trigger_repair);
    IterationRecord {
        index,
        prompt_messages: messages.to_vec(),
        script,
        outcome,
        errors: class.errors,
        warnings: class.warnings,
        missing_artifacts: class.missing_artifacts,
        verdict: class.verdict,
    }
}

fn persist_iteration(session_dir: &Path, record: &IterationRecord) -> io::Result<()> {
    let dir = iteration_dir(session_dir, record.index);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("script.py"), &record.script.body)?;
    fs::write(dir.join("stdout.txt"), &record.outcome.stdout)?;
    fs::write(dir.join("stderr.txt"), &record.outcome.stderr)?;
    let messages = serde_json::to_string_pretty(&record.prompt_messages)?;
    fs::write(dir.join("messages.json"), messages + "\n")
}

/// One iteration as stored in `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDoc {
    pub index: u32,
    pub messages_digest: String,
    pub script_path: String,
    pub script_digest: String,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub duration_s: f64,
    pub produced_files: Vec<crate::executor::ProducedFile>,
    pub missing_artifacts: Vec<String>,
    pub errors: Vec<ErrorReport>,
    pub warnings: Vec<ErrorReport>,
    pub verdict: Verdict,
}

/// The persisted form of a [`SessionRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub request: UserRequest,
    pub refined: RefinedPrompt,
    pub expected_artifacts: Vec<String>,
    pub iterations: Vec<IterationDoc>,
    pub final_status: FinalStatus,
    pub final_script_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_cause: Option<String>,
    pub started_at: String,
    pub ended_at: String,
}

impl SessionRecord {
    pub fn to_doc(&self) -> SessionDoc {
        SessionDoc {
            request: self.request.clone(),
            refined: self.refined.clone(),
            expected_artifacts: self.expected_artifacts.clone(),
            iterations: self
                .iterations
                .iter()
                .map(|r| IterationDoc {
                    index: r.index,
                    messages_digest: messages_digest(&r.prompt_messages),
                    script_path: format!("iter{}/script.py", r.index),
                    script_digest: r.script.digest.clone(),
                    exit_code: r.outcome.exit_code,
                    timed_out: r.outcome.timed_out,
                    duration_s: r.outcome.duration_s,
                    produced_files: r.outcome.produced_files.clone(),
                    missing_artifacts: r.missing_artifacts.clone(),
                    errors: r.errors.clone(),
                    warnings: r.warnings.clone(),
                    verdict: r.verdict,
                })
                .collect(),
            final_status: self.final_status,
            final_script_digest: self.final_script.as_ref().map(|s| s.digest.clone()),
            abort_cause: self.abort_cause.clone(),
            started_at: self.started_at.clone(),
            ended_at: self.ended_at.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("session doc serializes") + "\n"
    }

    pub fn write_json(&self) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join(SESSION_FILE), self.to_json())
    }

    /// Paths of the expected artifacts produced by the final iteration.
    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        let Some(last) = self.iterations.last() else {
            return Vec::new();
        };
        let dir = iteration_dir(&self.dir, last.index);
        self.expected_artifacts
            .iter()
            .filter(|a| !last.missing_artifacts.contains(a))
            .map(|a| dir.join(a))
            .filter(|p| p.is_file())
            .collect()
    }
}

impl SessionDoc {
    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ProducedFile;
    use crate::llm::ScriptedProvider;
    use crate::simulate::SimulatedExecutor;
    use crate::tasks::{task, TaskId};

    fn outcome(exit: Option<i32>, files: &[(&str, u64)]) -> ExecutionOutcome {
        ExecutionOutcome {
            exit_code: exit,
            produced_files: files
                .iter()
                .map(|(p, s)| ProducedFile {
                    path: p.to_string(),
                    size: *s,
                })
                .collect(),
            ..ExecutionOutcome::not_run()
        }
    }

    fn expected() -> Vec<String> {
        vec!["a.png".to_string()]
    }

    #[test]
    fn classify_success() {
        let c = classify_outcome(&outcome(Some(0), &[("a.png", 10)]), &[], &expected(), false);
        assert_eq!(c.verdict, Verdict::Success);
        assert!(c.errors.is_empty());
    }

    #[test]
    fn classify_attribute_error() {
        let stderr = "Traceback (most recent call last):\n  File \"s.py\", line 2, in <module>\nAttributeError: x\n";
        let errors = extract_errors("", stderr);
        let c = classify_outcome(&outcome(Some(1), &[]), &errors, &expected(), false);
        assert_eq!(c.verdict, Verdict::Repairable);
        assert_eq!(c.errors.len(), 1);
        assert_eq!(c.errors[0].kind, "AttributeError");
    }

    #[test]
    fn classify_missing_artifact_synthesizes_report() {
        for files in [&[][..], &[("a.png", 0)][..]] {
            let c = classify_outcome(&outcome(Some(0), files), &[], &expected(), false);
            assert_eq!(c.verdict, Verdict::Repairable);
            assert_eq!(c.errors, vec![ErrorReport::artifact_missing("a.png")]);
        }
    }

    #[test]
    fn classify_warning_only_is_success_by_default() {
        let errors = extract_errors("", "Warning: In vtkFoo.cxx, line 3\nslow\n");
        assert!(!errors.is_empty());
        let ok = outcome(Some(0), &[("a.png", 10)]);
        assert_eq!(
            classify_outcome(&ok, &errors, &expected(), false).verdict,
            Verdict::Success
        );
        assert_eq!(
            classify_outcome(&ok, &errors, &expected(), true).verdict,
            Verdict::Repairable
        );
    }

    #[test]
    fn classify_timeout_and_silent_failure() {
        let mut o = outcome(None, &[]);
        o.timed_out = true;
        o.duration_s = 2.0;
        let c = classify_outcome(&o, &[], &expected(), false);
        assert_eq!(c.verdict, Verdict::Repairable);
        assert_eq!(c.errors[0].kind, "TimeoutError");

        let mut o = outcome(Some(3), &[("a.png", 10)]);
        o.stderr = "segfault-ish noise".into();
        let c = classify_outcome(&o, &[], &expected(), false);
        assert_eq!(c.verdict, Verdict::Repairable);
        assert_eq!(c.errors[0].kind, "NonzeroExit");
        assert!(c.errors[0].message.contains("segfault-ish noise"));
    }

    #[test]
    fn classify_system_exit_is_fatal() {
        let errors = extract_errors(
            "",
            "Traceback (most recent call last):\n  File \"s.py\", line 1, in <module>\nSystemExit: 2\n",
        );
        let c = classify_outcome(&outcome(Some(2), &[]), &errors, &expected(), false);
        assert_eq!(c.verdict, Verdict::Fatal);
    }

    #[test]
    fn artifacts_from_request() {
        let t = task(TaskId::Isosurface);
        assert_eq!(
            expected_artifacts_from_request(&t.prompt_text),
            ["ml-iso-screenshot.png"]
        );
    }

    #[test]
    fn provider_failure_aborts_with_one_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let config = SessionConfig::new(dir.path()).unassisted();
        let t = task(TaskId::Isosurface);
        let request = UserRequest::new(&t.prompt_text, "s").unwrap();
        let llm = ScriptedProvider::from_results([Err("boom".to_string())]);
        let record = run_session(&request, &config, &llm, &SimulatedExecutor::for_task(&t)).unwrap();
        assert_eq!(record.final_status, FinalStatus::Aborted);
        assert_eq!(record.iterations.len(), 1);
        assert!(record.abort_cause.unwrap().contains("boom"));
        assert!(record.final_script.is_none());
        assert!(dir.path().join("s").join(SESSION_FILE).is_file());
    }

    #[test]
    fn empty_reply_is_repairable() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = SessionConfig::new(dir.path());
        config.refine = false;
        config.max_iterations = 2;
        let t = task(TaskId::Isosurface);
        let request = UserRequest::new(&t.prompt_text, "s").unwrap();
        let good = "from paraview.simple import *\nr = OpenDataFile('ml-100.vtk')\nc = Contour(Input=r)\nShow(c)\nSaveScreenshot('ml-iso-screenshot.png', ImageResolution=[16, 8])\n";
        let llm = ScriptedProvider::new(["```python\n```", good]);
        let record = run_session(&request, &config, &llm, &SimulatedExecutor::for_task(&t)).unwrap();
        assert_eq!(record.iterations[0].verdict, Verdict::Repairable);
        assert_eq!(record.iterations[0].errors[0].kind, "EmptyScript");
        assert_eq!(record.final_status, FinalStatus::Succeeded);
        assert_eq!(record.artifact_paths().len(), 1);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut config = SessionConfig::new("/tmp");
        config.max_iterations = 0;
        assert!(config.validate().is_err());
        let mut config = SessionConfig::new("/tmp");
        config.execution_timeout = Duration::ZERO;
        assert!(config.validate().is_err());
    }
}
