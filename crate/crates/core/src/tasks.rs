//! The five benchmark visualization tasks and the benchmark runner.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::executor::ScriptExecutor;
use crate::llm::LlmProvider;
use crate::prompt::UserRequest;
use crate::session::{run_session, FinalStatus, SessionConfig, SessionRecord, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Isosurface,
    SliceContour,
    VolumeRender,
    Delaunay,
    Streamline,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Isosurface,
        TaskId::SliceContour,
        TaskId::VolumeRender,
        TaskId::Delaunay,
        TaskId::Streamline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Isosurface => "isosurface",
            TaskId::SliceContour => "slice_contour",
            TaskId::VolumeRender => "volume_render",
            TaskId::Delaunay => "delaunay",
            TaskId::Streamline => "streamline",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TaskId::Isosurface => "Isosurfacing",
            TaskId::SliceContour => "Slicing then contouring",
            TaskId::VolumeRender => "Volume rendering",
            TaskId::Delaunay => "Delaunay triangulation",
            TaskId::Streamline => "Streamline tracing",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task `{0}`")]
pub struct UnknownTask(pub String);

impl FromStr for TaskId {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub prompt_text: String,
    /// Dataset files the script reads. They are not shipped.
    pub input_files: Vec<String>,
    pub expected_screenshot: String,
    pub resolution: (u32, u32),
}

const ISOSURFACE: &str = "Please generate a ParaView Python script for the following operations.
Read in the file named ml-100.vtk.
Generate an isosurface of the variable var0 at value 0.5.
Save a screenshot of the result in the filename ml-iso-screenshot.png.
The rendered view and saved screenshot should be 1920 x 1080 pixels.";

const SLICE_CONTOUR: &str = "Please generate a ParaView Python script for the following operations.
Read in the file named `ml-100.vtk'.
Slice the volume in a plane parallel to the y-z plane at x=0.
Take a contour through the slice at the value 0.5.
Color the contour red.
Rotate the view to look at the +x direction.
Save a screenshot of the result in the filename `ml-slice-iso-screenshot.png'.
The rendered view and saved screenshot should be 1920 x 1080 pixels.";

const VOLUME_RENDER: &str = "Please generate a ParaView Python script for the following operations.
Read in the file named `ml-100.vtk'.
Generate a volume rendering using the default transfer function.
Rotate the view to an isometric direction.
Save a screenshot of the result in the filename `ml-dvr-screenshot.png'.
The rendered view and saved screenshot should be 1920 x 1080 pixels.";

const DELAUNAY: &str = "Please generate a ParaView Python script for the following operations.
Read in the file named `can_points.ex2'.
Generate a 3d Delaunay triangulation of the dataset.
Clip the data with a y-z plane at x=0, keeping the -x half of the data and removing the +x half.
Render the image as a wireframe.
View the result in an isometric view.
Save a screenshot of the result in the filename `points-surf-clip-screenshot.png'.
The rendered view and saved screenshot should be 1920 x 1080 pixels.";

const STREAMLINE: &str = "Please generate a ParaView Python script for the following operations.
Read in the file named `disk.ex2'.
Trace streamlines of the V data array seeded from a default point cloud.
Render the streamlines with tubes.
Add cone glyphs to the streamlines.
Color the streamlines and glyphs by the Temp data array.
View the result in the +X direction.
Save a screenshot of the result in the filename `stream-glyph-screenshot.png'.
The rendered view and saved screenshot should be 1920 x 1080 pixels.";

pub fn task(id: TaskId) -> TaskSpec {
    let (prompt, input, screenshot) = match id {
        TaskId::Isosurface => (ISOSURFACE, "ml-100.vtk", "ml-iso-screenshot.png"),
        TaskId::SliceContour => (SLICE_CONTOUR, "ml-100.vtk", "ml-slice-iso-screenshot.png"),
        TaskId::VolumeRender => (VOLUME_RENDER, "ml-100.vtk", "ml-dvr-screenshot.png"),
        TaskId::Delaunay => (DELAUNAY, "can_points.ex2", "points-surf-clip-screenshot.png"),
        TaskId::Streamline => (STREAMLINE, "disk.ex2", "stream-glyph-screenshot.png"),
    };
    TaskSpec {
        id,
        prompt_text: prompt.to_string(),
        input_files: vec![input.to_string()],
        expected_screenshot: screenshot.to_string(),
        resolution: (1920, 1080),
    }
}

pub fn list_tasks() -> Vec<TaskSpec> {
    TaskId::ALL.into_iter().map(task).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Refinement, snippets and the repair loop.
    Assisted,
    /// One generation from the raw request, no repair.
    Unassisted,
}

/// A provider under test and how it is driven.
#[derive(Clone)]
pub struct Entrant {
    pub label: String,
    pub provider: Arc<dyn LlmProvider>,
    pub mode: Mode,
}

impl fmt::Debug for Entrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Entrant")
            .field("label", &self.label)
            .field("provider", &self.provider.kind())
            .field("mode", &self.mode)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Sessions run concurrently.
    pub jobs: usize,
    /// Sessions per cell. A cell passes a criterion only if every trial does.
    pub trials: u32,
    /// Directory holding the task datasets, copied into each iteration
    /// directory when present.
    pub data_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            jobs: 2,
            trials: 1,
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub session_id: String,
    pub error_free: bool,
    pub screenshot_produced: bool,
    pub iterations_used: u32,
    pub final_status: FinalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub task_id: TaskId,
    pub provider_label: String,
    pub error_free: bool,
    pub screenshot_produced: bool,
    pub iterations_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    pub trials: Vec<TrialResult>,
}

impl BenchmarkCell {
    pub fn passed(&self) -> bool {
        self.error_free && self.screenshot_produced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMatrix {
    pub tasks: Vec<TaskId>,
    pub providers: Vec<String>,
    /// Row-major: all providers for the first task, then the next task.
    pub cells: Vec<BenchmarkCell>,
}

/// Summarizes one finished session for the matrix.
///
/// `error_free` means the last script ran without interpreter errors or a
/// timeout; a missing screenshot alone does not count as an error.
pub fn trial_result(record: &SessionRecord) -> TrialResult {
    let last = record.iterations.last();
    let error_free = last.is_some_and(|it| {
        it.verdict != Verdict::Fatal
            && !it.outcome.timed_out
            && !it.script.body.trim().is_empty()
            && it.interpreter_errors().next().is_none()
    });
    let screenshot_produced =
        error_free && last.is_some_and(|it| it.missing_artifacts.is_empty() && it.outcome.exit_code == Some(0));
    let cause = if error_free && screenshot_produced {
        None
    } else {
        record
            .abort_cause
            .clone()
            .or_else(|| last.and_then(|it| it.errors.first()).map(|e| e.message.clone()))
    };
    TrialResult {
        session_id: record.request.session_id.clone(),
        error_free,
        screenshot_produced,
        iterations_used: record.iterations.len() as u32,
        final_status: record.final_status,
        cause,
    }
}

fn session_id(label: &str, task: TaskId, trial: u32, trials: u32) -> String {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if trials > 1 {
        format!("{safe}-{task}-t{trial}")
    } else {
        format!("{safe}-{task}")
    }
}

/// Builds the executor for a task.
pub type ExecutorFactory<'a> = dyn Fn(&TaskSpec) -> Box<dyn ScriptExecutor> + Sync + 'a;

/// Runs every task against every entrant and collects the matrix.
///
/// Sessions run on up to `options.jobs` threads; the result order depends
/// only on the inputs. Each session writes under
/// `base.workdir/<label>-<task>`.
pub fn run_benchmark(
    tasks: &[TaskSpec],
    entrants: &[Entrant],
    base: &SessionConfig,
    executors: &ExecutorFactory<'_>,
    options: &BenchOptions,
) -> BenchmarkMatrix {
    let trials = options.trials.max(1);
    let mut jobs = Vec::new();
    for task in tasks {
        for entrant in entrants {
            for trial in 1..=trials {
                jobs.push((task, entrant, trial));
            }
        }
    }
    let results: Mutex<Vec<Option<TrialResult>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = options.jobs.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(task, entrant, trial)) = jobs.get(i) else {
                    break;
                };
                let result = run_cell_trial(task, entrant, trial, trials, base, executors, options);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });
    let results: Vec<TrialResult> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let cells = results
        .chunks(trials as usize)
        .zip(jobs.iter().step_by(trials as usize))
        .map(|(trial_results, (task, entrant, _))| {
            let error_free = trial_results.iter().all(|t| t.error_free);
            let screenshot_produced = trial_results.iter().all(|t| t.screenshot_produced);
            BenchmarkCell {
                task_id: task.id,
                provider_label: entrant.label.clone(),
                error_free,
                screenshot_produced,
                iterations_used: trial_results.iter().map(|t| t.iterations_used).max().unwrap_or(0),
                cause: trial_results.iter().find_map(|t| t.cause.clone()),
                trials: trial_results.to_vec(),
            }
        })
        .collect();
    BenchmarkMatrix {
        tasks: tasks.iter().map(|t| t.id).collect(),
        providers: entrants.iter().map(|e| e.label.clone()).collect(),
        cells,
    }
}

fn run_cell_trial(
    task: &TaskSpec,
    entrant: &Entrant,
    trial: u32,
    trials: u32,
    base: &SessionConfig,
    executors: &ExecutorFactory<'_>,
    options: &BenchOptions,
) -> TrialResult {
    let id = session_id(&entrant.label, task.id, trial, trials);
    let mut config = base.clone();
    if entrant.mode == Mode::Unassisted {
        config = config.unassisted();
    }
    config.expected_artifacts = vec![task.expected_screenshot.clone()];
    if let Some(dir) = &options.data_dir {
        config
            .input_files
            .extend(task.input_files.iter().map(|f| dir.join(f)).filter(|p| p.is_file()));
    }
    let failed = |cause: String| TrialResult {
        session_id: id.clone(),
        error_free: false,
        screenshot_produced: false,
        iterations_used: 0,
        final_status: FinalStatus::Aborted,
        cause: Some(cause),
    };
    let request = match UserRequest::new(task.prompt_text.clone(), id.clone()) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    let executor = executors(task);
    match run_session(&request, &config, entrant.provider.as_ref(), executor.as_ref()) {
        Ok(record) => trial_result(&record),
        Err(e) => failed(e.to_string()),
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

impl BenchmarkMatrix {
    pub fn cell(&self, task: TaskId, provider: &str) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.task_id == task && c.provider_label == provider)
    }

    pub fn column(&self, provider: &str) -> Vec<&BenchmarkCell> {
        self.cells.iter().filter(|c| c.provider_label == provider).collect()
    }

    /// Every task error-free with a screenshot for this provider.
    pub fn column_all_green(&self, provider: &str) -> bool {
        let column = self.column(provider);
        !column.is_empty() && column.iter().all(|c| c.passed())
    }

    pub fn is_complete(&self) -> bool {
        self.cells.len() == self.tasks.len() * self.providers.len()
            && self
                .tasks
                .iter()
                .all(|t| self.providers.iter().all(|p| self.cell(*t, p).is_some()))
    }

    /// Table with an Error and an SS column per provider. "Error: No" means
    /// the final script ran without errors.
    pub fn render_text(&self) -> String {
        let first = self
            .tasks
            .iter()
            .map(|t| t.title().len())
            .chain(["Task".len()])
            .max()
            .unwrap_or(4);
        let widths: Vec<usize> = self.providers.iter().map(|p| p.len().max("Error  SS ".len())).collect();
        let mut out = String::new();
        let mut line = format!("{:first$}", "Task");
        for (p, w) in self.providers.iter().zip(&widths) {
            line.push_str(&format!(" | {p:w$}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
        let mut line = format!("{:first$}", "");
        for w in &widths {
            line.push_str(&format!(" | {:w$}", "Error  SS"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
        let mut rule = "-".repeat(first);
        for w in &widths {
            rule.push_str(&format!("-+-{}", "-".repeat(*w)));
        }
        out.push_str(&rule);
        out.push('\n');
        for task in &self.tasks {
            let mut line = format!("{:first$}", task.title());
            for (p, w) in self.providers.iter().zip(&widths) {
                let cell = match self.cell(*task, p) {
                    Some(c) => format!("{:5}  {}", yes_no(!c.error_free), yes_no(c.screenshot_produced)),
                    None => "-".to_string(),
                };
                line.push_str(&format!(" | {cell:w$}"));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    const GOLDEN: &[(TaskId, &str, &str)] = &[
        (
            TaskId::Isosurface,
            include_str!("../fixtures/prompts/isosurface.txt"),
            "c3e7e14516792aa6dd296385d55a09163040c5a14c0f7e9cbc1745221a9770c6",
        ),
        (
            TaskId::SliceContour,
            include_str!("../fixtures/prompts/slice_contour.txt"),
            "2c3cdc3e7d3fea7b0a54a5002fb813ad242ee76a157912655987646f90cd3bd9",
        ),
        (
            TaskId::VolumeRender,
            include_str!("../fixtures/prompts/volume_render.txt"),
            "d9ff344482bc11f8dd3094702a66bcc2e2bf85679b11017085023cea321a8b5b",
        ),
        (
            TaskId::Delaunay,
            include_str!("../fixtures/prompts/delaunay.txt"),
            "e446119167f941f4746bd4b8981420c1b3a6e0ec37100d8754a039cbf81f96bb",
        ),
        (
            TaskId::Streamline,
            include_str!("../fixtures/prompts/streamline.txt"),
            "a6c8e66e7486f158e4c1852f39ef2cf9e93ff7e88e4b8319cf0899aa3da56b4c",
        ),
    ];

    #[test]
    fn prompts_match_golden_files_byte_for_byte() {
        for (id, golden, hash) in GOLDEN {
            let spec = task(*id);
            assert_eq!(spec.prompt_text, *golden, "{id}");
            assert_eq!(hex::encode(Sha256::digest(spec.prompt_text.as_bytes())), *hash, "{id}");
        }
    }

    #[test]
    fn registry_contents() {
        let tasks = list_tasks();
        assert_eq!(tasks.len(), 5);
        let iso = &tasks[0];
        assert!(iso.prompt_text.contains("isosurface of the variable var0 at value 0.5"));
        assert_eq!(iso.expected_screenshot, "ml-iso-screenshot.png");
        assert_eq!(iso.input_files, ["ml-100.vtk"]);
        let stream = task(TaskId::Streamline);
        assert_eq!(stream.input_files, ["disk.ex2"]);
        assert_eq!(stream.expected_screenshot, "stream-glyph-screenshot.png");
        for t in &tasks {
            assert_eq!(t.resolution, (1920, 1080));
            assert!(t.prompt_text.contains(&t.expected_screenshot));
            assert!(t.prompt_text.contains(&t.input_files[0]));
        }
    }

    #[test]
    fn task_ids_parse() {
        for id in TaskId::ALL {
            assert_eq!(id.as_str().parse::<TaskId>().unwrap(), id);
        }
        assert!("iso".parse::<TaskId>().is_err());
    }

    #[test]
    fn session_ids_are_path_safe() {
        assert_eq!(session_id("gpt 4/x", TaskId::Delaunay, 1, 1), "gpt_4_x-delaunay");
        assert_eq!(session_id("a", TaskId::Delaunay, 2, 3), "a-delaunay-t2");
    }
}
