//! In-process stand-in for pvpython.
//!
//! The script is never run. Its call sequence and attribute assignments are
//! checked against an [`ExpectationProfile`], and the simulator answers the
//! way the real interpreter would for that class of script: a traceback on
//! stderr, a missing or empty screenshot, a timeout, or a PNG at the requested
//! resolution. The same profile JSON drives the external mock interpreter,
//! which reads its path from [`PROFILE_ENV`].

use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use image::{ImageBuffer, Rgb};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::eval::{extract_attribute_assignments, extract_call_sequence};
use crate::executor::{CandidateScript, ExecError, ExecutionOutcome, ProducedFile, ScriptExecutor, SCRIPT_FILE};
use crate::tasks::{TaskId, TaskSpec};

/// Environment variable the external mock interpreter reads its profile from.
pub const PROFILE_ENV: &str = "MOCK_PVPYTHON_PROFILE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    None,
    AttributeError,
    MissingScreenshot,
    Timeout,
}

/// An attribute the real proxy class does not have.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidAttribute {
    pub class: String,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationProfile {
    pub task_id: String,
    pub required_calls: Vec<String>,
    pub screenshot_name: String,
    pub resolution: (u32, u32),
    pub failure_mode: FailureMode,
    #[serde(default)]
    pub invalid_attributes: Vec<InvalidAttribute>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("cannot read profile: {0}")]
    Io(#[from] io::Error),
    #[error("invalid profile JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile has no required calls")]
    NoRequiredCalls,
}

impl ExpectationProfile {
    /// Profile for one of the shipped tasks, success mode.
    pub fn for_task(task: &TaskSpec) -> Self {
        let calls: &[&str] = match task.id {
            TaskId::Isosurface => &["Contour", "Show", "SaveScreenshot"],
            TaskId::SliceContour => &["Slice", "Contour", "Show", "SaveScreenshot"],
            TaskId::VolumeRender => &["Show", "SetRepresentationType", "SaveScreenshot"],
            TaskId::Delaunay => &["Delaunay3D", "Clip", "Show", "SetRepresentationType", "SaveScreenshot"],
            TaskId::Streamline => &["StreamTracer", "Tube", "Glyph", "Show", "SaveScreenshot"],
        };
        let invalid: &[(&str, &str)] = match task.id {
            TaskId::Isosurface | TaskId::VolumeRender => &[],
            TaskId::SliceContour => &[("RenderView", "ViewUp")],
            TaskId::Delaunay => &[("Clip", "InsideOut")],
            TaskId::Streamline => &[("Glyph", "Scalars"), ("Glyph", "Vectors")],
        };
        Self {
            task_id: task.id.as_str().to_string(),
            required_calls: calls.iter().map(|s| s.to_string()).collect(),
            screenshot_name: task.expected_screenshot.clone(),
            resolution: task.resolution,
            failure_mode: FailureMode::None,
            invalid_attributes: invalid
                .iter()
                .map(|(c, a)| InvalidAttribute {
                    class: c.to_string(),
                    attribute: a.to_string(),
                })
                .collect(),
        }
    }

    pub fn with_failure_mode(mut self, mode: FailureMode) -> Self {
        self.failure_mode = mode;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let profile: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if profile.required_calls.is_empty() {
            return Err(ProfileError::NoRequiredCalls);
        }
        Ok(profile)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// What the simulated interpreter did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Simulation {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    /// Files to create, relative to the working directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub timed_out: bool,
}

const SERVERMANAGER: &str = "/opt/paraview/lib/python3.10/site-packages/paraview/servermanager.py";

/// Calls whose result is a render view.
const VIEW_FACTORIES: &[&str] = &[
    "CreateView",
    "CreateRenderView",
    "GetActiveView",
    "GetActiveViewOrCreate",
    "GetRenderView",
];

fn save_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"SaveScreenshot\(\s*(?:filename\s*=\s*)?['"]([^'"]+)['"]"#).unwrap())
}

fn resolution_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"ImageResolution\s*=\s*\[\s*(\d+)\s*,\s*(\d+)\s*\]").unwrap())
}

fn imports_simple(script: &str) -> bool {
    script.lines().any(|l| {
        let l = l.trim_start();
        l.starts_with("from paraview.simple import") || l.starts_with("import paraview.simple")
    })
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

fn source_line(script: &str, line: usize) -> Option<&str> {
    script
        .lines()
        .nth(line.checked_sub(1)?)
        .map(str::trim)
        .filter(|l| !l.is_empty())
}

fn frame(out: &mut String, file: &str, line: usize, func: &str, context: Option<&str>) {
    out.push_str(&format!("  File \"{file}\", line {line}, in {func}\n"));
    if let Some(ctx) = context {
        out.push_str(&format!("    {ctx}\n"));
    }
}

fn name_error(script: &str, script_path: &str, name: &str) -> String {
    let needle = format!("{name}(");
    let line = script
        .lines()
        .position(|l| l.contains(&needle) && !l.trim_start().starts_with('#'))
        .map_or(1, |i| i + 1);
    let mut out = String::from("Traceback (most recent call last):\n");
    frame(&mut out, script_path, line, "<module>", source_line(script, line));
    out.push_str(&format!("NameError: name '{name}' is not defined\n"));
    out
}

fn attribute_error(script: &str, script_path: &str, line: usize, class: &str, attr: &str) -> String {
    let mut out = String::from("Traceback (most recent call last):\n");
    frame(&mut out, script_path, line, "<module>", source_line(script, line));
    frame(
        &mut out,
        SERVERMANAGER,
        526,
        "__setattr__",
        Some("_bc.setattr(self, name, value)"),
    );
    frame(
        &mut out,
        SERVERMANAGER,
        2910,
        "setattr",
        Some("raise AttributeError(\"type object '%s' has no attribute '%s'\" % (clsname, name))"),
    );
    out.push_str(&format!(
        "AttributeError: type object '{class}' has no attribute '{attr}'\n"
    ));
    out
}

/// Class name a variable bound to `call(...)` would have.
fn proxy_class(call: &str) -> &str {
    if VIEW_FACTORIES.contains(&call) {
        "RenderView"
    } else {
        call
    }
}

/// Renders a deterministic, clearly non-uniform placeholder image.
pub fn placeholder_png(width: u32, height: u32, white_background: bool, seed: &str) -> Vec<u8> {
    let bg = if white_background {
        [255u8, 255, 255]
    } else {
        // ParaView's default dark-gray palette.
        [82, 87, 110]
    };
    let hue = seed
        .bytes()
        .fold(0u32, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u32));
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let radius = width.min(height) as f64 / 3.0;
    let img = ImageBuffer::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let d = (dx * dx + dy * dy).sqrt();
        if d > radius {
            return Rgb(bg);
        }
        let t = d / radius;
        let r = (40.0 + 200.0 * t) as u8;
        let g = ((hue % 160) as f64 + 60.0 * (1.0 - t)) as u8;
        let b = (220.0 - 180.0 * t) as u8;
        Rgb([r, g, b])
    });
    let mut buf = io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("PNG encoding to memory");
    buf.into_inner()
}

/// Decides what running `script` would do under `profile`.
pub fn simulate(script: &str, profile: &ExpectationProfile, script_path: &str) -> Simulation {
    let mut sim = Simulation {
        exit_code: Some(0),
        stdout: String::new(),
        stderr: String::new(),
        files: Vec::new(),
        timed_out: false,
    };
    if profile.failure_mode == FailureMode::Timeout {
        sim.exit_code = None;
        sim.timed_out = true;
        return sim;
    }

    let calls = extract_call_sequence(script);
    if !imports_simple(script) {
        let name = calls
            .first()
            .or(profile.required_calls.first())
            .map_or("Show", String::as_str);
        sim.stderr = name_error(script, script_path, name);
        sim.exit_code = Some(1);
        return sim;
    }

    let assignments = extract_attribute_assignments(script);
    let invalid = assignments.iter().find_map(|a| {
        let class = proxy_class(a.bound_to.as_deref()?);
        let attr = a.path.first()?;
        profile
            .invalid_attributes
            .iter()
            .find(|bad| bad.class == class && &bad.attribute == attr)
            .map(|bad| (a.line, bad))
    });
    let forced = (profile.failure_mode == FailureMode::AttributeError).then(|| {
        let fallback = InvalidAttribute {
            class: "Proxy".into(),
            attribute: "Unknown".into(),
        };
        let bad = profile.invalid_attributes.first().cloned().unwrap_or(fallback);
        let line = assignments.first().map_or(1, |a| a.line);
        (line, bad)
    });
    if let Some((line, bad)) = invalid.map(|(l, b)| (l, b.clone())).or(forced) {
        sim.stderr = attribute_error(script, script_path, line, &bad.class, &bad.attribute);
        sim.exit_code = Some(1);
        return sim;
    }

    if profile.failure_mode == FailureMode::MissingScreenshot || !calls.iter().any(|c| c == "SaveScreenshot") {
        return sim;
    }
    let name = save_name_re()
        .captures(script)
        .map_or_else(|| profile.screenshot_name.clone(), |c| c[1].to_string());
    if !is_subsequence(&profile.required_calls, &calls) {
        // The pipeline is incomplete: the screenshot is written, but nothing
        // was rendered into it.
        sim.files.push((name, Vec::new()));
        return sim;
    }
    let (w, h) = resolution_re()
        .captures(script)
        .and_then(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?)))
        .unwrap_or(profile.resolution);
    let white = script.contains("WhiteBackground");
    sim.files.push((name, placeholder_png(w, h, white, &profile.task_id)));
    sim
}

/// Executor that simulates pvpython in-process.
#[derive(Debug, Clone)]
pub struct SimulatedExecutor {
    pub profile: ExpectationProfile,
}

impl SimulatedExecutor {
    pub fn new(profile: ExpectationProfile) -> Self {
        Self { profile }
    }

    pub fn for_task(task: &TaskSpec) -> Self {
        Self::new(ExpectationProfile::for_task(task))
    }
}

impl ScriptExecutor for SimulatedExecutor {
    fn execute(
        &self,
        script: &CandidateScript,
        workdir: &Path,
        timeout: Duration,
    ) -> Result<ExecutionOutcome, ExecError> {
        let workdir_err = |source| ExecError::Workdir {
            path: workdir.to_path_buf(),
            source,
        };
        fs::create_dir_all(workdir).map_err(workdir_err)?;
        fs::write(workdir.join(SCRIPT_FILE), &script.body).map_err(workdir_err)?;
        let sim = simulate(&script.body, &self.profile, SCRIPT_FILE);
        let mut produced_files = Vec::new();
        for (name, bytes) in &sim.files {
            let path = workdir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(workdir_err)?;
            }
            fs::write(&path, bytes).map_err(workdir_err)?;
            produced_files.push(ProducedFile {
                path: name.clone(),
                size: bytes.len() as u64,
            });
        }
        Ok(ExecutionOutcome {
            exit_code: sim.exit_code,
            stdout: sim.stdout,
            stderr: sim.stderr,
            duration_s: if sim.timed_out { timeout.as_secs_f64() } else { 0.0 },
            produced_files,
            timed_out: sim.timed_out,
            stdout_truncated: false,
            stderr_truncated: false,
        })
    }
}
