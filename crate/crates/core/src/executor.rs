//! Running candidate scripts under an interpreter.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::ExtractionPath;

/// Per-stream capture limit. Output past it is drained and dropped.
pub const STREAM_CAP: usize = 16 * 1024 * 1024;
pub const TRUNCATION_NOTE: &str = "\n[output truncated at 16 MiB]\n";
pub const SCRIPT_FILE: &str = "script.py";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateScript {
    pub body: String,
    pub iteration: u32,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionPath>,
}

impl CandidateScript {
    pub fn new(body: impl Into<String>, iteration: u32) -> Self {
        let body = body.into();
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        Self {
            body,
            iteration,
            digest,
            extraction: None,
        }
    }

    pub fn with_extraction(mut self, path: ExtractionPath) -> Self {
        self.extraction = Some(path);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducedFile {
    /// Relative to the working directory, `/`-separated.
    pub path: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    /// `None` when the process timed out, was killed by a signal, or never ran.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_s: f64,
    pub produced_files: Vec<ProducedFile>,
    pub timed_out: bool,
    #[serde(default)]
    pub stdout_truncated: bool,
    #[serde(default)]
    pub stderr_truncated: bool,
}

impl ExecutionOutcome {
    /// Placeholder for an iteration whose script was never run.
    pub fn not_run() -> Self {
        Self {
            exit_code: None,
            stdout: String::new(),
            stderr: String::new(),
            duration_s: 0.0,
            produced_files: Vec::new(),
            timed_out: false,
            stdout_truncated: false,
            stderr_truncated: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("interpreter not found or not executable: {0}")]
    InterpreterMissing(PathBuf),
    #[error("cannot prepare working directory {path}: {source}")]
    Workdir { path: PathBuf, source: io::Error },
    #[error("failed to run interpreter: {0}")]
    Spawn(io::Error),
}

/// Something that can run a script in a working directory.
pub trait ScriptExecutor: Send + Sync {
    fn execute(
        &self,
        script: &CandidateScript,
        workdir: &Path,
        timeout: Duration,
    ) -> Result<ExecutionOutcome, ExecError>;
}

impl<E: ScriptExecutor + ?Sized> ScriptExecutor for std::sync::Arc<E> {
    fn execute(
        &self,
        script: &CandidateScript,
        workdir: &Path,
        timeout: Duration,
    ) -> Result<ExecutionOutcome, ExecError> {
        (**self).execute(script, workdir, timeout)
    }
}

/// Runs `<interpreter> [args...] script.py` with `cwd = workdir`.
#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    pub interpreter: PathBuf,
    pub args: Vec<OsString>,
    pub env: Vec<(OsString, OsString)>,
}

impl SubprocessExecutor {
    pub fn new(interpreter: impl Into<PathBuf>) -> Self {
        Self {
            interpreter: interpreter.into(),
            args: Vec::new(),
            env: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<OsString>) -> Self {
        self.args.push(arg.into());
        self
    }

    pub fn env(mut self, key: impl Into<OsString>, value: impl Into<OsString>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }
}

impl ScriptExecutor for SubprocessExecutor {
    fn execute(
        &self,
        script: &CandidateScript,
        workdir: &Path,
        timeout: Duration,
    ) -> Result<ExecutionOutcome, ExecError> {
        execute(script, workdir, &self.interpreter, &self.args, &self.env, timeout)
    }
}

/// Resolves an interpreter path, searching `PATH` for bare names.
pub fn resolve_interpreter(interpreter: &Path) -> Option<PathBuf> {
    let is_exec = |p: &Path| {
        let Ok(meta) = fs::metadata(p) else {
            return false;
        };
        if !meta.is_file() {
            return false;
        }
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            meta.permissions().mode() & 0o111 != 0
        }
        #[cfg(not(unix))]
        {
            true
        }
    };
    if interpreter.components().count() > 1 || interpreter.is_absolute() {
        return is_exec(interpreter).then(|| interpreter.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(interpreter))
        .find(|p| is_exec(p))
}

type Listing = BTreeMap<String, (u64, Option<SystemTime>)>;

fn list_files(root: &Path) -> io::Result<Listing> {
    let mut out = Listing::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let meta = entry.metadata()?;
            let path = entry.path();
            if meta.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(key, (meta.len(), meta.modified().ok()));
            }
        }
    }
    Ok(out)
}

struct Captured {
    text: String,
    truncated: bool,
}

fn capture<R: Read + Send + 'static>(mut reader: R) -> thread::JoinHandle<Captured> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 64 * 1024];
        let mut truncated = false;
        loop {
            match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = STREAM_CAP - kept.len();
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str(TRUNCATION_NOTE);
        }
        Captured { text, truncated }
    })
}

#[cfg(unix)]
fn kill_tree(child: &mut std::process::Child) {
    // The child leads its own process group; signal the whole group.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

/// Writes the script to `workdir/script.py` and runs the interpreter on it.
///
/// Both streams are captured up to [`STREAM_CAP`] bytes each. On timeout the
/// interpreter's whole process group is killed. Files created or modified in
/// `workdir` during the run are reported in `produced_files`.
pub fn execute(
    script: &CandidateScript,
    workdir: &Path,
    interpreter: &Path,
    args: &[OsString],
    env: &[(OsString, OsString)],
    timeout: Duration,
) -> Result<ExecutionOutcome, ExecError> {
    let program =
        resolve_interpreter(interpreter).ok_or_else(|| ExecError::InterpreterMissing(interpreter.to_path_buf()))?;
    let workdir_err = |source| ExecError::Workdir {
        path: workdir.to_path_buf(),
        source,
    };
    fs::create_dir_all(workdir).map_err(workdir_err)?;
    fs::write(workdir.join(SCRIPT_FILE), &script.body).map_err(workdir_err)?;
    let before = list_files(workdir).map_err(workdir_err)?;

    let mut cmd = Command::new(&program);
    cmd.args(args)
        .arg(SCRIPT_FILE)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(ExecError::Spawn)?;
    let out = capture(child.stdout.take().expect("piped stdout"));
    let err = capture(child.stderr.take().expect("piped stderr"));

    let deadline = started + timeout;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait().map_err(ExecError::Spawn)? {
            Some(status) => break Some(status),
            None if Instant::now() >= deadline => {
                timed_out = true;
                kill_tree(&mut child);
                let _ = child.wait();
                break None;
            }
            None => thread::sleep(Duration::from_millis(5)),
        }
    };
    let stdout = out.join().expect("stdout reader");
    let stderr = err.join().expect("stderr reader");
    let duration_s = started.elapsed().as_secs_f64();

    let after = list_files(workdir).map_err(workdir_err)?;
    let produced_files = after
        .into_iter()
        .filter(|(path, meta)| before.get(path) != Some(meta))
        .map(|(path, (size, _))| ProducedFile { path, size })
        .collect();

    Ok(ExecutionOutcome {
        exit_code: status.and_then(|s| s.code()),
        stdout: stdout.text,
        stderr: stderr.text,
        duration_s,
        produced_files,
        timed_out,
        stdout_truncated: stdout.truncated,
        stderr_truncated: stderr.truncated,
    })
}

fn normalize(path: &str) -> String {
    Path::new(path)
        .components()
        .filter(|c| !matches!(c, Component::CurDir))
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Expected artifacts that were not produced. Zero-byte files count as
/// missing.
pub fn check_artifacts(outcome: &ExecutionOutcome, expected: &[String]) -> Vec<String> {
    expected
        .iter()
        .filter(|want| {
            let want = normalize(want);
            !outcome
                .produced_files
                .iter()
                .any(|f| normalize(&f.path) == want && f.size > 0)
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(files: &[(&str, u64)]) -> ExecutionOutcome {
        ExecutionOutcome {
            produced_files: files
                .iter()
                .map(|(p, s)| ProducedFile {
                    path: p.to_string(),
                    size: *s,
                })
                .collect(),
            exit_code: Some(0),
            ..ExecutionOutcome::not_run()
        }
    }

    #[test]
    fn artifacts_present() {
        let o = outcome(&[("a.png", 10), ("log.txt", 3)]);
        assert!(check_artifacts(&o, &["a.png".into()]).is_empty());
        assert!(check_artifacts(&o, &["./a.png".into()]).is_empty());
    }

    #[test]
    fn artifacts_absent() {
        assert_eq!(check_artifacts(&outcome(&[]), &["a.png".into()]), ["a.png"]);
    }

    #[test]
    fn zero_byte_artifact_is_missing() {
        assert_eq!(check_artifacts(&outcome(&[("a.png", 0)]), &["a.png".into()]), ["a.png"]);
    }

    #[test]
    fn script_digest_is_content_hash() {
        let a = CandidateScript::new("Show()", 1);
        let b = CandidateScript::new("Show()", 2);
        assert_eq!(a.digest, b.digest);
        assert_ne!(a.digest, CandidateScript::new("Show( )", 1).digest);
        assert_eq!(a.digest.len(), 64);
    }

    #[test]
    fn missing_interpreter_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = execute(
            &CandidateScript::new("x", 1),
            dir.path(),
            Path::new("/definitely/not/pvpython"),
            &[],
            &[],
            Duration::from_secs(1),
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::InterpreterMissing(_)));
        assert!(resolve_interpreter(Path::new("no-such-interpreter-xyz")).is_none());
        assert!(resolve_interpreter(Path::new("sh")).is_some());
    }
}
