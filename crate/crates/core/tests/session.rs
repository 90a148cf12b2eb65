use std::fs;

use vizgen_core::canned::STREAMLINE_ASSISTED;
use vizgen_core::llm::ScriptedProvider;
use vizgen_core::session::{FinalStatus, SessionDoc, Verdict, SESSION_FILE};
use vizgen_core::simulate::{FailureMode, SimulatedExecutor};
use vizgen_core::tasks::{task, TaskId};
use vizgen_core::{run_session, SessionConfig, UserRequest};

fn request(id: &str) -> UserRequest {
    UserRequest::new(task(TaskId::Streamline).prompt_text, id).unwrap()
}

fn executor() -> SimulatedExecutor {
    SimulatedExecutor::for_task(&task(TaskId::Streamline))
}

fn config(dir: &std::path::Path) -> SessionConfig {
    let mut c = SessionConfig::new(dir);
    c.refine = false;
    c
}

#[test]
fn provider_failure_aborts_with_one_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let llm = ScriptedProvider::from_results([Err("connection reset".to_string())]);
    let rec = run_session(&request("s"), &config(tmp.path()), &llm, &executor()).unwrap();
    assert_eq!(rec.final_status, FinalStatus::Aborted);
    assert_eq!(rec.iterations.len(), 1);
    assert_eq!(rec.iterations[0].verdict, Verdict::Fatal);
    assert!(rec.abort_cause.as_deref().unwrap().contains("connection reset"));
    let doc = SessionDoc::load(rec.dir.join(SESSION_FILE)).unwrap();
    assert_eq!(doc.final_status, FinalStatus::Aborted);
}

#[test]
fn empty_reply_is_repaired() {
    let tmp = tempfile::tempdir().unwrap();
    let llm = ScriptedProvider::new(["```python\n```", STREAMLINE_ASSISTED]);
    let rec = run_session(&request("s"), &config(tmp.path()), &llm, &executor()).unwrap();
    assert_eq!(rec.final_status, FinalStatus::Succeeded);
    assert_eq!(rec.iterations.len(), 2);
    assert_eq!(rec.iterations[0].errors[0].kind, "EmptyScript");
    assert_eq!(rec.iterations[0].verdict, Verdict::Repairable);
}

#[test]
fn timeout_is_repairable_and_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path());
    c.max_iterations = 2;
    let exec = SimulatedExecutor::new(
        vizgen_core::simulate::ExpectationProfile::for_task(&task(TaskId::Streamline))
            .with_failure_mode(FailureMode::Timeout),
    );
    let llm = ScriptedProvider::new([STREAMLINE_ASSISTED, STREAMLINE_ASSISTED]);
    let rec = run_session(&request("s"), &c, &llm, &exec).unwrap();
    assert_eq!(rec.final_status, FinalStatus::Exhausted);
    for it in &rec.iterations {
        assert!(it.outcome.timed_out);
        assert_eq!(it.verdict, Verdict::Repairable);
        assert!(it.errors.iter().any(|e| e.kind == "TimeoutError"));
    }
}

#[test]
fn system_exit_is_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let script = format!("{STREAMLINE_ASSISTED}\nimport sys\nsys.exit(2)\n");
    let llm = ScriptedProvider::new([script.as_str(), STREAMLINE_ASSISTED]);
    let exec = vizgen_core::SubprocessExecutor::new("/bin/sh").arg("-c").arg(
        "cat >&2 <<'EOF'\nTraceback (most recent call last):\n  File \"script.py\", line 50, in <module>\n    sys.exit(2)\nSystemExit: 2\nEOF\nexit 2",
    );
    let rec = run_session(&request("s"), &config(tmp.path()), &llm, &exec).unwrap();
    assert_eq!(rec.iterations.len(), 1);
    assert_eq!(rec.iterations[0].verdict, Verdict::Fatal);
    assert_eq!(rec.final_status, FinalStatus::Aborted);
}

#[test]
fn success_writes_screenshot_and_record() {
    let tmp = tempfile::tempdir().unwrap();
    let llm = ScriptedProvider::new([STREAMLINE_ASSISTED]);
    let rec = run_session(&request("ok"), &config(tmp.path()), &llm, &executor()).unwrap();
    assert_eq!(rec.final_status, FinalStatus::Succeeded);
    assert_eq!(rec.expected_artifacts, vec!["stream-glyph-screenshot.png".to_string()]);
    let shot = rec.dir.join("iter1").join("stream-glyph-screenshot.png");
    let png = image::open(&shot).unwrap();
    assert_eq!((png.width(), png.height()), (1920, 1080));
    assert_eq!(rec.artifact_paths(), vec![shot]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rec.dir.join(SESSION_FILE)).unwrap()).unwrap();
    assert_eq!(json["final_status"], "succeeded");
    assert_eq!(json["iterations"][0]["verdict"], "success");
}
