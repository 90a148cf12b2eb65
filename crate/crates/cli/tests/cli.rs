use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vizgen_core::canned::{STREAMLINE_ASSISTED, STREAMLINE_UNASSISTED};
use vizgen_core::simulate::placeholder_png;

fn vizgen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vizgen"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CHATVIS_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// UPDATE_GOLDEN=1 rewrites the files instead of comparing.
#[test]
fn help_text_matches_golden_files() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["", "run", "bench", "eval", "fixtures"] {
        let mut args = vec![];
        if !sub.is_empty() {
            args.push(sub);
        }
        args.push("--help");
        let out = vizgen(&args, tmp.path());
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let name = if sub.is_empty() { "vizgen" } else { sub };
        let path = golden_dir().join(format!("{name}.help.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &out.stdout).unwrap();
            continue;
        }
        let want = fs::read_to_string(&path).unwrap();
        assert_eq!(stdout(&out), want, "{name} --help drifted");
    }
}

#[test]
fn usage_errors_exit_64() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["run"],
        &["run", "--prompt", "x", "--provider", "scripted"],
        &["bench", "--columns", "foo"],
        &["frobnicate"],
        &["eval", "--candidate", "a.png"],
    ];
    for args in cases {
        let out = vizgen(args, tmp.path());
        assert_eq!(
            out.status.code(),
            Some(64),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn write_responses(dir: &Path, replies: &[&str]) -> PathBuf {
    let path = dir.join("responses.json");
    fs::write(&path, serde_json::to_string(replies).unwrap()).unwrap();
    path
}

#[test]
fn run_repairs_with_the_simulator() {
    let tmp = tempfile::tempdir().unwrap();
    let responses = write_responses(tmp.path(), &[STREAMLINE_UNASSISTED, STREAMLINE_ASSISTED]);
    let prompt = core_fixtures().join("prompts/streamline.txt");
    let out = vizgen(
        &[
            "run",
            "--prompt-file",
            prompt.to_str().unwrap(),
            "--provider",
            "scripted",
            "--responses",
            responses.to_str().unwrap(),
            "--no-refine",
            "--simulate-task",
            "streamline",
            "--session-id",
            "s1",
        ],
        tmp.path(),
    );
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.starts_with("status: succeeded after 2 iteration(s)"), "{text}");
    assert!(text.contains("artifact: "), "{text}");
    assert!(tmp
        .path()
        .join("vizgen-out/s1/iter2/stream-glyph-screenshot.png")
        .is_file());
    assert!(tmp.path().join("vizgen-out/s1/session.json").is_file());
}

#[test]
fn run_exhausts_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let responses = write_responses(tmp.path(), &[STREAMLINE_UNASSISTED, STREAMLINE_UNASSISTED]);
    let prompt = core_fixtures().join("prompts/streamline.txt");
    let out = vizgen(
        &[
            "run",
            "--prompt-file",
            prompt.to_str().unwrap(),
            "--provider",
            "scripted",
            "--responses",
            responses.to_str().unwrap(),
            "--no-refine",
            "--simulate-task",
            "streamline",
            "--max-iters",
            "2",
        ],
        tmp.path(),
    );
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(2), "{text}");
    assert!(
        text.contains("error: AttributeError: type object 'Glyph' has no attribute 'Scalars'"),
        "{text}"
    );
}

#[test]
fn run_with_replay_and_a_subprocess_interpreter() {
    let tmp = tempfile::tempdir().unwrap();
    let interp = tmp.path().join("pv.sh");
    fs::write(&interp, "#!/bin/sh\nprintf 'PNG' > stream-glyph-screenshot.png\n").unwrap();
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&interp, fs::Permissions::from_mode(0o755)).unwrap();
    }
    let prompt = core_fixtures().join("prompts/streamline.txt");
    let replay = core_fixtures().join("replay/assisted");
    let out = vizgen(
        &[
            "run",
            "--prompt-file",
            prompt.to_str().unwrap(),
            "--provider",
            "replay",
            "--fixtures",
            replay.to_str().unwrap(),
            "--interpreter",
            interp.to_str().unwrap(),
            "--session-id",
            "r",
        ],
        tmp.path(),
    );
    let text = stdout(&out);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{text}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let script = fs::read_to_string(tmp.path().join("vizgen-out/r/iter1/script.py")).unwrap();
    assert_eq!(script.trim_end(), STREAMLINE_ASSISTED.trim_end());
}

#[test]
fn bench_prints_the_matrix_and_gates_on_the_primary_column() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = core_fixtures().join("replay");
    let out = vizgen(
        &["bench", "--provider", "replay", "--fixtures", replay.to_str().unwrap()],
        tmp.path(),
    );
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("Streamline tracing"), "{text}");
    assert!(tmp.path().join("vizgen-bench/matrix.txt").is_file());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("vizgen-bench/matrix.json")).unwrap()).unwrap();
    assert!(json.is_object());

    let out = vizgen(&["bench", "--primary", "unassisted", "--out-dir", "b2"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
}

#[test]
fn eval_images_and_scripts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str, w, h, seed| {
        let path = tmp.path().join(name);
        fs::write(&path, placeholder_png(w, h, true, seed)).unwrap();
        path.to_str().unwrap().to_string()
    };
    let a = p("a.png", 320, 200, "one");
    let b = p("b.png", 320, 200, "two");
    let small = p("c.png", 160, 100, "one");

    let out = vizgen(&["eval", "--candidate", &a, "--reference", &a], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("image: match"));
    assert!(stdout(&out).contains("differing_fraction: 0.000000"));

    let out = vizgen(&["eval", "--candidate", &small, "--reference", &a], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("image: incomparable"));

    let out = vizgen(&["eval", "--candidate", &b, "--reference", &a, "--json"], tmp.path());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["image"]["verdict"], "mismatch");
    assert_eq!(out.status.code(), Some(1));

    let good = tmp.path().join("good.py");
    let bad = tmp.path().join("bad.py");
    fs::write(&good, STREAMLINE_ASSISTED).unwrap();
    fs::write(&bad, STREAMLINE_UNASSISTED).unwrap();
    let (g, bd) = (good.to_str().unwrap(), bad.to_str().unwrap());
    let out = vizgen(&["eval", "--candidate", g, "--reference", g], tmp.path());
    assert!(stdout(&out).contains("script: match"), "{}", stdout(&out));
    let out = vizgen(&["eval", "--candidate", bd, "--reference", g], tmp.path());
    assert!(stdout(&out).contains("Glyph.Scalars"), "{}", stdout(&out));
}

#[test]
fn fixtures_writes_replay_and_profiles() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vizgen(&["fixtures", "--out", "fx"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("wrote 16 replay fixtures"), "{}", stdout(&out));
    for task in ["isosurface", "slice_contour", "volume_render", "delaunay", "streamline"] {
        assert!(tmp.path().join(format!("fx/profiles/{task}.json")).is_file());
    }
}

#[test]
fn bench_hands_each_task_profile_to_the_interpreter() {
    let tmp = tempfile::tempdir().unwrap();
    let interp = tmp.path().join("mock-pv");
    fs::write(
        &interp,
        "#!/bin/sh\nname=$(sed -n 's/.*\"screenshot_name\": \"\\(.*\\)\".*/\\1/p' \"$MOCK_PVPYTHON_PROFILE\")\nprintf 'PNG' > \"$name\"\n",
    )
    .unwrap();
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&interp, fs::Permissions::from_mode(0o755)).unwrap();
    }
    let profiles = core_fixtures().join("profiles");
    let out = vizgen(
        &[
            "bench",
            "--columns",
            "assisted",
            "--tasks",
            "isosurface,delaunay",
            "--interpreter",
            interp.to_str().unwrap(),
            "--profiles",
            profiles.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}\n{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(tmp
        .path()
        .join("vizgen-bench/sessions/assisted-delaunay/iter1/points-surf-clip-screenshot.png")
        .is_file());
}
