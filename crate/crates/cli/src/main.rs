use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vizgen_core::canned::{self, CannedProvider, Persona};
use vizgen_core::eval::{compare_images, compare_scripts, CompareOptions, ImageVerdict};
use vizgen_core::executor::{ScriptExecutor, SubprocessExecutor};
use vizgen_core::llm::{HttpProvider, LlmProvider, RecordingProvider, ReplayProvider, ScriptedProvider};
use vizgen_core::prompt::{ExamplePair, PromptTemplates};
use vizgen_core::session::{run_session, FinalStatus, SessionConfig};
use vizgen_core::simulate::{ExpectationProfile, SimulatedExecutor, PROFILE_ENV};
use vizgen_core::tasks::{self, list_tasks, run_benchmark, BenchOptions, Entrant, Mode, TaskId, TaskSpec};
use vizgen_core::{Catalog, UserRequest};

const EXIT_OK: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_EXHAUSTED: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Generate, run and repair ParaView Python scripts from plain-language requests.
#[derive(Debug, Parser)]
#[command(name = "vizgen", version)]
struct Cli {
    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn one request into a working script
    Run(RunArgs),
    /// Run the five benchmark tasks and print the Error/SS matrix
    Bench(BenchArgs),
    /// Compare a screenshot or script against a reference
    Eval(EvalArgs),
    /// Write replay fixtures and simulator profiles for the benchmark tasks
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    /// OpenAI-compatible endpoint from CHATVIS_BASE_URL, key from CHATVIS_API_KEY
    Http,
    /// Recorded replies from a fixture directory
    Replay,
    /// Fixed replies (a JSON list for `run`, the canned personas for `bench`)
    Scripted,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model name sent to the endpoint
    #[arg(long, default_value = "gpt-4")]
    model: String,

    /// Sampling temperature
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,

    /// Fixture directory for the replay provider
    #[arg(long, value_name = "DIR")]
    fixtures: Option<PathBuf>,

    /// Also save every model reply as a replay fixture in DIR
    #[arg(long, value_name = "DIR")]
    record: Option<PathBuf>,

    /// Prompt template directory; files named like the built-in templates replace them
    #[arg(long, value_name = "DIR")]
    templates: Option<PathBuf>,

    /// Snippet catalog file replacing the built-in one
    #[arg(long, value_name = "FILE")]
    catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Interpreter invoked as `<interpreter> script.py`
    #[arg(long, value_name = "PATH")]
    interpreter: Option<PathBuf>,

    /// Extra argument passed to the interpreter before the script (repeatable)
    #[arg(long = "interpreter-arg", value_name = "ARG", allow_hyphen_values = true)]
    interpreter_args: Vec<String>,

    /// Per-run execution timeout in seconds
    #[arg(long, default_value_t = 120.0, value_name = "SECONDS")]
    timeout_s: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Request text
    #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    prompt: Option<String>,

    /// File holding the request text
    #[arg(long, value_name = "FILE")]
    prompt_file: Option<PathBuf>,

    /// Where replies come from
    #[arg(long, value_enum, default_value = "http")]
    provider: ProviderArg,

    /// JSON list of replies for the scripted provider
    #[arg(long, value_name = "FILE")]
    responses: Option<PathBuf>,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    exec: ExecArgs,

    /// Simulate the interpreter in-process with the profile of a benchmark task
    #[arg(long, value_name = "TASK", conflicts_with = "interpreter")]
    simulate_task: Option<TaskId>,

    /// Maximum generate/repair iterations
    #[arg(long, default_value_t = 5, value_name = "N")]
    max_iters: u32,

    /// Session directories are written here
    #[arg(long, default_value = "vizgen-out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Session directory name (default: timestamp)
    #[arg(long, value_name = "ID")]
    session_id: Option<String>,

    /// Expected output file, relative to the run directory (repeatable; default: image names in the request)
    #[arg(long = "expect", value_name = "FILE")]
    expect: Vec<String>,

    /// Data file copied next to the script before each run (repeatable)
    #[arg(long = "input", value_name = "FILE")]
    inputs: Vec<PathBuf>,

    /// Send the request as is instead of asking for a step-by-step rewrite
    #[arg(long)]
    no_refine: bool,

    /// Leave the example snippets out of the generation prompt
    #[arg(long)]
    no_snippets: bool,

    /// Repair on warnings too
    #[arg(long)]
    warnings_trigger_repair: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Where replies come from; replay reads <fixtures>/<column>
    #[arg(long, value_enum, default_value = "scripted")]
    provider: ProviderArg,

    /// Comma-separated columns to run: assisted, unassisted
    #[arg(long, value_delimiter = ',', default_value = "assisted,unassisted")]
    columns: Vec<String>,

    /// Column that must pass every task for exit status 0
    #[arg(long, default_value = "assisted")]
    primary: String,

    /// Comma-separated task ids (default: all five)
    #[arg(long, value_delimiter = ',', value_name = "TASK")]
    tasks: Vec<TaskId>,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    exec: ExecArgs,

    /// Directory with the task datasets, copied next to each script when present
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Directory of `<task>.json` expectation profiles; the matching file is
    /// passed to the interpreter through MOCK_PVPYTHON_PROFILE
    #[arg(long, value_name = "DIR", requires = "interpreter")]
    profiles: Option<PathBuf>,

    /// Maximum generate/repair iterations for assisted columns
    #[arg(long, default_value_t = 5, value_name = "N")]
    max_iters: u32,

    /// Sessions per cell
    #[arg(long, default_value_t = 1, value_name = "N")]
    trials: u32,

    /// Concurrent sessions
    #[arg(long, default_value_t = 2, value_name = "N")]
    jobs: usize,

    /// Matrix files and session directories are written here
    #[arg(long, default_value = "vizgen-bench", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Candidate screenshot (.png) or script (.py)
    #[arg(long, value_name = "FILE", requires = "reference")]
    candidate: Option<PathBuf>,

    /// Reference file of the same kind as --candidate
    #[arg(long, value_name = "FILE", requires = "candidate")]
    reference: Option<PathBuf>,

    /// Candidate script, when comparing an image pair and a script pair at once
    #[arg(long, value_name = "FILE", requires = "reference_script")]
    candidate_script: Option<PathBuf>,

    /// Reference script for --candidate-script
    #[arg(long, value_name = "FILE", requires = "candidate_script")]
    reference_script: Option<PathBuf>,

    /// Largest per-channel difference still counted as equal
    #[arg(long, default_value_t = 3, value_name = "N")]
    tolerance: u8,

    /// Largest share of differing pixels for a match
    #[arg(long, default_value_t = 0.02, value_name = "FRACTION")]
    threshold: f64,

    /// Print the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct FixturesArgs {
    /// Output directory; receives replay/<column>/ and profiles/<task>.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fixtures(args) => cmd_fixtures(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("vizgen: {e:#}");
            let code = if e.is::<UsageError>() { EXIT_USAGE } else { EXIT_FAIL };
            ExitCode::from(code)
        }
    }
}

/// Bad flag values discovered after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn base_config(model: &ModelArgs, exec: &ExecArgs, workdir: &Path, max_iters: u32) -> Result<SessionConfig> {
    let mut config = SessionConfig::new(workdir);
    config.max_iterations = max_iters;
    if !(exec.timeout_s > 0.0 && exec.timeout_s.is_finite()) {
        return Err(usage("--timeout-s must be positive"));
    }
    config.execution_timeout = Duration::from_secs_f64(exec.timeout_s);
    config.model_params.model = model.model.clone();
    config.model_params.temperature = model.temperature;
    if let Some(dir) = &model.templates {
        config.prompts.templates =
            PromptTemplates::with_overrides(dir).map_err(|e| usage(format!("--templates {}: {e}", dir.display())))?;
        let request = dir.join("example_request.txt");
        let refined = dir.join("example_refined.txt");
        if request.exists() || refined.exists() {
            let read = |p: &Path, fallback: &str| -> Result<String> {
                if p.exists() {
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
                } else {
                    Ok(fallback.to_string())
                }
            };
            let builtin = ExamplePair::builtin();
            config.prompts.example = ExamplePair::new(
                read(&request, &builtin.example_request)?,
                read(&refined, &builtin.example_refined)?,
            )
            .map_err(|e| usage(format!("--templates {}: {e}", dir.display())))?;
        }
    }
    if let Some(path) = &model.catalog {
        config.catalog = Catalog::load(path).map_err(|e| usage(format!("--catalog {}: {e}", path.display())))?;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn with_recording(provider: Arc<dyn LlmProvider>, record: Option<&Path>) -> Result<Arc<dyn LlmProvider>> {
    Ok(match record {
        Some(dir) => {
            Arc::new(RecordingProvider::new(provider, dir).with_context(|| format!("creating {}", dir.display()))?)
        }
        None => provider,
    })
}

fn http_provider() -> Result<Arc<dyn LlmProvider>> {
    Ok(Arc::new(HttpProvider::from_env().context("creating HTTP client")?))
}

fn replay_provider(dir: Option<&Path>) -> Result<Arc<dyn LlmProvider>> {
    let dir = dir.ok_or_else(|| usage("--provider replay needs --fixtures DIR"))?;
    let provider = ReplayProvider::load(dir).with_context(|| format!("loading fixtures from {}", dir.display()))?;
    Ok(Arc::new(provider))
}

fn subprocess_executor(exec: &ExecArgs, interpreter: PathBuf) -> SubprocessExecutor {
    let mut executor = SubprocessExecutor::new(interpreter);
    for arg in &exec.interpreter_args {
        executor = executor.arg(arg);
    }
    executor
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let text = match (&args.prompt, &args.prompt_file) {
        (Some(text), _) => text.clone(),
        (None, Some(path)) => {
            fs::read_to_string(path).map_err(|e| usage(format!("--prompt-file {}: {e}", path.display())))?
        }
        (None, None) => return Err(usage("one of --prompt or --prompt-file is required")),
    };
    let session_id = args
        .session_id
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string());
    let request = UserRequest::new(text, session_id).map_err(|e| usage(e.to_string()))?;

    let mut config = base_config(&args.model, &args.exec, &args.out_dir, args.max_iters)?;
    config.refine = !args.no_refine;
    config.snippets = !args.no_snippets;
    config.warnings_trigger_repair = args.warnings_trigger_repair;
    config.expected_artifacts = args.expect.clone();
    config.input_files = args.inputs.clone();

    let provider: Arc<dyn LlmProvider> = match args.provider {
        ProviderArg::Http => http_provider()?,
        ProviderArg::Replay => replay_provider(args.model.fixtures.as_deref())?,
        ProviderArg::Scripted => {
            let path = args
                .responses
                .as_ref()
                .ok_or_else(|| usage("--provider scripted needs --responses FILE"))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let replies: Vec<String> = serde_json::from_str(&text).map_err(|e| {
                usage(format!(
                    "--responses {}: expected a JSON list of strings: {e}",
                    path.display()
                ))
            })?;
            Arc::new(ScriptedProvider::new(replies))
        }
    };
    let provider = with_recording(provider, args.model.record.as_deref())?;

    let executor: Box<dyn ScriptExecutor> = match args.simulate_task {
        Some(id) => Box::new(SimulatedExecutor::for_task(&tasks::task(id))),
        None => {
            let interpreter = args
                .exec
                .interpreter
                .clone()
                .unwrap_or_else(|| PathBuf::from("pvpython"));
            Box::new(subprocess_executor(&args.exec, interpreter))
        }
    };

    let record =
        run_session(&request, &config, provider.as_ref(), executor.as_ref()).map_err(|e| usage(e.to_string()))?;
    let status = match record.final_status {
        FinalStatus::Succeeded => "succeeded",
        FinalStatus::Exhausted => "exhausted",
        FinalStatus::Aborted => "aborted",
    };
    println!("status: {status} after {} iteration(s)", record.iterations.len());
    println!(
        "session: {}",
        record.dir.join(vizgen_core::session::SESSION_FILE).display()
    );
    if let Some(cause) = &record.abort_cause {
        println!("cause: {cause}");
    }
    if record.final_status == FinalStatus::Succeeded {
        println!(
            "script: {}",
            record
                .dir
                .join(format!("iter{}/script.py", record.iterations.len()))
                .display()
        );
        for path in record.artifact_paths() {
            println!("artifact: {}", path.display());
        }
    } else if let Some(last) = record.iterations.last() {
        for e in &last.errors {
            println!("error: {}", e.message);
        }
    }
    Ok(match record.final_status {
        FinalStatus::Succeeded => EXIT_OK,
        FinalStatus::Exhausted => EXIT_EXHAUSTED,
        FinalStatus::Aborted => EXIT_ABORTED,
    })
}

fn cmd_bench(args: BenchArgs) -> Result<u8> {
    let known = [canned::ASSISTED_LABEL, canned::UNASSISTED_LABEL];
    for label in args.columns.iter().chain([&args.primary]) {
        if !known.contains(&label.as_str()) {
            return Err(usage(format!(
                "unknown provider column `{label}` (known: assisted, unassisted)"
            )));
        }
    }
    if !args.columns.contains(&args.primary) {
        return Err(usage(format!("--primary `{}` is not among --columns", args.primary)));
    }
    if args.jobs == 0 || args.trials == 0 {
        return Err(usage("--jobs and --trials must be at least 1"));
    }
    let sessions = args.out_dir.join("sessions");
    let config = base_config(&args.model, &args.exec, &sessions, args.max_iters)?;

    let http = if args.provider == ProviderArg::Http {
        Some(http_provider()?)
    } else {
        None
    };
    let mut entrants = Vec::new();
    for label in &args.columns {
        let (persona, mode) = if label == canned::ASSISTED_LABEL {
            (Persona::Assisted, Mode::Assisted)
        } else {
            (Persona::Unassisted, Mode::Unassisted)
        };
        let provider: Arc<dyn LlmProvider> = match args.provider {
            ProviderArg::Http => http.clone().expect("created above"),
            ProviderArg::Replay => {
                let base = args
                    .model
                    .fixtures
                    .as_deref()
                    .ok_or_else(|| usage("--provider replay needs --fixtures DIR"))?;
                replay_provider(Some(&base.join(label)))?
            }
            ProviderArg::Scripted => Arc::new(CannedProvider::new(persona, &config.prompts)),
        };
        let provider = with_recording(provider, args.model.record.as_ref().map(|d| d.join(label)).as_deref())?;
        entrants.push(Entrant {
            label: label.clone(),
            provider,
            mode,
        });
    }

    let selected: Vec<TaskSpec> = if args.tasks.is_empty() {
        list_tasks()
    } else {
        args.tasks.iter().map(|id| tasks::task(*id)).collect()
    };
    let interpreter = args.exec.interpreter.clone();
    let exec = &args.exec;
    let profiles = match &args.profiles {
        Some(dir) => Some(fs::canonicalize(dir).map_err(|e| usage(format!("--profiles {}: {e}", dir.display())))?),
        None => None,
    };
    let factory = |t: &TaskSpec| -> Box<dyn ScriptExecutor> {
        match &interpreter {
            Some(path) => {
                let mut executor = subprocess_executor(exec, path.clone());
                if let Some(dir) = &profiles {
                    executor = executor.env(PROFILE_ENV, dir.join(format!("{}.json", t.id.as_str())));
                }
                Box::new(executor)
            }
            None => Box::new(SimulatedExecutor::for_task(t)),
        }
    };
    let options = BenchOptions {
        jobs: args.jobs,
        trials: args.trials,
        data_dir: args.data_dir.clone(),
    };
    let matrix = run_benchmark(&selected, &entrants, &config, &factory, &options);

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let table = matrix.render_text();
    fs::write(args.out_dir.join("matrix.txt"), &table)?;
    fs::write(args.out_dir.join("matrix.json"), matrix.to_json())?;
    print!("{table}");
    let green = matrix.column_all_green(&args.primary);
    println!(
        "{}: {}",
        args.primary,
        if green { "all tasks passed" } else { "some tasks failed" }
    );
    Ok(if green { EXIT_OK } else { EXIT_FAIL })
}

fn is_script(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("py"))
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let mut image_pair = None;
    let mut script_pair = None;
    if let (Some(c), Some(r)) = (&args.candidate, &args.reference) {
        match (is_script(c), is_script(r)) {
            (true, true) => script_pair = Some((c.clone(), r.clone())),
            (false, false) => image_pair = Some((c.clone(), r.clone())),
            _ => {
                return Err(usage(
                    "--candidate and --reference must both be images or both be scripts",
                ))
            }
        }
    }
    if let (Some(c), Some(r)) = (&args.candidate_script, &args.reference_script) {
        if script_pair.is_some() {
            return Err(usage("two script pairs given"));
        }
        script_pair = Some((c.clone(), r.clone()));
    }
    if image_pair.is_none() && script_pair.is_none() {
        return Err(usage("nothing to compare: give --candidate and --reference"));
    }
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(usage("--threshold must be within [0, 1]"));
    }

    let mut ok = true;
    let mut report = serde_json::Map::new();
    if let Some((c, r)) = image_pair {
        let options = CompareOptions {
            per_channel_tol: args.tolerance,
            differing_threshold: args.threshold,
        };
        let cmp = compare_images(&c, &r, options);
        ok &= cmp.verdict == ImageVerdict::Match;
        if !args.json {
            let verdict = match cmp.verdict {
                ImageVerdict::Match => "match",
                ImageVerdict::Mismatch => "mismatch",
                ImageVerdict::Incomparable => "incomparable",
            };
            println!("image: {verdict}");
            if let Some(cause) = &cmp.cause {
                println!("  cause: {cause}");
            }
            println!("  differing_fraction: {:.6}", cmp.differing_fraction);
            println!("  max_channel_delta: {}", cmp.max_channel_delta);
            println!("  mean_abs_error: {:.4}", cmp.mean_abs_error);
            if cmp.near_uniform {
                println!("  note: candidate is nearly a single color");
            }
        }
        report.insert("image".into(), serde_json::to_value(&cmp)?);
    }
    if let Some((c, r)) = script_pair {
        let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
        let cmp = compare_scripts(&read(&c)?, &read(&r)?);
        ok &= cmp.missing.is_empty();
        if !args.json {
            println!("script: {}", if cmp.is_clean() { "match" } else { "differs" });
            println!("  missing calls: {}", cmp.missing.join(", "));
            println!("  extra calls: {}", cmp.extra.join(", "));
            println!("  order preserved: {}", cmp.order_preserved);
            println!("  missing attributes: {}", cmp.attributes_missing.join(", "));
            println!("  extra attributes: {}", cmp.attributes_extra.join(", "));
        }
        report.insert("script".into(), serde_json::to_value(&cmp)?);
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_fixtures(args: FixturesArgs) -> Result<u8> {
    let replay = args.out.join("replay");
    let workdir = tempdir_in(&args.out)?;
    let config = SessionConfig::new(&workdir);
    let count = canned::record_fixtures(&replay, &config).context("recording fixtures")?;
    let _ = fs::remove_dir_all(&workdir);
    let profiles = args.out.join("profiles");
    fs::create_dir_all(&profiles)?;
    for task in list_tasks() {
        let path = profiles.join(format!("{}.json", task.id));
        ExpectationProfile::for_task(&task)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {count} replay fixtures to {}", replay.display());
    println!("wrote {} profiles to {}", list_tasks().len(), profiles.display());
    Ok(EXIT_OK)
}

fn tempdir_in(parent: &Path) -> Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let dir = parent.join(format!(".sessions-{}", std::process::id()));
    if dir.exists() {
        bail!("{} already exists", dir.display());
    }
    Ok(dir)
}
