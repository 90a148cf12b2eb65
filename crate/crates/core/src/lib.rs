//! Turn natural-language visualization requests into pvpython scripts that
//! run: generate with an LLM, execute, extract the errors, ask for a repair,
//! and repeat until the requested screenshot exists.

pub mod canned;
pub mod catalog;
pub mod eval;
pub mod executor;
pub mod llm;
pub mod prompt;
pub mod session;
pub mod simulate;
pub mod tasks;
pub mod traceback;

pub use catalog::{Catalog, OperationTag, Snippet};
pub use executor::{CandidateScript, ExecutionOutcome, ScriptExecutor, SubprocessExecutor};
pub use llm::{ChatMessage, LlmProvider, ModelParams};
pub use prompt::{PromptEngine, RefinedPrompt, UserRequest};
pub use session::{run_session, SessionConfig, SessionRecord};
pub use traceback::{extract_errors, ErrorReport};
