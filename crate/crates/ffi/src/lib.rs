//! C ABI for the recovery engine.
//!
//! Every entry point returns a [`RacStatus`]; on failure the message is
//! available from [`rac_last_error_message`] on the same thread. Strings
//! handed out by the library are NUL-terminated UTF-8 owned by the caller
//! and released with [`rac_string_free`]. Handles are opaque and released
//! with their `rac_*_free` function. Structured data crosses the boundary
//! as JSON.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde_json::{json, Value};

use rac_core::compreg::{parse_mcp_tools, ApiConfig};
use rac_core::interceptor::{EngineBuilder, EngineError, InvokeOutcome, RacEngine};
use rac_core::runner::{self, RunArtifacts, RunOptions};
use rac_core::scenario::load_str;
use rac_core::tool::{ToolError, ToolExecutor};
use rac_core::value::Params;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RacStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A JSON argument did not parse or had the wrong shape.
    InvalidJson = 3,
    /// A scenario or engine configuration was rejected.
    ConfigError = 4,
    /// The engine failed (unregistered tool, log storage, ...).
    EngineError = 5,
    /// The run was rolled back and accepts no further calls.
    Terminated = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

/// The message of the last failed call on this thread, or null if none.
/// Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn rac_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rac_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

type Failure = (RacStatus, String);

/// Runs `body`, translating errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> RacStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RacStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {what}"));
            RacStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((RacStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (RacStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, name: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| (RacStatus::InvalidJson, format!("{name}: {e}")))
}

unsafe fn out_arg<'a, T>(out: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    out.as_mut()
        .ok_or_else(|| (RacStatus::NullArgument, format!("{name} is null")))
}

fn to_c_string(text: String) -> *mut c_char {
    CString::new(text.replace('\0', " ")).expect("NUL bytes replaced").into_raw()
}

fn engine_failure(e: EngineError) -> Failure {
    let status = match e {
        EngineError::Terminated => RacStatus::Terminated,
        EngineError::Resolve(_) | EngineError::DuplicateTool(_) => RacStatus::ConfigError,
        _ => RacStatus::EngineError,
    };
    (status, e.to_string())
}

// ---------------------------------------------------------------- scenarios

/// A finished scenario run.
pub struct RacRun {
    artifacts: RunArtifacts,
}

/// Loads a scenario from TOML source and runs it to completion.
/// `seed_override` is used when `has_seed` is non-zero.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rac_run_scenario(
    toml: *const c_char,
    has_seed: i32,
    seed_override: u64,
    out: *mut *mut RacRun,
) -> RacStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let source = str_arg(toml, "toml")?;
        let scenario =
            load_str(source, Path::new("<scenario>")).map_err(|e| (RacStatus::ConfigError, e.to_string()))?;
        let options = RunOptions {
            seed: (has_seed != 0).then_some(seed_override),
            ..Default::default()
        };
        let artifacts = runner::run(&scenario, &options).map_err(|e| (RacStatus::EngineError, e.to_string()))?;
        *out = Box::into_raw(Box::new(RacRun { artifacts }));
        Ok(())
    })
}

/// The run report as a JSON object.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rac_run_report_json(run: *const RacRun, out: *mut *mut c_char) -> RacStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let run = run.as_ref().ok_or((RacStatus::NullArgument, "run is null".into()))?;
        let text = serde_json::to_string(&run.artifacts.report).expect("report serializes");
        *out = to_c_string(text);
        Ok(())
    })
}

/// The transaction log records of the run as a JSON array.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rac_run_records_json(run: *const RacRun, out: *mut *mut c_char) -> RacStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let run = run.as_ref().ok_or((RacStatus::NullArgument, "run is null".into()))?;
        let text = serde_json::to_string(&run.artifacts.records).expect("records serialize");
        *out = to_c_string(text);
        Ok(())
    })
}

/// The process exit code the CLI would use for this run: 0 success or
/// clean rollback, 2 halted with uncompensated effects, 3 dirty rollback.
/// Returns -1 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rac_run_exit_code(run: *const RacRun) -> i32 {
    run.as_ref().map_or(-1, |r| r.artifacts.report.outcome.exit_code())
}

/// # Safety
/// `run` must be null or a handle from [`rac_run_scenario`], freed once.
#[no_mangle]
pub unsafe extern "C" fn rac_run_free(run: *mut RacRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

// ---------------------------------------------------------------- engine

/// Where a tool callback writes its response.
pub struct RacOutput {
    text: Option<String>,
}

/// Sets the callback's response. The string is copied. For a successful
/// call it is the result JSON; for a failed one either a JSON object
/// `{"code": ..., "message": ...}` or free text.
///
/// # Safety
/// `out` must be the pointer passed to the callback; `text` must be null
/// or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rac_output_set(out: *mut RacOutput, text: *const c_char) {
    if let (Some(out), false) = (out.as_mut(), text.is_null()) {
        out.text = Some(CStr::from_ptr(text).to_string_lossy().into_owned());
    }
}

/// Executes one tool call. Returns 0 on success and non-zero on failure;
/// either way the response goes through [`rac_output_set`].
pub type RacExecuteFn = Option<
    unsafe extern "C" fn(user_data: *mut c_void, tool: *const c_char, params_json: *const c_char, out: *mut RacOutput) -> i32,
>;

struct CallbackExecutor {
    execute: unsafe extern "C" fn(*mut c_void, *const c_char, *const c_char, *mut RacOutput) -> i32,
    user_data: *mut c_void,
    tools: BTreeSet<String>,
}

impl ToolExecutor for CallbackExecutor {
    fn is_registered(&self, tool: &str) -> bool {
        self.tools.contains(tool)
    }

    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError> {
        let name = CString::new(tool).map_err(|_| ToolError::untagged("tool name contains NUL"))?;
        let params = CString::new(serde_json::to_string(params).expect("params serialize"))
            .map_err(|_| ToolError::untagged("params contain NUL"))?;
        let mut out = RacOutput { text: None };
        let code = unsafe { (self.execute)(self.user_data, name.as_ptr(), params.as_ptr(), &mut out) };
        let text = out.text.unwrap_or_default();
        if code == 0 {
            if text.is_empty() {
                return Ok(Value::Null);
            }
            serde_json::from_str(&text).map_err(|e| ToolError::untagged(format!("tool returned invalid JSON: {e}")))
        } else {
            Err(serde_json::from_str::<ToolError>(&text).unwrap_or_else(|_| ToolError::untagged(text)))
        }
    }
}

/// An engine driven by a host-supplied tool callback.
pub struct RacEngineHandle {
    engine: RacEngine<CallbackExecutor>,
}

/// Creates an engine.
///
/// - `tools_json`: array of MCP tool declarations the callback serves.
/// - `config_json`: null, or an object with optional keys `api_config`,
///   `recovery` and `seed`.
/// - `log_dir`: null keeps the log in memory; otherwise the log for
///   `run_id` is opened (and resumed) in that directory.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `execute` must be safe
/// to call with `user_data` for the life of the engine; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rac_engine_new(
    run_id: *const c_char,
    tools_json: *const c_char,
    config_json: *const c_char,
    log_dir: *const c_char,
    execute: RacExecuteFn,
    user_data: *mut c_void,
    out: *mut *mut RacEngineHandle,
) -> RacStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let run_id = str_arg(run_id, "run_id")?;
        let tools = parse_mcp_tools(str_arg(tools_json, "tools_json")?)
            .map_err(|e| (RacStatus::InvalidJson, format!("tools_json: {e}")))?;
        let execute = execute.ok_or((RacStatus::NullArgument, "execute is null".into()))?;
        let mut builder = EngineBuilder::new(run_id).tools(tools.clone());
        if let Some(config) = opt_str_arg(config_json, "config_json")? {
            let config: Value = json_arg(config, "config_json")?;
            let object = config
                .as_object()
                .ok_or((RacStatus::InvalidJson, "config_json: expected an object".into()))?;
            for (key, value) in object {
                let bad = |e: serde_json::Error| (RacStatus::ConfigError, format!("config_json.{key}: {e}"));
                builder = match key.as_str() {
                    "api_config" => builder.api_config(serde_json::from_value::<ApiConfig>(value.clone()).map_err(bad)?),
                    "recovery" => {
                        let recovery: rac_core::rcmanager::RecoveryConfig =
                            serde_json::from_value(value.clone()).map_err(bad)?;
                        recovery
                            .retry
                            .validate()
                            .map_err(|e| (RacStatus::ConfigError, format!("config_json.recovery: {e}")))?;
                        builder.recovery(recovery)
                    }
                    "seed" => builder.seed(serde_json::from_value(value.clone()).map_err(bad)?),
                    other => return Err((RacStatus::ConfigError, format!("config_json: unknown key {other:?}"))),
                };
            }
        }
        if let Some(dir) = opt_str_arg(log_dir, "log_dir")? {
            builder = builder.log_dir(dir);
        }
        let executor = CallbackExecutor {
            execute,
            user_data,
            tools: tools.into_iter().map(|t| t.name).collect(),
        };
        let engine = builder.build(executor).map_err(engine_failure)?;
        *out = Box::into_raw(Box::new(RacEngineHandle { engine }));
        Ok(())
    })
}

unsafe fn engine_arg<'a>(engine: *mut RacEngineHandle) -> Result<&'a mut RacEngine<CallbackExecutor>, Failure> {
    engine
        .as_mut()
        .map(|h| &mut h.engine)
        .ok_or((RacStatus::NullArgument, "engine is null".into()))
}

/// Invokes a tool through the engine. On `Ok`, `out_json` receives
/// `{"kind": "result", "value": ...}` or, when recovery rolled the run
/// back, `{"kind": "recovery", "summary": "..."}`.
///
/// # Safety
/// `engine` must be a live handle, strings NUL-terminated, `out_json`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rac_engine_invoke(
    engine: *mut RacEngineHandle,
    tool: *const c_char,
    params_json: *const c_char,
    out_json: *mut *mut c_char,
) -> RacStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let engine = engine_arg(engine)?;
        let tool = str_arg(tool, "tool")?;
        let params: Params = match opt_str_arg(params_json, "params_json")? {
            Some(text) => json_arg(text, "params_json")?,
            None => Params::new(),
        };
        let response = match engine.invoke_tool(tool, params).map_err(engine_failure)? {
            InvokeOutcome::Result(value) => json!({"kind": "result", "value": value}),
            InvokeOutcome::Recovery(summary) => json!({"kind": "recovery", "summary": summary}),
        };
        *out = to_c_string(response.to_string());
        Ok(())
    })
}

/// Rolls back every completed call and returns the summary text.
///
/// # Safety
/// As for [`rac_engine_invoke`].
#[no_mangle]
pub unsafe extern "C" fn rac_engine_rollback(
    engine: *mut RacEngineHandle,
    reason: *const c_char,
    out_summary: *mut *mut c_char,
) -> RacStatus {
    guard(|| {
        let out = out_arg(out_summary, "out_summary")?;
        *out = ptr::null_mut();
        let engine = engine_arg(engine)?;
        let reason = str_arg(reason, "reason")?;
        let report = engine.rollback(reason).map_err(engine_failure)?;
        *out = to_c_string(report.summary_text);
        Ok(())
    })
}

/// The engine's transaction log records as a JSON array.
///
/// # Safety
/// As for [`rac_engine_invoke`].
#[no_mangle]
pub unsafe extern "C" fn rac_engine_records_json(engine: *mut RacEngineHandle, out_json: *mut *mut c_char) -> RacStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let engine = engine_arg(engine)?;
        *out = to_c_string(serde_json::to_string(engine.records()).expect("records serialize"));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`rac_engine_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn rac_engine_free(engine: *mut RacEngineHandle) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
