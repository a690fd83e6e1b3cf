//! Runs a loaded scenario end to end: build the environment, drive the
//! scripted agent through the engine, judge the ledger and report.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::advisor::RuleTableAdvisor;
use crate::clock::{Clock, SystemClock, VirtualClock};
use crate::interceptor::{EngineBuilder, EngineError, InvokeOutcome, RacEngine};
use crate::rcmanager::{RecoveryOutcome, RollbackReport};
use crate::regraph::history_graph;
use crate::scenario::{parse_reference, LoadedScenario};
use crate::simenv::{Effect, Environment, LedgerVerdict, RunOutcome, ScriptStep, SimError};
use crate::tool::ToolExecutor;
use crate::trace::EventTrace;
use crate::txlog::{log_path, ToolCallRecord};
use crate::value::{lookup_path, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Success,
    RolledBackClean,
    HaltedDirty,
    /// Rollback finished without a compensation failure yet effects remain,
    /// which only happens when an effectful tool had no compensation bound.
    RolledBackDirty,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "SUCCESS",
            Outcome::RolledBackClean => "ROLLED_BACK_CLEAN",
            Outcome::HaltedDirty => "HALTED_DIRTY",
            Outcome::RolledBackDirty => "ROLLED_BACK_DIRTY",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success | Outcome::RolledBackClean => 0,
            Outcome::HaltedDirty => 2,
            Outcome::RolledBackDirty => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub retries: usize,
    pub alternatives_tried: usize,
    pub compensations: usize,
    pub advisor_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub clean: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub kind: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps_completed: usize,
    pub steps_total: usize,
    pub counts: RunCounts,
    pub wall_time_ms: u64,
    pub ledger: LedgerSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

/// What happened at one script step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tool: String,
    pub params: Params,
    /// `result`, `recovered`, `recovered_via_alternative` or `rolled_back`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Persist the transaction log here as `<run id>.jsonl`. An existing log
    /// for the same run id is replaced.
    pub log_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    /// Sleep for real during backoff instead of advancing a virtual clock.
    pub real_time: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("step {step}: reference {reference:?} does not resolve")]
    Reference { step: usize, reference: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub steps: Vec<StepRecord>,
    pub records: Vec<ToolCallRecord>,
    pub rollback: Option<RollbackReport>,
    pub trace: EventTrace,
    pub environment: Environment,
}

impl RunArtifacts {
    pub fn graph_dot(&self) -> String {
        history_graph(&self.records).to_dot()
    }
}

pub fn run_id(scenario: &LoadedScenario, seed: u64) -> String {
    format!("{}-seed{seed}", scenario.spec.name)
}

/// Replaces `$N.path` strings, at any depth, with values from earlier
/// step results.
pub fn resolve_params(params: &Params, results: &[Value], step: usize) -> Result<Params, RunError> {
    fn walk(v: &Value, results: &[Value], step: usize) -> Result<Value, RunError> {
        match v {
            Value::String(s) if s.starts_with('$') => {
                let bad = || RunError::Reference {
                    step,
                    reference: s.clone(),
                };
                let (n, path) = parse_reference(s).ok_or_else(bad)?;
                let result = n.checked_sub(1).and_then(|i| results.get(i)).ok_or_else(bad)?;
                lookup_path(result, path).cloned().ok_or_else(bad)
            }
            Value::Array(items) => items.iter().map(|i| walk(i, results, step)).collect::<Result<_, _>>().map(Value::Array),
            Value::Object(map) => map
                .iter()
                .map(|(k, v)| walk(v, results, step).map(|v| (k.clone(), v)))
                .collect::<Result<_, _>>()
                .map(Value::Object),
            other => Ok(other.clone()),
        }
    }
    match walk(&Value::Object(params.clone()), results, step)? {
        Value::Object(map) => Ok(map),
        _ => unreachable!("objects map to objects"),
    }
}

/// Engine configuration for `scenario`, ready to be built around any
/// executor. Replaces an existing log for the run when `options.log_dir`
/// is set.
pub fn engine_builder(scenario: &LoadedScenario, options: &RunOptions) -> Result<EngineBuilder, RunError> {
    let seed = options.seed.unwrap_or(scenario.spec.seed);
    let clock: Box<dyn Clock> = if options.real_time {
        Box::new(SystemClock::default())
    } else {
        Box::new(VirtualClock::default())
    };
    let id = run_id(scenario, seed);
    let mut builder = EngineBuilder::new(id.clone())
        .recovery(scenario.spec.recovery.clone())
        .api_config(scenario.api_config.clone())
        .tools(scenario.definitions.clone())
        .advisor(Arc::new(RuleTableAdvisor::new(scenario.advisor.clone())))
        .clock(clock)
        .seed(seed);
    if let Some(dir) = &options.log_dir {
        let path = log_path(dir, &id);
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(RunError::Io { path, source }),
        }
        builder = builder.log_dir(dir);
    }
    Ok(builder)
}

/// The scenario's simulated environment with its disruptions injected.
pub fn build_environment(scenario: &LoadedScenario) -> Result<Environment, RunError> {
    let mut env = Environment::new(scenario.env_tools.clone())?;
    for d in &scenario.spec.disruptions {
        env.inject(d.clone())?;
    }
    Ok(env)
}

/// How far the scripted agent got.
#[derive(Debug, Clone, Default)]
pub struct Drive {
    pub steps: Vec<StepRecord>,
    pub results: Vec<Value>,
    /// Set when the run ended in a rollback.
    pub rollback: Option<RollbackReport>,
}

/// Feeds `script` to the engine one step at a time until it finishes, a
/// call ends in rollback, or `max_steps` is exceeded (which also rolls
/// back).
pub fn drive<E: ToolExecutor>(
    engine: &mut RacEngine<E>,
    script: &[ScriptStep],
    max_steps: Option<usize>,
) -> Result<Drive, RunError> {
    let mut out = Drive::default();
    for (i, step) in script.iter().enumerate() {
        let n = i + 1;
        if let Some(max) = max_steps.filter(|&max| i >= max) {
            out.rollback = Some(engine.rollback(&format!("step budget of {max} exhausted before step {n}"))?);
            break;
        }
        let params = resolve_params(&step.params, &out.results, n)?;
        engine.note_agent(format!("step {n}: {} {}", step.tool, Value::Object(params.clone())));
        let handled_before = engine.stats().failures_handled;
        let outcome = engine.invoke_tool(&step.tool, params.clone())?;
        let recovered = engine.stats().failures_handled > handled_before;
        let status = match (&outcome, engine.last_recovery()) {
            (InvokeOutcome::Recovery(_), _) => "rolled_back",
            (_, Some(RecoveryOutcome::Recovered { .. })) if recovered => "recovered",
            (_, Some(RecoveryOutcome::RecoveredViaAlternative { .. })) if recovered => "recovered_via_alternative",
            _ => "result",
        };
        let result = match &outcome {
            InvokeOutcome::Result(value) => Some(value.clone()),
            InvokeOutcome::Recovery(_) => None,
        };
        out.steps.push(StepRecord {
            step: n,
            tool: step.tool.clone(),
            params,
            status: status.into(),
            result: result.clone(),
        });
        match result {
            Some(value) => out.results.push(value),
            None => {
                if let Some(RecoveryOutcome::RolledBack { report, .. }) = engine.last_recovery() {
                    out.rollback = Some(report.clone());
                }
                break;
            }
        }
    }
    engine.sync().map_err(EngineError::from)?;
    Ok(out)
}

/// Judges a finished run from the environment's ledger.
pub fn judge(env: &Environment, rollback: Option<&RollbackReport>) -> (Outcome, LedgerVerdict) {
    match rollback {
        None => (Outcome::Success, env.ledger_is_clean(RunOutcome::Success)),
        Some(report) => {
            let verdict = env.ledger_is_clean(RunOutcome::NotCompleted);
            let outcome = if report.halted_at.is_some() {
                Outcome::HaltedDirty
            } else if verdict.clean {
                Outcome::RolledBackClean
            } else {
                Outcome::RolledBackDirty
            };
            (outcome, verdict)
        }
    }
}

pub fn run(scenario: &LoadedScenario, options: &RunOptions) -> Result<RunArtifacts, RunError> {
    let seed = options.seed.unwrap_or(scenario.spec.seed);
    let max_steps = options.max_steps.or(scenario.spec.max_steps);
    let mut engine = engine_builder(scenario, options)?.build(build_environment(scenario)?)?;
    let Drive { steps, results, rollback } = drive(&mut engine, &scenario.script, max_steps)?;
    let (outcome, verdict) = judge(engine.executor(), rollback.as_ref());
    let stats = engine.stats();
    let report = RunReport {
        scenario: scenario.spec.name.clone(),
        kind: scenario.spec.kind.to_string(),
        seed,
        outcome,
        steps_completed: results.len(),
        steps_total: scenario.script.len(),
        counts: RunCounts {
            retries: stats.retries,
            alternatives_tried: stats.alternatives_tried,
            compensations: stats.compensations,
            advisor_calls: engine.advisor_calls(),
        },
        wall_time_ms: engine.elapsed_ms(),
        ledger: LedgerSummary {
            clean: verdict.clean,
            violations: verdict.violations.iter().map(describe_effect).collect(),
        },
        halted_at: rollback.as_ref().and_then(|r| r.halted_at),
        summary: rollback.as_ref().map(|r| r.summary_text.clone()),
    };
    Ok(RunArtifacts {
        report,
        steps,
        records: engine.records().to_vec(),
        rollback,
        trace: engine.trace().clone(),
        environment: engine.into_executor(),
    })
}

fn describe_effect(e: &Effect) -> String {
    format!("{} by {} is not reversed", e.effect_id, e.tool_name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    JsonLines,
}

pub fn render_report(artifacts: &RunArtifacts, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(&artifacts.report),
        ReportFormat::JsonLines => {
            let mut out = String::new();
            for step in &artifacts.steps {
                let mut line = serde_json::to_value(step).expect("step serializes");
                line.as_object_mut().expect("object").insert("type".into(), json!("step"));
                out.push_str(&line.to_string());
                out.push('\n');
            }
            let mut line = serde_json::to_value(&artifacts.report).expect("report serializes");
            line.as_object_mut().expect("object").insert("type".into(), json!("report"));
            out.push_str(&line.to_string());
            out.push('\n');
            out
        }
    }
}

pub fn render_text(report: &RunReport) -> String {
    let mut lines = vec![
        format!("scenario       {} ({}, seed {})", report.scenario, report.kind, report.seed),
        format!("outcome        {}", report.outcome.as_str()),
        format!("steps          {}/{}", report.steps_completed, report.steps_total),
        format!("retries        {}", report.counts.retries),
        format!("alternatives   {}", report.counts.alternatives_tried),
        format!("compensations  {}", report.counts.compensations),
        format!("advisor calls  {}", report.counts.advisor_calls),
        format!("wall time      {} ms", report.wall_time_ms),
        format!("ledger         {}", if report.ledger.clean { "CLEAN" } else { "DIRTY" }),
    ];
    lines.extend(report.ledger.violations.iter().map(|v| format!("  violation: {v}")));
    if let Some(summary) = &report.summary {
        lines.push(String::new());
        lines.extend(summary.lines().map(str::to_owned));
    }
    lines.join("\n") + "\n"
}

/// Writes the run's DOT graph and event trace where requested.
pub fn export(artifacts: &RunArtifacts, graph: Option<&Path>, trace: Option<&Path>) -> Result<(), RunError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| RunError::Io { path, source }
    };
    if let Some(path) = graph {
        fs::write(path, artifacts.graph_dot()).map_err(io_err(path))?;
    }
    if let Some(path) = trace {
        let file = fs::File::create(path).map_err(io_err(path))?;
        artifacts.trace.write_jsonl(io::BufWriter::new(file)).map_err(io_err(path))?;
    }
    Ok(())
}
