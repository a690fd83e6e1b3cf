//! The engine an agent talks to: every tool call goes through
//! [`RacEngine::invoke_tool`], which logs it before execution and hands
//! failures to the recovery manager.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::advisor::{AbstainingAdvisor, Advisor, CountingAdvisor, QueryKind};
use crate::clock::{Clock, VirtualClock};
use crate::compreg::{ApiConfig, CompensationRegistry, ResolveError, ToolDefinition, ToolRegistry};
use crate::rcmanager::{
    format_requested_rollback, RecoveryConfig, RecoveryManager, RecoveryOutcome, RecoveryStats, RollbackReport,
};
use crate::regraph::GraphError;
use crate::tool::{ToolError, ToolExecutor};
use crate::trace::{EventTrace, Phase};
use crate::txlog::{RecordId, RecordStatus, SyncPolicy, ToolCallRecord, TransactionLog, TxLogError};
use crate::value::Params;

/// Error code given to calls rejected by a registered error detector.
pub const SEMANTIC_ERROR: &str = "SEMANTIC_ERROR";
/// Error code given on reopen to records a crash left `PENDING`.
pub const INTERRUPTED: &str = "INTERRUPTED";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("tool {0:?} is not registered")]
    UnregisteredTool(String),
    #[error(transparent)]
    Log(#[from] TxLogError),
    #[error(transparent)]
    Graph(GraphError),
    #[error(transparent)]
    Resolve(#[from] ResolveError),
    #[error("duplicate tool definition {0:?}")]
    DuplicateTool(String),
    #[error("the run was rolled back; no further calls are accepted")]
    Terminated,
}

/// Flags results that succeeded at the protocol level but are wrong for
/// the task. Returns the error message, or `None` if the result is fine.
pub trait ErrorDetector: Send {
    fn detect(&self, record: &ToolCallRecord) -> Option<String>;
}

impl<F> ErrorDetector for F
where
    F: Fn(&ToolCallRecord) -> Option<String> + Send,
{
    fn detect(&self, record: &ToolCallRecord) -> Option<String> {
        self(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DetectorHandle(u64);

/// Result of a single logged execution: the completed record, or the failed
/// record with its error.
pub type Execution = Result<ToolCallRecord, (ToolCallRecord, ToolError)>;

/// Log, executor and clock shared by the forward path and recovery.
pub struct Runtime<E> {
    log: TransactionLog,
    executor: E,
    tools: ToolRegistry,
    clock: Box<dyn Clock>,
    trace: EventTrace,
    detectors: Vec<(DetectorHandle, Box<dyn ErrorDetector>)>,
    next_detector: u64,
}

impl<E: ToolExecutor> Runtime<E> {
    pub fn log(&self) -> &TransactionLog {
        &self.log
    }

    pub fn tools(&self) -> &ToolRegistry {
        &self.tools
    }

    pub fn executor(&self) -> &E {
        &self.executor
    }

    pub fn executor_mut(&mut self) -> &mut E {
        &mut self.executor
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn is_registered(&self, tool: &str) -> bool {
        self.executor.is_registered(tool)
    }

    pub fn sleep_ms(&mut self, ms: u64) {
        self.clock.sleep_ms(ms);
    }

    pub fn trace(&mut self, phase: Phase, action: &str, tool: Option<&str>, record_id: Option<RecordId>, detail: Option<String>) {
        let now = self.clock.elapsed_ms();
        self.trace.record(now, phase, action, tool, record_id, detail);
    }

    pub fn transition(
        &mut self,
        record_id: RecordId,
        status: RecordStatus,
        result: Option<Value>,
        error: Option<String>,
    ) -> Result<ToolCallRecord, TxLogError> {
        let now = self.clock.now_ms();
        self.log.transition(record_id, status, result, error, now)
    }

    /// Logs a `PENDING` record, executes the call, then logs its terminal
    /// status. Nothing is executed if the append fails.
    pub fn execute_recorded(
        &mut self,
        tool: &str,
        params: Params,
        attempt: u32,
        compensates: Option<RecordId>,
        phase: Phase,
    ) -> Result<Execution, EngineError> {
        let now = self.clock.now_ms();
        let pending = self.log.append(tool, params, attempt, compensates, now)?;
        let rid = pending.record_id;
        self.trace(phase, "invoke", Some(tool), Some(rid), None);
        match self.executor.execute(tool, &pending.params) {
            Ok(result) => {
                if compensates.is_none() {
                    if let Some(message) = self.run_detectors(&pending, &result) {
                        let err = ToolError::new(SEMANTIC_ERROR, message);
                        let failed = self.transition(rid, RecordStatus::Failed, None, Some(err.to_string()))?;
                        self.trace(phase, "detected", Some(tool), Some(rid), Some(err.to_string()));
                        return Ok(Err((failed, err)));
                    }
                }
                let done = self.transition(rid, RecordStatus::Completed, Some(result), None)?;
                self.trace(phase, "completed", Some(tool), Some(rid), None);
                Ok(Ok(done))
            }
            Err(err) => {
                let failed = self.transition(rid, RecordStatus::Failed, None, Some(err.to_string()))?;
                self.trace(phase, "failed", Some(tool), Some(rid), Some(err.to_string()));
                Ok(Err((failed, err)))
            }
        }
    }

    /// Runs detectors in registration order on the would-be completed
    /// record; the first to flag it wins. A panicking detector is ignored.
    fn run_detectors(&self, pending: &ToolCallRecord, result: &Value) -> Option<String> {
        if self.detectors.is_empty() {
            return None;
        }
        let mut view = pending.clone();
        view.status = RecordStatus::Completed;
        view.result = Some(result.clone());
        for (handle, detector) in &self.detectors {
            match catch_unwind(AssertUnwindSafe(|| detector.detect(&view))) {
                Ok(Some(message)) => return Some(message),
                Ok(None) => {}
                Err(_) => log::warn!("error detector {handle:?} panicked; treating result as valid"),
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageSource {
    Agent,
    Tool,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextMessage {
    pub source: MessageSource,
    pub content: String,
}

/// The conversation as the agent sees it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentContext {
    pub run_id: String,
    pub messages: Vec<ContextMessage>,
}

impl AgentContext {
    pub fn push(&mut self, source: MessageSource, content: impl Into<String>) {
        self.messages.push(ContextMessage {
            source,
            content: content.into(),
        });
    }

    pub fn from_source(&self, source: MessageSource) -> impl Iterator<Item = &ContextMessage> {
        self.messages.iter().filter(move |m| m.source == source)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InvokeOutcome {
    /// The call (or a retry or alternative standing in for it) succeeded.
    Result(Value),
    /// Recovery gave up and rolled the run back; carries the summary.
    Recovery(String),
}

pub struct EngineBuilder {
    run_id: String,
    log_dir: Option<PathBuf>,
    sync: SyncPolicy,
    config: RecoveryConfig,
    api_config: ApiConfig,
    tools: Vec<ToolDefinition>,
    advisor: Arc<dyn Advisor>,
    clock: Option<Box<dyn Clock>>,
    seed: u64,
}

impl EngineBuilder {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            log_dir: None,
            sync: SyncPolicy::default(),
            config: RecoveryConfig::default(),
            api_config: ApiConfig::default(),
            tools: Vec::new(),
            advisor: Arc::new(AbstainingAdvisor),
            clock: None,
            seed: 0,
        }
    }

    /// Persist the log under `dir`. Without this the log is in memory only.
    /// An existing log for the same run id is replayed and continued.
    pub fn log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    pub fn sync_policy(mut self, sync: SyncPolicy) -> Self {
        self.sync = sync;
        self
    }

    pub fn recovery(mut self, config: RecoveryConfig) -> Self {
        self.config = config;
        self
    }

    pub fn api_config(mut self, api: ApiConfig) -> Self {
        self.api_config = api;
        self
    }

    pub fn tools(mut self, tools: impl IntoIterator<Item = ToolDefinition>) -> Self {
        self.tools.extend(tools);
        self
    }

    pub fn advisor(mut self, advisor: Arc<dyn Advisor>) -> Self {
        self.advisor = advisor;
        self
    }

    pub fn clock(mut self, clock: Box<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build<E: ToolExecutor>(self, executor: E) -> Result<RacEngine<E>, EngineError> {
        let tools = ToolRegistry::new(self.tools).map_err(|d| EngineError::DuplicateTool(d.0))?;
        let advisor = Arc::new(CountingAdvisor::new(self.advisor));
        let compensations = CompensationRegistry::build(&self.api_config, &tools, advisor.as_ref())?;
        let log = match &self.log_dir {
            Some(dir) => TransactionLog::open(dir, self.run_id, self.sync)?,
            None => TransactionLog::in_memory(self.run_id),
        };
        let mut log = log;
        let now = self.clock.as_ref().map_or(VirtualClock::DEFAULT_EPOCH_MS, |c| c.now_ms());
        for rid in log.records().iter().filter(|r| r.status == RecordStatus::Pending).map(|r| r.record_id).collect::<Vec<_>>() {
            // the outcome of a call interrupted by a crash is unknown
            let err = ToolError::new(INTERRUPTED, "run stopped before the outcome was recorded");
            log.transition(rid, RecordStatus::Failed, None, Some(err.to_string()), now)?;
        }
        let manager = RecoveryManager::new(self.config, compensations, advisor.clone(), self.seed);
        let run_id = log.run_id().to_owned();
        Ok(RacEngine {
            rt: Runtime {
                log,
                executor,
                tools,
                clock: self.clock.unwrap_or_else(|| Box::new(VirtualClock::default())),
                trace: EventTrace::default(),
                detectors: Vec::new(),
                next_detector: 0,
            },
            manager,
            advisor,
            context: AgentContext {
                run_id,
                messages: Vec::new(),
            },
            last_recovery: None,
            terminated: false,
        })
    }
}

pub struct RacEngine<E> {
    rt: Runtime<E>,
    manager: RecoveryManager,
    advisor: Arc<CountingAdvisor>,
    context: AgentContext,
    last_recovery: Option<RecoveryOutcome>,
    terminated: bool,
}

impl<E: ToolExecutor> RacEngine<E> {
    /// Logs and executes one call, recovering from failure. Returns an
    /// error only for unregistered tools, storage failures or a run that
    /// was already rolled back; none of these leave a record behind except
    /// a storage failure after the append.
    pub fn invoke_tool(&mut self, tool: &str, params: Params) -> Result<InvokeOutcome, EngineError> {
        if self.terminated {
            return Err(EngineError::Terminated);
        }
        if !self.rt.is_registered(tool) {
            return Err(EngineError::UnregisteredTool(tool.to_owned()));
        }
        let (failed, err) = match self.rt.execute_recorded(tool, params, 1, None, Phase::Forward)? {
            Ok(done) => return Ok(self.deliver(done)),
            Err(failure) => failure,
        };
        self.rt.trace.begin_episode();
        let outcome = self.manager.handle_failure(&mut self.rt, &failed, &err);
        self.rt.trace.end_episode();
        let outcome = outcome?;
        let answer = match &outcome {
            RecoveryOutcome::Recovered { record, .. } | RecoveryOutcome::RecoveredViaAlternative { record, .. } => {
                self.deliver(record.clone())
            }
            RecoveryOutcome::RolledBack { report, .. } => {
                self.terminated = true;
                self.context.push(MessageSource::Recovery, report.summary_text.clone());
                InvokeOutcome::Recovery(report.summary_text.clone())
            }
        };
        self.last_recovery = Some(outcome);
        Ok(answer)
    }

    fn deliver(&mut self, record: ToolCallRecord) -> InvokeOutcome {
        let result = record.result.unwrap_or(Value::Null);
        self.context.push(MessageSource::Tool, result.to_string());
        InvokeOutcome::Result(result)
    }

    /// Rolls back everything completed so far, e.g. when the agent gives up
    /// or a crashed run is resumed. Ends the run.
    pub fn rollback(&mut self, reason: &str) -> Result<RollbackReport, EngineError> {
        self.rt.trace.begin_episode();
        let report = self.manager.rollback(&mut self.rt);
        self.rt.trace.end_episode();
        let mut report = report?;
        report.summary_text = format_requested_rollback(reason, &report);
        self.terminated = true;
        self.context.push(MessageSource::Recovery, report.summary_text.clone());
        Ok(report)
    }

    /// Records the agent's own narration, e.g. a scripted agent's plan.
    pub fn note_agent(&mut self, text: impl Into<String>) {
        self.context.push(MessageSource::Agent, text);
    }

    pub fn register_error_detector(&mut self, detector: impl ErrorDetector + 'static) -> DetectorHandle {
        self.rt.next_detector += 1;
        let handle = DetectorHandle(self.rt.next_detector);
        self.rt.detectors.push((handle, Box::new(detector)));
        handle
    }

    pub fn remove_error_detector(&mut self, handle: DetectorHandle) -> bool {
        let before = self.rt.detectors.len();
        self.rt.detectors.retain(|(h, _)| *h != handle);
        self.rt.detectors.len() != before
    }

    pub fn records(&self) -> &[ToolCallRecord] {
        self.rt.log.records()
    }

    pub fn log(&self) -> &TransactionLog {
        &self.rt.log
    }

    pub fn sync(&mut self) -> Result<(), TxLogError> {
        self.rt.log.sync()
    }

    pub fn executor(&self) -> &E {
        &self.rt.executor
    }

    pub fn executor_mut(&mut self) -> &mut E {
        &mut self.rt.executor
    }

    pub fn into_executor(self) -> E {
        self.rt.executor
    }

    pub fn trace(&self) -> &EventTrace {
        &self.rt.trace
    }

    pub fn context(&self) -> &AgentContext {
        &self.context
    }

    pub fn stats(&self) -> RecoveryStats {
        self.manager.stats()
    }

    pub fn compensations(&self) -> &CompensationRegistry {
        self.manager.compensations()
    }

    pub fn advisor_calls(&self) -> usize {
        self.advisor.total()
    }

    pub fn advisor_calls_of(&self, kind: QueryKind) -> usize {
        self.advisor.count(kind)
    }

    pub fn last_recovery(&self) -> Option<&RecoveryOutcome> {
        self.last_recovery.as_ref()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.rt.clock.elapsed_ms()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::{AdvisorAnswer, AdvisorQuery, Suggestion};
    use crate::rcmanager::CompensationOutcome;
    use crate::simenv::{self, DisruptionMode, DisruptionSpec, Environment, ScenarioKind};
    use serde_json::json;

    fn params(v: Value) -> Params {
        v.as_object().unwrap().clone()
    }

    fn group_engine(disruptions: &[DisruptionSpec]) -> RacEngine<Environment> {
        let preset = simenv::preset(ScenarioKind::GroupBooking).unwrap();
        let env = simenv::build_environment(ScenarioKind::GroupBooking, disruptions).unwrap();
        EngineBuilder::new("test")
            .tools(env.definitions())
            .api_config(preset.api_config.clone())
            .advisor(Arc::new(crate::advisor::RuleTableAdvisor::new(preset.advisor.clone())))
            .build(env)
            .unwrap()
    }

    fn book(engine: &mut RacEngine<Environment>, flight: &str, pax: &str) -> InvokeOutcome {
        engine
            .invoke_tool("book_flight", params(json!({"flight_id": flight, "passenger_id": pax})))
            .unwrap()
    }

    #[test]
    fn transient_then_success_recovers() {
        let mut engine = group_engine(&[DisruptionSpec::new("book_flight", DisruptionMode::Transient(1), "RATE_LIMITED")]);
        let out = book(&mut engine, "UA100", "PAX-A");
        assert!(matches!(out, InvokeOutcome::Result(_)));
        let statuses: Vec<_> = engine.records().iter().map(|r| r.status).collect();
        assert_eq!(statuses, vec![RecordStatus::Failed, RecordStatus::Completed]);
        assert_eq!(engine.records()[1].attempt, 2);
        assert!(matches!(engine.last_recovery(), Some(RecoveryOutcome::Recovered { .. })));
        assert_eq!(engine.stats().retries, 1);
    }

    #[test]
    fn exhausted_retries_roll_back_with_backoff() {
        let mut engine = group_engine(&[DisruptionSpec::new("book_flight", DisruptionMode::Transient(99), "TIMEOUT")]);
        let out = book(&mut engine, "UA100", "PAX-A");
        let InvokeOutcome::Recovery(text) = out else { panic!("expected rollback") };
        assert!(text.contains("3 retries"));
        assert_eq!(engine.records().len(), 4);
        assert!(engine.records().iter().all(|r| r.status == RecordStatus::Failed));
        // 500 + 1000 + 2000 with at most 10% jitter each way
        let waited = engine.elapsed_ms();
        assert!((3150..=3850).contains(&waited), "{waited}");
        assert!(matches!(
            engine.invoke_tool("book_flight", Params::new()),
            Err(EngineError::Terminated)
        ));
    }

    #[test]
    fn permanent_failure_compensates_prior_bookings() {
        let mut engine = group_engine(&[DisruptionSpec::new(
            "book_flight",
            DisruptionMode::FailOnNthCall(3),
            "BOOKING_REJECTED",
        )]);
        book(&mut engine, "UA100", "PAX-A");
        book(&mut engine, "DL200", "PAX-B");
        let out = book(&mut engine, "AA300", "PAX-C");
        assert!(matches!(out, InvokeOutcome::Recovery(_)));
        let Some(RecoveryOutcome::RolledBack { report, context }) = engine.last_recovery() else { panic!() };
        assert_eq!(context.retries(), 0);
        assert_eq!(report.entries.iter().map(|e| e.record_id).collect::<Vec<_>>(), vec![2, 1]);
        assert!(report.entries.iter().all(|e| e.outcome == CompensationOutcome::Compensated));
        assert_eq!(engine.records()[0].status, RecordStatus::Compensated);
        assert_eq!(engine.records()[1].status, RecordStatus::Compensated);
        assert!(engine.executor().ledger().effects.iter().all(|e| e.reversed));
        assert!(crate::trace::check_phase_order(engine.trace().events()).is_ok());
    }

    #[test]
    fn rollback_of_empty_log_is_empty() {
        let mut engine = group_engine(&[]);
        let report = engine.rollback("test").unwrap();
        assert!(report.entries.is_empty());
        assert!(report.halted_at.is_none());
    }

    #[test]
    fn unregistered_tool_leaves_no_record() {
        let mut engine = group_engine(&[]);
        assert!(matches!(
            engine.invoke_tool("teleport", Params::new()),
            Err(EngineError::UnregisteredTool(_))
        ));
        assert!(engine.records().is_empty());
    }

    #[test]
    fn self_suggestion_is_discarded() {
        let env = simenv::build_environment(
            ScenarioKind::GroupBooking,
            &[DisruptionSpec::new("book_flight", DisruptionMode::Permanent, "BOOKING_REJECTED")],
        )
        .unwrap();
        let advisor = |q: &AdvisorQuery| match q {
            AdvisorQuery::SuggestAlternative { failed, .. } => AdvisorAnswer::Alternatives(vec![Suggestion {
                tool: "book_flight".into(),
                params: failed.params.clone(),
            }]),
            _ => AdvisorAnswer::Abstain,
        };
        let mut engine = EngineBuilder::new("t")
            .tools(env.definitions())
            .advisor(Arc::new(advisor))
            .build(env)
            .unwrap();
        let out = book(&mut engine, "UA100", "PAX-A");
        assert!(matches!(out, InvokeOutcome::Recovery(_)));
        assert_eq!(engine.records().len(), 1);
        assert_eq!(engine.stats().alternatives_tried, 1);
    }

    #[test]
    fn detectors_run_in_order_and_fail_the_call() {
        let mut engine = group_engine(&[]);
        let first = engine.register_error_detector(|r: &ToolCallRecord| {
            (r.params.get("passenger_id") == Some(&json!("PAX-X"))).then(|| "wrong passenger".to_string())
        });
        engine.register_error_detector(|_: &ToolCallRecord| -> Option<String> { panic!("buggy detector") });
        book(&mut engine, "UA100", "PAX-A");
        let out = book(&mut engine, "UA100", "PAX-X");
        assert!(matches!(out, InvokeOutcome::Recovery(_)));
        let rec = &engine.records()[1];
        assert_eq!(rec.status, RecordStatus::Failed);
        assert!(rec.error.as_deref().unwrap().contains("SEMANTIC_ERROR"));
        assert!(engine.remove_error_detector(first));
        assert!(!engine.remove_error_detector(first));
    }
}
