//! Recovery and compensation manager.
//!
//! A failed call goes through, strictly in this order: classification,
//! retries with exponential backoff (skipped for permanent errors),
//! advisor-suggested alternatives, and finally rollback of everything the
//! run has completed. Each retry and alternative is logged as a fresh
//! record, so an alternative that succeeds is itself compensable later.
//!
//! Rollback walks the execution graph rebuilt from the log, dependents
//! first, and stops at the first compensation that fails. Records after the
//! failure stay `COMPLETED` so a later rollback can resume them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::advisor::{Advisor, AdvisorAnswer, AdvisorQuery, ErrorClass};
use crate::compreg::{extract_params, CompensationBinding, CompensationRegistry, Provenance};
use crate::interceptor::{EngineError, Runtime};
use crate::regraph::{build_graph, rollback_order};
use crate::tool::{ToolError, ToolExecutor};
use crate::trace::Phase;
use crate::txlog::{RecordId, RecordStatus, ToolCallRecord};
use crate::value::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    /// Uniform jitter as a fraction of the nominal delay, applied both ways.
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            multiplier: 2.0,
            jitter_fraction: 0.1,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based), without jitter.
    pub fn nominal_delay_ms(&self, retry: u32) -> f64 {
        self.base_delay_ms as f64 * self.multiplier.powi(retry.saturating_sub(1) as i32)
    }

    pub fn jittered_delay_ms(&self, retry: u32, rng: &mut impl Rng) -> u64 {
        let nominal = self.nominal_delay_ms(retry);
        let spread = self.jitter_fraction.abs();
        let factor = if spread > 0.0 { 1.0 + rng.gen_range(-spread..=spread) } else { 1.0 };
        (nominal * factor).round().max(0.0) as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.multiplier.is_finite() && self.multiplier >= 1.0) {
            return Err(format!("multiplier must be >= 1, got {}", self.multiplier));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(format!("jitter_fraction must be in [0, 1), got {}", self.jitter_fraction));
        }
        Ok(())
    }
}

fn codes(list: &[&str]) -> BTreeSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Recovery limits and the error codes classified without the advisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub retry: RetryPolicy,
    pub max_alternatives: usize,
    pub permanent_codes: BTreeSet<String>,
    pub transient_codes: BTreeSet<String>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_alternatives: 2,
            permanent_codes: codes(&[
                "PERMANENTLY_OFFLINE",
                "BOOKING_REJECTED",
                "PAYMENT_DECLINED",
                "INVALID_REQUEST",
                "NOT_FOUND",
                "UNAUTHORIZED",
                "UNKNOWN_REFERENCE",
                "ALREADY_REVERSED",
                "UNKNOWN_TOOL",
            ]),
            transient_codes: codes(&[
                "RATE_LIMITED",
                "TIMEOUT",
                "TEMPORARILY_UNAVAILABLE",
                "SERVICE_UNAVAILABLE",
                "CONNECTION_RESET",
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureContext {
    pub record_id: RecordId,
    pub tool_name: String,
    pub error_message: String,
    pub classification: ErrorClass,
    /// Invocations of the failed call, the original included.
    pub attempts_made: u32,
    pub alternatives_tried: Vec<String>,
}

impl FailureContext {
    pub fn retries(&self) -> u32 {
        self.attempts_made.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompensationOutcome {
    Compensated,
    CompensationFailed,
    SkippedNoSideEffects,
}

impl CompensationOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            CompensationOutcome::Compensated => "COMPENSATED",
            CompensationOutcome::CompensationFailed => "COMPENSATION_FAILED",
            CompensationOutcome::SkippedNoSideEffects => "SKIPPED_NO_SIDE_EFFECTS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackEntry {
    pub record_id: RecordId,
    pub tool_name: String,
    pub compensation_tool: Option<String>,
    pub extracted_params: Params,
    pub outcome: CompensationOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RollbackReport {
    /// Full rollback order computed from the log.
    pub plan: Vec<RecordId>,
    pub entries: Vec<RollbackEntry>,
    pub halted_at: Option<RecordId>,
    pub summary_text: String,
}

impl RollbackReport {
    pub fn compensations(&self) -> usize {
        self.count(CompensationOutcome::Compensated)
    }

    pub fn skipped(&self) -> usize {
        self.count(CompensationOutcome::SkippedNoSideEffects)
    }

    fn count(&self, outcome: CompensationOutcome) -> usize {
        self.entries.iter().filter(|e| e.outcome == outcome).count()
    }

    /// Records still carrying side effects after a halted rollback: the one
    /// that failed and everything planned after it.
    pub fn uncompensated(&self) -> Vec<RecordId> {
        match self.halted_at {
            None => Vec::new(),
            Some(halt) => self.plan.iter().copied().skip_while(|&r| r != halt).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryOutcome {
    Recovered {
        record: ToolCallRecord,
        context: FailureContext,
    },
    RecoveredViaAlternative {
        record: ToolCallRecord,
        alt_tool: String,
        context: FailureContext,
    },
    RolledBack {
        context: FailureContext,
        report: RollbackReport,
    },
}

/// Running counts across a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub failures_handled: usize,
    pub retries: usize,
    pub alternatives_tried: usize,
    pub compensations: usize,
}

/// Classifies `error` by code, asking the advisor about codes in neither
/// configured set. An abstaining advisor yields `TRANSIENT`.
pub fn classify_error(
    tool_name: &str,
    error: &ToolError,
    config: &RecoveryConfig,
    advisor: &dyn Advisor,
) -> ErrorClass {
    if let Some(code) = &error.code {
        if config.permanent_codes.contains(code) {
            return ErrorClass::Permanent;
        }
        if config.transient_codes.contains(code) {
            return ErrorClass::Transient;
        }
    }
    let query = AdvisorQuery::ClassifyError {
        tool_name: tool_name.to_owned(),
        error_code: error.code.clone(),
        message: error.message.clone(),
    };
    match advisor.consult(&query) {
        AdvisorAnswer::Classification(class) => class,
        _ => ErrorClass::Transient,
    }
}

fn plural(n: usize, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

fn render_params(params: &Params) -> String {
    serde_json::to_string(&Value::Object(params.clone())).expect("params serialize")
}

/// Agent-facing summary of a failure and what was done about it. Equal
/// inputs give byte-identical text.
pub fn format_context_message(ctx: &FailureContext, report: &RollbackReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Tool call {} (record {}) failed: {}",
        ctx.tool_name, ctx.record_id, ctx.error_message
    );
    let _ = writeln!(out, "Classification: {}", ctx.classification.as_str());
    let mut attempts = format!(
        "Recovery attempts: {}, {}",
        plural(ctx.retries() as usize, "retry", "retries"),
        plural(ctx.alternatives_tried.len(), "alternative", "alternatives")
    );
    if !ctx.alternatives_tried.is_empty() {
        let _ = write!(attempts, " ({})", ctx.alternatives_tried.join(", "));
    }
    let _ = writeln!(out, "{attempts}");
    out.push_str(&format_rollback_section(report));
    out
}

/// Summary for a rollback requested without a failing call, e.g. when the
/// agent exceeds its step budget.
pub fn format_requested_rollback(reason: &str, report: &RollbackReport) -> String {
    format!("Rollback requested: {reason}\n{}", format_rollback_section(report))
}

fn format_rollback_section(report: &RollbackReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Rollback: {}, {} skipped",
        plural(report.compensations(), "compensation", "compensations"),
        report.skipped()
    );
    for (i, e) in report.entries.iter().enumerate() {
        let _ = write!(out, "  {}. record {} {}", i + 1, e.record_id, e.tool_name);
        if let Some(comp) = &e.compensation_tool {
            let _ = write!(out, " -> {comp} {}", render_params(&e.extracted_params));
        }
        let _ = write!(out, ": {}", e.outcome.as_str());
        if let Some(err) = &e.error {
            let _ = write!(out, " ({err})");
        }
        out.push('\n');
    }
    match report.halted_at {
        Some(halt) => {
            let pending: Vec<String> = report.uncompensated().iter().map(ToString::to_string).collect();
            let _ = writeln!(
                out,
                "Rollback HALTED at record {halt}. MANUAL ATTENTION REQUIRED: records not rolled back: {}.",
                pending.join(", ")
            );
        }
        None if report.entries.is_empty() => {
            let _ = writeln!(out, "Nothing to undo. The task was not completed.");
        }
        None => {
            let _ = writeln!(out, "All completed side effects were undone. The task was not completed.");
        }
    }
    out
}

/// Per-run recovery state: policy, resolved compensations, advisor and the
/// jitter RNG.
pub struct RecoveryManager {
    config: RecoveryConfig,
    compensations: CompensationRegistry,
    advisor: Arc<dyn Advisor>,
    rng: ChaCha8Rng,
    stats: RecoveryStats,
}

impl RecoveryManager {
    pub fn new(config: RecoveryConfig, compensations: CompensationRegistry, advisor: Arc<dyn Advisor>, seed: u64) -> Self {
        Self {
            config,
            compensations,
            advisor,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: RecoveryStats::default(),
        }
    }

    pub fn config(&self) -> &RecoveryConfig {
        &self.config
    }

    pub fn stats(&self) -> RecoveryStats {
        self.stats
    }

    pub fn compensations(&self) -> &CompensationRegistry {
        &self.compensations
    }

    pub fn binding_for(&self, tool: &str) -> CompensationBinding {
        self.compensations.binding(tool).cloned().unwrap_or_else(|| CompensationBinding {
            forward_tool: tool.to_owned(),
            compensation_tool: None,
            input_mapping: Vec::new(),
            provenance: Provenance::AssumedNoSideEffects,
        })
    }

    /// Handles a `FAILED` record: retry, then alternatives, then rollback.
    pub fn handle_failure<E: ToolExecutor>(
        &mut self,
        rt: &mut Runtime<E>,
        record: &ToolCallRecord,
        error: &ToolError,
    ) -> Result<RecoveryOutcome, EngineError> {
        debug_assert_eq!(record.status, RecordStatus::Failed);
        self.stats.failures_handled += 1;
        let classification = classify_error(&record.tool_name, error, &self.config, self.advisor.as_ref());
        rt.trace(
            Phase::Classify,
            "classify",
            Some(&record.tool_name),
            Some(record.record_id),
            Some(format!("{} {}", classification.as_str(), error)),
        );
        let mut ctx = FailureContext {
            record_id: record.record_id,
            tool_name: record.tool_name.clone(),
            error_message: error.to_string(),
            classification,
            attempts_made: 1,
            alternatives_tried: Vec::new(),
        };

        if classification != ErrorClass::Permanent {
            if let Some(recovered) = self.retry_with_backoff(rt, record, &mut ctx)? {
                return Ok(RecoveryOutcome::Recovered {
                    record: recovered,
                    context: ctx,
                });
            }
        }

        if let Some((recovered, alt_tool)) = self.try_alternatives(rt, record, &mut ctx)? {
            return Ok(RecoveryOutcome::RecoveredViaAlternative {
                record: recovered,
                alt_tool,
                context: ctx,
            });
        }

        let mut report = self.rollback(rt)?;
        report.summary_text = format_context_message(&ctx, &report);
        Ok(RecoveryOutcome::RolledBack { context: ctx, report })
    }

    /// Re-invokes the failed call up to `max_retries` times. Returns the
    /// completed record of the first attempt that succeeds.
    pub fn retry_with_backoff<E: ToolExecutor>(
        &mut self,
        rt: &mut Runtime<E>,
        record: &ToolCallRecord,
        ctx: &mut FailureContext,
    ) -> Result<Option<ToolCallRecord>, EngineError> {
        let policy = self.config.retry.clone();
        for retry in 1..=policy.max_retries {
            let delay = policy.jittered_delay_ms(retry, &mut self.rng);
            rt.trace(
                Phase::Retry,
                "backoff",
                Some(&record.tool_name),
                None,
                Some(format!("{delay}ms before retry {retry}")),
            );
            rt.sleep_ms(delay);
            self.stats.retries += 1;
            ctx.attempts_made += 1;
            match rt.execute_recorded(&record.tool_name, record.params.clone(), retry + 1, None, Phase::Retry)? {
                Ok(done) => return Ok(Some(done)),
                Err((failed, err)) => {
                    ctx.error_message = err.to_string();
                    let _ = failed;
                }
            }
        }
        Ok(None)
    }

    /// Asks the advisor for substitute calls and runs up to
    /// `max_alternatives` of them. Suggestions naming the failed tool or an
    /// unregistered tool are discarded but still count as tried.
    pub fn try_alternatives<E: ToolExecutor>(
        &mut self,
        rt: &mut Runtime<E>,
        record: &ToolCallRecord,
        ctx: &mut FailureContext,
    ) -> Result<Option<(ToolCallRecord, String)>, EngineError> {
        if self.config.max_alternatives == 0 {
            return Ok(None);
        }
        let mut failed = record.clone();
        failed.error.get_or_insert_with(|| ctx.error_message.clone());
        let query = AdvisorQuery::SuggestAlternative {
            failed,
            error: ctx.error_message.clone(),
            registry: rt.tools().summaries(),
        };
        let suggestions = match self.advisor.consult(&query) {
            AdvisorAnswer::Alternatives(list) => list,
            _ => return Ok(None),
        };
        for s in suggestions.into_iter().take(self.config.max_alternatives) {
            ctx.alternatives_tried.push(s.tool.clone());
            self.stats.alternatives_tried += 1;
            let reason = if s.tool == record.tool_name {
                Some("self-suggestion")
            } else if !rt.is_registered(&s.tool) {
                Some("unregistered tool")
            } else {
                None
            };
            if let Some(reason) = reason {
                rt.trace(Phase::Alternative, "discard", Some(&s.tool), None, Some(reason.into()));
                continue;
            }
            match rt.execute_recorded(&s.tool, s.params, 1, None, Phase::Alternative)? {
                Ok(done) => return Ok(Some((done, s.tool))),
                Err((_, err)) => ctx.error_message = err.to_string(),
            }
        }
        Ok(None)
    }

    /// Compensates every completed record of the run, dependents first.
    pub fn rollback<E: ToolExecutor>(&mut self, rt: &mut Runtime<E>) -> Result<RollbackReport, EngineError> {
        let records: Vec<ToolCallRecord> = rt.log().records().to_vec();
        let plan = rollback_order(&build_graph(&records)).map_err(EngineError::Graph)?;
        let mut report = RollbackReport {
            plan: plan.clone(),
            ..Default::default()
        };
        for rid in plan {
            let record = records[rid as usize - 1].clone();
            let binding = self.binding_for(&record.tool_name);
            let Some(comp_tool) = binding.compensation_tool.clone() else {
                rt.trace(Phase::Rollback, "skip", Some(&record.tool_name), Some(rid), Some("no side effects".into()));
                report.entries.push(RollbackEntry {
                    record_id: rid,
                    tool_name: record.tool_name.clone(),
                    compensation_tool: None,
                    extracted_params: Params::new(),
                    outcome: CompensationOutcome::SkippedNoSideEffects,
                    error: None,
                });
                continue;
            };

            // a compensation that completed before a crash is not run again
            let already = rt
                .log()
                .records()
                .iter()
                .find(|r| r.compensates == Some(rid) && r.status == RecordStatus::Completed)
                .map(|r| r.params.clone());
            let attempt = match already {
                Some(params) => Ok(params),
                None => {
                    let history: Vec<ToolCallRecord> = records[..rid as usize - 1]
                        .iter()
                        .filter(|r| r.status == RecordStatus::Completed && r.compensates.is_none())
                        .cloned()
                        .collect();
                    match extract_params(&binding, &record, rt.tools(), self.advisor.as_ref(), &history) {
                        Err(e) => Err((Params::new(), e.to_string())),
                        Ok(params) => match rt.execute_recorded(&comp_tool, params.clone(), 1, Some(rid), Phase::Rollback)? {
                            Ok(_) => Ok(params),
                            Err((_, err)) => Err((params, err.to_string())),
                        },
                    }
                }
            };
            match attempt {
                Ok(params) => {
                    rt.transition(rid, RecordStatus::Compensated, None, None)?;
                    self.stats.compensations += 1;
                    report.entries.push(RollbackEntry {
                        record_id: rid,
                        tool_name: record.tool_name.clone(),
                        compensation_tool: Some(comp_tool),
                        extracted_params: params,
                        outcome: CompensationOutcome::Compensated,
                        error: None,
                    });
                }
                Err((params, error)) => {
                    rt.transition(rid, RecordStatus::CompensationFailed, None, Some(error.clone()))?;
                    rt.trace(Phase::Rollback, "halt", Some(&comp_tool), Some(rid), Some(error.clone()));
                    report.entries.push(RollbackEntry {
                        record_id: rid,
                        tool_name: record.tool_name.clone(),
                        compensation_tool: Some(comp_tool),
                        extracted_params: params,
                        outcome: CompensationOutcome::CompensationFailed,
                        error: Some(error),
                    });
                    report.halted_at = Some(rid);
                    break;
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::{AbstainingAdvisor, RuleTable, RuleTableAdvisor};

    #[test]
    fn default_delays_double() {
        let p = RetryPolicy::default();
        let delays: Vec<f64> = (1..=3).map(|n| p.nominal_delay_ms(n)).collect();
        assert_eq!(delays, vec![500.0, 1000.0, 2000.0]);
    }

    #[test]
    fn jitter_stays_within_fraction() {
        let p = RetryPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=3 {
            for _ in 0..200 {
                let d = p.jittered_delay_ms(n, &mut rng) as f64;
                let nominal = p.nominal_delay_ms(n);
                assert!((d - nominal).abs() <= nominal * 0.1 + 0.5, "{d} vs {nominal}");
            }
        }
        let exact = RetryPolicy {
            jitter_fraction: 0.0,
            ..p
        };
        assert_eq!(exact.jittered_delay_ms(2, &mut rng), 1000);
    }

    #[test]
    fn policy_validation() {
        assert!(RetryPolicy::default().validate().is_ok());
        let bad = RetryPolicy {
            multiplier: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RetryPolicy {
            jitter_fraction: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn classification_by_code_then_advisor() {
        let config = RecoveryConfig::default();
        let abstain = AbstainingAdvisor;
        assert_eq!(
            classify_error("t", &ToolError::new("RATE_LIMITED", "slow"), &config, &abstain),
            ErrorClass::Transient
        );
        assert_eq!(
            classify_error("t", &ToolError::new("PERMANENTLY_OFFLINE", "gone"), &config, &abstain),
            ErrorClass::Permanent
        );
        assert_eq!(
            classify_error("t", &ToolError::untagged("something odd"), &config, &abstain),
            ErrorClass::Transient
        );
        let mut table = RuleTable::default();
        table.classify.insert("MACHINE_ON_FIRE".into(), ErrorClass::Permanent);
        let advisor = RuleTableAdvisor::new(table);
        assert_eq!(
            classify_error("t", &ToolError::new("MACHINE_ON_FIRE", "!"), &config, &advisor),
            ErrorClass::Permanent
        );
    }

    fn ctx(retries: u32, alts: &[&str]) -> FailureContext {
        FailureContext {
            record_id: 3,
            tool_name: "book_flight".into(),
            error_message: "[BOOKING_REJECTED] sold out".into(),
            classification: ErrorClass::Permanent,
            attempts_made: retries + 1,
            alternatives_tried: alts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn summary_for_empty_report() {
        let text = format_context_message(&ctx(1, &[]), &RollbackReport::default());
        assert!(text.contains("book_flight"));
        assert!(text.contains("[BOOKING_REJECTED] sold out"));
        assert!(text.contains("1 retry,"));
        assert!(text.contains("0 compensations"));
        assert!(text.contains("Nothing to undo"));
    }

    #[test]
    fn summary_for_halted_report() {
        let mut params = Params::new();
        params.insert("booking_ref".into(), "FL-0002".into());
        let report = RollbackReport {
            plan: vec![2, 1],
            entries: vec![RollbackEntry {
                record_id: 2,
                tool_name: "book_flight".into(),
                compensation_tool: Some("cancel_flight".into()),
                extracted_params: params,
                outcome: CompensationOutcome::CompensationFailed,
                error: Some("[PERMANENTLY_OFFLINE] down".into()),
            }],
            halted_at: Some(2),
            summary_text: String::new(),
        };
        let text = format_context_message(&ctx(0, &["rebook"]), &report);
        assert!(text.contains("0 retries, 1 alternative (rebook)"));
        assert!(text.contains("cancel_flight {\"booking_ref\":\"FL-0002\"}: COMPENSATION_FAILED"));
        assert!(text.contains("HALTED at record 2"));
        assert!(text.contains("MANUAL ATTENTION REQUIRED"));
        assert!(text.contains("not rolled back: 2, 1"));
        assert_eq!(report.uncompensated(), vec![2, 1]);
    }
}
