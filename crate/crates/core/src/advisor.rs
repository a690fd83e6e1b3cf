//! The decision interface consulted wherever recovery needs judgement:
//! classifying errors, proposing substitute tool calls, discovering
//! compensation pairs and inferring compensation inputs.
//!
//! [`RuleTableAdvisor`] answers from a declarative table and is what every
//! test and scenario uses. Anything implementing [`Advisor`] can be plugged
//! in instead; closures work too.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compreg::{InputMapping, MappingRule, MappingSource};
use crate::txlog::ToolCallRecord;
use crate::value::Params;

/// Failure classification driving the retry decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorClass {
    #[serde(alias = "transient")]
    Transient,
    #[serde(alias = "permanent")]
    Permanent,
    #[serde(alias = "unknown")]
    Unknown,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Transient => "TRANSIENT",
            ErrorClass::Permanent => "PERMANENT",
            ErrorClass::Unknown => "UNKNOWN",
        }
    }
}

/// Name and description of a registered tool, as shown to the advisor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSummary {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueryKind {
    ClassifyError,
    SuggestAlternative,
    DiscoverCompensation,
    InferInputMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdvisorQuery {
    ClassifyError {
        tool_name: String,
        error_code: Option<String>,
        message: String,
    },
    SuggestAlternative {
        failed: ToolCallRecord,
        error: String,
        registry: Vec<ToolSummary>,
    },
    DiscoverCompensation {
        tool_name: String,
        registry: Vec<ToolSummary>,
    },
    InferInputMapping {
        compensation_tool: String,
        param: String,
        forward: ToolCallRecord,
        /// Earlier completed records of the run.
        history: Vec<ToolCallRecord>,
    },
}

impl AdvisorQuery {
    pub fn kind(&self) -> QueryKind {
        match self {
            AdvisorQuery::ClassifyError { .. } => QueryKind::ClassifyError,
            AdvisorQuery::SuggestAlternative { .. } => QueryKind::SuggestAlternative,
            AdvisorQuery::DiscoverCompensation { .. } => QueryKind::DiscoverCompensation,
            AdvisorQuery::InferInputMapping { .. } => QueryKind::InferInputMapping,
        }
    }
}

/// A substitute invocation proposed for a failed call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub tool: String,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "answer", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdvisorAnswer {
    Classification(ErrorClass),
    Alternatives(Vec<Suggestion>),
    Binding {
        compensation_tool: String,
        input_mapping: Option<Vec<MappingRule>>,
    },
    Mapping(MappingSource),
    Abstain,
}

impl AdvisorAnswer {
    /// Whether this answer is a legitimate reply to a query of `kind`.
    /// Abstention answers everything.
    pub fn answers(&self, kind: QueryKind) -> bool {
        matches!(
            (self, kind),
            (AdvisorAnswer::Abstain, _)
                | (AdvisorAnswer::Classification(_), QueryKind::ClassifyError)
                | (AdvisorAnswer::Alternatives(_), QueryKind::SuggestAlternative)
                | (AdvisorAnswer::Binding { .. }, QueryKind::DiscoverCompensation)
                | (AdvisorAnswer::Mapping(_), QueryKind::InferInputMapping)
        )
    }
}

pub trait Advisor: Send + Sync {
    fn consult(&self, query: &AdvisorQuery) -> AdvisorAnswer;
}

impl<F> Advisor for F
where
    F: Fn(&AdvisorQuery) -> AdvisorAnswer + Send + Sync,
{
    fn consult(&self, query: &AdvisorQuery) -> AdvisorAnswer {
        self(query)
    }
}

/// Advisor that always abstains.
#[derive(Debug, Clone, Copy, Default)]
pub struct AbstainingAdvisor;

impl Advisor for AbstainingAdvisor {
    fn consult(&self, _query: &AdvisorQuery) -> AdvisorAnswer {
        AdvisorAnswer::Abstain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlternativeRule {
    pub tool: String,
    /// Merged over the failed call's params.
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationRule {
    pub tool: String,
    #[serde(default)]
    pub input_mapping: Option<InputMapping>,
}

/// Declarative rules for [`RuleTableAdvisor`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    /// error code -> class
    #[serde(default)]
    pub classify: BTreeMap<String, ErrorClass>,
    /// failed tool -> substitutes, in preference order
    #[serde(default)]
    pub alternatives: BTreeMap<String, Vec<AlternativeRule>>,
    /// forward tool -> compensation
    #[serde(default)]
    pub compensations: BTreeMap<String, CompensationRule>,
    /// Enables the name-matching input mapping heuristic.
    #[serde(default)]
    pub infer_mappings: bool,
}

impl RuleTable {
    pub fn is_empty(&self) -> bool {
        self.classify.is_empty() && self.alternatives.is_empty() && self.compensations.is_empty() && !self.infer_mappings
    }
}

/// Deterministic advisor backed by a [`RuleTable`].
#[derive(Debug, Clone, Default)]
pub struct RuleTableAdvisor {
    table: RuleTable,
}

impl RuleTableAdvisor {
    pub fn new(table: RuleTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }
}

fn in_registry(registry: &[ToolSummary], tool: &str) -> bool {
    registry.iter().any(|t| t.name == tool)
}

impl Advisor for RuleTableAdvisor {
    fn consult(&self, query: &AdvisorQuery) -> AdvisorAnswer {
        match query {
            AdvisorQuery::ClassifyError { error_code, .. } => error_code
                .as_ref()
                .and_then(|code| self.table.classify.get(code))
                .map_or(AdvisorAnswer::Abstain, |&c| AdvisorAnswer::Classification(c)),
            AdvisorQuery::SuggestAlternative { failed, registry, .. } => {
                let suggestions: Vec<Suggestion> = self
                    .table
                    .alternatives
                    .get(&failed.tool_name)
                    .into_iter()
                    .flatten()
                    .filter(|rule| in_registry(registry, &rule.tool))
                    .map(|rule| {
                        let mut params = failed.params.clone();
                        params.extend(rule.params.clone());
                        Suggestion {
                            tool: rule.tool.clone(),
                            params,
                        }
                    })
                    .collect();
                if suggestions.is_empty() {
                    AdvisorAnswer::Abstain
                } else {
                    AdvisorAnswer::Alternatives(suggestions)
                }
            }
            AdvisorQuery::DiscoverCompensation { tool_name, registry } => {
                match self.table.compensations.get(tool_name) {
                    Some(rule) if in_registry(registry, &rule.tool) => AdvisorAnswer::Binding {
                        compensation_tool: rule.tool.clone(),
                        input_mapping: rule.input_mapping.clone().map(|m| m.0),
                    },
                    _ => AdvisorAnswer::Abstain,
                }
            }
            AdvisorQuery::InferInputMapping { param, forward, .. } => {
                if !self.table.infer_mappings {
                    return AdvisorAnswer::Abstain;
                }
                infer_mapping(param, forward).map_or(AdvisorAnswer::Abstain, AdvisorAnswer::Mapping)
            }
        }
    }
}

/// Exact-name match first, then a unique match on the `_suffix` stem
/// (`res_id` <-> `reservation_id`). Results are searched before params.
pub fn infer_mapping(param: &str, forward: &ToolCallRecord) -> Option<MappingSource> {
    let result_keys = scalar_keys(forward.result.as_ref().and_then(Value::as_object));
    let param_keys = scalar_keys(Some(&forward.params));

    if result_keys.contains(&param) {
        return Some(MappingSource::ForwardResultPath(param.to_owned()));
    }
    if param_keys.contains(&param) {
        return Some(MappingSource::ForwardParam(param.to_owned()));
    }
    let (prefix, suffix) = param.rsplit_once('_')?;
    if let Some(key) = unique_stem_match(prefix, suffix, &result_keys) {
        return Some(MappingSource::ForwardResultPath(key.to_owned()));
    }
    unique_stem_match(prefix, suffix, &param_keys).map(|k| MappingSource::ForwardParam(k.to_owned()))
}

fn scalar_keys(map: Option<&Params>) -> Vec<&str> {
    map.into_iter()
        .flatten()
        .filter(|(_, v)| matches!(v, Value::String(_) | Value::Number(_)))
        .map(|(k, _)| k.as_str())
        .collect()
}

fn unique_stem_match<'a>(prefix: &str, suffix: &str, keys: &[&'a str]) -> Option<&'a str> {
    let same_suffix: Vec<&str> = keys
        .iter()
        .copied()
        .filter(|k| k.rsplit_once('_').is_some_and(|(_, s)| s == suffix))
        .collect();
    match same_suffix.as_slice() {
        [only] => Some(only),
        [] => None,
        _ => {
            let narrowed: Vec<&str> = same_suffix
                .into_iter()
                .filter(|k| {
                    let (p, _) = k.rsplit_once('_').expect("filtered on suffix");
                    p.starts_with(prefix) || prefix.starts_with(p)
                })
                .collect();
            match narrowed.as_slice() {
                [only] => Some(only),
                _ => None,
            }
        }
    }
}

/// Counts consultations by kind. Call counts are the reported stand-in for
/// model usage.
pub struct CountingAdvisor {
    inner: Arc<dyn Advisor>,
    counts: [AtomicUsize; 4],
}

impl CountingAdvisor {
    pub fn new(inner: Arc<dyn Advisor>) -> Self {
        Self {
            inner,
            counts: Default::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn count(&self, kind: QueryKind) -> usize {
        self.counts[kind as usize].load(Ordering::Relaxed)
    }
}

impl Advisor for CountingAdvisor {
    fn consult(&self, query: &AdvisorQuery) -> AdvisorAnswer {
        self.counts[query.kind() as usize].fetch_add(1, Ordering::Relaxed);
        self.inner.consult(query)
    }
}
