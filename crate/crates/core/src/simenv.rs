//! Simulated tool environments with fault injection.
//!
//! Tools come in three behaviours: effectful tools create an entry in the
//! side-effect ledger and return its identifier, compensation tools mark
//! the effect named by one of their params as reversed, and read-only tools
//! return a canned response. Every call lands in the call trace.
//!
//! Three environments are built in: the travel booking example, a three
//! machine job shop, and a group flight booking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::compreg::{ApiConfig, InputSchema, ToolDefinition, COMPENSATION_TOOL_KEY, INPUT_MAPPING_KEY};
use crate::advisor::{CompensationRule, RuleTable};
use crate::tool::{ToolError, ToolExecutor};
use crate::value::Params;

/// Error codes produced by the environment itself.
pub mod codes {
    pub const INVALID_REQUEST: &str = "INVALID_REQUEST";
    pub const UNKNOWN_REFERENCE: &str = "UNKNOWN_REFERENCE";
    pub const ALREADY_REVERSED: &str = "ALREADY_REVERSED";
    pub const UNKNOWN_TOOL: &str = "UNKNOWN_TOOL";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolBehavior {
    /// Creates a ledger effect `<id_prefix>-NNNN` returned under `result_key`.
    Effect { id_prefix: String, result_key: String },
    /// Reverses the effect of `reverses` whose id is passed in `ref_param`.
    Compensate { reverses: String, ref_param: String },
    ReadOnly {
        #[serde(default)]
        response: Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type", default = "string_type")]
    pub param_type: String,
    #[serde(default = "yes")]
    pub required: bool,
}

fn string_type() -> String {
    "string".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub behavior: ToolBehavior,
    /// MCP annotations advertised for the tool.
    #[serde(default)]
    pub annotations: Map<String, Value>,
}

impl ToolSpec {
    pub fn is_effectful(&self) -> bool {
        matches!(self.behavior, ToolBehavior::Effect { .. })
    }

    /// The MCP declaration of this tool.
    pub fn definition(&self) -> ToolDefinition {
        ToolDefinition {
            name: self.name.clone(),
            description: self.description.clone(),
            input_schema: InputSchema {
                schema_type: "object".into(),
                properties: self
                    .params
                    .iter()
                    .map(|p| (p.name.clone(), json!({ "type": p.param_type })))
                    .collect(),
                required: self.params.iter().filter(|p| p.required).map(|p| p.name.clone()).collect(),
                extra: Map::new(),
            },
            annotations: self.annotations.clone(),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisruptionMode {
    /// Fails the next `n` calls after injection, then recovers.
    Transient(u32),
    Permanent,
    /// Fails exactly the n-th call to the target tool (1-based).
    FailOnNthCall(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptionSpec {
    pub target_tool: String,
    pub mode: DisruptionMode,
    pub error_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl DisruptionSpec {
    pub fn new(target_tool: &str, mode: DisruptionMode, error_code: &str) -> Self {
        Self {
            target_tool: target_tool.into(),
            mode,
            error_code: error_code.into(),
            message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub effect_id: String,
    pub tool_name: String,
    pub params: Params,
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CallOutcome {
    Ok { result: Value },
    Err { error: ToolError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallTraceEntry {
    pub seq: u64,
    pub tool: String,
    pub params: Params,
    #[serde(flatten)]
    pub outcome: CallOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentLedger {
    pub effects: Vec<Effect>,
    pub call_trace: Vec<CallTraceEntry>,
}

/// How the run driving the environment ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Success,
    NotCompleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerVerdict {
    pub clean: bool,
    pub violations: Vec<Effect>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown scenario kind {0:?}")]
    UnknownKind(String),
    #[error("disruption targets unregistered tool {0:?}")]
    UnknownTarget(String),
    #[error("disruption on {tool:?}: {reason}")]
    BadDisruption { tool: String, reason: &'static str },
    #[error("tool {0:?} declared twice")]
    DuplicateTool(String),
    #[error("compensation tool {tool:?} reverses unknown or non-effectful tool {reverses:?}")]
    BadReversal { tool: String, reverses: String },
}

#[derive(Debug, Clone)]
struct ActiveDisruption {
    spec: DisruptionSpec,
    remaining: u32,
}

#[derive(Debug, Clone)]
pub struct Environment {
    tools: BTreeMap<String, ToolSpec>,
    disruptions: Vec<ActiveDisruption>,
    call_counts: BTreeMap<String, u64>,
    id_counters: BTreeMap<String, u64>,
    ledger: EnvironmentLedger,
}

impl Environment {
    pub fn new(tools: impl IntoIterator<Item = ToolSpec>) -> Result<Self, SimError> {
        let mut map = BTreeMap::new();
        for t in tools {
            if map.contains_key(&t.name) {
                return Err(SimError::DuplicateTool(t.name));
            }
            map.insert(t.name.clone(), t);
        }
        for t in map.values() {
            if let ToolBehavior::Compensate { reverses, .. } = &t.behavior {
                if !map.get(reverses).is_some_and(ToolSpec::is_effectful) {
                    return Err(SimError::BadReversal {
                        tool: t.name.clone(),
                        reverses: reverses.clone(),
                    });
                }
            }
        }
        Ok(Self {
            tools: map,
            disruptions: Vec::new(),
            call_counts: BTreeMap::new(),
            id_counters: BTreeMap::new(),
            ledger: EnvironmentLedger::default(),
        })
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn definitions(&self) -> Vec<ToolDefinition> {
        self.tools.values().map(ToolSpec::definition).collect()
    }

    pub fn ledger(&self) -> &EnvironmentLedger {
        &self.ledger
    }

    pub fn calls_to(&self, tool: &str) -> u64 {
        self.call_counts.get(tool).copied().unwrap_or(0)
    }

    pub fn inject(&mut self, disruption: DisruptionSpec) -> Result<(), SimError> {
        if !self.tools.contains_key(&disruption.target_tool) {
            return Err(SimError::UnknownTarget(disruption.target_tool));
        }
        let bad = |reason| SimError::BadDisruption {
            tool: disruption.target_tool.clone(),
            reason,
        };
        let remaining = match disruption.mode {
            DisruptionMode::Transient(0) => return Err(bad("transient fail count must be at least 1")),
            DisruptionMode::FailOnNthCall(0) => return Err(bad("call index must be at least 1")),
            DisruptionMode::Transient(n) => n,
            _ => 0,
        };
        self.disruptions.push(ActiveDisruption {
            spec: disruption,
            remaining,
        });
        Ok(())
    }

    /// Whether the effects left behind are acceptable for a run that ended
    /// with `outcome`.
    pub fn ledger_is_clean(&self, outcome: RunOutcome) -> LedgerVerdict {
        let violations: Vec<Effect> = match outcome {
            RunOutcome::Success => Vec::new(),
            RunOutcome::NotCompleted => self.ledger.effects.iter().filter(|e| !e.reversed).cloned().collect(),
        };
        LedgerVerdict {
            clean: violations.is_empty(),
            violations,
        }
    }

    fn injected_failure(&mut self, tool: &str, call_index: u64) -> Option<ToolError> {
        let hit = self.disruptions.iter_mut().find(|d| {
            d.spec.target_tool == tool
                && match d.spec.mode {
                    DisruptionMode::Transient(_) => d.remaining > 0,
                    DisruptionMode::Permanent => true,
                    DisruptionMode::FailOnNthCall(n) => u64::from(n) == call_index,
                }
        })?;
        if let DisruptionMode::Transient(_) = hit.spec.mode {
            hit.remaining -= 1;
        }
        let message = hit
            .spec
            .message
            .clone()
            .unwrap_or_else(|| format!("{tool} unavailable (injected disruption)"));
        Some(ToolError::new(hit.spec.error_code.clone(), message))
    }

    fn run_tool(&mut self, spec: &ToolSpec, params: &Params) -> Result<Value, ToolError> {
        if let Some(missing) = spec.params.iter().find(|p| p.required && !params.contains_key(&p.name)) {
            return Err(ToolError::new(
                codes::INVALID_REQUEST,
                format!("{} requires parameter {}", spec.name, missing.name),
            ));
        }
        match &spec.behavior {
            ToolBehavior::ReadOnly { response } => Ok(response.clone()),
            ToolBehavior::Effect { id_prefix, result_key } => {
                let n = self.id_counters.entry(id_prefix.clone()).or_insert(0);
                *n += 1;
                let effect_id = format!("{id_prefix}-{:04}", *n);
                self.ledger.effects.push(Effect {
                    effect_id: effect_id.clone(),
                    tool_name: spec.name.clone(),
                    params: params.clone(),
                    reversed: false,
                });
                Ok(json!({ result_key.as_str(): effect_id, "status": "confirmed" }))
            }
            ToolBehavior::Compensate { reverses, ref_param } => {
                let Some(reference) = params.get(ref_param).and_then(Value::as_str) else {
                    return Err(ToolError::new(
                        codes::INVALID_REQUEST,
                        format!("{} requires string parameter {ref_param}", spec.name),
                    ));
                };
                let effect = self
                    .ledger
                    .effects
                    .iter_mut()
                    .find(|e| e.effect_id == reference && &e.tool_name == reverses)
                    .ok_or_else(|| {
                        ToolError::new(codes::UNKNOWN_REFERENCE, format!("no {reverses} effect {reference}"))
                    })?;
                if effect.reversed {
                    return Err(ToolError::new(
                        codes::ALREADY_REVERSED,
                        format!("{reference} was already reversed"),
                    ));
                }
                effect.reversed = true;
                Ok(json!({ "reversed": reference, "status": "cancelled" }))
            }
        }
    }
}

impl ToolExecutor for Environment {
    fn is_registered(&self, tool: &str) -> bool {
        self.tools.contains_key(tool)
    }

    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError> {
        let outcome = match self.tools.get(tool).cloned() {
            None => Err(ToolError::new(codes::UNKNOWN_TOOL, format!("no tool named {tool}"))),
            Some(spec) => {
                let count = self.call_counts.entry(tool.to_owned()).or_insert(0);
                *count += 1;
                let call_index = *count;
                match self.injected_failure(tool, call_index) {
                    Some(err) => Err(err),
                    None => self.run_tool(&spec, params),
                }
            }
        };
        self.ledger.call_trace.push(CallTraceEntry {
            seq: self.ledger.call_trace.len() as u64 + 1,
            tool: tool.to_owned(),
            params: params.clone(),
            outcome: match &outcome {
                Ok(result) => CallOutcome::Ok { result: result.clone() },
                Err(error) => CallOutcome::Err { error: error.clone() },
            },
        });
        outcome
    }
}

/// One call of a scripted agent. String params of the form `$N.path` are
/// replaced by the value at `path` in the result of step `N` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub tool: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Travel,
    Jobshop,
    GroupBooking,
    Custom,
}

impl ScenarioKind {
    pub const BUILT_IN: [ScenarioKind; 3] = [ScenarioKind::Travel, ScenarioKind::Jobshop, ScenarioKind::GroupBooking];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Travel => "travel",
            ScenarioKind::Jobshop => "jobshop",
            ScenarioKind::GroupBooking => "group_booking",
            ScenarioKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "travel" => Ok(ScenarioKind::Travel),
            "jobshop" => Ok(ScenarioKind::Jobshop),
            "group_booking" => Ok(ScenarioKind::GroupBooking),
            "custom" => Ok(ScenarioKind::Custom),
            other => Err(SimError::UnknownKind(other.to_owned())),
        }
    }
}

/// Tools, agent script and compensation sources of a built-in scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub tools: Vec<ToolSpec>,
    pub script: Vec<ScriptStep>,
    pub api_config: ApiConfig,
    /// Advisor rules used when a scenario file does not bring its own.
    pub advisor: RuleTable,
}

fn param(name: &str) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        param_type: "string".into(),
        required: true,
    }
}

fn typed(name: &str, param_type: &str) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        param_type: param_type.into(),
        required: true,
    }
}

fn effect_tool(name: &str, description: &str, params: Vec<ParamSpec>, prefix: &str, key: &str) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        params,
        behavior: ToolBehavior::Effect {
            id_prefix: prefix.into(),
            result_key: key.into(),
        },
        annotations: Map::new(),
    }
}

fn compensation_tool(name: &str, description: &str, reverses: &str, ref_param: &str) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        params: vec![param(ref_param)],
        behavior: ToolBehavior::Compensate {
            reverses: reverses.into(),
            ref_param: ref_param.into(),
        },
        annotations: Map::new(),
    }
}

fn read_only(name: &str, description: &str, params: Vec<ParamSpec>, response: Value) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        params,
        behavior: ToolBehavior::ReadOnly { response },
        annotations: Map::new(),
    }
}

fn step(tool: &str, params: Value) -> ScriptStep {
    ScriptStep {
        tool: tool.into(),
        params: params.as_object().cloned().unwrap_or_default(),
    }
}

fn annotate(mut tool: ToolSpec, compensation: &str, mapping: Option<&str>) -> ToolSpec {
    tool.annotations
        .insert(COMPENSATION_TOOL_KEY.into(), Value::String(compensation.into()));
    if let Some(m) = mapping {
        tool.annotations.insert(INPUT_MAPPING_KEY.into(), Value::String(m.into()));
    }
    tool
}

/// Flight, hotel and car booking. Flight and hotel compensations come from
/// the API config, the car's from its MCP annotation.
pub fn travel() -> Preset {
    let book_flight = effect_tool(
        "book_flight",
        "Book a seat on a flight",
        vec![param("flight_id"), param("seat_class"), param("passenger_id")],
        "FL",
        "confirmation_ref",
    );
    let tools = vec![
        read_only(
            "search_flights",
            "Find flights between two airports",
            vec![param("origin"), param("destination"), param("date")],
            json!({"flights": [{"flight_id": "F100", "price": 420}, {"flight_id": "F200", "price": 515}]}),
        ),
        book_flight,
        compensation_tool("cancel_flight", "Cancel a flight booking", "book_flight", "booking_ref"),
        effect_tool(
            "book_hotel",
            "Reserve a hotel room",
            vec![param("city"), typed("nights", "integer"), param("guest_id")],
            "HT",
            "reservation_id",
        ),
        compensation_tool("cancel_hotel", "Cancel a hotel reservation", "book_hotel", "res_id"),
        annotate(
            effect_tool(
                "book_car",
                "Rent a car",
                vec![param("location"), typed("days", "integer"), param("driver_id")],
                "CR",
                "rental_id",
            ),
            "cancel_car",
            Some("rental_ref=result.rental_id"),
        ),
        compensation_tool("cancel_car", "Cancel a car rental", "book_car", "rental_ref"),
        read_only(
            "send_itinerary",
            "Email the traveller their itinerary",
            vec![param("flight_ref"), param("hotel_ref"), param("car_ref")],
            json!({"status": "sent"}),
        ),
    ];
    let script = vec![
        step("search_flights", json!({"origin": "SFO", "destination": "LIS", "date": "2025-06-01"})),
        step(
            "book_flight",
            json!({"flight_id": "$1.flights.0.flight_id", "seat_class": "economy", "passenger_id": "PAX-1"}),
        ),
        step("book_hotel", json!({"city": "Lisbon", "nights": 3, "guest_id": "PAX-1"})),
        step("book_car", json!({"location": "Lisbon", "days": 3, "driver_id": "PAX-1"})),
        step(
            "send_itinerary",
            json!({"flight_ref": "$2.confirmation_ref", "hotel_ref": "$3.reservation_id", "car_ref": "$4.rental_id"}),
        ),
    ];
    let mut api_config = ApiConfig::default();
    api_config.compensation_pairs.insert("book_flight".into(), "cancel_flight".into());
    api_config.compensation_pairs.insert("book_hotel".into(), "cancel_hotel".into());
    api_config.state_mappers.insert(
        "book_flight".into(),
        "booking_ref=result.confirmation_ref".parse().expect("static mapping"),
    );
    api_config.state_mappers.insert(
        "book_hotel".into(),
        "res_id=result.reservation_id".parse().expect("static mapping"),
    );
    Preset {
        tools,
        script,
        api_config,
        advisor: RuleTable::default(),
    }
}

/// Three machines, one job each. Compensations come from MCP annotations
/// without input mappings, so the advisor infers them at rollback time.
pub fn jobshop() -> Preset {
    let mut tools = Vec::new();
    for m in 1..=3 {
        tools.push(annotate(
            effect_tool(
                &format!("assign_machine_{m}"),
                &format!("Schedule a job on machine {m}"),
                vec![param("job_id"), typed("duration", "integer")],
                &format!("M{m}"),
                "assignment_id",
            ),
            &format!("unassign_machine_{m}"),
            None,
        ));
        tools.push(compensation_tool(
            &format!("unassign_machine_{m}"),
            &format!("Remove a job from machine {m}"),
            &format!("assign_machine_{m}"),
            "assignment_id",
        ));
    }
    tools.push(read_only(
        "publish_schedule",
        "Publish the final machine schedule",
        vec![typed("assignments", "array")],
        json!({"status": "published"}),
    ));
    let script = vec![
        step("assign_machine_1", json!({"job_id": "JOB-1", "duration": 4})),
        step("assign_machine_2", json!({"job_id": "JOB-2", "duration": 3})),
        step("assign_machine_3", json!({"job_id": "JOB-3", "duration": 5})),
        step(
            "publish_schedule",
            json!({"assignments": ["$1.assignment_id", "$2.assignment_id", "$3.assignment_id"]}),
        ),
    ];
    Preset {
        tools,
        script,
        api_config: ApiConfig::default(),
        advisor: RuleTable {
            infer_mappings: true,
            ..Default::default()
        },
    }
}

/// Three unrelated flight bookings, one per passenger. The compensation
/// pair is only known to the advisor.
pub fn group_booking() -> Preset {
    let tools = vec![
        effect_tool(
            "book_flight",
            "Book a seat on a flight",
            vec![param("flight_id"), param("passenger_id")],
            "FL",
            "confirmation_ref",
        ),
        compensation_tool("cancel_flight", "Cancel a flight booking", "book_flight", "booking_ref"),
    ];
    let script = vec![
        step("book_flight", json!({"flight_id": "UA100", "passenger_id": "PAX-A"})),
        step("book_flight", json!({"flight_id": "DL200", "passenger_id": "PAX-B"})),
        step("book_flight", json!({"flight_id": "AA300", "passenger_id": "PAX-C"})),
    ];
    let mut advisor = RuleTable::default();
    advisor.compensations.insert(
        "book_flight".into(),
        CompensationRule {
            tool: "cancel_flight".into(),
            input_mapping: Some("booking_ref=result.confirmation_ref".parse().expect("static mapping")),
        },
    );
    Preset {
        tools,
        script,
        api_config: ApiConfig::default(),
        advisor,
    }
}

pub fn preset(kind: ScenarioKind) -> Result<Preset, SimError> {
    match kind {
        ScenarioKind::Travel => Ok(travel()),
        ScenarioKind::Jobshop => Ok(jobshop()),
        ScenarioKind::GroupBooking => Ok(group_booking()),
        ScenarioKind::Custom => Err(SimError::UnknownKind("custom scenarios have no preset".into())),
    }
}

/// Builds an environment for a built-in scenario kind with `disruptions`
/// injected.
pub fn build_environment(kind: ScenarioKind, disruptions: &[DisruptionSpec]) -> Result<Environment, SimError> {
    let mut env = Environment::new(preset(kind)?.tools)?;
    for d in disruptions {
        env.inject(d.clone())?;
    }
    Ok(env)
}
