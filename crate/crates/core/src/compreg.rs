//! Compensation pairs and input mappings.
//!
//! A tool's compensation is looked up in this order:
//!
//! 1. the API configuration handed to the engine (`compensation_pairs`,
//!    `state_mappers`);
//! 2. the tool's MCP annotations (`x-compensation-tool`, `input-mapping`);
//! 3. the advisor.
//!
//! When none of them knows a compensation the tool is assumed to have no
//! side effects. A tier that names a compensation tool but no input mapping
//! leaves every required parameter of that tool to be inferred by the
//! advisor when the rollback runs.
//!
//! # Input mapping grammar
//!
//! ```text
//! mapping := "" | rule (";" rule)*
//! rule    := comp_param "=" source
//! source  := "params." name | "result." path
//! path    := segment ("." segment)*        integer segments index lists
//! ```
//!
//! Whitespace around rules and around `=` is ignored when parsing; the
//! canonical rendering has none.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::advisor::{Advisor, AdvisorAnswer, AdvisorQuery, QueryKind, ToolSummary};
use crate::txlog::{RecordId, RecordStatus, ToolCallRecord};
use crate::value::{is_valid_path, lookup_path, Params};

pub const COMPENSATION_TOOL_KEY: &str = "x-compensation-tool";
pub const INPUT_MAPPING_KEY: &str = "input-mapping";

/// Where a compensation parameter's value comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "source", content = "path", rename_all = "snake_case")]
pub enum MappingSource {
    ForwardParam(String),
    ForwardResultPath(String),
    AdvisorInferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MappingRule {
    pub param: String,
    pub source: MappingSource,
}

impl MappingRule {
    pub fn inferred(param: impl Into<String>) -> Self {
        Self {
            param: param.into(),
            source: MappingSource::AdvisorInferred,
        }
    }
}

impl fmt::Display for MappingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source {
            MappingSource::ForwardParam(name) => write!(f, "{}=params.{name}", self.param),
            MappingSource::ForwardResultPath(path) => write!(f, "{}=result.{path}", self.param),
            MappingSource::AdvisorInferred => write!(f, "{}=<inferred>", self.param),
        }
    }
}

/// A parsed `input-mapping` string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InputMapping(pub Vec<MappingRule>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid input mapping rule {index} ({rule:?}): {reason}")]
pub struct MappingSyntaxError {
    pub index: usize,
    pub rule: String,
    pub reason: &'static str,
}

impl FromStr for InputMapping {
    type Err = MappingSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(InputMapping(Vec::new()));
        }
        let mut seen = BTreeSet::new();
        s.split(';')
            .enumerate()
            .map(|(index, raw)| {
                let err = |reason| MappingSyntaxError {
                    index,
                    rule: raw.to_owned(),
                    reason,
                };
                let (param, source) = raw.split_once('=').ok_or_else(|| err("missing '='"))?;
                let (param, source) = (param.trim(), source.trim());
                if param.is_empty() {
                    return Err(err("empty parameter name"));
                }
                if !seen.insert(param.to_owned()) {
                    return Err(err("parameter mapped twice"));
                }
                let source = if let Some(name) = source.strip_prefix("params.") {
                    if name.is_empty() || name.contains('.') {
                        return Err(err("params source must name one parameter"));
                    }
                    MappingSource::ForwardParam(name.to_owned())
                } else if let Some(path) = source.strip_prefix("result.") {
                    if !is_valid_path(path) {
                        return Err(err("malformed result path"));
                    }
                    MappingSource::ForwardResultPath(path.to_owned())
                } else {
                    return Err(err("source must start with 'params.' or 'result.'"));
                };
                Ok(MappingRule {
                    param: param.to_owned(),
                    source,
                })
            })
            .collect::<Result<_, _>>()
            .map(InputMapping)
    }
}

impl fmt::Display for InputMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, rule) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{rule}")?;
        }
        Ok(())
    }
}

impl Serialize for InputMapping {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InputMapping {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    ApiConfig,
    McpAnnotation,
    Advisor,
    AssumedNoSideEffects,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationBinding {
    pub forward_tool: String,
    /// `None` means the tool is treated as free of side effects.
    pub compensation_tool: Option<String>,
    pub input_mapping: Vec<MappingRule>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSchema {
    #[serde(rename = "type", default = "object_type")]
    pub schema_type: String,
    #[serde(default)]
    pub properties: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

fn object_type() -> String {
    "object".into()
}

impl InputSchema {
    pub fn declares(&self, param: &str) -> bool {
        self.properties.contains_key(param)
    }
}

/// An MCP tool declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "inputSchema")]
    pub input_schema: InputSchema,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub annotations: Map<String, Value>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ToolDefinition {
    pub fn compensation_annotation(&self) -> Option<&str> {
        self.annotations.get(COMPENSATION_TOOL_KEY).and_then(Value::as_str)
    }

    pub fn mapping_annotation(&self) -> Option<Result<InputMapping, MappingSyntaxError>> {
        self.annotations
            .get(INPUT_MAPPING_KEY)
            .and_then(Value::as_str)
            .map(str::parse)
    }

    pub fn summary(&self) -> ToolSummary {
        ToolSummary {
            name: self.name.clone(),
            description: self.description.clone(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("tool name is empty".into());
        }
        if let Some(missing) = self.input_schema.required.iter().find(|r| !self.input_schema.declares(r)) {
            return Err(format!("required parameter {missing:?} is not a declared property"));
        }
        match self.annotations.get(COMPENSATION_TOOL_KEY) {
            None | Some(Value::String(_)) => {}
            Some(other) => return Err(format!("{COMPENSATION_TOOL_KEY} must be a string, got {other}")),
        }
        match self.annotations.get(INPUT_MAPPING_KEY) {
            None => {}
            Some(Value::String(s)) => {
                s.parse::<InputMapping>().map_err(|e| e.to_string())?;
            }
            Some(other) => return Err(format!("{INPUT_MAPPING_KEY} must be a string, got {other}")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McpParseError {
    #[error("MCP tool document is not valid JSON: {0}")]
    Json(String),
    #[error("MCP tool document must be a list of tool declarations")]
    NotAList,
    #[error("tool entry {index}: {reason}")]
    Entry { index: usize, reason: String },
}

/// Parses a list of MCP tool declarations.
pub fn parse_mcp_tools(document: &str) -> Result<Vec<ToolDefinition>, McpParseError> {
    let value: Value = serde_json::from_str(document).map_err(|e| McpParseError::Json(e.to_string()))?;
    parse_mcp_value(&value)
}

pub fn parse_mcp_value(value: &Value) -> Result<Vec<ToolDefinition>, McpParseError> {
    let entries = value.as_array().ok_or(McpParseError::NotAList)?;
    entries
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let entry_err = |reason: String| McpParseError::Entry { index, reason };
            let def: ToolDefinition = serde_json::from_value(entry.clone()).map_err(|e| entry_err(e.to_string()))?;
            def.validate().map_err(entry_err)?;
            Ok(def)
        })
        .collect()
}

/// The tools available in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolDefinition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("tool {0:?} registered twice")]
pub struct DuplicateTool(pub String);

impl ToolRegistry {
    pub fn new(defs: impl IntoIterator<Item = ToolDefinition>) -> Result<Self, DuplicateTool> {
        let mut registry = Self::default();
        for def in defs {
            registry.insert(def)?;
        }
        Ok(registry)
    }

    pub fn insert(&mut self, def: ToolDefinition) -> Result<(), DuplicateTool> {
        if self.tools.contains_key(&def.name) {
            return Err(DuplicateTool(def.name));
        }
        self.tools.insert(def.name.clone(), def);
        Ok(())
    }

    /// Inserts or replaces a definition.
    pub fn upsert(&mut self, def: ToolDefinition) {
        self.tools.insert(def.name.clone(), def);
    }

    pub fn get(&self, name: &str) -> Option<&ToolDefinition> {
        self.tools.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolDefinition> {
        self.tools.values()
    }

    pub fn summaries(&self) -> Vec<ToolSummary> {
        self.tools.values().map(ToolDefinition::summary).collect()
    }
}

/// Compensation pairs and mappings supplied programmatically.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default)]
    pub compensation_pairs: BTreeMap<String, String>,
    #[serde(default)]
    pub state_mappers: BTreeMap<String, InputMapping>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("tool {0:?} is not registered")]
    UnknownTool(String),
    #[error("{provenance:?} names compensation {compensation:?} for {forward:?}, which is not registered")]
    UnregisteredCompensation {
        forward: String,
        compensation: String,
        provenance: Provenance,
    },
    #[error("mapping for {forward:?} sets {param:?}, which {compensation:?} does not declare")]
    UndeclaredParam {
        forward: String,
        compensation: String,
        param: String,
    },
    #[error("state mapper for {0:?} has no matching compensation pair")]
    OrphanStateMapper(String),
    #[error("input-mapping annotation on {tool:?}: {source}")]
    BadAnnotation {
        tool: String,
        #[source]
        source: MappingSyntaxError,
    },
}

fn inferred_mapping(compensation: &ToolDefinition) -> Vec<MappingRule> {
    compensation
        .input_schema
        .required
        .iter()
        .map(MappingRule::inferred)
        .collect()
}

fn checked_binding(
    forward: &str,
    compensation: &str,
    mapping: Option<Vec<MappingRule>>,
    provenance: Provenance,
    registry: &ToolRegistry,
) -> Result<CompensationBinding, ResolveError> {
    let comp_def = registry
        .get(compensation)
        .ok_or_else(|| ResolveError::UnregisteredCompensation {
            forward: forward.to_owned(),
            compensation: compensation.to_owned(),
            provenance,
        })?;
    let input_mapping = mapping.unwrap_or_else(|| inferred_mapping(comp_def));
    if let Some(rule) = input_mapping.iter().find(|r| !comp_def.input_schema.declares(&r.param)) {
        return Err(ResolveError::UndeclaredParam {
            forward: forward.to_owned(),
            compensation: compensation.to_owned(),
            param: rule.param.clone(),
        });
    }
    Ok(CompensationBinding {
        forward_tool: forward.to_owned(),
        compensation_tool: Some(compensation.to_owned()),
        input_mapping,
        provenance,
    })
}

/// Resolves the compensation binding of `forward_tool`.
pub fn resolve(
    forward_tool: &str,
    api_config: &ApiConfig,
    registry: &ToolRegistry,
    advisor: &dyn Advisor,
) -> Result<CompensationBinding, ResolveError> {
    let def = registry
        .get(forward_tool)
        .ok_or_else(|| ResolveError::UnknownTool(forward_tool.to_owned()))?;

    if let Some(comp) = api_config.compensation_pairs.get(forward_tool) {
        let mapping = api_config.state_mappers.get(forward_tool).map(|m| m.0.clone());
        return checked_binding(forward_tool, comp, mapping, Provenance::ApiConfig, registry);
    }
    if api_config.state_mappers.contains_key(forward_tool) {
        return Err(ResolveError::OrphanStateMapper(forward_tool.to_owned()));
    }

    if let Some(comp) = def.compensation_annotation() {
        let mapping = def
            .mapping_annotation()
            .transpose()
            .map_err(|source| ResolveError::BadAnnotation {
                tool: forward_tool.to_owned(),
                source,
            })?
            .map(|m| m.0);
        return checked_binding(forward_tool, comp, mapping, Provenance::McpAnnotation, registry);
    }

    let query = AdvisorQuery::DiscoverCompensation {
        tool_name: forward_tool.to_owned(),
        registry: registry.summaries(),
    };
    if let AdvisorAnswer::Binding {
        compensation_tool,
        input_mapping,
    } = advisor.consult(&query)
    {
        // an advisor answer naming an unknown tool or parameter is ignored
        match checked_binding(forward_tool, &compensation_tool, input_mapping, Provenance::Advisor, registry) {
            Ok(binding) => return Ok(binding),
            Err(e) => log::warn!("discarding advisor compensation for {forward_tool}: {e}"),
        }
    }

    Ok(CompensationBinding {
        forward_tool: forward_tool.to_owned(),
        compensation_tool: None,
        input_mapping: Vec::new(),
        provenance: Provenance::AssumedNoSideEffects,
    })
}

/// Bindings for every registered tool, resolved once per run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompensationRegistry {
    bindings: BTreeMap<String, CompensationBinding>,
}

impl CompensationRegistry {
    pub fn build(api_config: &ApiConfig, registry: &ToolRegistry, advisor: &dyn Advisor) -> Result<Self, ResolveError> {
        for tool in api_config.compensation_pairs.keys().chain(api_config.state_mappers.keys()) {
            if !registry.contains(tool) {
                return Err(ResolveError::UnknownTool(tool.clone()));
            }
        }
        let bindings = registry
            .iter()
            .map(|def| resolve(&def.name, api_config, registry, advisor).map(|b| (def.name.clone(), b)))
            .collect::<Result<_, _>>()?;
        Ok(Self { bindings })
    }

    pub fn binding(&self, tool: &str) -> Option<&CompensationBinding> {
        self.bindings.get(tool)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CompensationBinding> {
        self.bindings.values()
    }
}

/// Where an extracted value was taken from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueOrigin {
    ForwardParam(String),
    ForwardResult(String),
    /// The advisor chose the source; the value itself still comes from the
    /// forward record.
    Advised(MappingSource),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedValue {
    pub param: String,
    pub value: Value,
    pub origin: ValueOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("record {record_id}: binding for {tool:?} has no compensation")]
    NoCompensation { record_id: RecordId, tool: String },
    #[error("record {record_id} is {status}, only COMPLETED records are compensated")]
    NotCompleted { record_id: RecordId, status: RecordStatus },
    #[error("record {record_id}: rule {rule} resolved to nothing")]
    Unresolved { record_id: RecordId, rule: String },
    #[error("record {record_id}: advisor could not map {param:?} for {compensation:?}")]
    Unmapped {
        record_id: RecordId,
        compensation: String,
        param: String,
    },
    #[error("record {record_id}: {compensation:?} requires {param:?}, which no rule provides")]
    MissingRequired {
        record_id: RecordId,
        compensation: String,
        param: String,
    },
}

fn read_source(source: &MappingSource, record: &ToolCallRecord) -> Option<Value> {
    match source {
        MappingSource::ForwardParam(name) => record.params.get(name).cloned(),
        MappingSource::ForwardResultPath(path) => record.result.as_ref().and_then(|r| lookup_path(r, path)).cloned(),
        MappingSource::AdvisorInferred => None,
    }
}

/// Builds the compensation call's params, tagging each value with its origin.
pub fn extract_params_traced(
    binding: &CompensationBinding,
    record: &ToolCallRecord,
    registry: &ToolRegistry,
    advisor: &dyn Advisor,
    history: &[ToolCallRecord],
) -> Result<Vec<ExtractedValue>, ExtractError> {
    let record_id = record.record_id;
    let Some(compensation) = binding.compensation_tool.as_deref() else {
        return Err(ExtractError::NoCompensation {
            record_id,
            tool: binding.forward_tool.clone(),
        });
    };
    if record.status != RecordStatus::Completed {
        return Err(ExtractError::NotCompleted {
            record_id,
            status: record.status,
        });
    }
    let mut out = Vec::with_capacity(binding.input_mapping.len());
    for rule in &binding.input_mapping {
        let unresolved = || ExtractError::Unresolved {
            record_id,
            rule: rule.to_string(),
        };
        let extracted = match &rule.source {
            MappingSource::ForwardParam(name) => ExtractedValue {
                param: rule.param.clone(),
                value: read_source(&rule.source, record).ok_or_else(unresolved)?,
                origin: ValueOrigin::ForwardParam(name.clone()),
            },
            MappingSource::ForwardResultPath(path) => ExtractedValue {
                param: rule.param.clone(),
                value: read_source(&rule.source, record).ok_or_else(unresolved)?,
                origin: ValueOrigin::ForwardResult(path.clone()),
            },
            MappingSource::AdvisorInferred => {
                let query = AdvisorQuery::InferInputMapping {
                    compensation_tool: compensation.to_owned(),
                    param: rule.param.clone(),
                    forward: record.clone(),
                    history: history.to_vec(),
                };
                let answer = advisor.consult(&query);
                let source = match answer {
                    AdvisorAnswer::Mapping(source) if answer_is_concrete(&source) => source,
                    other => {
                        if !other.answers(QueryKind::InferInputMapping) {
                            log::warn!("advisor answered a mapping query with {other:?}");
                        }
                        return Err(ExtractError::Unmapped {
                            record_id,
                            compensation: compensation.to_owned(),
                            param: rule.param.clone(),
                        });
                    }
                };
                let value = read_source(&source, record).ok_or_else(|| ExtractError::Unresolved {
                    record_id,
                    rule: MappingRule {
                        param: rule.param.clone(),
                        source: source.clone(),
                    }
                    .to_string(),
                })?;
                ExtractedValue {
                    param: rule.param.clone(),
                    value,
                    origin: ValueOrigin::Advised(source),
                }
            }
        };
        out.push(extracted);
    }
    if let Some(def) = registry.get(compensation) {
        if let Some(missing) = def.input_schema.required.iter().find(|r| !out.iter().any(|e| &e.param == *r)) {
            return Err(ExtractError::MissingRequired {
                record_id,
                compensation: compensation.to_owned(),
                param: missing.clone(),
            });
        }
    }
    Ok(out)
}

fn answer_is_concrete(source: &MappingSource) -> bool {
    !matches!(source, MappingSource::AdvisorInferred)
}

/// Builds the params for the compensation call of `record`.
pub fn extract_params(
    binding: &CompensationBinding,
    record: &ToolCallRecord,
    registry: &ToolRegistry,
    advisor: &dyn Advisor,
    history: &[ToolCallRecord],
) -> Result<Params, ExtractError> {
    extract_params_traced(binding, record, registry, advisor, history)
        .map(|values| values.into_iter().map(|e| (e.param, e.value)).collect())
}
