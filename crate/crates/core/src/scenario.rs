//! Scenario files: which simulated environment to build, what to break in
//! it, and how the engine is configured for the run.
//!
//! ```toml
//! name = "p14-group-booking"
//! kind = "group_booking"
//! seed = 14
//!
//! [[disruptions]]
//! target_tool = "book_flight"
//! mode = { fail_on_nth_call = 3 }
//! error_code = "BOOKING_REJECTED"
//! ```
//!
//! Everything else is optional: `max_steps`, `mcp_tools` (path to an MCP
//! tool list, relative to the scenario file), `[recovery]` with a nested
//! `[recovery.retry]`, `[api_config]`, `[advisor]` (rule table; the preset's
//! table when absent), extra `[[tools]]` and a replacement `[[script]]`.
//! `kind = "custom"` requires both of the latter.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::RuleTable;
use crate::compreg::{parse_mcp_tools, ApiConfig, McpParseError, ToolDefinition};
use crate::rcmanager::RecoveryConfig;
use crate::simenv::{self, DisruptionSpec, ScenarioKind, ScriptStep, ToolSpec};
use crate::value::is_valid_path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcp_tools: Option<PathBuf>,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub api_config: ApiConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisor: Option<RuleTable>,
    #[serde(default)]
    pub disruptions: Vec<DisruptionSpec>,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}{}: field `{field}`: {reason}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        path: PathBuf,
        field: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("{path}: MCP tool document: {source}")]
    Mcp {
        path: PathBuf,
        #[source]
        source: McpParseError,
    },
}

/// A scenario with everything resolved: the environment's tools, the
/// definitions the engine sees, the script and the advisor rules.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub spec: ScenarioSpec,
    pub env_tools: Vec<ToolSpec>,
    pub definitions: Vec<ToolDefinition>,
    pub script: Vec<ScriptStep>,
    pub advisor: RuleTable,
    pub api_config: ApiConfig,
}

/// 1-based line of the first line containing all of `needles`.
fn line_of(source: &str, needles: &[&str]) -> Option<usize> {
    source
        .lines()
        .position(|l| needles.iter().all(|n| l.contains(n)))
        .map(|i| i + 1)
}

impl ScenarioSpec {
    pub fn parse(source: &str, path: &Path) -> Result<Self, ScenarioError> {
        toml::from_str(source).map_err(|e| ScenarioError::Parse {
            path: path.to_owned(),
            message: e.to_string().trim_end().to_owned(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

pub fn load_file(path: &Path) -> Result<LoadedScenario, ScenarioError> {
    let source = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })?;
    load_str(&source, path)
}

/// Parses and validates a scenario. `path` locates relative `mcp_tools`
/// files and labels diagnostics.
pub fn load_str(source: &str, path: &Path) -> Result<LoadedScenario, ScenarioError> {
    let spec = ScenarioSpec::parse(source, path)?;
    let invalid = |field: &str, needles: &[&str], reason: String| ScenarioError::Invalid {
        path: path.to_owned(),
        field: field.to_owned(),
        line: line_of(source, needles),
        reason,
    };

    let (mut env_tools, mut script, preset_advisor, mut api_config) = match spec.kind {
        ScenarioKind::Custom => {
            if spec.tools.is_empty() {
                return Err(invalid("tools", &["kind"], "a custom scenario must define [[tools]]".into()));
            }
            if spec.script.is_empty() {
                return Err(invalid("script", &["kind"], "a custom scenario must define [[script]]".into()));
            }
            (Vec::new(), Vec::new(), RuleTable::default(), ApiConfig::default())
        }
        kind => {
            let p = simenv::preset(kind).expect("built-in kind has a preset");
            (p.tools, p.script, p.advisor, p.api_config)
        }
    };
    env_tools.extend(spec.tools.iter().cloned());
    if !spec.script.is_empty() {
        script = spec.script.clone();
    }
    // scenario entries refine the preset's pairs rather than replacing them
    api_config.compensation_pairs.extend(spec.api_config.compensation_pairs.clone());
    api_config.state_mappers.extend(spec.api_config.state_mappers.clone());

    let mut seen = BTreeSet::new();
    for t in &env_tools {
        if !seen.insert(t.name.as_str()) {
            return Err(invalid("tools.name", &["name", &t.name], format!("duplicate tool {:?}", t.name)));
        }
    }
    if let Err(reason) = spec.recovery.retry.validate() {
        return Err(invalid("recovery.retry", &["retry"], reason));
    }
    for d in &spec.disruptions {
        if !seen.contains(d.target_tool.as_str()) {
            return Err(invalid(
                "disruptions.target_tool",
                &["target_tool", &d.target_tool],
                format!("unknown tool {:?}", d.target_tool),
            ));
        }
    }
    for (i, s) in script.iter().enumerate() {
        if !seen.contains(s.tool.as_str()) {
            return Err(invalid("script.tool", &["tool", &s.tool], format!("step {} calls unknown tool {:?}", i + 1, s.tool)));
        }
        for reference in step_references(&serde_json::Value::Object(s.params.clone())) {
            let ok = match parse_reference(reference) {
                Some((n, path)) => n >= 1 && n <= i && (path.is_empty() || is_valid_path(path)),
                None => false,
            };
            if !ok {
                return Err(invalid(
                    "script.params",
                    &[reference],
                    format!("step {} has bad reference {reference:?}; use $N.path with N below the step", i + 1),
                ));
            }
        }
    }

    let mut definitions: Vec<ToolDefinition> = env_tools.iter().map(ToolSpec::definition).collect();
    if let Some(rel) = &spec.mcp_tools {
        let mcp_path = path.parent().unwrap_or(Path::new(".")).join(rel);
        let doc = fs::read_to_string(&mcp_path).map_err(|source| ScenarioError::Io {
            path: mcp_path.clone(),
            source,
        })?;
        let defs = parse_mcp_tools(&doc).map_err(|source| ScenarioError::Mcp {
            path: mcp_path.clone(),
            source,
        })?;
        for def in defs {
            match definitions.iter_mut().find(|d| d.name == def.name) {
                Some(slot) => *slot = def,
                None => definitions.push(def),
            }
        }
    }

    let advisor = spec.advisor.clone().unwrap_or(preset_advisor);
    Ok(LoadedScenario {
        spec,
        env_tools,
        definitions,
        script,
        advisor,
        api_config,
    })
}

/// Splits `$N.path` into the 1-based step and the path. A bare `$N` refers
/// to the whole result.
pub fn parse_reference(s: &str) -> Option<(usize, &str)> {
    let rest = s.strip_prefix('$')?;
    let (n, path) = rest.split_once('.').unwrap_or((rest, ""));
    Some((n.parse().ok()?, path))
}

fn step_references(value: &serde_json::Value) -> Vec<&str> {
    match value {
        serde_json::Value::String(s) if s.starts_with('$') => vec![s.as_str()],
        serde_json::Value::Array(items) => items.iter().flat_map(step_references).collect(),
        serde_json::Value::Object(map) => map.values().flat_map(step_references).collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::DisruptionMode;

    const P14: &str = r#"
name = "p14"
kind = "group_booking"
seed = 14

[[disruptions]]
target_tool = "book_flight"
mode = { fail_on_nth_call = 3 }
error_code = "BOOKING_REJECTED"
"#;

    #[test]
    fn loads_builtin_with_preset_defaults() {
        let s = load_str(P14, Path::new("p14.toml")).unwrap();
        assert_eq!(s.spec.disruptions[0].mode, DisruptionMode::FailOnNthCall(3));
        assert_eq!(s.script.len(), 3);
        assert!(s.advisor.compensations.contains_key("book_flight"));
        assert_eq!(s.spec.recovery, RecoveryConfig::default());
    }

    #[test]
    fn parse_error_names_line_and_field() {
        let bad = "name = \"x\"\nkind = \"jobshop\"\nsede = 3\n";
        let err = load_str(bad, Path::new("bad.toml")).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn unknown_disruption_target_names_field_and_line() {
        let bad = P14.replace("target_tool = \"book_flight\"", "target_tool = \"book_train\"");
        let err = load_str(&bad, Path::new("p.toml")).unwrap_err();
        match &err {
            ScenarioError::Invalid { field, line, .. } => {
                assert_eq!(field, "disruptions.target_tool");
                assert_eq!(*line, Some(7));
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("p.toml:7"));
    }

    #[test]
    fn forward_references_are_rejected() {
        let bad = r#"
name = "x"
kind = "jobshop"
[[script]]
tool = "publish_schedule"
params = { assignments = ["$1.assignment_id"] }
"#;
        let err = load_str(bad, Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid { ref field, .. } if field == "script.params"), "{err}");
    }

    #[test]
    fn custom_requires_tools() {
        let err = load_str("name = \"c\"\nkind = \"custom\"\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("tools"));
    }

    #[test]
    fn references() {
        assert_eq!(parse_reference("$2.assignment_id"), Some((2, "assignment_id")));
        assert_eq!(parse_reference("$3"), Some((3, "")));
        assert_eq!(parse_reference("$x.y"), None);
        assert_eq!(parse_reference("plain"), None);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = ScenarioSpec::parse(P14, Path::new("p")).unwrap();
        assert_eq!(ScenarioSpec::parse(&s.to_toml(), Path::new("p")).unwrap(), s);
    }
}
