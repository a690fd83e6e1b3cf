//! Helpers over the structured values carried by tool params and results.

use serde_json::{Map, Value};

/// Named tool inputs. Keys are kept sorted so serialized logs are stable.
pub type Params = Map<String, Value>;

/// Collects every leaf (non-container) value reachable from `value`, in
/// document order.
pub fn leaves(value: &Value) -> Vec<&Value> {
    let mut out = Vec::new();
    collect_leaves(value, &mut out);
    out
}

fn collect_leaves<'a>(value: &'a Value, out: &mut Vec<&'a Value>) {
    match value {
        Value::Array(items) => items.iter().for_each(|v| collect_leaves(v, out)),
        Value::Object(map) => map.values().for_each(|v| collect_leaves(v, out)),
        leaf => out.push(leaf),
    }
}

/// Looks up a dot-separated path. Integer segments index into lists.
///
/// An empty path addresses the value itself.
pub fn lookup_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |current, segment| match current {
        Value::Object(map) => map.get(segment),
        Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// True when `path` is syntactically usable: non-empty segments only.
pub fn is_valid_path(path: &str) -> bool {
    !path.is_empty() && path.split('.').all(|s| !s.is_empty())
}
