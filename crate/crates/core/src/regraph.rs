//! Execution graph rebuilt from a transaction log, and the rollback order
//! derived from it.
//!
//! Nodes are the `COMPLETED` forward records of a run. An edge `a -> b`
//! means `b` depends on `a`:
//!
//! - data rule: some leaf of `a.result` equals some leaf of `b.params`
//!   (strings of at least [`MIN_SHARED_STRING_LEN`] chars, or numbers);
//! - fallback rule: if `b` got no data edge and is not the first node, it
//!   depends on the completed record immediately before it.
//!
//! Rollback undoes dependents before the records they depend on. Among
//! records with no constraint between them the most recent goes first.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use serde_json::Value;
use thiserror::Error;

use crate::txlog::{RecordId, RecordStatus, ToolCallRecord};
use crate::value::leaves;

/// Shorter strings ("OK", "ok", "US") are too common to signal a dependency.
pub const MIN_SHARED_STRING_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Data,
    Fallback,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionGraph {
    nodes: BTreeSet<RecordId>,
    /// (from, to) -> kind; `to` depends on `from`.
    edges: BTreeMap<(RecordId, RecordId), EdgeKind>,
    labels: BTreeMap<RecordId, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("execution graph has a cycle through records {0:?}")]
    Cycle(Vec<RecordId>),
    #[error("edge {0} -> {1} references a missing node")]
    DanglingEdge(RecordId, RecordId),
}

impl ExecutionGraph {
    /// Builds a graph directly from nodes and edges. Used for hand-built
    /// graphs; logs go through [`build_graph`].
    pub fn from_edges(
        nodes: impl IntoIterator<Item = RecordId>,
        edges: impl IntoIterator<Item = (RecordId, RecordId)>,
    ) -> Result<Self, GraphError> {
        let nodes: BTreeSet<_> = nodes.into_iter().collect();
        let mut graph = ExecutionGraph {
            nodes,
            ..Default::default()
        };
        for (a, b) in edges {
            if !graph.nodes.contains(&a) || !graph.nodes.contains(&b) {
                return Err(GraphError::DanglingEdge(a, b));
            }
            graph.edges.insert((a, b), EdgeKind::Data);
        }
        Ok(graph)
    }

    pub fn nodes(&self) -> impl Iterator<Item = RecordId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (RecordId, RecordId, EdgeKind)> + '_ {
        self.edges.iter().map(|(&(a, b), &k)| (a, b, k))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, from: RecordId, to: RecordId) -> bool {
        self.edges.contains_key(&(from, to))
    }

    /// Graphviz DOT rendering, for debugging rollback plans.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph execution {\n  rankdir=LR;\n");
        for &n in &self.nodes {
            let label = match self.labels.get(&n) {
                Some(tool) => format!("{n}: {tool}"),
                None => n.to_string(),
            };
            let _ = writeln!(out, "  r{n} [label=\"{}\"];", label.replace('"', "\\\""));
        }
        for (&(a, b), kind) in &self.edges {
            let style = match kind {
                EdgeKind::Data => "solid",
                EdgeKind::Fallback => "dashed",
            };
            let _ = writeln!(out, "  r{a} -> r{b} [style={style}];");
        }
        out.push_str("}\n");
        out
    }
}

/// Whether a leaf value is distinctive enough to count as shared data.
fn is_linking_leaf(value: &Value) -> bool {
    match value {
        Value::String(s) => s.chars().count() >= MIN_SHARED_STRING_LEN,
        Value::Number(_) => true,
        _ => false,
    }
}

fn shares_data(provider: &ToolCallRecord, consumer: &ToolCallRecord) -> bool {
    let Some(result) = provider.result.as_ref() else {
        return false;
    };
    let produced: Vec<&Value> = leaves(result).into_iter().filter(|v| is_linking_leaf(v)).collect();
    if produced.is_empty() {
        return false;
    }
    consumer
        .params
        .values()
        .flat_map(leaves)
        .filter(|v| is_linking_leaf(v))
        .any(|v| produced.contains(&v))
}

/// Graph over the completed forward records of `records`.
pub fn build_graph(records: &[ToolCallRecord]) -> ExecutionGraph {
    let completed: Vec<&ToolCallRecord> = records
        .iter()
        .filter(|r| r.status == RecordStatus::Completed && r.compensates.is_none())
        .collect();
    let mut graph = ExecutionGraph::default();
    for (i, b) in completed.iter().enumerate() {
        graph.nodes.insert(b.record_id);
        graph.labels.insert(b.record_id, b.tool_name.clone());
        let mut has_incoming = false;
        for a in &completed[..i] {
            if shares_data(a, b) {
                graph.edges.insert((a.record_id, b.record_id), EdgeKind::Data);
                has_incoming = true;
            }
        }
        if !has_incoming && i > 0 {
            graph
                .edges
                .insert((completed[i - 1].record_id, b.record_id), EdgeKind::Fallback);
        }
    }
    graph
}

/// Graph of every forward record that ever completed, including ones
/// already compensated. Used for exports, not for planning rollback.
pub fn history_graph(records: &[ToolCallRecord]) -> ExecutionGraph {
    let view: Vec<ToolCallRecord> = records
        .iter()
        .filter(|r| r.status.carries_result() || r.status == RecordStatus::CompensationFailed)
        .map(|r| ToolCallRecord {
            status: RecordStatus::Completed,
            ..r.clone()
        })
        .collect();
    build_graph(&view)
}

/// Reverse topological order with descending-id tie-break.
///
/// A node is ready once everything that depends on it has been emitted; the
/// highest ready id is taken each step.
pub fn rollback_order(graph: &ExecutionGraph) -> Result<Vec<RecordId>, GraphError> {
    let mut dependents: BTreeMap<RecordId, usize> = graph.nodes.iter().map(|&n| (n, 0)).collect();
    let mut providers: BTreeMap<RecordId, Vec<RecordId>> = BTreeMap::new();
    for &(a, b) in graph.edges.keys() {
        *dependents.get_mut(&a).ok_or(GraphError::DanglingEdge(a, b))? += 1;
        providers.entry(b).or_default().push(a);
    }
    let mut ready: BinaryHeap<RecordId> = dependents
        .iter()
        .filter(|(_, &count)| count == 0)
        .map(|(&n, _)| n)
        .collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(n) = ready.pop() {
        order.push(n);
        for &p in providers.get(&n).into_iter().flatten() {
            let count = dependents.get_mut(&p).expect("provider is a node");
            *count -= 1;
            if *count == 0 {
                ready.push(p);
            }
        }
    }
    if order.len() != graph.nodes.len() {
        let stuck = dependents
            .into_iter()
            .filter(|&(n, c)| c > 0 && !order.contains(&n))
            .map(|(n, _)| n)
            .collect();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}
