//! Oracles and harness helpers shared by the integration and acceptance
//! tests.
#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use rac_core::regraph::{rollback_order, ExecutionGraph};
use rac_core::runner::{self, drive, judge, Outcome, RunArtifacts, RunOptions};
use rac_core::scenario::{load_str, LoadedScenario, ScenarioSpec};
use rac_core::simenv::{DisruptionMode, DisruptionSpec, Environment, LedgerVerdict, ScenarioKind};
use rac_core::tool::{ToolError, ToolExecutor};
use rac_core::txlog::RecordId;
use rac_core::value::Params;
use serde_json::Value;

// ---------------------------------------------------------------- graphs

/// A random DAG on up to `max_nodes` nodes with arbitrary distinct ids.
/// Edge direction follows a random permutation, so ids and dependency order
/// are unrelated and the tie-break actually matters.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize) -> (Vec<RecordId>, Vec<(RecordId, RecordId)>) {
    let n = rng.gen_range(0..=max_nodes);
    let mut ids: Vec<RecordId> = (1..=20).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    let density = rng.gen_range(0.0..0.8);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(density) {
                edges.push((ids[i], ids[j]));
            }
        }
    }
    (ids, edges)
}

fn permutations(items: &[RecordId]) -> Vec<Vec<RecordId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// An order undoes dependents first: for every edge a -> b, b precedes a.
pub fn is_valid_rollback(order: &[RecordId], edges: &[(RecordId, RecordId)]) -> bool {
    let pos = |x: RecordId| order.iter().position(|&y| y == x);
    edges.iter().all(|&(a, b)| match (pos(a), pos(b)) {
        (Some(pa), Some(pb)) => pb < pa,
        _ => false,
    })
}

/// Every valid rollback order, by enumeration.
pub fn brute_force_orders(nodes: &[RecordId], edges: &[(RecordId, RecordId)]) -> Vec<Vec<RecordId>> {
    permutations(nodes)
        .into_iter()
        .filter(|p| is_valid_rollback(p, edges))
        .collect()
}

/// Checks `rollback_order` against enumeration: the output must be one of
/// the valid orders and, with the descending-id tie-break, the
/// lexicographically greatest of them.
pub fn check_rollback_oracle(nodes: &[RecordId], edges: &[(RecordId, RecordId)]) -> Result<(), String> {
    let graph = ExecutionGraph::from_edges(nodes.iter().copied(), edges.iter().copied()).map_err(|e| e.to_string())?;
    let got = rollback_order(&graph).map_err(|e| e.to_string())?;
    let valid = brute_force_orders(nodes, edges);
    if !valid.contains(&got) {
        return Err(format!("{got:?} is not a valid rollback order of {nodes:?} / {edges:?}"));
    }
    let best = valid.iter().max().expect("a DAG has at least one order");
    if &got != best {
        return Err(format!("tie-break: got {got:?}, expected {best:?} for {nodes:?} / {edges:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- scenarios

pub fn scenario_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn load_golden(name: &str) -> LoadedScenario {
    rac_core::scenario::load_file(&scenario_dir().join(name)).expect("golden scenario loads")
}

pub fn load_spec(spec: &ScenarioSpec) -> LoadedScenario {
    load_str(&spec.to_toml(), &scenario_dir().join("generated.toml")).expect("generated scenario loads")
}

pub fn spec(name: &str, kind: ScenarioKind, seed: u64, disruptions: Vec<DisruptionSpec>) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        kind,
        seed,
        max_steps: None,
        mcp_tools: None,
        recovery: Default::default(),
        api_config: Default::default(),
        advisor: None,
        disruptions,
        tools: Vec::new(),
        script: Vec::new(),
    }
}

const CODES: &[&str] = &[
    "RATE_LIMITED",
    "TIMEOUT",
    "SERVICE_UNAVAILABLE",
    "PERMANENTLY_OFFLINE",
    "BOOKING_REJECTED",
    "PAYMENT_DECLINED",
    "GLITCH_0x1F",
];

/// A random fault-injection schedule: any built-in environment, zero to
/// three disruptions on any of its tools (compensations included), any
/// mode and any code, plus a random retry budget.
pub fn random_schedule(rng: &mut impl Rng, index: u64) -> ScenarioSpec {
    let kind = *ScenarioKind::BUILT_IN.choose(rng).expect("non-empty");
    let tools: Vec<String> = rac_core::simenv::preset(kind)
        .expect("preset")
        .tools
        .into_iter()
        .map(|t| t.name)
        .collect();
    let disruptions = (0..rng.gen_range(0..=3))
        .map(|_| {
            let mode = match rng.gen_range(0..3) {
                0 => DisruptionMode::Transient(rng.gen_range(1..=5)),
                1 => DisruptionMode::Permanent,
                _ => DisruptionMode::FailOnNthCall(rng.gen_range(1..=4)),
            };
            let target = tools.choose(rng).expect("tools");
            DisruptionSpec::new(target, mode, CODES.choose(rng).expect("codes"))
        })
        .collect();
    let mut s = spec(&format!("fuzz-{index}"), kind, rng.gen_range(0..1 << 32), disruptions);
    s.recovery.retry.max_retries = rng.gen_range(0..=3);
    s
}

pub fn run_scenario(scenario: &LoadedScenario) -> RunArtifacts {
    runner::run(scenario, &RunOptions::default()).expect("scenario runs")
}

// ---------------------------------------------------------------- crashes

/// Panics on the `crash_at`-th execution, i.e. right after the matching
/// log append became durable and before the tool runs.
pub struct CrashingExecutor<'a> {
    pub inner: &'a mut Environment,
    pub crash_at: usize,
    pub calls: usize,
}

impl ToolExecutor for CrashingExecutor<'_> {
    fn is_registered(&self, tool: &str) -> bool {
        self.inner.is_registered(tool)
    }

    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError> {
        self.calls += 1;
        if self.calls == self.crash_at {
            panic!("simulated crash after append {}", self.crash_at);
        }
        self.inner.execute(tool, params)
    }
}

pub struct CrashReplay {
    pub crashed: bool,
    pub outcome: Outcome,
    pub verdict: LedgerVerdict,
    pub records_before: usize,
}

/// Runs `scenario` with the process "killed" after the `n`-th log append,
/// then reopens the log from disk with a fresh engine and rolls back.
pub fn crash_and_replay(scenario: &LoadedScenario, n: usize, dir: &Path) -> CrashReplay {
    let options = RunOptions {
        log_dir: Some(dir.to_owned()),
        ..Default::default()
    };
    let mut env = runner::build_environment(scenario).expect("environment");
    let builder = runner::engine_builder(scenario, &options).expect("builder");
    let first = catch_unwind(AssertUnwindSafe(|| {
        let mut engine = builder
            .build(CrashingExecutor {
                inner: &mut env,
                crash_at: n,
                calls: 0,
            })
            .expect("engine");
        drive(&mut engine, &scenario.script, None).expect("drive")
    }));
    let crashed = first.is_err();

    // a new process: same world, same log directory, no in-memory state
    let resume = RunOptions {
        log_dir: None,
        ..Default::default()
    };
    let mut engine = runner::engine_builder(scenario, &resume)
        .expect("builder")
        .log_dir(dir)
        .build(&mut env)
        .expect("reopen");
    let records_before = engine.records().len();
    let report = match first {
        Ok(done) if done.rollback.is_none() => None,
        Ok(done) => done.rollback,
        Err(_) => Some(engine.rollback("resuming after a crash").expect("rollback")),
    };
    drop(engine);
    let (outcome, verdict) = judge(&env, report.as_ref());
    CrashReplay {
        crashed,
        outcome,
        verdict,
        records_before,
    }
}
