//! Acceptance criteria AC1-AC9. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits non-zero on any failure.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rac_core::advisor::{AbstainingAdvisor, Advisor, AdvisorAnswer, AdvisorQuery};
use rac_core::compreg::{parse_mcp_tools, resolve, ApiConfig, Provenance, ToolRegistry};
use rac_core::rcmanager::CompensationOutcome;
use rac_core::runner::{render_report, run, Outcome, ReportFormat, RunOptions};
use rac_core::simenv::ScenarioKind;

use common::*;

const P12: &str = "p12_jobshop_transient.toml";
const P13: &str = "p13_jobshop_permanent.toml";
const P14: &str = "p14_group_booking.toml";
const TRAVEL: &str = "travel_car_declined.toml";

// runtime bounds
const SCENARIO_BOUND: Duration = Duration::from_secs(1);
const FUZZ_BOUND: Duration = Duration::from_secs(60);
const ORACLE_BOUND: Duration = Duration::from_secs(10);
// sample sizes
const FUZZ_CASES: u64 = 1000;
const ORACLE_CASES: usize = 500;
const ORACLE_MAX_NODES: usize = 6;
const CRASH_POINTS: std::ops::RangeInclusive<usize> = 1..=5;

type Check = Result<String, String>;
/// name, API config, registry, advisor, expected provenance, expected tool
type PrecedenceCase<'a> = (&'a str, &'a ApiConfig, &'a ToolRegistry, &'a dyn Advisor, Provenance, Option<&'a str>);
type Criterion = (&'static str, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, bound: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < bound, || format!("took {took:?}, bound {bound:?}"))
}

fn ac1() -> Check {
    let started = Instant::now();
    let scenario = load_golden(P12);
    let mut outcomes = Vec::new();
    for seed in [12, 1, 999] {
        let opts = RunOptions {
            seed: Some(seed),
            ..Default::default()
        };
        let a = run(&scenario, &opts).map_err(|e| e.to_string())?;
        let b = run(&scenario, &opts).map_err(|e| e.to_string())?;
        let r = &a.report;
        ensure(r.outcome == Outcome::Success, || format!("seed {seed}: outcome {:?}", r.outcome))?;
        ensure(r.counts.compensations == 0, || format!("seed {seed}: {} compensations", r.counts.compensations))?;
        ensure(r.counts.retries >= 1, || format!("seed {seed}: no retry recorded"))?;
        ensure(r.ledger.clean, || format!("seed {seed}: ledger dirty"))?;
        ensure(a.report == b.report && a.records == b.records, || format!("seed {seed}: reruns differ"))?;
        outcomes.push((r.outcome, r.counts.retries, r.counts.compensations));
    }
    ensure(outcomes.windows(2).all(|w| w[0] == w[1]), || format!("outcomes vary by seed: {outcomes:?}"))?;
    within(started, SCENARIO_BOUND)?;
    Ok(format!("SUCCESS, 0 compensations, {} retries, CLEAN on 3 seeds", outcomes[0].1))
}

fn ac2() -> Check {
    let started = Instant::now();
    let after = run_scenario(&load_golden(P13));
    let r = &after.report;
    ensure(r.outcome == Outcome::RolledBackClean, || format!("outcome {:?}", r.outcome))?;
    let effects = &after.environment.ledger().effects;
    ensure(!effects.is_empty() && effects.iter().all(|e| e.reversed), || {
        format!("effects not all reversed: {effects:?}")
    })?;
    let first = run_scenario(&load_golden("variants/p13_fail_first.toml"));
    ensure(first.report.outcome == Outcome::RolledBackClean, || {
        format!("fail-first outcome {:?}", first.report.outcome)
    })?;
    ensure(first.environment.ledger().effects.is_empty(), || "fail-first produced effects".into())?;
    within(started, SCENARIO_BOUND)?;
    Ok(format!(
        "ROLLED_BACK_CLEAN; fail-after-effects reversed {}/{} effects; fail-first had none",
        effects.len(),
        effects.len()
    ))
}

fn ac3() -> Check {
    let started = Instant::now();
    let art = run_scenario(&load_golden(P14));
    let report = art.rollback.as_ref().ok_or("no rollback happened")?;
    let compensated: Vec<_> = report
        .entries
        .iter()
        .filter(|e| e.outcome == CompensationOutcome::Compensated)
        .map(|e| e.record_id)
        .collect();
    ensure(compensated == vec![2, 1], || format!("compensated {compensated:?}, want [2, 1]"))?;
    ensure(art.report.counts.compensations == 2, || format!("{} compensations", art.report.counts.compensations))?;
    let cancels: Vec<_> = art
        .environment
        .ledger()
        .call_trace
        .iter()
        .filter(|c| c.tool == "cancel_flight")
        .map(|c| c.params.get("booking_ref").cloned())
        .collect();
    ensure(
        cancels == vec![Some("FL-0002".into()), Some("FL-0001".into())],
        || format!("cancellation order {cancels:?}"),
    )?;
    ensure(art.report.ledger.clean, || "ledger dirty".into())?;
    let golden = fs::read_to_string(golden_dir().join("p14_summary.txt")).map_err(|e| e.to_string())?;
    ensure(report.summary_text == golden, || "summary differs from golden".into())?;
    within(started, SCENARIO_BOUND)?;
    Ok("2 compensations, FL-0002 cancelled before FL-0001, CLEAN".into())
}

fn ac4() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5AFE);
    let mut tally = std::collections::BTreeMap::<&str, usize>::new();
    for i in 0..FUZZ_CASES {
        let spec = random_schedule(&mut rng, i);
        let art = run_scenario(&load_spec(&spec));
        let r = &art.report;
        let ok = match r.outcome {
            Outcome::Success | Outcome::RolledBackClean => r.ledger.clean,
            Outcome::HaltedDirty => {
                r.halted_at.is_some() && r.summary.as_deref().is_some_and(|s| s.contains("MANUAL ATTENTION REQUIRED"))
            }
            Outcome::RolledBackDirty => false,
        };
        ensure(ok, || format!("schedule {i} ended {:?}: {}", r.outcome, spec.to_toml()))?;
        *tally.entry(r.outcome.as_str()).or_default() += 1;
    }
    within(started, FUZZ_BOUND)?;
    Ok(format!("{FUZZ_CASES} schedules, 0 silent-dirty; {tally:?}"))
}

fn ac5() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DA6);
    let mut with_ties = 0;
    for _ in 0..ORACLE_CASES {
        let (nodes, edges) = random_dag(&mut rng, ORACLE_MAX_NODES);
        check_rollback_oracle(&nodes, &edges)?;
        if brute_force_orders(&nodes, &edges).len() > 1 {
            with_ties += 1;
        }
    }
    within(started, ORACLE_BOUND)?;
    Ok(format!("{ORACLE_CASES} DAGs (<= {ORACLE_MAX_NODES} nodes, {with_ties} with several valid orders) match enumeration"))
}

const PRECEDENCE_TOOLS: &str = r#"[
  {"name": "book_flight", "inputSchema": {"type": "object", "properties": {"flight_id": {"type": "string"}}},
   "annotations": {"x-compensation-tool": "cancel_via_mcp"}},
  {"name": "cancel_via_api", "inputSchema": {"type": "object", "properties": {"booking_ref": {"type": "string"}}}},
  {"name": "cancel_via_mcp", "inputSchema": {"type": "object", "properties": {"booking_ref": {"type": "string"}}}},
  {"name": "cancel_via_advisor", "inputSchema": {"type": "object", "properties": {"booking_ref": {"type": "string"}}}}
]"#;

fn ac6() -> Check {
    let tools = parse_mcp_tools(PRECEDENCE_TOOLS).map_err(|e| e.to_string())?;
    let with_annotation = ToolRegistry::new(tools.clone()).map_err(|e| e.to_string())?;
    let mut plain = tools;
    plain[0].annotations.clear();
    let without_annotation = ToolRegistry::new(plain).map_err(|e| e.to_string())?;
    let mut api = ApiConfig::default();
    api.compensation_pairs.insert("book_flight".into(), "cancel_via_api".into());
    let advisor = |q: &AdvisorQuery| match q {
        AdvisorQuery::DiscoverCompensation { .. } => AdvisorAnswer::Binding {
            compensation_tool: "cancel_via_advisor".into(),
            input_mapping: None,
        },
        _ => AdvisorAnswer::Abstain,
    };
    let cases: [PrecedenceCase; 4] = [
        ("all three", &api, &with_annotation, &advisor, Provenance::ApiConfig, Some("cancel_via_api")),
        ("no config", &ApiConfig::default(), &with_annotation, &advisor, Provenance::McpAnnotation, Some("cancel_via_mcp")),
        ("advisor only", &ApiConfig::default(), &without_annotation, &advisor, Provenance::Advisor, Some("cancel_via_advisor")),
        ("none", &ApiConfig::default(), &without_annotation, &AbstainingAdvisor, Provenance::AssumedNoSideEffects, None),
    ];
    for (name, api, registry, advisor, provenance, tool) in cases {
        let b = resolve("book_flight", api, registry, advisor).map_err(|e| format!("{name}: {e}"))?;
        ensure(b.provenance == provenance && b.compensation_tool.as_deref() == tool, || {
            format!("{name}: got {:?} via {:?}", b.compensation_tool, b.provenance)
        })?;
    }
    Ok("API_CONFIG > MCP_ANNOTATION > ADVISOR > ASSUMED_NO_SIDE_EFFECTS".into())
}

fn ac7() -> Check {
    let doc = fs::read_to_string(scenario_dir().join("mcp/book_flight.json")).map_err(|e| e.to_string())?;
    let defs = parse_mcp_tools(&doc).map_err(|e| e.to_string())?;
    let mut registry = ToolRegistry::new(defs).map_err(|e| e.to_string())?;
    let cancel = rac_core::simenv::travel()
        .tools
        .into_iter()
        .find(|t| t.name == "cancel_flight")
        .ok_or("travel preset lacks cancel_flight")?;
    registry.upsert(cancel.definition());
    let b = resolve("book_flight", &ApiConfig::default(), &registry, &AbstainingAdvisor).map_err(|e| e.to_string())?;
    ensure(
        b.compensation_tool.as_deref() == Some("cancel_flight") && b.provenance == Provenance::McpAnnotation,
        || format!("got {:?} via {:?}", b.compensation_tool, b.provenance),
    )?;
    let required = &registry.get("book_flight").ok_or("book_flight missing")?.input_schema.required;
    ensure(required.len() == 3, || format!("required params {required:?}"))?;
    Ok("book_flight -> cancel_flight from x-compensation-tool".into())
}

fn ac8() -> Check {
    let plain = load_spec(&spec("crash-travel", ScenarioKind::Travel, 8, Vec::new()));
    let failing = load_golden(TRAVEL);
    let mut checked = 0;
    for (label, scenario, points) in [("undisturbed", &plain, CRASH_POINTS), ("car declined", &failing, 1..=6)] {
        for n in points {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let r = crash_and_replay(scenario, n, dir.path());
            ensure(r.crashed, || format!("{label}: no crash at append {n}"))?;
            ensure(r.records_before == n, || {
                format!("{label}: reopened log has {} records, expected {n}", r.records_before)
            })?;
            ensure(r.verdict.clean && r.outcome == Outcome::RolledBackClean, || {
                format!("{label}, crash at append {n}: {:?} {:?}", r.outcome, r.verdict.violations)
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} crash points reopened from disk and rolled back CLEAN"))
}

fn ac9() -> Check {
    let mut names = Vec::new();
    for entry in fs::read_dir(scenario_dir()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|x| x == "toml") {
            names.push(path);
        }
    }
    names.sort();
    for path in &names {
        let scenario = rac_core::scenario::load_file(path).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let opts = RunOptions {
                log_dir: Some(dir.path().to_owned()),
                ..Default::default()
            };
            let art = run(&scenario, &opts).map_err(|e| e.to_string())?;
            let log_file = rac_core::txlog::log_path(dir.path(), &rac_core::runner::run_id(&scenario, scenario.spec.seed));
            let log = fs::read(log_file).map_err(|e| e.to_string())?;
            outputs.push((render_report(&art, ReportFormat::JsonLines), log));
        }
        ensure(outputs[0] == outputs[1], || format!("{} is not reproducible", path.display()))?;
    }
    let p14 = run_scenario(&load_golden(P14));
    let golden = fs::read_to_string(golden_dir().join("p14_report.jsonl")).map_err(|e| e.to_string())?;
    ensure(render_report(&p14, ReportFormat::JsonLines) == golden, || "P14 report differs from golden".into())?;
    Ok(format!("{} golden scenarios byte-identical across runs (reports and logs)", names.len()))
}

fn main() -> ExitCode {
    // the crash harness panics on purpose; keep other panics visible
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        let msg = info.payload().downcast_ref::<String>().map(String::as_str).unwrap_or("");
        if !msg.starts_with("simulated crash") {
            default_hook(info);
        }
    }));
    let criteria: [Criterion; 9] = [
        ("AC1", "P12 transient jobshop recovers by retry", ac1),
        ("AC2", "P13 permanent jobshop rolls back clean", ac2),
        ("AC3", "P14 group booking compensates LIFO", ac3),
        ("AC4", "safety fuzz", ac4),
        ("AC5", "rollback-order oracle", ac5),
        ("AC6", "resolution precedence", ac6),
        ("AC7", "MCP declaration fidelity", ac7),
        ("AC8", "crash replay", ac8),
        ("AC9", "determinism", ac9),
    ];
    let mut failed = 0;
    for (id, title, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = started.elapsed();
        match result {
            Ok(detail) => println!("{id} PASS  {title}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL  {title}: {why} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
