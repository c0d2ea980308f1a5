//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::DateTime;
use common::breaches::six_breaches;
use common::*;
use giter_core::clock::{Clock, ManualClock};
use giter_core::document::{canonical_serialize, parse_resource};
use giter_core::handler::{BuiltinHandler, BuiltinKind, HandlerError, HandlerOutcome};
use giter_core::pipeline::{load_bindings, pipeline_reconcile_once};
use giter_core::policy::{audit_repo, replay_history, PathOutcome};
use giter_core::reconciler::{
    consumer_reconcile_once, is_done, producer_cycle, producer_reconcile_once, Action, ConsumerOptions,
    DesiredSet, PushMode,
};
use giter_core::repo::{archive_dir, resource_path, RepoHandle, Verb, DEFAULT_BRANCH};
use giter_core::resource::{transition_phase, ResourceStatus};
use giter_core::schema::{node_from_tree, validate};
use giter_core::sim::{
    run_scenario, sim_epoch, ActorRole, ActorSpec, Assertion, Schedule, ScenarioSpec, SimTrace,
};
use giter_core::{Error, ExchangeResource, Identity, Phase, ResourceKey, Role, ValueTree};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn echo() -> BuiltinHandler {
    BuiltinHandler::new(BuiltinKind::Echo)
}

fn consumer_opts() -> ConsumerOptions {
    ConsumerOptions::for_interval(Duration::from_secs(10))
}

fn observe(remote: &FsPath, dir: &FsPath) -> Result<RepoHandle, String> {
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::starting_at(sim_epoch()));
    ok(
        RepoHandle::clone_from(&remote.display().to_string(), dir, DEFAULT_BRANCH, observer(), clock),
        "observer clone",
    )
}

/// What an echo handler stores: the spec itself.
fn oracle_echo(spec: &Value) -> Value {
    spec.clone()
}

/// What an uppercase-action handler stores: the spec with `action`
/// uppercased.
fn oracle_upper(spec: &Value) -> Value {
    let mut out = spec.clone();
    if let Some(Value::String(a)) = out.get("action").cloned() {
        out["action"] = Value::String(a.to_uppercase());
    }
    out
}

// ---------------------------------------------------------------- fixtures

struct FixtureRun {
    name: String,
    spec: ScenarioSpec,
    dir: tempfile::TempDir,
    trace: SimTrace,
}

impl FixtureRun {
    fn remote(&self) -> PathBuf {
        self.dir.path().join("run/remote.git")
    }
}

fn run_fixtures() -> Result<Vec<FixtureRun>, String> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios");
    let mut files: Vec<PathBuf> = ok(std::fs::read_dir(&root), "fixture dir")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "yaml"))
        .collect();
    files.sort();
    let mut runs = Vec::new();
    for f in files {
        let name = f.file_stem().unwrap().to_string_lossy().into_owned();
        let spec = ok(ScenarioSpec::parse(&std::fs::read(&f).unwrap()), &name)?;
        let dir = tempfile::tempdir().unwrap();
        let trace = ok(run_scenario(&spec, &dir.path().join("run")), &name)?;
        runs.push(FixtureRun { name, spec, dir, trace });
    }
    Ok(runs)
}

// ------------------------------------------------------------- criterion 1

fn canonical_workflow() -> Outcome {
    let started = Instant::now();
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut c = fx.clone_as("c", consumer());
    let mut o = fx.clone_as("o", observer());
    let key = example_task().key();
    let live = resource_path(&key).unwrap();
    let mut desired = DesiredSet::new();
    ok(desired.insert(example_task(), true), "desired")?;

    let mut saw_completed = false;
    let mut cycles = (0, 0);
    let mut finished = false;
    for _ in 0..4 {
        ok(producer_cycle(&mut p, &mut desired, PushMode::Immediate), "producer")?;
        cycles.0 += 1;
        ok(o.fetch(), "fetch")?;
        if ok(o.worktree_files(&archive_dir(&key)), "archive")?.len() == 1 {
            finished = true;
            break;
        }
        ok(consumer_reconcile_once(&mut c, &mut echo(), &consumer_opts()), "consumer")?;
        cycles.1 += 1;
        ok(o.fetch(), "fetch")?;
        if let Some(r) = ok(o.read_resource(&key), "read")? {
            saw_completed |= r.phase() == Some(Phase::Completed);
        }
    }
    ensure!(finished, "not archived within 4+4 cycles");
    ensure!(saw_completed, "never observed Completed");
    ensure!(ok(o.read_worktree_file(&live), "read")?.is_none(), "live file still present");
    let files = ok(o.worktree_files(&archive_dir(&key)), "archive")?;
    let (_, bytes) = files.iter().next().unwrap();
    let archived = ok(parse_resource(bytes), "archive parse")?;
    let status = archived.status.clone().unwrap();
    ensure!(status.phase == Phase::Archived, "archived phase {}", status.phase);
    ensure!(
        status.result.to_json() == oracle_echo(&example_task().spec.to_json()),
        "archived result differs from the echo oracle"
    );
    ensure!(archived.spec == example_task().spec, "spec drifted");
    ensure!(status.observed_generation == 1, "observed {}", status.observed_generation);
    let findings = ok(audit_repo(&o, &ok(o.load_policy(), "policy")?), "audit")?;
    ensure!(findings.is_empty(), "audit: {findings:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "archived after {} producer + {} consumer cycles in {:.2}s",
        cycles.0,
        cycles.1,
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------- criterion 2

fn ownership_soundness(runs: &[FixtureRun]) -> Outcome {
    ensure!(runs.len() >= 10, "only {} fixtures", runs.len());
    for run in runs {
        let o = observe(&run.remote(), &run.dir.path().join("audit"))?;
        let findings = ok(audit_repo(&o, &ok(o.load_policy(), "policy")?), &run.name)?;
        ensure!(findings.is_empty(), "{}: {} findings, first {:?}", run.name, findings.len(), findings.first());
    }

    let run = runs.iter().find(|r| r.name == "spec-bump").ok_or("spec-bump fixture missing")?;
    let o = observe(&run.remote(), &run.dir.path().join("breach-base"))?;
    let current = ok(o.read_resource(&example_task().key()), "read")?.ok_or("resource missing")?;
    ensure!(current.metadata.generation >= 2, "fixture ends at generation {}", current.metadata.generation);
    let policy = ok(o.load_policy(), "policy")?;
    let breaches = six_breaches(&current, "producer@sim.giter.invalid", "consumer@sim.giter.invalid");
    ensure!(breaches.len() == 6, "breach count");
    for (i, (code, inject)) in breaches.iter().enumerate() {
        let h = observe(&run.remote(), &run.dir.path().join(format!("breach-{i}")))?;
        inject(&h);
        let findings = ok(audit_repo(&h, &policy), "audit")?;
        ensure!(findings.len() == 1, "{code}: {} findings {findings:?}", findings.len());
        ensure!(findings[0].code == *code, "{code}: got {}", findings[0].code);
    }
    Ok(format!("{} fixtures audit clean; 6/6 breaches flip exactly their finding", runs.len()))
}

// ------------------------------------------------------------- criterion 3

fn race(consumer_first: bool) -> Result<(u32, u32), String> {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut c = fx.clone_as("c", consumer());
    let mut desired = DesiredSet::new();
    ok(desired.insert(example_task(), false), "desired")?;
    ok(producer_reconcile_once(&mut p, &desired), "create")?;
    ok(c.fetch(), "fetch")?;
    let key = example_task().key();
    let base = ok(c.read_resource(&key), "read")?.ok_or("missing")?;

    fx.tick(1);
    let mut status_edit = base.clone();
    let mut s = ok(transition_phase(base.status.as_ref().unwrap(), Phase::Processing, fx.clock.now()), "phase")?;
    s.observed_generation = 1;
    status_edit.status = Some(s);
    let mut spec_edit = base.clone();
    spec_edit.spec = spec_edit.spec.set(&"action".parse().unwrap(), "transcode-video".into()).unwrap();
    spec_edit.metadata.generation = 2;
    ok(c.commit_resource(&status_edit, Verb::Status), "consumer commit")?;
    ok(p.commit_resource(&spec_edit, Verb::Update), "producer commit")?;

    let (pa, ca) = if consumer_first {
        let ca = ok(c.push(), "consumer push")?.attempts;
        (ok(p.push(), "producer push")?.attempts, ca)
    } else {
        let pa = ok(p.push(), "producer push")?.attempts;
        (pa, ok(c.push(), "consumer push")?.attempts)
    };

    // section partition: metadata and spec from the producer, status from the consumer
    let mut oracle = spec_edit.clone();
    oracle.status = status_edit.status.clone();
    let o = fx.clone_as("o", observer());
    let merged = ok(o.read_worktree_file(&resource_path(&key).unwrap()), "read")?.ok_or("missing")?;
    ensure!(
        merged == canonical_serialize(&oracle).unwrap(),
        "merged document differs from the oracle:\n{}",
        String::from_utf8_lossy(&merged)
    );
    Ok((pa, ca))
}

fn producer_producer_conflict() -> Result<(), String> {
    let fx = Fixture::new();
    let mut a = fx.clone_as("a", producer());
    ok(a.commit_resource(&example_task(), Verb::Create), "create")?;
    ok(a.push(), "push")?;
    let mut b = fx.clone_as("b", Identity::new("Producer", "producer@example.com", Role::Producer));
    let mut one = example_task();
    one.spec = one.spec.set(&"action".parse().unwrap(), "one".into()).unwrap();
    let mut two = example_task();
    two.spec = two.spec.set(&"action".parse().unwrap(), "two".into()).unwrap();
    ok(a.commit_resource(&one, Verb::Update), "a")?;
    ok(b.commit_resource(&two, Verb::Update), "b")?;
    ok(a.push(), "a push")?;
    let tip = ok(a.remote_tip(), "tip")?;
    match b.push() {
        Err(Error::MergeConflict(c)) if c.section == "spec" => {}
        other => return Err(format!("expected a spec conflict, got {other:?}")),
    }
    let o = fx.clone_as("o", observer());
    ensure!(ok(o.head(), "head")? == tip, "remote moved after the conflict");
    Ok(())
}

fn conflict_resolution() -> Outcome {
    let mut attempts = Vec::new();
    for consumer_first in [true, false] {
        let (pa, ca) = race(consumer_first)?;
        ensure!(pa <= 2 && ca <= 2, "attempts producer {pa} consumer {ca}");
        ensure!(pa + ca == 3, "exactly one side should have merged: {pa}+{ca}");
        attempts.push(format!("{}:p{pa}/c{ca}", if consumer_first { "consumer-first" } else { "producer-first" }));
    }
    for _ in 0..3 {
        producer_producer_conflict()?;
    }
    Ok(format!("{}; byte-equal to oracle; producer/producer race conflicts 3/3", attempts.join(", ")))
}

// ------------------------------------------------------------- criterion 4

fn reproducibility(runs: &[FixtureRun]) -> Outcome {
    let mut paths = 0;
    for run in runs {
        let o = observe(&run.remote(), &run.dir.path().join("replay"))?;
        let result = ok(replay_history(&o), &run.name)?;
        ensure!(result.is_clean(), "{}: {:?}", run.name, result.mismatches().collect::<Vec<_>>());
        ensure!(!result.paths.is_empty(), "{}: nothing to replay", run.name);
        paths += result.paths.len();

        let victim = result.paths[0].path.clone();
        let bytes = ok(o.read_worktree_file(&victim), "read")?.ok_or("missing")?;
        let mut doc = ok(parse_resource(&bytes), "parse")?;
        doc.metadata.labels.insert("tampered".into(), "yes".into());
        write_file(o.workdir(), &victim, &canonical_serialize(&doc).unwrap());
        let after = ok(replay_history(&o), "replay")?;
        let bad: Vec<_> = after.mismatches().collect();
        ensure!(bad.len() == 1, "{}: {} mismatches after tamper", run.name, bad.len());
        ensure!(bad[0].path == victim, "{}: named {} not {victim}", run.name, bad[0].path);
        ensure!(bad[0].outcome == PathOutcome::Mismatch, "{}: {:?}", run.name, bad[0].outcome);
    }
    Ok(format!("{} fixtures replay clean over {paths} paths; tamper named on each", runs.len()))
}

// ------------------------------------------------------------- criterion 5

const OPEN_TASK_SCHEMA: &str = r#"{"apiVersion": "exchange.gitops/v1alpha1", "kind": "TaskExchange",
  "specSchema": {"type": "object", "properties": {"action": {"type": "string"}, "parameters": {"type": "object"}}, "required": ["action"]}}"#;

fn random_scenario(seed: u64) -> (ScenarioSpec, BTreeMap<String, BuiltinKind>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actors = Vec::new();
    let mut producer = ActorSpec::new("producer", ActorRole::Producer);
    producer.auto_archive = rng.gen_bool(0.5);
    actors.push(producer);
    let mut handlers = BTreeMap::new();
    let consumers = rng.gen_range(1..=2);
    for i in 0..consumers {
        let kind = if rng.gen_bool(0.5) { BuiltinKind::Echo } else { BuiltinKind::UppercaseAction };
        let ns = format!("ns-{i}");
        let mut c = ActorSpec::new(&format!("consumer-{i}"), ActorRole::Consumer);
        c.handler = Some(kind.to_string());
        c.namespaces = vec![ns.clone()];
        actors.push(c);
        handlers.insert(ns, kind);
    }
    let words = ["render", "encode", "resize", "publish", "index"];
    let resources = (0..rng.gen_range(1..=3))
        .map(|i| {
            json!({
                "apiVersion": "exchange.gitops/v1alpha1",
                "kind": "TaskExchange",
                "metadata": {"name": format!("job-{i}"), "namespace": format!("ns-{}", rng.gen_range(0..consumers))},
                "spec": {"action": words[rng.gen_range(0..words.len())], "parameters": {"n": rng.gen_range(0..100)}},
            })
        })
        .collect();
    let spec = ScenarioSpec {
        name: format!("random-{seed}"),
        seed,
        interval_ms: 10_000,
        step_ms: rng.gen_range(100..3_000),
        actors,
        schemas: vec![serde_json::from_str(OPEN_TASK_SCHEMA).unwrap()],
        pipelines: None,
        initial_resources: resources,
        schedule: Schedule::Expr("round-robin(4)".into()),
        assertions: vec![Assertion::Converged, Assertion::AuditClean, Assertion::ReplayClean],
    };
    (spec, handlers)
}

/// Checks the fixed point against the hand oracles, independent of the
/// sim's own converged assertion.
fn check_fixed_point(spec: &ScenarioSpec, handlers: &BTreeMap<String, BuiltinKind>, remote: &FsPath, dir: &FsPath) -> Result<(), String> {
    let o = observe(remote, dir)?;
    let auto_archive = spec.actors[0].auto_archive;
    for doc in &spec.initial_resources {
        let desired = giter_core::document::resource_from_tree(ValueTree::from_json(doc.clone())).unwrap();
        let key = desired.key();
        let expected = match handlers[&key.namespace] {
            BuiltinKind::Echo => oracle_echo(&desired.spec.to_json()),
            _ => oracle_upper(&desired.spec.to_json()),
        };
        let found = match ok(o.read_resource(&key), "read")? {
            Some(r) => r,
            None => {
                ensure!(auto_archive, "{key}: vanished without auto-archive");
                let files = ok(o.worktree_files(&archive_dir(&key)), "archive")?;
                let (_, bytes) = files.iter().next().ok_or(format!("{key}: neither live nor archived"))?;
                ok(parse_resource(bytes), "archive parse")?
            }
        };
        let status = found.status.clone().ok_or(format!("{key}: no status"))?;
        ensure!(status.observed_generation == found.metadata.generation, "{key}: observed lags");
        ensure!(
            matches!(status.phase, Phase::Completed | Phase::Archived),
            "{key}: phase {}",
            status.phase
        );
        ensure!(status.result.to_json() == expected, "{key}: result {} != {}", status.result.to_json(), expected);
    }
    Ok(())
}

fn bump_reconverges(mid_processing: bool) -> Result<u32, String> {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut c = fx.clone_as("c", consumer());
    let key = example_task().key();
    let mut desired = DesiredSet::new();
    ok(desired.insert(example_task(), false), "desired")?;
    ok(producer_reconcile_once(&mut p, &desired), "create")?;
    let bump = |d: &mut DesiredSet| {
        let r = &mut d.get_mut(&key).unwrap().resource;
        r.spec = r.spec.set(&"action".parse().unwrap(), "transcode-video".into()).unwrap();
    };
    if mid_processing {
        let mut fired = false;
        let mut handler = |r: &ExchangeResource| -> Result<HandlerOutcome, HandlerError> {
            if !fired {
                fired = true;
                bump(&mut desired);
                producer_reconcile_once(&mut p, &desired).map_err(|e| HandlerError::Spawn(e.to_string()))?;
            }
            Ok(HandlerOutcome::completed(r.spec.clone()))
        };
        ok(consumer_reconcile_once(&mut c, &mut handler, &consumer_opts()), "consumer")?;
    } else {
        ok(consumer_reconcile_once(&mut c, &mut echo(), &consumer_opts()), "consumer")?;
        ensure!(is_done(&ok(c.read_resource(&key), "read")?.unwrap()), "first generation not done");
        bump(&mut desired);
        ok(producer_reconcile_once(&mut p, &desired), "bump")?;
    }
    for cycle in 1..=3 {
        fx.tick(10);
        ok(consumer_reconcile_once(&mut c, &mut echo(), &consumer_opts()), "consumer")?;
        let o = fx.clone_as(&format!("o{cycle}"), observer());
        let r = ok(o.read_resource(&key), "read")?.unwrap();
        if r.metadata.generation == 2
            && is_done(&r)
            && r.status.as_ref().unwrap().result.to_json() == oracle_echo(&r.spec.to_json())
        {
            return Ok(cycle);
        }
    }
    Err(format!("spec bump (mid-processing {mid_processing}) not converged within 3 consumer cycles"))
}

fn convergence() -> Outcome {
    const SCENARIOS: u64 = 100;
    for seed in 0..SCENARIOS {
        let (spec, handlers) = random_scenario(seed);
        let dir = tempfile::tempdir().unwrap();
        let trace = ok(run_scenario(&spec, &dir.path().join("run")), &spec.name)?;
        ensure!(trace.passed(), "{}", trace.summary());
        check_fixed_point(&spec, &handlers, &dir.path().join("run/remote.git"), &dir.path().join("check"))?;
    }
    let after = bump_reconverges(false)?;
    let mid = bump_reconverges(true)?;
    Ok(format!(
        "{SCENARIOS} seeded scenarios at the handler fixed point; spec bump re-converged in {after} (after completion) and {mid} (mid-processing) consumer cycles"
    ))
}

// ------------------------------------------------------------- criterion 6

fn pipeline_composition(runs: &[FixtureRun]) -> Outcome {
    let run = runs.iter().find(|r| r.name == "pipeline-two-stage").ok_or("pipeline fixture missing")?;
    ensure!(run.trace.passed(), "{}", run.trace.summary());
    let o = observe(&run.remote(), &run.dir.path().join("pipe-check"))?;
    let source = ok(o.read_resource(&ResourceKey::new("default", "Fetch", "clip")), "read")?.ok_or("no source")?;
    let target = ok(o.read_resource(&ResourceKey::new("default", "Encode", "clip-encode")), "read")?
        .ok_or("no target")?;

    // stage 1 echo, projection {outputUrl -> inputUrl, action -> action}, stage 2 uppercase
    let stage1 = oracle_echo(&source.spec.to_json());
    let projected = json!({"inputUrl": stage1["outputUrl"], "action": stage1["action"]});
    let stage2 = oracle_upper(&projected);
    ensure!(target.spec.to_json() == projected, "target spec {}", target.spec.to_json());
    let status = target.status.clone().ok_or("target has no status")?;
    ensure!(status.phase == Phase::Completed, "target phase {}", status.phase);
    ensure!(status.result.to_json() == stage2, "target result {} != {stage2}", status.result.to_json());

    let pipeline = run.spec.actor("pipeline").unwrap().identity();
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::starting_at(sim_epoch()));
    let mut h = ok(
        RepoHandle::clone_from(
            &run.remote().display().to_string(),
            &run.dir.path().join("pipe-again"),
            DEFAULT_BRANCH,
            pipeline,
            clock,
        ),
        "clone",
    )?;
    let bindings = ok(load_bindings(&h), "bindings")?;
    let before = ok(h.all_commits(), "log")?.len();
    for i in 0..10 {
        let report = ok(pipeline_reconcile_once(&mut h, &bindings), "pipeline")?;
        ensure!(
            report.count(Action::Created) + report.count(Action::SpecUpdated) == 0,
            "re-evaluation {i} wrote: {:?}",
            report.entries
        );
    }
    let after = ok(h.all_commits(), "log")?.len();
    ensure!(before == after, "{} extra commits", after - before);
    Ok("two-stage chain matches composed oracle; 10 re-evaluations wrote nothing".into())
}

// ------------------------------------------------------------- criterion 7

fn determinism(runs: &[FixtureRun]) -> Outcome {
    let mut specs: Vec<ScenarioSpec> = runs.iter().map(|r| r.spec.clone()).collect();
    specs.extend((1000..1005).map(|s| random_scenario(s).0));
    for spec in &specs {
        let digests: Vec<String> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                run_scenario(spec, &dir.path().join("d")).map(|t| t.digest)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| format!("{}: {e}", spec.name))?;
        ensure!(digests[0] == digests[1], "{}: {} vs {}", spec.name, digests[0], digests[1]);
        if let Some(first) = runs.iter().find(|r| r.spec == *spec) {
            ensure!(first.trace.digest == digests[0], "{}: digest changed between runs", spec.name);
        }
    }
    Ok(format!("{} scenarios produced identical digests on repeated runs", specs.len()))
}

// ------------------------------------------------------------- criterion 8

fn arb_leaf() -> impl Strategy<Value = ValueTree> {
    prop_oneof![
        Just(ValueTree::Null),
        any::<bool>().prop_map(ValueTree::Bool),
        any::<i64>().prop_map(ValueTree::Int),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(ValueTree::Float),
        any::<String>().prop_map(ValueTree::String),
        "[a-z][a-z0-9./-]{0,6}".prop_map(ValueTree::String),
    ]
}

fn arb_tree() -> impl Strategy<Value = ValueTree> {
    arb_leaf().prop_recursive(3, 32, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(ValueTree::List),
            prop::collection::btree_map(any::<String>(), inner, 0..4).prop_map(ValueTree::Map),
        ]
    })
}

fn arb_resource() -> impl Strategy<Value = ExchangeResource> {
    (
        prop::collection::btree_map("[a-zA-Z]{1,5}", arb_tree(), 0..4),
        "[a-z][a-z0-9-]{0,10}[a-z0-9]",
        1i64..5,
        prop::collection::btree_map("[a-z]{1,4}", ".{0,5}", 0..3),
        prop::option::of((0usize..5, arb_tree(), any::<Option<String>>(), any::<bool>())),
        0i64..4_000_000_000,
    )
        .prop_map(|(spec, name, generation, labels, status, ts)| {
            let mut r = ExchangeResource::new("exchange.gitops/v1alpha1", "TaskExchange", &name, ValueTree::Map(spec));
            r.metadata.generation = generation;
            r.metadata.labels = labels;
            r.metadata.created_at = DateTime::from_timestamp(ts, 0);
            r.status = status.map(|(phase, result, message, stamp)| {
                let phase = Phase::ALL[phase];
                ResourceStatus {
                    phase,
                    result,
                    observed_generation: generation - 1,
                    message: if phase == Phase::Failed { Some(message.unwrap_or_default()) } else { message },
                    updated_at: if stamp { DateTime::from_timestamp(ts + 1, 500_000_000) } else { None },
                }
            });
            r
        })
}

const PATTERNS: [&str; 4] = ["^[a-z]+$", "x", "^a", "[0-9]"];

/// The patterns above, decided without a regex engine.
fn pattern_holds(pattern: &str, s: &str) -> bool {
    match pattern {
        "^[a-z]+$" => !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase()),
        "x" => s.contains('x'),
        "^a" => s.starts_with('a'),
        "[0-9]" => s.chars().any(|c| c.is_ascii_digit()),
        other => panic!("no oracle for pattern {other}"),
    }
}

fn arb_schema() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(json!({"type": "any"})),
        Just(json!({"type": "boolean"})),
        (prop::option::of(prop::collection::vec("[a-c]{1,2}", 1..3)), prop::option::of(0..PATTERNS.len())).prop_map(
            |(allowed, pattern)| {
                let mut m = json!({"type": "string"});
                if let Some(a) = allowed {
                    m["enum"] = json!(a);
                }
                if let Some(p) = pattern {
                    m["pattern"] = json!(PATTERNS[p]);
                }
                m
            }
        ),
        (any::<bool>(), prop::option::of(-20i64..20), prop::option::of(0i64..30), any::<bool>()).prop_map(
            |(integer, lo, span, half)| {
                let mut m = json!({"type": if integer { "integer" } else { "number" }});
                let lo_v = lo.map(|l| if half && !integer { l as f64 + 0.5 } else { l as f64 });
                if let Some(l) = lo_v {
                    m["minimum"] = json!(l);
                }
                if let Some(s) = span {
                    m["maximum"] = json!(lo_v.unwrap_or(0.0).max(0.0) + s as f64);
                }
                m
            }
        ),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::option::of(inner.clone()).prop_map(|items| match items {
                Some(i) => json!({"type": "array", "items": i}),
                None => json!({"type": "array"}),
            }),
            (
                prop::collection::btree_map("[a-d]", inner, 0..4),
                any::<u8>(),
                prop::option::of(any::<bool>()),
            )
                .prop_map(|(props, req_mask, additional)| {
                    let required: Vec<&String> =
                        props.keys().enumerate().filter(|(i, _)| req_mask & (1 << i) != 0).map(|(_, k)| k).collect();
                    let mut m = json!({"type": "object"});
                    if !props.is_empty() {
                        m["properties"] = json!(props);
                    }
                    if !required.is_empty() {
                        m["required"] = json!(required);
                    }
                    if let Some(a) = additional {
                        m["additionalProperties"] = json!(a);
                    }
                    m
                }),
        ]
    })
}

/// A value shaped by `schema` most of the time, random otherwise, never
/// deeper than `depth` containers.
fn guided(schema: &Value, depth: u32, rng: &mut ChaCha8Rng) -> Value {
    let random_leaf = |rng: &mut ChaCha8Rng| match rng.gen_range(0..5) {
        0 => Value::Null,
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(rng.gen_range(-30i64..30)),
        3 => json!(rng.gen_range(-30.0..30.0)),
        _ => json!(["a", "b", "ab", "x1", "", "abc"][rng.gen_range(0..6)]),
    };
    if rng.gen_bool(0.12) || depth == 0 && matches!(schema["type"].as_str(), Some("object" | "array")) {
        return random_leaf(rng);
    }
    match schema["type"].as_str().unwrap() {
        "object" => {
            let mut m = serde_json::Map::new();
            if let Some(props) = schema["properties"].as_object() {
                for (k, child) in props {
                    if rng.gen_bool(0.8) {
                        m.insert(k.clone(), guided(child, depth - 1, rng));
                    }
                }
            }
            if rng.gen_bool(0.2) {
                m.insert(["a", "e", "z"][rng.gen_range(0..3)].into(), random_leaf(rng));
            }
            Value::Object(m)
        }
        "array" => {
            let n = rng.gen_range(0..3);
            Value::Array(
                (0..n)
                    .map(|_| match schema.get("items") {
                        Some(items) => guided(items, depth - 1, rng),
                        None => random_leaf(rng),
                    })
                    .collect(),
            )
        }
        "string" => match schema["enum"].as_array() {
            Some(values) if rng.gen_bool(0.7) => values[rng.gen_range(0..values.len())].clone(),
            _ => json!(["a", "b", "ab", "x1", "", "abc", "xa", "c"][rng.gen_range(0..8)]),
        },
        "integer" => json!(rng.gen_range(-25i64..40)),
        "number" => {
            if rng.gen_bool(0.5) {
                json!(rng.gen_range(-25i64..40))
            } else {
                json!(rng.gen_range(-25.0..40.0))
            }
        }
        "boolean" => json!(rng.gen_bool(0.5)),
        _ => random_leaf(rng),
    }
}

fn oracle_path(parent: &str, seg: &str) -> String {
    if parent.is_empty() {
        seg.to_string()
    } else {
        format!("{parent}.{seg}")
    }
}

/// Reference validator over the plain schema document.
fn reference_violations(schema: &Value, v: &Value, path: &str, root: bool, out: &mut Vec<(String, &'static str)>) {
    let mismatch = |out: &mut Vec<(String, &'static str)>| out.push((path.to_string(), "type-mismatch"));
    let bounds = |x: f64, out: &mut Vec<(String, &'static str)>| {
        let below = schema.get("minimum").and_then(Value::as_f64).is_some_and(|lo| x < lo);
        let above = schema.get("maximum").and_then(Value::as_f64).is_some_and(|hi| x > hi);
        if below || above {
            out.push((path.to_string(), "bound-violation"));
        }
    };
    match schema["type"].as_str().unwrap() {
        "any" => {}
        "boolean" => {
            if !v.is_boolean() {
                mismatch(out)
            }
        }
        "integer" => match v.as_i64() {
            Some(i) if !v.is_f64() => bounds(i as f64, out),
            _ => mismatch(out),
        },
        "number" => match v.as_f64() {
            Some(x) if v.is_number() => bounds(x, out),
            _ => mismatch(out),
        },
        "string" => match v.as_str() {
            None => mismatch(out),
            Some(s) => {
                if let Some(values) = schema.get("enum").and_then(Value::as_array) {
                    if !values.iter().any(|a| a.as_str() == Some(s)) {
                        out.push((path.to_string(), "enum-violation"));
                    }
                }
                if let Some(p) = schema.get("pattern").and_then(Value::as_str) {
                    if !pattern_holds(p, s) {
                        out.push((path.to_string(), "pattern-violation"));
                    }
                }
            }
        },
        "array" => match v.as_array() {
            None => mismatch(out),
            Some(items) => {
                if let Some(item_schema) = schema.get("items") {
                    for (i, item) in items.iter().enumerate() {
                        reference_violations(item_schema, item, &format!("{path}[{i}]"), false, out);
                    }
                }
            }
        },
        "object" => match v.as_object() {
            None => mismatch(out),
            Some(map) => {
                let props = schema.get("properties").and_then(Value::as_object);
                let open = match schema.get("additionalProperties") {
                    Some(b) => b.as_bool().unwrap(),
                    None => !root && props.is_none_or(|p| p.is_empty()),
                };
                for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
                    let r = r.as_str().unwrap();
                    if !map.contains_key(r) {
                        out.push((oracle_path(path, r), "missing-required"));
                    }
                }
                for (k, child) in map {
                    match props.and_then(|p| p.get(k)) {
                        Some(s) => reference_violations(s, child, &oracle_path(path, k), false, out),
                        None if !open => out.push((oracle_path(path, k), "unknown-field")),
                        None => {}
                    }
                }
            }
        },
        other => panic!("unknown type {other}"),
    }
}

fn round_trip_and_validation() -> Outcome {
    let config = Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&arb_resource(), |r| {
            let bytes = canonical_serialize(&r).unwrap();
            let back = parse_resource(&bytes);
            prop_assert!(back.is_ok(), "{:?} on\n{}", back, String::from_utf8_lossy(&bytes));
            let back = back.unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(canonical_serialize(&back).unwrap(), bytes);
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;

    let cases = 1000;
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let valid = std::cell::Cell::new(0u32);
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&(arb_schema(), any::<u64>()), |(schema, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let instance = guided(&schema, 4, &mut rng);
            let node = node_from_tree(&ValueTree::from_json(schema.clone()), true);
            prop_assert!(node.is_ok(), "library rejected {}: {:?}", schema, node);
            let report = validate(&ValueTree::from_json(instance.clone()), &node.unwrap());
            let mut ours: Vec<(String, &str)> =
                report.violations.iter().map(|v| (v.path.to_string(), v.code.as_str())).collect();
            let mut reference = Vec::new();
            reference_violations(&schema, &instance, "", true, &mut reference);
            ours.sort();
            reference.sort();
            prop_assert_eq!(&ours, &reference, "schema {} instance {}", schema, instance);
            if reference.is_empty() {
                valid.set(valid.get() + 1);
            }
            Ok(())
        })
        .map_err(|e| format!("validator: {e}"))?;
    let v = valid.get();
    ensure!(v >= cases / 10 && v <= cases * 9 / 10, "unbalanced corpus: {v}/{cases} valid");
    Ok(format!("200 round trips; validator equals reference on {cases} schema/tree pairs ({v} valid)"))
}

// -------------------------------------------------------------------- main

fn main() {
    let started = Instant::now();
    let fixtures = run_fixtures();
    let with_fixtures = |f: fn(&[FixtureRun]) -> Outcome| -> Outcome {
        match &fixtures {
            Ok(runs) => f(runs),
            Err(e) => Err(format!("fixtures did not run: {e}")),
        }
    };
    if std::env::var("ACCEPTANCE_ONLY").as_deref() == Ok("8") {
        println!("{:?}", round_trip_and_validation());
        return;
    }
    let results: Vec<(&str, Outcome)> = vec![
        ("canonical workflow", canonical_workflow()),
        ("ownership soundness", with_fixtures(ownership_soundness)),
        ("conflict resolution", conflict_resolution()),
        ("reproducibility", with_fixtures(reproducibility)),
        ("convergence and reactivity", convergence()),
        ("pipeline fire-once and composition", with_fixtures(pipeline_composition)),
        ("determinism", with_fixtures(determinism)),
        ("round-trip and validation oracles", round_trip_and_validation()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1)
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
