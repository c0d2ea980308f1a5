//! Deterministic multi-actor simulation. Every actor gets its own clone of
//! an ephemeral bare remote and steps run strictly one after another on a
//! logical clock, so races exist only as commit/push interleavings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backoff::Backoff;
use crate::clock::{Clock, ManualClock};
use crate::document::{parse_document, resource_from_tree, serialize_document};
use crate::error::{Error, Result};
use crate::git::Git;
use crate::handler::{builtin_result, BuiltinHandler, BuiltinKind};
use crate::pipeline::{evaluate_bindings, load_bindings, pipeline_reconcile_once, Bindings, PIPELINES_PATH};
use crate::policy::{audit_repo, replay_history, TrustPolicy, POLICY_PATH};
use crate::reconciler::{
    consumer_reconcile_once, producer_cycle, ConsumerOptions, DesiredSet, PushMode, ReconcileReport, ReportEntry,
    STALE_FACTOR,
};
use crate::repo::{archive_dir, init_bare_remote, Identity, RepoHandle, DEFAULT_BRANCH};
use crate::resource::{ExchangeResource, Phase, ResourceKey};
use crate::schema::{SchemaDefinition, SchemaRegistry, SCHEMA_DIR};
use crate::value::{Path, ValueTree};
use crate::Role;

/// Logical start time of every simulation.
pub fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}

const WORKDIR_MARK: &str = "$WORKDIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorRole {
    Producer,
    Consumer,
    /// Evaluates pipeline bindings; commits as a producer.
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorIdentity {
    pub name: String,
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ActorSpec {
    pub id: String,
    pub role: ActorRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<ActorIdentity>,
    /// Builtin handler name, consumers only. Defaults to echo.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handler: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub namespaces: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kinds: Vec<String>,
    /// Producers only: archive resources once completed.
    #[serde(default)]
    pub auto_archive: bool,
}

impl ActorSpec {
    pub fn new(id: &str, role: ActorRole) -> Self {
        ActorSpec {
            id: id.to_string(),
            role,
            identity: None,
            handler: None,
            namespaces: Vec::new(),
            kinds: Vec::new(),
            auto_archive: false,
        }
    }

    pub fn identity(&self) -> Identity {
        let role = match self.role {
            ActorRole::Consumer => Role::Consumer,
            _ => Role::Producer,
        };
        match &self.identity {
            Some(i) => Identity::new(&i.name, &i.email, role),
            None => Identity::new(&self.id, &format!("{}@sim.giter.invalid", self.id), role),
        }
    }

    pub fn handler_kind(&self) -> Result<BuiltinKind> {
        match &self.handler {
            None => Ok(BuiltinKind::Echo),
            Some(h) => h.parse().map_err(|e: String| Error::Scenario(format!("actor {}: {e}", self.id))),
        }
    }

    fn selects(&self, key: &ResourceKey) -> bool {
        (self.namespaces.is_empty() || self.namespaces.contains(&key.namespace))
            && (self.kinds.is_empty() || self.kinds.iter().any(|k| k.eq_ignore_ascii_case(&key.kind)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepAction {
    Reconcile,
    /// Reconcile but keep the commits local.
    ReconcileLocal,
    Push,
    /// Consumer dies right after its next Processing write.
    Crash,
    /// Restart from a fresh clone.
    Revive,
    GoOffline,
    GoOnline,
    /// Advance the clock by `ms`.
    Wait,
    /// Producer edits its desired spec at `path` to `value`.
    Bump,
}

impl StepAction {
    fn as_str(self) -> &'static str {
        match self {
            StepAction::Reconcile => "reconcile",
            StepAction::ReconcileLocal => "reconcile-local",
            StepAction::Push => "push",
            StepAction::Crash => "crash",
            StepAction::Revive => "revive",
            StepAction::GoOffline => "go-offline",
            StepAction::GoOnline => "go-online",
            StepAction::Wait => "wait",
            StepAction::Bump => "bump",
        }
    }
}

impl fmt::Display for StepAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub action: StepAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<serde_json::Value>,
}

impl Step {
    pub fn new(actor: &str, action: StepAction) -> Self {
        Step {
            actor: Some(actor.to_string()),
            action,
            ms: None,
            resource: None,
            path: None,
            value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    /// `round-robin(<cycles>)`
    Expr(String),
    Steps(Vec<Step>),
}

fn round_robin_cycles(expr: &str) -> Option<u32> {
    expr.trim()
        .strip_prefix("round-robin(")?
        .strip_suffix(')')?
        .trim()
        .parse()
        .ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Assertion {
    Converged,
    PhaseEquals {
        resource: String,
        phase: String,
    },
    AuditClean,
    ReplayClean,
    MaxPushAttempts {
        max: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        actor: Option<String>,
    },
}

impl Assertion {
    pub fn label(&self) -> String {
        match self {
            Assertion::Converged => "converged".into(),
            Assertion::PhaseEquals { resource, phase } => format!("phase-equals({resource}, {phase})"),
            Assertion::AuditClean => "audit-clean".into(),
            Assertion::ReplayClean => "replay-clean".into(),
            Assertion::MaxPushAttempts { max, actor: None } => format!("max-push-attempts({max})"),
            Assertion::MaxPushAttempts { max, actor: Some(a) } => format!("max-push-attempts({max}, {a})"),
        }
    }
}

fn default_interval_ms() -> u64 {
    10_000
}

fn default_step_ms() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    /// Reconcile interval of the simulated loops; sets the consumer's
    /// stale-processing threshold.
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    /// Logical time between two steps.
    #[serde(default = "default_step_ms")]
    pub step_ms: u64,
    pub actors: Vec<ActorSpec>,
    /// Schema documents, inline.
    #[serde(default)]
    pub schemas: Vec<serde_json::Value>,
    /// Pipeline bindings document, inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipelines: Option<serde_json::Value>,
    /// Desired resources, each owned by the first producer serving its
    /// namespace.
    #[serde(default)]
    pub initial_resources: Vec<serde_json::Value>,
    pub schedule: Schedule,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

/// The parsed, checked parts of a scenario.
struct Prepared {
    schema_files: Vec<(String, Vec<u8>)>,
    registry: SchemaRegistry,
    pipelines: Option<Vec<u8>>,
    /// Actor index per initial resource.
    resources: Vec<(usize, ExchangeResource)>,
}

fn scenario_err(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

fn json_document(value: &serde_json::Value, what: &str) -> Result<Vec<u8>> {
    serialize_document(&ValueTree::from_json(value.clone())).map_err(|e| scenario_err(format!("{what}: {e}")))
}

impl ScenarioSpec {
    /// Parses a scenario file in the canonical document format.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let tree = parse_document(bytes).map_err(|e| scenario_err(e.to_string()))?;
        let spec: ScenarioSpec = serde_json::from_value(tree.to_json()).map_err(|e| scenario_err(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_document(&self) -> Vec<u8> {
        let json = serde_json::to_value(self).expect("scenario serializes");
        serialize_document(&ValueTree::from_json(json)).expect("scenario is a plain tree")
    }

    pub fn actor(&self, id: &str) -> Option<&ActorSpec> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    fn prepare(&self) -> Result<Prepared> {
        if self.actors.is_empty() {
            return Err(scenario_err("no actors"));
        }
        let mut seen = BTreeMap::new();
        for a in &self.actors {
            if a.id.is_empty() || !a.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(scenario_err(format!("bad actor id {:?}", a.id)));
            }
            if seen.insert(a.id.as_str(), ()).is_some() {
                return Err(scenario_err(format!("duplicate actor id {}", a.id)));
            }
            if a.role != ActorRole::Consumer && a.handler.is_some() {
                return Err(scenario_err(format!("actor {}: only consumers have handlers", a.id)));
            }
            if a.role != ActorRole::Producer && a.auto_archive {
                return Err(scenario_err(format!("actor {}: only producers archive", a.id)));
            }
            a.handler_kind()?;
        }
        if self.interval_ms == 0 {
            return Err(scenario_err("intervalMs must be positive"));
        }

        let mut registry = SchemaRegistry::default();
        let mut schema_files = Vec::new();
        for (i, doc) in self.schemas.iter().enumerate() {
            let bytes = json_document(doc, &format!("schemas[{i}]"))?;
            let def = SchemaDefinition::parse(&format!("schemas[{i}]"), &bytes)?;
            schema_files.push((format!("{SCHEMA_DIR}{}", def.file_name()), bytes));
            registry.insert(def)?;
        }
        let pipelines = match &self.pipelines {
            None => None,
            Some(doc) => {
                let bytes = json_document(doc, "pipelines")?;
                Bindings::parse(&bytes, &registry)?;
                Some(bytes)
            }
        };
        let mut resources = Vec::new();
        for (i, doc) in self.initial_resources.iter().enumerate() {
            let r = resource_from_tree(ValueTree::from_json(doc.clone()))
                .map_err(|e| scenario_err(format!("initialResources[{i}]: {e}")))?;
            let key = r.key();
            let owner = self
                .actors
                .iter()
                .position(|a| a.role == ActorRole::Producer && a.selects(&key))
                .ok_or_else(|| scenario_err(format!("no producer serves {key}")))?;
            resources.push((owner, r));
        }

        match &self.schedule {
            Schedule::Expr(e) => {
                round_robin_cycles(e).ok_or_else(|| scenario_err(format!("bad schedule {e:?}")))?;
            }
            Schedule::Steps(steps) => {
                for (i, s) in steps.iter().enumerate() {
                    self.check_step(s).map_err(|m| scenario_err(format!("schedule[{i}]: {m}")))?;
                }
            }
        }
        for a in &self.assertions {
            match a {
                Assertion::PhaseEquals { resource, phase } => {
                    resource.parse::<ResourceKey>().map_err(|e| scenario_err(format!("{}: {e}", a.label())))?;
                    phase.parse::<Phase>().map_err(|e| scenario_err(format!("{}: {e}", a.label())))?;
                }
                Assertion::MaxPushAttempts { actor: Some(id), .. } if self.actor(id).is_none() => {
                    return Err(scenario_err(format!("{}: unknown actor", a.label())));
                }
                _ => {}
            }
        }
        Ok(Prepared {
            schema_files,
            registry,
            pipelines,
            resources,
        })
    }

    fn check_step(&self, s: &Step) -> std::result::Result<(), String> {
        if s.action == StepAction::Wait {
            return match s.ms {
                Some(_) => Ok(()),
                None => Err("wait needs ms".into()),
            };
        }
        let id = s.actor.as_deref().ok_or("step needs an actor")?;
        let actor = self.actor(id).ok_or_else(|| format!("unknown actor {id}"))?;
        match s.action {
            StepAction::Crash if actor.role != ActorRole::Consumer => Err("only consumers crash".into()),
            StepAction::ReconcileLocal if actor.role == ActorRole::Pipeline => {
                Err("pipelines always push".into())
            }
            StepAction::Bump => {
                if actor.role != ActorRole::Producer {
                    return Err("only producers bump".into());
                }
                let key = s.resource.as_deref().ok_or("bump needs a resource")?;
                key.parse::<ResourceKey>().map_err(|e| e.to_string())?;
                let path = s.path.as_deref().ok_or("bump needs a path")?;
                path.parse::<Path>().map_err(|e| e.to_string())?;
                s.value.as_ref().ok_or("bump needs a value")?;
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// The explicit step list a scenario runs. `round-robin(n)` gives every
/// actor one reconcile per cycle, in an order shuffled per cycle by the
/// scenario seed.
pub fn expand_schedule(spec: &ScenarioSpec) -> Vec<Step> {
    match &spec.schedule {
        Schedule::Steps(steps) => steps.clone(),
        Schedule::Expr(expr) => {
            let cycles = round_robin_cycles(expr).unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut order: Vec<&str> = spec.actors.iter().map(|a| a.id.as_str()).collect();
            let mut steps = Vec::with_capacity(order.len() * cycles as usize);
            for _ in 0..cycles {
                order.shuffle(&mut rng);
                steps.extend(order.iter().map(|id| Step::new(id, StepAction::Reconcile)));
            }
            steps
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    /// How many steps this actor had run before this one.
    pub cycle: u64,
    pub action: StepAction,
    pub at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<ReportEntry>,
    /// Most attempts a single push took during the step.
    pub push_attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_tip: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionOutcome {
    pub assertion: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<SimEvent>,
    pub outcomes: Vec<AssertionOutcome>,
    /// Remote branch tip after the last step.
    pub final_tip: Option<String>,
    /// sha256 over the JSON lines of events and outcomes.
    pub digest: String,
}

impl SimTrace {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    /// The first failed assertion as an error.
    pub fn check(&self) -> Result<()> {
        match self.outcomes.iter().find(|o| !o.passed) {
            None => Ok(()),
            Some(o) => Err(Error::Assertion {
                assertion: o.assertion.clone(),
                detail: o.detail.clone().unwrap_or_default(),
            }),
        }
    }

    pub fn to_json_lines(&self) -> String {
        trace_lines(&self.events, &self.outcomes)
    }

    pub fn summary(&self) -> String {
        let errors = self.events.iter().filter(|e| e.error.is_some()).count();
        let mut out = format!(
            "scenario {} (seed {}): {} steps, {} step errors, digest {}\n",
            self.scenario,
            self.seed,
            self.events.len(),
            errors,
            &self.digest[..12]
        );
        for o in &self.outcomes {
            let mark = if o.passed { "pass" } else { "FAIL" };
            match &o.detail {
                Some(d) => out.push_str(&format!("  {mark} {}: {d}\n", o.assertion)),
                None => out.push_str(&format!("  {mark} {}\n", o.assertion)),
            }
        }
        out
    }
}

fn trace_lines(events: &[SimEvent], outcomes: &[AssertionOutcome]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    for o in outcomes {
        out.push_str(&serde_json::to_string(o).expect("outcome serializes"));
        out.push('\n');
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Actor {
    spec: ActorSpec,
    handle: RepoHandle,
    handler: BuiltinHandler,
    desired: DesiredSet,
    down: bool,
    steps: u64,
    incarnation: u32,
    backoff_seed: u64,
}

struct Sim<'a> {
    spec: &'a ScenarioSpec,
    workdir: PathBuf,
    masks: Vec<String>,
    remote: PathBuf,
    clock: Arc<ManualClock>,
    actors: Vec<Actor>,
    bindings: Option<Bindings>,
}

impl Sim<'_> {
    fn dyn_clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    fn clone_actor(&self, spec: &ActorSpec, dir: &str, backoff_seed: u64) -> Result<RepoHandle> {
        let mut handle = RepoHandle::clone_from(
            &self.remote.display().to_string(),
            &self.workdir.join(dir),
            DEFAULT_BRANCH,
            spec.identity(),
            self.dyn_clock(),
        )?;
        handle.set_backoff(Backoff::default(), backoff_seed);
        Ok(handle)
    }

    fn new_handler(&self, spec: &ActorSpec) -> Result<BuiltinHandler> {
        Ok(BuiltinHandler::new(spec.handler_kind()?).with_clock(self.dyn_clock()))
    }

    /// Strips machine-specific paths so traces compare across runs.
    fn scrub(&self, text: &str) -> String {
        self.masks.iter().fold(text.to_string(), |t, m| t.replace(m.as_str(), WORKDIR_MARK))
    }

    fn remote_tip(&self) -> Option<String> {
        Git::new(&self.remote)
            .rev_parse(&format!("refs/heads/{DEFAULT_BRANCH}"))
            .ok()
            .flatten()
    }

    fn consumer_options(&self, spec: &ActorSpec, mode: PushMode, crash: bool) -> ConsumerOptions {
        let interval = Duration::from_millis(self.spec.interval_ms);
        ConsumerOptions {
            namespaces: spec.namespaces.clone(),
            kinds: spec.kinds.iter().map(|k| k.to_ascii_lowercase()).collect(),
            stale_after: interval * STALE_FACTOR,
            push_mode: mode,
            crash_after_processing: crash,
        }
    }

    fn run_step(&mut self, index: usize, step: &Step) -> SimEvent {
        let mut event = SimEvent {
            step: index,
            actor: step.actor.clone(),
            cycle: 0,
            action: step.action,
            at: self.clock.now(),
            entries: Vec::new(),
            push_attempts: 0,
            report_digest: None,
            remote_tip: None,
            error: None,
        };
        let outcome = self.execute(step, &mut event);
        match outcome {
            Ok(Some(report)) => {
                let json = serde_json::to_string(&report).expect("report serializes");
                event.report_digest = Some(sha256_hex(self.scrub(&json).as_bytes()));
                event.push_attempts = event.push_attempts.max(report.max_push_attempts);
                event.entries = report.entries;
            }
            Ok(None) => {}
            Err(e) => event.error = Some(self.scrub(&e.to_string())),
        }
        event.remote_tip = self.remote_tip();
        event
    }

    fn execute(&mut self, step: &Step, event: &mut SimEvent) -> Result<Option<ReconcileReport>> {
        if step.action == StepAction::Wait {
            self.clock.advance(Duration::from_millis(step.ms.unwrap_or(0)));
            return Ok(None);
        }
        let id = step.actor.as_deref().unwrap_or_default();
        let i = self
            .actors
            .iter()
            .position(|a| a.spec.id == id)
            .ok_or_else(|| scenario_err(format!("unknown actor {id}")))?;
        event.cycle = self.actors[i].steps;
        self.actors[i].steps += 1;

        if step.action == StepAction::Revive {
            let a = &self.actors[i];
            let incarnation = a.incarnation + 1;
            let spec = a.spec.clone();
            let dir = format!("{}-{incarnation}", spec.id);
            let handle = self.clone_actor(&spec, &dir, a.backoff_seed.wrapping_add(incarnation as u64))?;
            let handler = self.new_handler(&spec)?;
            let a = &mut self.actors[i];
            a.handle = handle;
            a.handler = handler;
            a.down = false;
            a.incarnation = incarnation;
            return Ok(None);
        }
        if self.actors[i].down {
            return Err(scenario_err(format!("actor {id} is down")));
        }

        let options_local = self.consumer_options(&self.actors[i].spec, PushMode::Deferred, false);
        let options_now = self.consumer_options(&self.actors[i].spec, PushMode::Immediate, false);
        let options_crash = self.consumer_options(&self.actors[i].spec, PushMode::Immediate, true);
        let bindings = self.bindings.clone();
        let a = &mut self.actors[i];
        let mode = if step.action == StepAction::ReconcileLocal {
            PushMode::Deferred
        } else {
            PushMode::Immediate
        };
        match step.action {
            StepAction::Reconcile | StepAction::ReconcileLocal => match a.spec.role {
                ActorRole::Producer => producer_cycle(&mut a.handle, &mut a.desired, mode).map(Some),
                ActorRole::Consumer => {
                    let options = if mode == PushMode::Deferred {
                        &options_local
                    } else {
                        &options_now
                    };
                    consumer_reconcile_once(&mut a.handle, &mut a.handler, options).map(Some)
                }
                ActorRole::Pipeline => {
                    let bindings = match bindings {
                        Some(b) => b,
                        None => load_bindings(&a.handle)?,
                    };
                    pipeline_reconcile_once(&mut a.handle, &bindings).map(Some)
                }
            },
            StepAction::Push => {
                let report = a.handle.push()?;
                event.push_attempts = report.attempts;
                Ok(None)
            }
            StepAction::Crash => {
                a.down = true;
                consumer_reconcile_once(&mut a.handle, &mut a.handler, &options_crash).map(Some)
            }
            StepAction::GoOffline | StepAction::GoOnline => {
                a.handle.set_offline(step.action == StepAction::GoOffline);
                Ok(None)
            }
            StepAction::Bump => {
                let key: ResourceKey = step.resource.as_deref().unwrap_or_default().parse()?;
                let mut path: Path = step.path.as_deref().unwrap_or_default().parse()?;
                path = path.strip_prefix(&Path::key("spec")).unwrap_or(path);
                let value = ValueTree::from_json(step.value.clone().unwrap_or_default());
                let d = a
                    .desired
                    .get_mut(&key)
                    .ok_or_else(|| scenario_err(format!("{id} does not desire {key}")))?;
                d.resource.spec = d.resource.spec.set(&path, value)?;
                Ok(None)
            }
            StepAction::Revive | StepAction::Wait => unreachable!("handled above"),
        }
    }

    fn evaluate(&self, assertion: &Assertion, events: &[SimEvent], observer: &RepoHandle) -> AssertionOutcome {
        let result = match assertion {
            Assertion::Converged => self.check_converged(observer),
            Assertion::PhaseEquals { resource, phase } => check_phase(observer, resource, phase),
            Assertion::AuditClean => observer
                .load_policy()
                .and_then(|p| audit_repo(observer, &p))
                .map_err(|e| e.to_string())
                .and_then(|findings| match findings.first() {
                    None => Ok(()),
                    Some(f) => Err(format!(
                        "{} findings, first {} at {}: {}",
                        findings.len(),
                        f.code.as_str(),
                        f.commit_id,
                        f.detail
                    )),
                }),
            Assertion::ReplayClean => match replay_history(observer) {
                Err(e) => Err(e.to_string()),
                Ok(r) => match r.mismatches().next() {
                    None => Ok(()),
                    Some(p) => Err(format!("{} replays as {:?}", p.path, p.outcome)),
                },
            },
            Assertion::MaxPushAttempts { max, actor } => {
                let worst = events
                    .iter()
                    .filter(|e| actor.is_none() || e.actor == *actor)
                    .max_by_key(|e| e.push_attempts);
                match worst {
                    Some(e) if e.push_attempts > *max => Err(format!(
                        "step {} ({}) needed {} push attempts",
                        e.step,
                        e.actor.as_deref().unwrap_or("-"),
                        e.push_attempts
                    )),
                    _ => Ok(()),
                }
            }
        };
        AssertionOutcome {
            assertion: assertion.label(),
            passed: result.is_ok(),
            detail: result.err().map(|d| self.scrub(&d)),
        }
    }

    /// Every live resource sits at the fixed point of a consumer serving it,
    /// every desired resource is live or archived, and pipelines have
    /// nothing left to write.
    fn check_converged(&self, observer: &RepoHandle) -> std::result::Result<(), String> {
        let snapshot = observer.read_all().map_err(|e| e.to_string())?;
        if let Some(d) = snapshot.diagnostics.first() {
            return Err(format!("{}: {}", d.path, d.message));
        }
        for r in snapshot.resources.values() {
            let key = r.key();
            let kinds: Vec<BuiltinKind> = self
                .actors
                .iter()
                .filter(|a| a.spec.role == ActorRole::Consumer && a.spec.selects(&key))
                .map(|a| a.handler.kind())
                .collect();
            if kinds.is_empty() {
                return Err(format!("{key}: no consumer serves it"));
            }
            let status = r.status.as_ref().ok_or_else(|| format!("{key}: no status"))?;
            if status.observed_generation != r.metadata.generation {
                return Err(format!(
                    "{key}: observed generation {} of {}",
                    status.observed_generation, r.metadata.generation
                ));
            }
            let ok = match status.phase {
                Phase::Completed => kinds
                    .iter()
                    .any(|k| *k != BuiltinKind::FailAlways && status.result == builtin_result(*k, &r.spec)),
                Phase::Failed => kinds
                    .iter()
                    .any(|k| matches!(k, BuiltinKind::FailAlways | BuiltinKind::FailFirstN(_))),
                _ => false,
            };
            if !ok {
                return Err(format!("{key}: {} is not a handler fixed point", status.phase));
            }
        }
        for a in &self.actors {
            for d in a.desired.iter() {
                let key = d.resource.key();
                if snapshot.get(&key).is_some() {
                    continue;
                }
                let archived = observer
                    .worktree_files(&archive_dir(&key))
                    .map_err(|e| e.to_string())?;
                if archived.is_empty() {
                    return Err(format!("{key}: desired by {} but absent", a.spec.id));
                }
            }
        }
        if let Some(b) = &self.bindings {
            let registry = observer.load_schemas().map_err(|e| e.to_string())?;
            let eval = evaluate_bindings(&snapshot.resources, b, &registry, observer.now());
            if let Some(w) = eval.writes.first() {
                return Err(format!("pipeline would still write {}", w.resource.key()));
            }
        }
        Ok(())
    }
}

fn check_phase(observer: &RepoHandle, resource: &str, phase: &str) -> std::result::Result<(), String> {
    let key: ResourceKey = resource.parse().map_err(|e: crate::error::DocumentError| e.to_string())?;
    let want: Phase = phase.parse().map_err(|e: crate::error::DocumentError| e.to_string())?;
    let live = observer.read_resource(&key).map_err(|e| e.to_string())?;
    if want == Phase::Archived {
        let archived = observer.worktree_files(&archive_dir(&key)).map_err(|e| e.to_string())?;
        return match (live, archived.is_empty()) {
            (None, false) => Ok(()),
            (Some(r), _) => Err(format!("still live in phase {:?}", r.phase())),
            (None, true) => Err("neither live nor archived".into()),
        };
    }
    match live.as_ref().and_then(|r| r.phase()) {
        Some(p) if p == want => Ok(()),
        Some(p) => Err(format!("phase is {p}")),
        None => Err("not live".into()),
    }
}

fn is_empty_or_missing(dir: &FsPath) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(e.into()),
    }
}

/// Runs a scenario in `workdir`, which must be empty or absent. Step
/// failures are recorded in the trace and do not stop the run; assertion
/// results are in [`SimTrace::outcomes`] (see [`SimTrace::check`]).
pub fn run_scenario(spec: &ScenarioSpec, workdir: &FsPath) -> Result<SimTrace> {
    let prepared = spec.prepare()?;
    if !is_empty_or_missing(workdir)? {
        return Err(scenario_err(format!("workdir {} is not empty", workdir.display())));
    }
    std::fs::create_dir_all(workdir)?;
    let mut masks = vec![workdir.display().to_string()];
    let canonical = workdir.canonicalize()?.display().to_string();
    if canonical != masks[0] {
        masks.insert(0, canonical);
    }

    let clock = Arc::new(ManualClock::starting_at(sim_epoch()));
    let remote = workdir.join("remote.git");
    let admin = Identity::new("giter-sim", "sim@giter.invalid", Role::Producer);
    init_bare_remote(&remote, DEFAULT_BRANCH, &admin, clock.as_ref())?;

    let mut policy = TrustPolicy::new();
    for a in &spec.actors {
        let id = a.identity();
        policy = policy.with_identity(&id.email, id.role);
    }
    let policy_doc = policy.to_document();
    let mut files: Vec<(&str, &[u8])> = vec![(POLICY_PATH, &policy_doc)];
    for (path, bytes) in &prepared.schema_files {
        files.push((path, bytes));
    }
    if let Some(p) = &prepared.pipelines {
        files.push((PIPELINES_PATH, p));
    }
    let shared_clock: Arc<dyn Clock> = clock.clone();
    let mut setup = RepoHandle::clone_from(
        &remote.display().to_string(),
        &workdir.join("setup"),
        DEFAULT_BRANCH,
        admin,
        shared_clock,
    )?;
    setup.commit_config(&files, &format!("scenario {}", spec.name))?;
    setup.push()?;

    let bindings = match &prepared.pipelines {
        Some(bytes) => Some(Bindings::parse(bytes, &prepared.registry)?),
        None => None,
    };
    let mut sim = Sim {
        spec,
        workdir: workdir.to_path_buf(),
        masks,
        remote,
        clock,
        actors: Vec::new(),
        bindings,
    };
    for (i, a) in spec.actors.iter().enumerate() {
        let backoff_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1);
        let handle = sim.clone_actor(a, &a.id, backoff_seed)?;
        let handler = sim.new_handler(a)?;
        sim.actors.push(Actor {
            spec: a.clone(),
            handle,
            handler,
            desired: DesiredSet::new(),
            down: false,
            steps: 0,
            incarnation: 0,
            backoff_seed,
        });
    }
    for (owner, r) in prepared.resources {
        let auto = sim.actors[owner].spec.auto_archive;
        sim.actors[owner].desired.insert(r, auto)?;
    }

    let mut events = Vec::new();
    for (n, step) in expand_schedule(spec).iter().enumerate() {
        sim.clock.advance(Duration::from_millis(spec.step_ms));
        events.push(sim.run_step(n, step));
    }

    let observer_identity = Identity::new("observer", "observer@giter.invalid", Role::Observer);
    let observer = RepoHandle::clone_from(
        &sim.remote.display().to_string(),
        &workdir.join("observer"),
        DEFAULT_BRANCH,
        observer_identity,
        sim.dyn_clock(),
    )?;
    let outcomes: Vec<AssertionOutcome> = spec
        .assertions
        .iter()
        .map(|a| sim.evaluate(a, &events, &observer))
        .collect();
    let digest = sha256_hex(trace_lines(&events, &outcomes).as_bytes());
    Ok(SimTrace {
        scenario: spec.name.clone(),
        seed: spec.seed,
        final_tip: sim.remote_tip(),
        events,
        outcomes,
        digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(schedule: &str) -> ScenarioSpec {
        ScenarioSpec {
            name: "t".into(),
            seed: 0,
            interval_ms: 10_000,
            step_ms: 1_000,
            actors: vec![
                ActorSpec::new("p", ActorRole::Producer),
                ActorSpec::new("c", ActorRole::Consumer),
            ],
            schemas: Vec::new(),
            pipelines: None,
            initial_resources: Vec::new(),
            schedule: Schedule::Expr(schedule.into()),
            assertions: Vec::new(),
        }
    }

    #[test]
    fn round_robin_expression() {
        assert_eq!(round_robin_cycles("round-robin(4)"), Some(4));
        assert_eq!(round_robin_cycles(" round-robin( 2 ) "), Some(2));
        assert_eq!(round_robin_cycles("round-robin"), None);
        assert_eq!(round_robin_cycles("rr(2)"), None);
    }

    #[test]
    fn validation_rejects() {
        let mut s = spec("round-robin(1)");
        assert!(s.validate().is_ok());
        s.actors.push(ActorSpec::new("p", ActorRole::Consumer));
        assert!(matches!(s.validate(), Err(Error::Scenario(_))));

        let mut s = spec("round-robin(1)");
        s.actors[0].handler = Some("echo".into());
        assert!(s.validate().is_err());

        let mut s = spec("round-robin(1)");
        s.actors[1].handler = Some("teleport".into());
        assert!(s.validate().is_err());

        let mut s = spec("round-robin(1)");
        s.schedule = Schedule::Steps(vec![Step::new("p", StepAction::Crash)]);
        assert!(s.validate().is_err());
        s.schedule = Schedule::Steps(vec![Step::new("ghost", StepAction::Reconcile)]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn parse_round_trip() {
        let text = "name: t\nseed: 3\nactors:\n- id: p\n  role: producer\n- id: c\n  role: consumer\n  handler: fail-first-n(2)\nschedule: round-robin(2)\nassertions:\n- type: converged\n- type: max-push-attempts\n  max: 2\n  actor: c\n";
        let s = ScenarioSpec::parse(text.as_bytes()).unwrap();
        assert_eq!(s.actors[1].handler_kind().unwrap(), BuiltinKind::FailFirstN(2));
        assert_eq!(s.assertions.len(), 2);
        assert_eq!(ScenarioSpec::parse(&s.to_document()).unwrap(), s);
        assert!(ScenarioSpec::parse(b"name: t\nseed: 1\nactors: []\nschedule: round-robin(1)\nbogus: 1\n").is_err());
    }
}
