//! Producer and consumer reconciliation: one cycle each, plus the polling
//! loop that drives them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clock::Clock;
use crate::document::parse_resource;
use crate::error::{Error, Result};
use crate::handler::{Handler, HandlerOutcome};
use crate::ownership::Role;
use crate::repo::{RepoHandle, Snapshot, Verb};
use crate::resource::{
    transition_phase, ExchangeResource, Phase, ResourceKey, ResourceStatus, RESERVED_ANNOTATION_PREFIX,
};

pub const DEFAULT_INTERVAL: Duration = Duration::from_secs(10);
pub const DEFAULT_JITTER_FRACTION: f64 = 0.1;
pub const STALE_FACTOR: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Created,
    SpecUpdated,
    Archived,
    StatusUpdated,
    SkippedCurrent,
    SkippedOffline,
    HandlerFailed,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Created => "created",
            Action::SpecUpdated => "spec-updated",
            Action::Archived => "archived",
            Action::StatusUpdated => "status-updated",
            Action::SkippedCurrent => "skipped-current",
            Action::SkippedOffline => "skipped-offline",
            Action::HandlerFailed => "handler-failed",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub resource: String,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileReport {
    pub timestamp: DateTime<Utc>,
    pub entries: Vec<ReportEntry>,
    pub push_attempts: u32,
    /// Most attempts any single push needed this cycle.
    pub max_push_attempts: u32,
    pub diagnostics: Vec<String>,
}

impl ReconcileReport {
    pub fn new(timestamp: DateTime<Utc>) -> Self {
        ReconcileReport {
            timestamp,
            entries: Vec::new(),
            push_attempts: 0,
            max_push_attempts: 0,
            diagnostics: Vec::new(),
        }
    }

    fn record(&mut self, key: &ResourceKey, action: Action, detail: Option<String>) {
        self.entries.push(ReportEntry {
            resource: key.to_string(),
            action,
            detail,
        });
    }

    pub fn action_for(&self, key: &ResourceKey) -> Option<Action> {
        let key = key.to_string();
        self.entries.iter().find(|e| e.resource == key).map(|e| e.action)
    }

    pub fn count(&self, action: Action) -> usize {
        self.entries.iter().filter(|e| e.action == action).count()
    }

    /// Only skipped-current entries and no diagnostics.
    pub fn is_fixed_point(&self) -> bool {
        self.diagnostics.is_empty() && self.entries.iter().all(|e| e.action == Action::SkippedCurrent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesiredResource {
    pub resource: ExchangeResource,
    pub auto_archive: bool,
}

/// What the producer wants to exist. Status on the given documents is
/// ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesiredSet {
    items: BTreeMap<ResourceKey, DesiredResource>,
}

impl DesiredSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mut resource: ExchangeResource, auto_archive: bool) -> Result<()> {
        resource.status = None;
        resource.check_invariants()?;
        let key = resource.key();
        if self.items.contains_key(&key) {
            return Err(Error::DuplicateResource(key.to_string()));
        }
        self.items.insert(
            key,
            DesiredResource {
                resource,
                auto_archive,
            },
        );
        Ok(())
    }

    /// Parses every document in `docs`.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [u8]>, auto_archive: bool) -> Result<Self> {
        let mut set = DesiredSet::new();
        for bytes in docs {
            set.insert(parse_resource(bytes)?, auto_archive)?;
        }
        Ok(set)
    }

    pub fn remove(&mut self, key: &ResourceKey) -> Option<DesiredResource> {
        self.items.remove(key)
    }

    /// Drops every resource the report says was archived.
    pub fn prune_archived(&mut self, report: &ReconcileReport) {
        for entry in report.entries.iter().filter(|e| e.action == Action::Archived) {
            if let Ok(key) = entry.resource.parse() {
                self.items.remove(&key);
            }
        }
    }

    pub fn get(&self, key: &ResourceKey) -> Option<&DesiredResource> {
        self.items.get(key)
    }

    pub fn get_mut(&mut self, key: &ResourceKey) -> Option<&mut DesiredResource> {
        self.items.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DesiredResource> {
        self.items.values()
    }
}

/// When writes reach the remote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PushMode {
    /// Push after every write (consumer) or at cycle end (producer).
    #[default]
    Immediate,
    /// Commit locally only; something else pushes later.
    Deferred,
}

fn fetch_or_offline(handle: &mut RepoHandle, report: &mut ReconcileReport) -> Result<bool> {
    match handle.sync() {
        Ok(_) => Ok(true),
        Err(Error::RemoteUnavailable(why)) => {
            report.diagnostics.push(format!("remote unavailable: {why}"));
            Ok(false)
        }
        Err(e) => Err(e),
    }
}

fn push(handle: &mut RepoHandle, mode: PushMode, report: &mut ReconcileReport) -> Result<()> {
    if mode == PushMode::Deferred {
        return Ok(());
    }
    match handle.push() {
        Ok(p) => {
            report.push_attempts += p.attempts;
            report.max_push_attempts = report.max_push_attempts.max(p.attempts);
            Ok(())
        }
        Err(Error::RemoteUnavailable(why)) => {
            report.diagnostics.push(format!("push deferred, remote unavailable: {why}"));
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn user_annotations(r: &ExchangeResource) -> BTreeMap<&String, &String> {
    r.metadata
        .annotations
        .iter()
        .filter(|(k, _)| !k.starts_with(RESERVED_ANNOTATION_PREFIX))
        .collect()
}

/// Result of comparing one desired resource with the repository copy.
fn desired_update(current: &ExchangeResource, desired: &ExchangeResource) -> Option<ExchangeResource> {
    let spec_changed = current.spec != desired.spec;
    let meta_changed = current.metadata.labels != desired.metadata.labels
        || user_annotations(current) != user_annotations(desired);
    if !spec_changed && !meta_changed {
        return None;
    }
    let mut next = current.clone();
    next.spec = desired.spec.clone();
    next.metadata.labels = desired.metadata.labels.clone();
    next.metadata
        .annotations
        .retain(|k, _| k.starts_with(RESERVED_ANNOTATION_PREFIX));
    for (k, v) in user_annotations(desired) {
        next.metadata.annotations.insert(k.clone(), v.clone());
    }
    if spec_changed {
        next.metadata.generation += 1;
    }
    Some(next)
}

/// A new resource as the producer first commits it: generation 1 and the
/// Pending status skeleton.
pub fn seeded(desired: &ExchangeResource, now: DateTime<Utc>) -> ExchangeResource {
    let mut r = desired.clone();
    r.metadata.generation = 1;
    r.metadata.created_at = Some(now);
    r.status = Some(ResourceStatus::pending_seed());
    r
}

/// Writes `next` (create or update) and records the action; schema or
/// permission refusals become diagnostics.
fn producer_write(
    handle: &mut RepoHandle,
    report: &mut ReconcileReport,
    next: &ExchangeResource,
    verb: Verb,
    action: Action,
) -> Result<()> {
    let key = next.key();
    match handle.commit_resource(next, verb) {
        Ok(_) => {
            report.record(&key, action, None);
            Ok(())
        }
        Err(e @ (Error::ValidationFailed { .. } | Error::OwnershipViolation { .. } | Error::Document(_))) => {
            report.diagnostics.push(format!("{key}: {e}"));
            report.record(&key, Action::SkippedCurrent, Some(e.to_string()));
            Ok(())
        }
        Err(e) => Err(e),
    }
}

pub fn producer_reconcile_once(handle: &mut RepoHandle, desired: &DesiredSet) -> Result<ReconcileReport> {
    producer_reconcile_with(handle, desired, PushMode::Immediate)
}

pub fn producer_reconcile_with(
    handle: &mut RepoHandle,
    desired: &DesiredSet,
    mode: PushMode,
) -> Result<ReconcileReport> {
    let mut report = ReconcileReport::new(handle.now());
    if handle.role() != Role::Producer {
        return Err(Error::OwnershipViolation {
            role: handle.role().to_string(),
            detail: "producer reconciliation needs the producer role".into(),
        });
    }
    if !fetch_or_offline(handle, &mut report)? {
        for d in desired.iter() {
            report.record(&d.resource.key(), Action::SkippedOffline, None);
        }
        return Ok(report);
    }
    let snapshot = handle.read_all()?;
    report
        .diagnostics
        .extend(snapshot.diagnostics.iter().map(|d| format!("{}: {}", d.path, d.message)));
    for d in desired.iter() {
        let key = d.resource.key();
        match snapshot.get(&key) {
            None => {
                let next = seeded(&d.resource, handle.now());
                producer_write(handle, &mut report, &next, Verb::Create, Action::Created)?;
            }
            Some(current) => {
                if let Some(next) = desired_update(current, &d.resource) {
                    producer_write(handle, &mut report, &next, Verb::Update, Action::SpecUpdated)?;
                } else if d.auto_archive && is_done(current) {
                    handle.archive_resource(current)?;
                    report.record(&key, Action::Archived, None);
                } else {
                    report.record(&key, Action::SkippedCurrent, None);
                }
            }
        }
    }
    push(handle, mode, &mut report)?;
    Ok(report)
}

/// Completed for the current generation.
pub fn is_done(r: &ExchangeResource) -> bool {
    matches!(&r.status, Some(s) if s.phase == Phase::Completed && s.observed_generation == r.metadata.generation)
}

#[derive(Debug, Clone, Default)]
pub struct ConsumerOptions {
    /// Only these namespaces, when non-empty.
    pub namespaces: Vec<String>,
    /// Only these kinds (lowercase), when non-empty.
    pub kinds: Vec<String>,
    /// Processing older than this is considered abandoned.
    pub stale_after: Duration,
    pub push_mode: PushMode,
    /// Stop right after the Processing write, as if the process died.
    pub crash_after_processing: bool,
}

impl ConsumerOptions {
    pub fn for_interval(interval: Duration) -> Self {
        ConsumerOptions {
            stale_after: interval * STALE_FACTOR,
            ..Default::default()
        }
    }

    fn selects(&self, key: &ResourceKey) -> bool {
        (self.namespaces.is_empty() || self.namespaces.contains(&key.namespace))
            && (self.kinds.is_empty() || self.kinds.iter().any(|k| k.eq_ignore_ascii_case(&key.kind)))
    }
}

/// Why a resource needs the consumer's attention, if it does.
pub fn needs_work(r: &ExchangeResource, now: DateTime<Utc>, stale_after: Duration) -> Option<&'static str> {
    let Some(status) = &r.status else {
        return Some("no status");
    };
    match status.phase {
        Phase::Pending => Some("pending"),
        Phase::Archived => None,
        _ if status.observed_generation < r.metadata.generation => Some("new generation"),
        Phase::Processing => {
            let stale = chrono::Duration::from_std(stale_after).unwrap_or(chrono::Duration::MAX);
            match status.updated_at {
                Some(at) if now - at < stale => None,
                _ => Some("stale processing"),
            }
        }
        _ => None,
    }
}

/// Status for a (re)start of processing at the current generation.
fn processing_status(r: &ExchangeResource, now: DateTime<Utc>) -> Result<ResourceStatus> {
    let current = r.status.clone().unwrap_or_else(ResourceStatus::pending_seed);
    let mut next = match current.phase {
        Phase::Processing => {
            let mut s = current;
            s.updated_at = Some(now);
            s
        }
        Phase::Pending => transition_phase(&current, Phase::Processing, now)?,
        _ => {
            let reset = transition_phase(&current, Phase::Pending, now)?;
            transition_phase(&reset, Phase::Processing, now)?
        }
    };
    next.observed_generation = r.metadata.generation;
    next.message = None;
    Ok(next)
}

pub fn consumer_reconcile_once(
    handle: &mut RepoHandle,
    handler: &mut dyn Handler,
    options: &ConsumerOptions,
) -> Result<ReconcileReport> {
    let mut report = ReconcileReport::new(handle.now());
    if handle.role() != Role::Consumer {
        return Err(Error::OwnershipViolation {
            role: handle.role().to_string(),
            detail: "consumer reconciliation needs the consumer role".into(),
        });
    }
    let online = fetch_or_offline(handle, &mut report)?;
    let snapshot = handle.read_all()?;
    report
        .diagnostics
        .extend(snapshot.diagnostics.iter().map(|d| format!("{}: {}", d.path, d.message)));
    let selected: Vec<&ExchangeResource> = snapshot
        .resources
        .values()
        .filter(|r| options.selects(&r.key()))
        .collect();
    if !online {
        for r in selected {
            report.record(&r.key(), Action::SkippedOffline, None);
        }
        return Ok(report);
    }
    for r in selected {
        let key = r.key();
        let now = handle.now();
        let Some(reason) = needs_work(r, now, options.stale_after) else {
            report.record(&key, Action::SkippedCurrent, None);
            continue;
        };
        debug!("{key}: {reason}");
        let mut working = r.clone();
        working.status = Some(processing_status(r, now)?);
        handle.commit_resource(&working, Verb::Status)?;
        push(handle, options.push_mode, &mut report)?;
        if options.crash_after_processing {
            report.record(&key, Action::StatusUpdated, Some("crashed after processing".into()));
            return Ok(report);
        }

        let outcome = match handler.handle(&working) {
            Ok(o) => o,
            Err(e) => HandlerOutcome::failed(e.to_string()),
        };
        let action = write_outcome(handle, &key, &working, outcome)?;
        report.record(&key, action, None);
        push(handle, options.push_mode, &mut report)?;
    }
    Ok(report)
}

/// Records the handler outcome on the latest local copy. A spec update
/// merged in meanwhile stays visible through the generation gap.
fn write_outcome(
    handle: &mut RepoHandle,
    key: &ResourceKey,
    processed: &ExchangeResource,
    outcome: HandlerOutcome,
) -> Result<Action> {
    let latest = handle.read_resource(key)?.unwrap_or_else(|| processed.clone());
    let processing = latest.status.clone().unwrap_or_else(|| processed.status.clone().expect("processing status"));
    let mut status = transition_phase(&processing, outcome.phase, handle.now())?;
    status.observed_generation = processed.metadata.generation;
    status.result = outcome.result;
    status.message = outcome.message;
    let mut done = latest.clone();
    done.status = Some(status);
    let failed = done.phase() == Some(Phase::Failed);
    match handle.commit_resource(&done, Verb::Status) {
        Ok(_) => {}
        Err(Error::ValidationFailed { summary, .. }) => {
            warn!("{key}: handler result rejected: {summary}");
            let mut s = done.status.take().expect("set above");
            s.phase = Phase::Failed;
            s.result = crate::value::ValueTree::empty_map();
            s.message = Some(format!("handler result rejected by schema: {summary}"));
            done.status = Some(s);
            handle.commit_resource(&done, Verb::Status)?;
            return Ok(Action::HandlerFailed);
        }
        Err(e) => return Err(e),
    }
    info!("{key}: {}", done.phase().map(|p| p.to_string()).unwrap_or_default());
    Ok(if failed {
        Action::HandlerFailed
    } else {
        Action::StatusUpdated
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    pub interval: Duration,
    pub jitter_fraction: f64,
    pub max_cycles: Option<u64>,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            interval: DEFAULT_INTERVAL,
            jitter_fraction: DEFAULT_JITTER_FRACTION,
            max_cycles: None,
            seed: 0,
        }
    }
}

impl LoopConfig {
    /// The interval with uniform jitter of ±`jitter_fraction`.
    pub fn next_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        let j = self.jitter_fraction.clamp(0.0, 1.0);
        if j == 0.0 {
            return self.interval;
        }
        let factor = rng.gen_range(1.0 - j..=1.0 + j);
        self.interval.mul_f64(factor)
    }
}

/// Sleeps in short slices so a stop request ends the wait early.
fn interruptible_sleep(clock: &dyn Clock, total: Duration, stop: &AtomicBool) {
    const SLICE: Duration = Duration::from_millis(100);
    let mut left = total;
    while !left.is_zero() && !stop.load(Ordering::SeqCst) {
        let step = left.min(SLICE);
        clock.sleep(step);
        left -= step;
    }
}

/// Calls `work` every interval until `max_cycles` or `stop`. Errors from a
/// cycle are folded into that cycle's report. Returns the last report.
pub fn run_loop(
    config: &LoopConfig,
    clock: &dyn Clock,
    stop: &AtomicBool,
    mut work: impl FnMut() -> Result<ReconcileReport>,
    mut on_report: impl FnMut(&ReconcileReport),
) -> Option<ReconcileReport> {
    assert!(!config.interval.is_zero(), "loop interval must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last = None;
    let mut cycle = 0u64;
    while !stop.load(Ordering::SeqCst) && config.max_cycles.is_none_or(|m| cycle < m) {
        let report = work().unwrap_or_else(|e| {
            warn!("cycle {cycle} failed: {e}");
            let mut r = ReconcileReport::new(clock.now());
            r.diagnostics.push(e.to_string());
            r
        });
        on_report(&report);
        last = Some(report);
        cycle += 1;
        if config.max_cycles.is_none_or(|m| cycle < m) {
            interruptible_sleep(clock, config.next_delay(&mut rng), stop);
        }
    }
    last
}

/// Shortcut for tests and embedding: the loop state of a producer that
/// forgets resources once archived.
pub fn producer_cycle(handle: &mut RepoHandle, desired: &mut DesiredSet, mode: PushMode) -> Result<ReconcileReport> {
    let report = producer_reconcile_with(handle, desired, mode)?;
    desired.prune_archived(&report);
    Ok(report)
}

/// Resources of `snapshot` a consumer with `options` would act on now.
pub fn actionable<'a>(snapshot: &'a Snapshot, options: &ConsumerOptions, now: DateTime<Utc>) -> Vec<&'a ExchangeResource> {
    snapshot
        .resources
        .values()
        .filter(|r| options.selects(&r.key()) && needs_work(r, now, options.stale_after).is_some())
        .collect()
}
