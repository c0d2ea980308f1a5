use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use giter_core::clock::{Clock, SystemClock};
use giter_core::document::{format_timestamp, parse_resource};
use giter_core::handler::{BuiltinHandler, BuiltinKind, ExternalHandler, Handler};
use giter_core::pipeline::{load_bindings, pipeline_reconcile_once, Bindings, PIPELINES_PATH};
use giter_core::policy::{audit_repo, has_violations, replay_history, TrustPolicy, POLICY_PATH};
use giter_core::reconciler::{
    consumer_reconcile_once, producer_reconcile_once, run_loop, Action, ConsumerOptions, DesiredSet,
    LoopConfig, ReconcileReport,
};
use giter_core::repo::{archive_dir, init_bare_remote, init_repo, RepoHandle};
use giter_core::schema::{validate_resource, SchemaDefinition, SchemaRegistry, SCHEMA_DIR};
use giter_core::sim::{run_scenario, ScenarioSpec};
use giter_core::{Error, ExchangeResource, Identity, ResourceKey, Role};
use log::{info, warn};
use serde_json::json;

use crate::config::CliConfig;
use crate::error::{CliError, Result, EXIT_ASSERTION, EXIT_FINDINGS, EXIT_OK, EXIT_VALIDATION};
use crate::output::Out;
use crate::InitArgs;

fn clock() -> Arc<dyn Clock> {
    Arc::new(SystemClock)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn parse_key(s: &str) -> Result<ResourceKey> {
    s.parse()
        .map_err(|e| CliError::Usage(format!("{s:?} is not <namespace>/<kind>/<name>: {e}")))
}

fn is_empty_or_missing(path: &Path) -> bool {
    match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_none(),
        Err(_) => true,
    }
}

/// Opens the configured working clone, cloning from `--remote` first when
/// it does not exist yet.
fn open(cfg: &CliConfig, identity: Identity) -> Result<RepoHandle> {
    let repo = cfg
        .repo
        .as_deref()
        .ok_or_else(|| CliError::Usage("no repository given (--repo or GITER_REPO)".into()))?;
    if is_empty_or_missing(repo) {
        let Some(remote) = &cfg.remote else {
            return Err(CliError::Usage(format!(
                "{} is not a repository and no --remote to clone from",
                repo.display()
            )));
        };
        // a local remote path is taken relative to where giter was started
        let remote = match Path::new(remote).canonicalize() {
            Ok(p) => p.display().to_string(),
            Err(_) => remote.clone(),
        };
        info!("cloning {remote} into {}", repo.display());
        return Ok(RepoHandle::clone_from(&remote, repo, &cfg.branch, identity, clock())?);
    }
    let handle = RepoHandle::open(repo, identity, clock())?;
    if handle.branch() != cfg.branch {
        warn!("{} is on branch {}, not {}", repo.display(), handle.branch(), cfg.branch);
    }
    Ok(handle)
}

/// Brings a read-only clone up to date; an unreachable remote only warns.
fn refresh(handle: &mut RepoHandle) -> Result<()> {
    match handle.sync() {
        Ok(_) => Ok(()),
        Err(Error::RemoteUnavailable(why)) => {
            warn!("remote unavailable, showing local state: {why}");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn report_text(report: &ReconcileReport, cycle: Option<u64>) -> String {
    let mut out = String::new();
    if let Some(c) = cycle {
        out.push_str(&format!("cycle {c} at {}\n", format_timestamp(&report.timestamp)));
    }
    for e in &report.entries {
        out.push_str(&format!("  {:<16} {}", e.action.as_str(), e.resource));
        if let Some(d) = &e.detail {
            out.push_str(&format!(" ({d})"));
        }
        out.push('\n');
    }
    if report.entries.is_empty() {
        out.push_str("  nothing to do\n");
    }
    if report.push_attempts > 0 {
        out.push_str(&format!("  push attempts: {}\n", report.push_attempts));
    }
    for d in &report.diagnostics {
        out.push_str(&format!("  warning: {d}\n"));
    }
    out
}

fn loop_config(cfg: &CliConfig, max_cycles: Option<u64>) -> LoopConfig {
    let seed = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
        ^ u64::from(std::process::id());
    LoopConfig {
        interval: cfg.interval,
        max_cycles,
        seed,
        ..LoopConfig::default()
    }
}

/// A flag set by Ctrl-C or SIGTERM. The loop finishes its current cycle
/// before looking at it.
fn stop_flag() -> Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst))
        .map_err(|e| CliError::Usage(format!("cannot install signal handler: {e}")))?;
    Ok(stop)
}

fn run_reconcile_loop(
    cfg: &CliConfig,
    out: &Out,
    max_cycles: Option<u64>,
    mut work: impl FnMut() -> giter_core::Result<ReconcileReport>,
) -> Result<u8> {
    let stop = stop_flag()?;
    let config = loop_config(cfg, max_cycles);
    let mut cycle = 0u64;
    run_loop(&config, &SystemClock, &stop, &mut work, |report| {
        out.emit(report, || report_text(report, Some(cycle)));
        cycle += 1;
    });
    Ok(EXIT_OK)
}

/// One-shot writers fail when their commits could not reach the remote.
fn require_pushed(handle: &RepoHandle, report: &ReconcileReport) -> Result<()> {
    if !handle.has_remote() {
        return Ok(());
    }
    let offline = report.entries.iter().any(|e| e.action == Action::SkippedOffline)
        || report.diagnostics.iter().any(|d| d.contains("remote unavailable"));
    if offline {
        return Err(Error::RemoteUnavailable(report.diagnostics.join("; ")).into());
    }
    Ok(())
}

fn config_files(args: &InitArgs, cfg: &CliConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let schemas = if args.schemas.is_empty() { &cfg.schemas } else { &args.schemas };
    for path in schemas {
        let bytes = read_file(path)?;
        let def = SchemaDefinition::parse(&path.display().to_string(), &bytes)?;
        files.push((format!("{SCHEMA_DIR}{}", def.file_name()), bytes));
    }
    if !args.trust.is_empty() {
        let mut policy = TrustPolicy::new();
        for entry in &args.trust {
            let (email, role) = entry
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--trust {entry:?}: expected <email>=<role>")))?;
            policy = policy.with_identity(email, role.parse::<Role>().map_err(CliError::Usage)?);
        }
        files.push((POLICY_PATH.to_string(), policy.to_document()));
    } else if let Some(path) = args.policy.as_ref().or(cfg.policy.as_ref()) {
        let bytes = read_file(path)?;
        TrustPolicy::parse(&bytes)?;
        files.push((POLICY_PATH.to_string(), bytes));
    }
    if let Some(path) = &args.pipelines {
        let bytes = read_file(path)?;
        let mut registry = SchemaRegistry::default();
        for (name, b) in files.iter().filter(|(n, _)| n.starts_with(SCHEMA_DIR)) {
            registry.insert(SchemaDefinition::parse(name, b)?)?;
        }
        Bindings::parse(&bytes, &registry)?;
        files.push((PIPELINES_PATH.to_string(), bytes));
    }
    Ok(files)
}

fn commit_files(handle: &mut RepoHandle, files: &[(String, Vec<u8>)]) -> Result<()> {
    let refs: Vec<(&str, &[u8])> = files.iter().map(|(p, b)| (p.as_str(), b.as_slice())).collect();
    handle.commit_config(&refs, "giter: install configuration")?;
    Ok(())
}

pub fn init(cfg: &CliConfig, out: &Out, args: &InitArgs) -> Result<u8> {
    let files = config_files(args, cfg)?;
    let identity = cfg.reader();
    if args.bare {
        init_bare_remote(&args.path, &cfg.branch, &identity, &SystemClock)?;
        if !files.is_empty() {
            let staging = tempfile::tempdir()?;
            let remote = args.path.canonicalize()?.display().to_string();
            let mut handle =
                RepoHandle::clone_from(&remote, &staging.path().join("w"), &cfg.branch, identity, clock())?;
            commit_files(&mut handle, &files)?;
            handle.push()?;
        }
    } else {
        let mut handle = init_repo(&args.path, &cfg.branch, identity, clock())?;
        if !files.is_empty() {
            commit_files(&mut handle, &files)?;
        }
    }
    let installed: Vec<&str> = files.iter().map(|(p, _)| p.as_str()).collect();
    out.emit(
        &json!({ "path": args.path, "bare": args.bare, "branch": cfg.branch, "installed": installed }),
        || {
            let mut s = format!("initialized {} repository at {}\n", if args.bare { "bare" } else { "working" }, args.path.display());
            for p in &installed {
                s.push_str(&format!("  installed {p}\n"));
            }
            s
        },
    );
    Ok(EXIT_OK)
}

pub fn validate(cfg: &CliConfig, out: &Out, file: &Path, schemas: &[PathBuf]) -> Result<u8> {
    let resource = parse_resource(&read_file(file)?)?;
    let schemas = if schemas.is_empty() { &cfg.schemas[..] } else { schemas };
    let registry = if !schemas.is_empty() {
        let mut registry = SchemaRegistry::default();
        for path in schemas {
            registry.insert(SchemaDefinition::parse(&path.display().to_string(), &read_file(path)?)?)?;
        }
        registry
    } else if cfg.repo.is_some() {
        open(cfg, cfg.reader())?.load_schemas()?
    } else {
        return Err(CliError::Usage("no schema given (--schema or --repo)".into()));
    };
    let report = validate_resource(&resource, &registry);
    let key = resource.key().to_string();
    out.emit(&json!({ "resource": key, "valid": report.is_valid(), "violations": report.violations }), || {
        if report.is_valid() {
            format!("{key}: valid")
        } else {
            let mut s = format!("{key}: {} violation(s)\n", report.violations.len());
            for v in &report.violations {
                s.push_str(&format!("  {} at {:?}: {}\n", v.code, v.path.to_string(), v.detail));
            }
            s
        }
    });
    Ok(if report.is_valid() { EXIT_OK } else { EXIT_VALIDATION })
}

pub fn producer_apply(cfg: &CliConfig, out: &Out, file: &Path, auto_archive: bool) -> Result<u8> {
    let identity = cfg.writer(Role::Producer)?;
    let mut desired = DesiredSet::new();
    desired.insert(parse_resource(&read_file(file)?)?, auto_archive)?;
    let mut handle = open(cfg, identity)?;
    let report = producer_reconcile_once(&mut handle, &desired)?;
    out.emit(&report, || report_text(&report, None));
    require_pushed(&handle, &report)?;
    Ok(EXIT_OK)
}

fn read_desired_dir(dir: &Path, auto_archive: bool, archived: &BTreeSet<ResourceKey>) -> giter_core::Result<DesiredSet> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "yaml" || e == "yml"));
    paths.sort();
    let mut set = DesiredSet::new();
    for p in paths {
        let r = parse_resource(&std::fs::read(&p)?)?;
        if !archived.contains(&r.key()) {
            set.insert(r, auto_archive)?;
        }
    }
    Ok(set)
}

pub fn producer_watch(cfg: &CliConfig, out: &Out, dir: &Path, auto_archive: bool, max_cycles: Option<u64>) -> Result<u8> {
    let identity = cfg.writer(Role::Producer)?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut handle = open(cfg, identity)?;
    // Archived resources stay out of the desired set even though their
    // files remain in the directory; otherwise they would be recreated.
    let mut archived = BTreeSet::new();
    run_reconcile_loop(cfg, out, max_cycles, || {
        let desired = read_desired_dir(dir, auto_archive, &archived)?;
        let report = producer_reconcile_once(&mut handle, &desired)?;
        for e in report.entries.iter().filter(|e| e.action == Action::Archived) {
            if let Ok(key) = e.resource.parse() {
                archived.insert(key);
            }
        }
        Ok(report)
    })
}

pub struct ConsumerRun {
    pub handler: String,
    pub namespaces: Vec<String>,
    pub kinds: Vec<String>,
    pub timeout: Option<Duration>,
    pub max_cycles: Option<u64>,
}

fn make_handler(spec: &str, timeout: Option<Duration>) -> Result<Box<dyn Handler>> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        let kind: BuiltinKind = name.parse().map_err(CliError::Usage)?;
        return Ok(Box::new(BuiltinHandler::new(kind)));
    }
    let mut h = ExternalHandler::new(spec);
    if let Some(t) = timeout {
        h = h.with_timeout(t);
    }
    Ok(Box::new(h))
}

pub fn consumer_run(cfg: &CliConfig, out: &Out, run: ConsumerRun) -> Result<u8> {
    let identity = cfg.writer(Role::Consumer)?;
    let mut handler = make_handler(&run.handler, run.timeout)?;
    let mut options = ConsumerOptions::for_interval(cfg.interval);
    options.namespaces = run.namespaces;
    options.kinds = run.kinds;
    let mut handle = open(cfg, identity)?;
    run_reconcile_loop(cfg, out, run.max_cycles, || {
        consumer_reconcile_once(&mut handle, handler.as_mut(), &options)
    })
}

pub fn pipeline_run(cfg: &CliConfig, out: &Out, file: Option<&Path>, max_cycles: Option<u64>) -> Result<u8> {
    let identity = cfg.writer(Role::Producer)?;
    let bytes = file.map(read_file).transpose()?;
    let mut handle = open(cfg, identity)?;
    run_reconcile_loop(cfg, out, max_cycles, || {
        // Re-read every cycle so schema and binding changes take effect.
        let bindings = match &bytes {
            Some(b) => Bindings::parse(b, &handle.load_schemas()?)?,
            None => load_bindings(&handle)?,
        };
        pipeline_reconcile_once(&mut handle, &bindings)
    })
}

/// The live document, or else the newest archived revision.
fn locate(handle: &RepoHandle, key: &ResourceKey) -> Result<Option<(ExchangeResource, bool)>> {
    if let Some(r) = handle.read_resource(key)? {
        return Ok(Some((r, false)));
    }
    let archived = handle.worktree_files(&archive_dir(key))?;
    match archived.values().next_back() {
        Some(bytes) => Ok(Some((parse_resource(bytes)?, true))),
        None => Ok(None),
    }
}

pub fn status(cfg: &CliConfig, out: &Out, key: &str) -> Result<u8> {
    let key = parse_key(key)?;
    let mut handle = open(cfg, cfg.reader())?;
    refresh(&mut handle)?;
    let Some((r, archived)) = locate(&handle, &key)? else {
        return Err(Error::NotFound(key.to_string()).into());
    };
    let status = r.status.as_ref();
    let phase = status.map(|s| s.phase.to_string());
    let observed = status.map(|s| s.observed_generation);
    let updated = status.and_then(|s| s.updated_at).map(|t| format_timestamp(&t));
    let message = status.and_then(|s| s.message.clone());
    out.emit(
        &json!({
            "resource": key.to_string(),
            "archived": archived,
            "phase": phase,
            "generation": r.metadata.generation,
            "observedGeneration": observed,
            "updatedAt": updated,
            "message": message,
        }),
        || {
            let mut s = format!("{key}{}\n", if archived { " (archived)" } else { "" });
            s.push_str(&format!("  phase:              {}\n", phase.as_deref().unwrap_or("-")));
            s.push_str(&format!("  generation:         {}\n", r.metadata.generation));
            s.push_str(&format!(
                "  observedGeneration: {}\n",
                observed.map_or("-".to_string(), |g| g.to_string())
            ));
            s.push_str(&format!("  updatedAt:          {}\n", updated.as_deref().unwrap_or("-")));
            if let Some(m) = &message {
                s.push_str(&format!("  message:            {m}\n"));
            }
            s
        },
    );
    Ok(EXIT_OK)
}

pub fn history(cfg: &CliConfig, out: &Out, key: &str) -> Result<u8> {
    let key = parse_key(key)?;
    let mut handle = open(cfg, cfg.reader())?;
    refresh(&mut handle)?;
    let commits = handle.history(&key)?;
    if commits.is_empty() {
        return Err(Error::NotFound(key.to_string()).into());
    }
    out.emit(&commits, || {
        let mut s = String::new();
        for c in &commits {
            s.push_str(&format!(
                "{}  {}  {:<24} {:<9} {:<8} {}\n",
                &c.commit_id[..c.commit_id.len().min(10)],
                format_timestamp(&c.timestamp),
                c.author_email,
                c.role().map_or("-".to_string(), |r| r.to_string()),
                c.verb().map_or("-".to_string(), |v| v.to_string()),
                c.generation().map_or(String::new(), |g| format!("gen {g}")),
            ));
        }
        s
    });
    Ok(EXIT_OK)
}

pub fn audit(cfg: &CliConfig, out: &Out) -> Result<u8> {
    let mut handle = open(cfg, cfg.reader())?;
    refresh(&mut handle)?;
    let policy = handle.load_policy()?;
    let findings = audit_repo(&handle, &policy)?;
    let violations = has_violations(&findings);
    out.emit(&json!({ "clean": !violations, "findings": findings }), || {
        let mut s = String::new();
        for f in &findings {
            s.push_str(&format!(
                "{} {} {}: {}\n",
                f.severity,
                &f.commit_id[..f.commit_id.len().min(10)],
                f.code,
                f.detail
            ));
        }
        s.push_str(&format!(
            "{} finding(s), {}\n",
            findings.len(),
            if violations { "violations found" } else { "no violations" }
        ));
        s
    });
    Ok(if violations { EXIT_FINDINGS } else { EXIT_OK })
}

pub fn replay(cfg: &CliConfig, out: &Out) -> Result<u8> {
    let mut handle = open(cfg, cfg.reader())?;
    refresh(&mut handle)?;
    let result = replay_history(&handle)?;
    let clean = result.is_clean();
    let mismatches: Vec<_> = result.mismatches().collect();
    out.emit(&json!({ "clean": clean, "paths": result.paths.len(), "mismatches": mismatches }), || {
        let mut s = String::new();
        for m in &mismatches {
            s.push_str(&format!("{:?} {}\n", m.outcome, m.path).to_lowercase());
        }
        s.push_str(&format!(
            "{} path(s) replayed, {}\n",
            result.paths.len(),
            if clean { "all match".to_string() } else { format!("{} differ", mismatches.len()) }
        ));
        s
    });
    Ok(if clean { EXIT_OK } else { EXIT_FINDINGS })
}

pub fn archive(cfg: &CliConfig, out: &Out, key: &str) -> Result<u8> {
    let key = parse_key(key)?;
    let mut handle = open(cfg, cfg.writer(Role::Producer)?)?;
    handle.sync()?;
    let resource = handle
        .read_resource(&key)?
        .ok_or_else(|| Error::NotFound(key.to_string()))?;
    let record = handle.archive_resource(&resource)?;
    let attempts = if handle.has_remote() { handle.push()?.attempts } else { 0 };
    let target = record.touched_paths.iter().find(|p| p.starts_with("archive/")).cloned();
    out.emit(
        &json!({ "resource": key.to_string(), "commit": record.commit_id, "archivedTo": target, "pushAttempts": attempts }),
        || format!("archived {key} to {}", target.as_deref().unwrap_or("?")),
    );
    Ok(EXIT_OK)
}

pub fn sim_run(out: &Out, file: &Path, workdir: Option<&Path>, trace_path: Option<&Path>) -> Result<u8> {
    let spec = ScenarioSpec::parse(&read_file(file)?)?;
    let scratch;
    let workdir = match workdir {
        Some(w) => w.to_path_buf(),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().join("sim")
        }
    };
    let trace = run_scenario(&spec, &workdir)?;
    if let Some(p) = trace_path {
        std::fs::write(p, trace.to_json_lines())?;
    }
    let passed = trace.passed();
    out.emit(
        &json!({
            "scenario": trace.scenario,
            "seed": trace.seed,
            "steps": trace.events.len(),
            "digest": trace.digest,
            "finalTip": trace.final_tip,
            "passed": passed,
            "outcomes": trace.outcomes,
        }),
        || trace.summary(),
    );
    Ok(if passed { EXIT_OK } else { EXIT_ASSERTION })
}
