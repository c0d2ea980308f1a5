//! Repository layout and every Git interaction: resources as commits,
//! fetch and push with retry, history extraction and archival.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backoff::Backoff;
use crate::clock::Clock;
use crate::document::{canonical_serialize, parse_resource, parse_resource_lenient};
use crate::error::{DocumentError, Error, MergeConflict, Result};
use crate::git::{Git, Signature};
use crate::ownership::{check_permitted, classify, merge_resources, ChangeClass, Role};
use crate::policy::{TrustPolicy, POLICY_PATH};
use crate::resource::{transition_phase, ExchangeResource, Phase, ResourceKey};
use crate::schema::{load_schemas, validate_resource, FileSet, SchemaRegistry, SCHEMA_DIR};

pub const RESOURCES_DIR: &str = "resources";
pub const ARCHIVE_DIR: &str = "archive";
pub const DEFAULT_BRANCH: &str = "main";
pub const DEFAULT_PUSH_ATTEMPTS: u32 = 5;

pub const TRAILER_ROLE: &str = "Giter-Role";
pub const TRAILER_RESOURCE: &str = "Giter-Resource";
pub const TRAILER_GENERATION: &str = "Giter-Generation";

const EMPTY_TREE: &str = "4b825dc642cb6eb9a060e54bf8d69288fbee4904";

const SKELETON: [(&str, &str); 4] = [
    ("resources/.gitkeep", ""),
    ("archive/.gitkeep", ""),
    (".giter/schemas/.gitkeep", ""),
    (POLICY_PATH, "identities: []\nunknownIdentity: flag\n"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Identity {
    pub name: String,
    pub email: String,
    pub role: Role,
}

impl Identity {
    pub fn new(name: &str, email: &str, role: Role) -> Self {
        Identity {
            name: name.to_string(),
            email: email.to_string(),
            role,
        }
    }

    fn signature(&self, when: DateTime<Utc>) -> Signature {
        Signature {
            name: self.name.clone(),
            email: self.email.clone(),
            when,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Create,
    Update,
    Status,
    Archive,
    Merge,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Create => "create",
            Verb::Update => "update",
            Verb::Status => "status",
            Verb::Archive => "archive",
            Verb::Merge => "merge",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        [Verb::Create, Verb::Update, Verb::Status, Verb::Archive, Verb::Merge]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or(())
    }
}

/// Live location of a resource: `resources/<ns>/<kind>/<name>.yaml`.
pub fn resource_path(key: &ResourceKey) -> Result<String, DocumentError> {
    key.validate()?;
    Ok(format!(
        "{RESOURCES_DIR}/{}/{}/{}.yaml",
        key.namespace, key.kind, key.name
    ))
}

/// Directory holding the archived revisions of a resource.
pub fn archive_dir(key: &ResourceKey) -> String {
    format!("{ARCHIVE_DIR}/{}/{}/{}/", key.namespace, key.kind, key.name)
}

/// Inverse of [`resource_path`] (and of archive paths).
pub fn key_for_path(path: &str) -> Option<ResourceKey> {
    let parts: Vec<&str> = path.split('/').collect();
    let key = match parts.as_slice() {
        [RESOURCES_DIR, ns, kind, file] => {
            ResourceKey::new(ns, kind, file.strip_suffix(".yaml")?)
        }
        [ARCHIVE_DIR, ns, kind, name, file] if file.ends_with(".yaml") => {
            ResourceKey::new(ns, kind, name)
        }
        _ => return None,
    };
    key.validate().ok()?;
    Some(key)
}

pub fn is_resource_path(path: &str) -> bool {
    path.starts_with("resources/") && path.ends_with(".yaml")
}

pub fn is_archive_path(path: &str) -> bool {
    path.starts_with("archive/") && path.ends_with(".yaml")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

/// Result of reading every live resource file.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub resources: BTreeMap<String, ExchangeResource>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Snapshot {
    pub fn get(&self, key: &ResourceKey) -> Option<&ExchangeResource> {
        resource_path(key).ok().and_then(|p| self.resources.get(&p))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub new_commits: usize,
    pub fast_forwarded: bool,
    /// Local and remote both have commits the other lacks.
    pub diverged: bool,
    pub remote_tip: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PushReport {
    pub attempts: u32,
    pub merged_paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceChange {
    pub path: String,
    pub class: ChangeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommitRecord {
    pub commit_id: String,
    pub parents: Vec<String>,
    pub author_name: String,
    pub author_email: String,
    pub timestamp: DateTime<Utc>,
    pub message: String,
    pub trailers: BTreeMap<String, Vec<String>>,
    pub touched_paths: Vec<String>,
    pub changes: Vec<ResourceChange>,
    /// No Giter trailers: written by hand or another tool.
    pub foreign: bool,
}

impl CommitRecord {
    pub fn subject(&self) -> &str {
        self.message.lines().next().unwrap_or("")
    }

    pub fn trailer(&self, key: &str) -> Option<&str> {
        self.trailers.get(key).and_then(|v| v.first()).map(String::as_str)
    }

    pub fn role(&self) -> Option<Role> {
        self.trailer(TRAILER_ROLE).and_then(|r| r.parse().ok())
    }

    pub fn generation(&self) -> Option<i64> {
        self.trailer(TRAILER_GENERATION).and_then(|g| g.parse().ok())
    }

    /// The verb from a `giter(<role>): <verb> ...` subject line.
    pub fn verb(&self) -> Option<Verb> {
        let rest = self.subject().strip_prefix("giter(")?;
        let (_, rest) = rest.split_once("): ")?;
        rest.split_whitespace().next()?.parse().ok()
    }

    pub fn is_merge(&self) -> bool {
        self.parents.len() > 1
    }

    /// Touches a live or archived resource file.
    pub fn touches_resources(&self) -> bool {
        self.touched_paths
            .iter()
            .any(|p| is_resource_path(p) || is_archive_path(p))
    }
}

fn commit_message(role: Role, verb: Verb, keys: &[ResourceKey], generation: i64) -> (String, String) {
    let subject = format!(
        "giter({role}): {verb} {} gen={generation}",
        keys.first().map(ToString::to_string).unwrap_or_else(|| "-".into())
    );
    let mut trailers = format!("{TRAILER_ROLE}: {role}\n");
    for key in keys {
        trailers.push_str(&format!("{TRAILER_RESOURCE}: {key}\n"));
    }
    trailers.push_str(&format!("{TRAILER_GENERATION}: {generation}"));
    (subject, trailers)
}

fn parse_trailers(message: &str) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let Some(block) = message.trim_end().rsplit("\n\n").next() else {
        return out;
    };
    if !message.trim_end().contains("\n\n") {
        return out;
    }
    for line in block.lines() {
        if let Some((k, v)) = line.split_once(": ") {
            if !k.contains(' ') {
                out.entry(k.to_string()).or_default().push(v.trim().to_string());
            }
        }
    }
    out
}

fn is_empty_dir(path: &FsPath) -> Result<bool> {
    Ok(!path.exists() || fs::read_dir(path)?.next().is_none())
}

fn write_skeleton(dir: &FsPath) -> Result<()> {
    for (rel, contents) in SKELETON {
        let full = dir.join(rel);
        fs::create_dir_all(full.parent().expect("skeleton paths have parents"))?;
        fs::write(full, contents)?;
    }
    Ok(())
}

fn init_working(dir: &FsPath, branch: &str, identity: &Identity, when: DateTime<Utc>) -> Result<Git> {
    fs::create_dir_all(dir)?;
    let git = Git::new(dir);
    git.run(["init", "-q", "-b", branch])?;
    write_skeleton(dir)?;
    git.run(["add", "-A"])?;
    git.run_signed(
        ["commit", "-q", "-m", "giter: initialize repository"],
        &identity.signature(when),
    )?;
    Ok(git)
}

/// Creates a bare repository to act as the shared remote, seeded with the
/// skeleton commit.
pub fn init_bare_remote(
    location: &FsPath,
    branch: &str,
    identity: &Identity,
    clock: &dyn Clock,
) -> Result<()> {
    if !is_empty_dir(location)? {
        return Err(Error::AlreadyInitialized(location.display().to_string()));
    }
    fs::create_dir_all(location)?;
    Git::new(location).run(["init", "-q", "--bare", "-b", branch])?;
    let staging = location.join(".giter-init");
    let git = init_working(&staging, branch, identity, clock.now())?;
    let remote = location.canonicalize()?;
    git.run([
        "push".as_ref(),
        "-q".as_ref(),
        remote.as_os_str(),
        format!("HEAD:refs/heads/{branch}").as_ref(),
    ])?;
    fs::remove_dir_all(&staging)?;
    Ok(())
}

/// Creates a standalone working repository with the skeleton layout.
pub fn init_repo(
    location: &FsPath,
    branch: &str,
    identity: Identity,
    clock: Arc<dyn Clock>,
) -> Result<RepoHandle> {
    if !is_empty_dir(location)? {
        return Err(Error::AlreadyInitialized(location.display().to_string()));
    }
    let git = init_working(location, branch, &identity, clock.now())?;
    Ok(RepoHandle::from_parts(git, branch, identity, clock, false))
}

/// Merge callback used by [`RepoHandle::push_with_retry`].
pub type MergeFn<'a> =
    dyn Fn(Option<&ExchangeResource>, &ExchangeResource, &ExchangeResource) -> Result<ExchangeResource> + 'a;

/// One actor's exclusive working clone.
pub struct RepoHandle {
    git: Git,
    branch: String,
    identity: Identity,
    clock: Arc<dyn Clock>,
    has_remote: bool,
    offline: bool,
    backoff: Backoff,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RepoHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RepoHandle")
            .field("workdir", &self.git.dir())
            .field("branch", &self.branch)
            .field("identity", &self.identity)
            .field("offline", &self.offline)
            .finish()
    }
}

impl RepoHandle {
    fn from_parts(git: Git, branch: &str, identity: Identity, clock: Arc<dyn Clock>, has_remote: bool) -> Self {
        RepoHandle {
            git,
            branch: branch.to_string(),
            identity,
            clock,
            has_remote,
            offline: false,
            backoff: Backoff::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn clone_from(
        remote: &str,
        workdir: &FsPath,
        branch: &str,
        identity: Identity,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        if !is_empty_dir(workdir)? {
            return Err(Error::AlreadyInitialized(workdir.display().to_string()));
        }
        let workdir = &std::path::absolute(workdir)?;
        let parent = workdir.parent().unwrap_or(FsPath::new("/"));
        fs::create_dir_all(parent)?;
        let out = Git::new(parent).output([
            "clone".as_ref(),
            "-q".as_ref(),
            "-b".as_ref(),
            branch.as_ref(),
            remote.as_ref(),
            workdir.as_os_str(),
        ])?;
        if !out.status.success() {
            return Err(Error::RemoteUnavailable(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        Ok(Self::from_parts(Git::new(workdir), branch, identity, clock, true))
    }

    /// Opens an existing working clone.
    pub fn open(workdir: &FsPath, identity: Identity, clock: Arc<dyn Clock>) -> Result<Self> {
        let git = Git::new(workdir);
        git.run(["rev-parse", "--git-dir"])?;
        let branch = git.run(["symbolic-ref", "--short", "HEAD"])?.trim().to_string();
        let has_remote = git.run(["remote"])?.lines().any(|r| r == "origin");
        Ok(Self::from_parts(git, &branch, identity, clock, has_remote))
    }

    pub fn workdir(&self) -> &FsPath {
        self.git.dir()
    }

    pub fn git(&self) -> &Git {
        &self.git
    }

    pub fn branch(&self) -> &str {
        &self.branch
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn role(&self) -> Role {
        self.identity.role
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn has_remote(&self) -> bool {
        self.has_remote
    }

    /// Simulates losing (or regaining) connectivity to the remote.
    pub fn set_offline(&mut self, offline: bool) {
        self.offline = offline;
    }

    pub fn is_offline(&self) -> bool {
        self.offline
    }

    pub fn set_backoff(&mut self, backoff: Backoff, seed: u64) {
        self.backoff = backoff;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn head(&self) -> Result<Option<String>> {
        self.git.rev_parse("HEAD")
    }

    fn remote_ref(&self) -> String {
        format!("refs/remotes/origin/{}", self.branch)
    }

    pub fn remote_tip(&self) -> Result<Option<String>> {
        self.git.rev_parse(&self.remote_ref())
    }

    pub fn read_worktree_file(&self, rel: &str) -> Result<Option<Vec<u8>>> {
        match fs::read(self.workdir().join(rel)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Files under `prefix` in the working tree, by repo-relative path.
    pub fn worktree_files(&self, prefix: &str) -> Result<FileSet> {
        let mut out = FileSet::new();
        let root = self.workdir().join(prefix);
        if root.is_dir() {
            collect_files(self.workdir(), &root, &mut out)?;
        }
        Ok(out)
    }

    pub fn load_schemas(&self) -> Result<SchemaRegistry> {
        load_schemas(&self.worktree_files(SCHEMA_DIR.trim_end_matches('/'))?)
    }

    pub fn load_policy(&self) -> Result<TrustPolicy> {
        match self.read_worktree_file(POLICY_PATH)? {
            Some(bytes) => TrustPolicy::parse(&bytes),
            None => Ok(TrustPolicy::new()),
        }
    }

    pub fn read_resource(&self, key: &ResourceKey) -> Result<Option<ExchangeResource>> {
        let path = resource_path(key)?;
        self.read_worktree_file(&path)?
            .map(|bytes| parse_resource(&bytes).map_err(Error::from))
            .transpose()
    }

    /// Fetches the remote branch and fast-forwards when possible.
    pub fn fetch(&mut self) -> Result<SyncReport> {
        if !self.has_remote {
            return Ok(SyncReport::default());
        }
        if self.offline {
            return Err(Error::RemoteUnavailable("actor is offline".into()));
        }
        let refspec = format!("+refs/heads/{0}:refs/remotes/origin/{0}", self.branch);
        let out = self.git.output(["fetch", "-q", "origin", &refspec])?;
        if !out.status.success() {
            return Err(Error::RemoteUnavailable(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        let remote_tip = self.remote_tip()?;
        let mut report = SyncReport {
            remote_tip: remote_tip.clone(),
            ..Default::default()
        };
        let (Some(tip), Some(head)) = (remote_tip, self.head()?) else {
            return Ok(report);
        };
        if tip == head || self.git.is_ancestor(&tip, &head)? {
            return Ok(report);
        }
        report.new_commits = self
            .git
            .run(["rev-list", "--count", &format!("HEAD..{tip}")])?
            .trim()
            .parse()
            .unwrap_or(0);
        if self.git.is_ancestor(&head, &tip)? {
            self.git.run(["merge", "-q", "--ff-only", &tip])?;
            report.fast_forwarded = true;
        } else {
            report.diverged = true;
        }
        Ok(report)
    }

    /// Fetch, then fold a diverged remote into the local branch with the
    /// section-wise merge.
    pub fn sync(&mut self) -> Result<SyncReport> {
        let report = self.fetch()?;
        if report.diverged {
            let registry = self.load_schemas()?;
            let merge = |b: Option<&ExchangeResource>, o: &ExchangeResource, t: &ExchangeResource| {
                merge_resources(b, o, t, &registry)
            };
            self.integrate_remote(&merge)?;
        }
        Ok(report)
    }

    /// Parses every live resource file. Unreadable or misplaced files become
    /// diagnostics; schema violations are reported but the resource is
    /// still returned.
    pub fn read_all(&self) -> Result<Snapshot> {
        let registry = self.load_schemas()?;
        let mut snapshot = Snapshot::default();
        for (path, bytes) in self.worktree_files(RESOURCES_DIR)? {
            if !path.ends_with(".yaml") {
                continue;
            }
            let resource = match parse_resource(&bytes) {
                Ok(r) => r,
                Err(e) => {
                    snapshot.diagnostics.push(Diagnostic {
                        path,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            if resource_path(&resource.key()).ok().as_deref() != Some(path.as_str()) {
                snapshot.diagnostics.push(Diagnostic {
                    path,
                    message: format!("document identity {} does not match its path", resource.key()),
                });
                continue;
            }
            let report = validate_resource(&resource, &registry);
            if !report.is_valid() {
                snapshot.diagnostics.push(Diagnostic {
                    path: path.clone(),
                    message: report.summary(),
                });
            }
            snapshot.resources.insert(path, resource);
        }
        Ok(snapshot)
    }

    /// Writes `resource` in canonical form and commits it. Does not push.
    pub fn commit_resource(&mut self, resource: &ExchangeResource, verb: Verb) -> Result<CommitRecord> {
        let key = resource.key();
        let path = resource_path(&key)?;
        resource.check_invariants()?;
        let old = self
            .read_worktree_file(&path)?
            .and_then(|bytes| parse_resource(&bytes).ok());
        let class = classify(old.as_ref(), Some(resource));
        let policy = self.load_policy()?;
        let verdict = check_permitted(self.role(), &class, &policy.ownership());
        if !verdict.allowed {
            return Err(Error::OwnershipViolation {
                role: self.role().to_string(),
                detail: format!(
                    "{}: {} ({})",
                    key,
                    verdict.reason,
                    verdict
                        .violating_paths
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            });
        }
        let bytes = canonical_serialize(resource)?;
        if old.is_some() && self.read_worktree_file(&path)?.as_deref() == Some(bytes.as_slice()) {
            return Err(Error::NoChange(key.to_string()));
        }
        let report = validate_resource(resource, &self.load_schemas()?);
        if !report.is_valid() {
            return Err(Error::ValidationFailed {
                resource: key.to_string(),
                summary: report.summary(),
            });
        }
        let full = self.workdir().join(&path);
        fs::create_dir_all(full.parent().expect("resource path has parent"))?;
        fs::write(&full, &bytes)?;
        self.git.run(["add", "--", &path])?;
        let (subject, trailers) =
            commit_message(self.role(), verb, std::slice::from_ref(&key), resource.metadata.generation);
        self.commit(&subject, &trailers)?;
        debug!("{} committed {verb} {key}", self.identity.email);
        self.commit_record("HEAD")
    }

    fn commit(&self, subject: &str, trailers: &str) -> Result<()> {
        let mut args = vec!["commit", "-q", "-m", subject];
        if !trailers.is_empty() {
            args.extend(["-m", trailers]);
        }
        self.git
            .run_signed(args, &self.identity.signature(self.clock.now()))?;
        Ok(())
    }

    /// Commits configuration files (schemas, policy, bindings). Resource
    /// and archive paths are refused; those go through
    /// [`commit_resource`](Self::commit_resource).
    pub fn commit_config(&mut self, files: &[(&str, &[u8])], subject: &str) -> Result<()> {
        for (path, bytes) in files {
            if path.starts_with("resources/") || path.starts_with("archive/") || path.contains("..") {
                return Err(Error::OwnershipViolation {
                    role: self.role().to_string(),
                    detail: format!("{path} is not a configuration path"),
                });
            }
            let full = self.workdir().join(path);
            fs::create_dir_all(full.parent().expect("config path has parent"))?;
            fs::write(&full, bytes)?;
            self.git.run(["add", "--", path])?;
        }
        if self.git.output(["diff", "--cached", "--quiet"])?.status.success() {
            return Err(Error::NoChange(subject.to_string()));
        }
        self.commit(subject, "")?;
        Ok(())
    }

    /// Moves a finished resource under `archive/` with phase Archived.
    pub fn archive_resource(&mut self, resource: &ExchangeResource) -> Result<CommitRecord> {
        let key = resource.key();
        if self.role() != Role::Producer {
            return Err(Error::OwnershipViolation {
                role: self.role().to_string(),
                detail: format!("only the producer archives ({key})"),
            });
        }
        let status = match &resource.status {
            Some(s) if s.phase.is_outcome() => s,
            other => {
                return Err(Error::NotTerminal {
                    resource: key.to_string(),
                    phase: other.as_ref()
                        .map(|s| s.phase.to_string())
                        .unwrap_or_else(|| "none".into()),
                })
            }
        };
        let live = resource_path(&key)?;
        if self.read_worktree_file(&live)?.is_none() {
            return Err(Error::NotFound(key.to_string()));
        }
        let now = self.clock.now();
        let mut archived = resource.clone();
        archived.status = Some(transition_phase(status, Phase::Archived, now)?);
        let head = self.head()?.unwrap_or_default();
        let short = &head[..head.len().min(7)];
        let target = format!(
            "{}{}-{short}.yaml",
            archive_dir(&key),
            now.format("%Y%m%dT%H%M%S%.3fZ")
        );
        let full = self.workdir().join(&target);
        fs::create_dir_all(full.parent().expect("archive path has parent"))?;
        fs::write(&full, canonical_serialize(&archived)?)?;
        self.git.run(["rm", "-q", "--", &live])?;
        self.git.run(["add", "--", &target])?;
        let (subject, trailers) =
            commit_message(self.role(), Verb::Archive, std::slice::from_ref(&key), resource.metadata.generation);
        self.commit(&subject, &trailers)?;
        info!("archived {key} to {target}");
        self.commit_record("HEAD")
    }

    /// Pushes local commits, merging section-wise on non-fast-forward
    /// rejections.
    pub fn push_with_retry(&mut self, max_attempts: u32, merge_fn: &MergeFn<'_>) -> Result<PushReport> {
        let mut report = PushReport::default();
        if !self.has_remote {
            return Ok(report);
        }
        if self.offline {
            return Err(Error::RemoteUnavailable("actor is offline".into()));
        }
        let head = self.head()?.unwrap_or_default();
        if let Some(tip) = self.remote_tip()? {
            if self.git.is_ancestor(&head, &tip)? {
                return Ok(report);
            }
        }
        while report.attempts < max_attempts {
            report.attempts += 1;
            let refspec = format!("HEAD:refs/heads/{}", self.branch);
            let out = self.git.output(["push", "-q", "--porcelain", "origin", &refspec])?;
            if out.status.success() {
                self.git.run(["update-ref", &self.remote_ref(), "HEAD"])?;
                return Ok(report);
            }
            let text = format!(
                "{}{}",
                String::from_utf8_lossy(&out.stdout),
                String::from_utf8_lossy(&out.stderr)
            );
            if !(text.contains("rejected") || text.contains("non-fast-forward") || text.contains("fetch first")) {
                return Err(Error::RemoteUnavailable(text.trim().to_string()));
            }
            warn!(
                "{}: push rejected (attempt {}), merging remote changes",
                self.identity.email, report.attempts
            );
            let sync = self.fetch()?;
            if sync.diverged {
                report.merged_paths.extend(self.integrate_remote(merge_fn)?);
            }
            if report.attempts < max_attempts {
                let delay = self.backoff.delay(report.attempts - 1, &mut self.rng);
                self.clock.sleep(delay);
            }
        }
        Err(Error::PushExhausted {
            attempts: report.attempts,
        })
    }

    /// Default push: section-wise merge validated against the local schemas.
    pub fn push(&mut self) -> Result<PushReport> {
        let registry = self.load_schemas()?;
        let merge = |b: Option<&ExchangeResource>, o: &ExchangeResource, t: &ExchangeResource| {
            merge_resources(b, o, t, &registry)
        };
        self.push_with_retry(DEFAULT_PUSH_ATTEMPTS, &merge)
    }

    /// Creates a merge commit joining HEAD and the fetched remote tip.
    /// Returns the paths whose content had to be merged.
    fn integrate_remote(&mut self, merge_fn: &MergeFn<'_>) -> Result<Vec<String>> {
        let theirs = self
            .remote_tip()?
            .ok_or_else(|| Error::RemoteUnavailable("no remote branch".into()))?;
        let ours = self.head()?.unwrap_or_default();
        let base = self
            .git
            .merge_base(&ours, &theirs)?
            .unwrap_or_else(|| EMPTY_TREE.to_string());
        let our_changes: BTreeSet<String> = self
            .git
            .diff_names(&base, &ours)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let mut writes: BTreeMap<String, Option<Vec<u8>>> = BTreeMap::new();
        let mut merged_paths = Vec::new();
        for (_, path) in self.git.diff_names(&base, &theirs)? {
            let t = self.git.show_file(&theirs, &path)?;
            if !our_changes.contains(&path) {
                writes.insert(path, t);
                continue;
            }
            let o = self.git.show_file(&ours, &path)?;
            if o == t {
                continue;
            }
            let conflict = |section: &str| -> Error {
                MergeConflict {
                    resource: key_for_path(&path)
                        .map(|k| k.to_string())
                        .unwrap_or_else(|| path.clone()),
                    section: section.to_string(),
                }
                .into()
            };
            if !is_resource_path(&path) {
                return Err(conflict("file"));
            }
            let (Some(o), Some(t)) = (o, t) else {
                return Err(conflict("document"));
            };
            let parse = |bytes: &[u8]| parse_resource(bytes).map_err(|_| conflict("document"));
            let b = self.git.show_file(&base, &path)?.map(|b| parse(&b)).transpose()?;
            let merged = merge_fn(b.as_ref(), &parse(&o)?, &parse(&t)?)?;
            writes.insert(path.clone(), Some(canonical_serialize(&merged)?));
            merged_paths.push(path);
        }

        self.git
            .run_signed(
                ["merge", "-q", "--no-ff", "--no-commit", "-s", "ours", &theirs],
                &self.identity.signature(self.clock.now()),
            )?;
        for (path, contents) in &writes {
            let full = self.workdir().join(path);
            match contents {
                Some(bytes) => {
                    fs::create_dir_all(full.parent().expect("repo paths have parents"))?;
                    fs::write(&full, bytes)?;
                }
                None => {
                    if full.exists() {
                        fs::remove_file(&full)?;
                    }
                }
            }
            self.git.run(["add", "-A", "--", path])?;
        }
        let keys: Vec<ResourceKey> = if merged_paths.is_empty() {
            writes.keys().filter_map(|p| key_for_path(p)).take(1).collect()
        } else {
            merged_paths.iter().filter_map(|p| key_for_path(p)).collect()
        };
        let generation = keys
            .first()
            .and_then(|k| self.read_resource(k).ok().flatten())
            .map(|r| r.metadata.generation)
            .unwrap_or(0);
        let (subject, trailers) = commit_message(self.role(), Verb::Merge, &keys, generation);
        self.commit(&subject, &trailers)?;
        info!(
            "{}: merged remote {} ({} section merges)",
            self.identity.email,
            &theirs[..7],
            merged_paths.len()
        );
        Ok(merged_paths)
    }

    /// Builds the record for one commit, including per-resource change
    /// classes against its first parent.
    pub fn commit_record(&self, rev: &str) -> Result<CommitRecord> {
        let raw = self
            .git
            .run(["show", "-s", "--format=%H%x00%P%x00%an%x00%ae%x00%at%x00%B", rev])?;
        let mut fields = raw.splitn(6, '\0');
        let mut next = || fields.next().unwrap_or("").to_string();
        let commit_id = next();
        let parents: Vec<String> = next().split_whitespace().map(str::to_string).collect();
        let author_name = next();
        let author_email = next();
        let timestamp = DateTime::from_timestamp(next().trim().parse().unwrap_or(0), 0)
            .unwrap_or_default();
        let message = next().trim_end().to_string();
        let trailers = parse_trailers(&message);
        let parent = parents.first().cloned();
        let names = match &parent {
            Some(p) => self.git.diff_names(p, &commit_id)?,
            None => self.git.root_names(&commit_id)?,
        };
        let touched_paths: Vec<String> = names.into_iter().map(|(_, p)| p).collect();
        let mut changes = Vec::new();
        for path in touched_paths.iter().filter(|p| is_resource_path(p) || is_archive_path(p)) {
            let old = match &parent {
                Some(p) => self.parse_at(p, path)?,
                None => None,
            };
            let new = self.parse_at(&commit_id, path)?;
            if old.is_none() && new.is_none() {
                continue;
            }
            changes.push(ResourceChange {
                path: path.clone(),
                class: classify(old.as_ref(), new.as_ref()),
            });
        }
        let foreign = !trailers.contains_key(TRAILER_ROLE);
        Ok(CommitRecord {
            commit_id,
            parents,
            author_name,
            author_email,
            timestamp,
            message,
            trailers,
            touched_paths,
            changes,
            foreign,
        })
    }

    /// Document at `rev:path`, invariants unchecked; unparsable content
    /// reads as absent.
    pub fn parse_at(&self, rev: &str, path: &str) -> Result<Option<ExchangeResource>> {
        Ok(self
            .git
            .show_file(rev, path)?
            .and_then(|bytes| parse_resource_lenient(&bytes).ok()))
    }

    /// Every commit on the current branch, oldest first.
    pub fn all_commits(&self) -> Result<Vec<String>> {
        if self.head()?.is_none() {
            return Ok(Vec::new());
        }
        Ok(self
            .git
            .run(["rev-list", "--reverse", "--topo-order", "HEAD"])?
            .lines()
            .map(str::to_string)
            .collect())
    }

    /// Commits touching the live file or archive of `key`, oldest first.
    pub fn history(&self, key: &ResourceKey) -> Result<Vec<CommitRecord>> {
        if self.head()?.is_none() {
            return Ok(Vec::new());
        }
        let live = resource_path(key)?;
        let archive = archive_dir(key);
        let ids = self.git.run([
            "log",
            "--reverse",
            "--topo-order",
            "--format=%H",
            "HEAD",
            "--",
            &live,
            &archive,
        ])?;
        ids.lines().map(|id| self.commit_record(id)).collect()
    }
}

fn collect_files(root: &FsPath, dir: &FsPath, out: &mut FileSet) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, fs::read(&path)?);
        }
    }
    Ok(())
}
