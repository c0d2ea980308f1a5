//! Trust policy: who may act in which role, audit of history against the
//! ownership contract, and replay of history.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::document::{parse_document, serialize_document};
use crate::error::{Error, Result};
use crate::ownership::{check_permitted, section_tree, OwnershipPolicy, Role, Section, Verdict};
use crate::repo::{
    is_archive_path, is_resource_path, key_for_path, resource_path, CommitRecord, RepoHandle,
    ARCHIVE_DIR, RESOURCES_DIR, TRAILER_ROLE,
};
use crate::resource::{ExchangeResource, Phase};
use crate::value::ValueTree;

pub const POLICY_PATH: &str = ".giter/policy.yaml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownIdentityAction {
    Reject,
    #[default]
    Flag,
}

/// Replacement for the default email allowlist, e.g. a signature check.
pub trait TrustHook: Send + Sync {
    fn verify(&self, commit: &CommitRecord, policy: &TrustPolicy) -> Verdict;
}

#[derive(Clone, Default)]
pub struct TrustPolicy {
    pub identity_roles: BTreeMap<String, Role>,
    pub unknown_identity: UnknownIdentityAction,
    pub seed_status_allowed: bool,
    pub trust_hook: Option<Arc<dyn TrustHook>>,
}

impl fmt::Debug for TrustPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustPolicy")
            .field("identity_roles", &self.identity_roles)
            .field("unknown_identity", &self.unknown_identity)
            .field("seed_status_allowed", &self.seed_status_allowed)
            .field("trust_hook", &self.trust_hook.is_some())
            .finish()
    }
}

impl TrustPolicy {
    pub fn new() -> Self {
        TrustPolicy {
            seed_status_allowed: true,
            ..Default::default()
        }
    }

    pub fn with_identity(mut self, email: &str, role: Role) -> Self {
        self.identity_roles.insert(email.to_string(), role);
        self
    }

    pub fn role_of(&self, email: &str) -> Option<Role> {
        self.identity_roles.get(email).copied()
    }

    pub fn ownership(&self) -> OwnershipPolicy {
        OwnershipPolicy {
            seed_status_allowed: self.seed_status_allowed,
        }
    }

    /// A repository is active once both sides of the exchange are known.
    pub fn is_active(&self) -> bool {
        let has = |r| self.identity_roles.values().any(|v| *v == r);
        has(Role::Producer) && has(Role::Consumer)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Policy(m);
        let tree = parse_document(bytes).map_err(|e| err(e.to_string()))?;
        let mut policy = TrustPolicy::new();
        let ValueTree::Map(top) = tree else {
            return if tree == ValueTree::Null {
                Ok(policy)
            } else {
                Err(err("policy document must be a map".into()))
            };
        };
        for (key, value) in top {
            match (key.as_str(), value) {
                ("identities", ValueTree::List(items)) => {
                    for item in items {
                        let email = item
                            .as_map()
                            .and_then(|m| m.get("email"))
                            .and_then(ValueTree::as_str)
                            .filter(|e| !e.is_empty())
                            .ok_or_else(|| err("identity entry needs an email".into()))?;
                        let role: Role = item
                            .as_map()
                            .and_then(|m| m.get("role"))
                            .and_then(ValueTree::as_str)
                            .ok_or_else(|| err(format!("identity {email} needs a role")))?
                            .parse()
                            .map_err(err)?;
                        if policy.identity_roles.insert(email.to_string(), role).is_some() {
                            return Err(err(format!("identity {email} listed twice")));
                        }
                    }
                }
                ("identities", ValueTree::Null) => {}
                ("unknownIdentity", ValueTree::String(s)) => {
                    policy.unknown_identity = match s.as_str() {
                        "reject" => UnknownIdentityAction::Reject,
                        "flag" => UnknownIdentityAction::Flag,
                        other => return Err(err(format!("unknownIdentity {other:?}"))),
                    }
                }
                ("seedStatusAllowed", ValueTree::Bool(b)) => policy.seed_status_allowed = b,
                (other, _) => return Err(err(format!("unexpected key or value for {other:?}"))),
            }
        }
        Ok(policy)
    }

    pub fn to_document(&self) -> Vec<u8> {
        let identities = self
            .identity_roles
            .iter()
            .map(|(email, role)| {
                ValueTree::Map(BTreeMap::from([
                    ("email".to_string(), ValueTree::from(email.as_str())),
                    ("role".to_string(), ValueTree::from(role.as_str())),
                ]))
            })
            .collect();
        let mut top = BTreeMap::from([
            ("identities".to_string(), ValueTree::List(identities)),
            (
                "unknownIdentity".to_string(),
                ValueTree::from(match self.unknown_identity {
                    UnknownIdentityAction::Reject => "reject",
                    UnknownIdentityAction::Flag => "flag",
                }),
            ),
        ]);
        if !self.seed_status_allowed {
            top.insert("seedStatusAllowed".into(), ValueTree::Bool(false));
        }
        serialize_document(&ValueTree::Map(top)).expect("policy tree is serializable")
    }
}

/// Default identity check: the author is listed and the role trailer, when
/// present, matches the listed role. A configured hook replaces this.
pub fn verify_commit(commit: &CommitRecord, policy: &TrustPolicy) -> Verdict {
    if let Some(hook) = &policy.trust_hook {
        return hook.verify(commit, policy);
    }
    let Some(listed) = policy.role_of(&commit.author_email) else {
        return match policy.unknown_identity {
            UnknownIdentityAction::Reject => {
                Verdict::deny(format!("{} is not a listed identity", commit.author_email), Vec::new())
            }
            UnknownIdentityAction::Flag => Verdict::allow(),
        };
    };
    match commit.role() {
        Some(claimed) if claimed != listed => Verdict::deny(
            format!(
                "{} is listed as {listed} but committed as {claimed}",
                commit.author_email
            ),
            Vec::new(),
        ),
        _ => Verdict::allow(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Violation,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Violation => "violation",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingCode {
    RoleSectionBreach,
    UnknownIdentity,
    ForeignCommit,
    GenerationRegression,
    IllegalPhaseTransition,
    ImmutableFieldChange,
}

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::RoleSectionBreach => "role-section-breach",
            FindingCode::UnknownIdentity => "unknown-identity",
            FindingCode::ForeignCommit => "foreign-commit",
            FindingCode::GenerationRegression => "generation-regression",
            FindingCode::IllegalPhaseTransition => "illegal-phase-transition",
            FindingCode::ImmutableFieldChange => "immutable-field-change",
        }
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditFinding {
    pub commit_id: String,
    pub severity: Severity,
    pub code: FindingCode,
    pub detail: String,
    pub paths: Vec<String>,
}

impl AuditFinding {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("finding serializes")
    }
}

pub fn has_violations(findings: &[AuditFinding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Violation)
}

struct Auditor<'a> {
    handle: &'a RepoHandle,
    policy: &'a TrustPolicy,
    findings: Vec<AuditFinding>,
}

impl Auditor<'_> {
    fn push(&mut self, commit: &CommitRecord, severity: Severity, code: FindingCode, detail: String, paths: Vec<String>) {
        self.findings.push(AuditFinding {
            commit_id: commit.commit_id.clone(),
            severity,
            code,
            detail,
            paths,
        });
    }

    /// Resolves the role the commit's changes are checked against, or
    /// `None` when the identity check already produced a finding.
    fn resolve_role(&mut self, commit: &CommitRecord) -> Option<Role> {
        let policy = self.policy;
        if policy.trust_hook.is_some() {
            let verdict = verify_commit(commit, policy);
            if !verdict.allowed {
                self.push(commit, Severity::Violation, FindingCode::UnknownIdentity, verdict.reason, Vec::new());
                return None;
            }
            return commit.role().or_else(|| policy.role_of(&commit.author_email));
        }
        if policy.identity_roles.is_empty() {
            // No allowlist configured yet: the role trailer is all there is.
            return commit.role();
        }
        let Some(listed) = policy.role_of(&commit.author_email) else {
            let severity = match policy.unknown_identity {
                UnknownIdentityAction::Reject => Severity::Violation,
                UnknownIdentityAction::Flag => Severity::Warning,
            };
            self.push(
                commit,
                severity,
                FindingCode::UnknownIdentity,
                format!("{} is not a listed identity", commit.author_email),
                Vec::new(),
            );
            return None;
        };
        let verdict = verify_commit(commit, policy);
        if !verdict.allowed {
            self.push(commit, Severity::Violation, FindingCode::RoleSectionBreach, verdict.reason, Vec::new());
            return None;
        }
        Some(listed)
    }

    fn audit_commit(&mut self, commit: &CommitRecord) -> Result<()> {
        if !commit.touches_resources() {
            return Ok(());
        }
        if commit.foreign {
            self.push(
                commit,
                Severity::Warning,
                FindingCode::ForeignCommit,
                format!("no {TRAILER_ROLE} trailer"),
                commit.touched_paths.clone(),
            );
        }
        let role = self.resolve_role(commit);
        if commit.is_merge() {
            return self.audit_merge(commit);
        }
        let parent = commit.parents.first().map(String::as_str);
        for change in &commit.changes {
            let old = match parent {
                Some(p) => self.handle.parse_at(p, &change.path)?,
                None => None,
            };
            let new = self.handle.parse_at(&commit.commit_id, &change.path)?;
            if is_archive_path(&change.path) {
                self.audit_archive(commit, role, &change.path, old.as_ref(), new.as_ref())?;
                continue;
            }
            let class = &change.class;
            if !class.identity_changes.is_empty() {
                self.push(
                    commit,
                    Severity::Violation,
                    FindingCode::ImmutableFieldChange,
                    format!("changed {}", class.identity_changes.join(", ")),
                    vec![change.path.clone()],
                );
                continue;
            }
            if let Some(role) = role {
                let verdict = check_permitted(role, class, &self.policy.ownership());
                if !verdict.allowed {
                    let mut paths = vec![change.path.clone()];
                    paths.extend(verdict.violating_paths.iter().map(ToString::to_string));
                    self.push(commit, Severity::Violation, FindingCode::RoleSectionBreach, verdict.reason, paths);
                }
            }
            if let (Some(old), Some(new)) = (&old, &new) {
                self.check_progress(commit, &change.path, old, new);
            }
        }
        Ok(())
    }

    /// Generation monotonicity and phase legality between two versions.
    fn check_progress(&mut self, commit: &CommitRecord, path: &str, old: &ExchangeResource, new: &ExchangeResource) {
        if new.metadata.generation < old.metadata.generation {
            self.push(
                commit,
                Severity::Violation,
                FindingCode::GenerationRegression,
                format!("generation {} -> {}", old.metadata.generation, new.metadata.generation),
                vec![path.to_string()],
            );
        }
        let old_phase = old.phase().unwrap_or(Phase::Pending);
        let Some(new_status) = &new.status else {
            return;
        };
        let new_phase = new_status.phase;
        let observed_before = old.status.as_ref().map(|s| s.observed_generation).unwrap_or(0);
        let legal = old_phase == new_phase
            || old_phase.can_transition_to(new_phase)
            || (old_phase.is_outcome()
                && matches!(new_phase, Phase::Pending | Phase::Processing)
                && new.metadata.generation > observed_before);
        if !legal || new_phase == Phase::Archived {
            self.push(
                commit,
                Severity::Violation,
                FindingCode::IllegalPhaseTransition,
                format!("{old_phase} -> {new_phase}"),
                vec![path.to_string()],
            );
        }
    }

    /// An archive file must be added once, by the producer, as a copy of the
    /// live document it replaces with only the phase advanced to Archived.
    fn audit_archive(
        &mut self,
        commit: &CommitRecord,
        role: Option<Role>,
        path: &str,
        old: Option<&ExchangeResource>,
        new: Option<&ExchangeResource>,
    ) -> Result<()> {
        let breach = |detail: String| (FindingCode::RoleSectionBreach, detail);
        let problem = match (old, new) {
            (_, None) | (Some(_), Some(_)) => Some(breach("archived documents are immutable".into())),
            (None, Some(archived)) => {
                let live = key_for_path(path)
                    .map(|k| resource_path(&k))
                    .transpose()?
                    .unwrap_or_default();
                let parent = commit.parents.first().map(String::as_str).unwrap_or("");
                let before = self.handle.parse_at(parent, &live)?;
                let removed = commit.touched_paths.contains(&live)
                    && self.handle.parse_at(&commit.commit_id, &live)?.is_none();
                match before {
                    _ if role.is_some_and(|r| r != Role::Producer) => {
                        Some(breach(format!("{} may not archive", role.expect("checked"))))
                    }
                    None => Some(breach("archive without a live document".into())),
                    _ if !removed => Some(breach("live document not removed".into())),
                    Some(before) => {
                        let old_phase = before.phase().unwrap_or(Phase::Pending);
                        let mut expected = before.clone();
                        let mut got = archived.clone();
                        if let (Some(e), Some(g)) = (expected.status.as_mut(), got.status.as_mut()) {
                            e.phase = Phase::Archived;
                            e.updated_at = None;
                            g.updated_at = None;
                        }
                        if !old_phase.is_outcome() || archived.phase() != Some(Phase::Archived) {
                            Some((
                                FindingCode::IllegalPhaseTransition,
                                format!("{old_phase} -> {}", archived.phase().map(|p| p.to_string()).unwrap_or_default()),
                            ))
                        } else if expected != got {
                            Some(breach("archived document differs from the live document".into()))
                        } else {
                            None
                        }
                    }
                }
            }
        };
        if let Some((code, detail)) = problem {
            self.push(commit, Severity::Violation, code, detail, vec![path.to_string()]);
        }
        Ok(())
    }

    /// Every section of a merged document must come verbatim from one of
    /// the parents.
    fn audit_merge(&mut self, commit: &CommitRecord) -> Result<()> {
        let mut paths = std::collections::BTreeSet::new();
        for parent in &commit.parents {
            for (_, path) in self.handle.git().diff_names(parent, &commit.commit_id)? {
                if is_resource_path(&path) || is_archive_path(&path) {
                    paths.insert(path);
                }
            }
        }
        for path in paths {
            let merged = self.handle.git().show_file(&commit.commit_id, &path)?;
            let sides: Vec<Option<Vec<u8>>> = commit
                .parents
                .iter()
                .map(|p| self.handle.git().show_file(p, &path))
                .collect::<Result<_>>()?;
            let Some(merged) = merged else {
                if sides.iter().any(Option::is_none) {
                    continue;
                }
                self.push(
                    commit,
                    Severity::Violation,
                    FindingCode::RoleSectionBreach,
                    "merge removed a document present on every side".into(),
                    vec![path],
                );
                continue;
            };
            if sides.iter().any(|s| s.as_deref() == Some(merged.as_slice())) {
                continue;
            }
            let Ok(merged) = crate::document::parse_resource(&merged) else {
                self.push(commit, Severity::Violation, FindingCode::RoleSectionBreach, "merge produced an unreadable document".into(), vec![path]);
                continue;
            };
            let parsed: Vec<ExchangeResource> = sides
                .iter()
                .flatten()
                .filter_map(|b| crate::document::parse_resource(b).ok())
                .collect();
            let invented: Vec<String> = Section::ALL
                .iter()
                .filter(|s| {
                    let tree = section_tree(&merged, **s);
                    !parsed.iter().any(|p| section_tree(p, **s) == tree)
                })
                .map(|s| s.as_str().to_string())
                .collect();
            if !invented.is_empty() {
                self.push(
                    commit,
                    Severity::Violation,
                    FindingCode::RoleSectionBreach,
                    format!("merge introduced new content in {}", invented.join(", ")),
                    vec![path.clone()],
                );
            }
            if parsed.iter().any(|p| p.metadata.generation > merged.metadata.generation) {
                self.push(
                    commit,
                    Severity::Violation,
                    FindingCode::GenerationRegression,
                    "merged generation below a parent".into(),
                    vec![path],
                );
            }
        }
        Ok(())
    }
}

/// Checks the whole history, oldest first, against the ownership contract.
pub fn audit_repo(handle: &RepoHandle, policy: &TrustPolicy) -> Result<Vec<AuditFinding>> {
    let mut auditor = Auditor {
        handle,
        policy,
        findings: Vec::new(),
    };
    for id in handle.all_commits()? {
        let record = handle.commit_record(&id)?;
        auditor.audit_commit(&record)?;
    }
    Ok(auditor.findings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathOutcome {
    Match,
    Mismatch,
    /// In history but not on disk.
    Missing,
    /// On disk but never committed.
    Untracked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathReplay {
    pub path: String,
    pub outcome: PathOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEntry {
    pub commit_id: String,
    pub generation: Option<i64>,
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplayResult {
    pub paths: Vec<PathReplay>,
    /// Phase of each resource document after every commit that touched it.
    pub timeline: BTreeMap<String, Vec<TimelineEntry>>,
}

impl ReplayResult {
    pub fn is_clean(&self) -> bool {
        self.paths.iter().all(|p| p.outcome == PathOutcome::Match)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &PathReplay> {
        self.paths.iter().filter(|p| p.outcome != PathOutcome::Match)
    }
}

fn replayed_scope(path: &str) -> bool {
    is_resource_path(path) || is_archive_path(path)
}

/// Rebuilds `resources/` and `archive/` from the object store by applying
/// each first-parent diff in order, then compares the result with the
/// working tree byte for byte.
pub fn replay_history(handle: &RepoHandle) -> Result<ReplayResult> {
    let git = handle.git();
    let mut result = ReplayResult::default();
    let mut state: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    if handle.head()?.is_some() {
        let chain = git.run(["rev-list", "--reverse", "--first-parent", "HEAD"])?;
        let mut previous: Option<String> = None;
        for id in chain.lines() {
            let names = match &previous {
                Some(p) => git.diff_names(p, id)?,
                None => git.root_names(id)?,
            };
            for (status, path) in names {
                if !replayed_scope(&path) {
                    continue;
                }
                if status == 'D' {
                    state.remove(&path);
                } else if let Some(bytes) = git.show_file(id, &path)? {
                    state.insert(path.clone(), bytes);
                }
                let doc = state
                    .get(&path)
                    .and_then(|b| crate::document::parse_resource(b).ok());
                result.timeline.entry(path).or_default().push(TimelineEntry {
                    commit_id: id.to_string(),
                    generation: doc.as_ref().map(|d| d.metadata.generation),
                    phase: doc.and_then(|d| d.phase()),
                });
            }
            previous = Some(id.to_string());
        }
    }
    let mut disk = handle.worktree_files(RESOURCES_DIR)?;
    disk.extend(handle.worktree_files(ARCHIVE_DIR)?);
    disk.retain(|path, _| replayed_scope(path));
    let all: std::collections::BTreeSet<&String> = state.keys().chain(disk.keys()).collect();
    for path in all {
        let outcome = match (state.get(path), disk.get(path)) {
            (Some(a), Some(b)) if a == b => PathOutcome::Match,
            (Some(_), Some(_)) => PathOutcome::Mismatch,
            (Some(_), None) => PathOutcome::Missing,
            (None, _) => PathOutcome::Untracked,
        };
        result.paths.push(PathReplay {
            path: path.clone(),
            outcome,
        });
    }
    Ok(result)
}
