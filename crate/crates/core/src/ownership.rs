//! The spec/status ownership contract: change classification, write
//! authorization and section-wise three-way merge.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::document::{metadata_tree, status_tree};
use crate::error::{Error, MergeConflict, Result};
use crate::resource::{ExchangeResource, ResourceStatus};
use crate::schema::{validate_resource, SchemaRegistry};
use crate::value::{Path, ValueTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer,
    Observer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Producer => "producer",
            Role::Consumer => "consumer",
            Role::Observer => "observer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "producer" => Ok(Role::Producer),
            "consumer" => Ok(Role::Consumer),
            "observer" => Ok(Role::Observer),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Metadata,
    Spec,
    Status,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Metadata, Section::Spec, Section::Status];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Metadata => "metadata",
            Section::Spec => "spec",
            Section::Status => "status",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipPolicy {
    pub seed_status_allowed: bool,
}

impl Default for OwnershipPolicy {
    fn default() -> Self {
        OwnershipPolicy {
            seed_status_allowed: true,
        }
    }
}

impl OwnershipPolicy {
    /// Section owners are fixed: metadata and spec belong to the producer,
    /// status to the consumer.
    pub fn owner(&self, section: Section) -> Role {
        match section {
            Section::Metadata | Section::Spec => Role::Producer,
            Section::Status => Role::Consumer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeKind {
    Created,
    SpecOnly,
    StatusOnly,
    MetadataOnly,
    Mixed,
    Deleted,
    NoChange,
}

impl ChangeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Created => "created",
            ChangeKind::SpecOnly => "spec-only",
            ChangeKind::StatusOnly => "status-only",
            ChangeKind::MetadataOnly => "metadata-only",
            ChangeKind::Mixed => "mixed",
            ChangeKind::Deleted => "deleted",
            ChangeKind::NoChange => "no-change",
        }
    }
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChangeClass {
    pub kind: ChangeKind,
    pub sections: BTreeSet<Section>,
    /// Changed leaf paths, rooted at the section name (`spec.action`).
    pub paths: Vec<Path>,
    /// Immutable identity fields that differ between the two versions.
    pub identity_changes: Vec<String>,
    /// For `Created`: the document carries a status other than the Pending
    /// seed skeleton.
    pub non_seed_status: bool,
}

impl ChangeClass {
    fn simple(kind: ChangeKind) -> Self {
        ChangeClass {
            kind,
            sections: BTreeSet::new(),
            paths: Vec::new(),
            identity_changes: Vec::new(),
            non_seed_status: false,
        }
    }
}

fn is_seed_status(status: &ResourceStatus) -> bool {
    status.same_content(&ResourceStatus::pending_seed())
}

/// A section as compared by classify and merge (status without updatedAt).
pub fn section_tree(resource: &ExchangeResource, section: Section) -> ValueTree {
    match section {
        Section::Metadata => metadata_tree(&resource.metadata),
        Section::Spec => resource.spec.clone(),
        Section::Status => match &resource.status {
            Some(s) => {
                let mut s = s.clone();
                s.updated_at = None;
                status_tree(&s)
            }
            None => ValueTree::Null,
        },
    }
}

/// Structural diff of two documents by top-level section.
///
/// Panics if both sides are absent.
pub fn classify(old: Option<&ExchangeResource>, new: Option<&ExchangeResource>) -> ChangeClass {
    let policy = OwnershipPolicy::default();
    let (old, new) = match (old, new) {
        (None, None) => panic!("classify needs at least one document"),
        (None, Some(new)) => {
            let mut class = ChangeClass::simple(ChangeKind::Created);
            class.sections = [Section::Metadata, Section::Spec].into();
            if let Some(status) = &new.status {
                class.sections.insert(Section::Status);
                class.non_seed_status = !is_seed_status(status);
            }
            return class;
        }
        (Some(_), None) => return ChangeClass::simple(ChangeKind::Deleted),
        (Some(old), Some(new)) => (old, new),
    };

    let mut class = ChangeClass::simple(ChangeKind::NoChange);
    let identity = [
        ("apiVersion", &old.api_version, &new.api_version),
        ("kind", &old.kind, &new.kind),
        ("metadata.name", &old.metadata.name, &new.metadata.name),
        (
            "metadata.namespace",
            &old.metadata.namespace,
            &new.metadata.namespace,
        ),
    ];
    class.identity_changes = identity
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(field, _, _)| field.to_string())
        .collect();

    for section in Section::ALL {
        let a = section_tree(old, section);
        let b = section_tree(new, section);
        if a != b {
            class.sections.insert(section);
            diff_paths(&a, &b, &Path::key(section.as_str()), &mut class.paths);
        }
    }

    let owners: BTreeSet<Role> = class.sections.iter().map(|s| policy.owner(*s)).collect();
    class.kind = if !class.identity_changes.is_empty() || owners.len() > 1 {
        ChangeKind::Mixed
    } else if class.sections.is_empty() {
        ChangeKind::NoChange
    } else if class.sections.contains(&Section::Status) {
        ChangeKind::StatusOnly
    } else if class.sections.contains(&Section::Spec) {
        ChangeKind::SpecOnly
    } else {
        ChangeKind::MetadataOnly
    };
    class
}

/// Collects the deepest paths at which `a` and `b` differ.
pub fn diff_paths(a: &ValueTree, b: &ValueTree, at: &Path, out: &mut Vec<Path>) {
    match (a, b) {
        (ValueTree::Map(x), ValueTree::Map(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(l), Some(r)) => diff_paths(l, r, &at.child_key(k), out),
                    _ => out.push(at.child_key(k)),
                }
            }
        }
        (ValueTree::List(x), ValueTree::List(y)) if x.len() == y.len() => {
            for (i, (l, r)) in x.iter().zip(y).enumerate() {
                diff_paths(l, r, &at.child_index(i), out);
            }
        }
        _ if a != b => out.push(at.clone()),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub allowed: bool,
    pub reason: String,
    pub violating_paths: Vec<Path>,
}

impl Verdict {
    pub fn allow() -> Self {
        Verdict {
            allowed: true,
            reason: String::new(),
            violating_paths: Vec::new(),
        }
    }

    pub fn deny(reason: impl Into<String>, violating_paths: Vec<Path>) -> Self {
        Verdict {
            allowed: false,
            reason: reason.into(),
            violating_paths,
        }
    }
}

/// Decides whether `role` may author `change`.
pub fn check_permitted(role: Role, change: &ChangeClass, policy: &OwnershipPolicy) -> Verdict {
    use ChangeKind::*;
    let foreign_paths = || -> Vec<Path> {
        let mut paths: Vec<Path> = change
            .paths
            .iter()
            .filter(|p| {
                Section::ALL.iter().any(|s| {
                    policy.owner(*s) != role && p.strip_prefix(&Path::key(s.as_str())).is_some()
                })
            })
            .cloned()
            .collect();
        paths.extend(change.identity_changes.iter().filter_map(|f| f.parse().ok()));
        paths
    };
    match (role, change.kind) {
        (Role::Observer, _) => Verdict::deny("observers may not write", foreign_paths()),
        (_, Mixed) if !change.identity_changes.is_empty() => Verdict::deny(
            format!("immutable fields changed: {}", change.identity_changes.join(", ")),
            foreign_paths(),
        ),
        (_, NoChange) => Verdict::allow(),
        (Role::Producer, Created) => {
            if !change.sections.contains(&Section::Status) {
                Verdict::allow()
            } else if !policy.seed_status_allowed {
                Verdict::deny("producer may not seed status", vec![Path::key("status")])
            } else if change.non_seed_status {
                Verdict::deny(
                    "producer may only seed the Pending status skeleton",
                    vec![Path::key("status")],
                )
            } else {
                Verdict::allow()
            }
        }
        (Role::Producer, SpecOnly | MetadataOnly | Deleted) => Verdict::allow(),
        (Role::Consumer, StatusOnly) => Verdict::allow(),
        (role, kind) => Verdict::deny(
            format!("{role} may not make a {kind} change"),
            match kind {
                Created | Deleted => Vec::new(),
                _ => foreign_paths(),
            },
        ),
    }
}

/// Section-wise three-way merge.
///
/// A section changed on one side only is taken from that side; changed on
/// both sides to the same content is accepted; changed on both sides
/// differently is a conflict. The merged document is re-validated.
pub fn merge_resources(
    base: Option<&ExchangeResource>,
    ours: &ExchangeResource,
    theirs: &ExchangeResource,
    registry: &SchemaRegistry,
) -> Result<ExchangeResource> {
    let key = ours.key().to_string();
    if ours.key() != theirs.key() || ours.api_version != theirs.api_version {
        return Err(MergeConflict {
            resource: key,
            section: "identity".into(),
        }
        .into());
    }
    let mut merged = ours.clone();
    for section in Section::ALL {
        let full = |r: &ExchangeResource| match section {
            Section::Metadata => metadata_tree(&r.metadata),
            Section::Spec => r.spec.clone(),
            Section::Status => r.status.as_ref().map(status_tree).unwrap_or_default(),
        };
        let o = full(ours);
        let t = full(theirs);
        let take_theirs = match base.map(full) {
            Some(b) if o == b => true,
            Some(b) if t == b => false,
            _ if o == t => false,
            _ => {
                return Err(MergeConflict {
                    resource: key,
                    section: section.to_string(),
                }
                .into())
            }
        };
        if take_theirs {
            match section {
                Section::Metadata => merged.metadata = theirs.metadata.clone(),
                Section::Spec => merged.spec = theirs.spec.clone(),
                Section::Status => merged.status = theirs.status.clone(),
            }
        }
    }
    merged.check_invariants()?;
    let report = validate_resource(&merged, registry);
    if !report.is_valid() {
        return Err(Error::ValidationFailed {
            resource: key,
            summary: report.summary(),
        });
    }
    Ok(merged)
}
