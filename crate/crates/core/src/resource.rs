//! The exchanged custom resource and its lifecycle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{DocumentError, IllegalTransition};
use crate::value::ValueTree;

pub const DEFAULT_NAMESPACE: &str = "default";

/// Annotation prefix reserved for machine-written metadata.
pub const RESERVED_ANNOTATION_PREFIX: &str = "giter.io/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Pending,
    Processing,
    Completed,
    Failed,
    Archived,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Pending,
        Phase::Processing,
        Phase::Completed,
        Phase::Failed,
        Phase::Archived,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pending => "Pending",
            Phase::Processing => "Processing",
            Phase::Completed => "Completed",
            Phase::Failed => "Failed",
            Phase::Archived => "Archived",
        }
    }

    /// Completed or Failed: the handler has produced an outcome.
    pub fn is_outcome(self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed)
    }

    /// The lifecycle relation. Self-loops are not transitions.
    pub fn can_transition_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Pending, Processing)
                | (Processing, Completed)
                | (Processing, Failed)
                | (Completed, Pending)
                | (Failed, Pending)
                | (Completed, Archived)
                | (Failed, Archived)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = DocumentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| DocumentError::Structure(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceMetadata {
    pub name: String,
    pub namespace: String,
    pub generation: i64,
    pub labels: BTreeMap<String, String>,
    pub annotations: BTreeMap<String, String>,
    pub created_at: Option<DateTime<Utc>>,
}

impl ResourceMetadata {
    pub fn new(name: impl Into<String>) -> Self {
        ResourceMetadata {
            name: name.into(),
            namespace: DEFAULT_NAMESPACE.to_string(),
            generation: 1,
            labels: BTreeMap::new(),
            annotations: BTreeMap::new(),
            created_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceStatus {
    pub phase: Phase,
    pub result: ValueTree,
    pub observed_generation: i64,
    pub message: Option<String>,
    pub updated_at: Option<DateTime<Utc>>,
}

impl ResourceStatus {
    /// The skeleton a producer may seed at creation time.
    pub fn pending_seed() -> Self {
        ResourceStatus {
            phase: Phase::Pending,
            result: ValueTree::empty_map(),
            observed_generation: 0,
            message: None,
            updated_at: None,
        }
    }

    /// Compares everything except `updated_at`.
    pub fn same_content(&self, other: &ResourceStatus) -> bool {
        self.phase == other.phase
            && self.result == other.result
            && self.observed_generation == other.observed_generation
            && self.message == other.message
    }
}

/// Moves `status` to `next` if the lifecycle allows it, stamping `now`.
pub fn transition_phase(
    status: &ResourceStatus,
    next: Phase,
    now: DateTime<Utc>,
) -> Result<ResourceStatus, IllegalTransition> {
    if !status.phase.can_transition_to(next) {
        return Err(IllegalTransition {
            from: status.phase,
            to: next,
        });
    }
    let mut out = status.clone();
    out.phase = next;
    out.updated_at = Some(now);
    Ok(out)
}

/// `(namespace, lowercase kind, name)`: the identity of a resource within a
/// repository. Displays as `<ns>/<kind>/<name>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResourceKey {
    pub namespace: String,
    pub kind: String,
    pub name: String,
}

impl ResourceKey {
    pub fn new(namespace: &str, kind: &str, name: &str) -> Self {
        ResourceKey {
            namespace: namespace.to_string(),
            kind: kind.to_ascii_lowercase(),
            name: name.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), DocumentError> {
        validate_identifier("namespace", &self.namespace)?;
        validate_kind(&self.kind)?;
        validate_identifier("name", &self.name)
    }
}

impl fmt::Display for ResourceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.namespace, self.kind, self.name)
    }
}

impl FromStr for ResourceKey {
    type Err = DocumentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let [ns, kind, name] = parts.as_slice() else {
            return Err(DocumentError::Identifier {
                field: "resource key",
                value: s.to_string(),
            });
        };
        let key = ResourceKey::new(ns, kind, name);
        key.validate()?;
        Ok(key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeResource {
    pub api_version: String,
    pub kind: String,
    pub metadata: ResourceMetadata,
    pub spec: ValueTree,
    pub status: Option<ResourceStatus>,
}

impl ExchangeResource {
    pub fn new(api_version: &str, kind: &str, name: &str, spec: ValueTree) -> Self {
        ExchangeResource {
            api_version: api_version.to_string(),
            kind: kind.to_string(),
            metadata: ResourceMetadata::new(name),
            spec,
            status: None,
        }
    }

    pub fn key(&self) -> ResourceKey {
        ResourceKey::new(&self.metadata.namespace, &self.kind, &self.metadata.name)
    }

    pub fn phase(&self) -> Option<Phase> {
        self.status.as_ref().map(|s| s.phase)
    }

    /// Completed (or Failed) for the current generation.
    pub fn is_settled(&self) -> bool {
        self.status.as_ref().is_some_and(|s| {
            s.phase.is_outcome() && s.observed_generation == self.metadata.generation
        })
    }

    /// Checks the structural invariants every stored document must hold.
    pub fn check_invariants(&self) -> Result<(), DocumentError> {
        if self.api_version.is_empty() {
            return Err(DocumentError::Structure("apiVersion is empty".into()));
        }
        validate_kind(&self.kind)?;
        validate_identifier("metadata.name", &self.metadata.name)?;
        validate_identifier("metadata.namespace", &self.metadata.namespace)?;
        if self.metadata.generation < 1 {
            return Err(DocumentError::Structure(format!(
                "metadata.generation must be >= 1, got {}",
                self.metadata.generation
            )));
        }
        if let Some(status) = &self.status {
            if status.observed_generation < 0
                || status.observed_generation > self.metadata.generation
            {
                return Err(DocumentError::Structure(format!(
                    "status.observedGeneration {} outside 0..={}",
                    status.observed_generation, self.metadata.generation
                )));
            }
            if status.phase == Phase::Failed && status.message.is_none() {
                return Err(DocumentError::Structure(
                    "status.message is required when phase is Failed".into(),
                ));
            }
        }
        Ok(())
    }
}

/// DNS-label rule shared by names and namespaces.
pub fn validate_identifier(field: &'static str, value: &str) -> Result<(), DocumentError> {
    let bytes = value.as_bytes();
    let inner_ok = |b: &u8| b.is_ascii_lowercase() || b.is_ascii_digit();
    let ok = !bytes.is_empty()
        && bytes.len() <= 63
        && inner_ok(&bytes[0])
        && inner_ok(&bytes[bytes.len() - 1])
        && bytes.iter().all(|b| inner_ok(b) || *b == b'-');
    if ok {
        Ok(())
    } else {
        Err(DocumentError::Identifier {
            field,
            value: value.to_string(),
        })
    }
}

/// Kinds are CamelCase type names; they appear lowercased in paths.
pub fn validate_kind(kind: &str) -> Result<(), DocumentError> {
    let mut chars = kind.chars();
    let ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric())
        && kind.len() <= 63;
    if ok {
        Ok(())
    } else {
        Err(DocumentError::Identifier {
            field: "kind",
            value: kind.to_string(),
        })
    }
}
