use thiserror::Error;

use crate::resource::Phase;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("invalid path syntax: {0:?}")]
    Syntax(String),
    #[error("path {path}: node at {at:?} is {found}, cannot descend")]
    NotContainer {
        path: String,
        at: String,
        found: &'static str,
    },
    #[error("path {path}: index {index} past end of list of length {len}")]
    IndexOutOfRange { path: String, index: usize, len: usize },
}

/// Errors raised while reading or writing resource documents.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DocumentError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("invalid resource structure: {0}")]
    Structure(String),
    #[error("cannot serialize: {0}")]
    Serialization(String),
    #[error("invalid identifier {value:?} for {field}")]
    Identifier { field: &'static str, value: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("illegal phase transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: Phase,
    pub to: Phase,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("merge conflict in section {section} of {resource}")]
pub struct MergeConflict {
    pub resource: String,
    pub section: String,
}

/// Top-level error for repository and reconciliation operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Transition(#[from] IllegalTransition),
    #[error(transparent)]
    MergeConflict(#[from] MergeConflict),
    #[error("schema file {file}: {reason}")]
    SchemaParse { file: String, reason: String },
    #[error("kind {0} is declared by more than one schema file")]
    DuplicateKind(String),
    #[error("validation failed for {resource}: {summary}")]
    ValidationFailed { resource: String, summary: String },
    #[error("ownership violation by {role}: {detail}")]
    OwnershipViolation { role: String, detail: String },
    #[error("repository already initialized at {0}")]
    AlreadyInitialized(String),
    #[error("remote unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("push failed after {attempts} attempts")]
    PushExhausted { attempts: u32 },
    #[error("resource {resource} is in phase {phase}, not Completed or Failed")]
    NotTerminal { resource: String, phase: String },
    #[error("resource {0} not found")]
    NotFound(String),
    #[error("nothing to commit for {0}")]
    NoChange(String),
    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },
    #[error("invalid pipeline configuration: {0}")]
    Pipeline(String),
    #[error("binding cycle: {0}")]
    Cycle(String),
    #[error("mapping into {target} violates its schema: {summary}")]
    Mapping { target: String, summary: String },
    #[error("resource {0} is listed more than once")]
    DuplicateResource(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("assertion {assertion} failed: {detail}")]
    Assertion { assertion: String, detail: String },
    #[error("policy file: {0}")]
    Policy(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
