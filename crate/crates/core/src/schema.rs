//! Per-kind structural schemas: the contract between producer and consumer.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::Serialize;

use crate::document::parse_document;
use crate::error::{Error, Result};
use crate::resource::ExchangeResource;
use crate::value::{Path, ValueTree};

pub const SCHEMA_DIR: &str = ".giter/schemas/";
pub const SCHEMA_SUFFIX: &str = ".schema.yaml";

/// Repository files by relative path.
pub type FileSet = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Clone)]
pub struct StringPattern {
    source: String,
    regex: Regex,
}

impl StringPattern {
    pub fn new(source: &str) -> std::result::Result<Self, regex::Error> {
        Ok(StringPattern {
            source: source.to_string(),
            regex: Regex::new(source)?,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.regex.is_match(s)
    }
}

impl PartialEq for StringPattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemaNode {
    Object {
        properties: BTreeMap<String, SchemaNode>,
        required: Vec<String>,
        additional_properties: bool,
    },
    Array {
        items: Option<Box<SchemaNode>>,
    },
    String {
        allowed: Option<Vec<String>>,
        pattern: Option<StringPattern>,
    },
    Integer {
        minimum: Option<f64>,
        maximum: Option<f64>,
    },
    Number {
        minimum: Option<f64>,
        maximum: Option<f64>,
    },
    Boolean,
    Any,
}

impl SchemaNode {
    pub fn object(properties: BTreeMap<String, SchemaNode>, required: &[&str]) -> Self {
        SchemaNode::Object {
            properties,
            required: required.iter().map(|s| s.to_string()).collect(),
            additional_properties: false,
        }
    }

    pub fn string() -> Self {
        SchemaNode::String {
            allowed: None,
            pattern: None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            SchemaNode::Object { .. } => "object",
            SchemaNode::Array { .. } => "array",
            SchemaNode::String { .. } => "string",
            SchemaNode::Integer { .. } => "integer",
            SchemaNode::Number { .. } => "number",
            SchemaNode::Boolean => "boolean",
            SchemaNode::Any => "any",
        }
    }

    /// Checks the node-level invariants (required ⊆ properties, non-empty
    /// enums, ordered bounds) recursively.
    pub fn check(&self) -> std::result::Result<(), String> {
        match self {
            SchemaNode::Object {
                properties,
                required,
                ..
            } => {
                if let Some(r) = required.iter().find(|r| !properties.contains_key(*r)) {
                    return Err(format!("required field {r:?} is not a declared property"));
                }
                properties.values().try_for_each(SchemaNode::check)
            }
            SchemaNode::Array { items } => items.as_deref().map_or(Ok(()), SchemaNode::check),
            SchemaNode::String {
                allowed: Some(values),
                ..
            } if values.is_empty() => Err("enum must not be empty".into()),
            SchemaNode::Integer {
                minimum: Some(lo),
                maximum: Some(hi),
            }
            | SchemaNode::Number {
                minimum: Some(lo),
                maximum: Some(hi),
            } if lo > hi => Err(format!("minimum {lo} exceeds maximum {hi}")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    TypeMismatch,
    MissingRequired,
    UnknownField,
    EnumViolation,
    PatternViolation,
    BoundViolation,
    UnknownKind,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::TypeMismatch => "type-mismatch",
            ViolationCode::MissingRequired => "missing-required",
            ViolationCode::UnknownField => "unknown-field",
            ViolationCode::EnumViolation => "enum-violation",
            ViolationCode::PatternViolation => "pattern-violation",
            ViolationCode::BoundViolation => "bound-violation",
            ViolationCode::UnknownKind => "unknown-kind",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: Path,
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("{} at {:?}: {}", v.code, v.path.to_string(), v.detail))
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn push(&mut self, path: &Path, code: ViolationCode, detail: impl Into<String>) {
        self.violations.push(Violation {
            path: path.clone(),
            code,
            detail: detail.into(),
        });
    }
}

/// Validates `tree` against `node`. Never fails; problems are reported.
pub fn validate(tree: &ValueTree, node: &SchemaNode) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_at(tree, node, &Path::root(), &mut report);
    report
}

fn validate_at(tree: &ValueTree, node: &SchemaNode, path: &Path, report: &mut ValidationReport) {
    match (node, tree) {
        (SchemaNode::Any, _) => {}
        (
            SchemaNode::Object {
                properties,
                required,
                additional_properties,
            },
            ValueTree::Map(map),
        ) => {
            for name in required {
                if !map.contains_key(name) {
                    report.push(
                        &path.child_key(name),
                        ViolationCode::MissingRequired,
                        "required field is missing",
                    );
                }
            }
            for (key, child) in map {
                match properties.get(key) {
                    Some(child_schema) => {
                        validate_at(child, child_schema, &path.child_key(key), report)
                    }
                    None if !additional_properties => report.push(
                        &path.child_key(key),
                        ViolationCode::UnknownField,
                        "field is not declared by the schema",
                    ),
                    None => {}
                }
            }
        }
        (SchemaNode::Array { items }, ValueTree::List(list)) => {
            if let Some(item_schema) = items {
                for (i, item) in list.iter().enumerate() {
                    validate_at(item, item_schema, &path.child_index(i), report);
                }
            }
        }
        (SchemaNode::String { allowed, pattern }, ValueTree::String(s)) => {
            if let Some(values) = allowed {
                if !values.contains(s) {
                    report.push(
                        path,
                        ViolationCode::EnumViolation,
                        format!("{s:?} is not one of {values:?}"),
                    );
                }
            }
            if let Some(p) = pattern {
                if !p.is_match(s) {
                    report.push(
                        path,
                        ViolationCode::PatternViolation,
                        format!("{s:?} does not match /{}/", p.as_str()),
                    );
                }
            }
        }
        (SchemaNode::Integer { minimum, maximum }, ValueTree::Int(i)) => {
            check_bounds(*i as f64, *minimum, *maximum, path, report)
        }
        (SchemaNode::Number { minimum, maximum }, ValueTree::Int(i)) => {
            check_bounds(*i as f64, *minimum, *maximum, path, report)
        }
        (SchemaNode::Number { minimum, maximum }, ValueTree::Float(f)) => {
            check_bounds(*f, *minimum, *maximum, path, report)
        }
        (SchemaNode::Boolean, ValueTree::Bool(_)) => {}
        (expected, found) => report.push(
            path,
            ViolationCode::TypeMismatch,
            format!("expected {}, found {}", expected.type_name(), found.type_name()),
        ),
    }
}

fn check_bounds(
    value: f64,
    minimum: Option<f64>,
    maximum: Option<f64>,
    path: &Path,
    report: &mut ValidationReport,
) {
    if minimum.is_some_and(|lo| value < lo) || maximum.is_some_and(|hi| value > hi) {
        report.push(
            path,
            ViolationCode::BoundViolation,
            format!("{value} outside [{minimum:?}, {maximum:?}]"),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaDefinition {
    pub kind: String,
    pub api_version: String,
    pub spec_schema: SchemaNode,
    pub status_result_schema: Option<SchemaNode>,
}

impl SchemaDefinition {
    pub fn parse(file: &str, bytes: &[u8]) -> Result<Self> {
        let err = |reason: String| Error::SchemaParse {
            file: file.to_string(),
            reason,
        };
        let tree = parse_document(bytes).map_err(|e| err(e.to_string()))?;
        let ValueTree::Map(mut top) = tree else {
            return Err(err("schema document must be a map".into()));
        };
        let mut take_string = |key: &str| match top.remove(key) {
            Some(ValueTree::String(s)) if !s.is_empty() => Ok(s),
            _ => Err(err(format!("missing string field {key}"))),
        };
        let api_version = take_string("apiVersion")?;
        let kind = take_string("kind")?;
        let spec_schema = match top.remove("specSchema") {
            Some(tree) => node_from_tree(&tree, true).map_err(err)?,
            None => return Err(err("missing specSchema".into())),
        };
        if !matches!(spec_schema, SchemaNode::Object { .. }) {
            return Err(err("specSchema root must be an object schema".into()));
        }
        let status_result_schema = top
            .remove("statusResultSchema")
            .map(|tree| node_from_tree(&tree, false).map_err(err))
            .transpose()?;
        if let Some(extra) = top.keys().next() {
            return Err(err(format!("unknown key {extra:?}")));
        }
        Ok(SchemaDefinition {
            kind,
            api_version,
            spec_schema,
            status_result_schema,
        })
    }

    pub fn to_tree(&self) -> ValueTree {
        let mut top = BTreeMap::new();
        top.insert("apiVersion".into(), ValueTree::from(self.api_version.as_str()));
        top.insert("kind".into(), ValueTree::from(self.kind.as_str()));
        top.insert("specSchema".into(), node_to_tree(&self.spec_schema));
        if let Some(node) = &self.status_result_schema {
            top.insert("statusResultSchema".into(), node_to_tree(node));
        }
        ValueTree::Map(top)
    }

    /// The conventional file name inside the schema directory.
    pub fn file_name(&self) -> String {
        format!("{}{}", self.kind.to_ascii_lowercase(), SCHEMA_SUFFIX)
    }
}

/// Parses one schema node. Objects default to `additionalProperties: false`
/// when they are the root or declare properties, and to `true` when they
/// declare none (a free-form map).
pub fn node_from_tree(tree: &ValueTree, is_root: bool) -> std::result::Result<SchemaNode, String> {
    let ValueTree::Map(m) = tree else {
        return Err(format!("schema node must be a map, found {}", tree.type_name()));
    };
    let ty = m
        .get("type")
        .and_then(ValueTree::as_str)
        .ok_or("schema node needs a string `type`")?;
    let allowed_keys: &[&str] = match ty {
        "object" => &["type", "properties", "required", "additionalProperties"],
        "array" => &["type", "items"],
        "string" => &["type", "enum", "pattern"],
        "integer" | "number" => &["type", "minimum", "maximum"],
        "boolean" | "any" => &["type"],
        other => return Err(format!("unknown type {other:?}")),
    };
    if let Some(k) = m.keys().find(|k| !allowed_keys.contains(&k.as_str())) {
        return Err(format!("key {k:?} not allowed for type {ty}"));
    }
    let bound = |key: &str| -> std::result::Result<Option<f64>, String> {
        match m.get(key) {
            None => Ok(None),
            Some(ValueTree::Int(i)) => Ok(Some(*i as f64)),
            Some(ValueTree::Float(f)) => Ok(Some(*f)),
            Some(_) => Err(format!("{key} must be numeric")),
        }
    };
    let node = match ty {
        "object" => {
            let properties = match m.get("properties") {
                None => BTreeMap::new(),
                Some(ValueTree::Map(props)) => props
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), node_from_tree(v, false)?)))
                    .collect::<std::result::Result<_, String>>()?,
                Some(_) => return Err("properties must be a map".into()),
            };
            let required = match m.get("required") {
                None => Vec::new(),
                Some(ValueTree::List(items)) => items
                    .iter()
                    .map(|v| v.as_str().map(str::to_string).ok_or("required entries must be strings"))
                    .collect::<std::result::Result<_, _>>()?,
                Some(_) => return Err("required must be a list".into()),
            };
            let additional_properties = match m.get("additionalProperties") {
                None => !is_root && properties.is_empty(),
                Some(ValueTree::Bool(b)) => *b,
                Some(_) => return Err("additionalProperties must be a boolean".into()),
            };
            SchemaNode::Object {
                properties,
                required,
                additional_properties,
            }
        }
        "array" => SchemaNode::Array {
            items: m
                .get("items")
                .map(|v| node_from_tree(v, false).map(Box::new))
                .transpose()?,
        },
        "string" => SchemaNode::String {
            allowed: match m.get("enum") {
                None => None,
                Some(ValueTree::List(items)) => Some(
                    items
                        .iter()
                        .map(|v| v.as_str().map(str::to_string).ok_or("enum entries must be strings"))
                        .collect::<std::result::Result<_, _>>()?,
                ),
                Some(_) => return Err("enum must be a list".into()),
            },
            pattern: match m.get("pattern") {
                None => None,
                Some(ValueTree::String(p)) => {
                    Some(StringPattern::new(p).map_err(|e| format!("bad pattern: {e}"))?)
                }
                Some(_) => return Err("pattern must be a string".into()),
            },
        },
        "integer" => SchemaNode::Integer {
            minimum: bound("minimum")?,
            maximum: bound("maximum")?,
        },
        "number" => SchemaNode::Number {
            minimum: bound("minimum")?,
            maximum: bound("maximum")?,
        },
        "boolean" => SchemaNode::Boolean,
        _ => SchemaNode::Any,
    };
    node.check()?;
    Ok(node)
}

pub fn node_to_tree(node: &SchemaNode) -> ValueTree {
    let mut m = BTreeMap::new();
    m.insert("type".to_string(), ValueTree::from(node.type_name()));
    let num = |f: f64| {
        if f.fract() == 0.0 && f.abs() < 9.0e15 {
            ValueTree::Int(f as i64)
        } else {
            ValueTree::Float(f)
        }
    };
    match node {
        SchemaNode::Object {
            properties,
            required,
            additional_properties,
        } => {
            if !properties.is_empty() {
                m.insert(
                    "properties".into(),
                    ValueTree::Map(
                        properties
                            .iter()
                            .map(|(k, v)| (k.clone(), node_to_tree(v)))
                            .collect(),
                    ),
                );
            }
            if !required.is_empty() {
                m.insert(
                    "required".into(),
                    ValueTree::List(required.iter().map(|r| ValueTree::from(r.as_str())).collect()),
                );
            }
            m.insert(
                "additionalProperties".into(),
                ValueTree::Bool(*additional_properties),
            );
        }
        SchemaNode::Array { items: Some(items) } => {
            m.insert("items".into(), node_to_tree(items));
        }
        SchemaNode::String { allowed, pattern } => {
            if let Some(values) = allowed {
                m.insert(
                    "enum".into(),
                    ValueTree::List(values.iter().map(|v| ValueTree::from(v.as_str())).collect()),
                );
            }
            if let Some(p) = pattern {
                m.insert("pattern".into(), ValueTree::from(p.as_str()));
            }
        }
        SchemaNode::Integer { minimum, maximum } | SchemaNode::Number { minimum, maximum } => {
            if let Some(lo) = minimum {
                m.insert("minimum".into(), num(*lo));
            }
            if let Some(hi) = maximum {
                m.insert("maximum".into(), num(*hi));
            }
        }
        _ => {}
    }
    ValueTree::Map(m)
}

/// Registered schemas by kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaRegistry {
    by_kind: BTreeMap<String, SchemaDefinition>,
}

impl SchemaRegistry {
    pub fn insert(&mut self, def: SchemaDefinition) -> Result<()> {
        if self.by_kind.contains_key(&def.kind) {
            return Err(Error::DuplicateKind(def.kind));
        }
        self.by_kind.insert(def.kind.clone(), def);
        Ok(())
    }

    pub fn get(&self, kind: &str) -> Option<&SchemaDefinition> {
        self.by_kind.get(kind)
    }

    pub fn len(&self) -> usize {
        self.by_kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_kind.is_empty()
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.by_kind.keys().map(String::as_str)
    }
}

/// Loads every `*.schema.yaml` under the schema directory of `files`.
pub fn load_schemas(files: &FileSet) -> Result<SchemaRegistry> {
    let mut registry = SchemaRegistry::default();
    for (path, bytes) in files {
        if path.starts_with(SCHEMA_DIR) && path.ends_with(SCHEMA_SUFFIX) {
            registry.insert(SchemaDefinition::parse(path, bytes)?)?;
        }
    }
    Ok(registry)
}

pub fn validate_resource(resource: &ExchangeResource, registry: &SchemaRegistry) -> ValidationReport {
    let Some(def) = registry
        .get(&resource.kind)
        .filter(|d| d.api_version == resource.api_version)
    else {
        let mut report = ValidationReport::default();
        report.push(
            &Path::root(),
            ViolationCode::UnknownKind,
            format!(
                "no schema registered for {} {}",
                resource.api_version, resource.kind
            ),
        );
        return report;
    };
    let mut report = validate(&resource.spec, &def.spec_schema);
    if let (Some(status), Some(result_schema)) = (&resource.status, &def.status_result_schema) {
        let result_root = Path::key("status").child_key("result");
        for mut v in validate(&status.result, result_schema).violations {
            v.path = Path(
                result_root
                    .segments()
                    .iter()
                    .chain(v.path.segments())
                    .cloned()
                    .collect(),
            );
            report.violations.push(v);
        }
    }
    report
}
