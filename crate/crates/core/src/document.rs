//! Canonical text form of resources and other repository documents.
//!
//! The emitter produces a restricted YAML: block maps and lists, 2-space
//! indentation, sorted keys below the top level, plain scalars only where
//! they cannot be mistaken for another type. Any YAML reader accepts it; the
//! reader here is `serde_yaml`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::error::DocumentError;
use crate::resource::{ExchangeResource, Phase, ResourceMetadata, ResourceStatus};
use crate::value::ValueTree;

const TOP_LEVEL_KEYS: [&str; 5] = ["apiVersion", "kind", "metadata", "spec", "status"];
const METADATA_KEYS: [&str; 6] = [
    "annotations",
    "createdAt",
    "generation",
    "labels",
    "name",
    "namespace",
];
const STATUS_KEYS: [&str; 5] = ["message", "observedGeneration", "phase", "result", "updatedAt"];

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, DocumentError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| DocumentError::Structure(format!("bad timestamp {s:?}: {e}")))
}

/// Renders a resource in canonical form.
pub fn canonical_serialize(resource: &ExchangeResource) -> Result<Vec<u8>, DocumentError> {
    let mut out = String::new();
    let top = resource_entries(resource);
    emit_entries(&mut out, top.iter().map(|(k, v)| (*k, v)), 0)?;
    Ok(out.into_bytes())
}

/// Renders an arbitrary map document with sorted keys at every level.
pub fn serialize_document(tree: &ValueTree) -> Result<Vec<u8>, DocumentError> {
    let ValueTree::Map(map) = tree else {
        return Err(DocumentError::Serialization(
            "document root must be a map".into(),
        ));
    };
    let mut out = String::new();
    emit_entries(&mut out, map.iter().map(|(k, v)| (k.as_str(), v)), 0)?;
    Ok(out.into_bytes())
}

/// Parses any YAML document into a value tree.
pub fn parse_document(bytes: &[u8]) -> Result<ValueTree, DocumentError> {
    let raw: serde_yaml::Value =
        serde_yaml::from_slice(bytes).map_err(|e| DocumentError::Parse(e.to_string()))?;
    from_yaml(raw)
}

pub fn parse_resource(bytes: &[u8]) -> Result<ExchangeResource, DocumentError> {
    let tree = parse_document(bytes)?;
    resource_from_tree(tree)
}

/// The resource as a plain value tree, with the same key spellings as the
/// canonical document.
pub fn resource_to_tree(resource: &ExchangeResource) -> ValueTree {
    ValueTree::Map(
        resource_entries(resource)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    )
}

fn resource_entries(resource: &ExchangeResource) -> Vec<(&'static str, ValueTree)> {
    let mut top = vec![
        ("apiVersion", ValueTree::from(resource.api_version.as_str())),
        ("kind", ValueTree::from(resource.kind.as_str())),
        ("metadata", metadata_tree(&resource.metadata)),
        ("spec", resource.spec.clone()),
    ];
    if let Some(status) = &resource.status {
        top.push(("status", status_tree(status)));
    }
    top
}

pub fn metadata_tree(meta: &ResourceMetadata) -> ValueTree {
    let mut m = BTreeMap::new();
    let string_map = |src: &BTreeMap<String, String>| {
        ValueTree::Map(
            src.iter()
                .map(|(k, v)| (k.clone(), ValueTree::from(v.as_str())))
                .collect(),
        )
    };
    if !meta.annotations.is_empty() {
        m.insert("annotations".into(), string_map(&meta.annotations));
    }
    if let Some(ts) = &meta.created_at {
        m.insert("createdAt".into(), ValueTree::String(format_timestamp(ts)));
    }
    m.insert("generation".into(), ValueTree::Int(meta.generation));
    if !meta.labels.is_empty() {
        m.insert("labels".into(), string_map(&meta.labels));
    }
    m.insert("name".into(), ValueTree::from(meta.name.as_str()));
    m.insert("namespace".into(), ValueTree::from(meta.namespace.as_str()));
    ValueTree::Map(m)
}

pub fn status_tree(status: &ResourceStatus) -> ValueTree {
    let mut m = BTreeMap::new();
    if let Some(msg) = &status.message {
        m.insert("message".into(), ValueTree::from(msg.as_str()));
    }
    m.insert(
        "observedGeneration".into(),
        ValueTree::Int(status.observed_generation),
    );
    m.insert("phase".into(), ValueTree::from(status.phase.as_str()));
    m.insert("result".into(), status.result.clone());
    if let Some(ts) = &status.updated_at {
        m.insert("updatedAt".into(), ValueTree::String(format_timestamp(ts)));
    }
    ValueTree::Map(m)
}

pub fn resource_from_tree(tree: ValueTree) -> Result<ExchangeResource, DocumentError> {
    let resource = resource_structure(tree)?;
    resource.check_invariants()?;
    Ok(resource)
}

/// Parses the document shape only, skipping the cross-field invariants.
/// History inspection uses this so a committed document that breaks an
/// invariant is still seen for what it claims.
pub fn parse_resource_lenient(bytes: &[u8]) -> Result<ExchangeResource, DocumentError> {
    resource_structure(parse_document(bytes)?)
}

fn resource_structure(tree: ValueTree) -> Result<ExchangeResource, DocumentError> {
    let ValueTree::Map(mut top) = tree else {
        return Err(DocumentError::Structure("document root must be a map".into()));
    };
    if let Some(extra) = top.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(DocumentError::Structure(format!(
            "unknown top-level key {extra:?}"
        )));
    }
    let api_version = required_string(&mut top, "apiVersion")?;
    let kind = required_string(&mut top, "kind")?;
    let metadata = match top.remove("metadata") {
        Some(ValueTree::Map(m)) => metadata_from_map(m)?,
        Some(other) => {
            return Err(DocumentError::Structure(format!(
                "metadata must be a map, found {}",
                other.type_name()
            )))
        }
        None => return Err(DocumentError::Structure("missing metadata".into())),
    };
    let spec = top.remove("spec").unwrap_or_else(ValueTree::empty_map);
    let status = match top.remove("status") {
        None | Some(ValueTree::Null) => None,
        Some(ValueTree::Map(m)) => Some(status_from_map(m)?),
        Some(other) => {
            return Err(DocumentError::Structure(format!(
                "status must be a map, found {}",
                other.type_name()
            )))
        }
    };
    Ok(ExchangeResource {
        api_version,
        kind,
        metadata,
        spec,
        status,
    })
}

fn metadata_from_map(mut m: BTreeMap<String, ValueTree>) -> Result<ResourceMetadata, DocumentError> {
    reject_unknown(&m, &METADATA_KEYS, "metadata")?;
    let name = required_string(&mut m, "name").map_err(|_| {
        DocumentError::Structure("missing metadata.name".into())
    })?;
    let mut meta = ResourceMetadata::new(name);
    if let Some(ns) = optional_string(&mut m, "namespace")? {
        meta.namespace = ns;
    }
    match m.remove("generation") {
        None => {}
        Some(ValueTree::Int(g)) => meta.generation = g,
        Some(other) => {
            return Err(DocumentError::Structure(format!(
                "metadata.generation must be an integer, found {}",
                other.type_name()
            )))
        }
    }
    meta.labels = string_map(m.remove("labels"), "metadata.labels")?;
    meta.annotations = string_map(m.remove("annotations"), "metadata.annotations")?;
    if let Some(ts) = optional_string(&mut m, "createdAt")? {
        meta.created_at = Some(parse_timestamp(&ts)?);
    }
    Ok(meta)
}

fn status_from_map(mut m: BTreeMap<String, ValueTree>) -> Result<ResourceStatus, DocumentError> {
    reject_unknown(&m, &STATUS_KEYS, "status")?;
    let phase: Phase = required_string(&mut m, "phase")
        .map_err(|_| DocumentError::Structure("missing status.phase".into()))?
        .parse()?;
    let result = m.remove("result").unwrap_or_else(ValueTree::empty_map);
    let observed_generation = match m.remove("observedGeneration") {
        None => 0,
        Some(ValueTree::Int(g)) => g,
        Some(other) => {
            return Err(DocumentError::Structure(format!(
                "status.observedGeneration must be an integer, found {}",
                other.type_name()
            )))
        }
    };
    let message = optional_string(&mut m, "message")?;
    let updated_at = optional_string(&mut m, "updatedAt")?
        .map(|s| parse_timestamp(&s))
        .transpose()?;
    Ok(ResourceStatus {
        phase,
        result,
        observed_generation,
        message,
        updated_at,
    })
}

fn reject_unknown(
    m: &BTreeMap<String, ValueTree>,
    allowed: &[&str],
    section: &str,
) -> Result<(), DocumentError> {
    match m.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(DocumentError::Structure(format!(
            "unknown key {section}.{k}"
        ))),
        None => Ok(()),
    }
}

fn required_string(m: &mut BTreeMap<String, ValueTree>, key: &str) -> Result<String, DocumentError> {
    match optional_string(m, key)? {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(DocumentError::Structure(format!("missing {key}"))),
    }
}

fn optional_string(
    m: &mut BTreeMap<String, ValueTree>,
    key: &str,
) -> Result<Option<String>, DocumentError> {
    match m.remove(key) {
        None | Some(ValueTree::Null) => Ok(None),
        Some(ValueTree::String(s)) => Ok(Some(s)),
        Some(other) => Err(DocumentError::Structure(format!(
            "{key} must be a string, found {}",
            other.type_name()
        ))),
    }
}

fn string_map(
    value: Option<ValueTree>,
    field: &str,
) -> Result<BTreeMap<String, String>, DocumentError> {
    match value {
        None | Some(ValueTree::Null) => Ok(BTreeMap::new()),
        Some(ValueTree::Map(m)) => m
            .into_iter()
            .map(|(k, v)| match v {
                ValueTree::String(s) => Ok((k, s)),
                other => Err(DocumentError::Structure(format!(
                    "{field}.{k} must be a string, found {}",
                    other.type_name()
                ))),
            })
            .collect(),
        Some(other) => Err(DocumentError::Structure(format!(
            "{field} must be a map, found {}",
            other.type_name()
        ))),
    }
}

fn from_yaml(value: serde_yaml::Value) -> Result<ValueTree, DocumentError> {
    use serde_yaml::Value as Y;
    Ok(match value {
        Y::Null => ValueTree::Null,
        Y::Bool(b) => ValueTree::Bool(b),
        Y::Number(n) => {
            if let Some(i) = n.as_i64() {
                ValueTree::Int(i)
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                if !f.is_finite() {
                    return Err(DocumentError::Parse(format!("non-finite number {n}")));
                }
                ValueTree::Float(f)
            }
        }
        Y::String(s) => ValueTree::String(s),
        Y::Sequence(items) => {
            ValueTree::List(items.into_iter().map(from_yaml).collect::<Result<_, _>>()?)
        }
        Y::Mapping(map) => {
            let mut out = BTreeMap::new();
            for (k, v) in map {
                let key = match k {
                    Y::String(s) => s,
                    Y::Bool(b) => b.to_string(),
                    Y::Number(n) => n.to_string(),
                    other => {
                        return Err(DocumentError::Parse(format!(
                            "unsupported map key {other:?}"
                        )))
                    }
                };
                out.insert(key, from_yaml(v)?);
            }
            ValueTree::Map(out)
        }
        Y::Tagged(t) => {
            return Err(DocumentError::Parse(format!("unsupported tag {}", t.tag)))
        }
    })
}

fn emit_entries<'a>(
    out: &mut String,
    entries: impl Iterator<Item = (&'a str, &'a ValueTree)>,
    indent: usize,
) -> Result<(), DocumentError> {
    for (key, value) in entries {
        pad(out, indent);
        out.push_str(&scalar_string(key));
        out.push(':');
        emit_value_after_key(out, value, indent)?;
    }
    Ok(())
}

fn emit_value_after_key(out: &mut String, value: &ValueTree, indent: usize) -> Result<(), DocumentError> {
    match value {
        ValueTree::Map(m) if !m.is_empty() => {
            out.push('\n');
            emit_entries(out, m.iter().map(|(k, v)| (k.as_str(), v)), indent + 2)
        }
        ValueTree::List(items) if !items.is_empty() => {
            out.push('\n');
            emit_items(out, items, indent + 2)
        }
        other => {
            out.push(' ');
            out.push_str(&inline_value(other)?);
            out.push('\n');
            Ok(())
        }
    }
}

fn emit_items(out: &mut String, items: &[ValueTree], indent: usize) -> Result<(), DocumentError> {
    for item in items {
        match item {
            ValueTree::Map(m) if !m.is_empty() => {
                let mut block = String::new();
                emit_entries(&mut block, m.iter().map(|(k, v)| (k.as_str(), v)), indent + 2)?;
                push_compact(out, &block, indent);
            }
            ValueTree::List(inner) if !inner.is_empty() => {
                let mut block = String::new();
                emit_items(&mut block, inner, indent + 2)?;
                push_compact(out, &block, indent);
            }
            other => {
                pad(out, indent);
                out.push_str("- ");
                out.push_str(&inline_value(other)?);
                out.push('\n');
            }
        }
    }
    Ok(())
}

/// Places a nested block on the same line as its `- ` marker.
fn push_compact(out: &mut String, block: &str, indent: usize) {
    pad(out, indent);
    out.push_str("- ");
    out.push_str(&block[indent + 2..]);
}

fn pad(out: &mut String, indent: usize) {
    out.extend(std::iter::repeat_n(' ', indent));
}

fn inline_value(value: &ValueTree) -> Result<String, DocumentError> {
    Ok(match value {
        ValueTree::Null => "null".into(),
        ValueTree::Bool(b) => b.to_string(),
        ValueTree::Int(i) => i.to_string(),
        ValueTree::Float(f) => {
            if !f.is_finite() {
                return Err(DocumentError::Serialization(format!(
                    "non-finite float {f}"
                )));
            }
            // Debug gives the shortest round-trip form and always keeps a
            // `.` or exponent, so the value reads back as a float.
            format!("{f:?}")
        }
        ValueTree::String(s) => scalar_string(s),
        ValueTree::Map(_) => "{}".into(),
        ValueTree::List(_) => "[]".into(),
    })
}

const RESERVED_WORDS: [&str; 11] = [
    "true", "false", "null", "yes", "no", "on", "off", "y", "n", "inf", "nan",
];

fn is_plain_safe(s: &str) -> bool {
    let mut chars = s.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    first.is_ascii_alphabetic()
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '/' | '-'))
        && !RESERVED_WORDS.iter().any(|w| w.eq_ignore_ascii_case(s))
}

fn scalar_string(s: &str) -> String {
    if is_plain_safe(s) {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() || matches!(c, '\u{2028}' | '\u{2029}' | '\u{feff}' | '\u{fffe}' | '\u{ffff}') => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
