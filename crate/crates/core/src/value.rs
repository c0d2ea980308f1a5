//! Recursive document values and path addressing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::PathError;

/// A structural document node: map, list or scalar.
///
/// Maps are ordered by key so that equality ignores insertion order and
/// iteration is already canonical.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ValueTree {
    #[default]
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    List(Vec<ValueTree>),
    Map(BTreeMap<String, ValueTree>),
}

impl ValueTree {
    pub fn empty_map() -> Self {
        ValueTree::Map(BTreeMap::new())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ValueTree::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ValueTree::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, ValueTree>> {
        match self {
            ValueTree::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, ValueTree::List(_) | ValueTree::Map(_))
    }

    /// Short type name used in diagnostics.
    pub fn type_name(&self) -> &'static str {
        match self {
            ValueTree::Null => "null",
            ValueTree::Bool(_) => "boolean",
            ValueTree::Int(_) => "integer",
            ValueTree::Float(_) => "number",
            ValueTree::String(_) => "string",
            ValueTree::List(_) => "array",
            ValueTree::Map(_) => "object",
        }
    }

    /// Direct child of a map node.
    pub fn field(&self, key: &str) -> Option<&ValueTree> {
        self.as_map().and_then(|m| m.get(key))
    }

    pub fn get(&self, path: &Path) -> Result<Option<&ValueTree>, PathError> {
        get_path(self, path)
    }

    pub fn set(&self, path: &Path, value: ValueTree) -> Result<ValueTree, PathError> {
        set_path(self, path, value)
    }

    pub fn from_json(value: serde_json::Value) -> Self {
        match value {
            serde_json::Value::Null => ValueTree::Null,
            serde_json::Value::Bool(b) => ValueTree::Bool(b),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => ValueTree::Int(i),
                None => ValueTree::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            serde_json::Value::String(s) => ValueTree::String(s),
            serde_json::Value::Array(items) => {
                ValueTree::List(items.into_iter().map(ValueTree::from_json).collect())
            }
            serde_json::Value::Object(map) => ValueTree::Map(
                map.into_iter()
                    .map(|(k, v)| (k, ValueTree::from_json(v)))
                    .collect(),
            ),
        }
    }

    /// JSON view of the tree. Non-finite floats become `null`.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ValueTree::Null => serde_json::Value::Null,
            ValueTree::Bool(b) => serde_json::Value::Bool(*b),
            ValueTree::Int(i) => serde_json::Value::from(*i),
            ValueTree::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            ValueTree::String(s) => serde_json::Value::String(s.clone()),
            ValueTree::List(items) => {
                serde_json::Value::Array(items.iter().map(ValueTree::to_json).collect())
            }
            ValueTree::Map(map) => serde_json::Value::Object(
                map.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            ),
        }
    }
}

impl From<&str> for ValueTree {
    fn from(s: &str) -> Self {
        ValueTree::String(s.to_string())
    }
}

impl From<String> for ValueTree {
    fn from(s: String) -> Self {
        ValueTree::String(s)
    }
}

impl From<i64> for ValueTree {
    fn from(i: i64) -> Self {
        ValueTree::Int(i)
    }
}

impl From<bool> for ValueTree {
    fn from(b: bool) -> Self {
        ValueTree::Bool(b)
    }
}

impl From<f64> for ValueTree {
    fn from(f: f64) -> Self {
        ValueTree::Float(f)
    }
}

impl serde::Serialize for ValueTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for ValueTree {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        serde_json::Value::deserialize(deserializer).map(ValueTree::from_json)
    }
}

/// One step of a [`Path`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Key(String),
    Index(usize),
}

/// Dot-separated address into a [`ValueTree`], e.g. `items[2].id`.
///
/// The empty path addresses the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Path(pub Vec<Segment>);

impl Path {
    pub fn root() -> Self {
        Path(Vec::new())
    }

    pub fn key(k: impl Into<String>) -> Self {
        Path(vec![Segment::Key(k.into())])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child_key(&self, key: &str) -> Path {
        let mut segs = self.0.clone();
        segs.push(Segment::Key(key.to_string()));
        Path(segs)
    }

    pub fn child_index(&self, idx: usize) -> Path {
        let mut segs = self.0.clone();
        segs.push(Segment::Index(idx));
        Path(segs)
    }

    /// True when one path is a prefix of the other.
    pub fn overlaps(&self, other: &Path) -> bool {
        let n = self.0.len().min(other.0.len());
        self.0[..n] == other.0[..n]
    }

    pub fn strip_prefix(&self, prefix: &Path) -> Option<Path> {
        self.0
            .strip_prefix(prefix.0.as_slice())
            .map(|rest| Path(rest.to_vec()))
    }
}

impl FromStr for Path {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut segments = Vec::new();
        if s.is_empty() {
            return Ok(Path(segments));
        }
        for (n, part) in s.split('.').enumerate() {
            let (key, mut rest) = match part.find('[') {
                Some(pos) => (&part[..pos], &part[pos..]),
                None => (part, ""),
            };
            // A bare `[i]` may only lead the path.
            let key_optional = n == 0 && !rest.is_empty();
            if (key.is_empty() && !key_optional) || key.contains(']') {
                return Err(PathError::Syntax(s.to_string()));
            }
            if !key.is_empty() {
                segments.push(Segment::Key(key.to_string()));
            }
            while !rest.is_empty() {
                let close = rest
                    .find(']')
                    .ok_or_else(|| PathError::Syntax(s.to_string()))?;
                let idx: usize = rest[1..close]
                    .parse()
                    .map_err(|_| PathError::Syntax(s.to_string()))?;
                segments.push(Segment::Index(idx));
                rest = &rest[close + 1..];
                if !rest.is_empty() && !rest.starts_with('[') {
                    return Err(PathError::Syntax(s.to_string()));
                }
            }
        }
        Ok(Path(segments))
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.0.iter().enumerate() {
            match seg {
                Segment::Key(k) if i == 0 => write!(f, "{k}")?,
                Segment::Key(k) => write!(f, ".{k}")?,
                Segment::Index(idx) => write!(f, "[{idx}]")?,
            }
        }
        Ok(())
    }
}

impl serde::Serialize for Path {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Looks up the node at `path`. Missing keys and out-of-range indices are
/// `Ok(None)`; stepping into a scalar or using the wrong segment kind is an
/// error.
pub fn get_path<'a>(tree: &'a ValueTree, path: &Path) -> Result<Option<&'a ValueTree>, PathError> {
    let mut node = tree;
    for (depth, seg) in path.0.iter().enumerate() {
        node = match (node, seg) {
            (ValueTree::Map(map), Segment::Key(k)) => match map.get(k) {
                Some(child) => child,
                None => return Ok(None),
            },
            (ValueTree::List(items), Segment::Index(i)) => match items.get(*i) {
                Some(child) => child,
                None => return Ok(None),
            },
            (other, _) => return Err(mismatch(path, depth, other)),
        };
    }
    Ok(Some(node))
}

/// Returns a copy of `tree` with `value` stored at `path`.
///
/// Missing intermediate maps are created; an index equal to the list length
/// appends. The input is left untouched.
pub fn set_path(tree: &ValueTree, path: &Path, value: ValueTree) -> Result<ValueTree, PathError> {
    let mut out = tree.clone();
    set_in_place(&mut out, path, 0, value)?;
    Ok(out)
}

fn set_in_place(
    node: &mut ValueTree,
    path: &Path,
    depth: usize,
    value: ValueTree,
) -> Result<(), PathError> {
    let Some(seg) = path.0.get(depth) else {
        *node = value;
        return Ok(());
    };
    match (node, seg) {
        (ValueTree::Map(map), Segment::Key(k)) => {
            let child = map.entry(k.clone()).or_insert_with(|| {
                match path.0.get(depth + 1) {
                    Some(Segment::Index(_)) => ValueTree::List(Vec::new()),
                    _ => ValueTree::empty_map(),
                }
            });
            set_in_place(child, path, depth + 1, value)
        }
        (ValueTree::List(items), Segment::Index(i)) => {
            if *i < items.len() {
                set_in_place(&mut items[*i], path, depth + 1, value)
            } else if *i == items.len() {
                let mut child = match path.0.get(depth + 1) {
                    Some(Segment::Index(_)) => ValueTree::List(Vec::new()),
                    _ => ValueTree::empty_map(),
                };
                set_in_place(&mut child, path, depth + 1, value)?;
                items.push(child);
                Ok(())
            } else {
                Err(PathError::IndexOutOfRange {
                    path: path.to_string(),
                    index: *i,
                    len: items.len(),
                })
            }
        }
        (other, _) => Err(mismatch(path, depth, other)),
    }
}

fn mismatch(path: &Path, depth: usize, node: &ValueTree) -> PathError {
    PathError::NotContainer {
        path: path.to_string(),
        at: Path(path.0[..depth].to_vec()).to_string(),
        found: node.type_name(),
    }
}
