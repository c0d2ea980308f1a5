//! Multi-stage chaining: completed sources project status fields into the
//! spec of target resources.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use log::{debug, info};
use serde::Serialize;

use crate::document::{parse_document, serialize_document, status_tree};
use crate::error::{Error, Result};
use crate::ownership::Role;
use crate::reconciler::{seeded, ReconcileReport};
use crate::repo::{resource_path, RepoHandle, Verb};
use crate::resource::{validate_identifier, validate_kind, ExchangeResource, Phase, ResourceKey};
use crate::schema::{validate_resource, SchemaRegistry};
use crate::value::{Path, ValueTree};

pub const PIPELINES_PATH: &str = ".giter/pipelines.yaml";
pub const SOURCE_ANNOTATION: &str = "giter.io/source";
pub const SOURCE_GENERATION_ANNOTATION: &str = "giter.io/source-generation";
const NAME_PLACEHOLDER: &str = "{source.name}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceSelector {
    pub namespace: String,
    pub kind: String,
    pub name: Option<String>,
    pub labels: BTreeMap<String, String>,
}

impl SourceSelector {
    pub fn matches(&self, r: &ExchangeResource) -> bool {
        r.metadata.namespace == self.namespace
            && r.kind.eq_ignore_ascii_case(&self.kind)
            && self.name.as_ref().is_none_or(|n| *n == r.metadata.name)
            && self
                .labels
                .iter()
                .all(|(k, v)| r.metadata.labels.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetTemplate {
    pub namespace: String,
    pub kind: String,
    pub name_template: String,
}

impl TargetTemplate {
    pub fn name_for(&self, source: &ExchangeResource) -> String {
        self.name_template.replace(NAME_PLACEHOLDER, &source.metadata.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mapping {
    /// Relative to the source status.
    pub from: Path,
    /// Relative to the target spec.
    pub to: Path,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipelineBinding {
    pub source: SourceSelector,
    pub target: TargetTemplate,
    pub mappings: Vec<Mapping>,
}

fn status_relative(path: Path) -> Path {
    path.strip_prefix(&Path::key("status")).unwrap_or(path)
}

fn str_field<'a>(map: &'a BTreeMap<String, ValueTree>, key: &str, at: &str) -> Result<Option<&'a str>> {
    match map.get(key) {
        None | Some(ValueTree::Null) => Ok(None),
        Some(ValueTree::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Pipeline(format!("{at}.{key} must be a string, found {}", other.type_name()))),
    }
}

fn closed_map<'a>(tree: &'a ValueTree, at: &str, allowed: &[&str]) -> Result<&'a BTreeMap<String, ValueTree>> {
    let map = tree
        .as_map()
        .ok_or_else(|| Error::Pipeline(format!("{at} must be a map")))?;
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Pipeline(format!("unknown key {at}.{k}")));
    }
    Ok(map)
}

fn parse_binding(tree: &ValueTree, at: &str) -> Result<PipelineBinding> {
    let top = closed_map(tree, at, &["source", "target", "mappings"])?;
    let missing = |k: &str| Error::Pipeline(format!("{at}.{k} is required"));

    let src_at = format!("{at}.source");
    let src = closed_map(top.get("source").ok_or_else(|| missing("source"))?, &src_at, &["namespace", "kind", "name", "labels"])?;
    let labels = match src.get("labels") {
        None | Some(ValueTree::Null) => BTreeMap::new(),
        Some(ValueTree::Map(m)) => m
            .iter()
            .map(|(k, v)| {
                v.as_str()
                    .map(|s| (k.clone(), s.to_string()))
                    .ok_or_else(|| Error::Pipeline(format!("{src_at}.labels.{k} must be a string")))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(Error::Pipeline(format!("{src_at}.labels must be a map"))),
    };
    let source = SourceSelector {
        namespace: str_field(src, "namespace", &src_at)?.unwrap_or(crate::resource::DEFAULT_NAMESPACE).to_string(),
        kind: str_field(src, "kind", &src_at)?.ok_or_else(|| missing("source.kind"))?.to_string(),
        name: str_field(src, "name", &src_at)?.map(str::to_string),
        labels,
    };

    let tgt_at = format!("{at}.target");
    let tgt = closed_map(top.get("target").ok_or_else(|| missing("target"))?, &tgt_at, &["namespace", "kind", "nameTemplate"])?;
    let target = TargetTemplate {
        namespace: str_field(tgt, "namespace", &tgt_at)?.unwrap_or(crate::resource::DEFAULT_NAMESPACE).to_string(),
        kind: str_field(tgt, "kind", &tgt_at)?.ok_or_else(|| missing("target.kind"))?.to_string(),
        name_template: str_field(tgt, "nameTemplate", &tgt_at)?.unwrap_or(NAME_PLACEHOLDER).to_string(),
    };

    let items = match top.get("mappings") {
        Some(ValueTree::List(items)) => items,
        _ => return Err(missing("mappings")),
    };
    let mut mappings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let m_at = format!("{at}.mappings[{i}]");
        let m = closed_map(item, &m_at, &["from", "to"])?;
        let path = |k: &str| -> Result<Path> {
            str_field(m, k, &m_at)?
                .ok_or_else(|| Error::Pipeline(format!("{m_at}.{k} is required")))?
                .parse()
                .map_err(|e: crate::error::PathError| Error::Pipeline(format!("{m_at}.{k}: {e}")))
        };
        let to = path("to")?;
        if to.is_root() {
            return Err(Error::Pipeline(format!("{m_at}.to must not be empty")));
        }
        mappings.push(Mapping {
            from: status_relative(path("from")?),
            to,
        });
    }
    Ok(PipelineBinding {
        source,
        target,
        mappings,
    })
}

fn binding_tree(b: &PipelineBinding) -> ValueTree {
    let s = |v: &str| ValueTree::from(v);
    let mut source = BTreeMap::from([
        ("namespace".to_string(), s(&b.source.namespace)),
        ("kind".to_string(), s(&b.source.kind)),
    ]);
    if let Some(name) = &b.source.name {
        source.insert("name".into(), s(name));
    }
    if !b.source.labels.is_empty() {
        source.insert(
            "labels".into(),
            ValueTree::Map(b.source.labels.iter().map(|(k, v)| (k.clone(), s(v))).collect()),
        );
    }
    let target = BTreeMap::from([
        ("namespace".to_string(), s(&b.target.namespace)),
        ("kind".to_string(), s(&b.target.kind)),
        ("nameTemplate".to_string(), s(&b.target.name_template)),
    ]);
    let mappings = b
        .mappings
        .iter()
        .map(|m| {
            ValueTree::Map(BTreeMap::from([
                ("from".to_string(), s(&format!("status.{}", m.from))),
                ("to".to_string(), s(&m.to.to_string())),
            ]))
        })
        .collect();
    ValueTree::Map(BTreeMap::from([
        ("source".to_string(), ValueTree::Map(source)),
        ("target".to_string(), ValueTree::Map(target)),
        ("mappings".to_string(), ValueTree::List(mappings)),
    ]))
}

/// A validated binding set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Bindings {
    pub bindings: Vec<PipelineBinding>,
}

impl Bindings {
    /// Checks binding invariants: non-empty mappings, a registered target
    /// schema, no self-loop and an acyclic kind graph.
    pub fn new(bindings: Vec<PipelineBinding>, registry: &SchemaRegistry) -> Result<Self> {
        for (i, b) in bindings.iter().enumerate() {
            let at = format!("bindings[{i}]");
            if b.mappings.is_empty() {
                return Err(Error::Pipeline(format!("{at} has no mappings")));
            }
            validate_kind(&b.source.kind).map_err(|e| Error::Pipeline(format!("{at}: {e}")))?;
            validate_kind(&b.target.kind).map_err(|e| Error::Pipeline(format!("{at}: {e}")))?;
            validate_identifier("namespace", &b.source.namespace).map_err(|e| Error::Pipeline(format!("{at}: {e}")))?;
            validate_identifier("namespace", &b.target.namespace).map_err(|e| Error::Pipeline(format!("{at}: {e}")))?;
            if registry.get(&b.target.kind).is_none() {
                return Err(Error::Pipeline(format!("{at}: target kind {} has no schema", b.target.kind)));
            }
            if b.source.kind.eq_ignore_ascii_case(&b.target.kind) {
                return Err(Error::Cycle(format!("{at} targets its own kind {}", b.source.kind)));
            }
        }
        let set = Bindings { bindings };
        if let Some(cycle) = set.find_cycle() {
            return Err(Error::Cycle(cycle.join(" -> ")));
        }
        Ok(set)
    }

    pub fn parse(bytes: &[u8], registry: &SchemaRegistry) -> Result<Self> {
        let tree = parse_document(bytes)?;
        if tree == ValueTree::Null {
            return Bindings::new(Vec::new(), registry);
        }
        let top = closed_map(&tree, "pipelines", &["bindings"])?;
        let items = match top.get("bindings") {
            None | Some(ValueTree::Null) => Vec::new(),
            Some(ValueTree::List(items)) => items
                .iter()
                .enumerate()
                .map(|(i, t)| parse_binding(t, &format!("bindings[{i}]")))
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::Pipeline("bindings must be a list".into())),
        };
        Bindings::new(items, registry)
    }

    pub fn to_document(&self) -> Vec<u8> {
        let list = self.bindings.iter().map(binding_tree).collect();
        serialize_document(&ValueTree::Map(BTreeMap::from([("bindings".to_string(), ValueTree::List(list))])))
            .expect("bindings serialize")
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    /// A kind cycle in the binding graph, if any, as a closed walk.
    fn find_cycle(&self) -> Option<Vec<String>> {
        let mut edges: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for b in &self.bindings {
            edges
                .entry(b.source.kind.to_lowercase())
                .or_default()
                .insert(b.target.kind.to_lowercase());
        }
        fn visit(
            node: &str,
            edges: &BTreeMap<String, BTreeSet<String>>,
            stack: &mut Vec<String>,
            done: &mut BTreeSet<String>,
        ) -> Option<Vec<String>> {
            if let Some(pos) = stack.iter().position(|n| n == node) {
                let mut cycle = stack[pos..].to_vec();
                cycle.push(node.to_string());
                return Some(cycle);
            }
            if done.contains(node) {
                return None;
            }
            stack.push(node.to_string());
            for next in edges.get(node).into_iter().flatten() {
                if let Some(c) = visit(next, edges, stack, done) {
                    return Some(c);
                }
            }
            stack.pop();
            done.insert(node.to_string());
            None
        }
        let mut done = BTreeSet::new();
        edges
            .keys()
            .find_map(|k| visit(k, &edges, &mut Vec::new(), &mut done))
    }
}

/// Loads the bindings file from the working tree; absent file = no
/// bindings.
pub fn load_bindings(handle: &RepoHandle) -> Result<Bindings> {
    let registry = handle.load_schemas()?;
    match handle.read_worktree_file(PIPELINES_PATH)? {
        Some(bytes) => Bindings::parse(&bytes, &registry),
        None => Ok(Bindings::default()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetWrite {
    pub source: ResourceKey,
    pub resource: ExchangeResource,
    pub created: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BindingDiagnostic {
    pub binding: usize,
    pub source: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Evaluation {
    pub writes: Vec<TargetWrite>,
    /// Matching completed sources whose target is already up to date.
    pub current: Vec<ResourceKey>,
    /// Bindings skipped for a source (dangling `from`, fan-in).
    pub diagnostics: Vec<BindingDiagnostic>,
    /// Target writes refused by the target schema.
    pub errors: Vec<Error>,
}

fn fires(r: &ExchangeResource) -> bool {
    matches!(&r.status, Some(s) if s.phase == Phase::Completed && s.observed_generation == r.metadata.generation)
}

fn status_value(r: &ExchangeResource, path: &Path) -> Option<ValueTree> {
    let tree = status_tree(r.status.as_ref()?);
    tree.get(path).ok().flatten().cloned()
}

/// Computes target writes for every binding and completed source.
pub fn evaluate_bindings(
    state: &BTreeMap<String, ExchangeResource>,
    bindings: &Bindings,
    registry: &SchemaRegistry,
    now: DateTime<Utc>,
) -> Evaluation {
    let mut eval = Evaluation::default();
    let mut claimed: BTreeMap<ResourceKey, ResourceKey> = BTreeMap::new();
    for (index, binding) in bindings.bindings.iter().enumerate() {
        for source in state.values().filter(|r| binding.source.matches(r) && fires(r)) {
            let source_key = source.key();
            let diag = |message: String| BindingDiagnostic {
                binding: index,
                source: source_key.to_string(),
                message,
            };
            let target_key = ResourceKey::new(
                &binding.target.namespace,
                &binding.target.kind,
                &binding.target.name_for(source),
            );
            let Ok(target_path) = resource_path(&target_key) else {
                eval.diagnostics.push(diag(format!("target name {:?} is not a valid identifier", target_key.name)));
                continue;
            };
            if let Some(previous) = claimed.get(&target_key) {
                if *previous != source_key {
                    eval.diagnostics.push(diag(format!("{target_key} is already fed by {previous}")));
                    continue;
                }
            }
            let existing = state.get(&target_path);
            let stamp = source.metadata.generation.to_string();
            if let Some(t) = existing {
                if t.metadata.annotations.get(SOURCE_ANNOTATION) == Some(&source_key.to_string())
                    && t.metadata.annotations.get(SOURCE_GENERATION_ANNOTATION) == Some(&stamp)
                {
                    eval.current.push(source_key.clone());
                    continue;
                }
            }
            let mut spec = existing.map(|t| t.spec.clone()).unwrap_or_else(ValueTree::empty_map);
            let mut dangling = None;
            for m in &binding.mappings {
                let Some(value) = status_value(source, &m.from) else {
                    dangling = Some(format!("status.{} is absent on {source_key}", m.from));
                    break;
                };
                match spec.set(&m.to, value) {
                    Ok(next) => spec = next,
                    Err(e) => {
                        dangling = Some(format!("cannot write spec.{}: {e}", m.to));
                        break;
                    }
                }
            }
            if let Some(message) = dangling {
                eval.diagnostics.push(diag(message));
                continue;
            }
            let (mut resource, created) = match existing {
                Some(t) => {
                    let mut next = t.clone();
                    if next.spec != spec {
                        next.spec = spec;
                        next.metadata.generation += 1;
                    }
                    (next, false)
                }
                None => {
                    let api_version = registry
                        .get(&binding.target.kind)
                        .map(|d| d.api_version.clone())
                        .unwrap_or_default();
                    let r = ExchangeResource::new(&api_version, &binding.target.kind, &target_key.name, spec);
                    let mut r = seeded(&r, now);
                    r.metadata.namespace = target_key.namespace.clone();
                    (r, true)
                }
            };
            resource
                .metadata
                .annotations
                .insert(SOURCE_ANNOTATION.into(), source_key.to_string());
            resource
                .metadata
                .annotations
                .insert(SOURCE_GENERATION_ANNOTATION.into(), stamp);
            let report = validate_resource(&resource, registry);
            if !report.is_valid() {
                eval.errors.push(Error::Mapping {
                    target: target_key.to_string(),
                    summary: report.summary(),
                });
                continue;
            }
            claimed.insert(target_key, source_key.clone());
            eval.writes.push(TargetWrite {
                source: source_key,
                resource,
                created,
            });
        }
    }
    eval
}

/// One pipeline cycle: evaluate bindings against the fetched state, commit
/// each target write and push once.
pub fn pipeline_reconcile_once(handle: &mut RepoHandle, bindings: &Bindings) -> Result<ReconcileReport> {
    use crate::reconciler::Action;

    let mut report = ReconcileReport::new(handle.now());
    if handle.role() != Role::Producer {
        return Err(Error::OwnershipViolation {
            role: handle.role().to_string(),
            detail: "pipelines write specs and need the producer role".into(),
        });
    }
    let online = match handle.sync() {
        Ok(_) => true,
        Err(Error::RemoteUnavailable(why)) => {
            report.diagnostics.push(format!("remote unavailable: {why}"));
            false
        }
        Err(e) => return Err(e),
    };
    let snapshot = handle.read_all()?;
    if !online {
        for r in snapshot.resources.values() {
            if bindings.bindings.iter().any(|b| b.source.matches(r)) {
                report.entries.push(crate::reconciler::ReportEntry {
                    resource: r.key().to_string(),
                    action: Action::SkippedOffline,
                    detail: None,
                });
            }
        }
        return Ok(report);
    }
    let registry = handle.load_schemas()?;
    let eval = evaluate_bindings(&snapshot.resources, bindings, &registry, handle.now());
    for d in &eval.diagnostics {
        report.diagnostics.push(format!("binding {} on {}: {}", d.binding, d.source, d.message));
    }
    for e in &eval.errors {
        report.diagnostics.push(e.to_string());
    }
    for key in &eval.current {
        report.entries.push(crate::reconciler::ReportEntry {
            resource: key.to_string(),
            action: Action::SkippedCurrent,
            detail: None,
        });
    }
    for w in &eval.writes {
        let verb = if w.created { Verb::Create } else { Verb::Update };
        handle.commit_resource(&w.resource, verb)?;
        debug!("{} -> {}", w.source, w.resource.key());
        report.entries.push(crate::reconciler::ReportEntry {
            resource: w.resource.key().to_string(),
            action: if w.created { Action::Created } else { Action::SpecUpdated },
            detail: Some(format!("from {} gen {}", w.source, w.resource.metadata.annotations[SOURCE_GENERATION_ANNOTATION])),
        });
    }
    if !eval.writes.is_empty() {
        match handle.push() {
            Ok(p) => {
                report.push_attempts = p.attempts;
                report.max_push_attempts = p.attempts;
            }
            Err(Error::RemoteUnavailable(why)) => report.diagnostics.push(format!("push deferred: {why}")),
            Err(e) => return Err(e),
        }
        info!("pipeline wrote {} target(s)", eval.writes.len());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SchemaDefinition;

    fn registry(kinds: &[&str]) -> SchemaRegistry {
        let mut reg = SchemaRegistry::default();
        for kind in kinds {
            let doc = format!(
                "apiVersion: stages/v1\nkind: {kind}\nspecSchema:\n  type: object\n  properties:\n    inputUrl:\n      type: string\n"
            );
            reg.insert(SchemaDefinition::parse("x", doc.as_bytes()).unwrap()).unwrap();
        }
        reg
    }

    fn binding(from: &str, to: &str) -> PipelineBinding {
        PipelineBinding {
            source: SourceSelector {
                namespace: "default".into(),
                kind: from.into(),
                name: None,
                labels: BTreeMap::new(),
            },
            target: TargetTemplate {
                namespace: "default".into(),
                kind: to.into(),
                name_template: NAME_PLACEHOLDER.into(),
            },
            mappings: vec![Mapping {
                from: "result.outputUrl".parse().unwrap(),
                to: "inputUrl".parse().unwrap(),
            }],
        }
    }

    #[test]
    fn cycles_and_self_loops_rejected() {
        let reg = registry(&["A", "B", "C"]);
        assert!(matches!(Bindings::new(vec![binding("A", "A")], &reg), Err(Error::Cycle(_))));
        let cyclic = vec![binding("A", "B"), binding("B", "C"), binding("C", "A")];
        match Bindings::new(cyclic, &reg) {
            Err(Error::Cycle(c)) => assert_eq!(c, "a -> b -> c -> a"),
            other => panic!("{other:?}"),
        }
        assert!(Bindings::new(vec![binding("A", "B"), binding("B", "C")], &reg).is_ok());
    }

    #[test]
    fn target_needs_schema_and_mappings() {
        let reg = registry(&["A"]);
        assert!(matches!(Bindings::new(vec![binding("A", "B")], &reg), Err(Error::Pipeline(_))));
        let reg = registry(&["A", "B"]);
        let mut b = binding("A", "B");
        b.mappings.clear();
        assert!(Bindings::new(vec![b], &reg).is_err());
    }

    #[test]
    fn document_round_trip() {
        let reg = registry(&["A", "B"]);
        let set = Bindings::new(vec![binding("A", "B")], &reg).unwrap();
        let doc = set.to_document();
        assert_eq!(Bindings::parse(&doc, &reg).unwrap(), set);
        let text = String::from_utf8(doc).unwrap();
        assert!(text.contains("from: status.result.outputUrl"), "{text}");
    }

    #[test]
    fn from_accepts_optional_status_prefix() {
        let reg = registry(&["A", "B"]);
        let doc = b"bindings:\n- source: {kind: A}\n  target: {kind: B}\n  mappings:\n  - {from: result.outputUrl, to: inputUrl}\n";
        let parsed = Bindings::parse(doc, &reg).unwrap();
        assert_eq!(parsed, Bindings::new(vec![binding("A", "B")], &reg).unwrap());
    }
}
