mod common;

use chrono::Utc;
use common::*;
use giter_core::document::{canonical_serialize, parse_resource};
use giter_core::git::{Git, Signature};
use giter_core::ownership::merge_resources;
use giter_core::repo::{archive_dir, init_repo, resource_path, RepoHandle, Verb, DEFAULT_BRANCH};
use giter_core::resource::{transition_phase, ResourceStatus};
use giter_core::clock::Clock;
use giter_core::{Error, ExchangeResource, Phase, Role, ValueTree};

fn status(phase: Phase, observed: i64, result: ValueTree, message: Option<&str>) -> ResourceStatus {
    ResourceStatus {
        phase,
        result,
        observed_generation: observed,
        message: message.map(str::to_string),
        updated_at: None,
    }
}

fn with_status(r: &ExchangeResource, s: ResourceStatus) -> ExchangeResource {
    let mut r = r.clone();
    r.status = Some(s);
    r
}

fn with_action(r: &ExchangeResource, action: &str) -> ExchangeResource {
    let mut r = r.clone();
    r.spec = r.spec.set(&"action".parse().unwrap(), action.into()).unwrap();
    r.metadata.generation += 1;
    r
}

#[test]
fn init_creates_skeleton_commit() {
    let dir = tempfile::tempdir().unwrap();
    let repo = init_repo(&dir.path().join("w"), DEFAULT_BRANCH, producer(), clock()).unwrap();
    let record = repo.commit_record("HEAD").unwrap();
    assert_eq!(record.touched_paths.len(), 4);
    assert!(record.touched_paths.contains(&".giter/policy.yaml".to_string()));
    assert!(record.parents.is_empty());

    let err = init_repo(&dir.path().join("w"), DEFAULT_BRANCH, producer(), clock()).unwrap_err();
    assert!(matches!(err, Error::AlreadyInitialized(_)));
}

#[test]
fn clones_share_initial_tree() {
    let fx = Fixture::new();
    let a = fx.clone_as("a", producer());
    let b = fx.clone_as("b", consumer());
    let tree = |h: &RepoHandle| h.git().run(["rev-parse", "HEAD^{tree}"]).unwrap();
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn fetch_and_read_all() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut c = fx.clone_as("c", consumer());
    assert_eq!(c.fetch().unwrap().new_commits, 0);

    p.commit_resource(&example_task(), Verb::Create).unwrap();
    p.push().unwrap();
    let sync = c.fetch().unwrap();
    assert_eq!(sync.new_commits, 1);
    assert!(sync.fast_forwarded);
    let snap = c.read_all().unwrap();
    assert_eq!(snap.resources.len(), 1);
    assert!(snap.diagnostics.is_empty());
    let got = snap.get(&example_task().key()).unwrap();
    assert_eq!(got.spec.field("action").and_then(ValueTree::as_str), Some("process-video"));

    write_file(c.workdir(), "resources/default/taskexchange/broken.yaml", b"kind: [\n");
    let snap = c.read_all().unwrap();
    assert_eq!(snap.resources.len(), 1);
    assert_eq!(snap.diagnostics.len(), 1);
    assert!(snap.diagnostics[0].path.ends_with("broken.yaml"));
}

#[test]
fn commit_message_and_round_trip() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let record = p.commit_resource(&example_task(), Verb::Create).unwrap();
    assert_eq!(
        record.subject(),
        "giter(producer): create default/taskexchange/example-task gen=1"
    );
    assert_eq!(record.trailer("Giter-Resource"), Some("default/taskexchange/example-task"));
    assert_eq!(record.touched_paths, vec![resource_path(&example_task().key()).unwrap()]);

    let bytes = p
        .git()
        .show_file("HEAD", "resources/default/taskexchange/example-task.yaml")
        .unwrap()
        .unwrap();
    assert_eq!(parse_resource(&bytes).unwrap(), example_task());
}

#[test]
fn consumer_cannot_touch_spec() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    p.commit_resource(&example_task(), Verb::Create).unwrap();
    p.push().unwrap();
    let mut c = fx.clone_as("c", consumer());
    let mut edited = example_task();
    edited.spec = edited
        .spec
        .set(&"action".parse().unwrap(), "delete-video".into())
        .unwrap();
    let err = c.commit_resource(&edited, Verb::Status).unwrap_err();
    assert!(matches!(err, Error::OwnershipViolation { .. }), "{err}");
}

#[test]
fn invalid_spec_is_refused() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut bad = example_task();
    bad.spec = ValueTree::empty_map();
    assert!(matches!(
        p.commit_resource(&bad, Verb::Create),
        Err(Error::ValidationFailed { .. })
    ));
}

#[test]
fn push_without_race_takes_one_attempt() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    p.commit_resource(&example_task(), Verb::Create).unwrap();
    assert_eq!(p.push().unwrap().attempts, 1);
    assert_eq!(p.push().unwrap().attempts, 0);
}

#[test]
fn producer_consumer_race_merges_sections() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    p.commit_resource(&example_task(), Verb::Create).unwrap();
    p.push().unwrap();
    let mut c = fx.clone_as("c", consumer());
    let base = example_task();

    let spec_edit = with_action(&base, "transcode-video");
    let status_edit = with_status(
        &base,
        transition_phase(base.status.as_ref().unwrap(), Phase::Processing, fx.clock.now()).unwrap(),
    );
    let status_edit = {
        let mut r = status_edit;
        r.status.as_mut().unwrap().observed_generation = 1;
        r
    };
    p.commit_resource(&spec_edit, Verb::Update).unwrap();
    c.commit_resource(&status_edit, Verb::Status).unwrap();

    let pr = p.push().unwrap();
    let cr = c.push().unwrap();
    assert!(pr.attempts <= 2 && cr.attempts <= 2);
    assert_eq!(cr.attempts, 2);
    assert_eq!(cr.merged_paths.len(), 1);

    let mut oracle = spec_edit.clone();
    oracle.status = status_edit.status.clone();
    let path = resource_path(&base.key()).unwrap();
    let merged = c.read_worktree_file(&path).unwrap().unwrap();
    assert_eq!(merged, canonical_serialize(&oracle).unwrap());

    p.fetch().unwrap();
    assert_eq!(p.read_worktree_file(&path).unwrap().unwrap(), merged);
}

#[test]
fn producer_producer_race_conflicts() {
    let fx = Fixture::new();
    let mut a = fx.clone_as("a", producer());
    a.commit_resource(&example_task(), Verb::Create).unwrap();
    a.push().unwrap();
    let mut b = fx.clone_as("b", producer());
    a.commit_resource(&with_action(&example_task(), "one"), Verb::Update).unwrap();
    b.commit_resource(&with_action(&example_task(), "two"), Verb::Update).unwrap();
    a.push().unwrap();
    match b.push() {
        Err(Error::MergeConflict(c)) => assert_eq!(c.section, "spec"),
        other => panic!("expected conflict, got {other:?}"),
    }
}

#[test]
fn history_and_archive() {
    let fx = Fixture::new();
    let mut p = fx.clone_as("p", producer());
    let mut c = fx.clone_as("c", consumer());
    let key = example_task().key();
    p.commit_resource(&example_task(), Verb::Create).unwrap();
    p.push().unwrap();
    assert_eq!(p.history(&key).unwrap().len(), 1);
    assert_eq!(p.history(&key).unwrap()[0].verb(), Some(Verb::Create));

    let pending = example_task();
    assert!(matches!(
        p.archive_resource(&pending),
        Err(Error::NotTerminal { .. })
    ));

    fx.tick(5);
    c.fetch().unwrap();
    let done = with_status(&pending, status(Phase::Completed, 1, ValueTree::empty_map(), None));
    c.commit_resource(&done, Verb::Status).unwrap();
    c.push().unwrap();
    assert!(matches!(
        c.archive_resource(&done),
        Err(Error::OwnershipViolation { .. })
    ));

    fx.tick(5);
    p.fetch().unwrap();
    p.archive_resource(&done).unwrap();
    p.push().unwrap();
    let live = resource_path(&key).unwrap();
    assert!(p.read_worktree_file(&live).unwrap().is_none());
    let archived = p.worktree_files(archive_dir(&key).trim_end_matches('/')).unwrap();
    assert_eq!(archived.len(), 1);
    let doc = parse_resource(archived.values().next().unwrap()).unwrap();
    assert_eq!(doc.phase(), Some(Phase::Archived));

    let roles: Vec<Option<Role>> = p.history(&key).unwrap().iter().map(|r| r.role()).collect();
    assert_eq!(roles, vec![Some(Role::Producer), Some(Role::Consumer), Some(Role::Producer)]);

    // second generation, archived again
    fx.tick(60);
    let again = example_task();
    p.commit_resource(&again, Verb::Create).unwrap();
    let done2 = with_status(&again, status(Phase::Failed, 1, ValueTree::empty_map(), Some("boom")));
    let mut tmp = fx.clone_as("c2", consumer());
    p.push().unwrap();
    tmp.fetch().unwrap();
    tmp.commit_resource(&done2, Verb::Status).unwrap();
    tmp.push().unwrap();
    fx.tick(5);
    p.fetch().unwrap();
    p.archive_resource(&done2).unwrap();
    let names: Vec<String> = p
        .worktree_files(archive_dir(&key).trim_end_matches('/'))
        .unwrap()
        .into_keys()
        .collect();
    assert_eq!(names.len(), 2);
    assert!(names[0] < names[1]);
}

#[test]
fn foreign_commits_are_flagged() {
    let fx = Fixture::new();
    let p = fx.clone_as("p", producer());
    let path = resource_path(&example_task().key()).unwrap();
    write_file(p.workdir(), &path, &canonical_serialize(&example_task()).unwrap());
    let git = Git::new(p.workdir());
    git.run(["add", "-A"]).unwrap();
    let sig = Signature {
        name: "Someone".into(),
        email: "someone@example.com".into(),
        when: Utc::now(),
    };
    git.run_signed(["commit", "-q", "-m", "manual edit"], &sig).unwrap();
    let history = p.history(&example_task().key()).unwrap();
    assert_eq!(history.len(), 1);
    assert!(history[0].foreign);
}

#[test]
fn merge_oracle_agrees_with_library() {
    let base = example_task();
    let ours = with_action(&base, "x");
    let theirs = with_status(&base, status(Phase::Processing, 1, ValueTree::empty_map(), None));
    let mut reg = giter_core::schema::SchemaRegistry::default();
    reg.insert(giter_core::schema::SchemaDefinition::parse("t", TASK_SCHEMA.as_bytes()).unwrap())
        .unwrap();
    let merged = merge_resources(Some(&base), &ours, &theirs, &reg).unwrap();
    assert_eq!(merged.spec, ours.spec);
    assert_eq!(merged.status, theirs.status);
}
