#![allow(dead_code)]

pub mod breaches;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use giter_core::clock::{Clock, ManualClock};
use giter_core::document::parse_resource;
use giter_core::repo::{init_bare_remote, RepoHandle, DEFAULT_BRANCH};
use giter_core::{ExchangeResource, Identity, Role};

pub const EXAMPLE_TASK: &str = r#"apiVersion: exchange.gitops/v1alpha1
kind: TaskExchange
metadata:
  name: example-task
  namespace: default
spec:
  action: "process-video"
  parameters:
    inputUrl: "https://example.com/video.mp4"
status:
  phase: "Pending"
  result: {}
"#;

pub const TASK_SCHEMA: &str = r#"apiVersion: exchange.gitops/v1alpha1
kind: TaskExchange
specSchema:
  type: object
  properties:
    action:
      type: string
    parameters:
      type: object
  required: [action]
"#;

pub const TASK_SCHEMA_PATH: &str = ".giter/schemas/taskexchange.schema.yaml";

pub fn example_task() -> ExchangeResource {
    parse_resource(EXAMPLE_TASK.as_bytes()).unwrap()
}

pub fn producer() -> Identity {
    Identity::new("Producer", "producer@example.com", Role::Producer)
}

pub fn consumer() -> Identity {
    Identity::new("Consumer", "consumer@example.com", Role::Consumer)
}

pub fn observer() -> Identity {
    Identity::new("Auditor", "auditor@example.com", Role::Observer)
}

pub fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::starting_at(
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
    ))
}

/// A bare remote with the task schema and an allowlist for the two
/// standard identities committed.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub clock: Arc<ManualClock>,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = clock();
        init_bare_remote(&dir.path().join("remote.git"), DEFAULT_BRANCH, &producer(), clock.as_ref()).unwrap();
        let fixture = Fixture { dir, clock };
        let mut admin = fixture.clone_as("admin", producer());
        let policy = giter_core::policy::TrustPolicy::new()
            .with_identity("producer@example.com", Role::Producer)
            .with_identity("consumer@example.com", Role::Consumer)
            .to_document();
        admin
            .commit_config(
                &[
                    (TASK_SCHEMA_PATH, TASK_SCHEMA.as_bytes()),
                    (giter_core::policy::POLICY_PATH, &policy),
                ],
                "add task schema and identities",
            )
            .unwrap();
        admin.push().unwrap();
        fixture
    }

    pub fn remote(&self) -> String {
        self.dir.path().join("remote.git").display().to_string()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn clone_as(&self, name: &str, identity: Identity) -> RepoHandle {
        let clock: Arc<dyn Clock> = self.clock.clone();
        RepoHandle::clone_from(&self.remote(), &self.path(name), DEFAULT_BRANCH, identity, clock).unwrap()
    }

    pub fn tick(&self, secs: i64) {
        self.clock.advance(std::time::Duration::from_secs(secs as u64));
    }
}

pub fn write_file(root: &Path, rel: &str, bytes: &[u8]) {
    let full = root.join(rel);
    std::fs::create_dir_all(full.parent().unwrap()).unwrap();
    std::fs::write(full, bytes).unwrap();
}
