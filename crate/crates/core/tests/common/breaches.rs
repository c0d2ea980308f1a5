//! Hand-made commits that break the contract in exactly one way each.

use chrono::{TimeZone, Utc};
use giter_core::document::canonical_serialize;
use giter_core::git::Signature;
use giter_core::policy::FindingCode;
use giter_core::repo::{resource_path, RepoHandle};
use giter_core::resource::ResourceStatus;
use giter_core::{ExchangeResource, Phase, ValueTree};

use super::write_file;

pub type Inject = Box<dyn Fn(&RepoHandle)>;

/// Commits `doc` at its live path bypassing every library check.
pub fn craft(handle: &RepoHandle, doc: &ExchangeResource, email: &str, role: Option<&str>) {
    let path = resource_path(&doc.key()).unwrap();
    write_file(handle.workdir(), &path, &canonical_serialize(doc).unwrap());
    let git = handle.git();
    git.run(["add", "-A"]).unwrap();
    let sig = Signature {
        name: "Crafted".into(),
        email: email.into(),
        when: Utc.with_ymd_and_hms(2025, 2, 1, 0, 0, 0).unwrap(),
    };
    let mut args = vec!["commit", "-q", "-m", "crafted change"];
    let trailer;
    if let Some(role) = role {
        trailer = format!("Giter-Role: {role}\nGiter-Resource: {}", doc.key());
        args.extend(["-m", &trailer]);
    }
    git.run_signed(args, &sig).unwrap();
}

/// The six breaches against `current`, which must be Completed at
/// generation 2 or later.
pub fn six_breaches(current: &ExchangeResource, producer: &str, consumer: &str) -> Vec<(FindingCode, Inject)> {
    let mut out: Vec<(FindingCode, Inject)> = Vec::new();
    let (p, c) = (producer.to_string(), consumer.to_string());

    let (d, who) = (current.clone(), c.clone());
    out.push((
        FindingCode::RoleSectionBreach,
        Box::new(move |h| {
            let mut d = d.clone();
            d.spec = d.spec.set(&"action".parse().unwrap(), "delete".into()).unwrap();
            craft(h, &d, &who, Some("consumer"));
        }),
    ));
    let d = current.clone();
    out.push((
        FindingCode::UnknownIdentity,
        Box::new(move |h| {
            let mut d = d.clone();
            d.status.as_mut().unwrap().message = Some("noted".into());
            craft(h, &d, "stranger@example.com", Some("consumer"));
        }),
    ));
    let (d, who) = (current.clone(), p.clone());
    out.push((
        FindingCode::ForeignCommit,
        Box::new(move |h| {
            let mut d = d.clone();
            d.metadata.labels.insert("team".into(), "media".into());
            craft(h, &d, &who, None);
        }),
    ));
    let (d, who) = (current.clone(), p.clone());
    out.push((
        FindingCode::GenerationRegression,
        Box::new(move |h| {
            let mut d = d.clone();
            d.spec = d.spec.set(&"action".parse().unwrap(), "rewind".into()).unwrap();
            d.metadata.generation -= 1;
            craft(h, &d, &who, Some("producer"));
        }),
    ));
    let (d, who) = (current.clone(), c);
    out.push((
        FindingCode::IllegalPhaseTransition,
        Box::new(move |h| {
            let mut d = d.clone();
            d.status = Some(ResourceStatus {
                phase: Phase::Failed,
                result: ValueTree::empty_map(),
                observed_generation: d.metadata.generation,
                message: Some("changed my mind".into()),
                updated_at: None,
            });
            craft(h, &d, &who, Some("consumer"));
        }),
    ));
    let (d, who) = (current.clone(), p);
    out.push((
        FindingCode::ImmutableFieldChange,
        Box::new(move |h| {
            let mut d = d.clone();
            d.api_version = "exchange.gitops/v1beta1".into();
            craft(h, &d, &who, Some("producer"));
        }),
    ));
    out
}
