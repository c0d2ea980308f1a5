//! Declarative exchange of custom resources over a shared Git repository.
//!
//! A producer owns each resource's `spec` and metadata, a consumer owns its
//! `status`, and both run polling reconciliation loops against the same
//! remote until the observed state converges on the desired state.

pub mod backoff;
pub mod clock;
pub mod document;
pub mod error;
pub mod git;
pub mod handler;
pub mod ownership;
pub mod pipeline;
pub mod policy;
pub mod reconciler;
pub mod repo;
pub mod resource;
pub mod schema;
pub mod sim;
pub mod value;

pub use error::{Error, Result};
pub use ownership::Role;
pub use repo::{Identity, RepoHandle};
pub use resource::{ExchangeResource, Phase, ResourceKey, ResourceMetadata, ResourceStatus};
pub use value::{Path, ValueTree};
