use std::path::{Path, PathBuf};
use std::time::Duration;

use giter_core::repo::DEFAULT_BRANCH;
use giter_core::{Error, Identity, Role};
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::OutputMode;

const DEFAULT_EMAIL: &str = "giter@localhost";

/// Contents of `~/.config/giter/config.yaml`. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FileConfig {
    pub repo: Option<PathBuf>,
    pub remote: Option<String>,
    pub branch: Option<String>,
    pub identity: Option<FileIdentity>,
    pub interval: Option<String>,
    pub handler: Option<String>,
    pub output: Option<String>,
    pub pipelines: Option<PathBuf>,
    #[serde(default)]
    pub schemas: Vec<PathBuf>,
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileIdentity {
    pub name: Option<String>,
    pub email: Option<String>,
    pub role: Option<String>,
}

impl FileConfig {
    /// Reads `path`. A missing file is only an error when it was asked for
    /// explicitly.
    pub fn load(path: &Path, explicit: bool) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) if bytes.iter().all(u8::is_ascii_whitespace) => Ok(FileConfig::default()),
            Ok(bytes) => serde_yaml::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !explicit => Ok(FileConfig::default()),
            Err(e) => Err(Error::from(e).into()),
        }
    }
}

pub fn default_config_path() -> Option<PathBuf> {
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config/giter/config.yaml"))
}

/// Values given on the command line or in the environment (clap merges
/// those two already).
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub repo: Option<PathBuf>,
    pub remote: Option<String>,
    pub branch: Option<String>,
    pub identity_name: Option<String>,
    pub identity_email: Option<String>,
    pub role: Option<String>,
    pub interval: Option<String>,
    pub output: Option<OutputMode>,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub repo: Option<PathBuf>,
    pub remote: Option<String>,
    pub branch: String,
    pub identity_name: Option<String>,
    pub identity_email: Option<String>,
    pub role: Option<Role>,
    pub interval: Duration,
    pub handler: Option<String>,
    pub output: OutputMode,
    pub pipelines: Option<PathBuf>,
    pub schemas: Vec<PathBuf>,
    pub policy: Option<PathBuf>,
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

pub fn parse_interval(s: &str) -> Result<Duration> {
    let d = humantime::parse_duration(s.trim()).map_err(|e| usage(format!("interval {s:?}: {e}")))?;
    if d.is_zero() {
        return Err(usage("interval must be positive".into()));
    }
    Ok(d)
}

impl CliConfig {
    /// Flags and environment win over the file.
    pub fn resolve(flags: Overrides, file: FileConfig) -> Result<Self> {
        let ident = file.identity.unwrap_or_default();
        let role = match flags.role.or(ident.role) {
            Some(r) => Some(r.parse::<Role>().map_err(usage)?),
            None => None,
        };
        let interval = match flags.interval.or(file.interval) {
            Some(s) => parse_interval(&s)?,
            None => giter_core::reconciler::DEFAULT_INTERVAL,
        };
        let output = match (flags.output, file.output) {
            (Some(o), _) => o,
            (None, Some(s)) => match s.as_str() {
                "human" => OutputMode::Human,
                "json" => OutputMode::Json,
                other => return Err(usage(format!("output mode {other:?}"))),
            },
            (None, None) => OutputMode::Human,
        };
        Ok(CliConfig {
            repo: flags.repo.or(file.repo),
            remote: flags.remote.or(file.remote),
            branch: flags.branch.or(file.branch).unwrap_or_else(|| DEFAULT_BRANCH.to_string()),
            identity_name: flags.identity_name.or(ident.name),
            identity_email: flags.identity_email.or(ident.email),
            role,
            interval,
            handler: file.handler,
            output,
            pipelines: file.pipelines,
            schemas: file.schemas,
            policy: file.policy,
        })
    }

    /// The identity for commands that write. Role and email are required.
    pub fn writer(&self, needed: Role) -> Result<Identity> {
        let role = self.role.ok_or_else(|| usage("a role is required (--role or GITER_ROLE)".into()))?;
        if role != needed {
            return Err(Error::OwnershipViolation {
                role: role.to_string(),
                detail: format!("this command writes as {needed}"),
            }
            .into());
        }
        let email = self
            .identity_email
            .clone()
            .ok_or_else(|| usage("an identity email is required (--identity-email or GITER_IDENTITY_EMAIL)".into()))?;
        Ok(self.identity_with(&email, role))
    }

    /// The identity for read-only commands and setup.
    pub fn reader(&self) -> Identity {
        let email = self.identity_email.clone().unwrap_or_else(|| DEFAULT_EMAIL.to_string());
        self.identity_with(&email, self.role.unwrap_or(Role::Observer))
    }

    fn identity_with(&self, email: &str, role: Role) -> Identity {
        let name = self
            .identity_name
            .clone()
            .unwrap_or_else(|| email.split('@').next().unwrap_or("giter").to_string());
        Identity::new(&name, email, role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: FileConfig = serde_yaml::from_str(
            "branch: dev\ninterval: 30s\nidentity:\n  email: f@x\n  role: consumer\noutput: json\n",
        )
        .unwrap();
        let flags = Overrides {
            branch: Some("main".into()),
            role: Some("producer".into()),
            ..Default::default()
        };
        let c = CliConfig::resolve(flags, file).unwrap();
        assert_eq!(c.branch, "main");
        assert_eq!(c.role, Some(Role::Producer));
        assert_eq!(c.identity_email.as_deref(), Some("f@x"));
        assert_eq!(c.interval, Duration::from_secs(30));
        assert_eq!(c.output, OutputMode::Json);
    }

    #[test]
    fn writer_needs_the_right_role() {
        let c = CliConfig::resolve(
            Overrides {
                role: Some("consumer".into()),
                identity_email: Some("c@x".into()),
                ..Default::default()
            },
            FileConfig::default(),
        )
        .unwrap();
        assert!(c.writer(Role::Consumer).is_ok());
        assert!(matches!(c.writer(Role::Producer), Err(CliError::Core(Error::OwnershipViolation { .. }))));
        let none = CliConfig::resolve(Overrides::default(), FileConfig::default()).unwrap();
        assert!(none.writer(Role::Producer).is_err());
        assert_eq!(none.reader().role, Role::Observer);
    }

    #[test]
    fn intervals() {
        assert_eq!(parse_interval("1m 30s").unwrap(), Duration::from_secs(90));
        assert_eq!(parse_interval("250ms").unwrap(), Duration::from_millis(250));
        assert!(parse_interval("0s").is_err());
        assert!(parse_interval("soon").is_err());
    }

    #[test]
    fn missing_default_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.yaml");
        assert!(FileConfig::load(&p, false).unwrap().repo.is_none());
        assert!(FileConfig::load(&p, true).is_err());
        std::fs::write(&p, "bogus: 1\n").unwrap();
        assert!(FileConfig::load(&p, false).is_err());
    }
}
