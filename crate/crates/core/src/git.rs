//! Thin wrapper over the `git` executable.
//!
//! Every invocation runs with system and global configuration disabled so
//! results do not depend on the host. Author and committer dates are passed
//! explicitly; together with fixed identities this makes commit ids a pure
//! function of content and clock.

use std::ffi::OsStr;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use chrono::{DateTime, Utc};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Signature {
    pub name: String,
    pub email: String,
    pub when: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct Git {
    dir: PathBuf,
}

impl Git {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Git { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn command<I, S>(&self, args: I) -> Command
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let mut cmd = Command::new("git");
        cmd.current_dir(&self.dir)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("GIT_CONFIG_GLOBAL", "/dev/null")
            .env("GIT_TERMINAL_PROMPT", "0")
            .env("LC_ALL", "C")
            .args([
                "-c",
                "commit.gpgsign=false",
                "-c",
                "core.autocrlf=false",
                "-c",
                "core.quotepath=false",
                "-c",
                "advice.detachedHead=false",
            ])
            .args(args);
        cmd
    }

    /// Runs git and returns the raw output whatever the exit status.
    pub fn output<I, S>(&self, args: I) -> Result<Output>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        Ok(self.command(args).stdin(Stdio::null()).output()?)
    }

    pub fn run<I, S>(&self, args: I) -> Result<String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let bytes = self.run_bytes(args)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn run_bytes<I, S>(&self, args: I) -> Result<Vec<u8>>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let args: Vec<S> = args.into_iter().collect();
        let out = self.output(&args)?;
        if out.status.success() {
            Ok(out.stdout)
        } else {
            Err(git_error(&args, &out))
        }
    }

    /// Runs `git commit` style commands with a fixed signature.
    pub fn run_signed<I, S>(&self, args: I, sig: &Signature) -> Result<String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let args: Vec<S> = args.into_iter().collect();
        let date = format!("{} +0000", sig.when.timestamp());
        let out = self
            .command(&args)
            .env("GIT_AUTHOR_NAME", &sig.name)
            .env("GIT_AUTHOR_EMAIL", &sig.email)
            .env("GIT_AUTHOR_DATE", &date)
            .env("GIT_COMMITTER_NAME", &sig.name)
            .env("GIT_COMMITTER_EMAIL", &sig.email)
            .env("GIT_COMMITTER_DATE", &date)
            .stdin(Stdio::null())
            .output()?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(git_error(&args, &out))
        }
    }

    pub fn run_with_input<I, S>(&self, args: I, input: &[u8]) -> Result<Vec<u8>>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let args: Vec<S> = args.into_iter().collect();
        let mut child = self
            .command(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(input)?;
        let out = child.wait_with_output()?;
        if out.status.success() {
            Ok(out.stdout)
        } else {
            Err(git_error(&args, &out))
        }
    }

    /// Resolves a revision to a full object id, or `None` if it does not
    /// exist.
    pub fn rev_parse(&self, rev: &str) -> Result<Option<String>> {
        let out = self.output(["rev-parse", "--verify", "--quiet", &format!("{rev}^{{commit}}")])?;
        Ok(out
            .status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()))
    }

    /// Contents of `path` at `rev`, or `None` when the path is absent there.
    pub fn show_file(&self, rev: &str, path: &str) -> Result<Option<Vec<u8>>> {
        let out = self.output(["cat-file", "blob", &format!("{rev}:{path}")])?;
        Ok(out.status.success().then_some(out.stdout))
    }

    pub fn is_ancestor(&self, ancestor: &str, descendant: &str) -> Result<bool> {
        let out = self.output(["merge-base", "--is-ancestor", ancestor, descendant])?;
        Ok(out.status.success())
    }

    pub fn merge_base(&self, a: &str, b: &str) -> Result<Option<String>> {
        let out = self.output(["merge-base", a, b])?;
        Ok(out
            .status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()))
    }

    /// `(status letter, path)` for each file differing between two trees.
    pub fn diff_names(&self, from: &str, to: &str) -> Result<Vec<(char, String)>> {
        let out = self.run(["diff", "--name-status", "--no-renames", from, to])?;
        Ok(parse_name_status(&out))
    }

    /// Files introduced by a root commit.
    pub fn root_names(&self, commit: &str) -> Result<Vec<(char, String)>> {
        let out = self.run([
            "diff-tree",
            "-r",
            "--root",
            "--no-commit-id",
            "--name-status",
            "--no-renames",
            commit,
        ])?;
        Ok(parse_name_status(&out))
    }
}

fn parse_name_status(out: &str) -> Vec<(char, String)> {
    out.lines()
        .filter_map(|line| {
            let (status, path) = line.split_once('\t')?;
            Some((status.chars().next()?, path.to_string()))
        })
        .collect()
}

fn git_error<S: AsRef<OsStr>>(args: &[S], out: &Output) -> Error {
    Error::Git {
        command: args
            .iter()
            .map(|a| a.as_ref().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(" "),
        stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
    }
}
