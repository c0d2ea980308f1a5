//! The consumer's domain work: the handler contract, a process-based
//! handler speaking JSON over stdin/stdout, and builtin pure handlers.

use std::fmt;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Map, Value};
use wait_timeout::ChildExt;

use crate::clock::Clock;
use crate::document::metadata_tree;
use crate::resource::{ExchangeResource, Phase};
use crate::value::ValueTree;

pub const DEFAULT_HANDLER_TIMEOUT: Duration = Duration::from_secs(60);
pub const MALFORMED_OUTPUT: &str = "malformed handler output";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HandlerOutcome {
    pub phase: Phase,
    pub result: ValueTree,
    pub message: Option<String>,
}

impl HandlerOutcome {
    pub fn completed(result: ValueTree) -> Self {
        HandlerOutcome {
            phase: Phase::Completed,
            result,
            message: None,
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        HandlerOutcome {
            phase: Phase::Failed,
            result: ValueTree::empty_map(),
            message: Some(message.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandlerError {
    #[error("handler timed out after {0:?}")]
    Timeout(Duration),
    #[error("could not start handler: {0}")]
    Spawn(String),
}

pub trait Handler {
    fn handle(&mut self, resource: &ExchangeResource) -> Result<HandlerOutcome, HandlerError>;
}

impl<F> Handler for F
where
    F: FnMut(&ExchangeResource) -> Result<HandlerOutcome, HandlerError>,
{
    fn handle(&mut self, resource: &ExchangeResource) -> Result<HandlerOutcome, HandlerError> {
        self(resource)
    }
}

/// The JSON object written to a handler's stdin.
pub fn handler_input(resource: &ExchangeResource) -> Value {
    json!({
        "apiVersion": resource.api_version,
        "kind": resource.kind,
        "metadata": metadata_tree(&resource.metadata).to_json(),
        "spec": resource.spec.to_json(),
    })
}

/// Interprets a handler's stdout. Anything but a single object with a
/// terminal phase becomes a Failed outcome.
pub fn parse_handler_output(stdout: &[u8]) -> HandlerOutcome {
    let malformed = |why: &str| HandlerOutcome::failed(format!("{MALFORMED_OUTPUT}: {why}"));
    let value: Value = match serde_json::from_slice(stdout) {
        Ok(v) => v,
        Err(e) => return malformed(&e.to_string()),
    };
    let Value::Object(mut obj) = value else {
        return malformed("expected a JSON object");
    };
    let phase = match obj.remove("phase") {
        Some(Value::String(p)) => match p.parse::<Phase>() {
            Ok(p @ (Phase::Completed | Phase::Failed)) => p,
            _ => return malformed(&format!("phase {p:?} is not Completed or Failed")),
        },
        _ => return malformed("missing phase"),
    };
    let result = match obj.remove("result") {
        None | Some(Value::Null) => ValueTree::empty_map(),
        Some(v) => ValueTree::from_json(v),
    };
    let message = match obj.remove("message") {
        None | Some(Value::Null) => None,
        Some(Value::String(m)) => Some(m),
        Some(_) => return malformed("message must be a string"),
    };
    if let Some(extra) = obj.keys().next() {
        return malformed(&format!("unexpected key {extra:?}"));
    }
    let message = match (phase, message) {
        (Phase::Failed, None) => Some("handler reported failure".to_string()),
        (_, m) => m,
    };
    HandlerOutcome {
        phase,
        result,
        message,
    }
}

/// Runs a shell command per resource.
#[derive(Debug, Clone)]
pub struct ExternalHandler {
    pub command: String,
    pub timeout: Duration,
}

impl ExternalHandler {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalHandler {
            command: command.into(),
            timeout: DEFAULT_HANDLER_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Handler for ExternalHandler {
    fn handle(&mut self, resource: &ExchangeResource) -> Result<HandlerOutcome, HandlerError> {
        invoke_external_handler(&self.command, resource, self.timeout)
    }
}

fn kill_group(pid: u32) {
    let _ = Command::new("kill")
        .args(["-KILL", "--", &format!("-{pid}")])
        .stderr(Stdio::null())
        .status();
}

pub fn invoke_external_handler(
    command: &str,
    resource: &ExchangeResource,
    timeout: Duration,
) -> Result<HandlerOutcome, HandlerError> {
    use std::os::unix::process::CommandExt;

    let started = Instant::now();
    let mut child = Command::new("sh")
        .args(["-c", command])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| HandlerError::Spawn(format!("{command}: {e}")))?;

    let input = serde_json::to_vec(&handler_input(resource)).expect("json input");
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        // A handler may exit without reading its input.
        let _ = stdin.write_all(&input);
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(timeout) {
        Ok(Some(status)) => status,
        Ok(None) => {
            kill_group(child.id());
            let _ = child.kill();
            let _ = child.wait();
            warn!("handler {command:?} killed after {:?}", started.elapsed());
            return Err(HandlerError::Timeout(timeout));
        }
        Err(e) => return Err(HandlerError::Spawn(e.to_string())),
    };
    let _ = writer.join();
    let out = reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    let err = String::from_utf8_lossy(&err);
    for line in err.lines().filter(|l| !l.trim().is_empty()) {
        info!("handler stderr: {line}");
    }
    if !status.success() {
        let code = status
            .code()
            .map(|c| c.to_string())
            .unwrap_or_else(|| "signal".into());
        let tail = err.trim();
        return Ok(HandlerOutcome::failed(if tail.is_empty() {
            format!("handler exited with status {code}")
        } else {
            format!("handler exited with status {code}: {tail}")
        }));
    }
    Ok(parse_handler_output(&out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinKind {
    Echo,
    UppercaseAction,
    FailAlways,
    FailFirstN(u32),
    Sleep(u64),
}

impl fmt::Display for BuiltinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuiltinKind::Echo => f.write_str("echo"),
            BuiltinKind::UppercaseAction => f.write_str("uppercase-action"),
            BuiltinKind::FailAlways => f.write_str("fail-always"),
            BuiltinKind::FailFirstN(n) => write!(f, "fail-first-n({n})"),
            BuiltinKind::Sleep(ms) => write!(f, "sleep({ms})"),
        }
    }
}

impl FromStr for BuiltinKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let arg = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .map(|n| n.trim().parse::<u64>().map_err(|e| format!("{s}: {e}")))
        };
        match s {
            "echo" => Ok(BuiltinKind::Echo),
            "uppercase-action" => Ok(BuiltinKind::UppercaseAction),
            "fail-always" => Ok(BuiltinKind::FailAlways),
            _ => {
                if let Some(n) = arg("fail-first-n(") {
                    let n = u32::try_from(n?).map_err(|e| e.to_string())?;
                    Ok(BuiltinKind::FailFirstN(n))
                } else if let Some(ms) = arg("sleep(") {
                    Ok(BuiltinKind::Sleep(ms?))
                } else {
                    Err(format!("unknown builtin handler {s:?}"))
                }
            }
        }
    }
}

/// What a builtin handler produces for `spec`, ignoring failure injection.
pub fn builtin_result(kind: BuiltinKind, spec: &ValueTree) -> ValueTree {
    match kind {
        BuiltinKind::UppercaseAction => match spec.field("action").and_then(ValueTree::as_str) {
            Some(action) => {
                let mut out = spec.clone();
                if let ValueTree::Map(m) = &mut out {
                    m.insert("action".into(), action.to_uppercase().into());
                }
                out
            }
            None => spec.clone(),
        },
        _ => spec.clone(),
    }
}

pub struct BuiltinHandler {
    kind: BuiltinKind,
    invocations: u32,
    clock: Option<Arc<dyn Clock>>,
}

impl BuiltinHandler {
    pub fn new(kind: BuiltinKind) -> Self {
        BuiltinHandler {
            kind,
            invocations: 0,
            clock: None,
        }
    }

    /// Clock used by `sleep(ms)`; without one it sleeps for real.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn kind(&self) -> BuiltinKind {
        self.kind
    }

    pub fn invocations(&self) -> u32 {
        self.invocations
    }
}

impl Handler for BuiltinHandler {
    fn handle(&mut self, resource: &ExchangeResource) -> Result<HandlerOutcome, HandlerError> {
        self.invocations += 1;
        match self.kind {
            BuiltinKind::FailAlways => return Ok(HandlerOutcome::failed("fail-always")),
            BuiltinKind::FailFirstN(n) if self.invocations <= n => {
                return Ok(HandlerOutcome::failed(format!(
                    "fail-first-n: invocation {} of {n}",
                    self.invocations
                )))
            }
            BuiltinKind::Sleep(ms) => {
                let d = Duration::from_millis(ms);
                match &self.clock {
                    Some(c) => c.sleep(d),
                    None => thread::sleep(d),
                }
            }
            _ => {}
        }
        Ok(HandlerOutcome::completed(builtin_result(self.kind, &resource.spec)))
    }
}

/// JSON object form of an outcome, as a handler would print it.
pub fn outcome_json(outcome: &HandlerOutcome) -> Value {
    let mut m = Map::new();
    m.insert("phase".into(), Value::String(outcome.phase.to_string()));
    m.insert("result".into(), outcome.result.to_json());
    if let Some(msg) = &outcome.message {
        m.insert("message".into(), Value::String(msg.clone()));
    }
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_task() -> ExchangeResource {
        let spec = ValueTree::from_json(json!({
            "action": "process-video",
            "parameters": {"inputUrl": "https://example.com/video.mp4"}
        }));
        ExchangeResource::new("exchange.gitops/v1alpha1", "TaskExchange", "example-task", spec)
    }

    #[test]
    fn completed_output() {
        let out = parse_handler_output(br#"{"phase":"Completed","result":{"ok":true}}"#);
        assert_eq!(out.phase, Phase::Completed);
        assert_eq!(out.result, ValueTree::from_json(json!({"ok": true})));
    }

    #[test]
    fn invalid_json_is_failed() {
        let out = parse_handler_output(b"{not json");
        assert_eq!(out.phase, Phase::Failed);
        assert!(out.message.unwrap().starts_with(MALFORMED_OUTPUT));
        let out = parse_handler_output(br#"{"phase":"Processing"}"#);
        assert_eq!(out.phase, Phase::Failed);
    }

    #[test]
    fn builtin_names_round_trip() {
        for s in ["echo", "uppercase-action", "fail-always", "fail-first-n(2)", "sleep(150)"] {
            assert_eq!(s.parse::<BuiltinKind>().unwrap().to_string(), s);
        }
        assert!("fail-first-n(x)".parse::<BuiltinKind>().is_err());
        assert!("shout".parse::<BuiltinKind>().is_err());
    }

    #[test]
    fn uppercase_action() {
        let r = example_task();
        let out = BuiltinHandler::new(BuiltinKind::UppercaseAction).handle(&r).unwrap();
        assert_eq!(out.result.field("action").and_then(ValueTree::as_str), Some("PROCESS-VIDEO"));
        assert_eq!(out.result.field("parameters"), r.spec.field("parameters"));
    }

    #[test]
    fn fail_first_n_then_echo() {
        let r = example_task();
        let mut h = BuiltinHandler::new(BuiltinKind::FailFirstN(2));
        assert_eq!(h.handle(&r).unwrap().phase, Phase::Failed);
        assert_eq!(h.handle(&r).unwrap().phase, Phase::Failed);
        let third = h.handle(&r).unwrap();
        assert_eq!(third, HandlerOutcome::completed(r.spec.clone()));
    }

    #[test]
    fn input_shape() {
        let input = handler_input(&example_task());
        let keys: Vec<&String> = input.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["apiVersion", "kind", "metadata", "spec"]);
        assert_eq!(input["metadata"]["name"], "example-task");
    }
}
