//! Newline-delimited JSON protocol for an out-of-process ABE daemon.
//!
//! One request line in, one response line out, in order. Binary fields are
//! standard base64. Every response carries `ok`; failures carry `error`.
//!
//! ```text
//! {"op":"setup","seed":7}                                  -> {"ok":true}
//! {"op":"keygen","principal":"p","attrs":["a=1"]}          -> {"ok":true,"user_key_b64":"..."}
//! {"op":"encrypt","policy":"(a=1 AND b=2)","key_b64":".."} -> {"ok":true,"ck_b64":"..."}
//! {"op":"decrypt","user_key_b64":"..","ck_b64":".."}       -> {"ok":true,"key_b64":"..."}
//! anything else                                            -> {"ok":false,"error":"unknown_op"}
//! ```

use std::collections::BTreeSet;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::DataKey;
use crate::policy::{Attribute, Policy};

use super::ck::{BackendTag, CiphertextKey, CkBody};
use super::reference::{self, MasterSecret};
use super::{epoch_of, AbeBackend, AbeError, KeyMaterial, UserAttributeKey};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

pub const ERR_UNKNOWN_OP: &str = "unknown_op";
pub const ERR_NOT_SATISFIED: &str = "not_satisfied";
pub const ERR_NOT_SETUP: &str = "not_setup";

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("failed to spawn daemon: {0}")]
    Spawn(io::Error),
    #[error("daemon exited: {0}")]
    ProcessExit(String),
    #[error("malformed daemon response: {0}")]
    MalformedResponse(String),
    #[error("daemon did not answer within {0:?}")]
    Timeout(Duration),
    #[error("daemon error: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DaemonRequest {
    Setup {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Keygen {
        principal: String,
        attrs: Vec<String>,
    },
    Encrypt {
        policy: String,
        key_b64: String,
    },
    Decrypt {
        user_key_b64: String,
        ck_b64: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaemonResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_key_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ck_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_b64: Option<String>,
}

impl DaemonResponse {
    fn ok() -> Self {
        Self {
            ok: true,
            ..Self::default()
        }
    }

    fn err(error: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(error.into()),
            ..Self::default()
        }
    }

    fn field(&self, value: &Option<String>, name: &str) -> Result<Vec<u8>, DaemonError> {
        let text = value
            .as_ref()
            .ok_or_else(|| DaemonError::MalformedResponse(format!("missing {name}")))?;
        STANDARD
            .decode(text)
            .map_err(|e| DaemonError::MalformedResponse(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl DaemonConfig {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// Handle to one daemon process. One request is in flight at a time.
pub struct DaemonClient {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
}

impl DaemonClient {
    pub fn spawn(config: &DaemonConfig) -> Result<Self, DaemonError> {
        let mut child = Command::new(&config.program)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(DaemonError::Spawn)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout: config.timeout,
        })
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn exit_error(&mut self) -> DaemonError {
        // Give the reaper a moment; the pipe may close slightly before exit.
        for _ in 0..50 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return DaemonError::ProcessExit(status.to_string());
            }
            thread::sleep(Duration::from_millis(10));
        }
        DaemonError::ProcessExit("stdout closed".into())
    }

    /// Sends one raw line and waits for one raw line back.
    pub fn roundtrip_line(&mut self, line: &str) -> Result<String, DaemonError> {
        let write = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush());
        if write.is_err() {
            return Err(self.exit_error());
        }
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(DaemonError::MalformedResponse(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(DaemonError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(self.exit_error()),
        }
    }

    pub fn roundtrip(&mut self, request: &DaemonRequest) -> Result<DaemonResponse, DaemonError> {
        let line = serde_json::to_string(request).expect("requests serialize");
        let reply = self.roundtrip_line(&line)?;
        serde_json::from_str(&reply).map_err(|e| DaemonError::MalformedResponse(format!("{e}: {reply:?}")))
    }
}

impl Drop for DaemonClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Routes key encapsulation to a daemon process.
pub struct DaemonBackend {
    client: Mutex<DaemonClient>,
}

impl DaemonBackend {
    /// Spawns the daemon and runs `setup`.
    pub fn spawn(config: &DaemonConfig, seed: Option<u64>) -> Result<Self, AbeError> {
        let mut client = DaemonClient::spawn(config)?;
        Self::expect_ok(client.roundtrip(&DaemonRequest::Setup { seed })?)?;
        Ok(Self {
            client: Mutex::new(client),
        })
    }

    fn expect_ok(resp: DaemonResponse) -> Result<DaemonResponse, AbeError> {
        if resp.ok {
            return Ok(resp);
        }
        match resp.error.as_deref() {
            Some(ERR_NOT_SATISFIED) => Err(AbeError::NotSatisfied),
            Some(other) => Err(DaemonError::Remote(other.to_string()).into()),
            None => Err(DaemonError::MalformedResponse("ok=false without error".into()).into()),
        }
    }

    fn call(&self, request: &DaemonRequest) -> Result<DaemonResponse, AbeError> {
        let mut client = self.client.lock().unwrap_or_else(|p| p.into_inner());
        Self::expect_ok(client.roundtrip(request)?)
    }
}

impl AbeBackend for DaemonBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Daemon
    }

    fn keygen(&self, principal: &str, attrs: &BTreeSet<Attribute>) -> Result<UserAttributeKey, AbeError> {
        if attrs.is_empty() {
            return Err(AbeError::EmptyAttributes);
        }
        let resp = self.call(&DaemonRequest::Keygen {
            principal: principal.to_string(),
            attrs: attrs.iter().map(Attribute::to_string).collect(),
        })?;
        let blob = resp.field(&resp.user_key_b64, "user_key_b64")?;
        Ok(UserAttributeKey {
            principal: principal.to_string(),
            attributes: attrs.clone(),
            epoch: epoch_of(attrs),
            material: KeyMaterial::Daemon { blob },
        })
    }

    fn encrypt(&self, policy: &Policy, key: &DataKey) -> Result<CiphertextKey, AbeError> {
        let canonical = policy.normalize();
        let resp = self.call(&DaemonRequest::Encrypt {
            policy: canonical.canonical_text(),
            key_b64: STANDARD.encode(key.as_bytes()),
        })?;
        Ok(CiphertextKey {
            policy_text: canonical.canonical_text(),
            epoch: canonical.epoch(),
            body: CkBody::Daemon(resp.field(&resp.ck_b64, "ck_b64")?),
        })
    }

    fn decrypt(&self, uk: &UserAttributeKey, ck: &CiphertextKey) -> Result<DataKey, AbeError> {
        let KeyMaterial::Daemon { blob } = &uk.material else {
            return Err(AbeError::BackendMismatch(BackendTag::Daemon));
        };
        let CkBody::Daemon(ck_blob) = &ck.body else {
            return Err(AbeError::BackendMismatch(BackendTag::Daemon));
        };
        let resp = self.call(&DaemonRequest::Decrypt {
            user_key_b64: STANDARD.encode(blob),
            ck_b64: STANDARD.encode(ck_blob),
        })?;
        let raw = resp.field(&resp.key_b64, "key_b64")?;
        DataKey::from_slice(&raw).ok_or_else(|| DaemonError::MalformedResponse("key_b64 is not 32 bytes".into()).into())
    }
}

/// Daemon-side state: answers requests with the reference backend.
#[derive(Default)]
pub struct ReferenceDaemon {
    master: Option<MasterSecret>,
}

impl ReferenceDaemon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handles one request line. Never panics on bad input.
    pub fn handle_line(&mut self, line: &str) -> DaemonResponse {
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => return DaemonResponse::err("bad_request"),
        };
        let request: DaemonRequest = match serde_json::from_value(value.clone()) {
            Ok(r) => r,
            Err(_) => {
                let known = ["setup", "keygen", "encrypt", "decrypt"];
                return match value.get("op").and_then(|v| v.as_str()) {
                    Some(op) if known.contains(&op) => DaemonResponse::err("bad_request"),
                    _ => DaemonResponse::err(ERR_UNKNOWN_OP),
                };
            }
        };
        self.handle(request).unwrap_or_else(DaemonResponse::err)
    }

    fn handle(&mut self, request: DaemonRequest) -> Result<DaemonResponse, String> {
        if let DaemonRequest::Setup { seed } = request {
            self.master = Some(reference::setup(seed).map_err(|e| e.to_string())?);
            return Ok(DaemonResponse::ok());
        }
        let master = self.master.as_ref().ok_or(ERR_NOT_SETUP)?;
        let decode = |s: &str| STANDARD.decode(s).map_err(|_| "bad_base64".to_string());
        match request {
            DaemonRequest::Setup { .. } => unreachable!(),
            DaemonRequest::Keygen { principal, attrs } => {
                let attrs = crate::policy::attribute_set(&attrs).map_err(|_| "bad_attribute")?;
                let uk = reference::keygen(master, &principal, &attrs).map_err(|e| e.to_string())?;
                let blob = serde_json::to_vec(&uk).expect("keys serialize");
                Ok(DaemonResponse {
                    user_key_b64: Some(STANDARD.encode(blob)),
                    ..DaemonResponse::ok()
                })
            }
            DaemonRequest::Encrypt { policy, key_b64 } => {
                let policy = Policy::parse(&policy).map_err(|_| "bad_policy")?;
                let key = DataKey::from_slice(&decode(&key_b64)?).ok_or("bad_key")?;
                let ck = reference::encrypt(master, &policy, &key).map_err(|e| e.to_string())?;
                Ok(DaemonResponse {
                    ck_b64: Some(STANDARD.encode(ck.to_bytes())),
                    ..DaemonResponse::ok()
                })
            }
            DaemonRequest::Decrypt { user_key_b64, ck_b64 } => {
                let uk: UserAttributeKey =
                    serde_json::from_slice(&decode(&user_key_b64)?).map_err(|_| "bad_user_key")?;
                let ck = CiphertextKey::from_bytes(&decode(&ck_b64)?).map_err(|_| "bad_ck")?;
                match reference::decrypt(&uk, &ck) {
                    Ok(key) => Ok(DaemonResponse {
                        key_b64: Some(STANDARD.encode(key.as_bytes())),
                        ..DaemonResponse::ok()
                    }),
                    Err(AbeError::NotSatisfied) => Err(ERR_NOT_SATISFIED.into()),
                    Err(e) => Err(e.to_string()),
                }
            }
        }
    }

    /// Serves requests until EOF on `input`.
    pub fn serve<R: BufRead, W: Write>(&mut self, input: R, mut output: W) -> io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            serde_json::to_writer(&mut output, &resp)?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let req = DaemonRequest::Encrypt {
            policy: "(a=1 AND b=2)".into(),
            key_b64: "AAAA".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"op":"encrypt","policy":"(a=1 AND b=2)","key_b64":"AAAA"}"#
        );
    }

    #[test]
    fn in_process_daemon_round_trip() {
        let mut d = ReferenceDaemon::new();
        assert_eq!(
            d.handle_line(r#"{"op":"encrypt","policy":"a=1","key_b64":""}"#).error.as_deref(),
            Some(ERR_NOT_SETUP)
        );
        assert!(d.handle_line(r#"{"op":"setup","seed":3}"#).ok);
        let key = DataKey::generate().unwrap();
        let enc = d.handle_line(&format!(
            r#"{{"op":"encrypt","policy":"(a=1 AND b=2)","key_b64":"{}"}}"#,
            STANDARD.encode(key.as_bytes())
        ));
        assert!(enc.ok);
        let ck = enc.ck_b64.unwrap();
        let kg = d.handle_line(r#"{"op":"keygen","principal":"p","attrs":["a=1","b=2"]}"#);
        let dec = d.handle_line(&format!(
            r#"{{"op":"decrypt","user_key_b64":"{}","ck_b64":"{}"}}"#,
            kg.user_key_b64.unwrap(),
            ck
        ));
        assert_eq!(dec.key_b64.unwrap(), STANDARD.encode(key.as_bytes()));
        let weak = d.handle_line(r#"{"op":"keygen","principal":"p","attrs":["a=1"]}"#);
        let denied = d.handle_line(&format!(
            r#"{{"op":"decrypt","user_key_b64":"{}","ck_b64":"{}"}}"#,
            weak.user_key_b64.unwrap(),
            ck
        ));
        assert_eq!(denied.error.as_deref(), Some(ERR_NOT_SATISFIED));
    }

    #[test]
    fn unknown_and_garbage_requests() {
        let mut d = ReferenceDaemon::new();
        let resp = d.handle_line(r#"{"op":"frobnicate"}"#);
        assert_eq!(serde_json::to_string(&resp).unwrap(), r#"{"ok":false,"error":"unknown_op"}"#);
        assert_eq!(d.handle_line("not json").error.as_deref(), Some("bad_request"));
        assert_eq!(d.handle_line(r#"{"op":"keygen"}"#).error.as_deref(), Some("bad_request"));
    }

    #[test]
    fn serve_answers_one_line_per_request() {
        let input = b"{\"op\":\"setup\"}\n\n{\"op\":\"nope\"}\n".as_slice();
        let mut out = Vec::new();
        ReferenceDaemon::new().serve(input, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![r#"{"ok":true}"#, r#"{"ok":false,"error":"unknown_op"}"#]);
    }
}
