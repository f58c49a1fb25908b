//! Oracle over a child process speaking newline-delimited JSON on stdio.
//!
//! Protocol `hshap/1`:
//!
//! * the server's first line is a handshake
//!   `{"protocol":"hshap/1","outputs":N}`, optionally with
//!   `"pipelining":true` when it accepts several requests in flight;
//! * each request is `{"id":u64,"shape":[c,h,w],"batch":[[f64,...],...]}`,
//!   one row-major channel-first array per sample, plus `"head":k` when the
//!   server has more than one output;
//! * each reply is `{"id":u64,"scores":[...]}` or `{"id":u64,"error":"..."}`.
//!   A score is either a number (the selected head) or an array holding
//!   every head, from which the client picks.
//!
//! Set `HSHAP_BRIDGE_LOG` to trace frames on stderr.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::MaskedInput;
use crate::oracle::{check_head, CharacteristicOracle, OracleError};
use crate::tensor::Shape;

pub const PROTOCOL: &str = "hshap/1";
pub const LOG_ENV: &str = "HSHAP_BRIDGE_LOG";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("failed to launch model server {command:?}: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("model server did not answer within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("model server exited: {0}")]
    ServerCrashed(String),
    #[error("model server reported an error for request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("input shape {got:?} does not match the bridge shape {expected:?}")]
    ShapeMismatch { expected: Shape, got: Shape },
    #[error("invalid bridge configuration: {0}")]
    Config(String),
    #[error("bridge is unusable after an earlier failure")]
    Poisoned,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeConfig {
    /// Program and arguments of the model server.
    pub command: Vec<String>,
    pub shape: Shape,
    pub score_head: usize,
    pub timeout: Duration,
    /// Larger batches are split into chunks of this size.
    pub max_batch: usize,
    /// Whether the explainer may call the bridge from several threads.
    pub concurrent: bool,
}

impl BridgeConfig {
    pub fn new(command: Vec<String>, shape: Shape) -> Self {
        Self {
            command,
            shape,
            score_head: 0,
            timeout: Duration::from_secs(30),
            max_batch: 64,
            concurrent: false,
        }
    }

    fn validate(&self) -> Result<(), BridgeError> {
        if self.command.is_empty() {
            return Err(BridgeError::Config("empty server command".into()));
        }
        if self.shape.is_empty() {
            return Err(BridgeError::Config("input shape must be positive".into()));
        }
        if self.timeout.is_zero() {
            return Err(BridgeError::Config("timeout must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(BridgeError::Config("max batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub outputs: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pipelining: bool,
}

#[derive(Debug, Serialize)]
pub struct Request<'a> {
    pub id: u64,
    pub shape: [usize; 3],
    pub batch: &'a [Vec<f64>],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Score {
    Selected(f64),
    Heads(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default)]
    pub scores: Option<Vec<Score>>,
    #[serde(default)]
    pub error: Option<String>,
}

struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    poisoned: bool,
}

/// A running model server.
pub struct BridgeOracle {
    config: BridgeConfig,
    handshake: Handshake,
    trace: bool,
    session: Mutex<Session>,
}

impl std::fmt::Debug for BridgeOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeOracle")
            .field("config", &self.config)
            .field("handshake", &self.handshake)
            .finish_non_exhaustive()
    }
}

fn tracing_enabled() -> bool {
    std::env::var(LOG_ENV).map(|v| !v.is_empty() && v != "0").unwrap_or(false)
}

fn trace_line(direction: &str, line: &str) {
    const MAX: usize = 240;
    if line.len() > MAX {
        let cut = (0..=MAX).rev().find(|&i| line.is_char_boundary(i)).unwrap_or(0);
        eprintln!("[hshap-bridge] {direction} {}... ({} bytes)", &line[..cut], line.len());
    } else {
        eprintln!("[hshap-bridge] {direction} {line}");
    }
}

impl Session {
    fn exit_status(&mut self) -> String {
        match self.child.try_wait() {
            Ok(Some(status)) => status.to_string(),
            _ => "stdout closed".into(),
        }
    }

    fn recv(&mut self, timeout: Duration, trace: bool) -> Result<String, BridgeError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => {
                if trace {
                    trace_line("<-", &line);
                }
                Ok(line)
            }
            Ok(Err(e)) => Err(BridgeError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                // give the process a moment to be reaped so the status is informative
                std::thread::sleep(Duration::from_millis(20));
                Err(BridgeError::ServerCrashed(self.exit_status()))
            }
        }
    }

    fn send(&mut self, line: &str, trace: bool) -> Result<(), BridgeError> {
        if trace {
            trace_line("->", line);
        }
        let stdin = self.stdin.as_mut().ok_or(BridgeError::Poisoned)?;
        let written = stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush());
        match written {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {
                Err(BridgeError::ServerCrashed(self.exit_status()))
            }
            Err(e) => Err(BridgeError::Io(e)),
        }
    }
}

impl BridgeOracle {
    /// Launches the server and completes the handshake.
    pub fn spawn(config: BridgeConfig) -> Result<Self, BridgeError> {
        config.validate()?;
        let mut child = Command::new(&config.command[0])
            .args(&config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BridgeError::Spawn { command: config.command.join(" "), source })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let trace = tracing_enabled();
        let mut session = Session { child, stdin, lines: rx, next_id: 1, poisoned: false };

        let line = session.recv(config.timeout, trace)?;
        let handshake: Handshake = serde_json::from_str(&line)
            .map_err(|e| BridgeError::Protocol(format!("bad handshake {line:?}: {e}")))?;
        if handshake.protocol != PROTOCOL {
            return Err(BridgeError::Protocol(format!(
                "server speaks {:?}, expected {PROTOCOL:?}",
                handshake.protocol
            )));
        }
        if handshake.outputs == 0 {
            return Err(BridgeError::Protocol("server advertises zero outputs".into()));
        }
        if config.score_head >= handshake.outputs {
            return Err(BridgeError::Config(format!(
                "score head {} out of range for {} outputs",
                config.score_head, handshake.outputs
            )));
        }
        Ok(Self { config, handshake, trace, session: Mutex::new(session) })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    /// Scores masked inputs on the configured score head.
    pub fn bridge_evaluate(&self, batch: &[MaskedInput<'_>]) -> Result<Vec<f64>, BridgeError> {
        self.evaluate_masked(batch, self.config.score_head)
    }

    fn evaluate_masked(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, BridgeError> {
        if let Some(m) = batch.iter().find(|m| m.shape() != self.config.shape) {
            return Err(BridgeError::ShapeMismatch { expected: self.config.shape, got: m.shape() });
        }
        let arrays: Vec<Vec<f64>> = batch
            .iter()
            .map(|m| {
                let mut v = Vec::with_capacity(self.config.shape.len());
                m.write_into(&mut v);
                v
            })
            .collect();
        self.evaluate_arrays(&arrays, head)
    }

    /// Scores raw channel-first arrays, chunked to the configured batch size.
    pub fn evaluate_arrays(&self, arrays: &[Vec<f64>], head: usize) -> Result<Vec<f64>, BridgeError> {
        if head >= self.handshake.outputs {
            return Err(BridgeError::Config(format!(
                "score head {head} out of range for {} outputs",
                self.handshake.outputs
            )));
        }
        let expected = self.config.shape.len();
        if let Some(a) = arrays.iter().find(|a| a.len() != expected) {
            return Err(BridgeError::Config(format!("sample has {} values, expected {expected}", a.len())));
        }
        let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if session.poisoned {
            return Err(BridgeError::Poisoned);
        }
        let result = self.exchange(&mut session, arrays, head);
        if result.is_err() {
            session.poisoned = true;
        }
        result
    }

    fn exchange(&self, session: &mut Session, arrays: &[Vec<f64>], head: usize) -> Result<Vec<f64>, BridgeError> {
        let chunks: Vec<&[Vec<f64>]> = arrays.chunks(self.config.max_batch).collect();
        let mut results: Vec<Option<Vec<f64>>> = vec![None; chunks.len()];
        let head_field = (self.handshake.outputs > 1).then_some(head);
        let deadline_for = |started: Instant| started + self.config.timeout;

        if self.handshake.pipelining {
            let mut pending: HashMap<u64, usize> = HashMap::new();
            for (slot, chunk) in chunks.iter().enumerate() {
                let id = self.send_request(session, chunk, head_field)?;
                pending.insert(id, slot);
            }
            let started = Instant::now();
            while !pending.is_empty() {
                let remaining = deadline_for(started).saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    return Err(BridgeError::Timeout(self.config.timeout));
                }
                let response = parse_response(&session.recv(remaining, self.trace)?)?;
                let slot = pending
                    .remove(&response.id)
                    .ok_or_else(|| BridgeError::Protocol(format!("unexpected response id {}", response.id)))?;
                results[slot] = Some(select_scores(response, chunks[slot].len(), head)?);
            }
        } else {
            for (slot, chunk) in chunks.iter().enumerate() {
                let id = self.send_request(session, chunk, head_field)?;
                let response = parse_response(&session.recv(self.config.timeout, self.trace)?)?;
                if response.id != id {
                    return Err(BridgeError::Protocol(format!(
                        "response id {} does not match request id {id}",
                        response.id
                    )));
                }
                results[slot] = Some(select_scores(response, chunk.len(), head)?);
            }
        }
        Ok(results.into_iter().flat_map(|r| r.expect("every chunk answered")).collect())
    }

    fn send_request(
        &self,
        session: &mut Session,
        chunk: &[Vec<f64>],
        head: Option<usize>,
    ) -> Result<u64, BridgeError> {
        let id = session.next_id;
        session.next_id += 1;
        let request = Request { id, shape: self.config.shape.dims(), batch: chunk, head };
        let line = serde_json::to_string(&request).map_err(|e| BridgeError::Protocol(e.to_string()))?;
        session.send(&line, self.trace)?;
        Ok(id)
    }
}

fn parse_response(line: &str) -> Result<Response, BridgeError> {
    serde_json::from_str(line).map_err(|e| BridgeError::Protocol(format!("malformed response {line:?}: {e}")))
}

fn select_scores(response: Response, expected: usize, head: usize) -> Result<Vec<f64>, BridgeError> {
    if let Some(message) = response.error {
        return Err(BridgeError::Remote { id: response.id, message });
    }
    let scores = response
        .scores
        .ok_or_else(|| BridgeError::Protocol(format!("response {} carries neither scores nor error", response.id)))?;
    if scores.len() != expected {
        return Err(BridgeError::Protocol(format!(
            "response {} has {} scores for a batch of {expected}",
            response.id,
            scores.len()
        )));
    }
    scores
        .into_iter()
        .map(|s| match s {
            Score::Selected(v) => Ok(v),
            Score::Heads(v) => v.get(head).copied().ok_or_else(|| {
                BridgeError::Protocol(format!("response {} lacks head {head}", response.id))
            }),
        })
        .collect()
}

impl CharacteristicOracle for BridgeOracle {
    fn evaluate(&self, batch: &[MaskedInput<'_>], head: usize) -> Result<Vec<f64>, OracleError> {
        check_head(head, self.handshake.outputs)?;
        Ok(self.evaluate_masked(batch, head)?)
    }

    fn outputs(&self) -> usize {
        self.handshake.outputs
    }

    fn concurrent(&self) -> bool {
        self.config.concurrent
    }
}

impl Drop for BridgeOracle {
    fn drop(&mut self) {
        let session = self.session.get_mut().unwrap_or_else(|p| p.into_inner());
        // closing stdin asks the server to exit
        session.stdin.take();
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = session.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let _ = session.child.kill();
        let _ = session.child.wait();
    }
}
