//! Black-box detectors behind a subprocess speaking newline-delimited JSON.
//!
//! Request: `{"id": <int>, "image": "<absolute path>"}`.
//! Response: `{"id": <int>, "detections": [{"box": [x1,y1,x2,y2], "label": "<string>", "score": <float>}]}`.
//! One request in flight per adapter; responses must echo the request id.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Detector, DetectorOutput};
use crate::data_io::save_scene_png;
use crate::error::Result;
use crate::geometry::{BoundingBox, Detection};
use crate::raster::SceneImage;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("failed to start adapter `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("adapter exited or closed its output (status: {status}); last request: {request}")]
    Crashed { status: String, request: String },

    #[error("adapter response is not valid JSON ({reason}): {payload}")]
    Malformed { reason: String, payload: String },

    #[error("adapter did not answer within {timeout:?}; request: {request}")]
    Timeout { timeout: Duration, request: String },

    #[error("adapter answered id {got} to request id {expected}: {payload}")]
    IdMismatch { expected: u64, got: u64, payload: String },

    #[error("adapter response field `{field}` is invalid: {payload}")]
    Invalid { field: String, payload: String },

    #[error("adapter I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub detections: Vec<WireDetection>,
}

impl WireResponse {
    /// Parses one response line and checks every detection.
    pub fn parse(line: &str, expected_id: u64) -> Result<DetectorOutput, AdapterError> {
        let resp: WireResponse = serde_json::from_str(line).map_err(|e| AdapterError::Malformed {
            reason: e.to_string(),
            payload: line.to_string(),
        })?;
        if resp.id != expected_id {
            return Err(AdapterError::IdMismatch {
                expected: expected_id,
                got: resp.id,
                payload: line.to_string(),
            });
        }
        let invalid = |field: String| AdapterError::Invalid {
            field,
            payload: line.to_string(),
        };
        let mut detections = Vec::with_capacity(resp.detections.len());
        for (i, d) in resp.detections.into_iter().enumerate() {
            if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                return Err(invalid(format!("detections[{i}].score")));
            }
            let bbox = BoundingBox::from_array(d.bbox);
            if !bbox.is_valid() {
                return Err(invalid(format!("detections[{i}].box")));
            }
            detections.push(Detection::new(bbox, d.label, d.score));
        }
        Ok(DetectorOutput { detections })
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A detector reached through a long-lived adapter subprocess.
pub struct BlackBoxAdapter {
    command: Vec<String>,
    timeout: Duration,
    session: Mutex<Session>,
    scratch: tempfile::TempDir,
}

impl std::fmt::Debug for BlackBoxAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxAdapter")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl BlackBoxAdapter {
    /// Starts `command[0]` with the remaining elements as arguments.
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, AdapterError> {
        let display = command.join(" ");
        let (program, args) = command.split_first().ok_or_else(|| AdapterError::Spawn {
            command: display.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| AdapterError::Spawn {
                command: display.clone(),
                source,
            })?;
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
            command: command.to_vec(),
            timeout,
            session: Mutex::new(Session {
                child,
                stdin,
                lines: rx,
                next_id: 0,
            }),
            scratch: tempfile::tempdir()?,
        })
    }

    /// Sends one image path and waits for the matching response.
    pub fn detect_path(&self, image: &Path) -> Result<DetectorOutput, AdapterError> {
        let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
        let id = session.next_id;
        session.next_id += 1;
        let request = serde_json::to_string(&WireRequest {
            id,
            image: image.to_string_lossy().into_owned(),
        })
        .expect("request serializes");

        let crashed = |session: &mut Session, request: &str| AdapterError::Crashed {
            status: match session.child.try_wait() {
                Ok(Some(s)) => s.to_string(),
                Ok(None) => "running".to_string(),
                Err(e) => e.to_string(),
            },
            request: request.to_string(),
        };

        if writeln!(session.stdin, "{request}").and_then(|_| session.stdin.flush()).is_err() {
            return Err(crashed(&mut session, &request));
        }
        let line = match session.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(AdapterError::Io(e)),
            Err(RecvTimeoutError::Timeout) => {
                return Err(AdapterError::Timeout {
                    timeout: self.timeout,
                    request,
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                // Give the process a moment to report its exit status.
                let _ = session.child.wait();
                return Err(crashed(&mut session, &request));
            }
        };
        WireResponse::parse(line.trim(), id)
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    fn scratch_path(&self) -> PathBuf {
        let n = self.session.lock().map(|s| s.next_id).unwrap_or(0);
        self.scratch.path().join(format!("frame-{n}.png"))
    }
}

impl Detector for BlackBoxAdapter {
    fn detect(&self, image: &SceneImage) -> Result<DetectorOutput> {
        let path = self.scratch_path();
        save_scene_png(&path, image)?;
        let abs = std::fs::canonicalize(&path)?;
        let out = self.detect_path(&abs);
        let _ = std::fs::remove_file(&abs);
        Ok(out?)
    }
}
