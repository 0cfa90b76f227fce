//! Locally hosted models behind a line protocol.
//!
//! The child process reads one JSON object per line on stdin,
//! `{"image": "<path>" | null, "prompt": "<text>"}`, and answers each with
//! one line on stdout, either `{"text": "..."}` or `{"error": "..."}`.
//! Requests are sent one at a time. A child that times out or exits is
//! killed and restarted on the next call.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, Job};

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Deserialize)]
struct Reply {
    text: Option<String>,
    error: Option<String>,
}

pub struct SubprocessBackend {
    program: PathBuf,
    args: Vec<String>,
    timeout: Duration,
    running: Mutex<Option<Running>>,
}

impl SubprocessBackend {
    pub fn new(program: &Path, args: &[String], timeout: Duration) -> Self {
        SubprocessBackend {
            program: program.to_path_buf(),
            args: args.to_vec(),
            timeout,
            running: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Running, BackendError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("cannot start {}: {e}", self.program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running { child, stdin, lines })
    }

    fn exchange(running: &mut Running, request: &str, timeout: Duration) -> Result<String, BackendError> {
        writeln!(running.stdin, "{request}")
            .and_then(|_| running.stdin.flush())
            .map_err(|e| BackendError::Transport(format!("subprocess stdin: {e}")))?;
        let line = match running.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(BackendError::Transport(format!("subprocess stdout: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(BackendError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(BackendError::Transport("subprocess exited".into())),
        };
        let reply: Reply =
            serde_json::from_str(&line).map_err(|e| BackendError::Protocol(format!("bad subprocess reply: {e}")))?;
        match (reply.text, reply.error) {
            (Some(text), None) => Ok(text),
            (_, Some(error)) => Err(BackendError::UpstreamError {
                status: 500,
                body: error,
            }),
            (None, None) => Err(BackendError::Protocol("reply has neither text nor error".into())),
        }
    }
}

impl Backend for SubprocessBackend {
    fn call(&self, job: &Job) -> Result<String, BackendError> {
        let request = json!({
            "image": job.image.as_ref().map(|p| p.to_string_lossy()),
            "prompt": job.prompt,
        })
        .to_string();
        let mut slot = self.running.lock().expect("subprocess lock");
        if slot.is_none() {
            *slot = Some(self.spawn()?);
        }
        let running = slot.as_mut().expect("just spawned");
        let result = Self::exchange(running, &request, self.timeout);
        // A stuck or dead child cannot be trusted with the next request.
        if matches!(result, Err(BackendError::Timeout | BackendError::Transport(_))) {
            *slot = None;
        }
        result
    }
}
