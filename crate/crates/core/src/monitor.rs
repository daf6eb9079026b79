//! Streaming help-trigger service speaking newline-delimited JSON.
//!
//! A session starts with `hello`, then each `step` message gets exactly one
//! `decision` reply, in order. `reset` clears the session counters and
//! `bye` ends the session. Malformed lines get an `error` reply and the
//! session continues; a protocol version mismatch refuses the session.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{HelpDecision, HelpMethod};
use crate::features::TokenDistribution;
use crate::rollout::StepRecord;

pub const PROTOCOL_VERSION: u32 = 1;

/// Token width used for methods without one of their own.
pub const DEFAULT_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Hello { version: u32 },
    Step { step_index: usize, tokens: Vec<TokenDistribution> },
    Reset,
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    HelloAck {
        method: String,
        max_tokens: usize,
    },
    Decision {
        step_index: usize,
        help: bool,
        score: f64,
        degraded: bool,
        elapsed_us: u64,
    },
    ResetAck,
    ByeAck {
        steps: usize,
        triggers: usize,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: u64,
    pub established: bool,
    /// Step messages answered since the last reset.
    pub steps: usize,
    /// Help triggers raised since the last reset.
    pub triggers: usize,
}

impl SessionState {
    pub fn new(session_id: u64) -> Self {
        SessionState {
            session_id,
            established: false,
            steps: 0,
            triggers: 0,
        }
    }
}

/// What the session loop should do after a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Close,
}

/// A loaded method shared by every session.
pub struct Monitor {
    method: Arc<dyn HelpMethod>,
    max_tokens: usize,
    next_session: AtomicU64,
}

impl Monitor {
    /// `fallback_max_tokens` applies when the method has no width of its own.
    pub fn new(method: Arc<dyn HelpMethod>, fallback_max_tokens: usize) -> Result<Self> {
        let max_tokens = method.max_tokens().unwrap_or(fallback_max_tokens);
        if max_tokens == 0 {
            return Err(Error::config("max_tokens must be at least 1"));
        }
        Ok(Monitor {
            method,
            max_tokens,
            next_session: AtomicU64::new(0),
        })
    }

    pub fn method_name(&self) -> String {
        self.method.name()
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn open_session(&self) -> SessionState {
        SessionState::new(self.next_session.fetch_add(1, Ordering::Relaxed))
    }

    /// Decision for one step. Steps longer than `max_tokens` are scored on
    /// their first `max_tokens` tokens and flagged degraded.
    pub fn decide(&self, step: &StepRecord) -> Result<HelpDecision> {
        if step.tokens.len() > self.max_tokens {
            let head = StepRecord::new(step.step_index, step.tokens[..self.max_tokens].to_vec());
            let mut d = self.method.decide_step(&head)?;
            d.degraded = true;
            Ok(d)
        } else {
            self.method.decide_step(step)
        }
    }

    pub fn handle_step(
        &self,
        state: &mut SessionState,
        step_index: usize,
        tokens: Vec<TokenDistribution>,
    ) -> Result<Reply> {
        let started = Instant::now();
        let step = StepRecord::new(step_index, tokens);
        step.validate()?;
        let d = self.decide(&step)?;
        state.steps += 1;
        state.triggers += usize::from(d.help);
        Ok(Reply::Decision {
            step_index,
            help: d.help,
            score: d.score,
            degraded: d.degraded,
            elapsed_us: u64::try_from(started.elapsed().as_micros()).unwrap_or(u64::MAX),
        })
    }

    /// Reply to one request line.
    pub fn handle_line(&self, state: &mut SessionState, line: &str) -> (Reply, Flow) {
        let error = |message: String| Reply::Error { message };
        let request: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return (error(format!("malformed message: {e}")), Flow::Continue),
        };
        match request {
            Request::Hello { version } if version != PROTOCOL_VERSION => (
                error(format!(
                    "unsupported protocol version {version}, expected {PROTOCOL_VERSION}"
                )),
                Flow::Close,
            ),
            Request::Hello { .. } => {
                state.established = true;
                (
                    Reply::HelloAck {
                        method: self.method.name(),
                        max_tokens: self.max_tokens,
                    },
                    Flow::Continue,
                )
            }
            _ if !state.established => (error("session not established; send hello first".into()), Flow::Continue),
            Request::Step { step_index, tokens } => match self.handle_step(state, step_index, tokens) {
                Ok(reply) => (reply, Flow::Continue),
                Err(e) => (error(format!("step {step_index}: {e}")), Flow::Continue),
            },
            Request::Reset => {
                state.steps = 0;
                state.triggers = 0;
                (Reply::ResetAck, Flow::Continue)
            }
            Request::Bye => (
                Reply::ByeAck {
                    steps: state.steps,
                    triggers: state.triggers,
                },
                Flow::Close,
            ),
        }
    }
}

/// Runs one session until `bye`, refusal or end of input.
pub fn serve<R: BufRead, W: Write>(monitor: &Monitor, reader: R, mut writer: W) -> Result<SessionState> {
    let mut state = monitor.open_session();
    let io_err = |e| Error::io("<session stream>", e);
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, flow) = monitor.handle_line(&mut state, &line);
        serde_json::to_writer(&mut writer, &reply)?;
        writer.write_all(b"\n").map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        if flow == Flow::Close {
            break;
        }
    }
    Ok(state)
}

/// Accepts connections until `shutdown` is set, serving each on its own
/// thread. Returns after the listener stops; open sessions finish on their
/// own threads.
pub fn serve_tcp(monitor: Arc<Monitor>, listener: TcpListener, shutdown: Arc<AtomicBool>) -> Result<()> {
    let io_err = |e| Error::io("<listener>", e);
    listener.set_nonblocking(true).map_err(io_err)?;
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let m = Arc::clone(&monitor);
                workers.push(thread::spawn(move || serve_connection(&m, stream)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(io_err(e)),
        }
        workers.retain(|w| !w.is_finished());
    }
    Ok(())
}

fn serve_connection(monitor: &Monitor, stream: TcpStream) -> Result<SessionState> {
    let io_err = |e| Error::io("<connection>", e);
    stream.set_nonblocking(false).map_err(io_err)?;
    let reader = BufReader::new(stream.try_clone().map_err(io_err)?);
    serve(monitor, reader, BufWriter::new(stream))
}
