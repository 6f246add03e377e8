//! Simulated-network harness: an in-memory duplex byte stream with the same
//! line contract as a TCP connection, a virtual clock for timeout drills,
//! scripted clients, and transcript assertion helpers.
//!
//! The harness ships in the library, not just in test builds, so the audit
//! module can verify its classification against a local oracle before it
//! probes anything real.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::protocol::Reply;
use crate::server::{
    run_session, strip_line_ending, CredentialStore, LineIo, MemorySpool, QueueIdGen, SessionHost,
    SpooledMessage, TcpLineIo,
};
use crate::session::Policy;

/// Wall-clock cap on any single pipe wait; only a buggy test hits this.
const WALL_SAFETY_CAP: Duration = Duration::from_secs(30);

/// How long scripted clients wait for a reply, in virtual time.
const CLIENT_REPLY_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("step {index}: reply is malformed: {detail}")]
    BadReply { index: usize, detail: String },
    #[error("server side panicked")]
    ServerPanic,
    #[error("connect to {addr}: {source}")]
    Connect { addr: SocketAddr, source: io::Error },
}

/// A failed script expectation, pointing at the step that broke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMismatch {
    pub index: usize,
    pub expected: String,
    pub got: String,
}

impl std::fmt::Display for StepMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}: expected {}, got {}", self.index, self.expected, self.got)
    }
}

struct PipeWorld {
    /// Virtual time; only [`VirtualClock`] moves it.
    now: Duration,
    /// buffers[side] holds bytes written by that side.
    buffers: [VecDeque<u8>; 2],
    closed: [bool; 2],
    read_waiters: usize,
}

struct PipeShared {
    world: Mutex<PipeWorld>,
    cond: Condvar,
}

/// One endpoint of an in-memory duplex pipe. Bytes written at one end are
/// read at the other, in order, exactly once. Dropping an end closes it.
pub struct PipeEnd {
    shared: Arc<PipeShared>,
    side: usize,
}

/// Create a connected pair of endpoints sharing one virtual clock.
pub fn duplex() -> (PipeEnd, PipeEnd) {
    let shared = Arc::new(PipeShared {
        world: Mutex::new(PipeWorld {
            now: Duration::ZERO,
            buffers: [VecDeque::new(), VecDeque::new()],
            closed: [false, false],
            read_waiters: 0,
        }),
        cond: Condvar::new(),
    });
    (PipeEnd { shared: shared.clone(), side: 0 }, PipeEnd { shared, side: 1 })
}

impl PipeEnd {
    pub fn clock(&self) -> VirtualClock {
        VirtualClock { shared: self.shared.clone() }
    }

    pub fn close(&self) {
        let mut world = self.shared.world.lock().unwrap();
        world.closed[self.side] = true;
        self.shared.cond.notify_all();
    }

    fn wait<'a>(
        &self,
        world: MutexGuard<'a, PipeWorld>,
    ) -> io::Result<MutexGuard<'a, PipeWorld>> {
        let (guard, wait_result) = self
            .shared
            .cond
            .wait_timeout(world, WALL_SAFETY_CAP)
            .unwrap();
        if wait_result.timed_out() {
            return Err(io::Error::other("testkit pipe stalled past the wall-clock safety cap"));
        }
        Ok(guard)
    }
}

impl Drop for PipeEnd {
    fn drop(&mut self) {
        self.close();
    }
}

impl LineIo for PipeEnd {
    fn read_line(&mut self, timeout: Duration) -> io::Result<Option<String>> {
        let mut world = self.shared.world.lock().unwrap();
        let deadline = world.now + timeout;
        loop {
            let inbox_side = 1 - self.side;
            if let Some(pos) = world.buffers[inbox_side].iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = world.buffers[inbox_side].drain(..=pos).collect();
                return Ok(Some(String::from_utf8_lossy(&line).into_owned()));
            }
            if world.closed[inbox_side] {
                if world.buffers[inbox_side].is_empty() {
                    return Ok(None);
                }
                let line: Vec<u8> = world.buffers[inbox_side].drain(..).collect();
                return Ok(Some(String::from_utf8_lossy(&line).into_owned()));
            }
            if world.now >= deadline {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "virtual deadline passed"));
            }
            world.read_waiters += 1;
            self.shared.cond.notify_all();
            let result = self.wait(world);
            {
                let guard = result?;
                world = guard;
                world.read_waiters -= 1;
            }
        }
    }

    fn write_str(&mut self, text: &str) -> io::Result<()> {
        let mut world = self.shared.world.lock().unwrap();
        if world.closed[self.side] {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe end closed"));
        }
        world.buffers[self.side].extend(text.as_bytes());
        self.shared.cond.notify_all();
        Ok(())
    }
}

/// Handle to the pipe pair's virtual clock.
pub struct VirtualClock {
    shared: Arc<PipeShared>,
}

impl VirtualClock {
    pub fn now(&self) -> Duration {
        self.shared.world.lock().unwrap().now
    }

    pub fn advance(&self, by: Duration) {
        let mut world = self.shared.world.lock().unwrap();
        world.now += by;
        self.shared.cond.notify_all();
    }

    /// Advance only once a reader is blocked on the pipe. This removes the
    /// startup race from timeout drills: the blocked reader has already
    /// computed its deadline against the pre-advance clock.
    pub fn advance_when_reader_waits(&self, by: Duration) -> io::Result<()> {
        let mut world = self.shared.world.lock().unwrap();
        while world.read_waiters == 0 {
            let (guard, wait_result) = self
                .shared
                .cond
                .wait_timeout(world, WALL_SAFETY_CAP)
                .unwrap();
            if wait_result.timed_out() {
                return Err(io::Error::other("no reader showed up before the safety cap"));
            }
            world = guard;
        }
        world.now += by;
        self.shared.cond.notify_all();
        Ok(())
    }
}

/// Who produced a transcript line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Client,
    Server,
    /// Out-of-band note, e.g. the reason a probe failed.
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub line: String,
}

impl TranscriptEntry {
    pub fn client(line: impl Into<String>) -> Self {
        TranscriptEntry { direction: Direction::Client, line: line.into() }
    }

    pub fn server(line: impl Into<String>) -> Self {
        TranscriptEntry { direction: Direction::Server, line: line.into() }
    }

    pub fn note(line: impl Into<String>) -> Self {
        TranscriptEntry { direction: Direction::Note, line: line.into() }
    }
}

#[derive(Debug, Clone)]
enum ScriptStep {
    Send(String),
    ExpectCode(u16),
    ExpectLine(String),
    ExpectContaining(String),
}

/// Ordered client script: lines to send interleaved with expectations.
/// Every expectation consumes one complete (possibly multiline) reply.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    steps: Vec<ScriptStep>,
}

impl ScriptedClient {
    pub fn new() -> Self {
        ScriptedClient::default()
    }

    pub fn send(mut self, line: impl Into<String>) -> Self {
        self.steps.push(ScriptStep::Send(line.into()));
        self
    }

    pub fn expect_code(mut self, code: u16) -> Self {
        self.steps.push(ScriptStep::ExpectCode(code));
        self
    }

    /// Expect the reply's final line to equal `line` exactly.
    pub fn expect_line(mut self, line: impl Into<String>) -> Self {
        self.steps.push(ScriptStep::ExpectLine(line.into()));
        self
    }

    /// Expect some line of the reply to contain `fragment`.
    pub fn expect_containing(mut self, fragment: impl Into<String>) -> Self {
        self.steps.push(ScriptStep::ExpectContaining(fragment.into()));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Everything observed while a script ran.
#[derive(Debug)]
pub struct SessionRun {
    /// Ok if every expectation held, otherwise the first mismatch.
    pub outcome: Result<(), StepMismatch>,
    pub transcript: Vec<TranscriptEntry>,
    /// Complete replies read by expectations, greeting first.
    pub replies: Vec<Reply>,
    /// Raw bytes received from the server, in order.
    pub server_stream: Vec<u8>,
    /// Messages the server accepted (loopback runs only).
    pub messages: Vec<SpooledMessage>,
}

impl SessionRun {
    pub fn reply_codes(&self) -> Vec<u16> {
        self.replies.iter().map(|r| r.code()).collect()
    }

    /// Lines sent by the client, in order.
    pub fn client_lines(&self) -> Vec<&str> {
        self.transcript
            .iter()
            .filter(|e| e.direction == Direction::Client)
            .map(|e| e.line.as_str())
            .collect()
    }
}

/// One complete reply off the wire: parsed form, physical lines
/// (terminators stripped), and the raw bytes as received.
pub type WireReply = (Reply, Vec<String>, Vec<u8>);

/// Read one complete reply (continuation-aware) off a connection. The
/// outer error is harness I/O trouble; the inner `Err` is a protocol-level
/// problem described in text (closed connection, unparseable line).
pub fn read_reply(
    io: &mut dyn LineIo,
    timeout: Duration,
) -> io::Result<Result<WireReply, String>> {
    let mut lines: Vec<String> = Vec::new();
    let mut raw = Vec::new();
    loop {
        let Some(line) = io.read_line(timeout)? else {
            return Ok(Err(if lines.is_empty() {
                "connection closed before a reply".to_string()
            } else {
                "connection closed mid-reply".to_string()
            }));
        };
        raw.extend_from_slice(line.as_bytes());
        let line = strip_line_ending(&line).to_string();
        let done = line.len() >= 4 && line.as_bytes()[3] == b' ';
        let malformed = line.len() < 4
            || !line[..3].bytes().all(|b| b.is_ascii_digit())
            || !matches!(line.as_bytes()[3], b' ' | b'-');
        lines.push(line);
        if malformed {
            return Ok(Err(format!("unparseable reply line {:?}", lines.last().unwrap())));
        }
        if done {
            return match Reply::parse_lines(&lines) {
                Ok(reply) => Ok(Ok((reply, lines, raw))),
                Err(e) => Ok(Err(e.to_string())),
            };
        }
    }
}

struct ScriptOutcome {
    outcome: Result<(), StepMismatch>,
    transcript: Vec<TranscriptEntry>,
    replies: Vec<Reply>,
    server_stream: Vec<u8>,
}

/// Execute a script against any line connection. The greeting is consumed
/// (and checked to be a 220) before the first step.
fn run_script(
    io: &mut dyn LineIo,
    script: &ScriptedClient,
) -> Result<ScriptOutcome, TestkitError> {
    let mut transcript = Vec::new();
    let mut replies = Vec::new();
    let mut server_stream = Vec::new();

    let mut read_one = |transcript: &mut Vec<TranscriptEntry>,
                        replies: &mut Vec<Reply>,
                        server_stream: &mut Vec<u8>,
                        index: usize|
     -> Result<Result<Reply, String>, TestkitError> {
        match read_reply(io, CLIENT_REPLY_TIMEOUT) {
            Ok(Ok((reply, lines, raw))) => {
                for line in lines {
                    transcript.push(TranscriptEntry::server(line));
                }
                server_stream.extend_from_slice(&raw);
                replies.push(reply.clone());
                Ok(Ok(reply))
            }
            Ok(Err(detail)) => {
                transcript.push(TranscriptEntry::note(detail.clone()));
                Ok(Err(detail))
            }
            Err(e) => Err(TestkitError::BadReply { index, detail: e.to_string() }),
        }
    };

    // Greeting.
    let greeting = read_one(&mut transcript, &mut replies, &mut server_stream, 0)?;
    let outcome = match greeting {
        Ok(reply) if reply.code() == 220 => run_steps(
            io,
            script,
            &mut transcript,
            &mut replies,
            &mut server_stream,
        )?,
        Ok(reply) => Err(StepMismatch {
            index: 0,
            expected: "greeting code 220".to_string(),
            got: format!("code {}", reply.code()),
        }),
        Err(detail) => Err(StepMismatch {
            index: 0,
            expected: "greeting code 220".to_string(),
            got: detail,
        }),
    };

    Ok(ScriptOutcome { outcome, transcript, replies, server_stream })
}

fn run_steps(
    io: &mut dyn LineIo,
    script: &ScriptedClient,
    transcript: &mut Vec<TranscriptEntry>,
    replies: &mut Vec<Reply>,
    server_stream: &mut Vec<u8>,
) -> Result<Result<(), StepMismatch>, TestkitError> {
    for (index, step) in script.steps.iter().enumerate() {
        match step {
            ScriptStep::Send(line) => {
                transcript.push(TranscriptEntry::client(line.clone()));
                io.write_str(&format!("{line}\r\n"))?;
            }
            expectation => {
                let got = match read_reply(io, CLIENT_REPLY_TIMEOUT) {
                    Ok(Ok((reply, lines, raw))) => {
                        for line in &lines {
                            transcript.push(TranscriptEntry::server(line.clone()));
                        }
                        server_stream.extend_from_slice(&raw);
                        replies.push(reply.clone());
                        Ok((reply, lines))
                    }
                    Ok(Err(detail)) => {
                        transcript.push(TranscriptEntry::note(detail.clone()));
                        Err(detail)
                    }
                    Err(e) => return Err(TestkitError::BadReply { index, detail: e.to_string() }),
                };
                if let Err(mismatch) = check_expectation(index, expectation, &got) {
                    return Ok(Err(mismatch));
                }
            }
        }
    }
    Ok(Ok(()))
}

fn check_expectation(
    index: usize,
    step: &ScriptStep,
    got: &Result<(Reply, Vec<String>), String>,
) -> Result<(), StepMismatch> {
    let fail = |expected: String, got: String| Err(StepMismatch { index, expected, got });
    match (step, got) {
        (ScriptStep::ExpectCode(code), Ok((reply, _))) if reply.code() == *code => Ok(()),
        (ScriptStep::ExpectCode(code), Ok((reply, _))) => {
            fail(format!("code {code}"), format!("code {}", reply.code()))
        }
        (ScriptStep::ExpectLine(line), Ok((_, lines))) if lines.last() == Some(line) => Ok(()),
        (ScriptStep::ExpectLine(line), Ok((_, lines))) => {
            fail(format!("line {line:?}"), format!("{:?}", lines.last().unwrap()))
        }
        (ScriptStep::ExpectContaining(fragment), Ok((_, lines)))
            if lines.iter().any(|l| l.contains(fragment)) =>
        {
            Ok(())
        }
        (ScriptStep::ExpectContaining(fragment), Ok((_, lines))) => {
            fail(format!("a line containing {fragment:?}"), format!("{lines:?}"))
        }
        (ScriptStep::Send(_), _) => unreachable!("send steps are not expectations"),
        (_, Err(detail)) => fail(expectation_name(step), detail.clone()),
    }
}

fn expectation_name(step: &ScriptStep) -> String {
    match step {
        ScriptStep::ExpectCode(code) => format!("code {code}"),
        ScriptStep::ExpectLine(line) => format!("line {line:?}"),
        ScriptStep::ExpectContaining(fragment) => format!("a line containing {fragment:?}"),
        ScriptStep::Send(_) => "send".to_string(),
    }
}

/// Run the session automaton against a script over an in-memory pipe.
/// Deterministic for a fixed `queue_seed`.
pub fn loopback_session(
    policy: &Policy,
    credentials: &CredentialStore,
    script: &ScriptedClient,
    queue_seed: u64,
) -> Result<SessionRun, TestkitError> {
    let (mut client_end, mut server_end) = duplex();
    let spool = MemorySpool::new();
    let server_spool = spool.clone();
    let policy = policy.clone();
    let credentials = credentials.clone();
    let server = thread::spawn(move || {
        let host = SessionHost {
            policy: &policy,
            credentials: &credentials,
            ids: Arc::new(Mutex::new(QueueIdGen::seeded(queue_seed))),
            store: &server_spool,
        };
        run_session(&mut server_end, &host)
    });

    let script_result = run_script(&mut client_end, script);
    drop(client_end);
    let server_result = server.join().map_err(|_| TestkitError::ServerPanic)?;
    // Pipe stalls surface as io errors on the server side too; those are
    // harness bugs, not protocol outcomes.
    server_result?;
    let ScriptOutcome { outcome, transcript, replies, server_stream } = script_result?;
    Ok(SessionRun { outcome, transcript, replies, server_stream, messages: spool.messages() })
}

/// Run the same script against a real TCP server; messages are not visible
/// from the client side, so [`SessionRun::messages`] is empty.
pub fn tcp_session(addr: SocketAddr, script: &ScriptedClient) -> Result<SessionRun, TestkitError> {
    let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
        .map_err(|source| TestkitError::Connect { addr, source })?;
    let mut io = TcpLineIo::new(stream);
    let ScriptOutcome { outcome, transcript, replies, server_stream } =
        run_script(&mut io, script)?;
    Ok(SessionRun { outcome, transcript, replies, server_stream, messages: Vec::new() })
}

/// Observed behaviour of a [`timeout_drill`].
#[derive(Debug)]
pub enum TimeoutOutcome {
    /// The server announced the timeout and closed; the 421 reply is kept.
    TimedOut { reply: Reply },
    /// The connection was still usable after the idle period.
    StillOpen,
}

/// Let a connection sit idle for `idle` of virtual time and report whether
/// the server hung up. No wall-clock sleeping is involved.
pub fn timeout_drill(policy: &Policy, idle: Duration) -> Result<TimeoutOutcome, TestkitError> {
    let (mut client_end, mut server_end) = duplex();
    let clock = client_end.clock();
    let policy_clone = policy.clone();
    let server = thread::spawn(move || {
        let host = SessionHost {
            policy: &policy_clone,
            credentials: &CredentialStore::new(),
            ids: Arc::new(Mutex::new(QueueIdGen::seeded(0))),
            store: &MemorySpool::new(),
        };
        run_session(&mut server_end, &host)
    });

    let drill = (|| -> Result<TimeoutOutcome, TestkitError> {
        let greeting = read_reply(&mut client_end, CLIENT_REPLY_TIMEOUT)?;
        if greeting.is_err() {
            return Err(TestkitError::BadReply { index: 0, detail: "no greeting".into() });
        }
        clock.advance_when_reader_waits(idle)?;
        if idle > policy.command_timeout {
            match read_reply(&mut client_end, CLIENT_REPLY_TIMEOUT)? {
                Ok((reply, _, _)) => {
                    // After the 421 the server must hang up.
                    if client_end.read_line(CLIENT_REPLY_TIMEOUT)?.is_some() {
                        return Err(TestkitError::BadReply {
                            index: 1,
                            detail: "server kept talking after timeout".into(),
                        });
                    }
                    Ok(TimeoutOutcome::TimedOut { reply })
                }
                Err(detail) => {
                    Err(TestkitError::BadReply { index: 1, detail })
                }
            }
        } else {
            client_end.write_str("NOOP\r\n")?;
            match read_reply(&mut client_end, CLIENT_REPLY_TIMEOUT)? {
                Ok((reply, _, _)) if reply.code() == 250 => Ok(TimeoutOutcome::StillOpen),
                Ok((reply, _, _)) => Err(TestkitError::BadReply {
                    index: 1,
                    detail: format!("NOOP answered {}", reply.code()),
                }),
                Err(detail) => Err(TestkitError::BadReply { index: 1, detail }),
            }
        }
    })();

    drop(client_end);
    server.join().map_err(|_| TestkitError::ServerPanic)?.ok();
    drill
}

/// Client lines of the canonical spoofed-invitation dialogue: EHLO, forged
/// MAIL FROM, RCPT, the full message, terminator and QUIT.
pub fn spoofed_invitation_lines() -> Vec<&'static str> {
    vec![
        "EHLO www.test.com",
        "MAIL FROM:<secr@mail.gr>",
        "RCPT TO:<professor@mail.gr>",
        "DATA",
        "Date: Wed, 22 Jul 2009 13:56:45 +0300",
        "From: \"Secretary\" <secr@mail.gr>",
        "To: \"Professors\" <professor@mail.gr>",
        "Subject: Board of Examiners",
        "Reply-To: secr@mail.gr",
        "User-Agent: Webmail/0.2.0",
        "Content-Transfer-Encoding: 8bit",
        "Content-Type: text/plain; charset=\"UTF-8\"",
        "You are invited to the Board of Examiners meeting",
        "scheduled for Thursday 16 September 2010 at 12.30",
        "p.m. at the department's council room.",
        ".",
        "QUIT",
    ]
}

/// The data section of [`spoofed_invitation_lines`] as the spool must
/// record it: everything between DATA and the terminator, CRLF endings.
pub fn spoofed_invitation_data() -> String {
    let lines = spoofed_invitation_lines();
    let mut data = String::new();
    for line in &lines[4..lines.len() - 2] {
        data.push_str(line);
        data.push_str("\r\n");
    }
    data
}

/// [`spoofed_invitation_lines`] as a checked script with the expected reply
/// codes attached.
pub fn spoofed_invitation_script() -> ScriptedClient {
    let lines = spoofed_invitation_lines();
    let mut script = ScriptedClient::new();
    for (i, line) in lines.iter().enumerate() {
        script = script.send(*line);
        // Replies arrive for commands only, not for the message data lines.
        script = match i {
            0 => script.expect_code(250),          // EHLO
            1 | 2 => script.expect_line("250 2.1.5 Ok"),
            3 => script.expect_code(354),          // DATA
            i if i == lines.len() - 2 => script.expect_containing("Ok: queued as"),
            i if i == lines.len() - 1 => script.expect_line("221 2.0.0 Bye"),
            _ => script,
        };
    }
    script
}
