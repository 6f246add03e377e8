//! Server-side SMTP automaton.
//!
//! [`step`] is a pure transition function from (state, input, policy) to
//! (next state, reply, action). All I/O, timeouts and spooling live in the
//! connection driver ([`crate::server`]); queue-id generation is injected so
//! identical inputs always produce identical transitions.

use std::time::Duration;

use thiserror::Error;

use crate::protocol::{
    decode_base64, parse_command, Command, EmailAddress, ProtocolError, Reply,
};
use crate::server::{CredentialStore, QueueId, QueueIdGen};

pub const DEFAULT_BANNER_TAG: &str = "M.T.A.";
pub const DEFAULT_COMMAND_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_MESSAGE_SIZE: usize = 8_192_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("server hostname must be a non-empty single word")]
    InvalidHostname,
    #[error("banner tag must be non-empty")]
    EmptyBannerTag,
    #[error("command timeout must be greater than zero")]
    ZeroTimeout,
    #[error("auth-required policy must advertise AUTH LOGIN PLAIN")]
    AuthNotAdvertised,
    #[error("advertised SIZE must match max_message_size")]
    SizeMismatch,
}

/// Whether unauthenticated senders are accepted (the weakness under study)
/// or rejected until an AUTH exchange succeeds (the hardening).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Open,
    AuthRequired,
}

/// Server behaviour knobs shared by every session.
#[derive(Debug, Clone)]
pub struct Policy {
    pub mode: Mode,
    pub server_hostname: String,
    pub banner_tag: String,
    pub advertised_extensions: Vec<String>,
    pub command_timeout: Duration,
    pub max_message_size: usize,
}

fn default_extensions(max_message_size: usize) -> Vec<String> {
    vec![
        "PIPELINING".into(),
        format!("SIZE {max_message_size}"),
        "ETRN".into(),
        "STARTTLS".into(),
        "AUTH LOGIN PLAIN".into(),
        "AUTH=LOGIN PLAIN".into(),
        "ENHANCEDSTATUSCODES".into(),
        "8BITMIME".into(),
        "DSN".into(),
    ]
}

impl Policy {
    pub fn new(mode: Mode, server_hostname: &str) -> Result<Self, SessionError> {
        let policy = Policy {
            mode,
            server_hostname: server_hostname.to_string(),
            banner_tag: DEFAULT_BANNER_TAG.to_string(),
            advertised_extensions: default_extensions(DEFAULT_MAX_MESSAGE_SIZE),
            command_timeout: DEFAULT_COMMAND_TIMEOUT,
            max_message_size: DEFAULT_MAX_MESSAGE_SIZE,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn open(server_hostname: &str) -> Result<Self, SessionError> {
        Policy::new(Mode::Open, server_hostname)
    }

    pub fn auth_required(server_hostname: &str) -> Result<Self, SessionError> {
        Policy::new(Mode::AuthRequired, server_hostname)
    }

    pub fn with_banner_tag(mut self, tag: &str) -> Result<Self, SessionError> {
        self.banner_tag = tag.to_string();
        self.validate()?;
        Ok(self)
    }

    pub fn with_command_timeout(mut self, timeout: Duration) -> Result<Self, SessionError> {
        self.command_timeout = timeout;
        self.validate()?;
        Ok(self)
    }

    /// Also rewrites the advertised SIZE so the two stay in lock step.
    pub fn with_max_message_size(mut self, bytes: usize) -> Self {
        self.max_message_size = bytes;
        for ext in &mut self.advertised_extensions {
            if ext.starts_with("SIZE ") {
                *ext = format!("SIZE {bytes}");
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if self.server_hostname.is_empty()
            || self.server_hostname.chars().any(|c| c.is_whitespace() || c.is_control())
        {
            return Err(SessionError::InvalidHostname);
        }
        if self.banner_tag.is_empty() {
            return Err(SessionError::EmptyBannerTag);
        }
        if self.command_timeout.is_zero() {
            return Err(SessionError::ZeroTimeout);
        }
        if self.mode == Mode::AuthRequired
            && !self.advertised_extensions.iter().any(|e| e == "AUTH LOGIN PLAIN")
        {
            return Err(SessionError::AuthNotAdvertised);
        }
        let advertised_size = self
            .advertised_extensions
            .iter()
            .find_map(|e| e.strip_prefix("SIZE ").and_then(|v| v.parse::<usize>().ok()));
        if advertised_size != Some(self.max_message_size) {
            return Err(SessionError::SizeMismatch);
        }
        Ok(())
    }

    /// Text lines of the multiline EHLO reply: hostname first, extensions after.
    pub fn ehlo_lines(&self) -> Vec<String> {
        let mut lines = Vec::with_capacity(1 + self.advertised_extensions.len());
        lines.push(self.server_hostname.clone());
        lines.extend(self.advertised_extensions.iter().cloned());
        lines
    }
}

/// Where a connection stands in the dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionState {
    Connected,
    Greeted {
        client: String,
    },
    AuthAwaitingUsername {
        client: String,
    },
    AuthAwaitingPassword {
        client: String,
        username: String,
    },
    /// AUTH PLAIN issued without an initial blob; the blob comes next.
    AuthAwaitingPlain {
        client: String,
    },
    Authenticated {
        client: String,
        username: String,
    },
    EnvelopeOpen {
        client: String,
        authenticated: Option<String>,
        reverse_path: EmailAddress,
        forward_paths: Vec<EmailAddress>,
    },
    ReceivingData {
        client: String,
        authenticated: Option<String>,
        reverse_path: EmailAddress,
        forward_paths: Vec<EmailAddress>,
        /// Dot-unstuffed lines collected so far (discarded once over size).
        lines: Vec<String>,
        /// Wire octets seen, terminators included.
        bytes: usize,
    },
    Closed,
}

impl SessionState {
    /// States whose next input is a raw line, not a command.
    pub fn expects_raw_line(&self) -> bool {
        matches!(
            self,
            SessionState::ReceivingData { .. }
                | SessionState::AuthAwaitingUsername { .. }
                | SessionState::AuthAwaitingPassword { .. }
                | SessionState::AuthAwaitingPlain { .. }
        )
    }
}

/// MAIL FROM / RCPT TO addresses of one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub reverse_path: EmailAddress,
    pub forward_paths: Vec<EmailAddress>,
}

/// Side effect requested from the connection driver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    None,
    /// Spool the finished message, durably, before the reply goes out.
    Enqueue {
        queue_id: QueueId,
        envelope: Envelope,
        authenticated_as: Option<String>,
        data: String,
    },
    Close,
}

/// Outcome of one step: successor state, reply (absent while swallowing
/// message data lines), and any side effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub next: SessionState,
    pub reply: Option<Reply>,
    pub action: Action,
}

impl Transition {
    fn stay(state: SessionState, reply: Reply) -> Self {
        Transition { next: state, reply: Some(reply), action: Action::None }
    }

    fn to(next: SessionState, reply: Reply) -> Self {
        Transition { next, reply: Some(reply), action: Action::None }
    }

    fn silent(next: SessionState) -> Self {
        Transition { next, reply: None, action: Action::None }
    }
}

// Fixed replies. These are all statically valid, hence the expect.
fn rep(reply: Result<Reply, ProtocolError>) -> Reply {
    reply.expect("static reply is valid")
}

/// `220 <hostname> <banner_tag>` opening banner.
pub fn greet(policy: &Policy) -> Reply {
    rep(Reply::basic(220, format!("{} {}", policy.server_hostname, policy.banner_tag)))
}

fn helo_ok(policy: &Policy) -> Reply {
    rep(Reply::basic(250, policy.server_hostname.clone()))
}

fn ehlo_ok(policy: &Policy) -> Reply {
    rep(Reply::new(250, None, policy.ehlo_lines()))
}

fn envelope_ok() -> Reply {
    rep(Reply::enhanced(250, (2, 1, 5), "Ok"))
}

fn ok() -> Reply {
    rep(Reply::enhanced(250, (2, 0, 0), "Ok"))
}

fn bad_sequence() -> Reply {
    rep(Reply::enhanced(503, (5, 5, 1), "Bad sequence of commands"))
}

fn not_recognized() -> Reply {
    rep(Reply::enhanced(500, (5, 5, 2), "Command not recognized"))
}

fn not_logged_in(reverse_path: &EmailAddress) -> Reply {
    rep(Reply::enhanced(
        553,
        (5, 7, 1),
        format!("{reverse_path}: Sender address rejected: not logged in"),
    ))
}

fn bad_address() -> Reply {
    rep(Reply::enhanced(553, (5, 1, 7), "Bad address syntax"))
}

fn line_too_long() -> Reply {
    rep(Reply::enhanced(500, (5, 5, 2), "Line too long"))
}

fn username_prompt() -> Reply {
    // "Username:" in Base64.
    rep(Reply::basic(334, "VXNlcm5hbWU6"))
}

fn password_prompt() -> Reply {
    // "Password:" in Base64.
    rep(Reply::basic(334, "UGFzc3dvcmQ6"))
}

fn plain_prompt() -> Reply {
    rep(Reply::basic(334, ""))
}

fn auth_ok() -> Reply {
    rep(Reply::enhanced(235, (2, 7, 0), "Authentication successful"))
}

fn auth_failed() -> Reply {
    rep(Reply::enhanced(535, (5, 7, 8), "Authentication failed"))
}

fn data_prompt() -> Reply {
    rep(Reply::basic(354, "End data with <CR><LF>.<CR><LF>"))
}

fn queued(id: &QueueId) -> Reply {
    rep(Reply::enhanced(250, (2, 0, 0), format!("Ok: queued as {id}")))
}

fn bye() -> Reply {
    rep(Reply::enhanced(221, (2, 0, 0), "Bye"))
}

fn tls_unavailable() -> Reply {
    rep(Reply::enhanced(454, (4, 7, 0), "TLS not available"))
}

fn message_too_big() -> Reply {
    rep(Reply::enhanced(552, (5, 3, 4), "Message size exceeds limit"))
}

/// Sent by the driver when the per-command timer expires.
pub fn timeout_reply() -> Reply {
    rep(Reply::enhanced(421, (4, 4, 2), "Timeout"))
}

/// Sent by the driver when spooling fails; the connection is then aborted.
pub fn spool_failure_reply() -> Reply {
    rep(Reply::enhanced(421, (4, 3, 0), "Local queue error"))
}

/// One input to [`step`]: a parsed command, or the raw line an auth exchange
/// or DATA section consumes verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Command(Command),
    Line(String),
}

/// Classify `line` for the current state and step the automaton. Parse
/// failures become protocol replies, never errors.
pub fn step_line(
    state: SessionState,
    line: &str,
    policy: &Policy,
    credentials: &CredentialStore,
    ids: &mut QueueIdGen,
) -> Transition {
    if state.expects_raw_line() {
        return step(state, Input::Line(line.to_string()), policy, credentials, ids);
    }
    match parse_command(line) {
        Ok(cmd) => step(state, Input::Command(cmd), policy, credentials, ids),
        Err(ProtocolError::MalformedAddress(_)) => Transition::stay(state, bad_address()),
        Err(ProtocolError::LineTooLong(_)) => Transition::stay(state, line_too_long()),
        Err(_) => Transition::stay(state, not_recognized()),
    }
}

/// Advance the automaton by one input. Total: every input in every state
/// maps to a transition; protocol violations are replies, not faults.
pub fn step(
    state: SessionState,
    input: Input,
    policy: &Policy,
    credentials: &CredentialStore,
    ids: &mut QueueIdGen,
) -> Transition {
    match input {
        Input::Line(line) => step_raw_line(state, line, policy, credentials, ids),
        Input::Command(cmd) => step_command(state, cmd, policy, credentials),
    }
}

fn step_command(
    state: SessionState,
    cmd: Command,
    policy: &Policy,
    credentials: &CredentialStore,
) -> Transition {
    use SessionState as S;

    // Commands with the same meaning in every usable command state.
    // A closed session answers 503 to everything, so it is excluded.
    if !state.expects_raw_line() && state != S::Closed {
        match &cmd {
            Command::Quit => {
                return Transition {
                    next: S::Closed,
                    reply: Some(bye()),
                    action: Action::Close,
                }
            }
            Command::Noop => return Transition::stay(state, ok()),
            Command::Unknown(_) => return Transition::stay(state, not_recognized()),
            _ => {}
        }
    }

    match state {
        S::Connected => match cmd {
            Command::Helo(client) => Transition::to(S::Greeted { client }, helo_ok(policy)),
            Command::Ehlo(client) => Transition::to(S::Greeted { client }, ehlo_ok(policy)),
            Command::Rset => Transition::stay(S::Connected, ok()),
            _ => Transition::stay(S::Connected, bad_sequence()),
        },

        S::Greeted { client } => match cmd {
            Command::Helo(client) => Transition::to(S::Greeted { client }, helo_ok(policy)),
            Command::Ehlo(client) => Transition::to(S::Greeted { client }, ehlo_ok(policy)),
            Command::Rset => Transition::stay(S::Greeted { client }, ok()),
            Command::StartTls => Transition::stay(S::Greeted { client }, tls_unavailable()),
            Command::AuthLogin => {
                Transition::to(S::AuthAwaitingUsername { client }, username_prompt())
            }
            Command::AuthPlain(Some(blob)) => auth_plain_outcome(client, &blob, credentials),
            Command::AuthPlain(None) => {
                Transition::to(S::AuthAwaitingPlain { client }, plain_prompt())
            }
            Command::Mail(reverse_path) => match policy.mode {
                Mode::Open => Transition::to(
                    S::EnvelopeOpen {
                        client,
                        authenticated: None,
                        reverse_path,
                        forward_paths: Vec::new(),
                    },
                    envelope_ok(),
                ),
                // The hardening: reject and wait for the proper command.
                Mode::AuthRequired => {
                    let reply = not_logged_in(&reverse_path);
                    Transition::stay(S::Greeted { client }, reply)
                }
            },
            _ => Transition::stay(S::Greeted { client }, bad_sequence()),
        },

        S::Authenticated { client, username } => match cmd {
            Command::Helo(new_client) => {
                Transition::to(S::Authenticated { client: new_client, username }, helo_ok(policy))
            }
            Command::Ehlo(new_client) => {
                Transition::to(S::Authenticated { client: new_client, username }, ehlo_ok(policy))
            }
            Command::Rset => Transition::stay(S::Authenticated { client, username }, ok()),
            Command::StartTls => {
                Transition::stay(S::Authenticated { client, username }, tls_unavailable())
            }
            Command::Mail(reverse_path) => Transition::to(
                S::EnvelopeOpen {
                    client,
                    authenticated: Some(username),
                    reverse_path,
                    forward_paths: Vec::new(),
                },
                envelope_ok(),
            ),
            // Including a second AUTH after success.
            _ => Transition::stay(S::Authenticated { client, username }, bad_sequence()),
        },

        S::EnvelopeOpen { client, authenticated, reverse_path, mut forward_paths } => match cmd {
            Command::Rcpt(addr) => {
                forward_paths.push(addr);
                Transition::to(
                    S::EnvelopeOpen { client, authenticated, reverse_path, forward_paths },
                    envelope_ok(),
                )
            }
            Command::Data if forward_paths.is_empty() => Transition::stay(
                S::EnvelopeOpen { client, authenticated, reverse_path, forward_paths },
                bad_sequence(),
            ),
            Command::Data => Transition::to(
                S::ReceivingData {
                    client,
                    authenticated,
                    reverse_path,
                    forward_paths,
                    lines: Vec::new(),
                    bytes: 0,
                },
                data_prompt(),
            ),
            Command::Rset => Transition::to(after_transaction(client, authenticated), ok()),
            Command::Helo(new_client) => {
                Transition::to(after_transaction(new_client, authenticated), helo_ok(policy))
            }
            Command::Ehlo(new_client) => {
                Transition::to(after_transaction(new_client, authenticated), ehlo_ok(policy))
            }
            Command::StartTls => Transition::stay(
                S::EnvelopeOpen { client, authenticated, reverse_path, forward_paths },
                tls_unavailable(),
            ),
            _ => Transition::stay(
                S::EnvelopeOpen { client, authenticated, reverse_path, forward_paths },
                bad_sequence(),
            ),
        },

        S::Closed => Transition::stay(S::Closed, bad_sequence()),

        // A command fed to a raw-line state violates the step_line contract;
        // answer like any other out-of-order input.
        s => Transition::stay(s, bad_sequence()),
    }
}

/// Post-transaction resting state: authentication survives, envelopes do not.
fn after_transaction(client: String, authenticated: Option<String>) -> SessionState {
    match authenticated {
        Some(username) => SessionState::Authenticated { client, username },
        None => SessionState::Greeted { client },
    }
}

fn step_raw_line(
    state: SessionState,
    line: String,
    policy: &Policy,
    credentials: &CredentialStore,
    ids: &mut QueueIdGen,
) -> Transition {
    use SessionState as S;
    match state {
        S::AuthAwaitingUsername { client } => match decode_text(&line) {
            Some(username) => {
                Transition::to(S::AuthAwaitingPassword { client, username }, password_prompt())
            }
            None => Transition::to(S::Greeted { client }, auth_failed()),
        },

        S::AuthAwaitingPassword { client, username } => match decode_text(&line) {
            Some(password) if credentials.verify(&username, &password) => {
                Transition::to(S::Authenticated { client, username }, auth_ok())
            }
            _ => Transition::to(S::Greeted { client }, auth_failed()),
        },

        S::AuthAwaitingPlain { client } => auth_plain_outcome(client, &line, credentials),

        S::ReceivingData {
            client,
            authenticated,
            reverse_path,
            forward_paths,
            mut lines,
            mut bytes,
        } => {
            if line == "." {
                if bytes > policy.max_message_size {
                    return Transition::to(after_transaction(client, authenticated), message_too_big());
                }
                let data = if lines.is_empty() {
                    String::new()
                } else {
                    let mut d = lines.join("\r\n");
                    d.push_str("\r\n");
                    d
                };
                let queue_id = ids.next_id();
                let reply = queued(&queue_id);
                Transition {
                    next: after_transaction(client, authenticated.clone()),
                    reply: Some(reply),
                    action: Action::Enqueue {
                        queue_id,
                        envelope: Envelope { reverse_path, forward_paths },
                        authenticated_as: authenticated,
                        data,
                    },
                }
            } else {
                bytes += line.len() + 2;
                if bytes <= policy.max_message_size {
                    let unstuffed = line.strip_prefix('.').unwrap_or(&line);
                    lines.push(unstuffed.to_string());
                } else {
                    // Over the limit: stop buffering, keep counting.
                    lines.clear();
                }
                Transition::silent(S::ReceivingData {
                    client,
                    authenticated,
                    reverse_path,
                    forward_paths,
                    lines,
                    bytes,
                })
            }
        }

        // Raw line fed to a command state: caller contract violation.
        s => Transition::stay(s, bad_sequence()),
    }
}

/// AUTH PLAIN blob: base64 of `authzid NUL authcid NUL passwd`.
fn auth_plain_outcome(client: String, blob: &str, credentials: &CredentialStore) -> Transition {
    if let Some(decoded) = decode_text(blob) {
        let parts: Vec<&str> = decoded.split('\0').collect();
        if let [_authzid, authcid, password] = parts[..] {
            if credentials.verify(authcid, password) {
                return Transition::to(
                    SessionState::Authenticated { client, username: authcid.to_string() },
                    auth_ok(),
                );
            }
        }
    }
    Transition::to(SessionState::Greeted { client }, auth_failed())
}

/// Run a whole scripted dialogue from the Connected state; the greeting is
/// the first reply. Used by tests and the audit module's local oracle.
pub fn replay_transcript<S: AsRef<str>>(
    lines: &[S],
    policy: &Policy,
    credentials: &CredentialStore,
    ids: &mut QueueIdGen,
) -> Vec<Reply> {
    let mut replies = vec![greet(policy)];
    let mut state = SessionState::Connected;
    for line in lines {
        let t = step_line(state, line.as_ref(), policy, credentials, ids);
        state = t.next;
        if let Some(reply) = t.reply {
            replies.push(reply);
        }
    }
    replies
}

fn decode_text(line: &str) -> Option<String> {
    let bytes = decode_base64(line.trim()).ok()?;
    String::from_utf8(bytes).ok()
}
