//! Credential storage, queue ids, message spooling, the connection driver,
//! and the TCP front-end binding sessions to sockets.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::EmailAddress;
use crate::session::{self, Action, Policy, SessionState};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("could not bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("spool I/O error: {0}")]
    SpoolIo(#[source] io::Error),
    #[error("invalid username {0:?}: must be non-empty and contain no ':'")]
    InvalidUsername(String),
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("credentials file {path}: {source}")]
    CredentialsIo { path: PathBuf, source: io::Error },
    #[error("credentials file {path}: {source}")]
    CredentialsFormat { path: PathBuf, source: serde_json::Error },
    #[error("invalid policy: {0}")]
    Policy(#[from] session::SessionError),
}

/// Salted password digest: `salt` is 16 random bytes hex-encoded, `digest`
/// is SHA-256(salt-bytes || password-bytes) hex-encoded.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CredentialRecord {
    pub salt: String,
    pub digest: String,
}

/// Username to salted-digest map, the authentication back-end.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(transparent)]
pub struct CredentialStore {
    users: BTreeMap<String, CredentialRecord>,
}

fn digest_hex(salt: &[u8], password: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(password.as_bytes());
    hex::encode(hasher.finalize())
}

impl CredentialStore {
    pub fn new() -> Self {
        CredentialStore::default()
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn usernames(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    /// Add or replace a user with a freshly generated random salt.
    pub fn add_user(&mut self, username: &str, password: &str) -> Result<(), ServerError> {
        let mut salt = [0u8; 16];
        rand::rngs::OsRng.fill_bytes(&mut salt);
        self.add_user_with_salt(username, password, salt)
    }

    /// Deterministic variant for tests and seeded fixtures.
    pub fn add_user_with_salt(
        &mut self,
        username: &str,
        password: &str,
        salt: [u8; 16],
    ) -> Result<(), ServerError> {
        if username.is_empty() || username.contains(':') {
            return Err(ServerError::InvalidUsername(username.to_string()));
        }
        let record = CredentialRecord {
            salt: hex::encode(salt),
            digest: digest_hex(&salt, password),
        };
        self.users.insert(username.to_string(), record);
        Ok(())
    }

    /// True iff the salted digest of `password` matches the stored one.
    /// Unknown users go through the same digest computation so lookups do
    /// not reveal which usernames exist.
    pub fn verify(&self, username: &str, password: &str) -> bool {
        static DUMMY_SALT: [u8; 16] = [0x5a; 16];
        match self.users.get(username) {
            Some(record) => {
                let salt = hex::decode(&record.salt).unwrap_or_else(|_| DUMMY_SALT.to_vec());
                let computed = digest_hex(&salt, password);
                constant_time_eq(computed.as_bytes(), record.digest.as_bytes())
            }
            None => {
                let computed = digest_hex(&DUMMY_SALT, password);
                constant_time_eq(computed.as_bytes(), b"") & false
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ServerError::CredentialsIo { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text)
            .map_err(|source| ServerError::CredentialsFormat { path: path.to_path_buf(), source })
    }

    pub fn save(&self, path: &Path) -> Result<(), ServerError> {
        let text = serde_json::to_string_pretty(self).expect("credential map serializes");
        fs::write(path, text)
            .map_err(|source| ServerError::CredentialsIo { path: path.to_path_buf(), source })
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Opaque message identifier: 11 uppercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueueId(String);

impl QueueId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_valid(text: &str) -> bool {
        text.len() == 11 && text.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b))
    }
}

impl std::fmt::Display for QueueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Random queue-id source; seedable so harness runs are reproducible.
/// Ids are unique within one generator's lifetime.
#[derive(Debug, Clone)]
pub struct QueueIdGen {
    rng: ChaCha12Rng,
    issued: HashSet<u64>,
}

impl QueueIdGen {
    pub fn seeded(seed: u64) -> Self {
        QueueIdGen { rng: ChaCha12Rng::seed_from_u64(seed), issued: HashSet::new() }
    }

    pub fn from_entropy() -> Self {
        QueueIdGen { rng: ChaCha12Rng::from_entropy(), issued: HashSet::new() }
    }

    pub fn next_id(&mut self) -> QueueId {
        loop {
            // 44 bits -> exactly 11 hex digits.
            let v = self.rng.next_u64() & 0xFFF_FFFF_FFFF;
            if self.issued.insert(v) {
                return QueueId(format!("{v:011X}"));
            }
        }
    }
}

/// A message accepted for delivery, as recorded in the spool.
/// The metadata goes to `<id>.json`; `raw_data` goes verbatim to `<id>.eml`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpooledMessage {
    pub queue_id: QueueId,
    pub received_at: DateTime<Utc>,
    pub reverse_path: EmailAddress,
    pub forward_paths: Vec<EmailAddress>,
    pub authenticated_as: Option<String>,
    #[serde(skip)]
    pub raw_data: String,
}

/// Write `<queue_id>.json` and `<queue_id>.eml` into `spool_dir`, durably
/// (write + fsync + rename). Returns the `.eml` path.
pub fn spool(message: &SpooledMessage, spool_dir: &Path) -> Result<PathBuf, ServerError> {
    let json = serde_json::to_string_pretty(message).expect("spool metadata serializes");
    write_durable(spool_dir, &format!("{}.json", message.queue_id), json.as_bytes())?;
    write_durable(spool_dir, &format!("{}.eml", message.queue_id), message.raw_data.as_bytes())
}

fn write_durable(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, ServerError> {
    let final_path = dir.join(name);
    let tmp_path = dir.join(format!(".{name}.tmp"));
    let write = || -> io::Result<()> {
        let mut file = fs::File::create(&tmp_path)?;
        file.write_all(contents)?;
        file.sync_all()?;
        fs::rename(&tmp_path, &final_path)
    };
    write().map_err(ServerError::SpoolIo)?;
    Ok(final_path)
}

/// Destination for accepted messages; the TCP server spools to disk, the
/// loopback harness collects in memory.
pub trait MessageStore: Send + Sync {
    fn store(&self, message: &SpooledMessage) -> Result<(), ServerError>;
}

pub struct DirSpool {
    dir: PathBuf,
}

impl DirSpool {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirSpool { dir: dir.into() }
    }
}

impl MessageStore for DirSpool {
    fn store(&self, message: &SpooledMessage) -> Result<(), ServerError> {
        spool(message, &self.dir).map(|_| ())
    }
}

#[derive(Default, Clone)]
pub struct MemorySpool {
    messages: Arc<Mutex<Vec<SpooledMessage>>>,
}

impl MemorySpool {
    pub fn new() -> Self {
        MemorySpool::default()
    }

    pub fn messages(&self) -> Vec<SpooledMessage> {
        self.messages.lock().unwrap().clone()
    }
}

impl MessageStore for MemorySpool {
    fn store(&self, message: &SpooledMessage) -> Result<(), ServerError> {
        self.messages.lock().unwrap().push(message.clone());
        Ok(())
    }
}

/// Line-oriented connection as the driver sees it: TCP socket or in-memory
/// pipe. `read_line` returns the line with its terminator so the data path
/// stays byte-faithful; `None` means the peer closed.
pub trait LineIo {
    fn read_line(&mut self, timeout: Duration) -> io::Result<Option<String>>;
    fn write_str(&mut self, text: &str) -> io::Result<()>;
}

/// Strip exactly one trailing CRLF or bare LF.
pub fn strip_line_ending(line: &str) -> &str {
    line.strip_suffix("\r\n")
        .or_else(|| line.strip_suffix('\n'))
        .unwrap_or(line)
}

/// Largest buffered wire line; beyond this the connection is dropped.
const MAX_WIRE_LINE: usize = 64 * 1024;

pub struct TcpLineIo {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl TcpLineIo {
    pub fn new(stream: TcpStream) -> Self {
        TcpLineIo { stream, buf: Vec::new() }
    }
}

impl LineIo for TcpLineIo {
    fn read_line(&mut self, timeout: Duration) -> io::Result<Option<String>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                let rest = self.buf.split_off(pos + 1);
                let line = std::mem::replace(&mut self.buf, rest);
                return Ok(Some(String::from_utf8_lossy(&line).into_owned()));
            }
            if self.buf.len() > MAX_WIRE_LINE {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "wire line too long"));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "command timeout"));
            }
            self.stream.set_read_timeout(Some(remaining))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    if self.buf.is_empty() {
                        return Ok(None);
                    }
                    // Final unterminated line.
                    let line = std::mem::take(&mut self.buf);
                    return Ok(Some(String::from_utf8_lossy(&line).into_owned()));
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "command timeout"));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }

    fn write_str(&mut self, text: &str) -> io::Result<()> {
        self.stream.write_all(text.as_bytes())?;
        self.stream.flush()
    }
}

/// Everything one session needs besides its socket.
pub struct SessionHost<'a> {
    pub policy: &'a Policy,
    pub credentials: &'a CredentialStore,
    pub ids: Arc<Mutex<QueueIdGen>>,
    pub store: &'a dyn MessageStore,
}

/// Drive one connection: greeting, then the step loop, until QUIT, EOF,
/// timeout, or I/O error. Accepted messages are stored durably before the
/// 250 acknowledgement is written.
pub fn run_session(io: &mut dyn LineIo, host: &SessionHost) -> io::Result<()> {
    io.write_str(&session::greet(host.policy).render())?;
    let mut state = SessionState::Connected;
    loop {
        let line = match io.read_line(host.policy.command_timeout) {
            Ok(Some(line)) => line,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::TimedOut => {
                let _ = io.write_str(&session::timeout_reply().render());
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let line = strip_line_ending(&line);
        let transition = {
            let mut ids = host.ids.lock().unwrap();
            session::step_line(state, line, host.policy, host.credentials, &mut ids)
        };
        state = transition.next;
        if let Action::Enqueue { queue_id, envelope, authenticated_as, data } = transition.action {
            let message = SpooledMessage {
                queue_id,
                received_at: Utc::now(),
                reverse_path: envelope.reverse_path,
                forward_paths: envelope.forward_paths,
                authenticated_as,
                raw_data: data,
            };
            if let Err(err) = host.store.store(&message) {
                log::error!("spool failure: {err}");
                let _ = io.write_str(&session::spool_failure_reply().render());
                return Ok(());
            }
        }
        if let Some(reply) = &transition.reply {
            io.write_str(&reply.render())?;
        }
        if state == SessionState::Closed {
            return Ok(());
        }
    }
}

pub const DEFAULT_MAX_CONNECTIONS: usize = 64;

pub struct ServerConfig {
    pub policy: Policy,
    pub credentials: CredentialStore,
    pub spool_dir: PathBuf,
    pub max_connections: usize,
    /// Fixed seed for reproducible queue ids (tests); None draws entropy.
    pub queue_seed: Option<u64>,
}

impl ServerConfig {
    pub fn new(policy: Policy, credentials: CredentialStore, spool_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            policy,
            credentials,
            spool_dir: spool_dir.into(),
            max_connections: DEFAULT_MAX_CONNECTIONS,
            queue_seed: None,
        }
    }
}

/// A running listener; dropping the handle does not stop it, call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: thread::JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.accept_thread.join();
    }
}

/// Bind and start accepting in a background thread.
pub fn spawn(config: ServerConfig, bind: impl ToSocketAddrs + std::fmt::Display) -> Result<ServerHandle, ServerError> {
    config.policy.validate()?;
    fs::create_dir_all(&config.spool_dir).map_err(ServerError::SpoolIo)?;
    let listener = TcpListener::bind(&bind)
        .map_err(|source| ServerError::Bind { addr: bind.to_string(), source })?;
    let addr = listener.local_addr().map_err(ServerError::SpoolIo)?;
    listener.set_nonblocking(true).map_err(ServerError::SpoolIo)?;

    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let ids = Arc::new(Mutex::new(match config.queue_seed {
        Some(seed) => QueueIdGen::seeded(seed),
        None => QueueIdGen::from_entropy(),
    }));
    let shared = Arc::new((config.policy, config.credentials, DirSpool::new(config.spool_dir)));
    let max_connections = config.max_connections;
    let active = Arc::new(AtomicUsize::new(0));

    let accept_thread = thread::spawn(move || {
        log::info!("listening on {addr}");
        loop {
            if stop_flag.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, peer)) => {
                    if active.load(Ordering::SeqCst) >= max_connections {
                        log::warn!("{peer}: refused, connection limit reached");
                        let mut io = TcpLineIo::new(stream);
                        let _ = io.write_str("421 4.3.2 Too many connections\r\n");
                        continue;
                    }
                    active.fetch_add(1, Ordering::SeqCst);
                    let shared = shared.clone();
                    let ids = ids.clone();
                    let active = active.clone();
                    thread::spawn(move || {
                        log::info!("{peer}: connected");
                        let (policy, credentials, store) = &*shared;
                        let host = SessionHost { policy, credentials, ids, store };
                        let mut io = TcpLineIo::new(stream);
                        if let Err(err) = run_session(&mut io, &host) {
                            log::warn!("{peer}: session error: {err}");
                        }
                        log::info!("{peer}: closed");
                        active.fetch_sub(1, Ordering::SeqCst);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(25));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });

    Ok(ServerHandle { addr, stop, accept_thread })
}

/// Blocking variant: accept until the process is interrupted.
pub fn serve(config: ServerConfig, bind: impl ToSocketAddrs + std::fmt::Display) -> Result<(), ServerError> {
    let handle = spawn(config, bind)?;
    // The accept thread only exits on shutdown(), which nothing calls here.
    handle.accept_thread.join().ok();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_store() -> CredentialStore {
        let mut store = CredentialStore::new();
        store.add_user_with_salt("secr", "s3cret", [7u8; 16]).unwrap();
        store
    }

    #[test]
    fn verify_accepts_the_right_password() {
        let store = seeded_store();
        assert!(store.verify("secr", "s3cret"));
    }

    #[test]
    fn verify_rejects_wrong_password_and_unknown_user() {
        let store = seeded_store();
        assert!(!store.verify("secr", "wrong"));
        assert!(!store.verify("ghost", "s3cret"));
    }

    #[test]
    fn usernames_are_validated() {
        let mut store = CredentialStore::new();
        assert!(matches!(store.add_user("", "x"), Err(ServerError::InvalidUsername(_))));
        assert!(matches!(store.add_user("a:b", "x"), Err(ServerError::InvalidUsername(_))));
    }

    #[test]
    fn credentials_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users.json");
        let mut store = CredentialStore::new();
        store.add_user("secr", "s3cret").unwrap();
        store.add_user("other", "pw").unwrap();
        store.save(&path).unwrap();
        let loaded = CredentialStore::load(&path).unwrap();
        assert_eq!(loaded, store);
        assert!(loaded.verify("secr", "s3cret"));
        // The file is a plain {username: {salt, digest}} JSON map.
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert!(value.get("secr").and_then(|u| u.get("salt")).is_some());
        assert!(value.get("secr").and_then(|u| u.get("digest")).is_some());
    }

    #[test]
    fn queue_ids_have_the_fig1_shape() {
        assert!(QueueId::is_valid("492381B9295"));
        assert!(!QueueId::is_valid("492381b9295"));
        assert!(!QueueId::is_valid("492381B929"));
        let mut ids = QueueIdGen::from_entropy();
        for _ in 0..1000 {
            let id = ids.next_id();
            assert!(QueueId::is_valid(id.as_str()), "bad id {id}");
        }
    }

    #[test]
    fn seeded_queue_ids_are_stable() {
        let mut ids = QueueIdGen::seeded(42);
        let first = ids.next_id();
        // Golden value captured from ChaCha12Rng::seed_from_u64(42).
        assert_eq!(first.as_str(), GOLDEN_SEED42_FIRST_ID);
        let mut again = QueueIdGen::seeded(42);
        assert_eq!(again.next_id(), first);
    }

    // Captured once at first implementation; the generator must never drift.
    const GOLDEN_SEED42_FIRST_ID: &str = "763222724A2";

    #[test]
    fn queue_ids_are_unique_across_many_draws() {
        let mut ids = QueueIdGen::seeded(7);
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            assert!(seen.insert(ids.next_id()));
        }
    }

    fn sample_message() -> SpooledMessage {
        SpooledMessage {
            queue_id: QueueIdGen::seeded(1).next_id(),
            received_at: Utc::now(),
            reverse_path: EmailAddress::parse("secr@mail.gr").unwrap(),
            forward_paths: vec![EmailAddress::parse("professor@mail.gr").unwrap()],
            authenticated_as: None,
            raw_data: "Subject: x\r\n\r\nbody\r\n".to_string(),
        }
    }

    #[test]
    fn spool_writes_both_files_and_eml_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let message = sample_message();
        let eml_path = spool(&message, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&eml_path).unwrap(), message.raw_data);
        let json_path = dir.path().join(format!("{}.json", message.queue_id));
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(json_path).unwrap()).unwrap();
        assert_eq!(value["queue_id"], message.queue_id.as_str());
        assert_eq!(value["reverse_path"], "secr@mail.gr");
        assert_eq!(value["authenticated_as"], serde_json::Value::Null);
        // RFC 3339 timestamp.
        assert!(value["received_at"].as_str().unwrap().contains('T'));
    }

    #[test]
    fn spool_into_unusable_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file_path = dir.path().join("not-a-dir");
        fs::write(&file_path, b"x").unwrap();
        let err = spool(&sample_message(), &file_path).unwrap_err();
        assert!(matches!(err, ServerError::SpoolIo(_)));
    }

    #[test]
    fn spooled_empty_body_message_keeps_headers_and_blank_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut message = sample_message();
        message.raw_data = "Subject: x\r\n\r\n".to_string();
        let eml = spool(&message, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(eml).unwrap(), "Subject: x\r\n\r\n");
    }
}
