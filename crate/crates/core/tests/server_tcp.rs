//! End-to-end tests over real sockets: spooling, concurrency, failure
//! paths, the wall-clock command timeout, and the adduser binary.

use std::io::Write as _;
use std::net::TcpStream;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};

use mailvet::protocol::{encode_base64, MailMessage};
use mailvet::server::{
    spawn, CredentialStore, LineIo, QueueId, ServerConfig, ServerHandle, TcpLineIo,
};
use mailvet::session::{Mode, Policy};
use mailvet::testkit::{
    loopback_session, read_reply, spoofed_invitation_script, tcp_session, ScriptedClient,
};

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

fn open_policy() -> Policy {
    Policy::open("smtp.mail.gr").unwrap()
}

fn auth_policy() -> Policy {
    Policy::auth_required("smtp.mail.gr").unwrap()
}

fn secr_credentials() -> CredentialStore {
    let mut store = CredentialStore::new();
    store.add_user_with_salt("secr", "s3cret", [5u8; 16]).unwrap();
    store
}

fn start(policy: Policy, credentials: CredentialStore, spool: &std::path::Path) -> ServerHandle {
    spawn(ServerConfig::new(policy, credentials, spool), "127.0.0.1:0").unwrap()
}

#[test]
fn open_server_spools_the_forged_message() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(open_policy(), CredentialStore::new(), dir.path());
    let run = tcp_session(server.addr(), &spoofed_invitation_script()).unwrap();
    assert_eq!(run.outcome, Ok(()));
    server.shutdown();

    let mut emls: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "eml"))
        .collect();
    assert_eq!(emls.len(), 1, "expected exactly one spooled message");
    let raw = std::fs::read_to_string(emls.pop().unwrap()).unwrap();
    let message = MailMessage::parse(&raw);
    // The forged sender lands verbatim in the stored headers.
    assert_eq!(message.header("From"), Some("\"Secretary\" <secr@mail.gr>"));
    assert_eq!(message.header("Subject"), Some("Board of Examiners"));
}

#[test]
fn auth_server_rejects_the_same_script_and_spools_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(auth_policy(), secr_credentials(), dir.path());
    let run = tcp_session(server.addr(), &spoofed_invitation_script()).unwrap();
    server.shutdown();

    let mismatch = run.outcome.unwrap_err();
    assert!(mismatch.got.contains("553"), "expected the 553 rejection, got {mismatch}");
    let spooled = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(spooled, 0, "auth-required server spooled a message");
}

fn send(io: &mut TcpLineIo, line: &str) {
    io.write_str(&format!("{line}\r\n")).unwrap();
}

fn recv_code(io: &mut TcpLineIo) -> (u16, String) {
    let (reply, lines, _) = read_reply(io, REPLY_TIMEOUT).unwrap().unwrap();
    (reply.code(), lines.join("\n"))
}

#[test]
fn queued_ack_arrives_only_after_both_spool_files_exist() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(open_policy(), CredentialStore::new(), dir.path());
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut io = TcpLineIo::new(stream);

    assert_eq!(recv_code(&mut io).0, 220);
    for line in ["EHLO t", "MAIL FROM:<a@b.c>", "RCPT TO:<d@e.f>"] {
        send(&mut io, line);
        assert_eq!(recv_code(&mut io).0, 250);
    }
    send(&mut io, "DATA");
    assert_eq!(recv_code(&mut io).0, 354);
    send(&mut io, "Subject: durability");
    send(&mut io, "");
    send(&mut io, "check");
    send(&mut io, ".");
    let (code, text) = recv_code(&mut io);
    assert_eq!(code, 250);
    let id = text.rsplit(' ').next().unwrap().to_string();
    assert!(QueueId::is_valid(&id), "bad id in {text:?}");

    // The ack has been received; both files must already be durable.
    assert!(dir.path().join(format!("{id}.json")).exists(), "missing {id}.json at ack time");
    assert!(dir.path().join(format!("{id}.eml")).exists(), "missing {id}.eml at ack time");

    send(&mut io, "QUIT");
    assert_eq!(recv_code(&mut io).0, 221);
    server.shutdown();
}

#[test]
fn concurrent_clients_get_distinct_queue_ids() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(open_policy(), CredentialStore::new(), dir.path());
    let addr = server.addr();

    let client = move |n: usize| {
        let script = ScriptedClient::new()
            .send("EHLO concurrent")
            .expect_code(250)
            .send(format!("MAIL FROM:<c{n}@mail.gr>"))
            .expect_code(250)
            .send("RCPT TO:<professor@mail.gr>")
            .expect_code(250)
            .send("DATA")
            .expect_code(354)
            .send(format!("client {n} body"))
            .send(".")
            .expect_containing("queued as")
            .send("QUIT")
            .expect_code(221);
        tcp_session(addr, &script)
    };
    let handles: Vec<_> = (0..2).map(|n| thread::spawn(move || client(n))).collect();
    let runs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
    for run in &runs {
        assert_eq!(run.outcome, Ok(()));
    }
    server.shutdown();

    let mut ids: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 2, "expected two distinct queue ids, got {ids:?}");
}

#[test]
fn spool_failure_aborts_with_421_and_no_ack() {
    let dir = tempfile::tempdir().unwrap();
    let spool_dir = dir.path().join("spool");
    let server = start(open_policy(), CredentialStore::new(), &spool_dir);

    // Sabotage the spool after startup: the directory becomes a file, so
    // every write under it fails regardless of privileges.
    std::fs::remove_dir_all(&spool_dir).unwrap();
    std::fs::write(&spool_dir, b"not a directory").unwrap();

    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut io = TcpLineIo::new(stream);
    assert_eq!(recv_code(&mut io).0, 220);
    for line in ["EHLO t", "MAIL FROM:<a@b.c>", "RCPT TO:<d@e.f>"] {
        send(&mut io, line);
        assert_eq!(recv_code(&mut io).0, 250);
    }
    send(&mut io, "DATA");
    assert_eq!(recv_code(&mut io).0, 354);
    send(&mut io, "doomed");
    send(&mut io, ".");
    let (code, text) = recv_code(&mut io);
    assert_eq!(code, 421, "expected spool failure abort, got {text:?}");
    // And the connection is gone.
    assert!(io.read_line(REPLY_TIMEOUT).unwrap().is_none());
    server.shutdown();
}

#[test]
fn connection_cap_turns_extra_clients_away_with_421() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServerConfig::new(open_policy(), CredentialStore::new(), dir.path());
    config.max_connections = 1;
    let server = spawn(config, "127.0.0.1:0").unwrap();

    let first = TcpStream::connect(server.addr()).unwrap();
    let mut first_io = TcpLineIo::new(first);
    assert_eq!(recv_code(&mut first_io).0, 220);

    let second = TcpStream::connect(server.addr()).unwrap();
    let mut second_io = TcpLineIo::new(second);
    let (code, text) = recv_code(&mut second_io);
    assert_eq!(code, 421, "expected turn-away, got {text:?}");

    send(&mut first_io, "QUIT");
    assert_eq!(recv_code(&mut first_io).0, 221);
    server.shutdown();
}

#[test]
fn idle_tcp_connection_times_out_with_421() {
    let dir = tempfile::tempdir().unwrap();
    let policy = open_policy().with_command_timeout(Duration::from_millis(300)).unwrap();
    let server = start(policy, CredentialStore::new(), dir.path());
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut io = TcpLineIo::new(stream);
    assert_eq!(recv_code(&mut io).0, 220);
    // Say nothing; the server must hang up with 421 4.4.2.
    let (code, text) = recv_code(&mut io);
    assert_eq!(code, 421);
    assert!(text.contains("4.4.2"), "{text}");
    assert!(io.read_line(REPLY_TIMEOUT).unwrap().is_none());
    server.shutdown();
}

/// Random non-authenticating clients can never get anything into an
/// auth-required server's spool.
#[test]
fn auth_mode_spool_stays_empty_under_command_fuzzing() {
    let pool = [
        "EHLO fuzz",
        "MAIL FROM:<secr@mail.gr>",
        "RCPT TO:<professor@mail.gr>",
        "DATA",
        ".",
        "body text",
        "AUTH LOGIN",
        &encode_base64(b"secr"),
        &encode_base64(b"not-the-password"),
        "RSET",
        "NOOP",
        "STARTTLS",
        "HELP",
    ];
    let policy = auth_policy();
    let credentials = secr_credentials();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xF022);
    for round in 0..200 {
        let mut script = ScriptedClient::new();
        for _ in 0..rng.gen_range(0..25) {
            script = script.send(pool[rng.gen_range(0..pool.len())]);
        }
        // Sends only, no expectations: replies drain when the pipe closes.
        let run = loopback_session(&policy, &credentials, &script, round).unwrap();
        assert!(
            run.messages.is_empty(),
            "round {round}: a non-authenticating client spooled a message"
        );
    }
}

#[test]
fn bare_lf_line_endings_are_tolerated_on_input() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(open_policy(), CredentialStore::new(), dir.path());
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut io = TcpLineIo::new(stream);
    assert_eq!(recv_code(&mut io).0, 220);
    // A hand-driven telnet client often sends bare newlines.
    io.write_str("EHLO telnet-user\nNOOP\nQUIT\n").unwrap();
    assert_eq!(recv_code(&mut io).0, 250);
    assert_eq!(recv_code(&mut io).0, 250);
    assert_eq!(recv_code(&mut io).0, 221);
    server.shutdown();
}

#[test]
fn adduser_binary_creates_credentials_that_really_authenticate() {
    let dir = tempfile::tempdir().unwrap();
    let users_path = dir.path().join("users.json");

    let mut child = Command::new(env!("CARGO_BIN_EXE_mailvet"))
        .args(["adduser", "--users", users_path.to_str().unwrap(), "--name", "secr", "--json"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.as_mut().unwrap().write_all(b"s3cret\n").unwrap();
    let output = child.wait_with_output().unwrap();
    assert!(output.status.success(), "adduser failed: {output:?}");
    let summary: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("adduser --json emits valid JSON");
    assert_eq!(summary["user"], "secr");
    assert_eq!(summary["replaced"], false);

    let store = CredentialStore::load(&users_path).unwrap();
    assert!(store.verify("secr", "s3cret"));
    assert!(!store.verify("secr", "S3CRET"));

    // The stored credentials drive a real AUTH LOGIN session.
    let server = start(auth_policy(), store, dir.path());
    let script = ScriptedClient::new()
        .send("EHLO www.test.com")
        .expect_code(250)
        .send("AUTH LOGIN")
        .expect_line("334 VXNlcm5hbWU6")
        .send(encode_base64(b"secr"))
        .expect_line("334 UGFzc3dvcmQ6")
        .send(encode_base64(b"s3cret"))
        .expect_line("235 2.7.0 Authentication successful")
        .send("MAIL FROM:<secr@mail.gr>")
        .expect_line("250 2.1.5 Ok")
        .send("QUIT")
        .expect_code(221);
    let run = tcp_session(server.addr(), &script).unwrap();
    assert_eq!(run.outcome, Ok(()));
    server.shutdown();
}

#[test]
fn audit_json_file_report_is_valid_and_carries_the_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(open_policy(), CredentialStore::new(), dir.path());
    let json_path = dir.path().join("report.json");

    let output = Command::new(env!("CARGO_BIN_EXE_mailvet"))
        .args([
            "audit",
            "--host",
            "127.0.0.1",
            "--port",
            &server.addr().port().to_string(),
            "--from",
            "secr@mail.gr",
            "--to",
            "professor@mail.gr",
            "--category",
            "Local test",
            "--json",
            json_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    server.shutdown();
    assert_eq!(output.status.code(), Some(1), "open server should yield exit 1");
    // Table still lands on stdout when --json has a file argument.
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("Mail servers"), "{stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let result = &report["results"][0];
    assert_eq!(result["verdict"], "Vulnerable");
    assert_eq!(result["category"], "Local test");
    assert_eq!(result["mail_server"], "127.xx.yy.zz");
    let transcript = result["transcript"].as_array().unwrap();
    assert!(transcript.iter().any(|e| e["line"].as_str().unwrap().starts_with("MAIL FROM:")));
    assert!(result["decisive_reply"].as_str().unwrap().starts_with("250"));
}

#[test]
fn serve_mode_flags_match_the_session_modes() {
    // Spot check that ServerConfig propagates the policy mode.
    let dir = tempfile::tempdir().unwrap();
    let server = start(
        Policy::new(Mode::AuthRequired, "smtp.mail.gr").unwrap(),
        secr_credentials(),
        dir.path(),
    );
    let script = ScriptedClient::new()
        .send("EHLO x")
        .expect_code(250)
        .send("MAIL FROM:<a@b.c>")
        .expect_containing("not logged in")
        .send("QUIT")
        .expect_code(221);
    let run = tcp_session(server.addr(), &script).unwrap();
    assert_eq!(run.outcome, Ok(()));
    server.shutdown();
}
