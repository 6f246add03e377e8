//! Client-side spoofing probe: replays the unauthenticated sender dialogue
//! against a target server, classifies the outcome, and renders masked
//! reports. Dry-run by default — without an explicit override the probe
//! never issues DATA, so no mail is ever sent.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::json;

use crate::protocol::{dot_stuff, EmailAddress, MailMessage, Reply};
use crate::server::{
    run_session, CredentialStore, LineIo, MemorySpool, QueueIdGen, SessionHost, TcpLineIo,
};
use crate::session::Policy;
use crate::testkit::{self, read_reply, TranscriptEntry};

pub const DEFAULT_PROBE_PORT: u16 = 25;
pub const DEFAULT_EHLO_NAME: &str = "www.test.com";
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(10);

/// What to probe and with which envelope.
#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub host: String,
    pub port: u16,
    pub ehlo_name: String,
    pub spoofed_from: EmailAddress,
    pub rcpt_to: EmailAddress,
    /// Complete the DATA phase with a self-identifying test message.
    /// False (the default) stops after RCPT and resets the transaction.
    pub send_message: bool,
    pub timeout: Duration,
}

impl ProbeSpec {
    pub fn new(host: &str, spoofed_from: EmailAddress, rcpt_to: EmailAddress) -> Self {
        ProbeSpec {
            host: host.to_string(),
            port: DEFAULT_PROBE_PORT,
            ehlo_name: DEFAULT_EHLO_NAME.to_string(),
            spoofed_from,
            rcpt_to,
            send_message: false,
            timeout: DEFAULT_PROBE_TIMEOUT,
        }
    }

    pub fn target(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    /// The server accepted an unauthenticated forged sender (250).
    Vulnerable,
    /// The server rejected it permanently (5xx, including auth demands).
    Secured,
    /// Connection or protocol failure, or only transient evidence (4xx).
    Indeterminate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let text = match self {
            Verdict::Vulnerable => "Vulnerable",
            Verdict::Secured => "Secured",
            Verdict::Indeterminate => "Indeterminate",
        };
        f.write_str(text)
    }
}

/// Outcome of probing one target.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub target: String,
    pub verdict: Verdict,
    pub transcript: Vec<TranscriptEntry>,
    /// The server's reply to the unauthenticated MAIL command, when reached.
    pub decisive_reply: Option<Reply>,
    pub probed_at: DateTime<Utc>,
}

/// Pure classification rule: 250 is the vulnerability signal, any permanent
/// rejection counts as secured, transient codes (greylisting and friends)
/// and missing evidence stay indeterminate.
pub fn classify(decisive_reply: Option<&Reply>) -> Verdict {
    match decisive_reply {
        Some(reply) if reply.code() == 250 => Verdict::Vulnerable,
        Some(reply) if (500..=599).contains(&reply.code()) => Verdict::Secured,
        _ => Verdict::Indeterminate,
    }
}

/// Probe a live TCP target. Failures never surface as errors; they become
/// `Indeterminate` verdicts with the reason recorded in the transcript.
pub fn probe(spec: &ProbeSpec) -> ProbeResult {
    let probed_at = Utc::now();
    let addr = match (spec.host.as_str(), spec.port).to_socket_addrs() {
        Ok(mut addrs) => addrs.next(),
        Err(e) => {
            return failed_probe(spec, probed_at, format!("address resolution failed: {e}"))
        }
    };
    let Some(addr) = addr else {
        return failed_probe(spec, probed_at, "address resolution produced no address".into());
    };
    let stream = match TcpStream::connect_timeout(&addr, spec.timeout) {
        Ok(stream) => stream,
        Err(e) => return failed_probe(spec, probed_at, format!("connect failed: {e}")),
    };
    let mut io = TcpLineIo::new(stream);
    let (verdict, transcript, decisive_reply) = probe_over(&mut io, spec);
    ProbeResult { target: spec.target(), verdict, transcript, decisive_reply, probed_at }
}

fn failed_probe(spec: &ProbeSpec, probed_at: DateTime<Utc>, reason: String) -> ProbeResult {
    ProbeResult {
        target: spec.target(),
        verdict: Verdict::Indeterminate,
        transcript: vec![TranscriptEntry::note(reason)],
        decisive_reply: None,
        probed_at,
    }
}

/// The transport-independent probe dialogue; [`self_check`] runs it over an
/// in-memory pipe against the local session automaton.
pub fn probe_over(
    io: &mut dyn LineIo,
    spec: &ProbeSpec,
) -> (Verdict, Vec<TranscriptEntry>, Option<Reply>) {
    let mut transcript = Vec::new();

    let send = |io: &mut dyn LineIo, transcript: &mut Vec<TranscriptEntry>, line: String| {
        transcript.push(TranscriptEntry::client(line.clone()));
        io.write_str(&format!("{line}\r\n")).map_err(|e| format!("write failed: {e}"))
    };
    let recv = |io: &mut dyn LineIo, transcript: &mut Vec<TranscriptEntry>| -> Result<Reply, String> {
        match read_reply(io, spec.timeout) {
            Ok(Ok((reply, lines, _))) => {
                for line in lines {
                    transcript.push(TranscriptEntry::server(line));
                }
                Ok(reply)
            }
            Ok(Err(detail)) => Err(detail),
            Err(e) => Err(format!("read failed: {e}")),
        }
    };

    let mut decisive = None;
    let outcome = (|transcript: &mut Vec<TranscriptEntry>| -> Result<(), String> {
        let greeting = recv(io, transcript)?;
        if greeting.code() != 220 {
            return Err(format!("greeting was {}, not 220", greeting.code()));
        }
        send(io, transcript, format!("EHLO {}", spec.ehlo_name))?;
        let ehlo = recv(io, transcript)?;
        if ehlo.code() != 250 {
            return Err(format!("EHLO was answered {}, not 250", ehlo.code()));
        }

        // The decisive moment: an unauthenticated, forged MAIL FROM.
        send(io, transcript, format!("MAIL FROM:<{}>", spec.spoofed_from))?;
        decisive = Some(recv(io, transcript)?);

        send(io, transcript, format!("RCPT TO:<{}>", spec.rcpt_to))?;
        let rcpt = recv(io, transcript).ok();

        let verdict_so_far = classify(decisive.as_ref());
        if spec.send_message
            && verdict_so_far == Verdict::Vulnerable
            && rcpt.as_ref().is_some_and(|r| r.code() == 250)
        {
            send(io, transcript, "DATA".to_string())?;
            let prompt = recv(io, transcript)?;
            if prompt.code() == 354 {
                for line in dot_stuff(&test_message(spec).render()).split("\r\n") {
                    send(io, transcript, line.to_string())?;
                }
                send(io, transcript, ".".to_string())?;
                let _ = recv(io, transcript);
            }
        } else {
            // Dry run: abandon the transaction explicitly.
            send(io, transcript, "RSET".to_string())?;
            let _ = recv(io, transcript);
        }
        send(io, transcript, "QUIT".to_string())?;
        let _ = recv(io, transcript);
        Ok(())
    })(&mut transcript);

    if let Err(reason) = outcome {
        transcript.push(TranscriptEntry::note(reason));
    }
    (classify(decisive.as_ref()), transcript, decisive)
}

/// The message a `send_message` probe delivers: self-identifying, so a
/// recipient can tell it came from a configuration audit.
fn test_message(spec: &ProbeSpec) -> MailMessage {
    MailMessage {
        headers: vec![
            ("Date".into(), Utc::now().format("%a, %d %b %Y %H:%M:%S +0000").to_string()),
            ("From".into(), format!("\"SMTP audit\" <{}>", spec.spoofed_from)),
            ("To".into(), format!("<{}>", spec.rcpt_to)),
            ("Subject".into(), "SMTP configuration audit test message".into()),
            ("X-Audit-Notice".into(), "automated spoofing-audit test".into()),
        ],
        body: concat!(
            "This is an automated TEST message from an SMTP configuration audit.\r\n",
            "It was sent to check whether this server accepts mail from an\r\n",
            "unauthenticated, forged sender address. If you did not expect it,\r\n",
            "your server accepted a spoofed envelope sender and should require\r\n",
            "authentication before accepting mail."
        )
        .into(),
    }
}

/// Verify the probe and classifier against the local session automaton over
/// in-memory pipes: an open server must read as Vulnerable, an auth-required
/// one as Secured. Cheap enough to run before every real audit.
pub fn self_check() -> Result<(), String> {
    let open = run_local_probe(Policy::open("oracle.local").map_err(|e| e.to_string())?)?;
    if open.0 != Verdict::Vulnerable {
        return Err(format!("open-mode oracle classified as {}, expected Vulnerable", open.0));
    }
    let hardened =
        run_local_probe(Policy::auth_required("oracle.local").map_err(|e| e.to_string())?)?;
    if hardened.0 != Verdict::Secured {
        return Err(format!("auth-mode oracle classified as {}, expected Secured", hardened.0));
    }
    Ok(())
}

/// Run the probe dialogue against an in-process session; returns the verdict
/// and whether any message reached the spool.
pub fn run_local_probe(policy: Policy) -> Result<(Verdict, bool), String> {
    let spec = ProbeSpec::new(
        "oracle.local",
        EmailAddress::parse("secr@mail.gr").expect("static address"),
        EmailAddress::parse("professor@mail.gr").expect("static address"),
    );
    let (mut client_end, mut server_end) = testkit::duplex();
    let spool = MemorySpool::new();
    let server_spool = spool.clone();
    let server = thread::spawn(move || {
        let host = SessionHost {
            policy: &policy,
            credentials: &CredentialStore::new(),
            ids: Arc::new(Mutex::new(QueueIdGen::seeded(0))),
            store: &server_spool,
        };
        run_session(&mut server_end, &host)
    });
    let (verdict, _transcript, _decisive) = probe_over(&mut client_end, &spec);
    drop(client_end);
    server.join().map_err(|_| "oracle server panicked".to_string())?.map_err(|e| e.to_string())?;
    Ok((verdict, !spool.messages().is_empty()))
}

/// Mask a hostname for publication: the first label survives, the rest are
/// replaced positionally (xx, yy, zz, aa, bb, ...).
pub fn anonymize_host(fqdn: &str) -> String {
    let mut labels = fqdn.split('.');
    let mut out = vec![labels.next().unwrap_or("").to_string()];
    for (i, _) in labels.enumerate() {
        let letter = (b'a' + ((23 + i as u8) % 26)) as char;
        out.push(format!("{letter}{letter}"));
    }
    out.join(".")
}

/// One line of the published table.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub category: String,
    pub mail_server: String,
    pub vulnerable: bool,
    pub secured: bool,
    pub verdict: Verdict,
}

/// Grouped probe outcomes, renderable as a text table and as JSON with the
/// full transcripts.
#[derive(Debug)]
pub struct AuditReport {
    rows: Vec<ReportRow>,
    results: Vec<(String, ProbeResult)>,
    anonymize_json: bool,
    generated_at: DateTime<Utc>,
}

/// Assemble a report from categorized probe results. The text table always
/// masks hostnames; `anonymize_json: false` keeps raw hostnames in the JSON
/// (for the operator's own records) while the table stays masked.
pub fn build_report(results: Vec<(String, ProbeResult)>, anonymize_json: bool) -> AuditReport {
    let rows = results
        .iter()
        .map(|(category, result)| {
            let host = result.target.rsplit_once(':').map(|(h, _)| h).unwrap_or(&result.target);
            ReportRow {
                category: category.clone(),
                mail_server: anonymize_host(host),
                vulnerable: result.verdict == Verdict::Vulnerable,
                secured: result.verdict == Verdict::Secured,
                verdict: result.verdict,
            }
        })
        .collect();
    AuditReport { rows, results, anonymize_json, generated_at: Utc::now() }
}

impl AuditReport {
    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    /// Worst observed verdict as a process exit code: 1 if anything is
    /// Vulnerable, else 2 if anything is Indeterminate, else 0.
    pub fn exit_code(&self) -> i32 {
        if self.rows.iter().any(|r| r.verdict == Verdict::Vulnerable) {
            1
        } else if self.rows.iter().any(|r| r.verdict == Verdict::Indeterminate) {
            2
        } else {
            0
        }
    }

    /// Text table grouped by category, hostnames masked.
    pub fn table(&self) -> String {
        let headers = ["", "Mail servers", "Vulnerable", "Secured"];
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let category = if i > 0 && self.rows[i - 1].category == row.category {
                    String::new()
                } else {
                    row.category.clone()
                };
                let (vulnerable, secured) = match row.verdict {
                    Verdict::Vulnerable => ("Yes", "No"),
                    Verdict::Secured => ("No", "Yes"),
                    Verdict::Indeterminate => ("-", "-"),
                };
                [category, row.mail_server.clone(), vulnerable.into(), secured.into()]
            })
            .collect();
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let render_row = |cols: [&str; 4], widths: &[usize]| {
            let mut line = String::new();
            for (i, (col, w)) in cols.iter().zip(widths).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(&format!("{col:<w$}"));
            }
            line.trim_end().to_string() + "\n"
        };
        out.push_str(&render_row(headers, &widths));
        out.push_str(&render_row(
            ["", "-".repeat(widths[1]).as_str(), "-".repeat(widths[2]).as_str(), "-".repeat(widths[3]).as_str()],
            &widths,
        ));
        for row in &cells {
            out.push_str(&render_row(
                [row[0].as_str(), row[1].as_str(), row[2].as_str(), row[3].as_str()],
                &widths,
            ));
        }
        out
    }

    /// Full machine-readable report, transcripts included.
    pub fn json(&self) -> serde_json::Value {
        let results: Vec<serde_json::Value> = self
            .results
            .iter()
            .zip(&self.rows)
            .map(|((category, result), row)| {
                let host =
                    result.target.rsplit_once(':').map(|(h, _)| h).unwrap_or(&result.target);
                let published_host = if self.anonymize_json {
                    anonymize_host(host)
                } else {
                    host.to_string()
                };
                json!({
                    "category": category,
                    "mail_server": published_host,
                    "verdict": result.verdict,
                    "vulnerable": row.vulnerable,
                    "secured": row.secured,
                    "probed_at": result.probed_at.to_rfc3339(),
                    "decisive_reply": result.decisive_reply.as_ref().map(|r| r.render().trim_end().to_string()),
                    "transcript": result.transcript,
                })
            })
            .collect();
        json!({
            "generated_at": self.generated_at.to_rfc3339(),
            "anonymized": self.anonymize_json,
            "results": results,
        })
    }
}
