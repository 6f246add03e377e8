//! SMTP wire layer: command parsing, reply rendering/parsing, Base64
//! credentials, and dot-transparency for the DATA section.
//!
//! Everything here is a pure function over text lines; line termination
//! (CRLF on output, CRLF or bare LF tolerated on input) is handled by the
//! connection layer, so inputs and outputs never carry the terminator.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest accepted command line, terminator excluded.
pub const MAX_LINE_LEN: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("line too long: {0} characters (limit {MAX_LINE_LEN})")]
    LineTooLong(usize),
    #[error("line contains an embedded CR or LF")]
    EmbeddedNewline,
    #[error("no parseable <address> in {0:?}")]
    MalformedAddress(String),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("invalid base64: {0}")]
    InvalidBase64(String),
    #[error("invalid reply: {0}")]
    InvalidReply(String),
}

/// Envelope address: the text between the angle brackets of MAIL FROM / RCPT TO.
///
/// Kept deliberately loose — one `@`, non-empty on both sides, no whitespace,
/// brackets or control characters. Header addresses pass through verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmailAddress(String);

impl EmailAddress {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let bad_char = |c: char| c.is_whitespace() || c.is_control() || c == '<' || c == '>';
        let (local, domain) = text
            .split_once('@')
            .ok_or_else(|| ProtocolError::MalformedAddress(text.to_string()))?;
        if local.is_empty() || domain.is_empty() || domain.contains('@') || text.chars().any(bad_char)
        {
            return Err(ProtocolError::MalformedAddress(text.to_string()));
        }
        Ok(EmailAddress(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EmailAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A client command, one per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Helo(String),
    Ehlo(String),
    AuthLogin,
    /// AUTH PLAIN, optionally with the initial base64 blob on the same line.
    AuthPlain(Option<String>),
    Mail(EmailAddress),
    Rcpt(EmailAddress),
    Data,
    Quit,
    Rset,
    Noop,
    StartTls,
    /// Anything we do not understand; the session layer picks the reply code.
    Unknown(String),
}

/// Parse one command line (no terminator). Verbs match case-insensitively.
pub fn parse_command(line: &str) -> Result<Command, ProtocolError> {
    if line.len() > MAX_LINE_LEN {
        return Err(ProtocolError::LineTooLong(line.len()));
    }
    if line.contains(['\r', '\n']) {
        return Err(ProtocolError::EmbeddedNewline);
    }
    let (verb, rest) = match line.split_once(' ') {
        Some((v, r)) => (v, r.trim()),
        None => (line, ""),
    };
    let cmd = match verb.to_ascii_uppercase().as_str() {
        "HELO" => Command::Helo(rest.to_string()),
        "EHLO" => Command::Ehlo(rest.to_string()),
        "MAIL" => Command::Mail(parse_path(line, rest, "FROM")?),
        "RCPT" => Command::Rcpt(parse_path(line, rest, "TO")?),
        "DATA" => Command::Data,
        "QUIT" => Command::Quit,
        "RSET" => Command::Rset,
        "NOOP" => Command::Noop,
        "STARTTLS" => Command::StartTls,
        "AUTH" => {
            let (mech, blob) = match rest.split_once(' ') {
                Some((m, b)) => (m, Some(b.trim().to_string()).filter(|b| !b.is_empty())),
                None => (rest, None),
            };
            match mech.to_ascii_uppercase().as_str() {
                "LOGIN" => Command::AuthLogin,
                "PLAIN" => Command::AuthPlain(blob),
                _ => Command::Unknown(verb.to_string()),
            }
        }
        _ => Command::Unknown(verb.to_string()),
    };
    Ok(cmd)
}

/// Extract the `<addr>` of `MAIL FROM:<addr>` / `RCPT TO:<addr>`.
/// ESMTP parameters after the closing bracket (SIZE=, BODY=, ...) are ignored.
fn parse_path(line: &str, rest: &str, keyword: &str) -> Result<EmailAddress, ProtocolError> {
    let malformed = || ProtocolError::MalformedAddress(line.to_string());
    let (kw, after) = rest.split_once(':').ok_or_else(malformed)?;
    if !kw.trim().eq_ignore_ascii_case(keyword) {
        return Err(malformed());
    }
    let after = after.trim_start();
    let open = after.find('<').ok_or_else(malformed)?;
    let close = after[open..].find('>').ok_or_else(malformed)? + open;
    EmailAddress::parse(&after[open + 1..close])
}

impl fmt::Display for Command {
    /// Serialized wire form, uppercase verbs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Helo(h) if h.is_empty() => write!(f, "HELO"),
            Command::Helo(h) => write!(f, "HELO {h}"),
            Command::Ehlo(h) if h.is_empty() => write!(f, "EHLO"),
            Command::Ehlo(h) => write!(f, "EHLO {h}"),
            Command::AuthLogin => write!(f, "AUTH LOGIN"),
            Command::AuthPlain(None) => write!(f, "AUTH PLAIN"),
            Command::AuthPlain(Some(blob)) => write!(f, "AUTH PLAIN {blob}"),
            Command::Mail(a) => write!(f, "MAIL FROM:<{a}>"),
            Command::Rcpt(a) => write!(f, "RCPT TO:<{a}>"),
            Command::Data => write!(f, "DATA"),
            Command::Quit => write!(f, "QUIT"),
            Command::Rset => write!(f, "RSET"),
            Command::Noop => write!(f, "NOOP"),
            Command::StartTls => write!(f, "STARTTLS"),
            Command::Unknown(v) => f.write_str(v),
        }
    }
}

/// RFC 3463 style dotted triple, e.g. `2.1.5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedStatus {
    pub class: u16,
    pub subject: u16,
    pub detail: u16,
}

impl EnhancedStatus {
    pub fn new(class: u16, subject: u16, detail: u16) -> Result<Self, ProtocolError> {
        if !matches!(class, 2 | 4 | 5) || subject > 999 || detail > 999 {
            return Err(ProtocolError::InvalidReply(format!(
                "bad enhanced status {class}.{subject}.{detail}"
            )));
        }
        Ok(EnhancedStatus { class, subject, detail })
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut parts = text.split('.');
        let mut next = || {
            parts
                .next()
                .and_then(|p| (!p.is_empty() && p.len() <= 3).then_some(p))
                .and_then(|p| p.parse::<u16>().ok())
                .ok_or_else(|| ProtocolError::InvalidReply(format!("bad enhanced status {text:?}")))
        };
        let status = EnhancedStatus::new(next()?, next()?, next()?)?;
        if parts.next().is_some() {
            return Err(ProtocolError::InvalidReply(format!("bad enhanced status {text:?}")));
        }
        Ok(status)
    }
}

impl fmt::Display for EnhancedStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.class, self.subject, self.detail)
    }
}

/// If `text` begins with an enhanced status followed by a space (or nothing),
/// split it off. This is what reply parsing uses to recognize the triple.
fn leading_status(text: &str) -> Option<(EnhancedStatus, &str)> {
    let triple = text.split(' ').next().unwrap_or(text);
    let status = EnhancedStatus::parse(triple).ok()?;
    let rest = text.get(triple.len() + 1..).unwrap_or("");
    Some((status, rest))
}

/// A coded server reply, possibly multiline.
///
/// Constructed only through [`Reply::new`], which enforces the wire
/// invariants, so rendering cannot fail and parse/render round-trip exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    code: u16,
    enhanced: Option<EnhancedStatus>,
    lines: Vec<String>,
}

impl Reply {
    pub fn new(
        code: u16,
        enhanced: Option<EnhancedStatus>,
        lines: Vec<String>,
    ) -> Result<Self, ProtocolError> {
        if !(200..=599).contains(&code) {
            return Err(ProtocolError::InvalidReply(format!("code {code} out of range")));
        }
        if lines.is_empty() {
            return Err(ProtocolError::InvalidReply("no text lines".into()));
        }
        if lines.iter().any(|l| l.contains(['\r', '\n'])) {
            return Err(ProtocolError::InvalidReply("embedded CR/LF in line".into()));
        }
        // Without an explicit enhanced status, text that *looks* like one on
        // every line would not survive a parse round-trip; refuse it so the
        // canonical construction is unambiguous.
        if enhanced.is_none() {
            let hoistable = lines
                .iter()
                .map(|l| leading_status(l).map(|(s, _)| s))
                .collect::<Option<Vec<_>>>()
                .is_some_and(|all| all.windows(2).all(|w| w[0] == w[1]));
            if hoistable {
                return Err(ProtocolError::InvalidReply(
                    "text starts with an enhanced status; pass it structurally".into(),
                ));
            }
        }
        Ok(Reply { code, enhanced, lines })
    }

    /// Single-line reply without an enhanced status.
    pub fn basic(code: u16, text: impl Into<String>) -> Result<Self, ProtocolError> {
        Reply::new(code, None, vec![text.into()])
    }

    /// Single-line reply with an enhanced status triple.
    pub fn enhanced(
        code: u16,
        (class, subject, detail): (u16, u16, u16),
        text: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        Reply::new(code, Some(EnhancedStatus::new(class, subject, detail)?), vec![text.into()])
    }

    pub fn code(&self) -> u16 {
        self.code
    }

    pub fn enhanced_status(&self) -> Option<EnhancedStatus> {
        self.enhanced
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// First (often only) text line.
    pub fn text(&self) -> &str {
        &self.lines[0]
    }

    /// Exact wire form: CRLF terminated, `code-` continuation on all lines
    /// but the last, the enhanced status repeated on every line.
    pub fn render(&self) -> String {
        let prefix = match self.enhanced {
            Some(s) => format!("{s} "),
            None => String::new(),
        };
        let mut out = String::new();
        let last = self.lines.len() - 1;
        for (i, line) in self.lines.iter().enumerate() {
            let sep = if i == last { ' ' } else { '-' };
            out.push_str(&format!("{}{}{}{}\r\n", self.code, sep, prefix, line));
        }
        out
    }

    /// Inverse of [`Reply::render`]. Accepts CRLF or LF separated input
    /// holding exactly one complete reply.
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut raw: Vec<&str> = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        // A trailing newline leaves one empty segment; interior empties are errors.
        if raw.last() == Some(&"") {
            raw.pop();
        }
        Reply::parse_lines(&raw)
    }

    /// Parse from already-split physical lines (terminators stripped).
    pub fn parse_lines<S: AsRef<str>>(raw: &[S]) -> Result<Self, ProtocolError> {
        let raw: Vec<&str> = raw.iter().map(|s| s.as_ref()).collect();
        if raw.is_empty() {
            return Err(ProtocolError::MalformedReply("empty input".into()));
        }
        let mut code = None;
        let mut remainders = Vec::with_capacity(raw.len());
        let last = raw.len() - 1;
        for (i, line) in raw.iter().enumerate() {
            if line.len() < 4 || !line.is_char_boundary(3) {
                return Err(ProtocolError::MalformedReply(format!("short line {line:?}")));
            }
            let this_code: u16 = line[..3]
                .parse()
                .map_err(|_| ProtocolError::MalformedReply(format!("bad code in {line:?}")))?;
            match code {
                None => code = Some(this_code),
                Some(c) if c != this_code => {
                    return Err(ProtocolError::MalformedReply(format!(
                        "code mismatch: {c} then {this_code}"
                    )))
                }
                _ => {}
            }
            let sep = line.as_bytes()[3];
            match (sep, i == last) {
                (b' ', true) | (b'-', false) => {}
                (b' ', false) => {
                    return Err(ProtocolError::MalformedReply("text after final line".into()))
                }
                (b'-', true) => {
                    return Err(ProtocolError::MalformedReply("truncated multiline reply".into()))
                }
                _ => return Err(ProtocolError::MalformedReply(format!("bad separator in {line:?}"))),
            }
            remainders.push(&line[4..]);
        }
        let code = code.unwrap();
        // Hoist a per-line enhanced status when every line carries the same one.
        let statuses: Option<Vec<(EnhancedStatus, &str)>> =
            remainders.iter().map(|r| leading_status(r)).collect();
        let (enhanced, lines) = match statuses {
            Some(split) if split.windows(2).all(|w| w[0].0 == w[1].0) => (
                Some(split[0].0),
                split.into_iter().map(|(_, rest)| rest.to_string()).collect(),
            ),
            _ => (None, remainders.into_iter().map(str::to_string).collect()),
        };
        Reply::new(code, enhanced, lines)
    }
}

const BASE64_ALPHABET: &[u8; 64] =
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

/// Standard Base64 with `=` padding.
pub fn encode_base64(data: &[u8]) -> String {
    let mut out = String::with_capacity(data.len().div_ceil(3) * 4);
    for chunk in data.chunks(3) {
        let n = (u32::from(chunk[0]) << 16)
            | (u32::from(*chunk.get(1).unwrap_or(&0)) << 8)
            | u32::from(*chunk.get(2).unwrap_or(&0));
        let sextet = |shift: u32| BASE64_ALPHABET[(n >> shift & 63) as usize] as char;
        out.push(sextet(18));
        out.push(sextet(12));
        out.push(if chunk.len() > 1 { sextet(6) } else { '=' });
        out.push(if chunk.len() > 2 { sextet(0) } else { '=' });
    }
    out
}

/// Decode standard Base64. Input must be well-formed: alphabet characters
/// only, length a multiple of four, `=` only as trailing padding.
pub fn decode_base64(text: &str) -> Result<Vec<u8>, ProtocolError> {
    let err = |why: &str| ProtocolError::InvalidBase64(format!("{why} in {text:?}"));
    let bytes = text.as_bytes();
    if !bytes.len().is_multiple_of(4) {
        return Err(err("length not a multiple of 4"));
    }
    let padding = bytes.iter().rev().take_while(|&&b| b == b'=').count();
    if padding > 2 {
        return Err(err("too much padding"));
    }
    let mut out = Vec::with_capacity(bytes.len() / 4 * 3);
    let mut acc: u32 = 0;
    let mut acc_bits = 0;
    for &b in &bytes[..bytes.len() - padding] {
        let v = BASE64_ALPHABET
            .iter()
            .position(|&a| a == b)
            .ok_or_else(|| err("character outside alphabet"))? as u32;
        acc = (acc << 6) | v;
        acc_bits += 6;
        if acc_bits >= 8 {
            acc_bits -= 8;
            out.push((acc >> acc_bits) as u8);
        }
    }
    // 8n bits of data must fit the sextets that remain after padding.
    let expected_len = match padding {
        0 => out.len(),
        1 => (bytes.len() / 4 - 1) * 3 + 2,
        _ => (bytes.len() / 4 - 1) * 3 + 1,
    };
    if out.len() != expected_len {
        return Err(err("padding inconsistent with length"));
    }
    Ok(out)
}

/// Double a leading dot on every body line so the lone-dot terminator stays
/// unambiguous. The terminator itself is the session layer's business.
pub fn dot_stuff(body: &str) -> String {
    transform_lines(body, |seg, out| {
        if seg.starts_with('.') {
            out.push('.');
        }
        out.push_str(seg);
    })
}

/// Inverse of [`dot_stuff`]: strip one leading dot per line.
pub fn dot_unstuff(wire: &str) -> String {
    transform_lines(wire, |seg, out| {
        out.push_str(seg.strip_prefix('.').unwrap_or(seg));
    })
}

fn transform_lines(text: &str, f: impl Fn(&str, &mut String)) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for (i, seg) in text.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        f(seg, &mut out);
    }
    out
}

/// Headers plus body of a message, as assembled by a sending client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailMessage {
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl MailMessage {
    /// First header with the given name, case-insensitively.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Wire form of the data section: header lines, a separating blank line,
    /// then the body, all CRLF terminated. Not dot-stuffed.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.headers {
            out.push_str(&format!("{name}: {value}\r\n"));
        }
        out.push_str("\r\n");
        for line in self.body.split('\n') {
            out.push_str(line.strip_suffix('\r').unwrap_or(line));
            out.push_str("\r\n");
        }
        out
    }

    /// Split a received data section into headers and body. Tolerates a
    /// missing blank separator line: the header block simply ends at the
    /// first line that does not look like `Name: value`.
    pub fn parse(raw: &str) -> MailMessage {
        let mut headers = Vec::new();
        let mut body_lines: Vec<&str> = Vec::new();
        let mut in_headers = true;
        for line in raw.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)) {
            if in_headers {
                if line.is_empty() {
                    in_headers = false;
                    continue;
                }
                if let Some((name, value)) = split_header(line) {
                    headers.push((name.to_string(), value.to_string()));
                    continue;
                }
                in_headers = false;
            }
            body_lines.push(line);
        }
        // Drop the trailing empty segment a final newline leaves behind.
        if body_lines.last() == Some(&"") {
            body_lines.pop();
        }
        MailMessage { headers, body: body_lines.join("\r\n") }
    }
}

fn split_header(line: &str) -> Option<(&str, &str)> {
    let (name, value) = line.split_once(':')?;
    let valid = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_graphic() && c != ':');
    valid.then(|| (name, value.trim_start()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use base64::Engine as _;
    use proptest::prelude::*;

    fn addr(s: &str) -> EmailAddress {
        EmailAddress::parse(s).unwrap()
    }

    #[test]
    fn parses_mail_from_line() {
        assert_eq!(
            parse_command("MAIL FROM:<secr@mail.gr>").unwrap(),
            Command::Mail(addr("secr@mail.gr"))
        );
    }

    #[test]
    fn parses_quit() {
        assert_eq!(parse_command("QUIT").unwrap(), Command::Quit);
    }

    #[test]
    fn verb_matching_is_case_insensitive() {
        assert_eq!(parse_command("mail from:<a@b.c>").unwrap(), Command::Mail(addr("a@b.c")));
        assert_eq!(parse_command("ehlo www.test.com").unwrap(), Command::Ehlo("www.test.com".into()));
    }

    #[test]
    fn mail_without_brackets_is_malformed() {
        assert!(matches!(
            parse_command("MAIL FROM:no-brackets"),
            Err(ProtocolError::MalformedAddress(_))
        ));
    }

    #[test]
    fn mail_parameters_after_address_are_ignored() {
        assert_eq!(
            parse_command("MAIL FROM:<a@b.c> SIZE=1024 BODY=8BITMIME").unwrap(),
            Command::Mail(addr("a@b.c"))
        );
    }

    #[test]
    fn line_over_limit_is_rejected() {
        let line = format!("MAIL FROM:<{}@b.c>", "x".repeat(MAX_LINE_LEN));
        assert!(matches!(parse_command(&line), Err(ProtocolError::LineTooLong(_))));
    }

    #[test]
    fn embedded_newline_is_rejected() {
        assert_eq!(parse_command("QUIT\r\nMAIL"), Err(ProtocolError::EmbeddedNewline));
    }

    #[test]
    fn unknown_verb_is_preserved() {
        assert_eq!(parse_command("ETRN mail.gr").unwrap(), Command::Unknown("ETRN".into()));
        assert_eq!(parse_command("AUTH CRAM-MD5").unwrap(), Command::Unknown("AUTH".into()));
    }

    #[test]
    fn auth_variants() {
        assert_eq!(parse_command("AUTH LOGIN").unwrap(), Command::AuthLogin);
        assert_eq!(parse_command("auth plain").unwrap(), Command::AuthPlain(None));
        assert_eq!(
            parse_command("AUTH PLAIN AGZvbwBiYXI=").unwrap(),
            Command::AuthPlain(Some("AGZvbwBiYXI=".into()))
        );
    }

    #[test]
    fn address_rules() {
        assert!(EmailAddress::parse("a@b.c").is_ok());
        for bad in ["", "@", "a@", "@b", "a@b@c", "a b@c", "a@b>c"] {
            assert!(EmailAddress::parse(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn renders_single_line_replies() {
        let bye = Reply::enhanced(221, (2, 0, 0), "Bye").unwrap();
        assert_eq!(bye.render(), "221 2.0.0 Bye\r\n");
        let greet = Reply::basic(220, "x").unwrap();
        assert_eq!(greet.render(), "220 x\r\n");
    }

    #[test]
    fn renders_multiline_ehlo_block() {
        let lines = ["smtp.mail.gr", "PIPELINING", "SIZE 8192000", "DSN"];
        let reply = Reply::new(250, None, lines.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(
            reply.render(),
            "250-smtp.mail.gr\r\n250-PIPELINING\r\n250-SIZE 8192000\r\n250 DSN\r\n"
        );
    }

    #[test]
    fn parses_enhanced_reply() {
        let reply = Reply::parse("250 2.1.5 Ok").unwrap();
        assert_eq!(reply.code(), 250);
        assert_eq!(reply.enhanced_status(), Some(EnhancedStatus::new(2, 1, 5).unwrap()));
        assert_eq!(reply.lines(), ["Ok"]);
    }

    #[test]
    fn reply_code_mismatch_is_malformed() {
        assert!(matches!(
            Reply::parse("250-a\n251 b"),
            Err(ProtocolError::MalformedReply(_))
        ));
    }

    #[test]
    fn reply_round_trips_fig1_transcript() {
        let wire = [
            "220 smtp.mail.gr M.T.A.\r\n",
            "250 2.1.5 Ok\r\n",
            "250 2.0.0 Ok: queued as 492381B9295\r\n",
            "221 2.0.0 Bye\r\n",
        ];
        for text in wire {
            let reply = Reply::parse(text).unwrap();
            assert_eq!(reply.render(), text);
        }
    }

    #[test]
    fn ambiguous_status_text_is_rejected_at_construction() {
        assert!(Reply::basic(250, "2.1.5 Ok").is_err());
        // Not ambiguous when only some lines look like a triple.
        assert!(Reply::new(250, None, vec!["2.1.5 a".into(), "ok".into()]).is_ok());
    }

    #[test]
    fn base64_known_values() {
        assert_eq!(encode_base64(b""), "");
        assert_eq!(encode_base64(b"secr"), "c2Vjcg==");
        assert_eq!(decode_base64("c2Vjcg==").unwrap(), b"secr");
        assert_eq!(encode_base64(b"Username:"), "VXNlcm5hbWU6");
        assert_eq!(encode_base64(b"Password:"), "UGFzc3dvcmQ6");
    }

    #[test]
    fn base64_rejects_bad_input() {
        for bad in ["a", "ab=c", "====", "a!bc", "c2Vjcg=", "=abc"] {
            assert!(decode_base64(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn dot_stuffing_examples() {
        assert_eq!(dot_stuff("hello"), "hello");
        assert_eq!(dot_stuff(".hi"), "..hi");
        assert_eq!(dot_unstuff("..hi"), ".hi");
        let body = "You are invited to the Board of Examiners meeting\r\nscheduled for Thursday 16 September 2010 at 12.30\r\np.m. at the department's council room.";
        assert_eq!(dot_stuff(body), body);
    }

    #[test]
    fn message_parse_handles_missing_blank_separator() {
        let raw = "From: \"Secretary\" <secr@mail.gr>\r\nSubject: Board of Examiners\r\nYou are invited\r\n";
        let msg = MailMessage::parse(raw);
        assert_eq!(msg.header("from"), Some("\"Secretary\" <secr@mail.gr>"));
        assert_eq!(msg.header("subject"), Some("Board of Examiners"));
        assert_eq!(msg.body, "You are invited");
    }

    #[test]
    fn message_render_parse_round_trip() {
        let msg = MailMessage {
            headers: vec![("From".into(), "a@b.c".into()), ("Subject".into(), "hi".into())],
            body: "line one\r\nline two".into(),
        };
        assert_eq!(MailMessage::parse(&msg.render()), msg);
    }

    fn command_strategy() -> impl Strategy<Value = Command> {
        let host = "[a-z][a-z0-9.-]{0,18}";
        let address = "[a-z][a-z0-9._+-]{0,10}@[a-z][a-z0-9.-]{0,12}[a-z0-9]"
            .prop_map(|s| EmailAddress::parse(&s).unwrap());
        let blob = "[A-Za-z0-9+/]{4,16}";
        prop_oneof![
            host.prop_map(Command::Helo),
            host.prop_map(Command::Ehlo),
            Just(Command::AuthLogin),
            proptest::option::of(blob).prop_map(Command::AuthPlain),
            address.clone().prop_map(Command::Mail),
            address.prop_map(Command::Rcpt),
            Just(Command::Data),
            Just(Command::Quit),
            Just(Command::Rset),
            Just(Command::Noop),
            Just(Command::StartTls),
            "[A-Z]{3,10}".prop_filter("not a known verb", |v| {
                !matches!(
                    v.as_str(),
                    "HELO" | "EHLO" | "MAIL" | "RCPT" | "DATA" | "QUIT" | "RSET" | "NOOP"
                        | "STARTTLS" | "AUTH"
                )
            })
            .prop_map(Command::Unknown),
        ]
    }

    fn reply_strategy() -> impl Strategy<Value = Reply> {
        let status = (prop_oneof![Just(2u16), Just(4), Just(5)], 0u16..10, 0u16..10)
            .prop_map(|(c, s, d)| EnhancedStatus::new(c, s, d).unwrap());
        // Lines start with a letter so they can never look like a status triple.
        let line = "[A-Za-z][ -~]{0,30}";
        (200u16..=599, proptest::option::of(status), proptest::collection::vec(line, 1..5))
            .prop_map(|(code, enhanced, lines)| Reply::new(code, enhanced, lines).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 1000, .. ProptestConfig::default() })]

        #[test]
        fn base64_round_trip(data in proptest::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(decode_base64(&encode_base64(&data)).unwrap(), data);
        }

        #[test]
        fn base64_matches_independent_encoder(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let oracle = base64::engine::general_purpose::STANDARD;
            prop_assert_eq!(encode_base64(&data), oracle.encode(&data));
            prop_assert_eq!(decode_base64(&oracle.encode(&data)).unwrap(), data);
        }

        #[test]
        fn dot_stuffing_round_trip(body in "([ -~.]{0,10}\n?){0,8}") {
            prop_assert_eq!(dot_unstuff(&dot_stuff(&body)), body.clone());
            // The stuffed form never carries a bare-dot line.
            prop_assert!(dot_stuff(&body).split('\n').all(|l| l != "." && l != ".\r"));
        }

        #[test]
        fn dot_stuffing_round_trip_dot_heavy(lines in proptest::collection::vec("[.]{0,4}[a-z]{0,3}", 0..8)) {
            let body = lines.join("\r\n");
            prop_assert_eq!(dot_unstuff(&dot_stuff(&body)), body);
        }
    }

    proptest! {
        #[test]
        fn command_serialize_parse_identity(cmd in command_strategy()) {
            prop_assert_eq!(parse_command(&cmd.to_string()).unwrap(), cmd);
        }

        #[test]
        fn reply_render_parse_identity(reply in reply_strategy()) {
            prop_assert_eq!(Reply::parse(&reply.render()).unwrap(), reply);
        }

        #[test]
        fn parsed_commands_never_contain_line_breaks(line in "[ -~]{0,60}") {
            if let Ok(cmd) = parse_command(&line) {
                let fields = match &cmd {
                    Command::Helo(h) | Command::Ehlo(h) | Command::Unknown(h) => h.clone(),
                    Command::AuthPlain(Some(b)) => b.clone(),
                    Command::Mail(a) | Command::Rcpt(a) => a.as_str().to_string(),
                    _ => String::new(),
                };
                prop_assert!(!fields.contains(['\r', '\n']));
            }
        }
    }
}
