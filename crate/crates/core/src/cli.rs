//! Command-line interface: `serve`, `audit`, `cost`, `dread`, `adduser`.
//!
//! Exit codes: 0 success, 1 domain verdict failure (a Vulnerable target),
//! 2 usage or runtime error.

use std::io::{self, IsTerminal, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audit::{self, build_report, probe, ProbeSpec};
use crate::costmodel::{
    self, compute, parse_decimal, render_cost_table, CostInputs, Locale, TableFormat,
};
use crate::protocol::EmailAddress;
use crate::server::{self, CredentialStore, ServerConfig};
use crate::session::{Mode, Policy};
use crate::threatmodel::{rank, DreadScore, ThreatRecord};

#[derive(Parser, Debug)]
#[command(
    name = "mailvet",
    version,
    about = "SMTP spoofing audit toolkit: test MTA, spoofing probe, spam cost and risk calculators"
)]
struct Cli {
    /// Emit JSON. Without a path the JSON replaces the text output on
    /// stdout; with a path it is written there and the text still prints.
    #[arg(long, global = true, value_name = "PATH", num_args = 0..=1, default_missing_value = "-")]
    json: Option<String>,

    /// Chattier logging on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand, Debug)]
enum Commands {
    /// Run the SMTP server in open or auth-required mode
    Serve(ServeArgs),
    /// Probe a server for the unauthenticated-sender weakness
    Audit(AuditArgs),
    /// Compute the corporate cost of spam
    Cost(CostArgs),
    /// Compute a DREAD risk score, or rank a threat list
    Dread(DreadArgs),
    /// Add a user to a credentials file (password prompted, never a flag)
    Adduser(AdduserArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Open,
    Auth,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// open reproduces the unauthenticated weakness; auth requires AUTH
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// 25 needs elevated rights, hence the unprivileged default
    #[arg(long, default_value_t = 2525)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Credentials file (JSON); required to authenticate anyone
    #[arg(long, value_name = "FILE")]
    users: Option<PathBuf>,
    /// Directory for accepted messages (<id>.json + <id>.eml)
    #[arg(long, value_name = "DIR")]
    spool: PathBuf,
    /// Hostname announced in the banner and EHLO reply
    #[arg(long)]
    hostname: String,
    #[arg(long, default_value = crate::session::DEFAULT_BANNER_TAG)]
    banner: String,
    /// Per-command timeout in seconds
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Maximum message size in bytes (also advertised via SIZE)
    #[arg(long, default_value_t = crate::session::DEFAULT_MAX_MESSAGE_SIZE)]
    max_size: usize,
    #[arg(long, default_value_t = server::DEFAULT_MAX_CONNECTIONS)]
    max_connections: usize,
    /// Fixed queue-id seed for reproducible runs
    #[arg(long)]
    queue_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    host: String,
    #[arg(long, default_value_t = audit::DEFAULT_PROBE_PORT)]
    port: u16,
    /// Name announced in EHLO
    #[arg(long, default_value = audit::DEFAULT_EHLO_NAME)]
    ehlo: String,
    /// Spoofed envelope sender
    #[arg(long, value_name = "ADDR")]
    from: String,
    /// Recipient address
    #[arg(long, value_name = "ADDR")]
    to: String,
    /// Complete DATA with a self-identifying test message instead of the
    /// default dry run
    #[arg(long, requires = "i_understand_this_sends_mail")]
    send: bool,
    /// Acknowledge that --send delivers a real message to --to
    #[arg(long)]
    i_understand_this_sends_mail: bool,
    #[arg(long, default_value_t = 10)]
    timeout: u64,
    /// Report category label (Table-style grouping)
    #[arg(long, default_value = "Uncategorized")]
    category: String,
    /// Keep raw hostnames in the JSON report; the table is always masked
    #[arg(long)]
    reveal_hosts: bool,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    employees: u32,
    #[arg(long)]
    workdays: u32,
    /// Average hourly wage (EUR)
    #[arg(long)]
    wage: String,
    #[arg(long)]
    spam_per_day: String,
    #[arg(long)]
    seconds_per_spam: String,
    #[arg(long, default_value = "8")]
    hours_per_workday: String,
    /// en: 48,875.00 / eu: 48.875,00
    #[arg(long, default_value = "en")]
    locale: String,
}

#[derive(Args, Debug)]
struct DreadArgs {
    #[arg(long)]
    damage: Option<u8>,
    #[arg(long)]
    reproducibility: Option<u8>,
    #[arg(long)]
    exploitability: Option<u8>,
    #[arg(long)]
    affected: Option<u8>,
    #[arg(long)]
    discoverability: Option<u8>,
    /// Rank a JSON list of threat records instead of scoring attributes
    #[arg(long, value_name = "FILE", conflicts_with_all = ["damage", "reproducibility", "exploitability", "affected", "discoverability"])]
    rank: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdduserArgs {
    /// Credentials file; created if missing
    #[arg(long, value_name = "FILE")]
    users: PathBuf,
    /// Username to add or replace
    #[arg(long)]
    name: String,
}

/// Where `--json` output goes.
enum JsonOut {
    None,
    Stdout,
    File(PathBuf),
}

impl JsonOut {
    fn from_flag(flag: &Option<String>) -> JsonOut {
        match flag.as_deref() {
            None => JsonOut::None,
            Some("-") => JsonOut::Stdout,
            Some(path) => JsonOut::File(PathBuf::from(path)),
        }
    }

    /// True when the text report should be suppressed.
    fn replaces_text(&self) -> bool {
        matches!(self, JsonOut::Stdout)
    }
}

/// Parse and dispatch. Separated from `main` so tests can drive the CLI
/// in-process with captured output.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { &mut *stderr } else { &mut *stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };

    init_logging(cli.verbose);
    let json_out = JsonOut::from_flag(&cli.json);

    let outcome = match &cli.command {
        Commands::Serve(args) => cmd_serve(args, stderr),
        Commands::Audit(args) => cmd_audit(args, &json_out, cli.verbose, stdout, stderr),
        Commands::Cost(args) => cmd_cost(args, &json_out, stdout),
        Commands::Dread(args) => cmd_dread(args, &json_out, stdout),
        Commands::Adduser(args) => cmd_adduser(args, &json_out, stdout, stderr),
    };

    match outcome {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(stderr, "error: {message}");
            2
        }
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

fn emit_json(json_out: &JsonOut, value: &serde_json::Value, stdout: &mut dyn Write) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match json_out {
        JsonOut::None => Ok(()),
        JsonOut::Stdout => writeln!(stdout, "{text}").map_err(|e| e.to_string()),
        JsonOut::File(path) => std::fs::write(path, text + "\n")
            .map_err(|e| format!("writing {}: {e}", path.display())),
    }
}

fn cmd_serve(args: &ServeArgs, stderr: &mut dyn Write) -> Result<i32, String> {
    let mode = match args.mode {
        ModeArg::Open => Mode::Open,
        ModeArg::Auth => Mode::AuthRequired,
    };
    let policy = Policy::new(mode, &args.hostname)
        .and_then(|p| p.with_banner_tag(&args.banner))
        .and_then(|p| p.with_command_timeout(Duration::from_secs(args.timeout)))
        .map(|p| p.with_max_message_size(args.max_size))
        .map_err(|e| e.to_string())?;

    let credentials = match &args.users {
        Some(path) => CredentialStore::load(path).map_err(|e| e.to_string())?,
        None => CredentialStore::new(),
    };
    if mode == Mode::AuthRequired && credentials.is_empty() {
        let _ = writeln!(
            stderr,
            "warning: auth-required mode with no users; every sender will be rejected"
        );
    }

    let mut config = ServerConfig::new(policy, credentials, &args.spool);
    config.max_connections = args.max_connections;
    config.queue_seed = args.queue_seed;
    let bind = format!("{}:{}", args.bind, args.port);
    let _ = writeln!(stderr, "listening on {bind} (spool: {})", args.spool.display());
    server::serve(config, bind).map_err(|e| e.to_string())?;
    Ok(0)
}

fn cmd_audit(
    args: &AuditArgs,
    json_out: &JsonOut,
    verbose: bool,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, String> {
    let spoofed_from = EmailAddress::parse(&args.from).map_err(|e| e.to_string())?;
    let rcpt_to = EmailAddress::parse(&args.to).map_err(|e| e.to_string())?;

    // Verify probe and classifier against the in-process oracle first.
    audit::self_check().map_err(|e| format!("self-check failed, not probing: {e}"))?;
    log::debug!("self-check passed");

    let mut spec = ProbeSpec::new(&args.host, spoofed_from, rcpt_to);
    spec.port = args.port;
    spec.ehlo_name = args.ehlo.clone();
    spec.send_message = args.send && args.i_understand_this_sends_mail;
    spec.timeout = Duration::from_secs(args.timeout);

    let result = probe(&spec);
    if verbose {
        for entry in &result.transcript {
            let prefix = match entry.direction {
                crate::testkit::Direction::Client => "C:",
                crate::testkit::Direction::Server => "S:",
                crate::testkit::Direction::Note => "--",
            };
            let _ = writeln!(stderr, "{prefix} {}", entry.line);
        }
    }

    let report = build_report(vec![(args.category.clone(), result)], !args.reveal_hosts);
    if !json_out.replaces_text() {
        write!(stdout, "{}", report.table()).map_err(|e| e.to_string())?;
    }
    emit_json(json_out, &report.json(), stdout)?;
    Ok(report.exit_code())
}

fn cmd_cost(args: &CostArgs, json_out: &JsonOut, stdout: &mut dyn Write) -> Result<i32, String> {
    let locale: Locale = args.locale.parse().map_err(|e: costmodel::CostError| e.to_string())?;
    let inputs = CostInputs::new(
        args.employees,
        args.workdays,
        parse_decimal(&args.wage).map_err(|e| e.to_string())?,
        parse_decimal(&args.spam_per_day).map_err(|e| e.to_string())?,
        parse_decimal(&args.seconds_per_spam).map_err(|e| e.to_string())?,
    )
    .and_then(|i| i.with_hours_per_workday(parse_decimal(&args.hours_per_workday)?))
    .map_err(|e| e.to_string())?;
    let report = compute(&inputs).map_err(|e| e.to_string())?;

    if !json_out.replaces_text() {
        write!(stdout, "{}", render_cost_table(&report, TableFormat::Text, locale))
            .map_err(|e| e.to_string())?;
    }
    emit_json(json_out, &costmodel::cost_json(&report, locale), stdout)?;
    Ok(0)
}

fn cmd_dread(args: &DreadArgs, json_out: &JsonOut, stdout: &mut dyn Write) -> Result<i32, String> {
    if let Some(path) = &args.rank {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        let threats: Vec<ThreatRecord> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for threat in &threats {
            threat.validate().map_err(|e| e.to_string())?;
        }
        let ranked = rank(&threats);
        if !json_out.replaces_text() {
            for threat in &ranked {
                let categories: Vec<&str> =
                    threat.categories.iter().map(|c| c.name()).collect();
                writeln!(
                    stdout,
                    "{:>5}  {}  [{}]",
                    threat.score.risk_display(),
                    threat.name,
                    categories.join(", ")
                )
                .map_err(|e| e.to_string())?;
            }
        }
        let value = serde_json::to_value(&ranked).expect("threat list serializes");
        emit_json(json_out, &value, stdout)?;
        return Ok(0);
    }

    let (Some(damage), Some(reproducibility), Some(exploitability), Some(affected), Some(discoverability)) = (
        args.damage,
        args.reproducibility,
        args.exploitability,
        args.affected,
        args.discoverability,
    ) else {
        return Err(
            "provide all five attributes (--damage --reproducibility --exploitability \
             --affected --discoverability) or --rank FILE"
                .to_string(),
        );
    };
    let score = DreadScore::new(damage, reproducibility, exploitability, affected, discoverability)
        .map_err(|e| e.to_string())?;
    if !json_out.replaces_text() {
        writeln!(stdout, "{}", score.risk_display()).map_err(|e| e.to_string())?;
    }
    let value = serde_json::json!({
        "attributes": score,
        "risk": score.risk(),
        "risk_display": score.risk_display(),
    });
    emit_json(json_out, &value, stdout)?;
    Ok(0)
}

fn cmd_adduser(
    args: &AdduserArgs,
    json_out: &JsonOut,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, String> {
    let mut store = if args.users.exists() {
        CredentialStore::load(&args.users).map_err(|e| e.to_string())?
    } else {
        CredentialStore::new()
    };
    let replaced = store.usernames().any(|u| u == args.name);

    let password = if io::stdin().is_terminal() {
        rpassword::prompt_password(format!("Password for {}: ", args.name))
            .map_err(|e| format!("reading password: {e}"))?
    } else {
        // Piped stdin (tests, scripts): read one line, no echo concerns.
        let mut line = String::new();
        io::stdin().read_line(&mut line).map_err(|e| format!("reading password: {e}"))?;
        server::strip_line_ending(&line).to_string()
    };
    if password.is_empty() {
        return Err("empty password".to_string());
    }

    store.add_user(&args.name, &password).map_err(|e| e.to_string())?;
    store.save(&args.users).map_err(|e| e.to_string())?;
    let _ = writeln!(
        stderr,
        "{} user {:?} in {}",
        if replaced { "updated" } else { "added" },
        args.name,
        args.users.display()
    );
    emit_json(
        json_out,
        &serde_json::json!({
            "users_file": args.users.display().to_string(),
            "user": args.name,
            "replaced": replaced,
        }),
        stdout,
    )?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> (i32, String, String) {
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let argv = std::iter::once("mailvet").chain(args.iter().copied());
        let code = run(argv, &mut stdout, &mut stderr);
        (code, String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
    }

    #[test]
    fn cost_reference_case_prints_the_annual_figure() {
        let (code, out, _) = run_cli(&[
            "cost",
            "--employees", "680",
            "--workdays", "230",
            "--wage", "15",
            "--spam-per-day", "25",
            "--seconds-per-spam", "3",
        ]);
        assert_eq!(code, 0);
        assert!(out.contains("48,875.00"), "{out}");
        assert!(out.contains("212.50"), "{out}");
        assert!(out.contains("71.88"), "{out}");
        assert!(out.contains("0.31"), "{out}");
    }

    #[test]
    fn cost_locale_eu_prints_european_separators() {
        let (code, out, _) = run_cli(&[
            "cost",
            "--employees", "680",
            "--workdays", "230",
            "--wage", "15.00",
            "--spam-per-day", "25",
            "--seconds-per-spam", "3",
            "--locale", "eu",
        ]);
        assert_eq!(code, 0);
        assert!(out.contains("48.875,00"), "{out}");
    }

    #[test]
    fn cost_json_round_trips() {
        let (code, out, _) = run_cli(&[
            "cost", "--json",
            "--employees", "680",
            "--workdays", "230",
            "--wage", "15",
            "--spam-per-day", "25",
            "--seconds-per-spam", "3",
        ]);
        assert_eq!(code, 0);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(value["outputs"]["annual_cost"]["display"], "48,875.00");
        assert_eq!(value["outputs"]["annual_cost"]["exact"], "48875");
        assert_eq!(value["inputs"]["employees"], 680);
    }

    #[test]
    fn dread_mean_example() {
        let (code, out, _) = run_cli(&[
            "dread",
            "--damage", "10",
            "--reproducibility", "10",
            "--exploitability", "7",
            "--affected", "10",
            "--discoverability", "10",
        ]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), "9.4");
    }

    #[test]
    fn dread_rejects_out_of_scale_attributes() {
        let (code, _, err) = run_cli(&[
            "dread",
            "--damage", "11",
            "--reproducibility", "10",
            "--exploitability", "7",
            "--affected", "10",
            "--discoverability", "10",
        ]);
        assert_eq!(code, 2);
        assert!(err.contains("damage_potential"), "{err}");
    }

    #[test]
    fn dread_json_output_parses() {
        let (code, out, _) = run_cli(&[
            "dread", "--json",
            "--damage", "1", "--reproducibility", "1", "--exploitability", "1",
            "--affected", "1", "--discoverability", "1",
        ]);
        assert_eq!(code, 0);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(value["risk_display"], "1.0");
        assert_eq!(value["attributes"]["damage_potential"], 1);
    }

    #[test]
    fn dread_rank_reads_and_emits_threat_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("threats.json");
        let threats = serde_json::json!([
            {
                "name": "sender spoofing",
                "categories": ["Spoofing"],
                "score": {
                    "damage_potential": 10, "reproducibility": 10, "exploitability": 7,
                    "affected_users": 10, "discoverability": 10
                },
                "notes": "forged envelope sender"
            },
            {
                "name": "connection flood",
                "categories": ["DenialOfService"],
                "score": {
                    "damage_potential": 3, "reproducibility": 3, "exploitability": 3,
                    "affected_users": 3, "discoverability": 3
                }
            }
        ]);
        std::fs::write(&path, threats.to_string()).unwrap();
        let (code, out, _) = run_cli(&["dread", "--rank", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        let first = out.lines().next().unwrap();
        assert!(first.contains("9.4") && first.contains("sender spoofing"), "{out}");

        // JSON out round-trips through the same schema.
        let (code, out, _) =
            run_cli(&["dread", "--json", "--rank", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        let reparsed: Vec<ThreatRecord> = serde_json::from_str(&out).unwrap();
        assert_eq!(reparsed.len(), 2);
        assert_eq!(reparsed[0].name, "sender spoofing");
    }

    #[test]
    fn usage_errors_exit_2_and_print_synopsis_to_stderr() {
        let (code, out, err) = run_cli(&["cost", "--employees", "680"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_cli(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("serve"));
        assert!(out.contains("audit"));
        assert!(out.contains("adduser"));
    }

    #[test]
    fn audit_send_requires_the_acknowledgement_flag() {
        let (code, _, err) = run_cli(&[
            "audit",
            "--host", "127.0.0.1",
            "--from", "a@b.c",
            "--to", "d@e.f",
            "--send",
        ]);
        assert_eq!(code, 2);
        assert!(err.contains("i-understand-this-sends-mail"), "{err}");
    }

    #[test]
    fn audit_rejects_invalid_addresses_before_any_probe() {
        let (code, _, err) = run_cli(&[
            "audit",
            "--host", "127.0.0.1",
            "--from", "not-an-address",
            "--to", "d@e.f",
        ]);
        assert_eq!(code, 2);
        assert!(err.contains("address"), "{err}");
    }
}
