//! Command-line surface: train, eval, count, bench, gradcheck, attnmap, and
//! config dump, all driven by one strict JSON config file.
//!
//! Exit codes: 0 success, 2 bad config or malformed input artifact,
//! 3 missing file, 4 numeric failure (NaN), 1 anything else. Errors print
//! one machine-parsable line to stderr: `ERROR <code>: <message>`.

mod commands;
mod config;

pub use config::{AttnmapConfig, BenchConfig, GradcheckConfig, Paths, RunConfig};

use fervit::error::Error;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

pub fn log_level() -> LogLevel {
    match std::env::var("FERVIT_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

pub fn info(msg: impl AsRef<str>) {
    if log_level() >= LogLevel::Info {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn debug(msg: impl AsRef<str>) {
    if log_level() >= LogLevel::Debug {
        eprintln!("{}", msg.as_ref());
    }
}

const USAGE: &str = "usage: fervit <train|eval|count|bench|gradcheck|attnmap> --config <path> \
[--checkpoint <path>] [--out <dir>] [--seed <u64>]\n       fervit config dump --config <path>";

#[derive(Debug)]
struct Invocation {
    command: String,
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

fn parse_args(args: &[String]) -> Result<Invocation, Error> {
    if args.is_empty() {
        return Err(Error::config(format!("missing subcommand\n{USAGE}")));
    }
    let command = if args[0] == "config" {
        match args.get(1).map(String::as_str) {
            Some("dump") => "config-dump".to_string(),
            other => {
                return Err(Error::config(format!(
                    "unknown config action {other:?}\n{USAGE}"
                )))
            }
        }
    } else {
        args[0].clone()
    };
    let known = [
        "train",
        "eval",
        "count",
        "bench",
        "gradcheck",
        "attnmap",
        "config-dump",
    ];
    if !known.contains(&command.as_str()) {
        return Err(Error::config(format!(
            "unknown subcommand '{}'\n{USAGE}",
            args[0]
        )));
    }

    let mut inv = Invocation {
        command,
        config: None,
        checkpoint: None,
        out: None,
        seed: None,
    };
    let flag_start = if args[0] == "config" { 2 } else { 1 };
    let mut i = flag_start;
    while i < args.len() {
        let flag = args[i].as_str();
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::config(format!("flag {flag} needs a value\n{USAGE}")))?;
        match flag {
            "--config" => inv.config = Some(PathBuf::from(value)),
            "--checkpoint" => inv.checkpoint = Some(PathBuf::from(value)),
            "--out" => inv.out = Some(PathBuf::from(value)),
            "--seed" => {
                inv.seed = Some(value.parse().map_err(|_| {
                    Error::config(format!("--seed expects an unsigned integer, got '{value}'"))
                })?)
            }
            other => return Err(Error::config(format!("unknown flag '{other}'\n{USAGE}"))),
        }
        i += 2;
    }
    Ok(inv)
}

fn load_config(inv: &Invocation) -> Result<RunConfig, Error> {
    let path = inv
        .config
        .as_ref()
        .ok_or_else(|| Error::config(format!("--config is required\n{USAGE}")))?;
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_json(&text)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numeric { .. } => 4,
        Error::Io(_) => 1,
        Error::Config(_)
        | Error::Format { .. }
        | Error::Shape { .. }
        | Error::Layout { .. }
        | Error::Contract { .. }
        | Error::Index { .. } => 2,
    }
}

fn dispatch(inv: &Invocation) -> Result<(), Error> {
    let cfg = load_config(inv)?;
    let out_dir = inv
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir));
    match inv.command.as_str() {
        "config-dump" => {
            print!("{}", cfg.dump());
            Ok(())
        }
        "train" => commands::cmd_train(&cfg, &out_dir, inv.seed),
        "eval" => commands::cmd_eval(&cfg, &out_dir, inv.checkpoint.as_deref(), inv.seed),
        "count" => commands::cmd_count(&cfg, &out_dir),
        "bench" => commands::cmd_bench(&cfg, &out_dir),
        "gradcheck" => commands::cmd_gradcheck(&cfg),
        "attnmap" => commands::cmd_attnmap(&cfg, &out_dir, inv.checkpoint.as_deref()),
        other => Err(Error::config(format!("unknown subcommand '{other}'"))),
    }
}

/// Parse arguments, run the command, map errors onto exit codes.
pub fn run(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("ERROR {}: {e}", exit_code(&e));
            return exit_code(&e);
        }
    };
    match dispatch(&inv) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("ERROR {code}: {e}");
            code
        }
    }
}
