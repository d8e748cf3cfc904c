mod args;
mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::panic::AssertUnwindSafe;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use manifest::ManifestBuilder;

/// A user-facing input problem; exits with status 1.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

const EXIT_VALIDATION: i32 = 1;
const EXIT_INTERNAL: i32 = 2;

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<ValidationError>() {
            return EXIT_VALIDATION;
        }
        if let Some(err) = cause.downcast_ref::<iconokit::Error>() {
            return match err {
                iconokit::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_VALIDATION,
                e if e.is_validation() => EXIT_VALIDATION,
                _ => EXIT_INTERNAL,
            };
        }
    }
    EXIT_INTERNAL
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn run(argv: Vec<OsString>) -> Result<i32> {
    let merged = config::merge(argv)?;
    let cli = match Cli::try_parse_from(&merged) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return Ok(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ValidationError("--jobs must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot size the worker pool: {e}"))?;
    }
    let argv: Vec<String> = merged.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    macro_rules! dispatch {
        ($name:literal, $args:expr, $f:path) => {{
            let snapshot = serde_json::to_value($args)?;
            let mut m = ManifestBuilder::new($name, &argv, snapshot, cli.config.clone());
            $f($args, &mut m)
        }};
    }
    match &cli.command {
        Command::Measure(a) => dispatch!("measure", a, commands::measure),
        Command::Analyze(a) => dispatch!("analyze", a, commands::analyze),
        Command::Kg(a) => dispatch!("kg", a, commands::kg),
        Command::EmbedIngest(a) => dispatch!("embed-ingest", a, commands::embed_ingest),
        Command::Classify(a) => dispatch!("classify", a, commands::classify),
        Command::Report(a) => dispatch!("report", a, commands::report),
        Command::Synth(a) => dispatch!("synth", a, commands::synth),
        Command::Template(a) => dispatch!("template", a, commands::template),
    }?;
    Ok(0)
}

fn main() {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let code = match std::panic::catch_unwind(AssertUnwindSafe(|| run(argv))) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
        Err(_) => EXIT_INTERNAL,
    };
    std::process::exit(code);
}
