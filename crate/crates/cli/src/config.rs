//! `key = value` config files merged into the argument list.
//!
//! Keys are long flag names, with or without the leading dashes; `_` and `-`
//! are interchangeable. Boolean flags take `true`/`false`. Repeatable flags may
//! appear on several lines. A flag given on the command line replaces every
//! config line for it.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;

use crate::args::Cli;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(crate::ValidationError(format!("{source}:{}: expected `key = value`", i + 1)));
        };
        let key = key.trim().trim_start_matches('-').replace('_', "-");
        if key.is_empty() {
            bail!(crate::ValidationError(format!("{source}:{}: empty key", i + 1)));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        entries.push(Entry {
            line: i + 1,
            key,
            value: value.to_string(),
        });
    }
    Ok(entries)
}

/// Finds `--config FILE` or `--config=FILE` in raw arguments.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_position(argv: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if names.iter().any(|n| *n == s) {
            return Some(i);
        }
        if s == "--config" || s == "--jobs" {
            i += 1;
        }
        i += 1;
    }
    None
}

fn given_on_command_line(argv: &[OsString], flag: &str) -> bool {
    let long = format!("--{flag}");
    let with_value = format!("--{flag}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == long || s.starts_with(&with_value)
    })
}

/// Returns `argv` with the config file's flags inserted right after the
/// subcommand, so command-line flags parse later and win.
pub fn merge(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read config file {}", path.display()))
        .map_err(|e| anyhow::Error::new(crate::ValidationError(format!("{e:#}"))))?;
    let entries = parse(&text, &path.display().to_string())?;
    let cli = Cli::command();
    let names: Vec<String> = cli.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = subcommand_position(&argv, &names) else {
        return Ok(argv);
    };
    let sub = cli
        .find_subcommand(argv[pos].to_string_lossy().as_ref())
        .expect("position found by name");
    let mut extra: Vec<OsString> = Vec::new();
    for e in entries {
        let Some(arg) = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()) && !a.is_global_set())
        else {
            bail!(crate::ValidationError(format!(
                "{}:{}: `{}` is not an option of `{}`",
                path.display(),
                e.line,
                e.key,
                sub.get_name()
            )));
        };
        if given_on_command_line(&argv, &e.key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{}", e.key).into());
            extra.push(e.value.into());
        } else {
            match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => extra.push(format!("--{}", e.key).into()),
                "false" | "no" | "0" | "off" => {}
                other => bail!(crate::ValidationError(format!(
                    "{}:{}: `{}` is a switch; expected true or false, got {other:?}",
                    path.display(),
                    e.line,
                    e.key
                ))),
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
