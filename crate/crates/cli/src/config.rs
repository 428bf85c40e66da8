//! Config-file layering. A config file is a flat table whose keys are flag
//! names (`zero_threshold = 0.3`). Its values are spliced into the argument
//! list for every flag not given on the command line, so clap validates them
//! exactly like typed flags: CLI > environment > config file > defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use exprsaug::{Error, Result};

use crate::args::Cli;

/// Flags that are never read from, or written to, a config table.
const NOT_CONFIGURABLE: &[&str] = &["config", "threads", "help", "version"];

pub struct Parsed {
    pub cli: Cli,
    /// Subcommand path, e.g. `["validate", "cv"]`.
    pub command: Vec<String>,
    /// Effective value of every configurable flag that has one.
    pub effective: BTreeMap<String, String>,
}

/// Parses `argv`, applying the config file named by `--config` if present.
pub fn parse(argv: Vec<OsString>) -> std::result::Result<Result<Parsed>, clap::Error> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let (path, leaf) = leaf(&matches);
    let Some(config) = leaf.get_one::<std::path::PathBuf>("config") else {
        return Ok(Ok(finish(&matches)?));
    };
    let table = match load_table(config) {
        Ok(t) => t,
        Err(e) => return Ok(Err(e)),
    };
    let known = all_flag_ids();
    if let Some(bad) = table.keys().find(|k| !known.contains(k.as_str())) {
        return Ok(Err(Error::config(format!("{}: unknown key {bad:?}", config.display()))));
    }
    let cmd = leaf_command(&path);
    let mut argv = argv;
    for (key, value) in &table {
        let applies = cmd.get_arguments().any(|a| a.get_id() == key.as_str());
        if !applies {
            continue;
        }
        let from_cli = matches!(
            leaf.value_source(key),
            Some(ValueSource::CommandLine | ValueSource::EnvVariable)
        );
        if !from_cli {
            argv.push(format!("--{}={value}", key.replace('_', "-")).into());
        }
    }
    let matches = Cli::command().try_get_matches_from(&argv)?;
    Ok(Ok(finish(&matches)?))
}

fn finish(matches: &ArgMatches) -> std::result::Result<Parsed, clap::Error> {
    let cli = Cli::from_arg_matches(matches)?;
    let (path, leaf) = leaf(matches);
    let cmd = leaf_command(&path);
    let mut effective = BTreeMap::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if NOT_CONFIGURABLE.contains(&id) {
            continue;
        }
        if let Some(raw) = leaf.get_raw(id) {
            let parts: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            // `--flag` with no value stands for `true`.
            let value = if parts.is_empty() { "true".to_owned() } else { parts.join(",") };
            effective.insert(id.to_owned(), value);
        }
    }
    Ok(Parsed {
        cli,
        command: path,
        effective,
    })
}

fn leaf(matches: &ArgMatches) -> (Vec<String>, &ArgMatches) {
    let mut path = Vec::new();
    let mut m = matches;
    while let Some((name, sub)) = m.subcommand() {
        path.push(name.to_owned());
        m = sub;
    }
    (path, m)
}

fn leaf_command(path: &[String]) -> clap::Command {
    let mut cmd = Cli::command();
    for name in path {
        cmd = cmd.find_subcommand(name).expect("path comes from parsed matches").clone();
    }
    cmd
}

fn all_flag_ids() -> BTreeSet<String> {
    fn walk(cmd: &clap::Command, out: &mut BTreeSet<String>) {
        for a in cmd.get_arguments() {
            let id = a.get_id().as_str();
            if !NOT_CONFIGURABLE.contains(&id) {
                out.insert(id.to_owned());
            }
        }
        for sub in cmd.get_subcommands() {
            walk(sub, out);
        }
    }
    let mut out = BTreeSet::new();
    walk(&Cli::command(), &mut out);
    out
}

/// Reads a flat TOML table, or the `config` object of a run manifest (`.json`).
pub fn load_table(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::config(format!("{}: {msg}", path.display()));
    let mut out = BTreeMap::new();
    if path.extension().is_some_and(|e| e == "json") {
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let obj = doc.get("config").unwrap_or(&doc);
        let obj = obj.as_object().ok_or_else(|| bad("expected a JSON object".into()))?;
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                _ => return Err(bad(format!("key {k:?} must be a scalar"))),
            };
            out.insert(k.clone(), s);
        }
    } else {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.message().to_owned()))?;
        for (k, v) in table {
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                _ => return Err(bad(format!("key {k:?} must be a scalar"))),
            };
            out.insert(k, s);
        }
    }
    Ok(out)
}
