//! Flat `key = value` run configuration with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use madation::{Error, Result};

/// One configurable key: name, default (empty when unset) and help text.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Keys every command accepts.
pub const COMMON: &[Key] = &[
    key("seed", "0", "base random seed"),
    key("deterministic", "true", "fixed-order reductions"),
    key("threads", "0", "worker threads, 0 for all cores"),
];

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

/// Adds `--config` and one `--<key>` flag per key. Boolean keys also work
/// as bare switches.
pub fn with_keys(mut cmd: Command, keys: &[&[Key]]) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags take precedence"),
    );
    for k in keys.iter().flat_map(|ks| ks.iter()) {
        let arg = Arg::new(k.name).long(flag(k.name)).help(k.help);
        let boolean = matches!(k.default, "true" | "false");
        let arg = if boolean {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else {
            arg.value_name("VALUE").action(ArgAction::Set)
        };
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Resolved values: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(command: &str, keys: &[&[Key]], matches: &ArgMatches) -> Result<Self> {
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .flat_map(|ks| ks.iter())
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        if let Some(path) = matches.get_one::<String>("config") {
            let path = Path::new(path);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (key, value) in parse(&text)? {
                if !values.contains_key(&key) {
                    return Err(Error::Config(format!("unknown key {key:?} for {command}")));
                }
                values.insert(key, value);
            }
        }
        for (key, value) in values.iter_mut() {
            if let Some(v) = matches.get_one::<String>(key) {
                *value = v.clone();
            }
        }
        Ok(RunConfig {
            command: command.to_string(),
            values,
        })
    }

    /// Replaces a value, for keys resolved from presets.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let slot = self
            .values
            .get_mut(key)
            .unwrap_or_else(|| panic!("{key} is not a key of {}", self.command));
        *slot = value.to_string();
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a key of {}", self.command))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.raw(key) {
            "" => Err(Error::Config(format!("{} requires --{}", self.command, flag(key)))),
            v => Ok(v),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.str(key).map(PathBuf::from)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = {raw:?} is not a valid value")))
    }

    /// `None` when the key is empty.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# madation {}\n", self.command);
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Writes `config.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
