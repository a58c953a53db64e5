//! `--config` files and the `config.resolved` record written by every run.
//!
//! A config file is TOML restricted to `key = value` lines whose keys are
//! flag names (`batch_size` or `batch-size`). Its entries are spliced in
//! right after the subcommand, so anything given on the command line
//! later overrides them.

use std::ffi::OsString;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::usage;

pub const RESOLVED: &str = "config.resolved";

/// Keys whose values are paths and get made absolute when recorded.
const PATH_KEYS: [&str; 4] = ["data", "val_data", "checkpoint", "out"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn value_text(key: &str, v: &toml::Value) -> anyhow::Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => return Err(usage(format!("config key `{key}`: unsupported value {other}"))),
    })
}

pub fn expand_args(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(sub) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(args);
    };
    let sub = sub + 1;
    let Some(path) = config_path(&args[sub + 1..]) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("config {}: {e}", Path::new(&path).display())))?;
    let mut injected = Vec::new();
    for (key, value) in &table {
        if key == "config" {
            continue;
        }
        let flag = key.replace('_', "-");
        injected.push(OsString::from(format!("--{flag}={}", value_text(key, value)?)));
    }
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

/// Writes `config.resolved` into `dir`. Re-running
/// `rowquant <command> --config <dir>/config.resolved` repeats the run.
pub fn write_resolved<T: Serialize>(dir: &Path, command: &str, args: &T) -> anyhow::Result<()> {
    let mut table = toml::Table::try_from(args).context("serializing resolved config")?;
    for key in PATH_KEYS {
        if let Some(toml::Value::String(s)) = table.get(key) {
            if let Ok(abs) = std::path::absolute(s) {
                if key == "out" || abs.exists() || key == "checkpoint" {
                    table.insert(key.into(), toml::Value::String(abs.display().to_string()));
                }
            }
        }
    }
    let text = format!(
        "# rowquant {command}\n# rerun: rowquant {command} --config {RESOLVED}\n{}",
        toml::to_string(&table)?
    );
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_entries_go_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 3\nbatch_size = 8\nlr = 0.5\n").unwrap();
        let args = os(&["rowquant", "quantize", "--config", p.to_str().unwrap(), "--epochs", "7"]);
        let out = expand_args(args).unwrap();
        let text: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(&text[..2], ["rowquant", "quantize"]);
        assert!(text.contains(&"--batch-size=8".to_string()));
        assert!(text.contains(&"--lr=0.5".to_string()));
        let file_pos = text.iter().position(|s| s == "--epochs=3").unwrap();
        let flag_pos = text.iter().position(|s| s == "--epochs").unwrap();
        assert!(file_pos < flag_pos);
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let err = expand_args(os(&["rowquant", "eval", "--config", "/nonexistent/x"])).unwrap_err();
        assert!(err.downcast_ref::<crate::UsageError>().is_some());
    }
}
