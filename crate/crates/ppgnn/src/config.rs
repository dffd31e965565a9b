//! Training configuration files.
//!
//! Plain `key = value` lines with `#` comments. Parsing is fail-closed:
//! unknown or duplicate keys are errors, because a silently ignored typo
//! (say `chunk_rows` misspelled) would invalidate a benchmark run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

const KNOWN_KEYS: &[&str] = &[
    "model",
    "hops",
    "batch_size",
    "chunk_rows",
    "method",
    "tier",
    "epochs",
    "lr",
    "dropout",
    "seed",
    "eval_every",
    "hidden_dim",
    "heads",
    "log",
    "inject_assemble_us",
    "inject_compute_us",
];

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parse and validate a config file.
pub fn parse_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = TrainConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut required: HashSet<&str> =
        ["model", "hops", "batch_size", "epochs", "lr", "seed", "method", "tier"]
            .into_iter()
            .collect();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(parse_err(path, line_no, format!("unknown key {key:?}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(parse_err(path, line_no, format!("duplicate key {key:?}")));
        }
        required.remove(key);

        let bad_num = |what: &str| parse_err(path, line_no, format!("invalid {what} {value:?}"));
        match key {
            "model" => cfg.model = value.parse()?,
            "hops" => cfg.num_hops = value.parse().map_err(|_| bad_num("hop count"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad_num("batch size"))?,
            "chunk_rows" => cfg.chunk_rows = value.parse().map_err(|_| bad_num("chunk size"))?,
            "method" => cfg.method = value.parse()?,
            "tier" => cfg.tier = value.parse()?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad_num("epoch count"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad_num("learning rate"))?,
            "dropout" => cfg.dropout = value.parse().map_err(|_| bad_num("dropout rate"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad_num("seed"))?,
            "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad_num("interval"))?,
            "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|_| bad_num("hidden dim"))?,
            "heads" => cfg.heads = value.parse().map_err(|_| bad_num("head count"))?,
            "log" => cfg.log_path = Some(PathBuf::from(value)),
            "inject_assemble_us" => {
                cfg.inject_assemble_us = value.parse().map_err(|_| bad_num("delay"))?
            }
            "inject_compute_us" => {
                cfg.inject_compute_us = value.parse().map_err(|_| bad_num("delay"))?
            }
            _ => unreachable!("key list checked above"),
        }
    }

    if !required.is_empty() {
        let mut missing: Vec<&str> = required.into_iter().collect();
        missing.sort_unstable();
        return Err(Error::Config(format!(
            "missing required config keys: {}",
            missing.join(", ")
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Render a config in the file format above.
pub fn render_train_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("model", cfg.model.to_string());
    push("hops", cfg.num_hops.to_string());
    push("batch_size", cfg.batch_size.to_string());
    push("chunk_rows", cfg.chunk_rows.to_string());
    push("method", cfg.method.to_string());
    push("tier", cfg.tier.to_string());
    push("epochs", cfg.epochs.to_string());
    push("lr", cfg.lr.to_string());
    push("dropout", cfg.dropout.to_string());
    push("seed", cfg.seed.to_string());
    push("eval_every", cfg.eval_every.to_string());
    push("hidden_dim", cfg.hidden_dim.to_string());
    push("heads", cfg.heads.to_string());
    push("inject_assemble_us", cfg.inject_assemble_us.to_string());
    push("inject_compute_us", cfg.inject_compute_us.to_string());
    if let Some(log) = &cfg.log_path {
        push("log", log.display().to_string());
    }
    out
}

/// Rewrite selected keys in place, preserving other lines and comments.
/// Keys not present are appended.
pub fn update_config_keys(path: &Path, updates: &[(&str, String)]) -> Result<()> {
    for (key, _) in updates {
        if !KNOWN_KEYS.contains(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut remaining: Vec<(&str, &String)> = updates.iter().map(|(k, v)| (*k, v)).collect();
    let mut lines: Vec<String> = Vec::new();
    for raw in text.lines() {
        let trimmed = raw.trim();
        let key = trimmed
            .split_once('=')
            .map(|(k, _)| k.trim())
            .filter(|_| !trimmed.starts_with('#'));
        if let Some(key) = key {
            if let Some(pos) = remaining.iter().position(|(k, _)| *k == key) {
                let (k, v) = remaining.remove(pos);
                lines.push(format!("{k} = {v}"));
                continue;
            }
        }
        lines.push(raw.to_string());
    }
    for (k, v) in remaining {
        lines.push(format!("{k} = {v}"));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
