//! Run-configuration loading: TOML file, dotted-path CLI overrides, and
//! convenience flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use syncast_core::train::RunConfig;
use toml::Value;

/// A bad flag or malformed override: callers exit with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Applies `--section.field=value` (or `--section.field value`) overrides
/// onto a TOML document. Values parse as TOML literals when possible and
/// fall back to strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut i = 0;
    while i < overrides.len() {
        let raw = &overrides[i];
        let Some(stripped) = raw.strip_prefix("--") else {
            return Err(usage(format!("override '{raw}' must start with --")));
        };
        let (path, value) = match stripped.split_once('=') {
            Some((p, v)) => (p.to_string(), v.to_string()),
            None => {
                let v = overrides
                    .get(i + 1)
                    .ok_or_else(|| usage(format!("unknown flag or value-less override --{stripped}")))?
                    .clone();
                i += 1;
                (stripped.to_string(), v)
            }
        };
        set_path(table, &path, parse_value(&value))
            .with_context(|| format!("cannot apply override --{path}"))?;
        i += 1;
    }
    Ok(())
}

fn parse_value(s: &str) -> Value {
    // A bare TOML scalar or array; strings need no quoting on the CLI.
    if let Ok(v) = s.parse::<i64>() {
        return Value::Integer(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return Value::Float(v);
    }
    if s == "true" || s == "false" {
        return Value::Boolean(s == "true");
    }
    if s.starts_with('[') {
        if let Ok(v) = format!("x = {s}").parse::<toml::Table>() {
            if let Some(v) = v.get("x") {
                return v.clone();
            }
        }
    }
    Value::String(s.to_string())
}

fn set_path(table: &mut toml::Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("empty key path"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("'{part}' is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads the run configuration: file (or defaults), then dotted overrides,
/// then the `--output-dir` shortcut.
pub fn load_config(
    config_path: Option<&Path>,
    output_dir: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let cfg: RunConfig = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("malformed config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let cfg = if overrides.is_empty() {
        cfg
    } else {
        let serialized = toml::to_string(&cfg).context("serializing defaults")?;
        let mut table: toml::Table = serialized.parse().context("round-tripping config")?;
        apply_overrides(&mut table, overrides)?;
        let text = toml::to_string(&table).context("serializing overridden config")?;
        toml::from_str(&text)
            .map_err(|e| usage(format!("override does not fit the configuration: {e}")))?
    };
    let mut cfg = cfg;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves a path argument relative to the output directory unless it is
/// absolute or explicitly relative to the working directory.
pub fn resolve(output_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.starts_with(".") {
        p.to_path_buf()
    } else {
        output_dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_fields() {
        let mut t = toml::Table::new();
        apply_overrides(
            &mut t,
            &[
                "--training.steps=123".to_string(),
                "--model.base_channels".to_string(),
                "8".to_string(),
                "--eval.thresholds=[0.1, 0.5]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(t["training"]["steps"].as_integer(), Some(123));
        assert_eq!(t["model"]["base_channels"].as_integer(), Some(8));
        assert_eq!(t["eval"]["thresholds"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn load_config_applies_overrides() {
        let cfg = load_config(None, None, &["--training.steps=42".to_string()]).unwrap();
        assert_eq!(cfg.training.steps, 42);
        // Defaults survive untouched.
        assert_eq!(cfg.training.batch_size, RunConfig::default().training.batch_size);
    }

    #[test]
    fn bad_override_is_rejected() {
        assert!(load_config(None, None, &["--training.steps=zero".to_string()]).is_err());
        assert!(load_config(None, None, &["training.steps=1".to_string()]).is_err());
    }
}
