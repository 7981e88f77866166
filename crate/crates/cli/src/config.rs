//! Config file loading and flag/file merging.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Parsed `--config` file: optional top-level `out` and `seed`, and one
/// table per command named like the command (`[train]`, `[gen-data]`).
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    tables: Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut tables: Table = text.parse()?;
        let out = match tables.remove("out") {
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => bail!("`out` must be a string, got {other}"),
            None => None,
        };
        let seed = match tables.remove("seed") {
            Some(Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(other) => bail!("`seed` must be a non-negative integer, got {other}"),
            None => None,
        };
        Ok(ConfigFile { out, seed, tables })
    }

    /// The table for `command`, if present. Tables for other commands and
    /// the manifest's `[run]` table are ignored.
    pub fn command_table(&self, command: &str) -> anyhow::Result<Option<&Table>> {
        match self.tables.get(command) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(t)),
            Some(other) => bail!("`{command}` must be a table, got {other}"),
        }
    }
}

/// Overlays the flags that were given onto the file table and deserializes
/// the result. Unset flags serialize to nothing, so file values survive.
pub fn resolve<T: Serialize + DeserializeOwned>(
    flags: &T,
    file: Option<&Table>,
) -> anyhow::Result<T> {
    let mut merged = file.cloned().unwrap_or_default();
    let given = Table::try_from(flags).context("serializing command-line flags")?;
    merged.extend(given);
    Value::Table(merged)
        .try_into()
        .context("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "kebab-case")]
    struct Demo {
        steps: Option<usize>,
        latent_dim: Option<usize>,
        mode: Option<String>,
    }

    #[test]
    fn flags_override_file_values() {
        let file = ConfigFile::parse("seed = 3\n[train]\nsteps = 10\nlatent-dim = 27\n").unwrap();
        assert_eq!(file.seed, Some(3));
        let flags = Demo {
            steps: Some(20),
            ..Demo::default()
        };
        let merged = resolve(&flags, file.command_table("train").unwrap()).unwrap();
        assert_eq!(
            merged,
            Demo {
                steps: Some(20),
                latent_dim: Some(27),
                mode: None
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = ConfigFile::parse("[train]\nstpes = 10\n").unwrap();
        assert!(resolve(&Demo::default(), file.command_table("train").unwrap()).is_err());
    }

    #[test]
    fn bad_top_level_types_are_rejected() {
        assert!(ConfigFile::parse("seed = -1").is_err());
        assert!(ConfigFile::parse("out = 3").is_err());
        assert!(ConfigFile::parse("train = 3")
            .unwrap()
            .command_table("train")
            .is_err());
    }
}
