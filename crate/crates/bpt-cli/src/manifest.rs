//! Run manifests: every subcommand writes one next to its outputs, and any
//! manifest can be fed back through `--config` to reproduce the run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Snapshot of one run: which subcommand, the fully resolved configuration,
/// and where the outputs went. Deterministic subcommands reproduce their
/// outputs bitwise when rerun from this file.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RunManifest<C> {
    pub artifact_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub timestamp_unix_seconds: u64,
    pub output_paths: Vec<String>,
    pub config: C,
}

fn config_error(problems: Vec<String>) -> anyhow::Error {
    bpt::Error::InvalidConfig(problems).into()
}

/// Writes `<subcommand>_manifest.toml` into `dir` and returns its path.
pub fn write<C: Serialize>(dir: &Path, manifest: &RunManifest<C>) -> anyhow::Result<PathBuf> {
    let path = dir.join(format!("{}_manifest.toml", manifest.subcommand));
    let text = toml::to_string_pretty(manifest)
        .with_context(|| format!("serializing {} manifest", manifest.subcommand))?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn seal<C: Serialize>(
    dir: &Path,
    subcommand: &str,
    seed: u64,
    output_paths: &[PathBuf],
    config: C,
) -> anyhow::Result<PathBuf> {
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: subcommand.to_string(),
        seed,
        timestamp_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        output_paths: output_paths.iter().map(|p| p.display().to_string()).collect(),
        config,
    };
    write(dir, &manifest)
}

/// Loads a `--config` file for `subcommand` as a raw value. The file may be
/// a bare config or a previously written manifest; a manifest must belong to
/// the same subcommand, and its resolved config snapshot is what gets
/// replayed. The flag reports whether the value came out of a manifest.
pub fn load_value(path: &Path, subcommand: &str) -> anyhow::Result<(toml::Value, bool)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: toml::Value = text
        .parse()
        .map_err(|e| config_error(vec![format!("{}: {e}", path.display())]))?;
    match value.get("subcommand").and_then(toml::Value::as_str) {
        Some(owner) if owner == subcommand => {
            let snapshot = value.get("config").cloned().ok_or_else(|| {
                config_error(vec![format!(
                    "{}: manifest has no [config] table",
                    path.display()
                )])
            })?;
            Ok((snapshot, true))
        }
        Some(owner) => Err(config_error(vec![format!(
            "{}: manifest belongs to subcommand '{owner}', not '{subcommand}'",
            path.display()
        )])),
        None => Ok((value, false)),
    }
}

/// Deserializes a loaded value, reporting schema problems as config errors.
pub fn decode<C: DeserializeOwned>(value: toml::Value, origin: &Path) -> anyhow::Result<C> {
    value
        .try_into()
        .map_err(|e| config_error(vec![format!("{}: {e}", origin.display())]))
}

pub fn load_config<C: DeserializeOwned>(path: &Path, subcommand: &str) -> anyhow::Result<C> {
    let (value, _) = load_value(path, subcommand)?;
    decode(value, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
    struct Toy {
        #[serde(default)]
        knob: u32,
    }

    #[test]
    fn bare_config_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bare = dir.path().join("toy.toml");
        std::fs::write(&bare, "knob = 7\n").unwrap();
        let loaded: Toy = load_config(&bare, "trace").unwrap();
        assert_eq!(loaded, Toy { knob: 7 });

        let written = seal(dir.path(), "trace", 3, std::slice::from_ref(&bare), Toy { knob: 7 }).unwrap();
        let replayed: Toy = load_config(&written, "trace").unwrap();
        assert_eq!(replayed, Toy { knob: 7 });
    }

    #[test]
    fn manifest_for_another_subcommand_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let written = seal(dir.path(), "bench", 0, &[], Toy { knob: 1 }).unwrap();
        let err = load_config::<Toy>(&written, "trace").unwrap_err();
        assert!(err.to_string().contains("belongs to subcommand 'bench'"));
    }
}
