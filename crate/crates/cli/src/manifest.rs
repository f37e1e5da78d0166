//! Run manifests: what was run, with which seeds, how long each stage took and
//! the content hash of every emitted file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Subcommand that produced the outputs.
    pub task: String,
    pub version: String,
    pub seeds: Seeds,
    pub stages: Vec<StageTiming>,
    pub artifacts: Vec<Artifact>,
    /// Resolved configuration, sufficient to rerun.
    pub config: ExperimentConfig,
}

/// Derived seeds span the full `u64` range, which TOML integers cannot hold,
/// so they are written as hex strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(with = "hex_u64")]
    pub run: u64,
    #[serde(with = "hex_u64")]
    pub train: u64,
    #[serde(with = "hex_u64")]
    pub train_streams: u64,
    #[serde(with = "hex_u64")]
    pub validation_streams: u64,
    #[serde(with = "hex_u64")]
    pub test_streams: u64,
    #[serde(with = "hex_u64")]
    pub readout: u64,
    #[serde(with = "hex_u64")]
    pub bootstrap: u64,
}

mod hex_u64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#018x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        let digits = text.strip_prefix("0x").ok_or_else(|| D::Error::custom("expected 0x prefix"))?;
        u64::from_str_radix(digits, 16).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentManifest {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text).context("parsing manifest")?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn artifact(&self, file: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.file == file)
    }

    /// Files whose current hash in `dir` differs from the recorded one.
    pub fn mismatches(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let path = dir.join(&a.file);
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            if sha256_hex(&bytes) != a.sha256 {
                bad.push(a.file.clone());
            }
        }
        Ok(bad)
    }
}
