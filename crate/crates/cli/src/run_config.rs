//! Resolution of a command's settings from the config file and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ahnlab::fsutil::write_atomic;
use ahnlab::kvtext::KvText;
use ahnlab::Error;
use anyhow::{Context, Result};

/// Flags shared by every command.
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

/// Merged `key=value` settings: file entries first, then flag overrides.
pub struct RunConfig {
    pub kv: KvText,
}

impl RunConfig {
    /// Reads `--config` (if any), applies `overrides` and `--seed`, and rejects
    /// keys outside `known`.
    pub fn resolve(common: &Common, overrides: KvText, known: &[&str]) -> Result<Self> {
        let mut kv = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                KvText::parse(&text)?
            }
            None => KvText::default(),
        };
        kv.merge(&overrides);
        if let Some(seed) = common.seed {
            kv.set("seed", seed);
        }
        kv.reject_unknown(known)?;
        Ok(RunConfig { kv })
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>> {
        Ok(self.kv.get(key)?)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get_str(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("`{key}` must be given by flag or config")).into())
    }
}

/// Builds override entries from optional flag values.
#[derive(Default)]
pub struct Overrides(pub KvText);

impl Overrides {
    pub fn opt<V: ToString>(&mut self, key: &str, v: &Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v.to_string());
        }
        self
    }

    pub fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(p) = v {
            self.0.set(key, p.display());
        }
        self
    }

    /// Generic `KEY=VALUE` pairs from `--set`.
    pub fn pairs(&mut self, pairs: &[String]) -> Result<&mut Self> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{p}`")))?;
            self.0.set(k.trim(), v.trim());
        }
        Ok(self)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes `contents` to `dir/name` atomically and returns the path.
pub fn emit(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn parse_list<V: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<V>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("invalid {what} `{s}`")).into())
        })
        .collect()
}
