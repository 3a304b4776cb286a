//! Option resolution (flag > config file > environment > default) and the
//! run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "SYNREWRITE_";

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Config,
    Env,
    Default,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, Value>,
    pub sources: BTreeMap<String, Source>,
    pub inputs: BTreeMap<String, InputHash>,
    pub seeds: BTreeMap<String, u64>,
}

pub struct Resolver {
    command: String,
    file: toml::Table,
    manifest: Manifest,
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('-', "_"))
}

fn toml_to_string(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(items) => items
            .iter()
            .map(toml_to_string)
            .collect::<Vec<_>>()
            .join(","),
        other => other.to_string(),
    }
}

impl Resolver {
    /// Top-level scalar keys of the config file apply to every command; a
    /// `[command]` table overrides them.
    pub fn new(command: &str, config: Option<&Path>) -> Result<Self> {
        let mut file = toml::Table::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            for (k, v) in &table {
                if !v.is_table() {
                    file.insert(k.clone(), v.clone());
                }
            }
            if let Some(toml::Value::Table(section)) = table.get(command) {
                for (k, v) in section {
                    file.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(Self {
            command: command.to_string(),
            file,
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: BTreeMap::new(),
                sources: BTreeMap::new(),
                inputs: BTreeMap::new(),
                seeds: BTreeMap::new(),
            },
        })
    }

    fn lookup(&self, key: &str) -> Option<(String, Source)> {
        if let Some(v) = self
            .file
            .get(key)
            .or_else(|| self.file.get(&key.replace('-', "_")))
        {
            return Some((toml_to_string(v), Source::Config));
        }
        std::env::var(env_name(key)).ok().map(|v| (v, Source::Env))
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T, source: Source) -> Result<()> {
        self.manifest
            .config
            .insert(key.to_string(), serde_json::to_value(value)?);
        self.manifest.sources.insert(key.to_string(), source);
        Ok(())
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let (value, source) = match flag {
            Some(v) => (v, Source::Flag),
            None => match self.lookup(key) {
                Some((raw, source)) => {
                    let v = raw.parse::<T>().map_err(|e| {
                        let from = if source == Source::Env {
                            env_name(key)
                        } else {
                            format!("config key `{key}`")
                        };
                        anyhow!("invalid value {raw:?} for {from}: {e}")
                    })?;
                    (v, source)
                }
                None => return Ok(None),
            },
        };
        self.record(key, &value, source)?;
        Ok(Some(value))
    }

    pub fn or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, &default, Source::Default)?;
                Ok(default)
            }
        }
    }

    pub fn req<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| {
            anyhow!(
                "`{}` needs --{key} (or `{key}` in the config file, or {})",
                self.command,
                env_name(key)
            )
        })
    }

    /// Comma-separated list; an empty flag list falls through to config/env.
    pub fn list(&mut self, key: &str, flag: Vec<String>, default: &[&str]) -> Result<Vec<String>> {
        let joined = (!flag.is_empty()).then(|| flag.join(","));
        let raw = self.or(key, joined, default.join(","))?;
        Ok(raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect())
    }

    /// A required input path; hashed into the manifest.
    pub fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let path = self.req(key, flag)?;
        self.hash_input(key, &path)?;
        Ok(path)
    }

    pub fn opt_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let path = self.opt(key, flag)?;
        if let Some(p) = &path {
            self.hash_input(key, p)?;
        }
        Ok(path)
    }

    fn hash_input(&mut self, key: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            bail!("{key}: {} does not exist", path.display());
        }
        self.manifest.inputs.insert(
            key.to_string(),
            InputHash {
                path: path.display().to_string(),
                sha256: hash_path(path)?,
            },
        );
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        synrewrite::datamodel::write_atomic(path, text.as_bytes())?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

/// sha256 of a file, or of a directory's sorted (relative path, contents)
/// pairs. A `manifest.json` left in a directory by an earlier run is
/// included like any other file.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(path.join(&rel)).with_context(|| format!("reading {rel}"))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root)?.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
