//! Shared plumbing for one command invocation: preset, output directory, manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastsearch_core::preset::Preset;
use serde::Serialize;

use crate::manifest::{list_artifacts, unix_now, InputHasher, RunManifest, MANIFEST_FILE};

pub const PRESET_FILE: &str = "preset.json";
pub const THREADS_ENV: &str = "FASTSEARCH_THREADS";

/// Worker-thread cap from the environment, defaulting to the available cores.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!(fastsearch_core::Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Built-in preset by name, or a preset JSON file that replaces it.
pub fn resolve_preset(name: Option<&str>, config: Option<&Path>) -> Result<(String, Preset)> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let preset: Preset = serde_json::from_str(&text)
                .map_err(|e| fastsearch_core::Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            preset.validate()?;
            Ok((name.unwrap_or("custom").to_string(), preset))
        }
        None => {
            let name = name.unwrap_or("desk");
            Ok((name.to_string(), Preset::builtin(name)?))
        }
    }
}

pub fn load_run_preset(run_dir: &Path) -> Result<Preset> {
    let path = run_dir.join(PRESET_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let preset: Preset = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    preset.validate()?;
    Ok(preset)
}

/// Empties an output directory of a previous run's artifacts; refuses foreign contents.
fn prepare_out(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()));
    }
    if !dir.is_dir() {
        bail!("output path {} is not a directory", dir.display());
    }
    if dir.join(MANIFEST_FILE).exists() {
        let old = RunManifest::load(dir)?;
        for a in &old.artifacts {
            let p = dir.join(&a.path);
            if p.is_file() {
                std::fs::remove_file(&p).with_context(|| format!("removing stale {}", p.display()))?;
            }
        }
        std::fs::remove_file(dir.join(MANIFEST_FILE))?;
        return Ok(());
    }
    if std::fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} is not empty and has no manifest; refusing to mix runs", dir.display());
    }
    Ok(())
}

pub struct Run {
    pub command: &'static str,
    pub preset_name: String,
    pub config_path: Option<PathBuf>,
    pub preset: Preset,
    pub out: PathBuf,
    pub threads: usize,
    pub hasher: InputHasher,
    started: u64,
}

impl Run {
    pub fn start(command: &'static str, preset_name: String, config_path: Option<PathBuf>, preset: Preset, out: PathBuf) -> Result<Self> {
        let threads = thread_cap()?;
        prepare_out(&out)?;
        let mut hasher = InputHasher::default();
        hasher.add("command", command.as_bytes());
        hasher.add(PRESET_FILE, serde_json::to_string(&preset)?.as_bytes());
        Ok(Self { command, preset_name, config_path, preset, out, threads, hasher, started: unix_now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    pub fn seed(&self) -> u64 {
        self.preset.search.seed
    }

    /// Writes the manifest listing everything now under the output directory.
    pub fn finish(self, status: &str) -> Result<RunManifest> {
        let seed = self.seed();
        let m = RunManifest {
            command: self.command.to_string(),
            status: status.to_string(),
            preset: self.preset_name,
            config_path: self.config_path.map(|p| p.display().to_string()),
            seed,
            threads: self.threads,
            input_hash: self.hasher.finish(),
            out_dir: self.out.display().to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
            artifacts: list_artifacts(&self.out)?,
        };
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        std::fs::write(self.out.join(MANIFEST_FILE), s)?;
        Ok(m)
    }
}
