//! Output directories and the run manifest written into each of them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use odorcnn::util::{derive_seed, sha256_hex, stream};
use toml::Value;

use crate::config::RunConfig;
use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "ODORCNN_OUTPUT_ROOT";
pub const RUN_MANIFEST: &str = "run.toml";
pub const CONFIG_ECHO: &str = "config.toml";

/// Relative paths are taken below the output root when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Like [`resolve`], falling back to the path as given when nothing exists
/// below the output root.
pub fn resolve_input(path: &Path) -> PathBuf {
    let below = resolve(path);
    if below.exists() {
        below
    } else {
        path.to_path_buf()
    }
}

struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

pub struct Run {
    command: &'static str,
    pub out: PathBuf,
    started: Instant,
    started_unix: u64,
    artifacts: Vec<Artifact>,
    inputs: Vec<(String, String)>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    pub fn start(command: &'static str, out: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self { command, out, started: Instant::now(), started_unix: unix_now(), artifacts: Vec::new(), inputs: Vec::new() })
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).display().to_string()
    }

    /// Writes `name` below the output directory and records its checksum.
    pub fn write(&mut self, name: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let contents = contents.as_ref();
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.record_known(&path, contents.len() as u64, sha256_hex(contents));
        Ok(path)
    }

    /// Records a file written by someone else whose checksum is known.
    pub fn record_known(&mut self, path: &Path, bytes: u64, sha256: String) {
        let path = self.relative(path);
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(Artifact { path, bytes, sha256 });
    }

    pub fn record_file(&mut self, path: &Path) -> Result<(), CliError> {
        let contents = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.record_known(path, contents.len() as u64, sha256_hex(&contents));
        Ok(())
    }

    pub fn input(&mut self, name: &str, value: impl Into<String>) {
        self.inputs.push((name.to_string(), value.into()));
    }

    /// Writes the config echo and the manifest. `error` marks the run
    /// incomplete.
    pub fn finish(&mut self, config: &RunConfig, complete: bool, error: Option<&CliError>) -> Result<(), CliError> {
        let echo = config.echo();
        self.write(CONFIG_ECHO, &echo)?;

        let mut m = toml::Table::new();
        m.insert("command".into(), Value::String(self.command.into()));
        let status = if complete && error.is_none() { "complete" } else { "incomplete" };
        m.insert("status".into(), Value::String(status.into()));
        if let Some(e) = error {
            m.insert("error".into(), Value::String(e.line()));
        }
        m.insert("started_unix_s".into(), Value::Integer(self.started_unix as i64));
        m.insert("wall_clock_s".into(), Value::Float((self.started.elapsed().as_secs_f64() * 1e3).round() / 1e3));

        let mut versions = toml::Table::new();
        versions.insert("odorcnn".into(), Value::String(odorcnn::VERSION.into()));
        versions.insert("odorcnn_cli".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        versions.insert("dataset_format".into(), Value::Integer(odorcnn::datasets::FORMAT_VERSION.into()));
        versions.insert("checkpoint_format".into(), Value::Integer(odorcnn::tensor::CHECKPOINT_VERSION.into()));
        m.insert("versions".into(), Value::Table(versions));

        // seeds are unsigned 64-bit, wider than TOML integers
        let mut seeds = toml::Table::new();
        if let Ok(master) = config.seed() {
            seeds.insert("master".into(), Value::String(master.to_string()));
            seeds.insert("balance".into(), Value::String(derive_seed(master, &[stream::BALANCE]).to_string()));
            seeds.insert("folds".into(), Value::String(derive_seed(master, &[stream::FOLDS]).to_string()));
        }
        m.insert("seeds".into(), Value::Table(seeds));

        let inputs: toml::Table = self.inputs.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        m.insert("inputs".into(), Value::Table(inputs));
        m.insert("config".into(), Value::Table(config.table()));
        let artifacts = self
            .artifacts
            .iter()
            .filter(|a| a.path != RUN_MANIFEST)
            .map(|a| {
                let mut t = toml::Table::new();
                t.insert("path".into(), Value::String(a.path.clone()));
                t.insert("bytes".into(), Value::Integer(a.bytes as i64));
                t.insert("sha256".into(), Value::String(a.sha256.clone()));
                Value::Table(t)
            })
            .collect();
        m.insert("artifacts".into(), Value::Array(artifacts));

        let text = toml::to_string(&m).map_err(|e| CliError::new("internal", e.to_string()))?;
        let path = self.out.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
