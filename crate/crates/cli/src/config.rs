//! Run configuration: a flat map of dotted keys with typed defaults. Values
//! come from the defaults, then a TOML file, then `--set key=value`, then the
//! dedicated command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use odorcnn::datasets::SynthConfig;
use odorcnn::dsp::PreprocessConfig;
use odorcnn::models::Arch;
use odorcnn::training::{AdamWConfig, CvConfig, CvMode, ScheduleKind, TrainConfig};
use toml::Value;

use crate::CliError;

fn defaults() -> Vec<(&'static str, Value)> {
    let synth = SynthConfig::default();
    let pre = PreprocessConfig::default();
    let train = TrainConfig::default();
    let cv = CvConfig::default();
    let int = |v: usize| Value::Integer(v as i64);
    vec![
        ("seed", Value::Integer(7)),
        ("data", Value::String(String::new())),
        ("out", Value::String(String::new())),
        ("synth.n_trials", int(synth.n_trials)),
        ("synth.snr", Value::Float(synth.snr)),
        ("synth.class_balance", Value::Float(synth.class_balance)),
        ("synth.channels", int(synth.channels)),
        ("synth.samples", int(synth.samples)),
        ("synth.sample_rate_hz", Value::Float(synth.sample_rate_hz)),
        ("preprocess.order", int(pre.order)),
        ("preprocess.low_hz", Value::Float(pre.low_hz)),
        ("preprocess.high_hz", Value::Float(pre.high_hz)),
        ("preprocess.decimate", int(pre.decimate)),
        ("preprocess.nperseg", int(pre.nperseg)),
        ("preprocess.overlap", Value::Float(pre.overlap)),
        ("preprocess.channels", int(pre.channels)),
        ("model.arch", Value::String("res".into())),
        ("train.precision", Value::String("f32".into())),
        ("train.batch_size", int(train.batch_size)),
        ("train.max_epochs", int(train.max_epochs)),
        ("train.schedule", Value::String(train.schedule.tag().into())),
        ("train.lr_max", Value::Float(train.lr_max)),
        ("train.lr_min", Value::Float(train.lr_min)),
        ("train.t0", int(train.t0)),
        ("train.t_mult", int(train.t_mult)),
        ("train.pct_start", Value::Float(train.pct_start)),
        ("train.div", Value::Float(train.div)),
        ("train.final_div", Value::Float(train.final_div)),
        ("train.weight_decay", Value::Float(train.optimizer.weight_decay)),
        ("train.beta1", Value::Float(train.optimizer.beta1)),
        ("train.beta2", Value::Float(train.optimizer.beta2)),
        ("train.eps", Value::Float(train.optimizer.eps)),
        ("train.patience", int(train.patience)),
        ("train.min_delta", Value::Float(train.min_delta)),
        ("train.eval_batch", int(train.eval_batch)),
        ("train.fold", int(0)),
        ("cv.k", int(cv.k)),
        ("cv.val_fraction", Value::Float(cv.val_fraction)),
        ("cv.balance", Value::Boolean(cv.balance)),
        ("cv.ensemble", Value::Boolean(false)),
        ("cv.jobs", int(cv.jobs)),
        ("eval.bins", int(10)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::new("invalid_config", format!("{key}: {msg}"))
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults().into_iter().collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let Some((&name, current)) = self.values.get_key_value(key) else {
            return Err(invalid(key, "unknown key"));
        };
        let value = match (current, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (c, v) if std::mem::discriminant(c) == std::mem::discriminant(&v) => v,
            (c, v) => return Err(invalid(key, format!("expected {}, got {}", type_name(c), type_name(&v)))),
        };
        self.values.insert(name, value);
        Ok(())
    }

    /// `key=value` where the value is read as a TOML literal, or as a bare
    /// string when it does not parse as one.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| CliError::new("invalid_config", format!("--set expects key=value, got {pair:?}")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key, value)
    }

    /// Merges a TOML file. A run manifest is accepted too: its `config`
    /// table is used.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::new("invalid_config", format!("{}: {}", path.display(), e.message())))?;
        if let Some(Value::Table(inner)) = table.remove("config") {
            table = inner;
        }
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        for (k, v) in pairs {
            self.set(&k, v)?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("no default for {key}"))
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("string key")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("boolean key")
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v = self.get(key).as_float().expect("float key");
        if v.is_finite() {
            Ok(v)
        } else {
            Err(invalid(key, "must be finite"))
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        let v = self.get(key).as_integer().expect("integer key");
        usize::try_from(v).map_err(|_| invalid(key, format!("must be non-negative, got {v}")))
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        let v = self.get(key).as_integer().expect("integer key");
        u64::try_from(v).map_err(|_| invalid(key, format!("must be non-negative, got {v}")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.u64("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            n_trials: self.usize("synth.n_trials")?,
            snr: self.f64("synth.snr")?,
            seed: self.seed()?,
            class_balance: self.f64("synth.class_balance")?,
            channels: self.usize("synth.channels")?,
            samples: self.usize("synth.samples")?,
            sample_rate_hz: self.f64("synth.sample_rate_hz")?,
        })
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig, CliError> {
        Ok(PreprocessConfig {
            order: self.usize("preprocess.order")?,
            low_hz: self.f64("preprocess.low_hz")?,
            high_hz: self.f64("preprocess.high_hz")?,
            decimate: self.usize("preprocess.decimate")?,
            nperseg: self.usize("preprocess.nperseg")?,
            overlap: self.f64("preprocess.overlap")?,
            channels: self.usize("preprocess.channels")?,
        })
    }

    pub fn arch(&self) -> Result<Arch, CliError> {
        self.str("model.arch").parse().map_err(|e: odorcnn::Error| invalid("model.arch", e))
    }

    /// True for 64-bit training.
    pub fn double_precision(&self) -> Result<bool, CliError> {
        match self.str("train.precision") {
            "f32" => Ok(false),
            "f64" => Ok(true),
            other => Err(invalid("train.precision", format!("expected f32 or f64, got {other:?}"))),
        }
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let schedule: ScheduleKind =
            self.str("train.schedule").parse().map_err(|e: odorcnn::Error| invalid("train.schedule", e))?;
        let cfg = TrainConfig {
            batch_size: self.usize("train.batch_size")?,
            max_epochs: self.usize("train.max_epochs")?,
            schedule,
            lr_max: self.f64("train.lr_max")?,
            lr_min: self.f64("train.lr_min")?,
            t0: self.usize("train.t0")?,
            t_mult: self.usize("train.t_mult")?,
            pct_start: self.f64("train.pct_start")?,
            div: self.f64("train.div")?,
            final_div: self.f64("train.final_div")?,
            optimizer: AdamWConfig {
                beta1: self.f64("train.beta1")?,
                beta2: self.f64("train.beta2")?,
                eps: self.f64("train.eps")?,
                weight_decay: self.f64("train.weight_decay")?,
            },
            patience: self.usize("train.patience")?,
            min_delta: self.f64("train.min_delta")?,
            eval_batch: self.usize("train.eval_batch")?,
        };
        cfg.validate().map_err(|e| CliError::new("invalid_config", e.to_string()))?;
        if cfg.t0 == 0 || cfg.t_mult == 0 {
            return Err(invalid("train.t0", "t0 and t_mult must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn cv(&self, mode: CvMode) -> Result<CvConfig, CliError> {
        let k = self.usize("cv.k")?;
        if k < 2 {
            return Err(invalid("cv.k", format!("must be at least 2, got {k}")));
        }
        let val_fraction = self.f64("cv.val_fraction")?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(invalid("cv.val_fraction", format!("must lie in (0, 1), got {val_fraction}")));
        }
        let jobs = self.usize("cv.jobs")?;
        if jobs == 0 {
            return Err(invalid("cv.jobs", "must be at least 1"));
        }
        Ok(CvConfig {
            k,
            val_fraction,
            balance: self.bool("cv.balance"),
            mode,
            train: self.train()?,
            seed: self.seed()?,
            jobs,
        })
    }

    /// Flat `key = value` lines, sorted by key; valid TOML that reloads to
    /// the same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn table(&self) -> toml::Table {
        let mut root = toml::Table::new();
        for (k, v) in &self.values {
            let mut node = &mut root;
            let parts: Vec<&str> = k.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("section");
            }
            node.insert(parts[parts.len() - 1].to_string(), v.clone());
        }
        root
    }
}
