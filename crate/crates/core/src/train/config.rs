use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Optimization and preprocessing settings plus the model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Per-epoch decay: epoch `e` (from 1) uses `lr / (1 + decay * (e - 1))`.
    /// 0 keeps the rate constant.
    pub lr_decay: f64,
    pub seed: u64,
    pub task: Task,
    pub min_count: usize,
    pub lowercase: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.015,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 10,
            max_epochs: 50,
            patience: 10,
            lr_decay: 0.0,
            seed: 42,
            task: Task::Ner,
            min_count: 1,
            lowercase: false,
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Set one field by name. Dashes and underscores are interchangeable;
    /// `no-char-cnn`, `no-bilstm` and `no-crf` mirror the CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        let m = &mut self.model;
        match k {
            "learning_rate" | "lr" => self.learning_rate = parse(k, value)?,
            "momentum" => self.momentum = parse(k, value)?,
            "clip_norm" => self.clip_norm = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "max_epochs" => self.max_epochs = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "lr_decay" => self.lr_decay = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "task" => self.task = value.parse()?,
            "min_count" => self.min_count = parse(k, value)?,
            "lowercase" => self.lowercase = parse_bool(k, value)?,
            "dropout" => m.dropout = parse(k, value)?,
            "char_dim" => m.char_dim = parse(k, value)?,
            "num_filters" => m.num_filters = parse(k, value)?,
            "kernel_size" => m.kernel_size = parse(k, value)?,
            "word_dim" => m.word_dim = parse(k, value)?,
            "hidden_dim" => m.hidden_dim = parse(k, value)?,
            "freeze_embeddings" => m.freeze_embeddings = parse_bool(k, value)?,
            "use_char_cnn" => m.use_char_cnn = parse_bool(k, value)?,
            "use_bilstm" => m.use_bilstm = parse_bool(k, value)?,
            "use_crf" => m.use_crf = parse_bool(k, value)?,
            "no_char_cnn" => m.use_char_cnn = !parse_bool(k, value)?,
            "no_bilstm" => m.use_bilstm = !parse_bool(k, value)?,
            "no_crf" => m.use_crf = !parse_bool(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` file. `#` starts a comment; blank lines are
    /// ignored. Returns the keys that were set, in file order.
    pub fn apply_file_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            keys.push(k.trim().replace('-', "_"));
        }
        Ok(keys)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr_decay must be >= 0, got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        self.model.validate()
    }

    /// Learning rate for a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * (epoch.saturating_sub(1)) as f64)
    }
}
