//! Flat `key = value` run configuration.
//!
//! Values are resolved from defaults, then a config file, then command-line
//! flags. Keys use underscores in files and dashes as flags
//! (`max_epochs` ↔ `--max-epochs`); files may use either spelling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use atrseq::cells::CellKind;
use atrseq::corpus::Task;
use atrseq::seq2seq::ModelConfig;
use atrseq::training::{ClipMode, TrainConfig};

use crate::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task", "copy", "synthetic task: copy, reverse or sort"),
    ("vocab_size", "20", "synthetic vocabulary size"),
    ("min_len", "2", "shortest synthetic source"),
    ("max_src_len", "15", "longest synthetic source"),
    ("train_pairs", "5000", "synthetic training pairs"),
    ("valid_pairs", "500", "synthetic held-out pairs"),
    ("train_src", "", "training source file (replaces the synthetic task)"),
    ("train_tgt", "", "training target file"),
    ("valid_src", "", "held-out source file"),
    ("valid_tgt", "", "held-out target file"),
    ("vocab_cap", "30000", "vocabulary size including the 4 reserved tokens"),
    ("cell", "atr", "recurrent cell: atr, gru, lstm, ran or srnn"),
    ("embed", "32", "word embedding size"),
    ("hidden", "64", "hidden state size"),
    ("attn", "0", "attention size (0: same as hidden)"),
    ("lr", "5e-4", "initial learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("eps", "1e-8", "Adam epsilon"),
    ("clip", "5.0", "gradient clipping threshold"),
    ("clip_mode", "global_norm", "global_norm or per_value"),
    ("batch", "80", "sentences per batch"),
    ("epochs", "10", "maximum epochs"),
    ("lr_decay", "0.5", "learning-rate multiplier per epoch"),
    ("dropout", "0.2", "dropout rate before the output layer"),
    ("max_len", "80", "drop training pairs longer than this"),
    ("seed", "1", "seed for data, initialization, shuffling and dropout"),
    ("target_accuracy", "", "stop once held-out token accuracy reaches this"),
    ("run_dir", "run", "output directory"),
];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses a config file body. Unknown keys and malformed lines are usage
/// errors naming the line.
pub fn parse_file(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{}:{}: expected `key = value`, got `{line}`", origin.display(), n + 1)));
        };
        let key = normalize(k);
        if !known(&key) {
            return Err(CliError::Usage(format!("{}:{}: unknown config key `{key}`", origin.display(), n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Fully resolved configuration of a training run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, overlaid by `file`, overlaid by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_file(&text, path)?);
        }
        for (k, v) in flags {
            let key = normalize(k);
            if !known(&key) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
            values.insert(key, v.clone());
        }
        let cfg = Self { values };
        cfg.model(0, 0)?;
        cfg.train()?;
        cfg.task()?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e| CliError::Usage(format!("config key `{key}` = `{}`: {e}", self.raw(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.path("run_dir").unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn task(&self) -> Result<Task, CliError> {
        self.parse("task")
    }

    pub fn cell(&self) -> Result<CellKind, CliError> {
        self.parse("cell")
    }

    pub fn target_accuracy(&self) -> Result<Option<f64>, CliError> {
        if self.raw("target_accuracy").is_empty() {
            Ok(None)
        } else {
            self.parse("target_accuracy").map(Some)
        }
    }

    /// Model shape for the given vocabulary sizes.
    pub fn model(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig, CliError> {
        let hidden = self.usize("hidden")?;
        let attn = match self.usize("attn")? {
            0 => hidden,
            a => a,
        };
        Ok(ModelConfig { cell: self.cell()?, src_vocab, tgt_vocab, embed_dim: self.usize("embed")?, hidden_dim: hidden, attn_dim: attn })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let clip_mode = match self.raw("clip_mode") {
            "global_norm" => ClipMode::GlobalNorm,
            "per_value" => ClipMode::PerValue,
            other => return Err(CliError::Usage(format!("config key `clip_mode` = `{other}`: expected global_norm or per_value"))),
        };
        let cfg = TrainConfig {
            learning_rate: self.parse("lr")?,
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            epsilon: self.parse("eps")?,
            clip: self.parse("clip")?,
            clip_mode,
            batch_size: self.usize("batch")?,
            max_epochs: self.usize("epochs")?,
            lr_decay: self.parse("lr_decay")?,
            dropout: self.parse("dropout")?,
            max_len: self.usize("max_len")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// `key = value` lines in key-table order.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.raw(k))).collect()
    }
}
