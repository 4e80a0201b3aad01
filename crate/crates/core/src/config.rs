//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so
//! typos surface as errors instead of silently falling back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AfaError, Result};
use crate::nn::EncoderDims;
use crate::target::TargetDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub positional: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            positional: true,
        }
    }

    /// Four heads at width 512.
    pub fn wide() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 4,
            d_ff: 2048,
            positional: true,
        }
    }

    /// Small position-free encoder used for the planted-signal experiments.
    pub fn planted() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            positional: false,
        }
    }

    pub fn encoder(&self, vocab: usize) -> EncoderDims {
        EncoderDims {
            vocab,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            positional: self.positional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Tokens masked per selection.
    pub k: usize,
    pub epsilon: f64,
    /// Weight of the adversarial term in the target loss.
    pub lambda: f64,
    /// Masked samples drawn per input for the reward baseline.
    pub samples: usize,
    pub lr_target: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub mask_as_unk: bool,
    pub target: ModelConfig,
    pub disc: ModelConfig,
    pub num_classes: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 1,
            epsilon: 0.1,
            lambda: 1.0,
            samples: 4,
            lr_target: 1e-4,
            lr_disc: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            dropout: 0.3,
            mask_as_unk: false,
            target: ModelConfig::desk(),
            disc: ModelConfig::desk(),
            num_classes: 2,
            max_len: 64,
            min_count: 1,
            train_path: None,
            valid_path: None,
            test_path: None,
            embeddings_path: None,
        }
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| AfaError::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(AfaError::config(key, format!("expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Defaults with the planted-experiment models and learning rates.
    pub fn planted() -> Self {
        TrainConfig::default().with_planted_models()
    }

    fn with_planted_models(self) -> Self {
        TrainConfig {
            target: ModelConfig::planted(),
            disc: ModelConfig::planted(),
            lr_target: 2e-3,
            lr_disc: 1e-3,
            ..self
        }
    }

    pub fn target_dims(&self, vocab: usize) -> TargetDims {
        TargetDims {
            encoder: self.target.encoder(vocab),
            num_classes: self.num_classes,
        }
    }

    pub fn disc_dims(&self, vocab: usize) -> EncoderDims {
        self.disc.encoder(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(AfaError::config(f, m));
        if self.k == 0 {
            return bad("k", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", "must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be a finite value >= 0");
        }
        if self.samples < 2 {
            return bad("samples", "baseline needs at least 2 samples");
        }
        if !(self.lr_target > 0.0 && self.lr_target.is_finite()) {
            return bad("lr_target", "must be positive");
        }
        if !(self.lr_disc > 0.0 && self.lr_disc.is_finite()) {
            return bad("lr_disc", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be at least 1");
        }
        for (prefix, m) in [("", &self.target), ("disc_", &self.disc)] {
            if m.heads == 0 || m.d_model == 0 || m.d_model % m.heads != 0 {
                return Err(AfaError::config(
                    format!("{prefix}d_model"),
                    format!("{} is not divisible by {} heads", m.d_model, m.heads),
                ));
            }
            if m.d_ff == 0 {
                return Err(AfaError::config(format!("{prefix}d_ff"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "preset" => match value {
                "desk" => {
                    self.target = ModelConfig::desk();
                    self.disc = ModelConfig::desk();
                }
                "wide" => {
                    self.target = ModelConfig::wide();
                    self.disc = ModelConfig::wide();
                }
                "planted" => *self = self.clone().with_planted_models(),
                _ => return Err(AfaError::config(key, format!("unknown preset {value:?}"))),
            },
            "k" => self.k = parse_field(key, value)?,
            "epsilon" => self.epsilon = parse_field(key, value)?,
            "lambda" => self.lambda = parse_field(key, value)?,
            "samples" => self.samples = parse_field(key, value)?,
            "lr_target" => self.lr_target = parse_field(key, value)?,
            "lr_disc" => self.lr_disc = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "epochs" => self.epochs = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            "dropout" => self.dropout = parse_field(key, value)?,
            "mask_as_unk" => self.mask_as_unk = parse_bool(key, value)?,
            "d_model" => self.target.d_model = parse_field(key, value)?,
            "heads" => self.target.heads = parse_field(key, value)?,
            "d_ff" => self.target.d_ff = parse_field(key, value)?,
            "positional" => self.target.positional = parse_bool(key, value)?,
            "disc_d_model" => self.disc.d_model = parse_field(key, value)?,
            "disc_heads" => self.disc.heads = parse_field(key, value)?,
            "disc_d_ff" => self.disc.d_ff = parse_field(key, value)?,
            "disc_positional" => self.disc.positional = parse_bool(key, value)?,
            "num_classes" => self.num_classes = parse_field(key, value)?,
            "max_len" => self.max_len = parse_field(key, value)?,
            "min_count" => self.min_count = parse_field(key, value)?,
            "train" => self.train_path = opt_path(value),
            "valid" => self.valid_path = opt_path(value),
            "test" => self.test_path = opt_path(value),
            "embeddings" => self.embeddings_path = opt_path(value),
            _ => return Err(AfaError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses a config document on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AfaError::config(
                    format!("line {}", i + 1),
                    format!("expected `key = value`, got {line:?}"),
                ));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::parse(&text)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.train_path,
                &mut cfg.valid_path,
                &mut cfg.test_path,
                &mut cfg.embeddings_path,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Every field, defaults resolved, in the same format `parse` accepts.
    pub fn to_kv_string(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("k", self.k.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("lambda", self.lambda.to_string());
        kv("samples", self.samples.to_string());
        kv("lr_target", self.lr_target.to_string());
        kv("lr_disc", self.lr_disc.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("dropout", self.dropout.to_string());
        kv("mask_as_unk", self.mask_as_unk.to_string());
        kv("d_model", self.target.d_model.to_string());
        kv("heads", self.target.heads.to_string());
        kv("d_ff", self.target.d_ff.to_string());
        kv("positional", self.target.positional.to_string());
        kv("disc_d_model", self.disc.d_model.to_string());
        kv("disc_heads", self.disc.heads.to_string());
        kv("disc_d_ff", self.disc.d_ff.to_string());
        kv("disc_positional", self.disc.positional.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("max_len", self.max_len.to_string());
        kv("min_count", self.min_count.to_string());
        kv("train", path(&self.train_path));
        kv("valid", path(&self.valid_path));
        kv("test", path(&self.test_path));
        kv("embeddings", path(&self.embeddings_path));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::planted().validate().unwrap();
    }

    #[test]
    fn planted_preset_keeps_other_fields() {
        let cfg = TrainConfig::parse("k = 2\npreset = planted\n").unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.target, ModelConfig::planted());
        assert_eq!(cfg.lr_disc, 1e-3);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = TrainConfig::parse("# run\nk = 3\nepsilon=0.25 # explore\n\nmask_as_unk = yes\n").unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.epsilon, 0.25);
        assert!(cfg.mask_as_unk);
        assert_eq!(cfg.samples, 4);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("preset", "wide").unwrap();
        cfg.set("train", "data/train.jsonl").unwrap();
        cfg.lambda = 0.5;
        assert_eq!(TrainConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("samples = 1", "samples"),
            ("epsilon = 2", "epsilon"),
            ("k = 0", "k"),
            ("lambda = -1", "lambda"),
            ("lr_target = 0", "lr_target"),
            ("heads = 5", "d_model"),
            ("colour = red", "colour"),
            ("k = three", "k"),
        ];
        for (text, field) in cases {
            match TrainConfig::parse(text) {
                Err(AfaError::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "train = d/train.jsonl\n").unwrap();
        let cfg = TrainConfig::load(&p).unwrap();
        assert_eq!(cfg.train_path.unwrap(), dir.path().join("d/train.jsonl"));
    }
}
