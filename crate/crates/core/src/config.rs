//! Plain `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so a
//! config file lists only what differs. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StemStage};
use crate::train::{DatasetKind, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "img_size",
    "in_channels",
    "stem",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "pos_embedding",
    "num_classes",
    "attention",
    "qkv_bias",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "seed",
    "dataset",
    "subset_size",
    "val_size",
    "data_dir",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "all" | "auto" | "none" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

fn fmt_opt(v: Option<usize>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |n| n.to_string())
}

impl ExperimentConfig {
    /// Defaults overridden by the contents of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "img_size" => {
                let (h, w) = value
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("`img_size`: expected HxW, got `{value}`")))?;
                m.img_h = parse_num(key, h)?;
                m.img_w = parse_num(key, w)?;
            }
            "in_channels" => m.in_channels = parse_num(key, value)?,
            "stem" => {
                m.stem = value
                    .split(',')
                    .map(str::parse::<StemStage>)
                    .collect::<Result<_>>()?
            }
            "embed_dim" => m.embed_dim = parse_num(key, value)?,
            "depth" => m.depth = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, value)?,
            "pos_embedding" => m.pos_embedding = value.parse()?,
            "num_classes" => m.num_classes = parse_num(key, value)?,
            "attention" => {
                m.attention = value
                    .parse::<AttentionKind>()
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "qkv_bias" => m.qkv_bias = parse_num(key, value)?,
            "lr" => t.lr = parse_num(key, value)?,
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_opt(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "dataset" => t.dataset = value.parse()?,
            "subset_size" => t.subset_size = parse_opt(key, value)?,
            "val_size" => t.val_size = parse_opt(key, value)?,
            "data_dir" => t.data_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Checks cross-field constraints of both halves.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.dataset == DatasetKind::Mnist
            && (self.model.in_channels != 1 || self.model.img_h != 28 || self.model.img_w != 28 || self.model.num_classes != 10)
        {
            return Err(Error::Config(
                "mnist needs img_size = 28x28, in_channels = 1, num_classes = 10".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value; `parse` of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let stem: Vec<String> = m.stem.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("img_size", format!("{}x{}", m.img_h, m.img_w));
        kv("in_channels", m.in_channels.to_string());
        kv("stem", stem.join(","));
        kv("embed_dim", m.embed_dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("pos_embedding", m.pos_embedding.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("attention", m.attention.to_string());
        kv("qkv_bias", m.qkv_bias.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_epochs", fmt_opt(t.warmup_epochs, "auto"));
        kv("seed", t.seed.to_string());
        kv("dataset", t.dataset.to_string());
        kv("subset_size", fmt_opt(t.subset_size, "all"));
        kv("val_size", fmt_opt(t.val_size, "all"));
        kv("data_dir", t.data_dir.display().to_string());
        s
    }
}
