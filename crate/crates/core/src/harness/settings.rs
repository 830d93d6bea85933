//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known and every value must parse as the key's type; anything else is an
//! error naming the line.

use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Synthetic data used when no dataset directory is given.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub n: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { n: 8, seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

pub const KEYS: &[&str] = &[
    "image_size",
    "shallow_channels",
    "deep_channels",
    "heads",
    "encoder_depth",
    "mlp_ratio",
    "radius",
    "hca_blocks",
    "dcm_channels",
    "depth_channels",
    "ln_eps",
    "model_seed",
    "batch_size",
    "epochs",
    "lr_start",
    "lr_end",
    "beta1",
    "beta2",
    "adam_eps",
    "train_seed",
    "flip",
    "n",
    "data_seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "shallow_channels" => m.shallow_channels = parse(key, value)?,
            "deep_channels" => m.deep_channels = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "encoder_depth" => m.encoder_depth = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "radius" => m.radius = parse(key, value)?,
            "hca_blocks" => m.hca_blocks = parse(key, value)?,
            "dcm_channels" => m.dcm_channels = parse(key, value)?,
            "depth_channels" => m.depth_channels = parse(key, value)?,
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "model_seed" => m.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_start" => t.lr_start = parse(key, value)?,
            "lr_end" => t.lr_end = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "train_seed" => t.seed = parse(key, value)?,
            "flip" => t.flip = parse(key, value)?,
            "n" => d.n = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let rows: Vec<(&str, String)> = vec![
            ("image_size", m.image_size.to_string()),
            ("shallow_channels", m.shallow_channels.to_string()),
            ("deep_channels", m.deep_channels.to_string()),
            ("heads", m.heads.to_string()),
            ("encoder_depth", m.encoder_depth.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("radius", m.radius.to_string()),
            ("hca_blocks", m.hca_blocks.to_string()),
            ("dcm_channels", m.dcm_channels.to_string()),
            ("depth_channels", m.depth_channels.to_string()),
            ("ln_eps", format!("{:e}", m.ln_eps)),
            ("model_seed", m.seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr_start", format!("{:e}", t.lr_start)),
            ("lr_end", format!("{:e}", t.lr_end)),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", format!("{:e}", t.adam_eps)),
            ("train_seed", t.seed.to_string()),
            ("flip", t.flip.to_string()),
            ("n", d.n.to_string()),
            ("data_seed", d.seed.to_string()),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
