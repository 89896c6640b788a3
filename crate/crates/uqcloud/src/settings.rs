//! Flat `key = value` settings shared by config files and checkpoint
//! metadata.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys win.
//! The `regime` key selects the defaults every other key overrides, so it
//! is applied first wherever it appears.

use std::fmt::Write as _;
use std::path::Path;

use uqcloud_core::arch::Regime;
use uqcloud_core::datapipe::DEFAULT_BLOCK_SIZE;
use uqcloud_core::trainer::TrainConfig;

use crate::{Error, Result};

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    /// Edge length of the square xy blocks, meters.
    pub block_size: f64,
    /// Grid stride used when cutting training blocks.
    pub stride: f64,
}

impl Settings {
    pub fn new(regime: Regime) -> Self {
        Self {
            train: TrainConfig::new(regime),
            block_size: DEFAULT_BLOCK_SIZE,
            stride: DEFAULT_BLOCK_SIZE,
        }
    }

    /// Builds settings from parsed pairs. `regime` overrides any `regime`
    /// key in the pairs.
    pub fn from_pairs(pairs: &[(String, String)], regime: Option<Regime>) -> Result<Self> {
        let regime = match regime {
            Some(r) => r,
            None => match pairs.iter().rev().find(|(k, _)| k == "regime") {
                Some((k, v)) => v
                    .parse()
                    .map_err(|e: uqcloud_core::Error| Error::setting(k, e.to_string()))?,
                None => Regime::Frequentist,
            },
        };
        let mut s = Self::new(regime);
        let mut stride_set = false;
        for (k, v) in pairs {
            if k == "regime" {
                continue;
            }
            stride_set |= k == "stride";
            s.set(k, v)?;
        }
        if !stride_set {
            s.stride = s.block_size;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "regime" => {
                *self = Self {
                    train: TrainConfig::new(parse(key, value)?),
                    ..self.clone()
                }
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "micro_batch" => t.micro_batch = parse(key, value)?,
            "lr" => t.lr0 = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "decay_every" => t.decay_every = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "samples" => t.samples = parse(key, value)?,
            "prior_sigma_w" => t.prior.sigma_w = parse(key, value)?,
            "prior_sigma_b" => t.prior.sigma_b = parse(key, value)?,
            "drop_prob" => t.drop_prob = parse(key, value)?,
            "dropout_placements" => {
                t.dropout_placements = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "kl_scale" => t.kl_scale = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "block_size" => self.block_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            _ => return Err(Error::setting(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.block_size.is_nan() || self.block_size <= 0.0 || !(self.stride > 0.0 && self.stride <= self.block_size)
        {
            return Err(Error::setting(
                "block_size",
                "need block_size > 0 and 0 < stride <= block_size",
            ));
        }
        Ok(())
    }

    /// All keys in a fixed order. Floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let placements = t
            .dropout_placements
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        [
            ("regime", t.regime.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("micro_batch", t.micro_batch.to_string()),
            ("lr", t.lr0.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("decay_every", t.decay_every.to_string()),
            ("momentum", t.momentum.to_string()),
            ("samples", t.samples.to_string()),
            ("prior_sigma_w", t.prior.sigma_w.to_string()),
            ("prior_sigma_b", t.prior.sigma_b.to_string()),
            ("drop_prob", t.drop_prob.to_string()),
            ("dropout_placements", placements),
            ("weight_decay", t.weight_decay.to_string()),
            ("kl_scale", t.kl_scale.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("seed", t.seed.to_string()),
            ("block_size", self.block_size.to_string()),
            ("stride", self.stride.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: V::Err| Error::setting(key, format!("`{value}`: {e}")))
}

/// Splits `key = value` lines. `path` only labels errors.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_pairs(&text, path)
}

pub fn format_pairs(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
