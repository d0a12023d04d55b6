//! Run configuration files: one `key = value` per line, `#` starts a
//! comment, lists are comma-separated. Unknown or repeated keys are errors.
//!
//! `preset = toy | paper` selects the starting point (default `toy`); the
//! remaining keys override it regardless of their order in the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    /// Inverts depth maps whose convention is "large is near".
    pub invert_depth: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::toy(),
            train: TrainConfig::toy(),
            dataset: None,
            invert_depth: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "input_size",
    "stage_channels",
    "fc_channels",
    "fc_dilation",
    "aspp_compress",
    "aspp_branch_channels",
    "aspp_dilations",
    "sma_decoders",
    "sma_downsample_decoder",
    "head_down1",
    "head_down2",
    "head_hidden",
    "loss_weights",
    "lr0",
    "weight_decay",
    "momentum",
    "batch",
    "total_iters",
    "decay_points",
    "decay_factor",
    "crop_from",
    "hflip_prob",
    "augment",
    "seed",
    "dataset",
    "invert_depth",
];

/// Keys that determine the network architecture; stored with checkpoints.
pub const NETWORK_KEYS: &[&str] = &[
    "input_size",
    "stage_channels",
    "fc_channels",
    "fc_dilation",
    "aspp_compress",
    "aspp_branch_channels",
    "aspp_dilations",
    "sma_decoders",
    "sma_downsample_decoder",
    "head_down1",
    "head_down2",
    "head_hidden",
    "loss_weights",
];

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| scalar(key, x.trim())).collect()
}

fn array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = list(key, v)?;
    items
        .try_into()
        .map_err(|items: Vec<T>| Error::Config(format!("{key}: expected {N} values, got {}", items.len())))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one key. Keys are validated against [`KEYS`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "preset" => match v {
                "toy" => {
                    *n = NetworkConfig::toy();
                    *t = TrainConfig::toy();
                }
                "paper" => {
                    *n = NetworkConfig::paper();
                    *t = TrainConfig::default();
                }
                _ => return Err(Error::Config(format!("preset: expected toy or paper, got {v:?}"))),
            },
            "input_size" => n.input_size = scalar(key, v)?,
            "stage_channels" => n.stage_channels = array(key, v)?,
            "fc_channels" => n.fc_channels = scalar(key, v)?,
            "fc_dilation" => n.fc_dilation = scalar(key, v)?,
            "aspp_compress" => n.aspp_compress = scalar(key, v)?,
            "aspp_branch_channels" => n.aspp_branch_channels = scalar(key, v)?,
            "aspp_dilations" => n.aspp_dilations = array(key, v)?,
            "sma_decoders" => n.sma_decoders = scalar(key, v)?,
            "sma_downsample_decoder" => n.sma_downsample_decoder = scalar(key, v)?,
            "head_down1" => n.head.down1 = scalar(key, v)?,
            "head_down2" => n.head.down2 = scalar(key, v)?,
            "head_hidden" => n.head.hidden = scalar(key, v)?,
            "loss_weights" => n.loss_weights = array(key, v)?,
            "lr0" => t.lr0 = scalar(key, v)?,
            "weight_decay" => t.weight_decay = scalar(key, v)?,
            "momentum" => t.momentum = scalar(key, v)?,
            "batch" => t.batch = scalar(key, v)?,
            "total_iters" => t.total_iters = scalar(key, v)?,
            "decay_points" => t.decay_points = list(key, v)?,
            "decay_factor" => t.decay_factor = scalar(key, v)?,
            "crop_from" => t.crop_from = scalar(key, v)?,
            "hflip_prob" => t.hflip_prob = scalar(key, v)?,
            "augment" => t.augment = boolean(key, v)?,
            "seed" => t.seed = scalar(key, v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "invert_depth" => self.invert_depth = boolean(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if v.is_empty() {
                return Err(Error::Config(format!("line {}: {k} has no value", i + 1)));
            }
            if pairs.iter().any(|(p, _)| p == k) {
                return Err(Error::Config(format!("line {}: {k} is set twice", i + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg.set("preset", v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }
}

/// Architecture keys and values, in the config file syntax.
pub fn network_pairs(n: &NetworkConfig) -> Vec<(String, String)> {
    let pairs = [
        ("input_size", n.input_size.to_string()),
        ("stage_channels", join(&n.stage_channels)),
        ("fc_channels", n.fc_channels.to_string()),
        ("fc_dilation", n.fc_dilation.to_string()),
        ("aspp_compress", n.aspp_compress.to_string()),
        ("aspp_branch_channels", n.aspp_branch_channels.to_string()),
        ("aspp_dilations", join(&n.aspp_dilations)),
        ("sma_decoders", n.sma_decoders.to_string()),
        ("sma_downsample_decoder", n.sma_downsample_decoder.to_string()),
        ("head_down1", n.head.down1.to_string()),
        ("head_down2", n.head.down2.to_string()),
        ("head_hidden", n.head.hidden.to_string()),
        ("loss_weights", join(&n.loss_weights)),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Rebuilds a network configuration from stored pairs on top of `base`.
pub fn network_from_pairs<'a>(base: &NetworkConfig, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<NetworkConfig> {
    let mut cfg = RunConfig {
        network: base.clone(),
        ..RunConfig::default()
    };
    for (k, v) in pairs {
        if NETWORK_KEYS.contains(&k) {
            cfg.set(k, v)?;
        }
    }
    cfg.network.validate()?;
    Ok(cfg.network)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_constants() {
        let t = TrainConfig::default();
        assert_eq!(t.lr0, 0.01);
        assert_eq!(t.weight_decay, 0.0005);
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.batch, 12);
        assert_eq!(t.total_iters, 40000);
        assert_eq!(t.decay_points, vec![0.5, 0.75]);
        assert_eq!(t.decay_factor, 0.1);
        assert_eq!(NetworkConfig::paper().loss_weights, [0.5, 0.5, 0.8, 0.8, 1.0]);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = RunConfig::parse("# toy run\nseed = 7 # trailing\ntotal_iters=20\n\ndecay_points = 0.4, 0.9\naugment = false\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.total_iters, 20);
        assert_eq!(cfg.train.decay_points, vec![0.4, 0.9]);
        assert!(!cfg.train.augment);
        assert_eq!(cfg.network, NetworkConfig::toy());
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("batch = 2\npreset = paper\n").unwrap();
        assert_eq!(cfg.train.batch, 2);
        assert_eq!(cfg.network.stage_channels, [64, 128, 256, 512, 512]);
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert_eq!(RunConfig::parse("learning_rate = 1").unwrap_err().exit_code(), 2);
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("decay_points = 0.8, 0.5").is_err());
        assert!(RunConfig::parse("stage_channels = 1,2,3").is_err());
    }

    #[test]
    fn network_pairs_round_trip() {
        let n = NetworkConfig::paper();
        let pairs = network_pairs(&n);
        let back = network_from_pairs(&NetworkConfig::toy(), pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, n);
    }
}
