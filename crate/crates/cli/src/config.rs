//! `key=value` run configuration with command-line overrides.

use std::collections::BTreeMap;

use ssmfuse::data::parse_key_values;
use ssmfuse::network::{FusionNetConfig, UpsampleKind};
use ssmfuse::train::TrainConfig;

use crate::Failure;

pub const KEYS: [&str; 9] =
    ["bands", "channels", "state_size", "upsample", "epochs", "batch_size", "lr0", "halve_every", "seed"];

/// Values from the config file and flags, before defaults are applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub bands: Option<usize>,
    pub channels: Option<usize>,
    pub state_size: Option<usize>,
    pub upsample: Option<UpsampleKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub halve_every: Option<usize>,
    pub seed: Option<u64>,
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V, Failure> {
    v.parse().map_err(|_| Failure::Args(format!("config key {key}: invalid value {v:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let map = parse_key_values(text).map_err(|e| Failure::Args(e.to_string()))?;
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, Failure> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Failure::Args(format!("unknown config key {k:?} (allowed: {})", KEYS.join(", "))));
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        Ok(Self {
            bands: get("bands").map(|v| parse("bands", v)).transpose()?,
            channels: get("channels").map(|v| parse("channels", v)).transpose()?,
            state_size: get("state_size").map(|v| parse("state_size", v)).transpose()?,
            upsample: get("upsample")
                .map(|v| v.parse::<UpsampleKind>().map_err(|e| Failure::Args(e.to_string())))
                .transpose()?,
            epochs: get("epochs").map(|v| parse("epochs", v)).transpose()?,
            batch_size: get("batch_size").map(|v| parse("batch_size", v)).transpose()?,
            lr0: get("lr0").map(|v| parse("lr0", v)).transpose()?,
            halve_every: get("halve_every").map(|v| parse("halve_every", v)).transpose()?,
            seed: get("seed").map(|v| parse("seed", v)).transpose()?,
        })
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overridden_by(self, over: &RunConfig) -> Self {
        Self {
            bands: over.bands.or(self.bands),
            channels: over.channels.or(self.channels),
            state_size: over.state_size.or(self.state_size),
            upsample: over.upsample.or(self.upsample),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
            lr0: over.lr0.or(self.lr0),
            halve_every: over.halve_every.or(self.halve_every),
            seed: over.seed.or(self.seed),
        }
    }

    /// Network description for a dataset with `data_bands` bands.
    pub fn network(&self, data_bands: usize) -> Result<FusionNetConfig, Failure> {
        let bands = self.bands.unwrap_or(data_bands);
        if bands != data_bands {
            return Err(Failure::Data(format!("config bands={bands} but the dataset has {data_bands} bands")));
        }
        let mut cfg = FusionNetConfig::new(bands, self.channels.unwrap_or(32), self.state_size.unwrap_or(8));
        if let Some(u) = self.upsample {
            cfg.upsample = u;
        }
        cfg.init_seed = self.seed.unwrap_or(0);
        cfg.validate().map_err(|e| Failure::Args(e.to_string()))?;
        Ok(cfg)
    }

    pub fn training(&self) -> Result<TrainConfig, Failure> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr0: self.lr0.unwrap_or(d.lr0),
            halve_every: self.halve_every.unwrap_or(d.halve_every),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        };
        cfg.validate().map_err(|e| Failure::Args(e.to_string()))?;
        Ok(cfg)
    }
}
