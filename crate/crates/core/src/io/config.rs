//! `key=value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Recognised keys:
//!
//! | key            | type  | default |
//! |----------------|-------|---------|
//! | batch_size     | int   | 64      |
//! | lr             | float | 1e-4    |
//! | epochs         | int   | 10      |
//! | temperature    | float | 1.0     |
//! | seed           | int   | 42      |
//! | val_fraction   | float | 0.05    |
//! | beta1          | float | 0.9     |
//! | beta2          | float | 0.999   |
//! | eps            | float | 1e-8    |
//! | unscaled_gate  | bool  | false   |
//! | experts        | int   | 6       |
//! | activation     | relu \| gelu | relu |

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::moe::Activation;
use crate::training::TrainingConfig;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "SBMOE_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub experts: usize,
    pub activation: Activation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            experts: 6,
            activation: Activation::Relu,
        }
    }
}

impl RunConfig {
    /// Applies every assignment in `text` on top of `self`.
    pub fn apply(&mut self, text: &str, path: &Path) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "unscaled_gate" => t.unscaled_gate = parse(key, value)?,
            "experts" => self.experts = parse(key, value)?,
            "activation" => self.activation = value.parse()?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&text, path)?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}
