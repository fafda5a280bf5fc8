//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Recognized keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `lr` | Adam learning rate | `1e-4` |
//! | `beta1`, `beta2`, `eps` | Adam constants | `0.9`, `0.999`, `1e-7` |
//! | `batch_size` | samples per update | `16` |
//! | `lr_patience` | epochs without improvement before halving the lr | `10` |
//! | `stop_patience` | epochs without improvement before stopping | `20` |
//! | `lr_factor` | lr multiplier on plateau | `0.5` |
//! | `max_epochs`, `max_steps` | per-phase caps (`none` to disable) | `none` |
//! | `seed` | seed for init, split, crops and augmentation | `0` |
//! | `gamma` | consistency sharpness | `0.07` |
//! | `lambda0` .. `lambda8` | loss weights | see [`LossWeights`] |
//! | `patch` | training crop as `HxW` | `256x256` |
//! | `augment_fraction` | share of samples color-augmented | `0.2` |
//! | `deterministic` | single-threaded, ordered execution | `false` |
//! | `data_root`, `left_dir`, `right_dir`, `glob` | dataset layout | `data`, `left`, `right`, `*.png` |
//! | `val_count` | pairs held out for validation | `35` |
//! | `split_dir` | directory with `train.txt` / `val.txt` | unset |
//! | `schedule` | phases, e.g. `all`, `1`, `1,3`, `III-e2e` | `all` |
//! | `encoder_weights` | weight directory to initialize the encoder from | unset |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datapipe::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::trainer::{Schedule, TrainConfig};

/// Everything a `train` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub schedule: Schedule,
    pub encoder_weights: Option<PathBuf>,
    /// Whether `data_root` was set explicitly.
    pub data_root_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            schedule: Schedule::full(),
            encoder_weights: None,
            data_root_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Parses `HxW` (or a single number for a square).
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("bad size `{value}`, expected HxW"));
    match value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = value.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        let t = &mut self.train;
        match key {
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "eps" => t.adam.eps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_patience" => t.lr_patience = parse(key, value)?,
            "stop_patience" => t.stop_patience = parse(key, value)?,
            "lr_factor" => t.lr_factor = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse_opt(key, value)?,
            "max_steps" => t.max_steps = parse_opt(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "deterministic" => t.deterministic = parse(key, value)?,
            "augment_fraction" => {
                t.augment_fraction = parse(key, value)?;
                self.data.augment_fraction = t.augment_fraction;
            }
            "patch" => {
                t.patch = parse_size(value)?;
                self.data.patch = t.patch;
            }
            "data_root" => {
                self.data.root = PathBuf::from(value);
                self.data_root_set = true;
            }
            "left_dir" => self.data.left_dir = value.to_string(),
            "right_dir" => self.data.right_dir = value.to_string(),
            "glob" => self.data.glob = value.to_string(),
            "val_count" => self.data.val_count = parse(key, value)?,
            "split_dir" => self.data.split_dir = Some(PathBuf::from(value)),
            "schedule" => self.schedule = value.parse()?,
            "encoder_weights" => self.encoder_weights = Some(PathBuf::from(value)),
            _ => {
                let idx = key
                    .strip_prefix("lambda")
                    .and_then(|i| i.parse::<usize>().ok())
                    .filter(|&i| i < LossWeights::default().lambda.len())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("unknown configuration key `{key}`"))
                    })?;
                t.loss_weights.lambda[idx] = parse(key, value)?;
            }
        }
        Ok(())
    }

    /// Applies every line of a configuration text on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |reason: String| Error::Format {
                what: "configuration file",
                path: origin.to_path_buf(),
                reason: format!("line {}: {reason}", n + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()
    }
}
