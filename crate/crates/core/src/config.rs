//! Line-based `key = value` configuration.
//!
//! Unknown keys are errors: a config that silently ignores a typo is not
//! reproducible. `#` starts a comment; blank lines are skipped.

use std::path::PathBuf;

use crate::data::{DataSource, SplitSizes, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::{build_mini_convnet, build_mini_resnet, ModelGraph};
use crate::pruning::PruneConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Convnet,
    Resnet,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    // dataset
    pub dataset: String, // "synthetic" or "idx"
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub train_size: usize,
    pub calib_size: usize,
    pub val_size: usize,
    pub holdout_size: usize,
    // model
    pub model: ModelKind,
    pub width_multiplier: f32,
    pub blocks: usize,
    pub resnet_width: usize,
    // training
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    // compression
    pub delta_frac: f64,
    pub delta_max: f64,
    pub bits: u8,
    pub p_only_theta: f64,
    pub exclude_stem: bool,
    pub refresh_sensitivity: bool,
    // benchmarking
    pub bench_warmup: usize,
    pub bench_reps: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: "synthetic".into(),
            classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            idx_images: None,
            idx_labels: None,
            train_size: 8000,
            calib_size: 1000,
            val_size: 1000,
            holdout_size: 1000,
            model: ModelKind::Convnet,
            width_multiplier: 1.0,
            blocks: 2,
            resnet_width: 16,
            epochs: 3,
            lr: 0.05,
            batch_size: 16,
            delta_frac: 0.01,
            delta_max: 0.015,
            bits: 8,
            p_only_theta: 0.5,
            exclude_stem: true,
            refresh_sensitivity: false,
            bench_warmup: 10,
            bench_reps: 50,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigError(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::ConfigError(format!("bad value for {key}: {value:?}"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigError(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "seed" => cfg.seed = parse(key, value)?,
                "dataset" => match value {
                    "synthetic" | "idx" => cfg.dataset = value.into(),
                    _ => {
                        return Err(Error::ConfigError(format!(
                            "dataset must be synthetic or idx, got {value:?}"
                        )))
                    }
                },
                "classes" => cfg.classes = parse(key, value)?,
                "channels" => cfg.channels = parse(key, value)?,
                "height" => cfg.height = parse(key, value)?,
                "width" => cfg.width = parse(key, value)?,
                "idx_images" => cfg.idx_images = Some(PathBuf::from(value)),
                "idx_labels" => cfg.idx_labels = Some(PathBuf::from(value)),
                "train_size" => cfg.train_size = parse(key, value)?,
                "calib_size" => cfg.calib_size = parse(key, value)?,
                "val_size" => cfg.val_size = parse(key, value)?,
                "holdout_size" => cfg.holdout_size = parse(key, value)?,
                "model" => {
                    cfg.model = match value {
                        "convnet" => ModelKind::Convnet,
                        "resnet" => ModelKind::Resnet,
                        _ => {
                            return Err(Error::ConfigError(format!(
                                "model must be convnet or resnet, got {value:?}"
                            )))
                        }
                    }
                }
                "width_multiplier" => cfg.width_multiplier = parse(key, value)?,
                "blocks" => cfg.blocks = parse(key, value)?,
                "resnet_width" => cfg.resnet_width = parse(key, value)?,
                "epochs" => cfg.epochs = parse(key, value)?,
                "lr" => cfg.lr = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "delta_frac" => cfg.delta_frac = parse(key, value)?,
                "delta_max" => cfg.delta_max = parse(key, value)?,
                "bits" => cfg.bits = parse(key, value)?,
                "p_only_theta" => cfg.p_only_theta = parse(key, value)?,
                "exclude_stem" => cfg.exclude_stem = parse_bool(key, value)?,
                "refresh_sensitivity" => cfg.refresh_sensitivity = parse_bool(key, value)?,
                "bench_warmup" => cfg.bench_warmup = parse(key, value)?,
                "bench_reps" => cfg.bench_reps = parse(key, value)?,
                unknown => {
                    return Err(Error::ConfigError(format!("unknown key {unknown:?}")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.dataset.as_str() {
            "synthetic" => Ok(DataSource::Synthetic(SyntheticSpec {
                classes: self.classes,
                channels: self.channels,
                height: self.height,
                width: self.width,
                ..SyntheticSpec::default()
            })),
            "idx" => {
                let images = self.idx_images.clone().ok_or_else(|| {
                    Error::ConfigError("idx dataset needs idx_images".into())
                })?;
                let labels = self.idx_labels.clone().ok_or_else(|| {
                    Error::ConfigError("idx dataset needs idx_labels".into())
                })?;
                Ok(DataSource::Idx { images, labels })
            }
            other => Err(Error::ConfigError(format!("unknown dataset kind {other:?}"))),
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            calib: self.calib_size,
            val: self.val_size,
            holdout: self.holdout_size,
        }
    }

    pub fn build_model(&self) -> Result<ModelGraph> {
        let input_shape = (self.channels, self.height, self.width);
        match self.model {
            ModelKind::Convnet => {
                build_mini_convnet(self.width_multiplier, input_shape, self.classes, self.seed)
            }
            ModelKind::Resnet => build_mini_resnet(
                self.blocks,
                self.resnet_width,
                input_shape,
                self.classes,
                self.seed,
            ),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn prune_config(&self, model: &ModelGraph) -> PruneConfig {
        PruneConfig {
            delta_fraction: self.delta_frac,
            delta_max: self.delta_max,
            excluded_layers: if self.exclude_stem {
                model.stem_layer().into_iter().collect()
            } else {
                Vec::new()
            },
            refresh_sensitivity: self.refresh_sensitivity,
        }
    }

    /// Key/value pairs for the report's config echo.
    pub fn echo(&self) -> Vec<(String, String)> {
        let model = match self.model {
            ModelKind::Convnet => format!("convnet x{}", self.width_multiplier),
            ModelKind::Resnet => format!("resnet b{} w{}", self.blocks, self.resnet_width),
        };
        vec![
            ("seed".into(), self.seed.to_string()),
            ("dataset".into(), self.dataset.clone()),
            (
                "splits".into(),
                format!(
                    "{}/{}/{}/{}",
                    self.train_size, self.calib_size, self.val_size, self.holdout_size
                ),
            ),
            ("model".into(), model),
            ("delta_frac".into(), self.delta_frac.to_string()),
            ("delta_max".into(), self.delta_max.to_string()),
            ("bits".into(), self.bits.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_comments() {
        let cfg = Config::parse(
            "# comment\nseed = 7\nmodel = resnet\nblocks = 3\ndelta_max = 0.03 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelKind::Resnet);
        assert_eq!(cfg.blocks, 3);
        assert_eq!(cfg.delta_max, 0.03);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = Config::parse("delta_maxx = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigError(_)));
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("bits = eight\n").is_err());
    }
}
