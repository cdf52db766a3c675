//! TOML run configuration. Every field is optional; command-line flags are
//! applied on top of the file.

use std::path::{Path, PathBuf};

use euclidnet::data::AugmentOptions;
use euclidnet::nn::ModelSpec;
use euclidnet::similarity::HomotopySchedule;
use euclidnet::train::TrainConfig;
use euclidnet::{Error, Result, SimilarityKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub homotopy: HomotopySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        ModelSection {
            kind: d.kind.to_string(),
            channels: d.channels,
            kernel: d.kernel,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<u32>,
    pub lr: Option<f32>,
    pub momentum: Option<f32>,
    pub weight_decay: Option<f32>,
    pub batch_size: Option<usize>,
    /// Defaults to 0.1 for euclid/adder and 0 otherwise.
    pub eta: Option<f32>,
    pub seed: Option<u64>,
    pub random_crop_pad: Option<usize>,
    pub hflip: Option<bool>,
    pub freeze_bn_stats: Option<bool>,
    pub recalibrate_bn: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomotopySection {
    pub lambda0: Option<f32>,
    pub epochs: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Parent of generated run directories.
    pub root: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_images,
            &mut cfg.data.train_labels,
            &mut cfg.data.test_images,
            &mut cfg.data.test_labels,
            &mut cfg.output.root,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn kind(&self) -> Result<SimilarityKind> {
        self.model.kind.parse()
    }

    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        Ok(ModelSpec {
            input,
            classes,
            channels: self.model.channels.clone(),
            kernel: self.model.kernel,
            kind: self.kind()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = &self.train;
        let kind = self.kind()?;
        let epochs = t.epochs.unwrap_or(d.epochs);
        Ok(TrainConfig {
            lr0: t.lr.unwrap_or(d.lr0),
            momentum: t.momentum.unwrap_or(d.momentum),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            epochs,
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            eta: t.eta.unwrap_or_else(|| TrainConfig::default_eta(kind)),
            homotopy: None,
            seed: t.seed.unwrap_or(d.seed),
            augment: AugmentOptions {
                random_crop_pad: t.random_crop_pad.unwrap_or(0),
                hflip: t.hflip.unwrap_or(false),
            },
            freeze_bn_stats: t.freeze_bn_stats.unwrap_or(d.freeze_bn_stats),
            recalibrate_bn: t.recalibrate_bn.unwrap_or(d.recalibrate_bn),
        })
    }

    /// Homotopy schedule spanning `homotopy.epochs` (else `train.epochs`).
    pub fn schedule(&self) -> Result<HomotopySchedule> {
        let epochs = match self.homotopy.epochs.or(self.train.epochs) {
            Some(0) => return Err(Error::Config("homotopy epochs must be ≥ 1".into())),
            Some(n) => n,
            None => TrainConfig::default().epochs,
        };
        HomotopySchedule::new(
            self.homotopy.lambda0.unwrap_or(HomotopySchedule::DEFAULT_LAMBDA0),
            epochs,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Returns the path or a config error naming the missing setting.
pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or [data] entry)")))
}
