//! Run configuration: one TOML document holding the model, the training
//! recipe and the data source.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::tensor::DType;
use crate::train::{
    gen_synthetic_dataset, load_dataset, AugmentToggles, SegmentationSample, TrainConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `sample_NNNN.vol/.lbl` pairs. Synthetic data is
    /// generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub samples: usize,
    pub size: [usize; 3],
    pub seed: u64,
}

impl DataConfig {
    pub fn load(&self, num_classes: usize) -> Result<Vec<SegmentationSample>> {
        let data = match &self.dir {
            Some(dir) => load_dataset(dir)?,
            None => gen_synthetic_dataset(self.samples, self.size, num_classes, self.seed)?,
        };
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Named starting points for `init-config`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Transbtsv2,
    TransbtsV1,
    /// Reduced model and recipe for the 32³ overfit run.
    Overfit,
    /// The gradient-check micro model on tiny volumes.
    Micro,
    Ablation(Variant),
}

impl Preset {
    pub const NAMES: [&'static str; 9] = [
        "transbtsv2",
        "transbts-v1",
        "overfit",
        "micro",
        "ablation-b",
        "ablation-b-tr",
        "ablation-b-tr-fem",
        "ablation-b-tr-fem-dbm",
        "ablation-full",
    ];

    pub fn parse(name: &str) -> Result<Self> {
        let p = match name {
            "transbtsv2" => Self::Transbtsv2,
            "transbts-v1" => Self::TransbtsV1,
            "overfit" => Self::Overfit,
            "micro" => Self::Micro,
            "ablation-b" => Self::Ablation(Variant::Base),
            "ablation-b-tr" => Self::Ablation(Variant::Transformer),
            "ablation-b-tr-fem" => Self::Ablation(Variant::Expansion),
            "ablation-b-tr-fem-dbm" => Self::Ablation(Variant::Deformable),
            "ablation-full" => Self::Ablation(Variant::Full),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(p)
    }
}

/// Model of the overfit recipe: the full architecture at reduced width so
/// that 200 steps at 32³ fit a laptop CPU budget.
pub fn overfit_model() -> ModelConfig {
    ModelConfig {
        name: "transbtsv2-overfit".into(),
        input_size: [32, 32, 32],
        stem_channels: 8,
        stage_channels: vec![16, 32, 64],
        embed_dim: 128,
        restore_channels: 128,
        ..ModelConfig::transbtsv2()
    }
}

pub fn overfit_train() -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        warmup_epochs: 10,
        total_epochs: 200,
        weight_decay: 1e-5,
        batch_size: 8,
        seed: 7,
        augment: AugmentToggles::NONE,
        precision: DType::F32,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let default_train = TrainConfig {
            base_lr: 1e-4,
            warmup_epochs: 5,
            total_epochs: 100,
            weight_decay: 1e-5,
            batch_size: 2,
            seed: 0,
            augment: AugmentToggles::ALL,
            precision: DType::F32,
        };
        let (model, train, samples) = match preset {
            Preset::Transbtsv2 => (ModelConfig::transbtsv2(), default_train, 4),
            Preset::TransbtsV1 => (ModelConfig::transbts_v1(), default_train, 4),
            Preset::Ablation(v) => (ModelConfig::ablation(v), default_train, 4),
            Preset::Overfit => (overfit_model(), overfit_train(), 8),
            Preset::Micro => {
                let mut m = crate::checks::micro_config();
                m.in_channels = 4;
                let t = TrainConfig {
                    base_lr: 1e-3,
                    warmup_epochs: 1,
                    total_epochs: 4,
                    precision: DType::F64,
                    ..default_train
                };
                (m, t, 2)
            }
        };
        let data = DataConfig {
            dir: None,
            samples,
            size: model.input_size,
            seed: train.seed,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            model,
            train,
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.data.dir.is_none() && self.data.samples == 0 {
            return Err(Error::Config("data.samples must be at least 1".into()));
        }
        if (0..3).any(|a| self.data.size[a] < self.model.input_size[a]) && self.data.dir.is_none() {
            return Err(Error::Config(format!(
                "data.size {:?} is smaller than model.input_size {:?}",
                self.data.size, self.model.input_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Reads either a full run config or a bare `[model]`-less model
/// document: complexity queries only need the architecture.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.contains_key("schema_version") {
        return Ok(RunConfig::load(path)?.model);
    }
    let model: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}
