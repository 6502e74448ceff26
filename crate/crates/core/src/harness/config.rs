use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mcl::StageConfig;
use crate::moe::{RouterTrainConfig, DEFAULT_ALPHA};
use crate::synth::AttributeSpec;
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            epochs: 30,
            lr: 2e-3,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeSection {
    pub top_k: usize,
    pub alpha: f64,
}

impl Default for MoeSection {
    fn default() -> Self {
        MoeSection {
            top_k: 2,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for RouterSection {
    fn default() -> Self {
        let d = RouterTrainConfig::default();
        RouterSection {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
        }
    }
}

/// Everything a full run needs. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seeds for multi-seed sweeps; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
    pub num_stages: usize,
    pub dtype: DType,
    pub output_dir: Option<PathBuf>,
    /// Adds wall-clock phase timings to the report (breaks byte-identical reruns).
    pub record_timings: bool,
    pub spec: AttributeSpec,
    pub encoder: EncoderConfig,
    pub base: BaseConfig,
    pub stage: StageConfig,
    pub moe: MoeSection,
    pub router: RouterSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            seeds: Vec::new(),
            n_train: 2000,
            n_eval: 500,
            num_stages: 3,
            dtype: DType::F32,
            output_dir: None,
            record_timings: false,
            spec: AttributeSpec::default(),
            encoder: EncoderConfig::default(),
            base: BaseConfig::default(),
            stage: StageConfig::default(),
            moe: MoeSection::default(),
            router: RouterSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_experts(&self) -> usize {
        self.num_stages + 1
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn router_config(&self, seed: u64) -> RouterTrainConfig {
        RouterTrainConfig {
            epochs: self.router.epochs,
            lr: self.router.lr,
            alpha: self.moe.alpha,
            batch_size: self.router.batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.encoder.validate()?;
        self.stage.validate()?;
        self.router_config(0).validate()?;
        if self.num_stages < 1 {
            return Err(Error::Config("num_stages must be at least 1".into()));
        }
        if self.moe.top_k < 1 || self.moe.top_k > self.num_experts() {
            return Err(Error::Config(format!(
                "top_k {} outside 1..={}",
                self.moe.top_k,
                self.num_experts()
            )));
        }
        if self.encoder.input_dim_image != self.spec.view_dim || self.encoder.input_dim_text != self.spec.view_dim {
            return Err(Error::Config(format!(
                "encoder input dims ({}, {}) differ from view_dim {}",
                self.encoder.input_dim_image, self.encoder.input_dim_text, self.spec.view_dim
            )));
        }
        if self.base.batch_size < 2 || !(self.base.lr > 0.0) {
            return Err(Error::Config("base batch_size must be ≥ 2 and lr positive".into()));
        }
        let classes = self.spec.values_per_attribute;
        if self.n_eval < 5 * classes || self.n_train < 2 {
            return Err(Error::Config(format!(
                "n_eval must be at least {} for the attribute probes",
                5 * classes
            )));
        }
        if self.n_eval < self.stage.k_image.max(self.stage.k_text) || self.n_train < self.stage.k_image.max(self.stage.k_text) {
            return Err(Error::Config("fewer samples than clusters".into()));
        }
        Ok(())
    }
}
