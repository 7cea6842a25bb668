use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lienard_kdl::metrics::PicAggregation;
use lienard_kdl::models::{EsnConfig, ModelKind, ModelSpec, TrainConfig};
use lienard_kdl::series::{Alignment, PipelineConfig, STANDARD_SPLITS};
use lienard_kdl::{DerivativeMode, LienardParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub s0: [f64; 2],
    pub t0: f64,
    pub t_end: f64,
    pub h_internal: f64,
    pub dt_sample: f64,
    /// Samples dropped from the front before pretraining.
    pub warmup: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { s0: [0.1, 0.1], t0: 0.0, t_end: 5000.0, h_internal: 0.01, dt_sample: 1.0, warmup: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub lookback: usize,
    pub derivative_mode: DerivativeMode,
    pub alignment: Alignment,
    pub scale: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        PipelineSettings { lookback: p.lookback, derivative_mode: p.derivative_mode, alignment: p.alignment, scale: p.scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub ffnn_hidden: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,
    pub cnn_pool: usize,
    pub cnn_dense: usize,
    pub esn: EsnConfig,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let s = ModelSpec::new(ModelKind::Kdl, 10);
        ArchitectureConfig {
            lstm_hidden: s.lstm_hidden,
            lstm_layers: s.lstm_layers,
            ffnn_hidden: s.ffnn_hidden,
            cnn_filters: s.cnn_filters,
            cnn_kernel: s.cnn_kernel,
            cnn_pool: s.cnn_pool,
            cnn_dense: s.cnn_dense,
            esn: s.esn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_value_column")]
    pub value_column: String,
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    #[serde(default = "default_dt")]
    pub dt_sample: f64,
}

fn default_value_column() -> String {
    "value".into()
}
fn default_timestamp_column() -> String {
    "date".into()
}
fn default_dt() -> f64 {
    1.0
}

fn default_pretrain() -> TrainConfig {
    TrainConfig { max_epochs: 150, ..TrainConfig::default() }
}

fn default_finetune() -> TrainConfig {
    TrainConfig { max_epochs: 100, ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub lienard: LienardParams,
    pub simulation: SimulationConfig,
    pub pipeline: PipelineSettings,
    pub architecture: ArchitectureConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub models: Vec<ModelKind>,
    pub splits: Vec<f64>,
    pub pic_aggregation: PicAggregation,
    pub datasets: Vec<DatasetSpec>,
    /// Pretrained state for the physics-regularised model; pretraining runs
    /// in-process when absent.
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Fine-tune from a fresh initialisation instead of a pretrained state.
    pub no_pretrain: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            lienard: LienardParams::EXTREME_EVENTS,
            simulation: SimulationConfig::default(),
            pipeline: PipelineSettings::default(),
            architecture: ArchitectureConfig::default(),
            pretrain: default_pretrain(),
            finetune: default_finetune(),
            models: ModelKind::ALL.to_vec(),
            splits: STANDARD_SPLITS.to_vec(),
            pic_aggregation: PicAggregation::Sum,
            datasets: Vec::new(),
            pretrained_checkpoint: None,
            no_pretrain: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serialising config")
    }

    pub fn validate(&self) -> Result<()> {
        self.lienard.validate()?;
        self.pretrain.validate().context("[pretrain]")?;
        self.finetune.validate().context("[finetune]")?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.pipeline.lookback == 0 {
            bail!("pipeline.lookback must be positive");
        }
        for &f in &self.splits {
            if !(f > 0.0 && f < 1.0) {
                bail!("split fraction {f} must lie in (0, 1)");
            }
        }
        let s = &self.simulation;
        if !(s.t_end > s.t0 && s.h_internal > 0.0 && s.dt_sample > 0.0) {
            bail!("simulation needs t_end > t0 and positive steps");
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("dataset names must be unique");
        }
        for d in &self.datasets {
            if d.dt_sample.is_nan() || d.dt_sample <= 0.0 {
                bail!("dataset {}: dt_sample must be positive", d.name);
            }
        }
        for kind in &self.models {
            if kind.is_network() {
                self.model_spec(*kind).architecture().with_context(|| format!("architecture for {kind}"))?;
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn model_spec(&self, kind: ModelKind) -> ModelSpec {
        let a = &self.architecture;
        ModelSpec {
            kind,
            lookback: self.pipeline.lookback,
            channels: lienard_kdl::series::CHANNELS,
            lstm_hidden: a.lstm_hidden,
            lstm_layers: a.lstm_layers,
            ffnn_hidden: a.ffnn_hidden,
            cnn_filters: a.cnn_filters,
            cnn_kernel: a.cnn_kernel,
            cnn_pool: a.cnn_pool,
            cnn_dense: a.cnn_dense,
            esn: a.esn,
        }
    }

    pub fn pipeline_config(&self, train_fraction: f64) -> PipelineConfig {
        PipelineConfig {
            lookback: self.pipeline.lookback,
            derivative_mode: self.pipeline.derivative_mode,
            alignment: self.pipeline.alignment,
            train_fraction,
            scale: self.pipeline.scale,
        }
    }

    pub fn dataset(&self, name: Option<&str>) -> Result<&DatasetSpec> {
        match name {
            Some(n) => self
                .datasets
                .iter()
                .find(|d| d.name == n)
                .with_context(|| format!("no dataset named '{n}' in config")),
            None => self.datasets.first().context("config lists no datasets"),
        }
    }
}

/// `0.8` becomes `80:20`.
pub fn split_label(train_fraction: f64) -> String {
    let train = (train_fraction * 100.0).round() as i64;
    format!("{train}:{}", 100 - train)
}
