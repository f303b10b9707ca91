use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yvector::aggregator::{AmSoftmaxConfig, TdnnConfig};
use yvector::audio::DEFAULT_CROP_SAMPLES;
use yvector::encoder::EncoderConfig;
use yvector::evaluator::DcfConfig;
use yvector::model::ModelConfig;
use yvector::trainer::TrainConfig;

use crate::CliError;

/// Everything a run needs. Flags are merged on top of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    /// Divides every layer width (rounding up); 1 is the published size.
    pub width_divisor: usize,
    /// Full encoder geometry; replaces the preset when present.
    pub encoder: Option<EncoderConfig>,
    pub tfse_enabled: Option<bool>,
    pub multilevel_aggregation: Option<bool>,
    pub dropout_rate: Option<f64>,
    pub tdnn: TdnnConfig,
    pub am_softmax: AmSoftmaxConfig,
    pub train: TrainConfig,
    /// Authoritative seed; copied into `train.seed`.
    pub seed: u64,
    /// Write an epoch-stamped checkpoint every this many epochs.
    pub save_every: usize,
    /// Fixed input length for embedding and accuracy evaluation.
    pub eval_samples: usize,
    pub dcf: DcfConfig,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub manifest: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "yvector-5".into(),
            width_divisor: 1,
            encoder: None,
            tfse_enabled: None,
            multilevel_aggregation: None,
            dropout_rate: None,
            tdnn: TdnnConfig::default(),
            am_softmax: AmSoftmaxConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            save_every: 1,
            eval_samples: DEFAULT_CROP_SAMPLES,
            dcf: DcfConfig::default(),
            bootstrap_resamples: 1000,
            confidence: 0.95,
            manifest: None,
            trials: None,
            checkpoint: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Syncs derived fields and checks values; call after flags are applied.
    pub fn finish(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        if self.width_divisor == 0 || self.save_every == 0 || self.eval_samples == 0 {
            return Err(CliError::usage("width_divisor, save_every and eval_samples must be positive"));
        }
        self.train.validate().map_err(CliError::usage)?;
        self.dcf.validate().map_err(CliError::usage)?;
        self.model(1)?;
        Ok(self)
    }

    pub fn model(&self, n_classes: usize) -> Result<ModelConfig, CliError> {
        let mut encoder = match &self.encoder {
            Some(e) => e.clone(),
            None => EncoderConfig::preset(&self.preset).map_err(CliError::usage)?,
        };
        if let Some(v) = self.tfse_enabled {
            encoder.tfse_enabled = v;
        }
        if let Some(v) = self.multilevel_aggregation {
            encoder.multilevel_aggregation = v;
        }
        if let Some(v) = self.dropout_rate {
            encoder.dropout_rate = v;
        }
        let cfg = ModelConfig {
            encoder,
            tdnn: self.tdnn.clone(),
            am_softmax: self.am_softmax,
            n_classes,
        }
        .scaled(self.width_divisor)
        .map_err(CliError::usage)?;
        cfg.encoder.validate().map_err(CliError::usage)?;
        cfg.tdnn.validate().map_err(CliError::usage)?;
        cfg.am_softmax.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }

    /// The experiment definition without run-location paths; stored in
    /// checkpoints so the same experiment reproduces byte-identical files
    /// from any directory.
    pub fn snapshot(&self) -> String {
        let mut c = self.clone();
        c.manifest = None;
        c.trials = None;
        c.checkpoint = None;
        c.out_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    pub fn require(&self, field: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        field.cloned().ok_or_else(|| CliError::usage(format!("missing {name} (flag or config key)")))
    }
}
