//! Run configuration: everything that determines a training run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SynthConfig;
use crate::dwc::n_delta;
use crate::error::{Result, ScidaError};
use crate::lwc::CorrectionTarget;
use crate::models::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full method: adversarial alignment plus label-wise self-correction.
    Scida,
    /// Source supervision only.
    SourceOnly,
    /// Adversarial alignment without self-correction.
    DwcOnly,
}

impl std::str::FromStr for Mode {
    type Err = ScidaError;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ScidaError::Config(format!("unknown mode '{s}' (scida, source_only, dwc_only)")))
    }
}

/// When self-correction runs relative to the DWC batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// One pass over the target set after the DWC batches of each epoch,
    /// with the adjacency rebuilt from fresh pseudo labels.
    PerEpoch,
    /// One self-correction step after every DWC batch, using the adjacency
    /// and pseudo labels from the end of the previous epoch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Generate the synthetic pair in memory.
    Synthetic { config: SynthConfig, seed: u64 },
    /// MAI-layout directories; the target's labels are only used for evaluation.
    Mai { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSpec,
    pub mode: Mode,
    pub num_classes: usize,
    pub side: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub input_pool: usize,
    pub channels: [usize; 4],
    pub head_hidden: usize,
    pub delta: f64,
    pub batch_size: usize,
    pub lr_dwc: f64,
    pub lr_lwc: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_dwc: usize,
    pub lr_decay_every_lwc: usize,
    pub max_epochs: usize,
    /// Leading epochs that run source supervision only.
    pub warmup_epochs: usize,
    pub n_inner: usize,
    pub discrepancy_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub self_correction_target: CorrectionTarget,
    pub interleave: Interleave,
    pub conv_eps: f64,
    pub conv_patience: usize,
    pub eval_threshold: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::Synthetic {
                config: SynthConfig::default(),
                seed: 0,
            },
            mode: Mode::Scida,
            num_classes: 8,
            side: 64,
            feature_dim: 128,
            embed_dim: 64,
            input_pool: 2,
            channels: [8, 16, 32, 32],
            head_hidden: 64,
            delta: 0.2,
            batch_size: 4,
            lr_dwc: 0.001,
            lr_lwc: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every_dwc: 10,
            lr_decay_every_lwc: 40,
            max_epochs: 60,
            warmup_epochs: 3,
            n_inner: 4,
            discrepancy_weight: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            self_correction_target: CorrectionTarget::Pseudo,
            interleave: Interleave::PerEpoch,
            conv_eps: 0.01,
            conv_patience: 3,
            eval_threshold: 0.5,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ScidaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScidaError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            side: self.side,
            input_pool: self.input_pool,
            channels: self.channels,
            feature_dim: self.feature_dim,
            head_hidden: self.head_hidden,
            embed_dim: self.embed_dim,
            gcn_hidden: 4 * self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ScidaError::Config(m));
        self.model_config().validate()?;
        n_delta(self.delta, self.num_classes)?;
        if let DataSpec::Synthetic { config, .. } = &self.data {
            config.validate()?;
            if config.num_classes != self.num_classes || config.side != self.side {
                return cfg(format!(
                    "synthetic data has K = {} and side {}, run expects K = {} and side {}",
                    config.num_classes, config.side, self.num_classes, self.side
                ));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return cfg("batch_size and max_epochs must be positive".into());
        }
        if self.lr_decay_every_dwc == 0 || self.lr_decay_every_lwc == 0 || self.conv_patience == 0 {
            return cfg("decay intervals and conv_patience must be positive".into());
        }
        let non_negative = [
            ("lr_dwc", self.lr_dwc),
            ("lr_lwc", self.lr_lwc),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_decay_factor", self.lr_decay_factor),
            ("discrepancy_weight", self.discrepancy_weight),
            ("conv_eps", self.conv_eps),
            ("focal_gamma", self.focal_gamma),
        ];
        if let Some((name, v)) = non_negative.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return cfg(format!("{name} must be finite and non-negative, got {v}"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return cfg(format!("focal_alpha must be in (0, 1), got {}", self.focal_alpha));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return cfg(format!("eval_threshold must be in (0, 1), got {}", self.eval_threshold));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Learning rate of a branch at a 1-based epoch under step decay.
    pub fn lr_at(&self, base: f64, every: usize, epoch: usize) -> f64 {
        base * self.lr_decay_factor.powi(((epoch.max(1) - 1) / every) as i32)
    }
}
