//! Experiment definition.

use serde::{Deserialize, Serialize};

use crate::aggregation::{HybridConfig, MadaConfig};
use crate::data::MixtureSpec;
use crate::dp::PrivacySpec;
use crate::error::{Error, Result};
use crate::masking::{SelectionMode, DEFAULT_SCORE_CLAMP};
use crate::mmd::{EmbeddingSpec, AMA_RATE};
use crate::net::GeneratorArch;
use crate::partition::PartitionStrategy;

/// Which gate the local forward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    /// Forward and backward through the expected mask `theta`.
    #[default]
    Expected,
    /// Forward through a freshly sampled mask each iteration; the backward
    /// pass is straight-through to the scores.
    Sampled,
}

/// What the server broadcasts at the start of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkMode {
    /// 32-bit scores.
    #[default]
    Scores,
    /// The sampled global mask, re-inflated to clamped scores by clients.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Evaluate every this many rounds (and after the last one).
    pub every: usize,
    /// Held-out real points and generated points per evaluation.
    pub samples: usize,
    /// Gaussian kernel bandwidth for the evaluation MMD.
    pub bandwidth: f64,
    /// Neighbourhood size for the k-NN metrics.
    pub knn_k: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            every: 10,
            samples: 500,
            bandwidth: 0.5,
            knn_k: 5,
        }
    }
}

fn default_local_iters() -> usize {
    100
}
fn default_score_lr() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    256
}
fn default_participation() -> f64 {
    1.0
}
fn default_ama_rate() -> Option<f64> {
    Some(AMA_RATE)
}
fn default_score_clamp() -> f64 {
    DEFAULT_SCORE_CLAMP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    #[serde(default = "default_local_iters")]
    pub local_iters: usize,
    #[serde(default = "default_score_lr")]
    pub score_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_participation")]
    pub participation_ratio: f64,
    #[serde(default)]
    pub partition: PartitionStrategy,
    #[serde(default)]
    pub mada: MadaConfig,
    #[serde(default)]
    pub hybrid: HybridConfig,
    #[serde(default)]
    pub privacy: PrivacySpec,
    pub embedding: EmbeddingSpec,
    pub arch: GeneratorArch,
    #[serde(default)]
    pub master_seed: u64,
    pub data: MixtureSpec,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default)]
    pub backward: BackwardMode,
    /// AMA rate for the real-feature target statistics; `None` matches raw
    /// minibatch statistics.
    #[serde(default = "default_ama_rate")]
    pub ama_rate: Option<f64>,
    #[serde(default = "default_score_clamp")]
    pub score_clamp: f64,
    /// Initial value of every global score.
    #[serde(default)]
    pub init_score: f64,
    #[serde(default)]
    pub downlink: DownlinkMode,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl FederationConfig {
    /// Desk-scale setup: `components` Gaussians on a ring of radius 0.6 (std 0.15),
    /// an 8-64-64-2 generator and a 64-unit random-feature embedding.
    pub fn toy(components: usize, num_clients: usize) -> Self {
        Self {
            num_clients,
            rounds: 200,
            local_iters: default_local_iters(),
            score_lr: default_score_lr(),
            batch_size: default_batch_size(),
            participation_ratio: 1.0,
            partition: PartitionStrategy::Iid,
            mada: MadaConfig::default(),
            hybrid: HybridConfig::default(),
            privacy: PrivacySpec::default(),
            embedding: EmbeddingSpec::RandomFeatures {
                input_dim: 2,
                hidden: vec![64],
                weight_std: 2.0,
                bias_std: 1.0,
                seed: 0xe3bed,
            },
            arch: GeneratorArch::mlp(8, &[64, 64], 2).expect("static architecture"),
            master_seed: 0,
            data: MixtureSpec::ring(components, 0.6, 0.15, 1000),
            selection: SelectionMode::Bernoulli,
            backward: BackwardMode::Expected,
            ama_rate: default_ama_rate(),
            score_clamp: DEFAULT_SCORE_CLAMP,
            init_score: 0.0,
            downlink: DownlinkMode::Scores,
            eval: EvalSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if self.num_clients > u32::MAX as usize || self.rounds > u32::MAX as usize {
            return Err(Error::config("client and round counts must fit in u32"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.score_lr > 0.0) {
            return Err(Error::config("score_lr must be positive"));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::config("participation_ratio must lie in (0, 1]"));
        }
        if !(self.score_clamp > 0.0 && self.score_clamp < 0.5) {
            return Err(Error::config("score_clamp must lie in (0, 0.5)"));
        }
        if !self.init_score.is_finite() {
            return Err(Error::config("init_score must be finite"));
        }
        if let Some(rate) = self.ama_rate {
            if !(rate >= 0.0) {
                return Err(Error::config("ama_rate must be non-negative"));
            }
        }
        if self.eval.every == 0 || self.eval.samples < 2 || !(self.eval.bandwidth > 0.0) {
            return Err(Error::config(
                "eval needs every >= 1, samples >= 2, bandwidth > 0",
            ));
        }
        self.hybrid.validate()?;
        self.selection.validate()?;
        if self.privacy.enabled {
            self.privacy.validate()?;
        }
        self.data.validate()?;
        let dim = self.data.dim();
        if self.arch.output_dim() != dim {
            return Err(Error::config(format!(
                "generator output {} does not match data dimension {dim}",
                self.arch.output_dim()
            )));
        }
        if self.embedding.input_dim() != dim {
            return Err(Error::config(format!(
                "embedding input {} does not match data dimension {dim}",
                self.embedding.input_dim()
            )));
        }
        Ok(())
    }

    /// Clients selected per round.
    pub fn participants_per_round(&self) -> usize {
        ((self.participation_ratio * self.num_clients as f64 - 1e-9).ceil() as usize)
            .clamp(1, self.num_clients)
    }
}
