//! Compact transformer help-trigger classifiers.
//!
//! A shared step encoder maps one step's 4×N feature matrix to a logit. The
//! strong model is trained on per-step labels; the weak model pools the
//! step logits of an episode with a temperature log-sum-exp and is trained
//! on the episode outcome alone.

mod checkpoint;
mod gradcheck;
mod network;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, ClassifierCheckpoint,
    ModelKind, StepDecision, CHECKPOINT_VERSION,
};
pub use gradcheck::{
    grad_check, GradCheckBatch, GradCheckReport, StrongSample, WeakSample, GRAD_NOISE_FLOOR,
};
pub use train::{train_strong, train_weak, TrainConfig, TrainingMeta};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, DEFAULT_TOP_K};
use network::{Network, PackedSteps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepClassifierConfig {
    /// Hidden width of the token projection and encoder.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Inner width of each encoder layer's feed-forward block.
    pub ff_dim: usize,
    /// Hidden units of the two-layer prediction head.
    pub head_hidden: usize,
    /// N, the padded token width of the feature matrix.
    pub max_tokens: usize,
    pub dropout: f64,
    /// Number of top logits used as Dirichlet evidence.
    pub top_k: usize,
}

impl StepClassifierConfig {
    pub fn new(max_tokens: usize) -> Self {
        StepClassifierConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 1,
            ff_dim: 2048,
            head_hidden: 32,
            max_tokens,
            dropout: 0.1,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.head_hidden == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        Ok(())
    }
}

pub const DEFAULT_POOL_BETA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeClassifierConfig {
    pub step: StepClassifierConfig,
    /// Temperature of the log-sum-exp pooling over step logits.
    pub pool_beta: f64,
}

impl EpisodeClassifierConfig {
    pub fn new(max_tokens: usize) -> Self {
        EpisodeClassifierConfig {
            step: StepClassifierConfig::new(max_tokens),
            pool_beta: DEFAULT_POOL_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.step.validate()?;
        if !(self.step.n_layers == 1 || self.step.n_layers == 2) {
            return Err(Error::config(format!(
                "episode classifier supports 1 or 2 encoder layers, got {}",
                self.step.n_layers
            )));
        }
        if !(self.pool_beta.is_finite() && self.pool_beta > 0.0) {
            return Err(Error::config(format!("pool_beta must be positive, got {}", self.pool_beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub logit: f64,
    /// sigmoid(logit)
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub step_logits: Vec<f64>,
    pub pooled_logit: f64,
    /// sigmoid of the pooled logit.
    pub prob: f64,
}

/// The step encoder plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepClassifier {
    config: StepClassifierConfig,
    net: Network,
}

pub fn init_step_classifier(cfg: &StepClassifierConfig, seed: u64) -> Result<StepClassifier> {
    cfg.validate()?;
    Ok(StepClassifier {
        config: cfg.clone(),
        net: Network::init(cfg, seed),
    })
}

impl StepClassifier {
    pub fn config(&self) -> &StepClassifierConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// `(name, shape, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.net.tensors()
    }

    pub fn forward_step(&self, fm: &FeatureMatrix) -> Result<StepOutput> {
        let logit = self.step_logits(std::slice::from_ref(fm))?[0];
        Ok(StepOutput {
            logit,
            score: sigmoid(logit),
        })
    }

    /// Logits of many steps in one packed pass.
    pub fn step_logits(&self, fms: &[FeatureMatrix]) -> Result<Vec<f64>> {
        let packed = PackedSteps::new(fms, self.config.max_tokens)?;
        Ok(self.net.forward(&packed, None).0)
    }

    pub fn forward_episode(&self, fms: &[FeatureMatrix], beta: f64) -> Result<EpisodeOutput> {
        if fms.is_empty() {
            return Err(Error::validation("episode has no steps"));
        }
        let step_logits = self.step_logits(fms)?;
        let pooled_logit = lse_pool(&step_logits, beta)?;
        Ok(EpisodeOutput {
            step_logits,
            pooled_logit,
            prob: sigmoid(pooled_logit),
        })
    }

    pub(crate) fn from_parts(config: StepClassifierConfig, net: Network) -> Self {
        StepClassifier { config, net }
    }

    pub(crate) fn net(&self) -> &Network {
        &self.net
    }
}

/// A step classifier whose logits are pooled over an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeClassifier {
    pub config: EpisodeClassifierConfig,
    pub step: StepClassifier,
}

pub fn init_episode_classifier(cfg: &EpisodeClassifierConfig, seed: u64) -> Result<EpisodeClassifier> {
    cfg.validate()?;
    Ok(EpisodeClassifier {
        config: cfg.clone(),
        step: init_step_classifier(&cfg.step, seed)?,
    })
}

impl EpisodeClassifier {
    pub fn forward_episode(&self, fms: &[FeatureMatrix]) -> Result<EpisodeOutput> {
        self.step.forward_episode(fms, self.config.pool_beta)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (1/β) ln Σ exp(β ℓ_t), evaluated around the maximum.
pub fn lse_pool(logits: &[f64], beta: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::validation("log-sum-exp pooling of an empty list"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config(format!("pooling temperature must be positive, got {beta}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (beta * (l - max)).exp()).sum();
    Ok(max + sum.ln() / beta)
}

/// ∂ lse_pool / ∂ℓ_t = softmax(β ℓ)_t.
pub(crate) fn lse_pool_weights(logits: &[f64], beta: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (beta * (l - max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
