use serde::{Deserialize, Serialize};

use super::{HelpDecision, HelpMethod, MethodFactory};
use crate::conformal::{calibrate, CpConfig, CpThreshold};
use crate::error::{Error, Result};
use crate::model::{
    train_strong, train_weak, ClassifierCheckpoint, EpisodeClassifierConfig, ModelKind, StepDecision,
    TrainConfig,
};
use crate::rollout::{stratified_holdout, EpisodeRecord, StepRecord};

impl From<StepDecision> for HelpDecision {
    fn from(d: StepDecision) -> Self {
        HelpDecision {
            help: d.help,
            score: d.score,
            degraded: d.degraded,
        }
    }
}

impl HelpMethod for ClassifierCheckpoint {
    fn name(&self) -> String {
        format!("transformer-{}", self.kind.as_str())
    }

    fn max_tokens(&self) -> Option<usize> {
        Some(ClassifierCheckpoint::max_tokens(self))
    }

    fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision> {
        ClassifierCheckpoint::decide_step(self, step).map(Into::into)
    }

    fn decide_episode(&self, episode: &EpisodeRecord) -> Result<Vec<HelpDecision>> {
        Ok(ClassifierCheckpoint::decide_episode(self, episode)?
            .into_iter()
            .map(Into::into)
            .collect())
    }

    fn episode_probability(&self, episode: &EpisodeRecord) -> Result<Option<f64>> {
        match self.kind {
            ModelKind::Weak => Ok(Some(self.episode_output(episode)?.prob)),
            ModelKind::Strong => Ok(None),
        }
    }
}

impl HelpMethod for CpThreshold {
    fn name(&self) -> String {
        self.config.name()
    }

    fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision> {
        CpThreshold::decide_step(self, step)
    }

    fn cp_threshold(&self) -> Option<CpThreshold> {
        Some(*self)
    }
}

/// Trains a strong or weak transformer per fold. A stratified fraction of
/// the training episodes is held out for early stopping; each fold uses
/// `train.seed + fold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerFactory {
    pub mode: ModelKind,
    pub model: EpisodeClassifierConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl TransformerFactory {
    pub fn fit_checkpoint(&self, train: &[&EpisodeRecord], fold: usize) -> Result<ClassifierCheckpoint> {
        let tc = TrainConfig {
            seed: self.train.seed.wrapping_add(fold as u64),
            ..self.train.clone()
        };
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        let (fit, val) = stratified_holdout(train, self.val_fraction, tc.seed);
        match self.mode {
            ModelKind::Strong => train_strong(&fit, &val, &self.model.step, &tc),
            ModelKind::Weak => train_weak(&fit, &val, &self.model, &tc),
        }
    }
}

impl MethodFactory for TransformerFactory {
    fn name(&self) -> String {
        format!("transformer-{}", self.mode.as_str())
    }

    fn fit(&self, train: &[&EpisodeRecord], fold: usize) -> Result<Box<dyn HelpMethod>> {
        Ok(Box::new(self.fit_checkpoint(train, fold)?))
    }
}

/// Calibrates a conformal threshold per fold on the training episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpFactory {
    pub config: CpConfig,
}

impl MethodFactory for CpFactory {
    fn name(&self) -> String {
        self.config.name()
    }

    fn fit(&self, train: &[&EpisodeRecord], _fold: usize) -> Result<Box<dyn HelpMethod>> {
        Ok(Box::new(calibrate(train, &self.config)?))
    }
}
