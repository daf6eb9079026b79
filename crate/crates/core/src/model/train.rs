//! Mini-batch training with adaptive moment estimation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ClassifierCheckpoint, ModelKind};
use super::network::{Dropout, Network, PackedSteps};
use super::{
    init_step_classifier, lse_pool, lse_pool_weights, sigmoid, EpisodeClassifierConfig,
    StepClassifierConfig,
};
use crate::error::{Error, Result};
use crate::features::{softplus, step_token_features, FeatureMatrix, NormStats, TokenFeatures};
use crate::rollout::EpisodeRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Steps per mini-batch for step-level training.
    pub batch_steps: usize,
    /// Episodes per mini-batch for episode-level training.
    pub batch_episodes: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Help is triggered when sigmoid(logit) reaches this value.
    pub threshold: f64,
    /// Weight on the positive-class term of the loss; `None` means 1.
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_steps: 32,
            batch_episodes: 8,
            max_epochs: 50,
            patience: 8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            threshold: 0.5,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("pos_weight", self.pos_weight.unwrap_or(1.0)),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("{name} must be positive, got {v}")));
        }
        if self.batch_steps == 0 || self.batch_episodes == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch sizes and max_epochs must be positive"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_units: usize,
    pub val_units: usize,
}

/// Binary cross-entropy on a logit and its derivative.
pub(crate) fn bce_with_logit(logit: f64, label: bool, pos_weight: f64) -> (f64, f64) {
    if label {
        (pos_weight * softplus(-logit), pos_weight * (sigmoid(logit) - 1.0))
    } else {
        (softplus(logit), sigmoid(logit))
    }
}

pub(crate) enum Supervision {
    Steps(Vec<bool>),
    Episodes {
        /// Segment ranges of each episode within the packed batch.
        bounds: Vec<(usize, usize)>,
        labels: Vec<bool>,
        beta: f64,
    },
}

pub(crate) struct TrainBatch {
    pub packed: PackedSteps,
    pub supervision: Supervision,
}

impl TrainBatch {
    pub fn steps<'a>(
        fms: impl IntoIterator<Item = &'a FeatureMatrix>,
        labels: Vec<bool>,
        width: usize,
    ) -> Result<Self> {
        Ok(TrainBatch {
            packed: PackedSteps::new(fms, width)?,
            supervision: Supervision::Steps(labels),
        })
    }

    pub fn episodes<'a>(
        episodes: impl IntoIterator<Item = (&'a [FeatureMatrix], bool)>,
        beta: f64,
        width: usize,
    ) -> Result<Self> {
        let mut bounds = Vec::new();
        let mut labels = Vec::new();
        let mut all: Vec<&FeatureMatrix> = Vec::new();
        for (fms, label) in episodes {
            if fms.is_empty() {
                return Err(Error::validation("episode has no steps"));
            }
            let start = all.len();
            all.extend(fms);
            bounds.push((start, all.len()));
            labels.push(label);
        }
        Ok(TrainBatch {
            packed: PackedSteps::new(all, width)?,
            supervision: Supervision::Episodes { bounds, labels, beta },
        })
    }

    pub fn units(&self) -> usize {
        match &self.supervision {
            Supervision::Steps(l) => l.len(),
            Supervision::Episodes { labels, .. } => labels.len(),
        }
    }

    /// Mean loss over the batch's units and, when `grad` is given, the
    /// accumulated parameter gradient of that mean.
    pub fn loss(
        &self,
        net: &Network,
        dropout: Option<Dropout<'_>>,
        pos_weight: f64,
        grad: Option<&mut Network>,
    ) -> f64 {
        let (logits, cache) = net.forward(&self.packed, dropout);
        let n = self.units() as f64;
        let mut dlogits = vec![0.0; logits.len()];
        let mut total = 0.0;
        match &self.supervision {
            Supervision::Steps(labels) => {
                for ((l, &y), d) in logits.iter().zip(labels).zip(&mut dlogits) {
                    let (loss, dl) = bce_with_logit(*l, y, pos_weight);
                    total += loss;
                    *d = dl / n;
                }
            }
            Supervision::Episodes { bounds, labels, beta } => {
                for (&(a, b), &y) in bounds.iter().zip(labels) {
                    let seg = &logits[a..b];
                    let pooled = lse_pool(seg, *beta).expect("nonempty episode, positive beta");
                    let (loss, dl) = bce_with_logit(pooled, y, pos_weight);
                    total += loss;
                    for (d, w) in dlogits[a..b].iter_mut().zip(lse_pool_weights(seg, *beta)) {
                        *d = dl * w / n;
                    }
                }
            }
        }
        if let Some(g) = grad {
            net.backward(&self.packed, &cache, &dlogits, g);
        }
        total / n
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(net: &Network, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = net.tensors().iter().map(|(_, _, t)| t.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Decoupled weight decay, then the bias-corrected moment update.
    fn step(&mut self, net: &mut Network, grad: &Network) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grad.tensors();
        for (i, p) in net.tensors_mut().into_iter().enumerate() {
            let g = grads[i].2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

fn clip_global_norm(grad: &mut Network, max_norm: f64) {
    let norm = grad
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grad.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Training units after feature extraction.
enum Units {
    Steps(Vec<(FeatureMatrix, bool)>),
    Episodes(Vec<(Vec<FeatureMatrix>, bool)>, f64),
}

impl Units {
    fn len(&self) -> usize {
        match self {
            Units::Steps(v) => v.len(),
            Units::Episodes(v, _) => v.len(),
        }
    }

    fn batch(&self, idx: &[usize], width: usize) -> Result<TrainBatch> {
        match self {
            Units::Steps(v) => TrainBatch::steps(
                idx.iter().map(|&i| &v[i].0),
                idx.iter().map(|&i| v[i].1).collect(),
                width,
            ),
            Units::Episodes(v, beta) => TrainBatch::episodes(
                idx.iter().map(|&i| (v[i].0.as_slice(), v[i].1)),
                *beta,
                width,
            ),
        }
    }

    /// Mean loss without dropout, evaluated in chunks.
    fn mean_loss(&self, net: &Network, width: usize, pos_weight: f64) -> Result<f64> {
        let chunk = match self {
            Units::Steps(_) => 256,
            Units::Episodes(..) => 16,
        };
        let all: Vec<usize> = (0..self.len()).collect();
        let mut total = 0.0;
        for idx in all.chunks(chunk) {
            let b = self.batch(idx, width)?;
            total += b.loss(net, None, pos_weight, None) * idx.len() as f64;
        }
        Ok(total / self.len() as f64)
    }
}

/// Raw token features of every step, keyed by episode then step.
type RawFeatures = Vec<Vec<Vec<TokenFeatures>>>;

fn extract(episodes: &[&EpisodeRecord], top_k: usize) -> Result<RawFeatures> {
    episodes
        .iter()
        .map(|e| {
            e.steps
                .iter()
                .map(|s| {
                    step_token_features(s, top_k).map_err(|err| {
                        Error::validation(format!(
                            "episode {} step {}: {err}",
                            e.episode_id, s.step_index
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Steps longer than the model width keep their first `width` tokens, as at
/// inference time.
fn matrices(raw: &[Vec<TokenFeatures>], width: usize, norm: &NormStats) -> Result<Vec<FeatureMatrix>> {
    raw.iter()
        .map(|f| FeatureMatrix::from_features(&f[..f.len().min(width)], width, Some(norm)))
        .collect()
}

fn step_units(
    episodes: &[&EpisodeRecord],
    raw: &RawFeatures,
    width: usize,
    norm: &NormStats,
) -> Result<Units> {
    let mut units = Vec::new();
    for (e, feats) in episodes.iter().zip(raw) {
        let labels = e.strong_labels()?;
        for (fm, y) in matrices(feats, width, norm)?.into_iter().zip(labels) {
            units.push((fm, y));
        }
    }
    Ok(Units::Steps(units))
}

fn episode_units(
    episodes: &[&EpisodeRecord],
    raw: &RawFeatures,
    width: usize,
    norm: &NormStats,
    beta: f64,
) -> Result<Units> {
    let units = episodes
        .iter()
        .zip(raw)
        .map(|(e, feats)| {
            if e.steps.is_empty() {
                return Err(Error::validation(format!("episode {} has no steps", e.episode_id)));
            }
            Ok((matrices(feats, width, norm)?, e.weak_label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Units::Episodes(units, beta))
}

struct FitOutcome {
    best: Network,
    meta: TrainingMeta,
}

fn fit(
    mut net: Network,
    train: &Units,
    val: &Units,
    cfg: &StepClassifierConfig,
    tc: &TrainConfig,
) -> Result<FitOutcome> {
    if train.len() == 0 {
        return Err(Error::validation("empty training set"));
    }
    let pos_weight = tc.pos_weight.unwrap_or(1.0);
    let batch_size = match train {
        Units::Steps(_) => tc.batch_steps,
        Units::Episodes(..) => tc.batch_episodes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(&net, tc.learning_rate, tc.weight_decay);
    let mut grad = net.zeros_like();
    let (width, dropout_rate) = (cfg.max_tokens, cfg.dropout);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_train = f64::NAN;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=tc.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(batch_size) {
            let batch = train.batch(idx, width)?;
            grad.fill_zero();
            let dropout = (dropout_rate > 0.0).then_some(Dropout {
                rate: dropout_rate,
                rng: &mut rng,
            });
            epoch_loss += batch.loss(&net, dropout, pos_weight, Some(&mut grad)) * idx.len() as f64;
            clip_global_norm(&mut grad, tc.grad_clip);
            adam.step(&mut net, &grad);
        }
        epoch_loss /= train.len() as f64;

        let monitored = if val.len() > 0 {
            val.mean_loss(&net, width, pos_weight)?
        } else {
            epoch_loss
        };
        if !monitored.is_finite() {
            return Err(Error::validation(format!("loss diverged at epoch {epoch}")));
        }
        if monitored < best_loss {
            best_loss = monitored;
            best = net.clone();
            best_epoch = epoch;
            best_train = epoch_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }

    Ok(FitOutcome {
        best,
        meta: TrainingMeta {
            seed: tc.seed,
            epochs_run,
            best_epoch,
            train_loss: best_train,
            val_loss: best_loss,
            train_units: train.len(),
            val_units: val.len(),
        },
    })
}

fn prepare(
    train: &[&EpisodeRecord],
    val: &[&EpisodeRecord],
    cfg: &StepClassifierConfig,
) -> Result<(RawFeatures, RawFeatures, NormStats)> {
    let train_raw = extract(train, cfg.top_k)?;
    let val_raw = extract(val, cfg.top_k)?;
    let norm = NormStats::fit(train_raw.iter().flatten().flatten())?;
    Ok((train_raw, val_raw, norm))
}

/// Step-level training on strong labels. Normalization statistics come from
/// the training steps only; the returned checkpoint holds the weights with
/// the lowest validation loss.
pub fn train_strong(
    train: &[&EpisodeRecord],
    val: &[&EpisodeRecord],
    cfg: &StepClassifierConfig,
    tc: &TrainConfig,
) -> Result<ClassifierCheckpoint> {
    cfg.validate()?;
    tc.validate()?;
    for e in train {
        e.strong_labels()?;
    }
    let (train_raw, val_raw, norm) = prepare(train, val, cfg)?;
    let train_units = step_units(train, &train_raw, cfg.max_tokens, &norm)?;
    let val_units = step_units(val, &val_raw, cfg.max_tokens, &norm)?;

    let model = init_step_classifier(cfg, tc.seed)?;
    let outcome = fit(model.net().clone(), &train_units, &val_units, cfg, tc)?;
    Ok(ClassifierCheckpoint::new(
        ModelKind::Strong,
        super::StepClassifier::from_parts(cfg.clone(), outcome.best),
        None,
        norm,
        tc.threshold,
        outcome.meta,
    ))
}

/// Episode-level training on weak labels through log-sum-exp pooling.
pub fn train_weak(
    train: &[&EpisodeRecord],
    val: &[&EpisodeRecord],
    cfg: &EpisodeClassifierConfig,
    tc: &TrainConfig,
) -> Result<ClassifierCheckpoint> {
    cfg.validate()?;
    tc.validate()?;
    let step_cfg = &cfg.step;
    let (train_raw, val_raw, norm) = prepare(train, val, step_cfg)?;
    let train_units = episode_units(train, &train_raw, step_cfg.max_tokens, &norm, cfg.pool_beta)?;
    let val_units = episode_units(val, &val_raw, step_cfg.max_tokens, &norm, cfg.pool_beta)?;

    let model = init_step_classifier(step_cfg, tc.seed)?;
    let outcome = fit(model.net().clone(), &train_units, &val_units, step_cfg, tc)?;
    Ok(ClassifierCheckpoint::new(
        ModelKind::Weak,
        super::StepClassifier::from_parts(step_cfg.clone(), outcome.best),
        Some(cfg.pool_beta),
        norm,
        tc.threshold,
        outcome.meta,
    ))
}
