//! Checkpoint files: one line of JSON manifest followed by the tensors as a
//! contiguous little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{sigmoid, EpisodeOutput, StepClassifier, StepClassifierConfig, TrainingMeta};
use crate::error::{Error, Result};
use crate::features::{step_token_features, FeatureMatrix, NormStats};
use crate::rollout::{EpisodeRecord, StepRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Trained on step labels.
    Strong,
    /// Trained on episode outcomes through pooled step logits.
    Weak,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Strong => "strong",
            ModelKind::Weak => "weak",
        }
    }
}

/// Outcome of scoring one step with a trained classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    pub logit: f64,
    pub score: f64,
    pub help: bool,
    /// The step had more tokens than the model width; only the first
    /// `max_tokens` were scored.
    pub degraded: bool,
}

/// A trained classifier with everything needed to score raw steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierCheckpoint {
    pub kind: ModelKind,
    pub model: StepClassifier,
    /// Pooling temperature for episode-level outputs (weak models).
    pub pool_beta: Option<f64>,
    pub norm: NormStats,
    pub threshold: f64,
    pub meta: TrainingMeta,
}

impl ClassifierCheckpoint {
    pub fn new(
        kind: ModelKind,
        model: StepClassifier,
        pool_beta: Option<f64>,
        norm: NormStats,
        threshold: f64,
        meta: TrainingMeta,
    ) -> Self {
        ClassifierCheckpoint {
            kind,
            model,
            pool_beta,
            norm,
            threshold,
            meta,
        }
    }

    pub fn max_tokens(&self) -> usize {
        self.model.config().max_tokens
    }

    /// Normalized feature matrix of a step, truncated to the model width.
    /// The flag reports truncation.
    pub fn feature_matrix(&self, step: &StepRecord) -> Result<(FeatureMatrix, bool)> {
        let n = self.max_tokens();
        let degraded = step.tokens.len() > n;
        let head = StepRecord {
            tokens: step.tokens.iter().take(n).cloned().collect(),
            ..StepRecord::new(step.step_index, Vec::new())
        };
        let feats = step_token_features(&head, self.model.config().top_k)?;
        let fm = FeatureMatrix::from_features(&feats, n, Some(&self.norm))?;
        Ok((fm, degraded))
    }

    fn decision(&self, logit: f64, degraded: bool) -> StepDecision {
        let score = sigmoid(logit);
        StepDecision {
            logit,
            score,
            help: score >= self.threshold,
            degraded,
        }
    }

    pub fn decide_step(&self, step: &StepRecord) -> Result<StepDecision> {
        let (fm, degraded) = self.feature_matrix(step)?;
        let out = self.model.forward_step(&fm)?;
        Ok(self.decision(out.logit, degraded))
    }

    /// Decisions for every step of an episode in one batched pass.
    pub fn decide_episode(&self, episode: &EpisodeRecord) -> Result<Vec<StepDecision>> {
        if episode.steps.is_empty() {
            return Ok(Vec::new());
        }
        let (fms, flags): (Vec<FeatureMatrix>, Vec<bool>) = episode
            .steps
            .iter()
            .map(|s| self.feature_matrix(s))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let logits = self.model.step_logits(&fms)?;
        Ok(logits
            .into_iter()
            .zip(flags)
            .map(|(l, d)| self.decision(l, d))
            .collect())
    }

    /// Pooled episode output; strong models pool with the default temperature.
    pub fn episode_output(&self, episode: &EpisodeRecord) -> Result<EpisodeOutput> {
        let fms = episode
            .steps
            .iter()
            .map(|s| self.feature_matrix(s).map(|(fm, _)| fm))
            .collect::<Result<Vec<_>>>()?;
        let beta = self.pool_beta.unwrap_or(super::DEFAULT_POOL_BETA);
        self.model.forward_episode(&fms, beta)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f64` elements from the start of the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    config: StepClassifierConfig,
    pool_beta: Option<f64>,
    threshold: f64,
    norm: NormStats,
    meta: TrainingMeta,
    parameter_count: usize,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

pub fn checkpoint_bytes(ckpt: &ClassifierCheckpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, shape, values) in ckpt.model.tensors() {
        tensors.push(TensorEntry { name, shape, offset });
        offset += values.len();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        kind: ckpt.kind,
        config: ckpt.model.config().clone(),
        pool_beta: ckpt.pool_beta,
        threshold: ckpt.threshold,
        norm: ckpt.norm,
        meta: ckpt.meta.clone(),
        parameter_count: offset,
        tensors,
        payload_bytes: payload.len(),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ClassifierCheckpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
    let (head, payload) = (&bytes[..split], &bytes[split + 1..]);

    let raw: serde_json::Value = serde_json::from_slice(head)
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("manifest has no format_version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;
    manifest.config.validate()?;
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let mut net = Network::init(&manifest.config, 0);
    let expected = net.tensors();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut spans = Vec::with_capacity(expected.len());
    for ((name, shape, values), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + values.len();
        if end * 8 > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {name} runs past the payload")));
        }
        spans.push((entry.offset, end));
    }
    drop(expected);
    for (dst, (a, b)) in net.tensors_mut().into_iter().zip(spans) {
        for (v, chunk) in dst.iter_mut().zip(payload[a * 8..b * 8].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }

    Ok(ClassifierCheckpoint {
        kind: manifest.kind,
        model: StepClassifier::from_parts(manifest.config, net),
        pool_beta: manifest.pool_beta,
        norm: manifest.norm,
        threshold: manifest.threshold,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(ckpt: &ClassifierCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_step_classifier, StepClassifierConfig};
    use crate::rollout::{synthesize_dataset, SynthConfig};

    fn fixture() -> ClassifierCheckpoint {
        let cfg = StepClassifierConfig {
            ff_dim: 16,
            ..StepClassifierConfig::new(8)
        };
        ClassifierCheckpoint::new(
            ModelKind::Weak,
            init_step_classifier(&cfg, 21).unwrap(),
            Some(6.0),
            NormStats {
                mean: [1.0, 0.5, 0.2, 0.3],
                std: [0.7, 0.6, 0.1, 0.05],
            },
            0.5,
            TrainingMeta {
                seed: 21,
                epochs_run: 0,
                best_epoch: 0,
                train_loss: 0.0,
                val_loss: 0.0,
                train_units: 0,
                val_units: 0,
            },
        )
    }

    #[test]
    fn round_trip_is_byte_stable_and_exact() {
        let ckpt = fixture();
        let bytes = checkpoint_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

        let data = synthesize_dataset(&SynthConfig {
            episodes_total: 3,
            tokens_range: (2, 10),
            ..SynthConfig::s1()
        })
        .unwrap();
        for e in &data {
            assert_eq!(ckpt.decide_episode(e).unwrap(), back.decide_episode(e).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = checkpoint_bytes(&fixture()).unwrap();
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert!(matches!(checkpoint_from_bytes(&bytes[..split / 2]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let bytes = checkpoint_bytes(&fixture()).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"format_version\":1", "\"format_version\":7", 1);
        match checkpoint_from_bytes(text.as_bytes()) {
            Err(Error::UnsupportedVersion { found: 7, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bytes = checkpoint_bytes(&fixture()).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"ff_dim\":16", "\"ff_dim\":17", 1);
        assert!(matches!(checkpoint_from_bytes(text.as_bytes()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn long_steps_are_truncated_and_flagged() {
        let ckpt = fixture();
        let data = synthesize_dataset(&SynthConfig {
            episodes_total: 1,
            tokens_range: (12, 12),
            ..SynthConfig::s1()
        })
        .unwrap();
        let step = &data[0].steps[0];
        let d = ckpt.decide_step(step).unwrap();
        assert!(d.degraded);
        let head = StepRecord::new(0, step.tokens[..8].to_vec());
        let h = ckpt.decide_step(&head).unwrap();
        assert!(!h.degraded);
        assert_eq!(h.logit, d.logit);
    }
}
