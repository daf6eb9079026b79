use serde::{Deserialize, Serialize};

use super::{token_features, TokenFeatures};
use crate::error::{Error, Result};
use crate::rollout::StepRecord;

/// Entropy, negative log-prob, AU, EU.
pub const FEATURE_CHANNELS: usize = 4;

/// Per-channel standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; FEATURE_CHANNELS],
    pub std: [f64; FEATURE_CHANNELS],
}

impl NormStats {
    /// Statistics that leave features unchanged.
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; FEATURE_CHANNELS],
            std: [1.0; FEATURE_CHANNELS],
        }
    }

    /// Mean and population standard deviation over every token of every step.
    /// Channels with zero spread keep a unit scale.
    pub fn fit<'a>(tokens: impl IntoIterator<Item = &'a TokenFeatures>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = [0.0; FEATURE_CHANNELS];
        let mut m2 = [0.0; FEATURE_CHANNELS];
        for t in tokens {
            n += 1;
            for (c, x) in t.to_array().into_iter().enumerate() {
                // Welford update
                let delta = x - mean[c];
                mean[c] += delta / n as f64;
                m2[c] += delta * (x - mean[c]);
            }
        }
        if n == 0 {
            return Err(Error::validation("normalization statistics need at least one token"));
        }
        let mut std = [1.0; FEATURE_CHANNELS];
        for c in 0..FEATURE_CHANNELS {
            let s = (m2[c] / n as f64).sqrt();
            if s > 1e-12 {
                std[c] = s;
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, x: [f64; FEATURE_CHANNELS]) -> [f64; FEATURE_CHANNELS] {
        std::array::from_fn(|c| (x[c] - self.mean[c]) / self.std[c])
    }
}

/// A step's token features laid out as a 4×N matrix with a validity mask.
///
/// Stored column-wise: `columns[i]` holds the four channels of token slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    columns: Vec<[f64; FEATURE_CHANNELS]>,
    mask: Vec<bool>,
}

impl FeatureMatrix {
    /// Builds a matrix from already-computed token features, standardizing
    /// valid columns when `norm` is given. Fails when there are more tokens
    /// than `width`.
    pub fn from_features(
        features: &[TokenFeatures],
        width: usize,
        norm: Option<&NormStats>,
    ) -> Result<Self> {
        if features.len() > width {
            return Err(Error::LengthOverflow {
                len: features.len(),
                max: width,
            });
        }
        let mut columns = vec![[0.0; FEATURE_CHANNELS]; width];
        let mut mask = vec![false; width];
        for (i, f) in features.iter().enumerate() {
            let raw = f.to_array();
            columns[i] = match norm {
                Some(n) => n.apply(raw),
                None => raw,
            };
            mask[i] = true;
        }
        Ok(FeatureMatrix { columns, mask })
    }

    /// Raw constructor for arbitrary masks. Masked columns keep whatever
    /// values are passed; models never read them.
    pub fn from_parts(columns: Vec<[f64; FEATURE_CHANNELS]>, mask: Vec<bool>) -> Result<Self> {
        if columns.len() != mask.len() {
            return Err(Error::validation(format!(
                "{} columns but {} mask entries",
                columns.len(),
                mask.len()
            )));
        }
        Ok(FeatureMatrix { columns, mask })
    }

    /// N, the padded width.
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn columns(&self) -> &[[f64; FEATURE_CHANNELS]] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [[f64; FEATURE_CHANNELS]] {
        &mut self.columns
    }

    pub fn get(&self, channel: usize, position: usize) -> f64 {
        self.columns[position][channel]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(position, features)` for every unmasked column, in order.
    pub fn valid_columns(&self) -> impl Iterator<Item = (usize, &[f64; FEATURE_CHANNELS])> {
        self.columns
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, m))| **m)
            .map(|(i, (c, _))| (i, c))
    }
}

/// Raw per-token features of a step in decoding order.
pub fn step_token_features(step: &StepRecord, top_k: usize) -> Result<Vec<TokenFeatures>> {
    step.tokens.iter().map(|t| token_features(t, top_k)).collect()
}

/// Feature matrix of a step padded to `max_tokens` columns.
pub fn step_feature_matrix(
    step: &StepRecord,
    max_tokens: usize,
    top_k: usize,
    norm: Option<&NormStats>,
) -> Result<FeatureMatrix> {
    if step.tokens.len() > max_tokens {
        return Err(Error::LengthOverflow {
            len: step.tokens.len(),
            max: max_tokens,
        });
    }
    let feats = step_token_features(step, top_k)?;
    FeatureMatrix::from_features(&feats, max_tokens, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{aleatoric_uncertainty, epistemic_uncertainty, evidence_from_logits};
    use crate::features::{DistributionKind, TokenDistribution};

    fn one_hot_token() -> TokenDistribution {
        TokenDistribution {
            kind: DistributionKind::Full,
            vocab_size: 3,
            probs: vec![1.0, 0.0, 0.0],
            logits: vec![5.0, -1.0, -2.0],
            chosen_index: 0,
            tail_mass: None,
        }
    }

    #[test]
    fn one_hot_single_token() {
        let step = StepRecord::new(0, vec![one_hot_token()]);
        let fm = step_feature_matrix(&step, 1, 3, None).unwrap();
        let ev = evidence_from_logits(&[5.0, -1.0, -2.0], 3).unwrap();
        assert_eq!(fm.get(0, 0), 0.0);
        assert_eq!(fm.get(1, 0), 0.0);
        assert_eq!(fm.get(2, 0), aleatoric_uncertainty(&ev.alpha).unwrap());
        assert_eq!(fm.get(3, 0), epistemic_uncertainty(&ev.alpha).unwrap());
        assert_eq!(fm.mask(), &[true]);
    }

    #[test]
    fn padding_contract() {
        let step = StepRecord::new(0, vec![one_hot_token(), one_hot_token()]);
        let norm = NormStats {
            mean: [1.0; 4],
            std: [2.0; 4],
        };
        let fm = step_feature_matrix(&step, 4, 2, Some(&norm)).unwrap();
        assert_eq!(fm.mask(), &[true, true, false, false]);
        assert_eq!(fm.columns()[2], [0.0; 4]);
        assert_eq!(fm.columns()[3], [0.0; 4]);
        assert_eq!(fm.get(0, 0), -0.5);
        assert_eq!(fm.valid_count(), 2);
    }

    #[test]
    fn overflow_reports_lengths() {
        let step = StepRecord::new(0, vec![one_hot_token(); 3]);
        match step_feature_matrix(&step, 2, 2, None) {
            Err(Error::LengthOverflow { len: 3, max: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn norm_stats_fit() {
        let feats = [
            TokenFeatures { entropy: 1.0, neg_log_prob: 2.0, au: 0.0, eu: 0.5 },
            TokenFeatures { entropy: 3.0, neg_log_prob: 2.0, au: 1.0, eu: 0.5 },
        ];
        let n = NormStats::fit(&feats).unwrap();
        assert_eq!(n.mean, [2.0, 2.0, 0.5, 0.5]);
        assert_eq!(n.std, [1.0, 1.0, 0.5, 1.0]);
        assert!(NormStats::fit(&[]).is_err());
    }
}
