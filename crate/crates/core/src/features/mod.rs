//! Per-token uncertainty kernels.
//!
//! A token's predictive distribution and raw logits map to four features:
//! entropy, negative log-probability of the chosen token, and the aleatoric
//! and epistemic uncertainties of a Dirichlet whose evidence comes from the
//! top-K logits. All logs are natural logs.

mod digamma;
mod matrix;

use serde::{Deserialize, Serialize};

pub use digamma::digamma;
pub use matrix::{step_feature_matrix, step_token_features, FeatureMatrix, NormStats, FEATURE_CHANNELS};

use crate::error::{Error, Result};
use crate::rollout::StepRecord;
use digamma::digamma_diff;

/// Allowed deviation of a distribution's total mass from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Default number of top logits that carry Dirichlet evidence.
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    /// Probabilities over the whole vocabulary.
    Full,
    /// The K most likely tokens plus the mass of everything else.
    TopkTail,
}

/// One decoded token's predictive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub kind: DistributionKind,
    pub vocab_size: usize,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub chosen_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_mass: Option<f64>,
}

impl TokenDistribution {
    /// Full-vocabulary distribution `softmax(logits)` with the greedy token chosen.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::validation("empty logit vector"));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let chosen_index = argmax(&probs);
        let dist = TokenDistribution {
            kind: DistributionKind::Full,
            vocab_size: logits.len(),
            probs,
            logits,
            chosen_index,
            tail_mass: None,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn chosen_prob(&self) -> f64 {
        self.probs[self.chosen_index]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.probs.len();
        if k == 0 {
            return Err(Error::validation("token distribution has no probabilities"));
        }
        if self.logits.len() != k {
            return Err(Error::validation(format!(
                "logits length {} does not match probs length {k}",
                self.logits.len()
            )));
        }
        if self.vocab_size == 0 || k > self.vocab_size {
            return Err(Error::validation(format!(
                "{k} probabilities for a vocabulary of {}",
                self.vocab_size
            )));
        }
        if let Some((i, p)) = self
            .probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::validation(format!("probs[{i}] = {p} is not a probability")));
        }
        if let Some((i, l)) = self.logits.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::validation(format!("logits[{i}] = {l} is not finite")));
        }
        if self.chosen_index >= k {
            return Err(Error::validation(format!(
                "chosen_index {} out of range for {k} probabilities",
                self.chosen_index
            )));
        }
        if self.chosen_prob() <= 0.0 {
            return Err(Error::validation(format!(
                "chosen token {} has zero probability",
                self.chosen_index
            )));
        }

        let sum: f64 = self.probs.iter().sum();
        match self.kind {
            DistributionKind::Full => {
                if k != self.vocab_size {
                    return Err(Error::validation(format!(
                        "full distribution lists {k} of {} tokens",
                        self.vocab_size
                    )));
                }
                if self.tail_mass.is_some_and(|t| t != 0.0) {
                    return Err(Error::validation("full distribution carries a tail mass"));
                }
                check_sum(sum)
            }
            DistributionKind::TopkTail => {
                let tail = self
                    .tail_mass
                    .ok_or_else(|| Error::validation("topk_tail distribution without tail_mass"))?;
                if !tail.is_finite() || tail < 0.0 {
                    return Err(Error::validation(format!("tail_mass = {tail} is invalid")));
                }
                if tail > 0.0 && k == self.vocab_size {
                    return Err(Error::validation(
                        "positive tail mass with every vocabulary entry listed",
                    ));
                }
                check_sum(sum + tail)
            }
        }
    }
}

fn check_sum(sum: f64) -> Result<()> {
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::validation(format!(
            "probabilities sum to {sum}, expected 1 within {NORMALIZATION_TOLERANCE}"
        )));
    }
    Ok(())
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// The four per-token features, in matrix channel order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub entropy: f64,
    pub neg_log_prob: f64,
    pub au: f64,
    pub eu: f64,
}

impl TokenFeatures {
    pub fn to_array(self) -> [f64; FEATURE_CHANNELS] {
        [self.entropy, self.neg_log_prob, self.au, self.eu]
    }
}

/// Shannon entropy in nats, with 0·ln 0 = 0.
///
/// For `topk_tail` records the tail is spread uniformly over the unlisted
/// `V − K` tokens.
pub fn token_entropy(dist: &TokenDistribution) -> Result<f64> {
    dist.validate()?;
    Ok(entropy_unchecked(dist))
}

fn entropy_unchecked(dist: &TokenDistribution) -> f64 {
    let listed: f64 = dist
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let tail = match (dist.kind, dist.tail_mass) {
        (DistributionKind::TopkTail, Some(t)) if t > 0.0 => {
            let unlisted = (dist.vocab_size - dist.probs.len()) as f64;
            -t * (t / unlisted).ln()
        }
        _ => 0.0,
    };
    listed + tail
}

/// −ln p(chosen token).
pub fn token_neg_log_prob(dist: &TokenDistribution) -> Result<f64> {
    dist.validate()?;
    // written as a difference so that p = 1 yields +0
    Ok(0.0 - dist.chosen_prob().ln())
}

/// Dirichlet evidence built from the K largest logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    /// α_k, ordered by descending logit.
    pub alpha: Vec<f64>,
    /// α_0 = Σ α_k.
    pub total: f64,
}

/// ln(1 + eˣ) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Selects the K largest logits and maps each through softplus.
pub fn evidence_from_logits(logits: &[f64], k: usize) -> Result<Evidence> {
    if k == 0 || k > logits.len() {
        return Err(Error::config(format!(
            "evidence needs 1 <= K <= {} logits, got K = {k}",
            logits.len()
        )));
    }
    let mut sorted = logits.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let alpha: Vec<f64> = sorted[..k].iter().map(|&l| softplus(l)).collect();
    let total = alpha.iter().sum();
    Ok(Evidence { alpha, total })
}

/// Expected entropy of the categorical under Dir(α):
/// −Σ_k (α_k/α_0) [ψ(α_k + 1) − ψ(α_0 + 1)].
pub fn aleatoric_uncertainty(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::config("empty evidence vector"));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::domain(format!("evidence must be positive, got {a}")));
    }
    let total: f64 = alpha.iter().sum();
    // ψ(α_0 + 1) − ψ(α_k + 1) is evaluated from the sum of the other
    // alphas, so a dominant α_k does not cancel away the small terms.
    let mut before = 0.0;
    let mut after: Vec<f64> = vec![0.0; alpha.len()];
    for i in (0..alpha.len().saturating_sub(1)).rev() {
        after[i] = after[i + 1] + alpha[i + 1];
    }
    let mut au = 0.0;
    for (i, &a) in alpha.iter().enumerate() {
        au += (a / total) * digamma_diff(a + 1.0, before + after[i]);
        before += a;
    }
    Ok(au)
}

/// K / Σ_k (α_k + 1).
pub fn epistemic_uncertainty(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::config("empty evidence vector"));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::domain(format!("evidence must be nonnegative, got {a}")));
    }
    let k = alpha.len() as f64;
    Ok(k / (alpha.iter().sum::<f64>() + k))
}

/// All four features for one token.
pub fn token_features(dist: &TokenDistribution, top_k: usize) -> Result<TokenFeatures> {
    dist.validate()?;
    let evidence = evidence_from_logits(&dist.logits, top_k)?;
    Ok(TokenFeatures {
        entropy: entropy_unchecked(dist),
        neg_log_prob: 0.0 - dist.chosen_prob().ln(),
        au: aleatoric_uncertainty(&evidence.alpha)?,
        eu: epistemic_uncertainty(&evidence.alpha)?,
    })
}

/// exp of the mean per-token negative log-likelihood.
pub fn step_perplexity(step: &StepRecord) -> Result<f64> {
    tokens_perplexity(&step.tokens)
}

pub(crate) fn tokens_perplexity(tokens: &[TokenDistribution]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::validation("perplexity of an empty step"));
    }
    let mut nll = 0.0;
    for t in tokens {
        nll += token_neg_log_prob(t)?;
    }
    Ok((nll / tokens.len() as f64).exp())
}

/// Mean token entropy of a step.
pub fn step_mean_entropy(step: &StepRecord) -> Result<f64> {
    if step.tokens.is_empty() {
        return Err(Error::validation("entropy of an empty step"));
    }
    let mut sum = 0.0;
    for t in &step.tokens {
        sum += token_entropy(t)?;
    }
    Ok(sum / step.tokens.len() as f64)
}

/// Largest token entropy of a step.
pub fn step_max_entropy(step: &StepRecord) -> Result<f64> {
    if step.tokens.is_empty() {
        return Err(Error::validation("entropy of an empty step"));
    }
    step.tokens
        .iter()
        .try_fold(f64::NEG_INFINITY, |m, t| Ok(m.max(token_entropy(t)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(probs: &[f64], chosen: usize) -> TokenDistribution {
        TokenDistribution {
            kind: DistributionKind::Full,
            vocab_size: probs.len(),
            probs: probs.to_vec(),
            logits: probs.iter().map(|p| p.max(1e-300).ln()).collect(),
            chosen_index: chosen,
            tail_mass: None,
        }
    }

    fn step_with_chosen(chosen: &[f64]) -> StepRecord {
        let tokens = chosen
            .iter()
            .map(|&p| {
                if p == 1.0 {
                    full(&[1.0, 0.0], 0)
                } else {
                    full(&[p, 1.0 - p], 0)
                }
            })
            .collect();
        StepRecord::new(0, tokens)
    }

    #[test]
    fn entropy_examples() {
        let h = token_entropy(&full(&[0.25; 4], 0)).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert_eq!(token_entropy(&full(&[1.0, 0.0, 0.0], 0)).unwrap(), 0.0);
        // −(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let h = token_entropy(&full(&[0.7, 0.2, 0.1], 0)).unwrap();
        assert!((h - 0.801_818_552_5).abs() < 1e-9, "{h}");
    }

    #[test]
    fn entropy_rejects_bad_normalization() {
        let err = token_entropy(&full(&[0.5, 0.3], 0)).unwrap_err();
        assert!(err.to_string().contains("0.8"), "{err}");
    }

    #[test]
    fn topk_tail_matches_full_for_uniform_tail() {
        // Head of three tokens, remaining 5 tokens share 0.25 uniformly.
        let head = [0.5, 0.15, 0.1];
        let mut all = head.to_vec();
        all.extend(std::iter::repeat_n(0.05, 5));
        let full_h = token_entropy(&full(&all, 0)).unwrap();
        let tail = TokenDistribution {
            kind: DistributionKind::TopkTail,
            vocab_size: 8,
            probs: head.to_vec(),
            logits: vec![1.0, 0.0, -0.5],
            chosen_index: 0,
            tail_mass: Some(0.25),
        };
        assert!((token_entropy(&tail).unwrap() - full_h).abs() < 1e-9);
    }

    #[test]
    fn topk_tail_validation() {
        let mut d = TokenDistribution {
            kind: DistributionKind::TopkTail,
            vocab_size: 8,
            probs: vec![0.5, 0.2],
            logits: vec![1.0, 0.0],
            chosen_index: 0,
            tail_mass: None,
        };
        assert!(d.validate().is_err());
        d.tail_mass = Some(0.3);
        assert!(d.validate().is_ok());
        d.tail_mass = Some(0.1);
        assert!(d.validate().is_err());
    }

    #[test]
    fn neg_log_prob_examples() {
        assert_eq!(token_neg_log_prob(&full(&[1.0, 0.0], 0)).unwrap(), 0.0);
        let e_inv = (-1.0f64).exp();
        let d = full(&[e_inv, 1.0 - e_inv], 0);
        assert!((token_neg_log_prob(&d).unwrap() - 1.0).abs() < 1e-12);
        let d = full(&[0.25, 0.75], 0);
        assert!((token_neg_log_prob(&d).unwrap() - 1.386_294_361).abs() < 1e-9);
        assert!(token_neg_log_prob(&full(&[0.0, 1.0], 0)).is_err());
    }

    #[test]
    fn evidence_examples() {
        let ev = evidence_from_logits(&[0.0, 0.0], 2).unwrap();
        assert!(ev.alpha.iter().all(|a| (a - std::f64::consts::LN_2).abs() < 1e-12));
        let ev = evidence_from_logits(&[10.0, -10.0], 2).unwrap();
        assert!((ev.alpha[0] - 10.000_045_4).abs() < 1e-7);
        assert!((ev.alpha[1] - 4.539_889e-5).abs() < 1e-10);
        let ev = evidence_from_logits(&[1.0, 3.0, 2.0], 2).unwrap();
        assert!((ev.alpha[0] - 3.048_587_35).abs() < 1e-8);
        assert!((ev.alpha[1] - 2.126_928_01).abs() < 1e-8);
        assert!((ev.total - ev.alpha.iter().sum::<f64>()).abs() < 1e-15);
        assert!(matches!(evidence_from_logits(&[1.0], 0), Err(Error::Config(_))));
        assert!(matches!(evidence_from_logits(&[1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn aleatoric_examples() {
        assert!((aleatoric_uncertainty(&[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((aleatoric_uncertainty(&[3.0, 1.0]).unwrap() - 11.0 / 24.0).abs() < 1e-12);
        let au = aleatoric_uncertainty(&[1e4; 4]).unwrap();
        assert!((au - 4f64.ln()).abs() < 1e-3);
        assert!(matches!(aleatoric_uncertainty(&[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn epistemic_examples() {
        assert_eq!(epistemic_uncertainty(&[1.0, 1.0]).unwrap(), 0.5);
        assert!((epistemic_uncertainty(&[99.0, 99.0]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(epistemic_uncertainty(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(epistemic_uncertainty(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(step_perplexity(&step_with_chosen(&[1.0, 1.0])).unwrap(), 1.0);
        assert!((step_perplexity(&step_with_chosen(&[0.5, 0.5])).unwrap() - 2.0).abs() < 1e-12);
        let ppl = step_perplexity(&step_with_chosen(&[0.5, 0.125])).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
        assert!(step_perplexity(&StepRecord::new(0, vec![])).is_err());
    }

    #[test]
    fn from_logits_picks_greedy_token() {
        let d = TokenDistribution::from_logits(vec![0.1, 2.0, -1.0]).unwrap();
        assert_eq!(d.chosen_index, 1);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-8.0..8.0f64, 2..40)
        }

        proptest! {
            #[test]
            fn entropy_within_bounds(l in logits()) {
                let d = TokenDistribution::from_logits(l).unwrap();
                let h = token_entropy(&d).unwrap();
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (d.vocab_size as f64).ln() + 1e-12);
                prop_assert!(token_neg_log_prob(&d).unwrap() >= 0.0);
            }

            #[test]
            fn au_nonnegative_and_permutation_invariant(
                alpha in prop::collection::vec(1e-3..1e3f64, 1..16),
                rot in 0usize..16,
            ) {
                let au = aleatoric_uncertainty(&alpha).unwrap();
                prop_assert!(au >= 0.0);
                let mut rotated = alpha.clone();
                let r = rot % alpha.len();
                rotated.rotate_left(r);
                rotated.reverse();
                let au2 = aleatoric_uncertainty(&rotated).unwrap();
                prop_assert!((au - au2).abs() <= 1e-12 * au.abs().max(1.0));
            }

            #[test]
            fn eu_decreases_with_evidence(
                alpha in prop::collection::vec(0.0..1e3f64, 1..16),
                idx in 0usize..16,
                bump in 1e-3..10.0f64,
            ) {
                let eu = epistemic_uncertainty(&alpha).unwrap();
                prop_assert!(eu > 0.0 && eu <= 1.0);
                let mut more = alpha.clone();
                let i = idx % alpha.len();
                more[i] += bump;
                prop_assert!(epistemic_uncertainty(&more).unwrap() < eu);
            }
        }
    }

    #[test]
    fn uniform_attains_maximum_and_one_hot_zero() {
        for v in [2usize, 5, 32, 64] {
            let d = full(&vec![1.0 / v as f64; v], 0);
            assert!((token_entropy(&d).unwrap() - (v as f64).ln()).abs() < 1e-9);
            let mut p = vec![0.0; v];
            p[v - 1] = 1.0;
            assert_eq!(token_entropy(&full(&p, v - 1)).unwrap(), 0.0);
        }
    }
}
