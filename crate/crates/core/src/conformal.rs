//! Split conformal thresholds on step-level uncertainty scores.
//!
//! A threshold τ is the lower empirical quantile of calibration scores drawn
//! from steps (strong regime) or failure episodes (weak regime) that needed
//! help. Triggering whenever a step's score reaches τ then misses help with
//! probability at most β on exchangeable data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::HelpDecision;
use crate::features::{step_max_entropy, step_mean_entropy, step_perplexity};
use crate::rollout::{EpisodeRecord, StepRecord};

pub const DEFAULT_BETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Entropy,
    Perplexity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Calibrate on steps labeled as needing help.
    Strong,
    /// Calibrate on the per-episode maximum score of failure episodes.
    Weak,
}

/// How token entropies are reduced to a step entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpConfig {
    pub score: ScoreKind,
    pub regime: Regime,
    /// Budget on the probability of missing a needed help request.
    pub beta: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl CpConfig {
    pub fn new(score: ScoreKind, regime: Regime) -> Self {
        CpConfig {
            score,
            regime,
            beta: DEFAULT_BETA,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(format!("beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }

    pub fn score_step(&self, step: &StepRecord) -> Result<f64> {
        match (self.score, self.aggregation) {
            (ScoreKind::Entropy, Aggregation::Mean) => step_mean_entropy(step),
            (ScoreKind::Entropy, Aggregation::Max) => step_max_entropy(step),
            (ScoreKind::Perplexity, _) => step_perplexity(step),
        }
    }

    pub fn name(&self) -> String {
        let regime = match self.regime {
            Regime::Strong => "strong",
            Regime::Weak => "weak",
        };
        let score = match (self.score, self.aggregation) {
            (ScoreKind::Entropy, Aggregation::Mean) => "entropy",
            (ScoreKind::Entropy, Aggregation::Max) => "max-entropy",
            (ScoreKind::Perplexity, _) => "perplexity",
        };
        format!("cp-{score}-{regime}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpThreshold {
    pub tau: f64,
    /// Number of calibration scores.
    pub n: usize,
    pub config: CpConfig,
}

impl CpThreshold {
    pub fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision> {
        cp_decide(self.config.score_step(step)?, self)
    }
}

/// Step score with mean entropy aggregation.
pub fn step_score(step: &StepRecord, kind: ScoreKind) -> Result<f64> {
    CpConfig::new(kind, Regime::Strong).score_step(step)
}

/// The ⌊(n+1)β⌋-th smallest score (1-based, at least the first, at most
/// the last).
pub fn conformal_quantile(scores: &[f64], beta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("no calibration scores"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::validation(format!("non-finite calibration score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The small offset keeps products such as 10 × 0.2 from landing just below an integer.
    let k = (((n + 1) as f64 * beta + 1e-9).floor() as usize).clamp(1, n);
    Ok(sorted[k - 1])
}

pub fn calibrate_strong<'a>(
    steps: impl IntoIterator<Item = &'a StepRecord>,
    cfg: &CpConfig,
) -> Result<CpThreshold> {
    cfg.validate()?;
    let mut scores = Vec::new();
    for s in steps {
        match s.strong_label {
            Some(true) => scores.push(cfg.score_step(s)?),
            Some(false) => {}
            None => {
                return Err(Error::validation(format!(
                    "step {} has no strong label",
                    s.step_index
                )))
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::validation("calibration set has no steps labeled as needing help"));
    }
    Ok(CpThreshold {
        tau: conformal_quantile(&scores, cfg.beta)?,
        n: scores.len(),
        config: *cfg,
    })
}

pub fn calibrate_weak(episodes: &[&EpisodeRecord], cfg: &CpConfig) -> Result<CpThreshold> {
    cfg.validate()?;
    let mut maxima = Vec::new();
    for e in episodes.iter().filter(|e| e.weak_label) {
        let mut m = f64::NEG_INFINITY;
        for s in &e.steps {
            m = m.max(cfg.score_step(s)?);
        }
        if e.steps.is_empty() {
            return Err(Error::validation(format!("episode {} has no steps", e.episode_id)));
        }
        maxima.push(m);
    }
    if maxima.is_empty() {
        return Err(Error::validation("calibration set has no failure episodes"));
    }
    Ok(CpThreshold {
        tau: conformal_quantile(&maxima, cfg.beta)?,
        n: maxima.len(),
        config: *cfg,
    })
}

/// Calibrates in the regime named by the configuration.
pub fn calibrate(episodes: &[&EpisodeRecord], cfg: &CpConfig) -> Result<CpThreshold> {
    match cfg.regime {
        Regime::Strong => calibrate_strong(episodes.iter().flat_map(|e| &e.steps), cfg),
        Regime::Weak => calibrate_weak(episodes, cfg),
    }
}

/// Help iff `score ≥ τ`.
pub fn cp_decide(score: f64, threshold: &CpThreshold) -> Result<HelpDecision> {
    if score.is_nan() {
        return Err(Error::validation("score is NaN"));
    }
    Ok(HelpDecision {
        help: score >= threshold.tau,
        score,
        degraded: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TokenDistribution;
    use crate::rollout::Source;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot() -> TokenDistribution {
        TokenDistribution::from_logits(vec![0.0; 1]).unwrap()
    }

    /// A token over `v` outcomes with chosen probability `p` and the rest uniform.
    fn token(v: usize, p: f64) -> TokenDistribution {
        let rest = (1.0 - p) / (v - 1) as f64;
        let probs: Vec<f64> = (0..v).map(|i| if i == 0 { p } else { rest }).collect();
        TokenDistribution {
            logits: probs.iter().map(|q| q.ln()).collect(),
            probs,
            ..TokenDistribution::from_logits(vec![0.0; v]).unwrap()
        }
    }

    /// One token with chosen probability 1/score, so the perplexity is `score`
    /// (which must exceed 1).
    fn step_with_score(score: f64, label: bool) -> StepRecord {
        StepRecord::new(0, vec![token(64, 1.0 / score)]).with_label(label)
    }

    fn perplexity_cfg(regime: Regime) -> CpConfig {
        CpConfig::new(ScoreKind::Perplexity, regime)
    }

    #[test]
    fn step_score_examples() {
        let s = StepRecord::new(0, vec![one_hot()]);
        assert_eq!(step_score(&s, ScoreKind::Entropy).unwrap(), 0.0);
        let half = TokenDistribution::from_logits(vec![0.0, 0.0]).unwrap();
        let s = StepRecord::new(0, vec![half.clone(), half]);
        assert!((step_score(&s, ScoreKind::Perplexity).unwrap() - 2.0).abs() < 1e-12);
        assert!(step_score(&StepRecord::new(0, vec![]), ScoreKind::Entropy).is_err());
    }

    #[test]
    fn mean_entropy_of_two_tokens() {
        // uniform over e and e³ outcomes would not be integral; use 2 and 8 outcomes
        let a = TokenDistribution::from_logits(vec![0.0; 2]).unwrap();
        let b = TokenDistribution::from_logits(vec![0.0; 8]).unwrap();
        let s = StepRecord::new(0, vec![a, b]);
        let expected = (2f64.ln() + 8f64.ln()) / 2.0;
        assert!((step_score(&s, ScoreKind::Entropy).unwrap() - expected).abs() < 1e-12);
        let max = CpConfig {
            aggregation: Aggregation::Max,
            ..CpConfig::new(ScoreKind::Entropy, Regime::Strong)
        };
        assert!((max.score_step(&s).unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.2).unwrap(), 2.0);
        let missed = s.iter().filter(|&&x| x < 2.0).count() as f64 / 9.0;
        assert!(missed <= 0.2);
        assert_eq!(conformal_quantile(&[4.5], 0.2).unwrap(), 4.5);
        assert_eq!(conformal_quantile(&[3.0, 5.0, 7.0, 9.0], 0.2).unwrap(), 3.0);
        assert_eq!(conformal_quantile(&[2.0; 5], 0.2).unwrap(), 2.0);
        assert!(conformal_quantile(&[], 0.2).is_err());
        assert!(conformal_quantile(&[1.0, f64::NAN], 0.2).is_err());
    }

    #[test]
    fn strong_calibration_uses_positive_steps_only() {
        let mut steps: Vec<StepRecord> = (2..=10).map(|i| step_with_score(f64::from(i), true)).collect();
        steps.push(step_with_score(2.5, false));
        let th = calibrate_strong(&steps, &perplexity_cfg(Regime::Strong)).unwrap();
        assert_eq!(th.n, 9);
        assert!((th.tau - 3.0).abs() < 1e-9);

        let negatives = vec![step_with_score(3.0, false)];
        assert!(calibrate_strong(&negatives, &perplexity_cfg(Regime::Strong)).is_err());
        let unlabeled = vec![StepRecord::new(0, vec![one_hot()])];
        assert!(calibrate_strong(&unlabeled, &perplexity_cfg(Regime::Strong)).is_err());
    }

    #[test]
    fn ties_trigger() {
        let steps: Vec<StepRecord> = (0..5).map(|_| step_with_score(4.0, true)).collect();
        let th = calibrate_strong(&steps, &perplexity_cfg(Regime::Strong)).unwrap();
        for s in &steps {
            assert!(th.decide_step(s).unwrap().help);
        }
    }

    fn failure(id: &str, scores: &[f64]) -> EpisodeRecord {
        EpisodeRecord {
            episode_id: id.into(),
            weak_label: true,
            source: Source::Synthetic,
            steps: scores
                .iter()
                .enumerate()
                .map(|(t, &s)| StepRecord { step_index: t, ..step_with_score(s, false) })
                .collect(),
        }
    }

    #[test]
    fn weak_calibration_uses_episode_maxima() {
        let eps = [
            failure("a", &[1.25, 3.0]),
            failure("b", &[5.0, 2.0]),
            failure("c", &[7.0]),
            failure("d", &[1.5, 9.0, 4.0]),
        ];
        let refs: Vec<&EpisodeRecord> = eps.iter().collect();
        let th = calibrate_weak(&refs, &perplexity_cfg(Regime::Weak)).unwrap();
        assert!((th.tau - 3.0).abs() < 1e-9);
        assert_eq!(th.n, 4);

        let th = calibrate_weak(&refs[1..2], &perplexity_cfg(Regime::Weak)).unwrap();
        assert!((th.tau - 5.0).abs() < 1e-9);

        let mut ok = failure("s", &[2.0]);
        ok.weak_label = false;
        assert!(calibrate_weak(&[&ok], &perplexity_cfg(Regime::Weak)).is_err());
    }

    #[test]
    fn decide_boundaries() {
        let th = CpThreshold {
            tau: 1.25,
            n: 3,
            config: perplexity_cfg(Regime::Strong),
        };
        assert!(cp_decide(1.25, &th).unwrap().help);
        assert!(!cp_decide(1.25 - 1e-12, &th).unwrap().help);
        assert!(cp_decide(f64::NAN, &th).is_err());
        assert!(CpConfig { beta: 1.0, ..th.config }.validate().is_err());
    }

    proptest! {
        #[test]
        fn raising_beta_never_lowers_tau(
            scores in prop::collection::vec(-50.0f64..50.0, 1..60),
            b1 in 0.01f64..0.99,
            b2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            // a larger miss budget allows a higher threshold, hence fewer triggers
            prop_assert!(conformal_quantile(&scores, hi).unwrap() >= conformal_quantile(&scores, lo).unwrap());
        }

        #[test]
        fn tau_is_a_calibration_score(
            scores in prop::collection::vec(-50.0f64..50.0, 1..60),
            beta in 0.01f64..0.99,
        ) {
            let tau = conformal_quantile(&scores, beta).unwrap();
            prop_assert!(scores.contains(&tau));
        }
    }

    #[test]
    fn coverage_on_exchangeable_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_cal = 50;
        let mut total = 0.0;
        for _ in 0..200 {
            let pool: Vec<f64> = (0..150).map(|_| rng.random::<f64>().powi(2) * 10.0).collect();
            let (cal, test) = pool.split_at(n_cal);
            let tau = conformal_quantile(cal, 0.2).unwrap();
            total += test.iter().filter(|&&s| s < tau).count() as f64 / test.len() as f64;
        }
        let mean = total / 200.0;
        assert!(mean <= 0.2 + 2.0 / (n_cal as f64).sqrt(), "mean miss rate {mean}");
    }
}
