//! Synthetic rollouts with a two-regime changepoint failure model.
//!
//! Each token's logits are `s · g` for a standard-normal vector `g` over the
//! vocabulary, so the sharpness `s` sets how peaked the distribution is.
//! Nominal steps draw `s` around the nominal concentration; once a failing
//! episode passes its onset step, every remaining step is degraded and draws
//! `s` around the (smaller) degraded concentration. Sharpness varies
//! log-normally per step and again per token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EpisodeRecord, Source, StepRecord};
use crate::error::{Error, Result};
use crate::features::TokenDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub top_k: usize,
    pub episodes_total: usize,
    pub failure_fraction: f64,
    /// Inclusive bounds on steps per episode.
    pub steps_range: (usize, usize),
    /// Inclusive bounds on tokens per step.
    pub tokens_range: (usize, usize),
    pub nominal_concentration: f64,
    pub degraded_concentration: f64,
    /// Failure onset as a fraction of episode length.
    pub onset_range: (f64, f64),
    /// Log-normal spread of the per-step sharpness.
    pub step_spread: f64,
    /// Log-normal spread of the per-token sharpness around its step's value.
    pub token_spread: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The reference desk-scale configuration.
    pub fn s1() -> Self {
        SynthConfig {
            vocab_size: 32,
            top_k: 10,
            episodes_total: 400,
            failure_fraction: 0.4,
            steps_range: (10, 40),
            tokens_range: (5, 24),
            nominal_concentration: 8.0,
            degraded_concentration: 1.5,
            onset_range: (0.2, 0.8),
            step_spread: 0.4,
            token_spread: 0.25,
            seed: 13,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.top_k == 0 || self.top_k > self.vocab_size {
            return fail(format!(
                "top_k must be in 1..={}, got {}",
                self.vocab_size, self.top_k
            ));
        }
        if self.episodes_total == 0 {
            return fail("episodes_total must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.failure_fraction) {
            return fail(format!("failure_fraction {} outside [0, 1]", self.failure_fraction));
        }
        for (name, (lo, hi)) in [("steps_range", self.steps_range), ("tokens_range", self.tokens_range)] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} [{lo}, {hi}] is empty or starts at 0"));
            }
        }
        let (on_lo, on_hi) = self.onset_range;
        if !(0.0..=1.0).contains(&on_lo) || !(0.0..=1.0).contains(&on_hi) || on_lo > on_hi {
            return fail(format!("onset_range [{on_lo}, {on_hi}] is not a sub-interval of [0, 1]"));
        }
        if !(self.degraded_concentration > 0.0 && self.nominal_concentration > 0.0) {
            return fail("concentrations must be positive".into());
        }
        if self.degraded_concentration >= self.nominal_concentration {
            return fail(format!(
                "degraded concentration {} must be below nominal {}",
                self.degraded_concentration, self.nominal_concentration
            ));
        }
        if !(self.step_spread >= 0.0 && self.token_spread >= 0.0) {
            return fail("sharpness spreads must be nonnegative".into());
        }
        Ok(())
    }

    pub fn failure_count(&self) -> usize {
        (self.episodes_total as f64 * self.failure_fraction).round() as usize
    }
}

/// Generates a labeled dataset; identical configs give identical output.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_fail = cfg.failure_count();
    let mut failing = vec![false; cfg.episodes_total];
    failing[..n_fail].iter_mut().for_each(|f| *f = true);
    // Fisher-Yates with our own stream so the layout is pinned to the seed.
    for i in (1..failing.len()).rev() {
        let j = rng.random_range(0..=i);
        failing.swap(i, j);
    }

    failing
        .iter()
        .enumerate()
        .map(|(e, &fails)| synth_episode(cfg, &mut rng, e, fails))
        .collect()
}

fn synth_episode(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    index: usize,
    fails: bool,
) -> Result<EpisodeRecord> {
    let n_steps = rng.random_range(cfg.steps_range.0..=cfg.steps_range.1);
    let onset = if fails {
        let frac = rng.random_range(cfg.onset_range.0..=cfg.onset_range.1);
        ((frac * n_steps as f64).floor() as usize).min(n_steps - 1)
    } else {
        n_steps
    };

    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let degraded = t >= onset;
        let kappa = if degraded {
            cfg.degraded_concentration
        } else {
            cfg.nominal_concentration
        };
        let z: f64 = StandardNormal.sample(rng);
        let step_sharpness = kappa * (cfg.step_spread * z).exp();
        let n_tokens = rng.random_range(cfg.tokens_range.0..=cfg.tokens_range.1);
        let tokens = (0..n_tokens)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                let s = step_sharpness * (cfg.token_spread * z).exp();
                let logits: Vec<f64> = (0..cfg.vocab_size)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(rng);
                        s * g
                    })
                    .collect();
                TokenDistribution::from_logits(logits)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut step = StepRecord::new(t, tokens).with_label(degraded);
        step.meta
            .insert("task_id".into(), format!("synthetic-{}", index % 10));
        steps.push(step);
    }

    Ok(EpisodeRecord {
        episode_id: format!("synth-{}-{index:05}", cfg.seed),
        weak_label: fails,
        source: Source::Synthetic,
        steps,
    })
}
