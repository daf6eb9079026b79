//! Fold-wise evaluation of help-trigger methods.
//!
//! Every method is scored under two regimes: per step against strong labels
//! and per episode against outcomes. Timing metrics (time to first help,
//! trigger counts and rates) are split by episode outcome.

mod methods;
mod report;

use serde::{Deserialize, Serialize};

pub use methods::{CpFactory, TransformerFactory};
pub use report::{
    render_report, AggregateRegime, AggregateTiming, FoldReport, MeanStd, MetricsReport,
    ReportAggregate, ReportFormat,
};

use crate::conformal::CpThreshold;
use crate::error::{Error, Result};
use crate::rollout::{split_folds, EpisodeRecord, StepRecord};

/// One step's help decision from any method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HelpDecision {
    pub help: bool,
    pub score: f64,
    /// Set when the step had to be truncated to fit the method.
    pub degraded: bool,
}

/// A help-trigger method under evaluation. Implementations must be
/// deterministic for fixed inputs.
pub trait HelpMethod: Send + Sync {
    fn name(&self) -> String;

    /// Token width the method scores at most, if it has one.
    fn max_tokens(&self) -> Option<usize> {
        None
    }

    fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision>;

    fn decide_episode(&self, episode: &EpisodeRecord) -> Result<Vec<HelpDecision>> {
        episode.steps.iter().map(|s| self.decide_step(s)).collect()
    }

    /// Episode failure probability, for methods that produce one. Such
    /// methods are judged per episode by `probability ≥ 0.5` instead of the
    /// any-trigger rule.
    fn episode_probability(&self, _episode: &EpisodeRecord) -> Result<Option<f64>> {
        Ok(None)
    }

    fn cp_threshold(&self) -> Option<CpThreshold> {
        None
    }
}

/// Builds a method from training episodes; used once per fold.
pub trait MethodFactory {
    fn name(&self) -> String;
    fn fit(&self, train: &[&EpisodeRecord], fold: usize) -> Result<Box<dyn HelpMethod>>;
}

/// A method's outputs on one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDecisions {
    pub steps: Vec<HelpDecision>,
    pub probability: Option<f64>,
}

impl EpisodeDecisions {
    pub fn flags(&self) -> Vec<bool> {
        self.steps.iter().map(|d| d.help).collect()
    }

    /// Episode-level prediction: probability ≥ 0.5 when available, else at
    /// least one trigger.
    pub fn predicts_failure(&self) -> bool {
        match self.probability {
            Some(p) => p >= 0.5,
            None => self.steps.iter().any(|d| d.help),
        }
    }
}

pub fn run_method(method: &dyn HelpMethod, episodes: &[&EpisodeRecord]) -> Result<Vec<EpisodeDecisions>> {
    episodes
        .iter()
        .map(|e| {
            let steps = method.decide_episode(e)?;
            if steps.len() != e.steps.len() {
                return Err(Error::validation(format!(
                    "method {} returned {} decisions for {} steps",
                    method.name(),
                    steps.len(),
                    e.steps.len()
                )));
            }
            Ok(EpisodeDecisions {
                steps,
                probability: method.episode_probability(e)?,
            })
        })
        .collect()
}

/// Binary confusion counts with "needs help" / "failure" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (pred, label) in pairs {
            c.add(pred, label);
        }
        c
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.total())
    }

    /// 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// 2PR/(P+R), or 0 when P+R = 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Confusion counts plus the metrics derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Confusion> for RegimeMetrics {
    fn from(c: Confusion) -> Self {
        RegimeMetrics {
            confusion: c,
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        }
    }
}

/// Step-level metrics against strong labels.
pub fn strong_metrics(episodes: &[&EpisodeRecord], decisions: &[EpisodeDecisions]) -> Result<RegimeMetrics> {
    let mut c = Confusion::default();
    for (e, d) in episodes.iter().zip(decisions) {
        for (label, dec) in e.strong_labels()?.into_iter().zip(&d.steps) {
            c.add(dec.help, label);
        }
    }
    Ok(c.into())
}

/// Episode-level metrics against outcomes.
pub fn weak_metrics(episodes: &[&EpisodeRecord], decisions: &[EpisodeDecisions]) -> RegimeMetrics {
    Confusion::from_pairs(
        episodes
            .iter()
            .zip(decisions)
            .map(|(e, d)| (d.predicts_failure(), e.weak_label)),
    )
    .into()
}

pub fn evaluate_strong(method: &dyn HelpMethod, episodes: &[&EpisodeRecord]) -> Result<RegimeMetrics> {
    for e in episodes {
        e.strong_labels()?;
    }
    strong_metrics(episodes, &run_method(method, episodes)?)
}

pub fn evaluate_weak(method: &dyn HelpMethod, episodes: &[&EpisodeRecord]) -> Result<RegimeMetrics> {
    Ok(weak_metrics(episodes, &run_method(method, episodes)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingMetrics {
    /// Mean 1-based index of the first trigger over failure episodes that
    /// triggered at all; absent when none did.
    pub ttfh_mean: Option<f64>,
    pub ttfh_std: Option<f64>,
    pub ttfh_episodes: usize,
    /// Failure episodes without any trigger.
    pub missed_failures: usize,
    pub success_episodes: usize,
    pub failure_episodes: usize,
    /// Mean number of triggers per episode.
    pub triggers_success: f64,
    pub triggers_failure: f64,
    /// Mean over episodes of (triggers / steps).
    pub trigger_rate_success: f64,
    pub trigger_rate_failure: f64,
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Timing metrics from per-episode trigger flags and outcomes.
pub fn timing_from_flags<'a>(episodes: impl IntoIterator<Item = (bool, &'a [bool])>) -> TimingMetrics {
    let mut ttfh = Vec::new();
    let mut missed = 0;
    let (mut counts_s, mut counts_f) = (Vec::new(), Vec::new());
    let (mut rates_s, mut rates_f) = (Vec::new(), Vec::new());
    for (failed, flags) in episodes {
        let count = flags.iter().filter(|&&f| f).count() as f64;
        let rate = if flags.is_empty() { 0.0 } else { count / flags.len() as f64 };
        if failed {
            match flags.iter().position(|&f| f) {
                Some(i) => ttfh.push((i + 1) as f64),
                None => missed += 1,
            }
            counts_f.push(count);
            rates_f.push(rate);
        } else {
            counts_s.push(count);
            rates_s.push(rate);
        }
    }
    let mean = |v: &[f64]| mean_std(v).map_or(0.0, |m| m.0);
    let t = mean_std(&ttfh);
    TimingMetrics {
        ttfh_mean: t.map(|m| m.0),
        ttfh_std: t.map(|m| m.1),
        ttfh_episodes: ttfh.len(),
        missed_failures: missed,
        success_episodes: counts_s.len(),
        failure_episodes: counts_f.len(),
        triggers_success: mean(&counts_s),
        triggers_failure: mean(&counts_f),
        trigger_rate_success: mean(&rates_s),
        trigger_rate_failure: mean(&rates_f),
    }
}

pub fn timing_of(episodes: &[&EpisodeRecord], decisions: &[EpisodeDecisions]) -> TimingMetrics {
    let flags: Vec<(bool, Vec<bool>)> = episodes
        .iter()
        .zip(decisions)
        .map(|(e, d)| (e.weak_label, d.flags()))
        .collect();
    timing_from_flags(flags.iter().map(|(f, v)| (*f, v.as_slice())))
}

pub fn timing_metrics(method: &dyn HelpMethod, episodes: &[&EpisodeRecord]) -> Result<TimingMetrics> {
    Ok(timing_of(episodes, &run_method(method, episodes)?))
}

/// Evaluates one fitted method on a test set under both regimes.
pub fn evaluate_fold(method: &dyn HelpMethod, fold: usize, train_len: usize, test: &[&EpisodeRecord]) -> Result<FoldReport> {
    let decisions = run_method(method, test)?;
    Ok(FoldReport {
        fold,
        train_episodes: train_len,
        test_episodes: test.len(),
        strong: strong_metrics(test, &decisions)?,
        weak: weak_metrics(test, &decisions),
        timing: timing_of(test, &decisions),
        cp_threshold: method.cp_threshold(),
    })
}

/// k-fold cross-validation: fit on k−1 folds, evaluate on the held-out one.
/// Folds run in order; errors carry the fold id.
pub fn cross_validate(
    dataset: &[EpisodeRecord],
    factory: &dyn MethodFactory,
    k: usize,
    seed: u64,
    dataset_id: &str,
) -> Result<MetricsReport> {
    let split = split_folds(dataset, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let run = || -> Result<FoldReport> {
            let (train, test) = split.partition(dataset, fold)?;
            let method = factory.fit(&train, fold)?;
            evaluate_fold(method.as_ref(), fold, train.len(), &test)
        };
        folds.push(run().map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?);
    }
    Ok(MetricsReport::new(factory.name(), dataset_id, k, seed, folds))
}

#[cfg(test)]
mod tests;
