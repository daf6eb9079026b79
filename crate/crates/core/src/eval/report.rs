use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mean_std, RegimeMetrics, TimingMetrics};
use crate::conformal::CpThreshold;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,
    /// Per step against strong labels.
    pub strong: RegimeMetrics,
    /// Per episode against outcomes.
    pub weak: RegimeMetrics,
    pub timing: TimingMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp_threshold: Option<CpThreshold>,
}

/// Mean and population standard deviation across folds; a single fold has
/// std 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRegime {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateTiming {
    /// Over folds where at least one failure episode triggered.
    pub ttfh: Option<MeanStd>,
    pub missed_failures: MeanStd,
    pub triggers_success: MeanStd,
    pub triggers_failure: MeanStd,
    pub trigger_rate_success: MeanStd,
    pub trigger_rate_failure: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub strong: AggregateRegime,
    pub weak: AggregateRegime,
    pub timing: AggregateTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset_id: String,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    /// Absent when there are no folds.
    pub aggregate: Option<ReportAggregate>,
}

fn aggregate_regime(folds: &[FoldReport], pick: impl Fn(&FoldReport) -> &RegimeMetrics) -> Option<AggregateRegime> {
    let col = |f: &dyn Fn(&RegimeMetrics) -> f64| -> Option<MeanStd> {
        MeanStd::of(&folds.iter().map(|r| f(pick(r))).collect::<Vec<_>>())
    };
    Some(AggregateRegime {
        accuracy: col(&|m| m.accuracy)?,
        precision: col(&|m| m.precision)?,
        recall: col(&|m| m.recall)?,
        f1: col(&|m| m.f1)?,
    })
}

fn aggregate(folds: &[FoldReport]) -> Option<ReportAggregate> {
    let col = |f: &dyn Fn(&TimingMetrics) -> f64| -> Option<MeanStd> {
        MeanStd::of(&folds.iter().map(|r| f(&r.timing)).collect::<Vec<_>>())
    };
    let ttfh: Vec<f64> = folds.iter().filter_map(|r| r.timing.ttfh_mean).collect();
    Some(ReportAggregate {
        strong: aggregate_regime(folds, |r| &r.strong)?,
        weak: aggregate_regime(folds, |r| &r.weak)?,
        timing: AggregateTiming {
            ttfh: MeanStd::of(&ttfh),
            missed_failures: col(&|t| t.missed_failures as f64)?,
            triggers_success: col(&|t| t.triggers_success)?,
            triggers_failure: col(&|t| t.triggers_failure)?,
            trigger_rate_success: col(&|t| t.trigger_rate_success)?,
            trigger_rate_failure: col(&|t| t.trigger_rate_failure)?,
        },
    })
}

impl MetricsReport {
    pub fn new(method: String, dataset_id: &str, k: usize, seed: u64, folds: Vec<FoldReport>) -> Self {
        MetricsReport {
            method,
            dataset_id: dataset_id.to_string(),
            k,
            seed,
            aggregate: aggregate(&folds),
            folds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn cell(m: &MeanStd) -> String {
    format!("{:.4} ± {:.4}", m.mean, m.std)
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    if format == ReportFormat::Json {
        let mut s = serde_json::to_string_pretty(report)?;
        s.push('\n');
        return Ok(s);
    }
    let mut rows: Vec<(&str, &str, String)> = Vec::new();
    if let Some(a) = &report.aggregate {
        for (regime, r) in [("strong", &a.strong), ("weak", &a.weak)] {
            rows.push((regime, "accuracy", cell(&r.accuracy)));
            rows.push((regime, "precision", cell(&r.precision)));
            rows.push((regime, "recall", cell(&r.recall)));
            rows.push((regime, "f1", cell(&r.f1)));
        }
        let t = &a.timing;
        rows.push(("timing", "ttfh", t.ttfh.as_ref().map_or_else(|| "n/a".to_string(), cell)));
        rows.push(("timing", "missed_failures", cell(&t.missed_failures)));
        rows.push(("timing", "triggers_success", cell(&t.triggers_success)));
        rows.push(("timing", "triggers_failure", cell(&t.triggers_failure)));
        rows.push(("timing", "trigger_rate_success", cell(&t.trigger_rate_success)));
        rows.push(("timing", "trigger_rate_failure", cell(&t.trigger_rate_failure)));
    }
    let w0 = rows.iter().map(|r| r.0.len()).chain([6]).max().unwrap_or(6);
    let w1 = rows.iter().map(|r| r.1.len()).chain([6]).max().unwrap_or(6);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "method: {}  dataset: {}  folds: {}  seed: {}",
        report.method, report.dataset_id, report.k, report.seed
    );
    let _ = writeln!(out, "{:<w0$}  {:<w1$}  mean ± std", "regime", "metric");
    for (a, b, c) in rows {
        let _ = writeln!(out, "{a:<w0$}  {b:<w1$}  {c}");
    }
    Ok(out)
}
