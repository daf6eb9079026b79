use std::sync::Mutex;

use proptest::prelude::*;

use super::*;
use crate::features::TokenDistribution;
use crate::rollout::Source;

/// Triggers on steps whose `pred` metadata is "1".
struct MetaMethod;

impl HelpMethod for MetaMethod {
    fn name(&self) -> String {
        "meta".into()
    }

    fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision> {
        let help = step.meta.get("pred").map(String::as_str) == Some("1");
        Ok(HelpDecision {
            help,
            score: f64::from(u8::from(help)),
            degraded: false,
        })
    }
}

/// Predicts the step's own strong label.
struct Oracle;

impl HelpMethod for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn decide_step(&self, step: &StepRecord) -> Result<HelpDecision> {
        let help = step.strong_label.unwrap_or(false);
        Ok(HelpDecision { help, score: 0.0, degraded: false })
    }
}

struct Constant(bool);

impl HelpMethod for Constant {
    fn name(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn decide_step(&self, _step: &StepRecord) -> Result<HelpDecision> {
        Ok(HelpDecision { help: self.0, score: 0.0, degraded: false })
    }
}

fn step(t: usize, label: bool, pred: bool) -> StepRecord {
    let mut s = StepRecord::new(t, vec![TokenDistribution::from_logits(vec![0.0, 1.0]).unwrap()]).with_label(label);
    s.meta.insert("pred".into(), if pred { "1" } else { "0" }.into());
    s
}

fn episode(id: &str, failed: bool, labels: &[bool], preds: &[bool]) -> EpisodeRecord {
    EpisodeRecord {
        episode_id: id.into(),
        weak_label: failed,
        source: Source::Synthetic,
        steps: labels
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(t, (&y, &p))| step(t, y, p))
            .collect(),
    }
}

fn flags(bits: &[u8]) -> Vec<bool> {
    bits.iter().map(|&b| b == 1).collect()
}

#[test]
fn strong_confusion_example() {
    let e = episode("a", true, &flags(&[1, 0, 0, 1]), &flags(&[1, 0, 1, 1]));
    let m = evaluate_strong(&MetaMethod, &[&e]).unwrap();
    assert_eq!(m.confusion, Confusion { tp: 2, fp: 1, fn_: 0, tn: 1 });
    assert_eq!(m.accuracy, 0.75);
    assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.recall, 1.0);
    assert!((m.f1 - 0.8).abs() < 1e-15);
}

#[test]
fn perfect_and_silent_predictors() {
    let e = episode("a", true, &flags(&[0, 1, 1, 0, 1]), &flags(&[0; 5]));
    let m = evaluate_strong(&Oracle, &[&e]).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let m = evaluate_strong(&Constant(false), &[&e]).unwrap();
    assert_eq!((m.recall, m.f1), (0.0, 0.0));
}

#[test]
fn strong_evaluation_requires_labels() {
    let mut e = episode("a", true, &flags(&[0, 1]), &flags(&[0, 1]));
    e.steps[1].strong_label = None;
    assert!(evaluate_strong(&MetaMethod, &[&e]).is_err());
}

#[test]
fn weak_examples() {
    let ok: Vec<EpisodeRecord> = (0..3)
        .map(|i| episode(&format!("s{i}"), false, &flags(&[0, 0]), &flags(&[0, 0])))
        .collect();
    let refs: Vec<&EpisodeRecord> = ok.iter().collect();
    assert_eq!(evaluate_weak(&Constant(false), &refs).unwrap().accuracy, 1.0);

    let late = episode("f", true, &flags(&[0, 0, 1, 1]), &flags(&[0, 0, 1, 0]));
    assert_eq!(evaluate_weak(&MetaMethod, &[&late]).unwrap().confusion.tp, 1);

    let eps = [
        episode("a", true, &flags(&[1]), &flags(&[1])),
        episode("b", true, &flags(&[1]), &flags(&[0])),
        episode("c", false, &flags(&[0]), &flags(&[0])),
        episode("d", false, &flags(&[0]), &flags(&[1])),
    ];
    let refs: Vec<&EpisodeRecord> = eps.iter().collect();
    let m = evaluate_weak(&MetaMethod, &refs).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
}

#[test]
fn episode_probability_overrides_trigger_rule() {
    let d = EpisodeDecisions {
        steps: vec![HelpDecision { help: true, score: 0.9, degraded: false }],
        probability: Some(0.3),
    };
    assert!(!d.predicts_failure());
    let d = EpisodeDecisions { probability: Some(0.5), steps: vec![] };
    assert!(d.predicts_failure());
}

#[test]
fn timing_examples() {
    let f = flags(&[0, 0, 1, 0, 1]);
    let t = timing_from_flags([(true, f.as_slice())]);
    assert_eq!(t.ttfh_mean, Some(3.0));
    assert_eq!(t.triggers_failure, 2.0);
    assert!((t.trigger_rate_failure - 0.4).abs() < 1e-15);

    let s = flags(&[0, 0, 0]);
    let t = timing_from_flags([(false, s.as_slice())]);
    assert_eq!((t.triggers_success, t.trigger_rate_success), (0.0, 0.0));
    assert_eq!(t.ttfh_mean, None);

    let a = flags(&[1, 0, 0, 0]);
    let b = flags(&[0, 0, 0, 1]);
    let never = flags(&[0, 0]);
    let t = timing_from_flags([(true, a.as_slice()), (true, b.as_slice()), (true, never.as_slice())]);
    assert_eq!(t.ttfh_mean, Some(2.5));
    assert_eq!(t.ttfh_std, Some(1.5));
    assert_eq!((t.ttfh_episodes, t.missed_failures, t.failure_episodes), (2, 1, 3));
}

fn tiny_dataset(n: usize) -> Vec<EpisodeRecord> {
    (0..n)
        .map(|i| {
            let failed = i % 2 == 0;
            let labels = if failed { flags(&[0, 1, 1]) } else { flags(&[0, 0, 0]) };
            episode(&format!("e{i}"), failed, &labels, &flags(&[0, 0, 0]))
        })
        .collect()
}

struct ConstantFactory {
    help: bool,
    seen: Mutex<Vec<Vec<String>>>,
}

impl MethodFactory for ConstantFactory {
    fn name(&self) -> String {
        "constant".into()
    }

    fn fit(&self, train: &[&EpisodeRecord], _fold: usize) -> Result<Box<dyn HelpMethod>> {
        self.seen
            .lock()
            .unwrap()
            .push(train.iter().map(|e| e.episode_id.clone()).collect());
        Ok(Box::new(Constant(self.help)))
    }
}

#[test]
fn two_folds_on_four_episodes() {
    let data = tiny_dataset(4);
    let factory = ConstantFactory { help: true, seen: Mutex::new(vec![]) };
    let r = cross_validate(&data, &factory, 2, 1, "tiny").unwrap();
    assert_eq!(r.folds.len(), 2);
    let seen = factory.seen.into_inner().unwrap();
    assert_eq!(seen.len(), 2);
    // the training sets are complementary, so the test sets are disjoint
    let mut all: Vec<&String> = seen.iter().flatten().collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 4);
    assert!(seen.iter().all(|s| s.len() == 2));
    for f in &r.folds {
        assert_eq!(f.test_episodes, 2);
        // one failure (2 positive steps of 3) and one success per fold
        assert_eq!(f.strong.confusion, Confusion { tp: 2, fp: 4, fn_: 0, tn: 0 });
        assert!((f.strong.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.weak.accuracy, 0.5);
        assert_eq!(f.timing.ttfh_mean, Some(1.0));
        assert_eq!(f.timing.trigger_rate_success, 1.0);
    }
    let a = r.aggregate.unwrap();
    assert_eq!(a.weak.accuracy.std, 0.0);
}

struct Failing;

impl MethodFactory for Failing {
    fn name(&self) -> String {
        "failing".into()
    }

    fn fit(&self, _train: &[&EpisodeRecord], _fold: usize) -> Result<Box<dyn HelpMethod>> {
        Err(Error::validation("no positives"))
    }
}

#[test]
fn fold_errors_name_the_fold() {
    let data = tiny_dataset(4);
    match cross_validate(&data, &Failing, 2, 0, "tiny") {
        Err(Error::Fold { fold: 0, source }) => assert!(source.is_validation()),
        other => panic!("unexpected {other:?}"),
    }
    assert!(cross_validate(&data, &Failing, 5, 0, "tiny").is_err());
}

#[test]
fn empty_report_renders_header_only() {
    let r = MetricsReport::new("m".into(), "d", 10, 0, vec![]);
    let text = render_report(&r, ReportFormat::Text).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().contains("mean ± std"));
}

#[test]
fn report_json_round_trips() {
    let data = tiny_dataset(6);
    let factory = ConstantFactory { help: false, seen: Mutex::new(vec![]) };
    let r = cross_validate(&data, &factory, 3, 4, "tiny").unwrap();
    let json = render_report(&r, ReportFormat::Json).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["method", "dataset_id", "k", "seed", "folds", "aggregate"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(v["folds"][0]["strong"].get("fn").is_some());
    let text = render_report(&r, ReportFormat::Text).unwrap();
    assert!(text.contains("f1") && text.contains(" ± "));
}

proptest! {
    #[test]
    fn confusion_identities(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let c = Confusion::from_pairs(pairs.iter().copied());
        prop_assert_eq!(c.total(), pairs.len());
        let m = RegimeMetrics::from(c);
        if c.tp + c.fp > 0 {
            prop_assert_eq!(m.precision, c.tp as f64 / (c.tp + c.fp) as f64);
        }
        if m.precision + m.recall > 0.0 {
            prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-15);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
    }

    #[test]
    fn weak_regime_is_the_any_trigger_reduction(
        eps in prop::collection::vec((any::<bool>(), prop::collection::vec(any::<bool>(), 1..8)), 1..20)
    ) {
        let data: Vec<EpisodeRecord> = eps
            .iter()
            .enumerate()
            .map(|(i, (failed, preds))| episode(&format!("p{i}"), *failed, &vec![false; preds.len()], preds))
            .collect();
        let refs: Vec<&EpisodeRecord> = data.iter().collect();
        let m = evaluate_weak(&MetaMethod, &refs).unwrap();
        let expected = Confusion::from_pairs(eps.iter().map(|(f, p)| (p.iter().any(|&x| x), *f)));
        prop_assert_eq!(m.confusion, expected);
    }

    #[test]
    fn ttfh_is_one_based_first_flag(len in 1usize..30, first in 0usize..30, tail in prop::collection::vec(any::<bool>(), 30)) {
        let first = first % len;
        let mut f = vec![false; len];
        f[first] = true;
        f[first + 1..].copy_from_slice(&tail[first + 1..len]);
        let t = timing_from_flags([(true, f.as_slice())]);
        prop_assert_eq!(t.ttfh_mean, Some((first + 1) as f64));
    }
}
