//! Finite-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::TrainBatch;
use super::StepClassifier;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Coordinates with the largest analytic gradient checked per tensor.
const TOP_COORDS: usize = 8;
/// Additional uniformly sampled coordinates per tensor.
const RANDOM_COORDS: usize = 8;
/// Below this magnitude central differences are dominated by rounding
/// (roughly machine epsilon times the loss over the step), so such
/// coordinates are compared in absolute terms instead. Key-projection biases
/// land here: softmax is invariant to them and their gradient is zero.
pub const GRAD_NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct StrongSample {
    pub features: FeatureMatrix,
    pub needs_help: bool,
}

#[derive(Debug, Clone)]
pub struct WeakSample {
    pub steps: Vec<FeatureMatrix>,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub enum GradCheckBatch {
    /// Mean step BCE.
    Strong(Vec<StrongSample>),
    /// Mean episode BCE on pooled step logits.
    Weak { samples: Vec<WeakSample>, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per tensor, in checkpoint order.
    pub per_group: Vec<(String, f64)>,
    pub coordinates_checked: usize,
    /// Coordinates where both gradients were below [`GRAD_NOISE_FLOOR`].
    pub coordinates_at_floor: usize,
    /// Largest |analytic − numeric| among those coordinates.
    pub max_abs_error_at_floor: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-12)
}

/// Compares the analytic gradient of the loss with central differences
/// for a sample of coordinates in every tensor. Dropout is disabled.
pub fn grad_check(model: &StepClassifier, batch: &GradCheckBatch, eps: f64) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {eps}")));
    }
    let width = model.config().max_tokens;
    let tb = match batch {
        GradCheckBatch::Strong(samples) => {
            if samples.is_empty() {
                return Err(Error::validation("gradient check needs at least one sample"));
            }
            TrainBatch::steps(
                samples.iter().map(|s| &s.features),
                samples.iter().map(|s| s.needs_help).collect(),
                width,
            )?
        }
        GradCheckBatch::Weak { samples, beta } => {
            if samples.is_empty() {
                return Err(Error::validation("gradient check needs at least one sample"));
            }
            if !(beta.is_finite() && *beta > 0.0) {
                return Err(Error::config(format!("pooling temperature must be positive, got {beta}")));
            }
            TrainBatch::episodes(samples.iter().map(|s| (s.steps.as_slice(), s.failed)), *beta, width)?
        }
    };

    let mut net = model.net().clone();
    let mut grad = net.zeros_like();
    tb.loss(&net, None, 1.0, Some(&mut grad));
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(name, _, v)| (name, v.to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x9d);
    let mut per_group = Vec::with_capacity(analytic.len());
    let mut checked = 0;
    let mut at_floor = 0;
    let mut floor_err = 0.0f64;
    for (t, (name, g)) in analytic.iter().enumerate() {
        let mut coords: Vec<usize> = (0..g.len()).collect();
        coords.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        coords.truncate(TOP_COORDS);
        let extra = RANDOM_COORDS.min(g.len());
        coords.extend(sample(&mut rng, g.len(), extra));
        coords.sort_unstable();
        coords.dedup();

        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = net.tensors_mut()[t][i];
            net.tensors_mut()[t][i] = orig + eps;
            let up = tb.loss(&net, None, 1.0, None);
            net.tensors_mut()[t][i] = orig - eps;
            let down = tb.loss(&net, None, 1.0, None);
            net.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if g[i].abs().max(numeric.abs()) < GRAD_NOISE_FLOOR {
                at_floor += 1;
                floor_err = floor_err.max((g[i] - numeric).abs());
            } else {
                worst = worst.max(rel_error(g[i], numeric));
            }
        }
        checked += coords.len();
        per_group.push((name.clone(), worst));
    }
    let max_rel_error = per_group.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_group,
        coordinates_checked: checked,
        coordinates_at_floor: at_floor,
        max_abs_error_at_floor: floor_err,
    })
}
