//! Landscape instrumentation: gradient-shift measurement across layer
//! updates, probes along the gradient direction, and activation moments.
//!
//! Everything here is evaluation-only. Probes work on an explicit parameter
//! vector against a [`LossSurface`] and never mutate the surface's state, so
//! a training run can interleave measurements freely.

use crate::graph::EvalError;
use crate::network::{
    flatten_all, flatten_layers, params_add_scaled, NetworkEval, Params,
};
use crate::tensor::Tensor;

/// A scalar loss over a structured parameter vector. Implemented by
/// [`NetworkEval`] for real networks and by closures-in-structs in tests.
pub trait LossSurface {
    fn loss(&mut self, params: &Params) -> Result<f64, EvalError>;
    fn loss_and_grads(&mut self, params: &Params) -> Result<(f64, Params), EvalError>;
}

/// Gradient shift of one trainable layer at one step: the l2 distance and
/// cosine between the layer's gradient before and after the preceding layers
/// take their update. The cosine is `None` when either gradient is zero.
#[derive(Debug, Clone)]
pub struct IcsRecord {
    pub step: usize,
    pub layer: usize,
    pub l2_diff: f64,
    pub cos_angle: Option<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    // Rounding can push the ratio a hair outside [-1, 1].
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Measures, for every trainable bundle, how much its gradient moves when all
/// earlier bundles are replaced by their post-update values `W - lr * G`.
/// The first bundle has no earlier updates, so its two gradients coincide by
/// construction; it is still evaluated rather than special-cased.
pub fn measure_ics(
    surface: &mut dyn LossSurface,
    params: &Params,
    bundle_groups: &[Vec<usize>],
    lr: f64,
    step: usize,
) -> Result<Vec<IcsRecord>, EvalError> {
    let (_, grads) = surface.loss_and_grads(params)?;
    let updated = params_add_scaled(params, &grads, -lr);
    let mut records = Vec::with_capacity(bundle_groups.len());
    for (bi, bundle) in bundle_groups.iter().enumerate() {
        let mut mixed = params.clone();
        for earlier in &bundle_groups[..bi] {
            for &li in earlier {
                mixed[li] = updated[li].clone();
            }
        }
        let (_, grads_mixed) = surface.loss_and_grads(&mixed)?;
        let g = flatten_layers(&grads, bundle);
        let g_prime = flatten_layers(&grads_mixed, bundle);
        let diff: Vec<f64> = g
            .iter()
            .zip(g_prime.iter())
            .map(|(a, b)| a - b)
            .collect();
        let l2_diff = l2(&diff);
        // Bit-identical gradients (no preceding update, or lr = 0) have
        // cosine exactly 1; the quotient form would round.
        let cos_angle = if l2_diff == 0.0 && l2(&g) > 0.0 {
            Some(1.0)
        } else {
            cosine(&g, &g_prime)
        };
        records.push(IcsRecord {
            step,
            layer: bi,
            l2_diff,
            cos_angle,
        });
    }
    Ok(records)
}

/// Loss and gradient behavior along the gradient direction at one step.
/// Entry `i` describes the point `theta - multipliers[i] * lr * g`; `None`
/// marks a probe point where the evaluation was non-finite.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub step: usize,
    pub base_loss: f64,
    pub multipliers: Vec<f64>,
    pub losses: Vec<Option<f64>>,
    pub grad_l2_diffs: Vec<Option<f64>>,
    /// max over probed points of ||grad(theta') - grad(theta)|| / ||theta' - theta||.
    pub effective_beta: Option<f64>,
}

impl ProbeReport {
    /// (min, median, max) over the finite probed losses.
    pub fn loss_spread(&self) -> Option<(f64, f64, f64)> {
        let mut finite: Vec<f64> = self.losses.iter().flatten().copied().collect();
        if finite.is_empty() {
            return None;
        }
        finite.sort_by(|a, b| a.total_cmp(b));
        let median = finite[finite.len() / 2];
        Some((finite[0], median, *finite.last().unwrap()))
    }
}

/// Default probe multipliers for full-batch linear-chain runs: log-spaced
/// over [1/100, 30] times the step size.
pub fn log_multipliers(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default probe multipliers for minibatch MLP runs: linear over [1/2, 4]
/// times the step size.
pub fn linear_multipliers(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(count >= 2 && hi > lo);
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Walks along the gradient direction with the given step multipliers and
/// records the loss and gradient change at each probed point. Purely
/// evaluative: the caller's parameters are never modified.
pub fn probe_landscape(
    surface: &mut dyn LossSurface,
    params: &Params,
    lr: f64,
    multipliers: &[f64],
    step: usize,
) -> Result<ProbeReport, EvalError> {
    assert!(
        multipliers.windows(2).all(|w| w[0] < w[1]),
        "multipliers must be sorted ascending"
    );
    assert!(multipliers.iter().all(|&a| a > 0.0));
    let (base_loss, grads) = surface.loss_and_grads(params)?;
    let g_flat = flatten_all(&grads);
    let g_norm = l2(&g_flat);
    let mut losses = Vec::with_capacity(multipliers.len());
    let mut diffs = Vec::with_capacity(multipliers.len());
    let mut beta: Option<f64> = None;
    for &alpha in multipliers {
        if g_norm == 0.0 {
            // Zero gradient: every probe lands on the same point.
            losses.push(Some(base_loss));
            diffs.push(Some(0.0));
            continue;
        }
        let probed = params_add_scaled(params, &grads, -alpha * lr);
        match surface.loss_and_grads(&probed) {
            Ok((loss, probed_grads)) => {
                let pg = flatten_all(&probed_grads);
                let diff_norm = l2(&g_flat
                    .iter()
                    .zip(pg.iter())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<f64>>());
                let distance = alpha * lr * g_norm;
                let ratio = diff_norm / distance;
                beta = Some(beta.map_or(ratio, |b: f64| b.max(ratio)));
                losses.push(Some(loss));
                diffs.push(Some(diff_norm));
            }
            Err(EvalError::NonFinite { .. }) => {
                losses.push(None);
                diffs.push(None);
            }
            Err(other) => return Err(other),
        }
    }
    Ok(ProbeReport {
        step,
        base_loss,
        multipliers: multipliers.to_vec(),
        losses,
        grad_l2_diffs: diffs,
        effective_beta: beta,
    })
}

/// Batch mean and population variance of selected units of one layer's
/// activations.
#[derive(Debug, Clone)]
pub struct ActivationMomentRecord {
    pub step: usize,
    pub layer: usize,
    pub unit: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Evaluates the network once and reports the first two moments of the
/// sampled units at the given layer.
pub fn capture_activation_moments(
    eval: &mut NetworkEval,
    params: &Params,
    layer: usize,
    units: &[usize],
    step: usize,
) -> Result<Vec<ActivationMomentRecord>, EvalError> {
    eval.loss(params)?;
    let out: &Tensor = eval
        .graph
        .layer_output(layer)
        .expect("forward pass populates layer outputs");
    let m = out.rows();
    let mut records = Vec::with_capacity(units.len());
    for &unit in units {
        assert!(unit < out.cols(), "unit {unit} out of range");
        let mean = (0..m).map(|b| out.at(b, unit)).sum::<f64>() / m as f64;
        let variance = (0..m)
            .map(|b| {
                let dev = out.at(b, unit) - mean;
                dev * dev
            })
            .sum::<f64>()
            / m as f64;
        records.push(ActivationMomentRecord {
            step,
            layer,
            unit,
            mean,
            variance,
        });
    }
    Ok(records)
}
