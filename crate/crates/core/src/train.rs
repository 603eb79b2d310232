//! Gradient descent over a [`NetworkState`]: the usual simultaneous update,
//! a sequential per-layer variant that recomputes the full gradient before
//! updating each layer (input to output), and a reduced-rate control that
//! divides the learning rate by the number of trainable layers.
//!
//! Divergence (non-finite values or loss above a threshold) is a recorded
//! outcome, not an error: the trace carries the step at which it happened.

use thiserror::Error;

use crate::graph::EvalError;
use crate::network::{
    bundles, flatten_layers, sample_network_noise, Dataset, LossKind, NetworkError, NetworkEval,
    NetworkState, Params,
};
use crate::probe::LossSurface;
use crate::rng::Rng;

const NOISE_STREAM: u64 = 4;
const SHUFFLE_STREAM: u64 = 5;

/// Loss value above which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Compute all layer gradients at the current parameters, then update
    /// every layer at once.
    Simultaneous,
    /// Update layers one at a time from input to output, recomputing the full
    /// gradient before each layer's update. Costs one gradient evaluation per
    /// trainable layer per step.
    Adjusted,
    /// Simultaneous updates with the learning rate divided by the number of
    /// trainable layers.
    ReducedLr,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Simultaneous => "simultaneous",
            TrainMode::Adjusted => "adjusted",
            TrainMode::ReducedLr => "reduced_lr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Full,
    Mini(usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: BatchMode,
    pub mode: TrainMode,
    pub seed: u64,
    /// Record a gradient snapshot every N steps (0 = never).
    pub snapshot_every: usize,
    /// Give normalization scale/shift parameters their own update slot in the
    /// sequential schedule instead of bundling them with the preceding dense
    /// layer.
    pub norm_params_separate: bool,
    pub divergence_threshold: f64,
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize) -> Self {
        TrainConfig {
            lr,
            steps,
            batch: BatchMode::Full,
            mode: TrainMode::Simultaneous,
            seed: 0,
            snapshot_every: 0,
            norm_params_separate: false,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

/// Flattened per-bundle gradients at one step.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub step: usize,
    pub per_layer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    /// Loss at the start of each completed step.
    pub losses: Vec<f64>,
    pub snapshots: Vec<GradientSnapshot>,
    /// Step at which training stopped due to divergence, if any.
    pub diverged_at: Option<usize>,
    /// Number of full gradient evaluations spent on updates.
    pub grad_evals: u64,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean of the recorded per-step losses.
    pub fn loss_auc(&self) -> Option<f64> {
        if self.losses.is_empty() {
            None
        } else {
            Some(self.losses.iter().sum::<f64>() / self.losses.len() as f64)
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
}

/// Everything a per-step hook may look at. Hooks run before the step's
/// parameter update, i.e. they see the state the update will be computed
/// from, with the step's batch and noise already bound in `surface`.
pub struct StepCtx<'a> {
    pub step: usize,
    pub params: &'a Params,
    pub surface: &'a mut NetworkEval,
    pub bundle_groups: &'a [Vec<usize>],
    /// Effective learning rate of the run (after any reduced-rate scaling).
    pub lr: f64,
}

pub trait TrainHook {
    fn on_step(&mut self, ctx: &mut StepCtx) -> Result<(), EvalError>;
}

/// One simultaneous gradient-descent step: gradients for every bundle at the
/// current parameters, then `W <- W - lr * G` for all of them at once.
/// Returns the snapshot of per-bundle gradients and the pre-update loss.
pub fn step_simultaneous(
    surface: &mut NetworkEval,
    params: &mut Params,
    bundle_groups: &[Vec<usize>],
    lr: f64,
    step: usize,
) -> Result<(GradientSnapshot, f64), EvalError> {
    let (loss, grads) = surface.loss_and_grads(params)?;
    let snapshot = GradientSnapshot {
        step,
        per_layer: bundle_groups
            .iter()
            .map(|b| flatten_layers(&grads, b))
            .collect(),
    };
    apply_update(params, &grads, bundle_groups, lr, None);
    Ok((snapshot, loss))
}

/// One sequential step: for each bundle in input-to-output order, recompute
/// the full gradient at the current (partially updated) parameters and update
/// only that bundle. Returns the loss at the start of the step and the number
/// of gradient evaluations spent.
pub fn step_adjusted(
    surface: &mut NetworkEval,
    params: &mut Params,
    bundle_groups: &[Vec<usize>],
    lr: f64,
) -> Result<(f64, u64), EvalError> {
    let mut first_loss = None;
    for bi in 0..bundle_groups.len() {
        let (loss, grads) = surface.loss_and_grads(params)?;
        if first_loss.is_none() {
            first_loss = Some(loss);
        }
        apply_update(params, &grads, bundle_groups, lr, Some(bi));
    }
    Ok((
        first_loss.expect("at least one bundle"),
        bundle_groups.len() as u64,
    ))
}

fn apply_update(
    params: &mut Params,
    grads: &Params,
    bundle_groups: &[Vec<usize>],
    lr: f64,
    only_bundle: Option<usize>,
) {
    for (bi, bundle) in bundle_groups.iter().enumerate() {
        if let Some(target) = only_bundle {
            if bi != target {
                continue;
            }
        }
        for &li in bundle {
            for (p, g) in params[li].iter_mut().zip(grads[li].iter()) {
                *p = p.add_scaled(g, -lr).expect("finite update");
            }
        }
    }
}

/// Runs gradient descent per the config, firing hooks before every step's
/// update. Stops early (with the flag set) when the loss exceeds the
/// divergence threshold or an evaluation produces a non-finite value.
pub fn train(
    net: &mut NetworkState,
    data: &Dataset,
    loss_kind: LossKind,
    cfg: &TrainConfig,
    hooks: &mut [&mut dyn TrainHook],
) -> Result<TrainTrace, TrainError> {
    if !(cfg.lr >= 0.0) && cfg.steps > 0 {
        return Err(TrainError::BadConfig(format!(
            "learning rate must be nonnegative, got {}",
            cfg.lr
        )));
    }
    let mut trace = TrainTrace::default();
    if cfg.steps == 0 {
        return Ok(trace);
    }
    let bundle_groups = bundles(net, cfg.norm_params_separate);
    let lr = match cfg.mode {
        TrainMode::ReducedLr => cfg.lr / bundle_groups.len() as f64,
        _ => cfg.lr,
    };
    let batch_size = match cfg.batch {
        BatchMode::Full => data.len(),
        BatchMode::Mini(bs) => {
            if bs == 0 || bs > data.len() {
                return Err(TrainError::BadConfig(format!(
                    "batch size {bs} out of range for dataset of {}",
                    data.len()
                )));
            }
            bs
        }
    };
    let batches_per_epoch = data.len() / batch_size;
    let noise_rng = Rng::new(cfg.seed).split(&[NOISE_STREAM]);
    let shuffle_rng = Rng::new(cfg.seed).split(&[SHUFFLE_STREAM]);

    let mut params = net.params();
    let (x0, t0) = match cfg.batch {
        BatchMode::Full => (data.inputs.clone(), data.targets.clone()),
        BatchMode::Mini(_) => data.gather(&(0..batch_size).collect::<Vec<_>>()),
    };
    let mut surface = NetworkEval::new(net, loss_kind, x0, t0)?;
    let mut order: Vec<usize> = (0..data.len()).collect();

    'steps: for step in 0..cfg.steps {
        if let BatchMode::Mini(_) = cfg.batch {
            let in_epoch = step % batches_per_epoch;
            if in_epoch == 0 {
                let epoch = (step / batches_per_epoch) as u64;
                order = (0..data.len()).collect();
                let mut r = shuffle_rng.split(&[epoch]);
                r.shuffle(&mut order);
            }
            let idx = &order[in_epoch * batch_size..(in_epoch + 1) * batch_size];
            let (x, t) = data.gather(idx);
            surface.set_batch(x, t);
        }
        surface.set_noise(sample_network_noise(net, &noise_rng, batch_size, step as u64));

        {
            let mut ctx = StepCtx {
                step,
                params: &params,
                surface: &mut surface,
                bundle_groups: &bundle_groups,
                lr,
            };
            for hook in hooks.iter_mut() {
                match hook.on_step(&mut ctx) {
                    Ok(()) => {}
                    Err(EvalError::NonFinite { .. }) => {
                        trace.diverged_at = Some(step);
                        break 'steps;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        let step_result = match cfg.mode {
            TrainMode::Simultaneous | TrainMode::ReducedLr => {
                step_simultaneous(&mut surface, &mut params, &bundle_groups, lr, step).map(
                    |(snapshot, loss)| {
                        let keep = cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0;
                        (loss, 1u64, keep.then_some(snapshot))
                    },
                )
            }
            TrainMode::Adjusted => step_adjusted(&mut surface, &mut params, &bundle_groups, lr)
                .map(|(loss, evals)| (loss, evals, None)),
        };
        match step_result {
            Ok((loss, evals, snapshot)) => {
                trace.losses.push(loss);
                trace.grad_evals += evals;
                if let Some(s) = snapshot {
                    trace.snapshots.push(s);
                }
                if loss > cfg.divergence_threshold {
                    trace.diverged_at = Some(step);
                    break;
                }
            }
            Err(EvalError::NonFinite { .. }) => {
                trace.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    net.set_params(params);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_dln, build_mlp, DlnConfig, MlpConfig, NormSpec};
    use crate::tensor::Tensor;

    fn scalar_chain(w1: f64, w2: f64, x: f64, t: f64) -> (NetworkState, Dataset) {
        let mut model = build_dln(
            &DlnConfig {
                depth: 2,
                dim: 1,
                n: 1,
                ..DlnConfig::default()
            },
            0,
        )
        .unwrap();
        model.net.layers[0].params[0] = Tensor::new(vec![1, 1], vec![w1]).unwrap();
        model.net.layers[1].params[0] = Tensor::new(vec![1, 1], vec![w2]).unwrap();
        let data = Dataset {
            inputs: Tensor::new(vec![1, 1], vec![x]).unwrap(),
            targets: Tensor::new(vec![1, 1], vec![t]).unwrap(),
        };
        (model.net, data)
    }

    #[test]
    fn zero_steps_leaves_network_untouched() {
        let mut model = build_dln(
            &DlnConfig {
                depth: 2,
                dim: 2,
                n: 4,
                ..DlnConfig::default()
            },
            1,
        )
        .unwrap();
        let before = model.net.params();
        let trace = train(
            &mut model.net,
            &model.data,
            model.loss,
            &TrainConfig::new(0.1, 0),
            &mut [],
        )
        .unwrap();
        assert!(trace.losses.is_empty());
        for (a, b) in before.iter().zip(model.net.params().iter()) {
            assert_eq!(a[0].data(), b[0].data());
        }
    }

    #[test]
    fn one_layer_scalar_reaches_minimum_in_one_step() {
        // L = (w - 1)^2 realized as x = 1, t = 1: mean over one sample of
        // (w*1 - 1)^2; gradient 2(w-1); step 0.5 from w=0 lands on w=1.
        let mut model = build_dln(
            &DlnConfig {
                depth: 1,
                dim: 1,
                n: 1,
                ..DlnConfig::default()
            },
            0,
        )
        .unwrap();
        model.net.layers[0].params[0] = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let data = Dataset {
            inputs: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            targets: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        };
        let trace = train(
            &mut model.net,
            &data,
            model.loss,
            &TrainConfig::new(0.5, 1),
            &mut [],
        )
        .unwrap();
        assert_eq!(trace.losses, vec![1.0]);
        assert_eq!(model.net.layers[0].params[0].data(), &[1.0]);
    }

    #[test]
    fn zero_lr_step_keeps_parameters_and_populates_snapshot() {
        let (net, data) = scalar_chain(0.8, -1.1, 1.5, 2.0);
        let mut surface = NetworkEval::new(
            &net,
            LossKind::MeanSquaredError,
            data.inputs.clone(),
            data.targets.clone(),
        )
        .unwrap();
        let mut params = net.params();
        let groups = bundles(&net, false);
        let (snapshot, _) =
            step_simultaneous(&mut surface, &mut params, &groups, 0.0, 7).unwrap();
        assert_eq!(snapshot.step, 7);
        assert_eq!(snapshot.per_layer.len(), 2);
        assert!(snapshot.per_layer.iter().all(|g| !g.is_empty()));
        assert_eq!(params[0][0].data(), net.layers[0].params[0].data());
        assert_eq!(params[1][0].data(), net.layers[1].params[0].data());
    }

    #[test]
    fn adjusted_two_layer_matches_hand_computation() {
        let (w1, w2, x, t, lr) = (0.8, -1.1, 1.5, 2.0, 0.05);
        let (mut net, data) = scalar_chain(w1, w2, x, t);
        let cfg = TrainConfig {
            mode: TrainMode::Adjusted,
            ..TrainConfig::new(lr, 1)
        };
        let trace = train(&mut net, &data, LossKind::MeanSquaredError, &cfg, &mut []).unwrap();

        // Sequential pencil-and-paper: e = x w1 w2 - t, L = e^2.
        let e = x * w1 * w2 - t;
        let g1 = 2.0 * e * x * w2;
        let w1_new = w1 - lr * g1;
        let e2 = x * w1_new * w2 - t;
        let g2 = 2.0 * e2 * x * w1_new;
        let w2_new = w2 - lr * g2;

        assert!((net.layers[0].params[0].data()[0] - w1_new).abs() < 1e-12);
        assert!((net.layers[1].params[0].data()[0] - w2_new).abs() < 1e-12);
        assert!((trace.losses[0] - e * e).abs() < 1e-12);
        assert_eq!(trace.grad_evals, 2);
    }

    #[test]
    fn adjusted_equals_simultaneous_for_single_layer() {
        let cfg_net = DlnConfig {
            depth: 1,
            dim: 3,
            n: 16,
            ..DlnConfig::default()
        };
        let mut sim = build_dln(&cfg_net, 11).unwrap();
        let mut adj = build_dln(&cfg_net, 11).unwrap();
        let base = TrainConfig::new(1e-2, 25);
        let t1 = train(
            &mut sim.net,
            &sim.data,
            sim.loss,
            &TrainConfig {
                mode: TrainMode::Simultaneous,
                ..base.clone()
            },
            &mut [],
        )
        .unwrap();
        let t2 = train(
            &mut adj.net,
            &adj.data,
            adj.loss,
            &TrainConfig {
                mode: TrainMode::Adjusted,
                ..base
            },
            &mut [],
        )
        .unwrap();
        // Bit-exact agreement, parameters and losses.
        assert_eq!(t1.losses, t2.losses);
        assert_eq!(
            sim.net.layers[0].params[0].data(),
            adj.net.layers[0].params[0].data()
        );
        assert_eq!(t1.grad_evals, t2.grad_evals);
    }

    #[test]
    fn adjusted_costs_depth_times_more_evaluations() {
        let cfg_net = DlnConfig {
            depth: 4,
            dim: 2,
            n: 8,
            ..DlnConfig::default()
        };
        let mut model = build_dln(&cfg_net, 2).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Adjusted,
            ..TrainConfig::new(1e-3, 5)
        };
        let trace = train(&mut model.net, &model.data, model.loss, &cfg, &mut []).unwrap();
        assert_eq!(trace.grad_evals, 4 * 5);
    }

    #[test]
    fn full_batch_training_is_deterministic() {
        let cfg_net = DlnConfig {
            depth: 3,
            dim: 4,
            n: 32,
            norm: Some(NormSpec::new("bn")),
            ..DlnConfig::default()
        };
        let mut a = build_dln(&cfg_net, 7).unwrap();
        let mut b = build_dln(&cfg_net, 7).unwrap();
        let cfg = TrainConfig::new(1e-2, 50);
        let ta = train(&mut a.net, &a.data, a.loss, &cfg, &mut []).unwrap();
        let tb = train(&mut b.net, &b.data, b.loss, &cfg, &mut []).unwrap();
        assert_eq!(ta.losses, tb.losses);
        for (la, lb) in a.net.layers.iter().zip(b.net.layers.iter()) {
            for (pa, pb) in la.params.iter().zip(lb.params.iter()) {
                assert_eq!(pa.data(), pb.data());
            }
        }
    }

    #[test]
    fn single_simultaneous_step_is_exactly_w_minus_lr_g() {
        let (net, data) = scalar_chain(0.5, 0.25, 2.0, 1.0);
        let mut surface = NetworkEval::new(
            &net,
            LossKind::MeanSquaredError,
            data.inputs.clone(),
            data.targets.clone(),
        )
        .unwrap();
        let mut params = net.params();
        let groups = bundles(&net, false);
        let (_, grads) = surface.loss_and_grads(&params).unwrap();
        let lr = 0.125;
        step_simultaneous(&mut surface, &mut params, &groups, lr, 0).unwrap();
        for li in 0..2 {
            let expect = net.layers[li].params[0].data()[0] - lr * grads[li][0].data()[0];
            assert_eq!(params[li][0].data()[0], expect);
        }
    }

    #[test]
    fn minibatch_epochs_reshuffle_deterministically() {
        let cfg_model = MlpConfig {
            dims: vec![4, 6],
            classes: 2,
            n: 64,
            ..MlpConfig::default()
        };
        let mut a = build_mlp(&cfg_model, 3).unwrap();
        let mut b = build_mlp(&cfg_model, 3).unwrap();
        let cfg = TrainConfig {
            batch: BatchMode::Mini(16),
            ..TrainConfig::new(0.05, 12)
        };
        let ta = train(&mut a.net, &a.data, a.loss, &cfg, &mut []).unwrap();
        let tb = train(&mut b.net, &b.data, b.loss, &cfg, &mut []).unwrap();
        assert_eq!(ta.losses, tb.losses);
        assert_eq!(ta.losses.len(), 12);
    }

    #[test]
    fn oversized_minibatch_is_rejected() {
        let mut model = build_mlp(
            &MlpConfig {
                dims: vec![4, 4],
                classes: 2,
                n: 8,
                ..MlpConfig::default()
            },
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch: BatchMode::Mini(16),
            ..TrainConfig::new(0.1, 1)
        };
        let err = train(&mut model.net, &model.data, model.loss, &cfg, &mut []).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig(_)));
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        // A huge learning rate blows the quadratic up geometrically.
        let cfg_net = DlnConfig {
            depth: 2,
            dim: 2,
            n: 8,
            ..DlnConfig::default()
        };
        let mut model = build_dln(&cfg_net, 1).unwrap();
        let cfg = TrainConfig::new(1e6, 200);
        let trace = train(&mut model.net, &model.data, model.loss, &cfg, &mut []).unwrap();
        let at = trace.diverged_at.expect("should diverge");
        assert!(trace.losses.len() <= at + 1);
        assert!(trace.losses.iter().all(|l| l.is_finite()));
    }
}
