//! Subcommand implementations. Every command writes its artifacts into the
//! configured output directory and finishes by atomically writing
//! `manifest.json`; a missing manifest means the run did not complete.

use std::path::Path;

use rayon::prelude::*;

use normlens_core::graph::EvalError;
use normlens_core::network::{bundles, Model};
use normlens_core::probe::{
    measure_ics, probe_landscape, ActivationMomentRecord, IcsRecord, ProbeReport,
};
use normlens_core::rng::Rng;
use normlens_core::theory::{run_checks_for_seed, CheckEntry, CheckKind, VerifyConfig};
use normlens_core::train::{train, StepCtx, TrainHook, TrainMode, TrainTrace};

use crate::config::Config;
use crate::output::{ensure_out_dir, CsvWriter, Field, RunManifest};
use crate::CliError;

/// Captures batch mean/variance of sampled units for every layer.
struct MomentHook {
    every: usize,
    units: Vec<Vec<usize>>,
    records: Vec<ActivationMomentRecord>,
}

impl MomentHook {
    fn new(model: &Model, every: usize, per_layer: usize, seed: u64) -> Self {
        let rng = Rng::new(seed).split(&[0x3C]);
        let mut width = model.net.input_dim();
        let units = model
            .net
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                if let normlens_core::network::LayerSpec::Dense { out, .. } = layer.spec {
                    width = out;
                }
                let mut all: Vec<usize> = (0..width).collect();
                let mut r = rng.split(&[l as u64]);
                r.shuffle(&mut all);
                all.truncate(per_layer.min(width));
                all.sort_unstable();
                all
            })
            .collect();
        MomentHook {
            every,
            units,
            records: Vec::new(),
        }
    }
}

impl TrainHook for MomentHook {
    fn on_step(&mut self, ctx: &mut StepCtx) -> Result<(), EvalError> {
        if self.every == 0 || ctx.step % self.every != 0 {
            return Ok(());
        }
        // One forward pass serves every layer readout.
        use normlens_core::probe::LossSurface;
        ctx.surface.loss(ctx.params)?;
        for (layer, units) in self.units.iter().enumerate() {
            let out = ctx
                .surface
                .graph
                .layer_output(layer)
                .expect("forward populates layer outputs");
            let m = out.rows();
            for &unit in units {
                let mean = (0..m).map(|b| out.at(b, unit)).sum::<f64>() / m as f64;
                let variance = (0..m)
                    .map(|b| {
                        let dev = out.at(b, unit) - mean;
                        dev * dev
                    })
                    .sum::<f64>()
                    / m as f64;
                self.records.push(ActivationMomentRecord {
                    step: ctx.step,
                    layer,
                    unit,
                    mean,
                    variance,
                });
            }
        }
        Ok(())
    }
}

struct IcsHook {
    every: usize,
    records: Vec<IcsRecord>,
}

impl TrainHook for IcsHook {
    fn on_step(&mut self, ctx: &mut StepCtx) -> Result<(), EvalError> {
        if self.every == 0 || ctx.step % self.every != 0 {
            return Ok(());
        }
        let records = measure_ics(
            ctx.surface,
            ctx.params,
            ctx.bundle_groups,
            ctx.lr,
            ctx.step,
        )?;
        self.records.extend(records);
        Ok(())
    }
}

struct ProbeHook {
    every: usize,
    multipliers: Vec<f64>,
    reports: Vec<ProbeReport>,
}

impl TrainHook for ProbeHook {
    fn on_step(&mut self, ctx: &mut StepCtx) -> Result<(), EvalError> {
        if self.every == 0 || ctx.step % self.every != 0 {
            return Ok(());
        }
        let report = probe_landscape(
            ctx.surface,
            ctx.params,
            ctx.lr,
            &self.multipliers,
            ctx.step,
        )?;
        self.reports.push(report);
        Ok(())
    }
}

fn run_training(
    config: &Config,
    hooks: &mut [&mut dyn TrainHook],
) -> Result<(Model, TrainTrace), CliError> {
    let mut model = config.build_model()?;
    let tc = config.train_config()?;
    let trace = train(&mut model.net, &model.data, model.loss, &tc, hooks)
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok((model, trace))
}

fn write_loss_csv(dir: &Path, trace: &TrainTrace) -> Result<(), CliError> {
    let mut w = CsvWriter::create(&dir.join("loss.csv"), &["step", "loss"])?;
    for (step, loss) in trace.losses.iter().enumerate() {
        w.row(&[Field::I(step), Field::F(*loss)])?;
    }
    w.finish()
}

/// Exit-code policy: divergence is an expected outcome of the sequential
/// update schedule, an error elsewhere.
fn divergence_outcome(config: &Config, trace: &TrainTrace) -> Result<(), CliError> {
    match trace.diverged_at {
        Some(step) if config.train.mode != "adjusted" => Err(CliError::Divergence { step }),
        _ => Ok(()),
    }
}

/// `train`: loss curve plus activation moments.
pub fn cmd_train(config: &Config) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let dir = ensure_out_dir(config)?;
    let model = config.build_model()?;
    let mut moments = MomentHook::new(
        &model,
        config.instrumentation.moment_every,
        config.instrumentation.moment_units,
        config.seed,
    );
    drop(model);
    let (_, trace) = run_training(config, &mut [&mut moments])?;

    write_loss_csv(&dir, &trace)?;
    let mut w = CsvWriter::create(
        &dir.join("moments.csv"),
        &["step", "layer", "unit", "mean", "variance"],
    )?;
    for r in &moments.records {
        w.row(&[
            Field::I(r.step),
            Field::I(r.layer),
            Field::I(r.unit),
            Field::F(r.mean),
            Field::F(r.variance),
        ])?;
    }
    w.finish()?;

    RunManifest::new(
        config.clone(),
        vec!["loss.csv".into(), "moments.csv".into()],
        started.elapsed().as_secs_f64(),
    )
    .with_divergence(trace.diverged_at)
    .write(&dir)?;
    divergence_outcome(config, &trace)
}

/// `ics`: per-layer gradient shift across preceding-layer updates.
pub fn cmd_ics(config: &Config) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let dir = ensure_out_dir(config)?;
    let every = match config.instrumentation.ics_every {
        0 => 50,
        n => n,
    };
    let mut hook = IcsHook {
        every,
        records: Vec::new(),
    };
    let (_, trace) = run_training(config, &mut [&mut hook])?;

    write_loss_csv(&dir, &trace)?;
    let mut w = CsvWriter::create(
        &dir.join("ics.csv"),
        &["step", "layer", "l2_diff", "cos_angle"],
    )?;
    for r in &hook.records {
        w.row(&[
            Field::I(r.step),
            Field::I(r.layer),
            Field::F(r.l2_diff),
            Field::OptF(r.cos_angle),
        ])?;
    }
    w.finish()?;

    RunManifest::new(
        config.clone(),
        vec!["loss.csv".into(), "ics.csv".into()],
        started.elapsed().as_secs_f64(),
    )
    .with_divergence(trace.diverged_at)
    .write(&dir)?;
    divergence_outcome(config, &trace)
}

/// `probe`: loss and gradient change along the gradient direction, plus a
/// per-step summary with the effective smoothness bound and the loss spread.
pub fn cmd_probe(config: &Config) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let dir = ensure_out_dir(config)?;
    let every = match config.instrumentation.probe_every {
        0 => 50,
        n => n,
    };
    let mut hook = ProbeHook {
        every,
        multipliers: config.instrumentation.probe_multipliers.clone(),
        reports: Vec::new(),
    };
    let (_, trace) = run_training(config, &mut [&mut hook])?;

    write_loss_csv(&dir, &trace)?;
    let mut w = CsvWriter::create(
        &dir.join("landscape.csv"),
        &["step", "multiplier", "loss", "grad_l2_diff"],
    )?;
    for r in &hook.reports {
        for ((m, l), d) in r
            .multipliers
            .iter()
            .zip(r.losses.iter())
            .zip(r.grad_l2_diffs.iter())
        {
            w.row(&[Field::I(r.step), Field::F(*m), Field::OptF(*l), Field::OptF(*d)])?;
        }
    }
    w.finish()?;

    let mut w = CsvWriter::create(
        &dir.join("landscape_summary.csv"),
        &[
            "step",
            "effective_beta",
            "loss_min",
            "loss_median",
            "loss_max",
        ],
    )?;
    for r in &hook.reports {
        let spread = r.loss_spread();
        w.row(&[
            Field::I(r.step),
            Field::OptF(r.effective_beta),
            Field::OptF(spread.map(|s| s.0)),
            Field::OptF(spread.map(|s| s.1)),
            Field::OptF(spread.map(|s| s.2)),
        ])?;
    }
    w.finish()?;

    RunManifest::new(
        config.clone(),
        vec![
            "loss.csv".into(),
            "landscape.csv".into(),
            "landscape_summary.csv".into(),
        ],
        started.elapsed().as_secs_f64(),
    )
    .with_divergence(trace.diverged_at)
    .write(&dir)?;
    divergence_outcome(config, &trace)
}

/// `verify`: the randomized closed-form check suite. Exits nonzero iff any
/// check fails; structurally skipped checks (unsatisfiable preconditions at
/// the sampled sizes) do not fail the run.
pub fn cmd_verify(config: &Config) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let dir = ensure_out_dir(config)?;
    let vcfg = VerifyConfig {
        seeds: config.verify.seeds,
        m_range: (config.verify.m_min, config.verify.m_max),
        d_range: (config.verify.d_min, config.verify.d_max),
        lambda: config.verify.lambda,
    };
    let per_seed: Vec<Vec<CheckEntry>> = (0..vcfg.seeds)
        .into_par_iter()
        .map(|seed| run_checks_for_seed(&vcfg, seed))
        .collect();
    let entries: Vec<CheckEntry> = per_seed.into_iter().flatten().collect();
    let all_pass = entries.iter().all(CheckEntry::passed);

    let json_entries: Vec<serde_json::Value> = entries
        .iter()
        .map(|e| match e {
            CheckEntry::Report(r) => serde_json::json!({
                "check": r.name,
                "seed": r.seed,
                "m": r.m,
                "d": r.d,
                "kind": match r.kind {
                    CheckKind::Identity => "identity",
                    CheckKind::Inequality => "inequality",
                },
                "lhs": r.lhs,
                "rhs": r.rhs,
                "value": r.value,
                "tolerance": r.tolerance,
                "pass": r.pass,
                "skipped": false,
            }),
            CheckEntry::Skip { name, seed, reason } => serde_json::json!({
                "check": name,
                "seed": seed,
                "skipped": true,
                "reason": reason,
                "pass": true,
            }),
        })
        .collect();
    let doc = serde_json::json!({
        "schema": 1,
        "all_pass": all_pass,
        "entries": json_entries,
    });
    let path = dir.join("verify.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| CliError::config(format!("write {}: {e}", path.display())))?;

    RunManifest::new(
        config.clone(),
        vec!["verify.json".into()],
        started.elapsed().as_secs_f64(),
    )
    .write(&dir)?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Verification)
    }
}

/// Resolves a battery variant name to (normalization scheme, training mode).
fn variant_plan(name: &str) -> Result<(&'static str, TrainMode), CliError> {
    Ok(match name {
        "vanilla" => ("none", TrainMode::Simultaneous),
        "bn" => ("bn", TrainMode::Simultaneous),
        "noisy" => ("noisy", TrainMode::Simultaneous),
        "noise" => ("noise", TrainMode::Simultaneous),
        "l1" => ("l1", TrainMode::Simultaneous),
        "l2" => ("l2", TrainMode::Simultaneous),
        "linf" => ("linf", TrainMode::Simultaneous),
        "adjusted" => ("none", TrainMode::Adjusted),
        "reduced_lr" => ("none", TrainMode::ReducedLr),
        other => {
            return Err(CliError::config(format!(
                "unknown compare variant \"{other}\""
            )))
        }
    })
}

struct VariantOutcome {
    variant: String,
    final_loss: Option<f64>,
    mean_loss: Option<f64>,
    grad_evals: u64,
    steps_run: usize,
    diverged_at: Option<usize>,
}

/// `compare`: a matched-seed battery of normalization schemes and update
/// schedules on the configured model, one summary row per variant.
pub fn cmd_compare(config: &Config) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let dir = ensure_out_dir(config)?;
    let steps = config.compare.steps.unwrap_or(config.train.steps);
    for v in &config.compare.variants {
        variant_plan(v)?;
    }
    let outcomes: Vec<Result<VariantOutcome, CliError>> = config
        .compare
        .variants
        .par_iter()
        .map(|variant| {
            let (norm, mode) = variant_plan(variant)?;
            let mut model = config.build_model_with(norm, config.seed)?;
            let mut tc = config.train_config()?;
            tc.steps = steps;
            tc.mode = mode;
            let trace = train(&mut model.net, &model.data, model.loss, &tc, &mut [])
                .map_err(|e| CliError::config(format!("{variant}: {e}")))?;
            Ok(VariantOutcome {
                variant: variant.clone(),
                final_loss: trace.final_loss(),
                mean_loss: trace.loss_auc(),
                grad_evals: trace.grad_evals,
                steps_run: trace.losses.len(),
                diverged_at: trace.diverged_at,
            })
        })
        .collect();

    let mut w = CsvWriter::create(
        &dir.join("summary.csv"),
        &[
            "variant",
            "final_loss",
            "mean_loss",
            "grad_evals",
            "steps",
            "diverged_at",
        ],
    )?;
    let mut diverged_any = None;
    for outcome in outcomes {
        let o = outcome?;
        if o.diverged_at.is_some() && diverged_any.is_none() {
            diverged_any = o.diverged_at;
        }
        w.row(&[
            Field::S(o.variant),
            Field::OptF(o.final_loss),
            Field::OptF(o.mean_loss),
            Field::I(o.grad_evals as usize),
            Field::I(o.steps_run),
            Field::OptF(o.diverged_at.map(|s| s as f64)),
        ])?;
    }
    w.finish()?;

    RunManifest::new(
        config.clone(),
        vec!["summary.csv".into()],
        started.elapsed().as_secs_f64(),
    )
    .with_divergence(diverged_any)
    .write(&dir)?;
    Ok(())
}

/// Per-layer trainable-bundle count of the configured model; used for the
/// gradient-evaluation accounting in compare summaries.
#[allow(dead_code)]
pub fn bundle_count(config: &Config) -> Result<usize, CliError> {
    let model = config.build_model()?;
    Ok(bundles(&model.net, config.train.norm_params_separate).len())
}
