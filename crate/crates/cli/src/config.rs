//! Experiment configuration: a flat JSON document with `model`, `train`,
//! `instrumentation`, `verify`, and `compare` sections. Unknown keys are
//! rejected. Every field has a documented default; model-dependent defaults
//! (learning rate, steps, batch, probe multipliers) resolve from the model
//! kind. `--set key=value` overrides use dotted paths into the document.
//!
//! A run manifest embeds the fully resolved config, and the loader accepts a
//! manifest wherever it accepts a config, so any run can be reproduced from
//! its manifest alone.

use serde::{Deserialize, Serialize};

use normlens_core::network::{DlnConfig, MlpConfig, Model, NormSpec};
use normlens_core::norm::NoiseConfig;
use normlens_core::probe::{linear_multipliers, log_multipliers};
use normlens_core::train::{BatchMode, TrainConfig, TrainMode};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dln,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_n_mu")]
    pub n_mu: f64,
    #[serde(default = "default_n_sigma")]
    pub n_sigma: f64,
    #[serde(default = "default_r")]
    pub r_mu: f64,
    #[serde(default = "default_r")]
    pub r_sigma: f64,
}

fn default_n_mu() -> f64 {
    0.5
}

fn default_n_sigma() -> f64 {
    1.25
}

fn default_r() -> f64 {
    0.1
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseConfig::default();
        NoiseSection {
            n_mu: d.n_mu,
            n_sigma: d.n_sigma,
            r_mu: d.r_mu,
            r_sigma: d.r_sigma,
        }
    }
}

impl NoiseSection {
    pub fn to_core(&self) -> Result<NoiseConfig, CliError> {
        NoiseConfig::new(self.n_mu, self.n_sigma, self.r_mu, self.r_sigma)
            .map_err(|e| CliError::config(format!("noise: {e}")))
    }
}

fn default_true_dln_depth() -> usize {
    25
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Normalization scheme name: none | bn | noisy | noise | l1 | l2 | linf.
    pub norm: String,
    /// Linear-chain settings.
    #[serde(default = "default_true_dln_depth")]
    pub depth: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Dataset size (equals the full-batch size for the linear chain).
    pub n: usize,
    /// MLP widths: input followed by hidden layers.
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    /// Variance / norm floor inside normalization layers.
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Also normalize the last dense layer's output (linear chain only).
    #[serde(default)]
    pub norm_after_last: bool,
    #[serde(default)]
    pub noise: NoiseSection,
}

fn default_dim() -> usize {
    10
}

fn default_dims() -> Vec<usize> {
    vec![16, 32, 32, 32, 32, 10]
}

fn default_classes() -> usize {
    10
}

fn default_mean_scale() -> f64 {
    0.5
}

fn default_norm_eps() -> f64 {
    normlens_core::norm::TRAIN_EPS
}

/// Batch selection: the word "full" or a positive size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BatchSpec {
    Size(usize),
    Word(String),
}

impl BatchSpec {
    pub fn to_core(&self) -> Result<BatchMode, CliError> {
        match self {
            BatchSpec::Size(n) if *n > 0 => Ok(BatchMode::Mini(*n)),
            BatchSpec::Size(_) => Err(CliError::config("train.batch must be positive")),
            BatchSpec::Word(w) if w == "full" => Ok(BatchMode::Full),
            BatchSpec::Word(w) => Err(CliError::config(format!(
                "train.batch must be \"full\" or a positive integer, got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch: BatchSpec,
    /// simultaneous | adjusted | reduced_lr
    pub mode: String,
    /// Give normalization scale/shift their own slot in the sequential
    /// update schedule instead of sharing the preceding dense layer's.
    #[serde(default)]
    pub norm_params_separate: bool,
}

impl TrainSection {
    pub fn mode_to_core(&self) -> Result<TrainMode, CliError> {
        match self.mode.as_str() {
            "simultaneous" => Ok(TrainMode::Simultaneous),
            "adjusted" => Ok(TrainMode::Adjusted),
            "reduced_lr" => Ok(TrainMode::ReducedLr),
            other => Err(CliError::config(format!("unknown train.mode \"{other}\""))),
        }
    }

    pub fn to_core(&self, seed: u64) -> Result<TrainConfig, CliError> {
        if !(self.lr >= 0.0) {
            return Err(CliError::config(format!(
                "train.lr must be nonnegative, got {}",
                self.lr
            )));
        }
        Ok(TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch.to_core()?,
            mode: self.mode_to_core()?,
            seed,
            snapshot_every: 0,
            norm_params_separate: self.norm_params_separate,
            divergence_threshold: normlens_core::train::DIVERGENCE_THRESHOLD,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InstrumentationSection {
    /// Gradient-shift measurement cadence in steps (0 = off).
    pub ics_every: usize,
    /// Landscape probe cadence in steps (0 = off).
    pub probe_every: usize,
    /// Explicit probe step multipliers; resolved from the model kind.
    pub probe_multipliers: Vec<f64>,
    /// Activation-moment capture cadence in steps (0 = off).
    pub moment_every: usize,
    /// Units sampled per layer for moment capture.
    pub moment_units: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_verify_seeds")]
    pub seeds: u64,
    #[serde(default = "default_m_min")]
    pub m_min: usize,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    #[serde(default = "default_d_min")]
    pub d_min: usize,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_verify_seeds() -> u64 {
    100
}

fn default_m_min() -> usize {
    3
}

fn default_m_max() -> usize {
    16
}

fn default_d_min() -> usize {
    1
}

fn default_d_max() -> usize {
    8
}

fn default_lambda() -> f64 {
    2.5
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            seeds: 100,
            m_min: 3,
            m_max: 16,
            d_min: 1,
            d_max: 8,
            lambda: 2.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Battery members: vanilla | bn | noisy | noise | l1 | l2 | linf |
    /// adjusted | reduced_lr.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    /// Step count for battery members (defaults to train.steps).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            variants: default_variants(),
            steps: None,
        }
    }
}

fn default_variants() -> Vec<String> {
    ["vanilla", "bn", "noisy", "l1", "l2", "linf", "adjusted", "reduced_lr"]
        .map(String::from)
        .to_vec()
}

/// Fully resolved configuration; what the manifest records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out: String,
    pub model: ModelSection,
    pub train: TrainSection,
    pub instrumentation: InstrumentationSection,
    pub verify: VerifySection,
    pub compare: CompareSection,
}

/// The same document with every field optional, for parsing user configs
/// before defaults are applied.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    out: Option<String>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    instrumentation: RawInstrumentation,
    verify: Option<VerifySection>,
    compare: Option<CompareSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<ModelKind>,
    norm: Option<String>,
    depth: Option<usize>,
    dim: Option<usize>,
    n: Option<usize>,
    dims: Option<Vec<usize>>,
    classes: Option<usize>,
    mean_scale: Option<f64>,
    norm_eps: Option<f64>,
    norm_after_last: Option<bool>,
    noise: Option<NoiseSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<BatchSpec>,
    mode: Option<String>,
    norm_params_separate: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstrumentation {
    ics_every: Option<usize>,
    probe_every: Option<usize>,
    probe_multipliers: Option<Vec<f64>>,
    moment_every: Option<usize>,
    moment_units: Option<usize>,
}

/// Kind-dependent defaults. The linear chain trains full-batch with the mean
/// squared error (the batch-summed loss divided by the dataset size), so
/// nominal step sizes quoted against a summed loss scale by that factor.
/// The default of 3e-5 is calibrated so the chain trains to a clear loss
/// drop over the default 10k steps while simultaneous updates stay inside
/// the regime where the standard chain shows essentially no gradient shift.
fn resolve(raw: RawConfig) -> Result<Config, CliError> {
    let kind = raw.model.kind.unwrap_or(ModelKind::Dln);
    let (lr, steps, batch, mults, moment_every): (f64, usize, BatchSpec, Vec<f64>, usize) =
        match kind {
            ModelKind::Dln => (
                3e-5,
                10_000,
                BatchSpec::Word("full".into()),
                log_multipliers(20, 0.01, 30.0),
                50,
            ),
            ModelKind::Mlp => (
                3.0,
                600,
                BatchSpec::Size(128),
                linear_multipliers(8, 0.5, 4.0),
                10,
            ),
        };
    let config = Config {
        seed: raw.seed.unwrap_or(0),
        out: raw.out.unwrap_or_else(|| "runs/out".into()),
        model: ModelSection {
            kind,
            norm: raw.model.norm.unwrap_or_else(|| "none".into()),
            depth: raw.model.depth.unwrap_or(25),
            dim: raw.model.dim.unwrap_or(10),
            n: raw.model.n.unwrap_or(match kind {
                ModelKind::Dln => 1000,
                ModelKind::Mlp => 1024,
            }),
            dims: raw.model.dims.unwrap_or_else(default_dims),
            classes: raw.model.classes.unwrap_or_else(default_classes),
            mean_scale: raw.model.mean_scale.unwrap_or_else(default_mean_scale),
            norm_eps: raw.model.norm_eps.unwrap_or_else(default_norm_eps),
            norm_after_last: raw.model.norm_after_last.unwrap_or(false),
            noise: raw.model.noise.unwrap_or_default(),
        },
        train: TrainSection {
            lr: raw.train.lr.unwrap_or(lr),
            steps: raw.train.steps.unwrap_or(steps),
            batch: raw.train.batch.unwrap_or(batch),
            mode: raw.train.mode.unwrap_or_else(|| "simultaneous".into()),
            norm_params_separate: raw.train.norm_params_separate.unwrap_or(false),
        },
        instrumentation: InstrumentationSection {
            ics_every: raw.instrumentation.ics_every.unwrap_or(0),
            probe_every: raw.instrumentation.probe_every.unwrap_or(0),
            probe_multipliers: raw.instrumentation.probe_multipliers.unwrap_or(mults),
            moment_every: raw.instrumentation.moment_every.unwrap_or(moment_every),
            moment_units: raw.instrumentation.moment_units.unwrap_or(3),
        },
        verify: raw.verify.unwrap_or_default(),
        compare: raw.compare.unwrap_or_default(),
    };
    validate(&config)?;
    Ok(config)
}

fn validate(c: &Config) -> Result<(), CliError> {
    let known = normlens_core::norm::scheme::SCHEME_NAMES;
    let norm_ok = c.model.norm == "none" || known.contains(&c.model.norm.as_str());
    if !norm_ok {
        return Err(CliError::config(format!(
            "unknown model.norm \"{}\" (expected one of {:?})",
            c.model.norm, known
        )));
    }
    c.train.mode_to_core()?;
    c.train.batch.to_core()?;
    // lr = 0 is a degenerate but valid setting (measurement-only runs).
    if !(c.train.lr >= 0.0) {
        return Err(CliError::config(format!(
            "train.lr must be nonnegative, got {}",
            c.train.lr
        )));
    }
    c.model.noise.to_core()?;
    if c.verify.m_min > c.verify.m_max || c.verify.d_min > c.verify.d_max {
        return Err(CliError::config("verify: empty size range"));
    }
    if c.model.kind == ModelKind::Mlp && c.model.dims.len() < 2 {
        return Err(CliError::config("model.dims needs at least two entries"));
    }
    if !c
        .instrumentation
        .probe_multipliers
        .windows(2)
        .all(|w| w[0] < w[1])
        || c.instrumentation.probe_multipliers.iter().any(|&m| m <= 0.0)
    {
        return Err(CliError::config(
            "instrumentation.probe_multipliers must be positive and ascending",
        ));
    }
    Ok(())
}

/// Parses a config document or a run manifest (recognized by its `schema`
/// and `config` fields), applies `--set` overrides and the CLI-level seed and
/// out-dir overrides, then resolves defaults.
pub fn load(
    path: Option<&std::path::Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&str>,
) -> Result<Config, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            match v {
                serde_json::Value::Object(ref obj)
                    if obj.contains_key("schema") && obj.contains_key("config") =>
                {
                    obj["config"].clone()
                }
                other => other,
            }
        }
        None => serde_json::json!({}),
    };
    for set in sets {
        apply_set(&mut value, set)?;
    }
    if let Some(s) = seed {
        value["seed"] = serde_json::json!(s);
    }
    if let Some(o) = out {
        value["out"] = serde_json::json!(o);
    }
    let raw: RawConfig = serde_json::from_value(value)
        .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
    resolve(raw)
}

/// Applies one `key.path=value` override. The value is parsed as JSON when
/// possible and falls back to a plain string (so `--set model.norm=bn` works
/// without quoting).
fn apply_set(root: &mut serde_json::Value, set: &str) -> Result<(), CliError> {
    let Some((key, raw_value)) = set.split_once('=') else {
        return Err(CliError::config(format!(
            "--set expects key=value, got \"{set}\""
        )));
    };
    let value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(CliError::config(format!("--set {key}: not an object")));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    match cursor.as_object_mut() {
        Some(obj) => {
            obj.insert(parts.last().unwrap().to_string(), value);
            Ok(())
        }
        None => Err(CliError::config(format!("--set {key}: not an object"))),
    }
}

impl Config {
    /// Builds the configured model at this config's seed.
    pub fn build_model(&self) -> Result<Model, CliError> {
        self.build_model_with(&self.model.norm, self.seed)
    }

    /// Builds the configured model with an explicit norm scheme and seed
    /// (used by the compare battery for matched-seed variants).
    pub fn build_model_with(&self, norm: &str, seed: u64) -> Result<Model, CliError> {
        let norm_spec = if norm == "none" {
            None
        } else {
            Some(
                NormSpec::new(norm)
                    .with_eps(self.model.norm_eps)
                    .with_noise(self.model.noise.to_core()?),
            )
        };
        let model = match self.model.kind {
            ModelKind::Dln => normlens_core::network::build_dln(
                &DlnConfig {
                    depth: self.model.depth,
                    dim: self.model.dim,
                    n: self.model.n,
                    norm: norm_spec,
                    norm_after_last: self.model.norm_after_last,
                },
                seed,
            ),
            ModelKind::Mlp => normlens_core::network::build_mlp(
                &MlpConfig {
                    dims: self.model.dims.clone(),
                    classes: self.model.classes,
                    n: self.model.n,
                    norm: norm_spec,
                    mean_scale: self.model.mean_scale,
                },
                seed,
            ),
        };
        model.map_err(|e| CliError::config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        self.train.to_core(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_dln_defaults() {
        let c = load(None, &[], None, None).unwrap();
        assert_eq!(c.model.kind, ModelKind::Dln);
        assert_eq!(c.train.steps, 10_000);
        assert_eq!(c.train.lr, 3e-5);
        assert_eq!(c.instrumentation.probe_multipliers.len(), 20);
        assert!((c.instrumentation.probe_multipliers[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mlp_kind_switches_defaults() {
        let c = load(None, &["model.kind=mlp".into()], None, None).unwrap();
        assert_eq!(c.train.lr, 3.0);
        assert_eq!(c.train.steps, 600);
        assert_eq!(c.train.batch, BatchSpec::Size(128));
        assert_eq!(c.instrumentation.probe_multipliers.len(), 8);
        assert_eq!(c.model.dims, vec![16, 32, 32, 32, 32, 10]);
    }

    #[test]
    fn set_overrides_apply_with_json_and_string_values() {
        let c = load(
            None,
            &[
                "train.lr=0.5".into(),
                "model.norm=bn".into(),
                "model.dims=[4,8]".into(),
                "train.batch=full".into(),
            ],
            Some(7),
            Some("elsewhere"),
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.model.norm, "bn");
        assert_eq!(c.model.dims, vec![4, 8]);
        assert_eq!(c.train.batch, BatchSpec::Word("full".into()));
        assert_eq!(c.seed, 7);
        assert_eq!(c.out, "elsewhere");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, &["model.depht=3".into()], None, None).unwrap_err();
        assert!(err.to_string().contains("depht"), "{err}");
        let err = load(None, &["momentum=0.9".into()], None, None).unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(load(None, &["model.norm=groupnorm".into()], None, None).is_err());
        assert!(load(None, &["train.mode=nesterov".into()], None, None).is_err());
        assert!(load(None, &["train.batch=half".into()], None, None).is_err());
        assert!(load(None, &["train.lr=-1".into()], None, None).is_err());
        assert!(load(None, &["train.lr=0".into()], None, None).is_ok());
    }

    #[test]
    fn manifest_documents_unwrap_to_their_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load(None, &["train.steps=3".into()], Some(9), None).unwrap();
        let manifest = serde_json::json!({
            "schema": 1,
            "config": serde_json::to_value(&cfg).unwrap(),
            "artifacts": ["loss.csv"],
        });
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let reloaded = load(Some(&path), &[], None, None).unwrap();
        assert_eq!(reloaded, cfg);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = load(None, &["model.kind=mlp".into()], Some(3), None).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
