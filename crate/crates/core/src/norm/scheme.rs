//! Normalization strategies as graph-building plugins.
//!
//! Each scheme knows which trainable parameters it owns, whether it consumes
//! per-step noise, and how to splice itself into an autodiff graph between a
//! dense layer and the following nonlinearity. Schemes are looked up by name
//! at runtime (`create`), which is how configs and the CLI select a variant.
//!
//! The graph route deliberately composes normalization out of primitive ops;
//! the closed forms in the parent module are the analytic counterpart that
//! the verification suite compares against.

use crate::graph::{Graph, GraphError, NodeId};
use crate::norm::{LpExponent, NoiseConfig};

/// How a scheme's trainable parameter should be initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    Ones,
    Zeros,
}

/// A trainable parameter owned by a normalization scheme, always `[1, units]`.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: &'static str,
    pub init: ParamInit,
}

/// Settings shared by the scheme constructors.
#[derive(Debug, Clone, Copy)]
pub struct SchemeSettings {
    /// Variance / norm floor added before division.
    pub eps: f64,
    /// Noise model for the noisy variants.
    pub noise: NoiseConfig,
}

impl Default for SchemeSettings {
    fn default() -> Self {
        SchemeSettings {
            eps: crate::norm::TRAIN_EPS,
            noise: NoiseConfig::default(),
        }
    }
}

/// A normalization strategy that can splice itself into a graph.
pub trait NormScheme: Send + Sync {
    /// Registry name, e.g. "bn" or "l2".
    fn name(&self) -> &'static str;

    /// Trainable parameters, in binding order.
    fn params(&self) -> Vec<ParamSpec> {
        Vec::new()
    }

    /// Noise model, if the scheme perturbs activations each step. When set,
    /// the network allocates `(scale, shift)` input roots of shape `[m, d]`
    /// and binds fresh samples before every evaluation.
    fn noise(&self) -> Option<NoiseConfig> {
        None
    }

    /// Appends the scheme to `g`, returning the output node. `params` and
    /// `noise` line up with `Self::params` / `Self::noise`.
    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError>;
}

/// Pass-through (no normalization).
struct Identity;

impl NormScheme for Identity {
    fn name(&self) -> &'static str {
        "none"
    }

    fn build(
        &self,
        _g: &mut Graph,
        x: NodeId,
        _params: &[NodeId],
        _noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError> {
        Ok(x)
    }
}

/// Batch normalization: whiten per unit over the batch, then scale and shift.
struct BatchNorm {
    eps: f64,
}

fn affine_params() -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: "gamma",
            init: ParamInit::Ones,
        },
        ParamSpec {
            name: "beta",
            init: ParamInit::Zeros,
        },
    ]
}

fn build_bn_nodes(g: &mut Graph, x: NodeId, eps: f64) -> Result<NodeId, GraphError> {
    let mu = g.col_mean(x)?;
    let centered = g.sub_row(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.col_mean(sq)?;
    let var_eps = g.add_scalar(var, eps);
    let sigma = g.sqrt(var_eps);
    g.div_row(centered, sigma)
}

fn build_affine(
    g: &mut Graph,
    normalized: NodeId,
    params: &[NodeId],
) -> Result<NodeId, GraphError> {
    let scaled = g.mul_row(normalized, params[0])?;
    g.add_row(scaled, params[1])
}

impl NormScheme for BatchNorm {
    fn name(&self) -> &'static str {
        "bn"
    }

    fn params(&self) -> Vec<ParamSpec> {
        affine_params()
    }

    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        _noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError> {
        let normalized = build_bn_nodes(g, x, self.eps)?;
        build_affine(g, normalized, params)
    }
}

/// Batch normalization followed by per-step affine noise on every activation.
struct NoisyBatchNorm {
    eps: f64,
    noise: NoiseConfig,
}

impl NormScheme for NoisyBatchNorm {
    fn name(&self) -> &'static str {
        "noisy"
    }

    fn params(&self) -> Vec<ParamSpec> {
        affine_params()
    }

    fn noise(&self) -> Option<NoiseConfig> {
        Some(self.noise)
    }

    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError> {
        let normalized = build_bn_nodes(g, x, self.eps)?;
        let z = build_affine(g, normalized, params)?;
        let (scale, shift) = noise.expect("noisy scheme requires noise roots");
        let scaled = g.mul(z, scale)?;
        g.add(scaled, shift)
    }
}

/// Per-step affine noise on raw activations, with no normalization. This is
/// the control arm for the noisy variant: the same perturbations applied to
/// an unnormalized network.
struct NoiseOnly {
    noise: NoiseConfig,
}

impl NormScheme for NoiseOnly {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn noise(&self) -> Option<NoiseConfig> {
        Some(self.noise)
    }

    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        _params: &[NodeId],
        noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError> {
        let (scale, shift) = noise.expect("noise scheme requires noise roots");
        let scaled = g.mul(x, scale)?;
        g.add(scaled, shift)
    }
}

/// Mean shift plus division by the batch-averaged lp norm of the raw
/// activations (norm measured before the mean shift).
struct LpNorm {
    p: LpExponent,
    eps: f64,
}

impl NormScheme for LpNorm {
    fn name(&self) -> &'static str {
        self.p.label()
    }

    fn params(&self) -> Vec<ParamSpec> {
        affine_params()
    }

    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        _noise: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId, GraphError> {
        let nu = match self.p {
            LpExponent::L1 => {
                let a = g.abs(x);
                g.col_mean(a)?
            }
            LpExponent::L2 => {
                let sq = g.mul(x, x)?;
                let mean_sq = g.col_mean(sq)?;
                g.sqrt(mean_sq)
            }
            LpExponent::LInf => {
                let a = g.abs(x);
                g.col_max(a)?
            }
        };
        let nu_eps = g.add_scalar(nu, self.eps);
        let mu = g.col_mean(x)?;
        let centered = g.sub_row(x, mu)?;
        let normalized = g.div_row(centered, nu_eps)?;
        build_affine(g, normalized, params)
    }
}

/// Every registered scheme name, in registry order.
pub const SCHEME_NAMES: &[&str] = &["none", "bn", "noisy", "noise", "l1", "l2", "linf"];

/// Instantiates a scheme by registry name.
pub fn create(name: &str, settings: &SchemeSettings) -> Option<Box<dyn NormScheme>> {
    let scheme: Box<dyn NormScheme> = match name {
        "none" => Box::new(Identity),
        "bn" => Box::new(BatchNorm { eps: settings.eps }),
        "noisy" => Box::new(NoisyBatchNorm {
            eps: settings.eps,
            noise: settings.noise,
        }),
        "noise" => Box::new(NoiseOnly {
            noise: settings.noise,
        }),
        "l1" => Box::new(LpNorm {
            p: LpExponent::L1,
            eps: settings.eps,
        }),
        "l2" => Box::new(LpNorm {
            p: LpExponent::L2,
            eps: settings.eps,
        }),
        "linf" => Box::new(LpNorm {
            p: LpExponent::LInf,
            eps: settings.eps,
        }),
        _ => return None,
    };
    Some(scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{bn_forward, lp_norm_forward, BatchNormParams, LpNormConfig};
    use crate::tensor::Tensor;

    fn run_scheme(name: &str, y: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
        let settings = SchemeSettings {
            eps,
            noise: NoiseConfig::degenerate(),
        };
        let scheme = create(name, &settings).expect("registered");
        let (m, d) = (y.rows(), y.cols());
        let mut g = Graph::new();
        let x = g.input(&[m, d]);
        let params: Vec<NodeId> = scheme.params().iter().map(|_| g.input(&[1, d])).collect();
        let noise = scheme.noise().map(|_| {
            let s = g.input(&[m, d]);
            let a = g.input(&[m, d]);
            (s, a)
        });
        let out = scheme.build(&mut g, x, &params, noise).unwrap();
        let loss = g.sum_all(out);
        g.mark_output(loss).unwrap();
        let mut bindings = vec![(x, y.clone())];
        for (&pid, values) in params.iter().zip([gamma, beta].iter()) {
            bindings.push((pid, Tensor::new(vec![1, d], values.to_vec()).unwrap()));
        }
        if let Some((s, a)) = noise {
            bindings.push((s, Tensor::full(&[m, d], 1.0).unwrap()));
            bindings.push((a, Tensor::zeros(&[m, d])));
        }
        g.forward(&bindings).unwrap();
        g.value(out).unwrap().clone()
    }

    #[test]
    fn registry_knows_every_name() {
        for name in SCHEME_NAMES {
            assert!(create(name, &SchemeSettings::default()).is_some(), "{name}");
        }
        assert!(create("groupnorm", &SchemeSettings::default()).is_none());
    }

    #[test]
    fn graph_bn_matches_closed_form() {
        let mut rng = crate::rng::Rng::new(2);
        let y = Tensor::new(
            vec![7, 3],
            (0..21).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let gamma = [1.2, 0.8, -0.5];
        let beta = [0.1, 0.0, 2.0];
        let z_graph = run_scheme("bn", &y, &gamma, &beta, 1e-5);
        let p = BatchNormParams::new(gamma.to_vec(), beta.to_vec(), 1e-5).unwrap();
        let (z_closed, _) = bn_forward(&y, &p).unwrap();
        assert!(z_graph.max_abs_diff(&z_closed) < 1e-12);
    }

    #[test]
    fn graph_lp_matches_closed_form() {
        let mut rng = crate::rng::Rng::new(5);
        let y = Tensor::new(
            vec![6, 2],
            (0..12).map(|_| rng.uniform(-3.0, 3.0)).collect(),
        )
        .unwrap();
        let gamma = [0.9, 1.1];
        let beta = [-0.2, 0.4];
        for p in [LpExponent::L1, LpExponent::L2, LpExponent::LInf] {
            let z_graph = run_scheme(p.label(), &y, &gamma, &beta, 0.0);
            let cfg = LpNormConfig {
                p,
                gamma: gamma.to_vec(),
                beta: beta.to_vec(),
                eps: 0.0,
            };
            let (z_closed, _) = lp_norm_forward(&y, &cfg).unwrap();
            assert!(
                z_graph.max_abs_diff(&z_closed) < 1e-12,
                "{} mismatch",
                p.label()
            );
        }
    }

    #[test]
    fn noisy_with_unit_noise_equals_bn() {
        let mut rng = crate::rng::Rng::new(6);
        let y = Tensor::new(
            vec![5, 2],
            (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let gamma = [1.0, 1.0];
        let beta = [0.0, 0.0];
        let a = run_scheme("noisy", &y, &gamma, &beta, 1e-5);
        let b = run_scheme("bn", &y, &gamma, &beta, 1e-5);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn none_is_passthrough_and_noise_with_unit_samples_too() {
        let y = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = run_scheme("none", &y, &[], &[], 0.0);
        assert_eq!(out.data(), y.data());
        let out = run_scheme("noise", &y, &[], &[], 0.0);
        assert_eq!(out.data(), y.data());
    }
}
