//! Batch normalization and its variants in closed form.
//!
//! `bn_forward`/`bn_backward`/`bn_input_jacobian` implement the per-unit
//! whitening transform and its analytic derivatives directly; the graph-based
//! route in [`scheme`] composes the same computation out of autodiff
//! primitives, so the two serve as independent cross-checks.
//!
//! Conventions: batches are `[m, d]` (m samples, d units), statistics are
//! per unit over the batch, and variance is the population variance
//! (divide by m), which is what makes `||y_hat_j||^2 == m` hold at eps = 0.

pub mod scheme;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Variance floor used by normalization layers inside trained networks.
pub const TRAIN_EPS: f64 = 1e-5;
/// Largest batch for which the explicit per-unit input Jacobian is built.
pub const JACOBIAN_M_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum NormError {
    #[error("batch must have at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("unit {unit} has zero batch variance and eps = 0")]
    ZeroVariance { unit: usize },
    #[error("unit {unit} has zero norm and eps = 0")]
    ZeroNorm { unit: usize },
    #[error("expected shape {want:?}, got {got:?}")]
    ShapeMismatch { want: Vec<usize>, got: Vec<usize> },
    #[error("batch of {m} rows exceeds the Jacobian limit {limit}")]
    JacobianLimit { m: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
}

/// Trainable scale/shift plus the variance floor, one entry per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self, NormError> {
        if gamma.len() != beta.len() {
            return Err(NormError::BadConfig("gamma/beta length mismatch"));
        }
        if !gamma.iter().chain(beta.iter()).all(|v| v.is_finite()) {
            return Err(NormError::BadConfig("non-finite gamma/beta"));
        }
        if !(eps >= 0.0) {
            return Err(NormError::BadConfig("eps must be >= 0"));
        }
        Ok(BatchNormParams { gamma, beta, eps })
    }

    /// gamma = 1, beta = 0 for `units` units.
    pub fn identity(units: usize, eps: f64) -> Self {
        BatchNormParams {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            eps,
        }
    }
}

/// Forward-pass statistics needed by the backward closed forms.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Per-unit batch mean.
    pub mu: Vec<f64>,
    /// Per-unit sqrt(population variance + eps).
    pub sigma: Vec<f64>,
    /// Whitened activations, `[m, d]`.
    pub y_hat: Tensor,
}

/// Whitens each unit over the batch and applies the affine transform:
/// `z = gamma * (y - mu) / sigma + beta` with `sigma = sqrt(popvar + eps)`.
pub fn bn_forward(y: &Tensor, params: &BatchNormParams) -> Result<(Tensor, BnCache), NormError> {
    let (m, d) = check_batch(y, params.gamma.len())?;
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for j in 0..d {
        let mut sum = 0.0;
        for b in 0..m {
            sum += y.at(b, j);
        }
        mu[j] = sum / m as f64;
        let mut var = 0.0;
        for b in 0..m {
            let dev = y.at(b, j) - mu[j];
            var += dev * dev;
        }
        var /= m as f64;
        let s2 = var + params.eps;
        if s2 == 0.0 {
            return Err(NormError::ZeroVariance { unit: j });
        }
        sigma[j] = s2.sqrt();
    }
    let mut y_hat = vec![0.0; m * d];
    let mut z = vec![0.0; m * d];
    for b in 0..m {
        for j in 0..d {
            let h = (y.at(b, j) - mu[j]) / sigma[j];
            y_hat[b * d + j] = h;
            z[b * d + j] = params.gamma[j] * h + params.beta[j];
        }
    }
    let y_hat = Tensor::new(vec![m, d], y_hat).expect("finite whitening");
    let z = Tensor::new(vec![m, d], z).expect("finite affine");
    Ok((z, BnCache { mu, sigma, y_hat }))
}

/// Gradients produced by [`bn_backward`].
#[derive(Debug, Clone)]
pub struct BnGradients {
    /// Gradient with respect to the pre-normalization batch, `[m, d]`.
    pub input: Tensor,
    /// Per-unit gradient of gamma: sum_b dZ_j^(b) y_hat_j^(b).
    pub gamma: Vec<f64>,
    /// Per-unit gradient of beta: sum_b dZ_j^(b).
    pub beta: Vec<f64>,
}

/// Closed-form backward pass through the whitening transform:
/// `dY^(b) = gamma / (m sigma) * (m dZ^(b) - sum_k dZ^(k)
///           - y_hat^(b) * sum_k dZ^(k) y_hat^(k))` per unit.
pub fn bn_backward(
    cache: &BnCache,
    params: &BatchNormParams,
    dz: &Tensor,
) -> Result<BnGradients, NormError> {
    let (m, d) = (cache.y_hat.rows(), cache.y_hat.cols());
    if dz.shape() != [m, d] {
        return Err(NormError::ShapeMismatch {
            want: vec![m, d],
            got: dz.shape().to_vec(),
        });
    }
    let mut input = vec![0.0; m * d];
    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    for j in 0..d {
        let mut sum_dz = 0.0;
        let mut sum_dz_yh = 0.0;
        for b in 0..m {
            let g = dz.at(b, j);
            sum_dz += g;
            sum_dz_yh += g * cache.y_hat.at(b, j);
        }
        d_beta[j] = sum_dz;
        d_gamma[j] = sum_dz_yh;
        let scale = params.gamma[j] / (m as f64 * cache.sigma[j]);
        for b in 0..m {
            let g = dz.at(b, j);
            let h = cache.y_hat.at(b, j);
            input[b * d + j] = scale * (m as f64 * g - sum_dz - h * sum_dz_yh);
        }
    }
    Ok(BnGradients {
        input: Tensor::new(vec![m, d], input).expect("finite backward"),
        gamma: d_gamma,
        beta: d_beta,
    })
}

/// Explicit per-unit input Jacobian of the affine-normalized output:
/// `J_j[b][k] = gamma_j / sigma_j * (1[b=k] - 1/m - y_hat^(b) y_hat^(k) / m)`.
/// Returns one `[m, m]` matrix per unit; only intended for small batches.
pub fn bn_input_jacobian(
    cache: &BnCache,
    params: &BatchNormParams,
    limit: usize,
) -> Result<Vec<Tensor>, NormError> {
    let (m, d) = (cache.y_hat.rows(), cache.y_hat.cols());
    if m > limit {
        return Err(NormError::JacobianLimit { m, limit });
    }
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let scale = params.gamma[j] / cache.sigma[j];
        let inv_m = 1.0 / m as f64;
        let mut jac = vec![0.0; m * m];
        for b in 0..m {
            let hb = cache.y_hat.at(b, j);
            for k in 0..m {
                let hk = cache.y_hat.at(k, j);
                let indicator = if b == k { 1.0 } else { 0.0 };
                jac[b * m + k] = scale * (indicator - inv_m - hb * hk * inv_m);
            }
        }
        out.push(Tensor::new(vec![m, m], jac).expect("finite jacobian"));
    }
    Ok(out)
}

/// Per-step noise model parameters. At each step a per-unit center
/// `mu_t ~ U(-n_mu, n_mu)` and spread `sigma_t ~ U(1, n_sigma)` are drawn,
/// then every sample receives an affine perturbation with shift
/// `U(mu_t - r_mu, mu_t + r_mu)` and scale `N(sigma_t, r_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub n_mu: f64,
    pub n_sigma: f64,
    pub r_mu: f64,
    pub r_sigma: f64,
}

impl NoiseConfig {
    pub fn new(n_mu: f64, n_sigma: f64, r_mu: f64, r_sigma: f64) -> Result<Self, NormError> {
        if !(n_sigma >= 1.0) {
            return Err(NormError::BadConfig("n_sigma must be >= 1"));
        }
        if !(n_mu >= 0.0 && r_mu >= 0.0 && r_sigma >= 0.0) {
            return Err(NormError::BadConfig("n_mu, r_mu, r_sigma must be >= 0"));
        }
        Ok(NoiseConfig {
            n_mu,
            n_sigma,
            r_mu,
            r_sigma,
        })
    }

    /// No-op noise: scale 1, shift 0, no spread.
    pub fn degenerate() -> Self {
        NoiseConfig {
            n_mu: 0.0,
            n_sigma: 1.0,
            r_mu: 0.0,
            r_sigma: 0.0,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            n_mu: 0.5,
            n_sigma: 1.25,
            r_mu: 0.1,
            r_sigma: 0.1,
        }
    }
}

/// Draws the per-sample affine noise for step `t`: returns `(scale, shift)`
/// tensors of shape `[m, d]`. Every value is a pure function of
/// `(rng key, t, unit, sample)`, so the draw is independent of iteration
/// order and the same step always sees the same noise.
pub fn sample_step_noise(
    m: usize,
    d: usize,
    cfg: &NoiseConfig,
    rng: &Rng,
    t: u64,
) -> (Tensor, Tensor) {
    let mut scale = vec![0.0; m * d];
    let mut shift = vec![0.0; m * d];
    for j in 0..d {
        let mut unit_rng = rng.split(&[t, j as u64]);
        let mu_t = unit_rng.uniform(-cfg.n_mu, cfg.n_mu);
        let sigma_t = unit_rng.uniform(1.0, cfg.n_sigma);
        for i in 0..m {
            let mut s_rng = rng.split(&[t, j as u64, i as u64]);
            shift[i * d + j] = s_rng.uniform(mu_t - cfg.r_mu, mu_t + cfg.r_mu);
            scale[i * d + j] = s_rng.normal(sigma_t, cfg.r_sigma);
        }
    }
    (
        Tensor::new(vec![m, d], scale).expect("finite noise"),
        Tensor::new(vec![m, d], shift).expect("finite noise"),
    )
}

/// Applies step-`t` noise to normalized activations: `s .* z + m` elementwise.
pub fn noisy_bn_apply(z: &Tensor, cfg: &NoiseConfig, rng: &Rng, t: u64) -> Tensor {
    let (m, d) = (z.rows(), z.cols());
    let (scale, shift) = sample_step_noise(m, d, cfg, rng, t);
    let data = z
        .data()
        .iter()
        .zip(scale.data().iter().zip(shift.data().iter()))
        .map(|(&v, (&s, &a))| s * v + a)
        .collect();
    Tensor::new(vec![m, d], data).expect("finite noisy output")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpExponent {
    L1,
    L2,
    LInf,
}

impl LpExponent {
    pub fn label(self) -> &'static str {
        match self {
            LpExponent::L1 => "l1",
            LpExponent::L2 => "l2",
            LpExponent::LInf => "linf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpNormConfig {
    pub p: LpExponent,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LpCache {
    /// Per-unit batch mean (subtracted after the norm is measured).
    pub mu: Vec<f64>,
    /// Per-unit batch-averaged lp norm of the raw activations.
    pub nu: Vec<f64>,
}

/// Normalizes each unit by the batch average of its lp norm, measured on the
/// raw activations before the mean shift:
/// `nu_j = ((1/m) sum_b |y|^p)^(1/p)` (max for p = inf), then
/// `z = gamma * (y - mu) / (nu + eps) + beta`.
pub fn lp_norm_forward(y: &Tensor, cfg: &LpNormConfig) -> Result<(Tensor, LpCache), NormError> {
    let (m, d) = check_batch(y, cfg.gamma.len())?;
    let mut mu = vec![0.0; d];
    let mut nu = vec![0.0; d];
    for j in 0..d {
        let mut sum = 0.0;
        for b in 0..m {
            sum += y.at(b, j);
        }
        mu[j] = sum / m as f64;
        nu[j] = match cfg.p {
            LpExponent::L1 => (0..m).map(|b| y.at(b, j).abs()).sum::<f64>() / m as f64,
            LpExponent::L2 => {
                ((0..m).map(|b| y.at(b, j).powi(2)).sum::<f64>() / m as f64).sqrt()
            }
            LpExponent::LInf => (0..m)
                .map(|b| y.at(b, j).abs())
                .fold(f64::NEG_INFINITY, f64::max),
        };
        if nu[j] + cfg.eps == 0.0 {
            return Err(NormError::ZeroNorm { unit: j });
        }
    }
    let mut z = vec![0.0; m * d];
    for b in 0..m {
        for j in 0..d {
            z[b * d + j] = cfg.gamma[j] * (y.at(b, j) - mu[j]) / (nu[j] + cfg.eps) + cfg.beta[j];
        }
    }
    Ok((
        Tensor::new(vec![m, d], z).expect("finite lp output"),
        LpCache { mu, nu },
    ))
}

fn check_batch(y: &Tensor, units: usize) -> Result<(usize, usize), NormError> {
    if !y.is_matrix() || y.cols() != units {
        return Err(NormError::ShapeMismatch {
            want: vec![y.rows(), units],
            got: y.shape().to_vec(),
        });
    }
    let m = y.rows();
    if m < 2 {
        return Err(NormError::BatchTooSmall(m));
    }
    Ok((m, y.cols()))
}
