//! Randomized gradient checking for every differentiable op kind.
//!
//! Each op is embedded in a small scalar graph (its output is weighted by a
//! random constant and summed, so every output entry carries a distinct
//! upstream gradient), and the reverse-mode gradient of every root is
//! compared against central finite differences. Inputs with kinks (relu,
//! abs, col_max) or domain edges (sqrt, div_row) are sampled away from the
//! non-smooth set so the difference quotient is valid.

use crate::fdiff::{fd_grad, OracleError, FD_EPS};
use crate::graph::{EvalError, Graph, GraphError, NodeId, OpKind, DIFFERENTIABLE_OPS};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: OpKind,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Debug)]
pub enum GradCheckError {
    Graph(GraphError),
    Eval(EvalError),
    Oracle(OracleError),
}

impl From<GraphError> for GradCheckError {
    fn from(e: GraphError) -> Self {
        GradCheckError::Graph(e)
    }
}

impl From<EvalError> for GradCheckError {
    fn from(e: EvalError) -> Self {
        GradCheckError::Eval(e)
    }
}

impl From<OracleError> for GradCheckError {
    fn from(e: OracleError) -> Self {
        GradCheckError::Oracle(e)
    }
}

impl std::fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradCheckError::Graph(e) => write!(f, "{e}"),
            GradCheckError::Eval(e) => write!(f, "{e}"),
            GradCheckError::Oracle(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for GradCheckError {}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .unwrap()
}

/// Entries in [-1, 1] but at least `margin` away from zero.
fn off_zero_tensor(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u = rng.uniform(-1.0, 1.0);
            let s = if u >= 0.0 { 1.0 } else { -1.0 };
            s * (u.abs() * (1.0 - margin) + margin)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random batch whose per-column maximum leads by a clear gap, so the
/// col_max subgradient is locally exact.
fn gapped_max_tensor(rng: &mut Rng, m: usize, d: usize) -> Tensor {
    let mut t = uniform_tensor(rng, &[m, d], -1.0, 1.0);
    for j in 0..d {
        let mut best = 0usize;
        for b in 1..m {
            if t.at(b, j) > t.at(best, j) {
                best = b;
            }
        }
        let idx = best * d + j;
        let bumped = t.data()[idx] + 0.5;
        t.data_mut()[idx] = bumped;
    }
    t
}

/// Builds one random instance of the op under test: a graph whose scalar
/// output is the randomly weighted sum of the op's output, plus the root
/// bindings.
fn build_instance(
    kind: OpKind,
    rng: &mut Rng,
) -> Result<(Graph, Vec<(NodeId, Tensor)>), GradCheckError> {
    let mut g = Graph::new();
    let m = 2 + rng.index(6); // 2..=7
    let d = 1 + rng.index(7); // 1..=7
    let k = 1 + rng.index(7);
    let mut bindings: Vec<(NodeId, Tensor)> = Vec::new();
    let mut root = |g: &mut Graph, t: Tensor, binds: &mut Vec<(NodeId, Tensor)>| {
        let id = g.input(t.shape());
        binds.push((id, t));
        id
    };

    let out = match kind {
        OpKind::Input | OpKind::Constant => unreachable!("leaf kinds are not checked"),
        OpKind::MatMul => {
            let a = root(&mut g, uniform_tensor(rng, &[m, k], -1.0, 1.0), &mut bindings);
            let b = root(&mut g, uniform_tensor(rng, &[k, d], -1.0, 1.0), &mut bindings);
            g.matmul(a, b)?
        }
        OpKind::Add => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let b = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.add(a, b)?
        }
        OpKind::Sub => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let b = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.sub(a, b)?
        }
        OpKind::Mul => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let b = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.mul(a, b)?
        }
        OpKind::AddRow => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let r = root(&mut g, uniform_tensor(rng, &[1, d], -1.0, 1.0), &mut bindings);
            g.add_row(a, r)?
        }
        OpKind::SubRow => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let r = root(&mut g, uniform_tensor(rng, &[1, d], -1.0, 1.0), &mut bindings);
            g.sub_row(a, r)?
        }
        OpKind::MulRow => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let r = root(&mut g, uniform_tensor(rng, &[1, d], -1.0, 1.0), &mut bindings);
            g.mul_row(a, r)?
        }
        OpKind::DivRow => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            let r = root(&mut g, off_zero_tensor(rng, &[1, d], 0.5), &mut bindings);
            g.div_row(a, r)?
        }
        OpKind::ColMean => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.col_mean(a)?
        }
        OpKind::ColMax => {
            let a = root(&mut g, gapped_max_tensor(rng, m, d), &mut bindings);
            g.col_max(a)?
        }
        OpKind::Relu => {
            let a = root(&mut g, off_zero_tensor(rng, &[m, d], 0.01), &mut bindings);
            g.relu(a)
        }
        OpKind::Abs => {
            let a = root(&mut g, off_zero_tensor(rng, &[m, d], 0.01), &mut bindings);
            g.abs(a)
        }
        OpKind::Tanh => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.tanh(a)
        }
        OpKind::Sqrt => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], 0.1, 2.0), &mut bindings);
            g.sqrt(a)
        }
        OpKind::AddScalar => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.add_scalar(a, rng.uniform(-2.0, 2.0))
        }
        OpKind::MulScalar => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.mul_scalar(a, rng.uniform(-2.0, 2.0))
        }
        OpKind::SumAll => {
            let a = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            g.sum_all(a)
        }
        OpKind::SoftmaxCrossEntropy => {
            let logits = root(&mut g, uniform_tensor(rng, &[m, d], -1.0, 1.0), &mut bindings);
            // Soft targets exercise the target-side gradient too.
            let targets = root(&mut g, uniform_tensor(rng, &[m, d], 0.0, 1.0), &mut bindings);
            g.softmax_cross_entropy(logits, targets)?
        }
    };

    // Weighted reduction to a scalar: distinct upstream gradients per entry.
    let weights = g.constant(uniform_tensor(rng, g.shape_of(out).to_vec().as_slice(), 0.5, 1.5));
    let weighted = g.mul(out, weights)?;
    let loss = g.sum_all(weighted);
    g.mark_output(loss)?;
    Ok((g, bindings))
}

/// Checks one op kind over `instances` random instances, returning the worst
/// per-entry relative error between reverse-mode and central differences.
pub fn check_op(
    kind: OpKind,
    instances: usize,
    base_seed: u64,
) -> Result<GradCheckReport, GradCheckError> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = Rng::new(base_seed).split(&[kind as u64, i as u64]);
        let (mut g, bindings) = build_instance(kind, &mut rng)?;
        g.forward(&bindings)?;
        let grads = g.backward()?;
        for (slot, (root, value)) in bindings.iter().enumerate() {
            let fd = fd_grad(
                |probe| {
                    let mut probe_bindings = bindings.clone();
                    probe_bindings[slot].1 = probe.clone();
                    g.forward(&probe_bindings)
                },
                value,
                FD_EPS,
            )?;
            worst = worst.max(crate::tensor::max_rel_error(grads.get(*root), &fd));
        }
        // Re-establish the unperturbed state for the next instance.
        g.forward(&bindings)?;
    }
    Ok(GradCheckReport {
        op: kind,
        instances,
        max_rel_error: worst,
    })
}

/// Checks every differentiable op kind.
pub fn check_all_ops(
    instances: usize,
    base_seed: u64,
) -> Result<Vec<GradCheckReport>, GradCheckError> {
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&kind| check_op(kind, instances, base_seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_is_either_leaf_or_checked() {
        // The builder's match is exhaustive over OpKind, so this is mostly a
        // guard that the leaf set stays exactly {Input, Constant}.
        let leaves = [OpKind::Input, OpKind::Constant];
        for kind in leaves {
            assert!(!DIFFERENTIABLE_OPS.contains(&kind));
        }
        assert_eq!(DIFFERENTIABLE_OPS.len(), 18);
    }

    #[test]
    fn single_op_spot_checks() {
        for kind in [OpKind::MatMul, OpKind::DivRow, OpKind::SoftmaxCrossEntropy] {
            let report = check_op(kind, 10, 42).unwrap();
            assert!(
                report.max_rel_error < 1e-6,
                "{kind:?}: {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn backward_gradients_are_bit_stable_across_runs() {
        let mut rng = Rng::new(7).split(&[OpKind::MatMul as u64, 0]);
        let (mut g, bindings) = build_instance(OpKind::MatMul, &mut rng).unwrap();
        g.forward(&bindings).unwrap();
        let first = g.backward().unwrap();
        g.forward(&bindings).unwrap();
        let second = g.backward().unwrap();
        for (root, _) in &bindings {
            assert_eq!(first.get(*root).data(), second.get(*root).data());
        }
    }
}
