//! Model families, parameter state, and graph assembly.
//!
//! Two builders cover the experiments: a deep linear network (a chain of
//! square dense layers regressing a random linear map) and a small ReLU MLP
//! classifying a Gaussian mixture. Normalization layers are chosen by scheme
//! name from the registry and can be spliced after any dense layer.
//!
//! Parameter streams are split per dense-layer ordinal, so inserting or
//! removing normalization layers never shifts the dense initialization for a
//! given seed.

use thiserror::Error;

use crate::graph::{EvalError, Graph, GraphError, NodeId};
use crate::norm::scheme::{self, ParamInit, SchemeSettings};
use crate::norm::NoiseConfig;
use crate::probe::LossSurface;
use crate::rng::Rng;
use crate::tensor::Tensor;

const DENSE_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const MAP_STREAM: u64 = 3;

/// Parameter tensors grouped by layer, in layer order.
pub type Params = Vec<Vec<Tensor>>;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unknown normalization scheme \"{0}\"")]
    UnknownScheme(String),
    #[error("layer {index}: expected width {want}, got {got}")]
    WidthMismatch {
        index: usize,
        want: usize,
        got: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Description of a normalization layer: registry name plus its settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    pub scheme: String,
    pub eps: f64,
    pub noise: NoiseConfig,
}

impl NormSpec {
    pub fn new(scheme: impl Into<String>) -> Self {
        NormSpec {
            scheme: scheme.into(),
            eps: crate::norm::TRAIN_EPS,
            noise: NoiseConfig::default(),
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_noise(mut self, noise: NoiseConfig) -> Self {
        self.noise = noise;
        self
    }

    fn settings(&self) -> SchemeSettings {
        SchemeSettings {
            eps: self.eps,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { inp: usize, out: usize },
    Norm { spec: NormSpec, units: usize },
    Relu,
}

/// A layer spec together with its current parameter tensors.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over samples of the squared error (Frobenius norm over the batch
    /// divided by the batch size).
    MeanSquaredError,
    /// Mean over samples of the softmax cross-entropy against one-hot rows.
    SoftmaxCrossEntropy,
}

/// Ordered layers with current parameters. Layer index 0 is closest to the
/// input. Cloning yields a fully independent copy.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub layers: Vec<Layer>,
}

impl NetworkState {
    pub fn from_specs(specs: Vec<LayerSpec>, rng: &Rng) -> Result<Self, NetworkError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut dense_ordinal = 0u64;
        for spec in specs {
            let params = match &spec {
                LayerSpec::Dense { inp, out } => {
                    let mut stream = rng.split(&[DENSE_STREAM, dense_ordinal]);
                    dense_ordinal += 1;
                    vec![glorot_init(*inp, *out, &mut stream)]
                }
                LayerSpec::Norm { spec, units } => {
                    let scheme = scheme::create(&spec.scheme, &spec.settings())
                        .ok_or_else(|| NetworkError::UnknownScheme(spec.scheme.clone()))?;
                    scheme
                        .params()
                        .iter()
                        .map(|p| match p.init {
                            ParamInit::Ones => Tensor::full(&[1, *units], 1.0).unwrap(),
                            ParamInit::Zeros => Tensor::zeros(&[1, *units]),
                        })
                        .collect()
                }
                LayerSpec::Relu => Vec::new(),
            };
            layers.push(Layer { spec, params });
        }
        Ok(NetworkState { layers })
    }

    pub fn params(&self) -> Params {
        self.layers.iter().map(|l| l.params.clone()).collect()
    }

    pub fn set_params(&mut self, params: Params) {
        assert_eq!(params.len(), self.layers.len());
        for (layer, p) in self.layers.iter_mut().zip(params) {
            layer.params = p;
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0].spec {
            LayerSpec::Dense { inp, .. } => *inp,
            LayerSpec::Norm { units, .. } => *units,
            LayerSpec::Relu => panic!("network starts with a ReLU"),
        }
    }

    pub fn output_dim(&self) -> usize {
        let mut width = self.input_dim();
        for layer in &self.layers {
            if let LayerSpec::Dense { out, .. } = layer.spec {
                width = out;
            }
        }
        width
    }

    pub fn dense_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::Dense { .. }))
            .count()
    }
}

/// Groups layer indices into trainable units. A dense layer opens a bundle
/// and a following normalization layer's scale/shift join it, unless
/// `norm_params_separate` puts them in a bundle of their own. Parameter-free
/// layers belong to no bundle.
pub fn bundles(net: &NetworkState, norm_params_separate: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        match &layer.spec {
            LayerSpec::Dense { .. } => out.push(vec![i]),
            LayerSpec::Norm { .. } if !layer.params.is_empty() => {
                if norm_params_separate || out.is_empty() {
                    out.push(vec![i]);
                } else {
                    out.last_mut().unwrap().push(i);
                }
            }
            _ => {}
        }
    }
    out
}

/// Uniform Glorot initialization: entries drawn from U(-a, a) with
/// `a = sqrt(6 / (fan_in + fan_out))`, shaped `[fan_in, fan_out]`.
pub fn glorot_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-a, a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
}

/// Realized training set: inputs and (regression or one-hot) targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extracts the rows at `idx` into a new batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let di = self.inputs.cols();
        let dt = self.targets.cols();
        let mut xs = Vec::with_capacity(idx.len() * di);
        let mut ts = Vec::with_capacity(idx.len() * dt);
        for &i in idx {
            xs.extend_from_slice(&self.inputs.data()[i * di..(i + 1) * di]);
            ts.extend_from_slice(&self.targets.data()[i * dt..(i + 1) * dt]);
        }
        (
            Tensor::new(vec![idx.len(), di], xs).unwrap(),
            Tensor::new(vec![idx.len(), dt], ts).unwrap(),
        )
    }
}

/// A built model: network, data, and the loss joining them.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: NetworkState,
    pub data: Dataset,
    pub loss: LossKind,
}

#[derive(Debug, Clone)]
pub struct DlnConfig {
    pub depth: usize,
    pub dim: usize,
    pub n: usize,
    pub norm: Option<NormSpec>,
    /// Also normalize the output of the last dense layer (off by default so
    /// the regression head keeps the target scale).
    pub norm_after_last: bool,
}

impl Default for DlnConfig {
    fn default() -> Self {
        DlnConfig {
            depth: 25,
            dim: 10,
            n: 1000,
            norm: None,
            norm_after_last: false,
        }
    }
}

/// Deep linear network: `depth` square dense layers, no nonlinearity, mean
/// squared error against the action of a fixed random matrix on Gaussian
/// inputs. Dataset size equals the full-batch size.
pub fn build_dln(cfg: &DlnConfig, seed: u64) -> Result<Model, NetworkError> {
    assert!(cfg.depth >= 1 && cfg.dim >= 1 && cfg.n >= 1);
    let rng = Rng::new(seed);
    let mut specs = Vec::new();
    for k in 0..cfg.depth {
        specs.push(LayerSpec::Dense {
            inp: cfg.dim,
            out: cfg.dim,
        });
        let is_last = k + 1 == cfg.depth;
        if let Some(norm) = &cfg.norm {
            if !is_last || cfg.norm_after_last {
                specs.push(LayerSpec::Norm {
                    spec: norm.clone(),
                    units: cfg.dim,
                });
            }
        }
    }
    let net = NetworkState::from_specs(specs, &rng)?;

    let mut data_rng = rng.split(&[DATA_STREAM]);
    let inputs = Tensor::new(
        vec![cfg.n, cfg.dim],
        (0..cfg.n * cfg.dim)
            .map(|_| data_rng.standard_normal())
            .collect(),
    )
    .expect("finite inputs");
    let mut map_rng = rng.split(&[MAP_STREAM]);
    let a = Tensor::new(
        vec![cfg.dim, cfg.dim],
        (0..cfg.dim * cfg.dim)
            .map(|_| map_rng.standard_normal())
            .collect(),
    )
    .expect("finite map");
    let targets = crate::graph::matmul(&inputs, false, &a, false).expect("finite targets");
    Ok(Model {
        net,
        data: Dataset { inputs, targets },
        loss: LossKind::MeanSquaredError,
    })
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    /// Input width followed by hidden widths.
    pub dims: Vec<usize>,
    pub classes: usize,
    pub n: usize,
    pub norm: Option<NormSpec>,
    /// Distance scale of the mixture means relative to unit noise.
    pub mean_scale: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            dims: vec![16, 32, 32, 32, 32, 10],
            classes: 10,
            n: 1024,
            norm: None,
            mean_scale: 0.5,
        }
    }
}

/// ReLU MLP on a Gaussian-mixture classification task: dense -> [norm] ->
/// relu blocks followed by a dense head and softmax cross-entropy.
pub fn build_mlp(cfg: &MlpConfig, seed: u64) -> Result<Model, NetworkError> {
    assert!(cfg.dims.len() >= 2, "need at least input and one hidden dim");
    assert!(cfg.classes >= 2 && cfg.n >= 1);
    let rng = Rng::new(seed);
    let mut specs = Vec::new();
    for w in cfg.dims.windows(2) {
        specs.push(LayerSpec::Dense {
            inp: w[0],
            out: w[1],
        });
        if let Some(norm) = &cfg.norm {
            specs.push(LayerSpec::Norm {
                spec: norm.clone(),
                units: w[1],
            });
        }
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::Dense {
        inp: *cfg.dims.last().unwrap(),
        out: cfg.classes,
    });
    let net = NetworkState::from_specs(specs, &rng)?;

    let dim = cfg.dims[0];
    let mut map_rng = rng.split(&[MAP_STREAM]);
    let means: Vec<f64> = (0..cfg.classes * dim)
        .map(|_| cfg.mean_scale * map_rng.standard_normal())
        .collect();
    let mut data_rng = rng.split(&[DATA_STREAM]);
    let mut xs = Vec::with_capacity(cfg.n * dim);
    let mut ts = vec![0.0; cfg.n * cfg.classes];
    for i in 0..cfg.n {
        let label = data_rng.index(cfg.classes);
        for j in 0..dim {
            xs.push(means[label * dim + j] + data_rng.standard_normal());
        }
        ts[i * cfg.classes + label] = 1.0;
    }
    Ok(Model {
        net,
        data: Dataset {
            inputs: Tensor::new(vec![cfg.n, dim], xs).expect("finite inputs"),
            targets: Tensor::new(vec![cfg.n, cfg.classes], ts).unwrap(),
        },
        loss: LossKind::SoftmaxCrossEntropy,
    })
}

/// Per-step noise bindings, one slot per layer (None for noise-free layers).
pub type StepNoise = Vec<Option<(Tensor, Tensor)>>;

/// Samples the step-`t` noise for every noise-carrying layer. The stream for
/// layer `l` is derived by splitting on the layer index, and inside the layer
/// by (t, unit, sample).
pub fn sample_network_noise(net: &NetworkState, rng: &Rng, m: usize, t: u64) -> StepNoise {
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match &layer.spec {
            LayerSpec::Norm { spec, units } => {
                let settings = spec.settings();
                let scheme = scheme::create(&spec.scheme, &settings)?;
                scheme.noise().map(|cfg| {
                    let layer_rng = rng.split(&[l as u64]);
                    crate::norm::sample_step_noise(m, *units, &cfg, &layer_rng, t)
                })
            }
            _ => None,
        })
        .collect()
}

/// The network compiled to an autodiff graph for a fixed batch size.
#[derive(Debug)]
pub struct NetGraph {
    graph: Graph,
    input: NodeId,
    target: NodeId,
    param_nodes: Vec<Vec<NodeId>>,
    noise_nodes: Vec<Option<(NodeId, NodeId)>>,
    layer_outputs: Vec<NodeId>,
    prediction: NodeId,
    m: usize,
}

impl NetGraph {
    pub fn build(net: &NetworkState, loss: LossKind, m: usize) -> Result<Self, NetworkError> {
        let mut g = Graph::new();
        let input = g.data_input(&[m, net.input_dim()]);
        let mut width = net.input_dim();
        let mut current = input;
        let mut param_nodes = Vec::with_capacity(net.layers.len());
        let mut noise_nodes = Vec::with_capacity(net.layers.len());
        let mut layer_outputs = Vec::with_capacity(net.layers.len());
        for (index, layer) in net.layers.iter().enumerate() {
            match &layer.spec {
                LayerSpec::Dense { inp, out } => {
                    if *inp != width {
                        return Err(NetworkError::WidthMismatch {
                            index,
                            want: width,
                            got: *inp,
                        });
                    }
                    let w = g.input(&[*inp, *out]);
                    current = g.matmul(current, w)?;
                    width = *out;
                    param_nodes.push(vec![w]);
                    noise_nodes.push(None);
                }
                LayerSpec::Norm { spec, units } => {
                    if *units != width {
                        return Err(NetworkError::WidthMismatch {
                            index,
                            want: width,
                            got: *units,
                        });
                    }
                    let scheme = scheme::create(&spec.scheme, &spec.settings())
                        .ok_or_else(|| NetworkError::UnknownScheme(spec.scheme.clone()))?;
                    let pnodes: Vec<NodeId> = scheme
                        .params()
                        .iter()
                        .map(|_| g.input(&[1, width]))
                        .collect();
                    let nnodes = scheme.noise().map(|_| {
                        let s = g.data_input(&[m, width]);
                        let a = g.data_input(&[m, width]);
                        (s, a)
                    });
                    current = scheme.build(&mut g, current, &pnodes, nnodes)?;
                    param_nodes.push(pnodes);
                    noise_nodes.push(nnodes);
                }
                LayerSpec::Relu => {
                    current = g.relu(current);
                    param_nodes.push(Vec::new());
                    noise_nodes.push(None);
                }
            }
            layer_outputs.push(current);
        }
        let prediction = current;
        let target = g.data_input(&[m, width]);
        let loss_node = match loss {
            LossKind::MeanSquaredError => {
                let diff = g.sub(prediction, target)?;
                let sq = g.mul(diff, diff)?;
                let total = g.sum_all(sq);
                g.mul_scalar(total, 1.0 / m as f64)
            }
            LossKind::SoftmaxCrossEntropy => g.softmax_cross_entropy(prediction, target)?,
        };
        g.mark_output(loss_node)?;
        Ok(NetGraph {
            graph: g,
            input,
            target,
            param_nodes,
            noise_nodes,
            layer_outputs,
            prediction,
            m,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    fn bindings(
        &self,
        params: &Params,
        x: &Tensor,
        t: &Tensor,
        noise: &StepNoise,
    ) -> Vec<(NodeId, Tensor)> {
        let mut bindings = Vec::with_capacity(2 + params.iter().map(Vec::len).sum::<usize>() + 2);
        bindings.push((self.input, x.clone()));
        bindings.push((self.target, t.clone()));
        for (nodes, values) in self.param_nodes.iter().zip(params.iter()) {
            for (&node, value) in nodes.iter().zip(values.iter()) {
                bindings.push((node, value.clone()));
            }
        }
        for (slot, sample) in self.noise_nodes.iter().zip(noise.iter()) {
            if let (Some((sn, an)), Some((sv, av))) = (slot, sample) {
                bindings.push((*sn, sv.clone()));
                bindings.push((*an, av.clone()));
            }
        }
        bindings
    }

    pub fn forward(
        &mut self,
        params: &Params,
        x: &Tensor,
        t: &Tensor,
        noise: &StepNoise,
    ) -> Result<f64, EvalError> {
        let bindings = self.bindings(params, x, t, noise);
        self.graph.forward(&bindings)
    }

    /// Gradients per layer after a forward pass, aligned with the parameter
    /// structure.
    pub fn backward(&mut self) -> Result<Params, EvalError> {
        let grads = self.graph.backward()?;
        Ok(self
            .param_nodes
            .iter()
            .map(|nodes| nodes.iter().map(|&n| grads.get(n).clone()).collect())
            .collect())
    }

    /// Cached activation of the layer at `index` from the last forward pass.
    pub fn layer_output(&self, index: usize) -> Option<&Tensor> {
        self.graph.value(self.layer_outputs[index])
    }

    /// Cached network prediction from the last forward pass.
    pub fn prediction(&self) -> Option<&Tensor> {
        self.graph.value(self.prediction)
    }
}

/// A network plus a concrete batch and step noise: a callable loss surface
/// over the parameter vector.
#[derive(Debug)]
pub struct NetworkEval {
    pub graph: NetGraph,
    x: Tensor,
    t: Tensor,
    noise: StepNoise,
}

impl NetworkEval {
    pub fn new(
        net: &NetworkState,
        loss: LossKind,
        x: Tensor,
        t: Tensor,
    ) -> Result<Self, NetworkError> {
        let graph = NetGraph::build(net, loss, x.rows())?;
        let noise = vec![None; net.layers.len()];
        Ok(NetworkEval {
            graph,
            x,
            t,
            noise,
        })
    }

    pub fn set_batch(&mut self, x: Tensor, t: Tensor) {
        assert_eq!(x.rows(), self.graph.m, "batch size is fixed per graph");
        self.x = x;
        self.t = t;
    }

    pub fn set_noise(&mut self, noise: StepNoise) {
        self.noise = noise;
    }

    pub fn batch(&self) -> (&Tensor, &Tensor) {
        (&self.x, &self.t)
    }
}

impl LossSurface for NetworkEval {
    fn loss(&mut self, params: &Params) -> Result<f64, EvalError> {
        self.graph.forward(params, &self.x, &self.t, &self.noise)
    }

    fn loss_and_grads(&mut self, params: &Params) -> Result<(f64, Params), EvalError> {
        let loss = self.graph.forward(params, &self.x, &self.t, &self.noise)?;
        let grads = self.graph.backward()?;
        Ok((loss, grads))
    }
}

/// Flattens the parameters (or gradients) of the given layer indices into a
/// single vector, in layer order.
pub fn flatten_layers(params: &Params, layer_indices: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in layer_indices {
        for t in &params[i] {
            out.extend_from_slice(t.data());
        }
    }
    out
}

/// Flattens every parameter tensor into one vector.
pub fn flatten_all(params: &Params) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in params {
        for t in layer {
            out.extend_from_slice(t.data());
        }
    }
    out
}

/// `a + scale * b` over the whole parameter structure.
pub fn params_add_scaled(a: &Params, b: &Params, scale: f64) -> Params {
    a.iter()
        .zip(b.iter())
        .map(|(la, lb)| {
            la.iter()
                .zip(lb.iter())
                .map(|(ta, tb)| ta.add_scaled(tb, scale).expect("finite update"))
                .collect()
        })
        .collect()
}

pub fn params_norm(p: &Params) -> f64 {
    p.iter()
        .flat_map(|l| l.iter())
        .map(Tensor::squared_norm)
        .sum::<f64>()
        .sqrt()
}
