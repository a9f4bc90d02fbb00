//! Multi-layer perceptrons over the expression engine and the batched jet
//! kernel.
//!
//! Parameters live in one flat vector. Ordering is layer-major; within a
//! layer the weight matrix `W` (shape `out × in`) is stored row-major and is
//! followed by its bias vector. The output layer is affine with no
//! activation.

pub mod jet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Expr, Graph, VarId};
use crate::rng::{self, Gaussian};

pub use jet::{evaluate_values, JetForward, JetLayout};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input dimension {dim} has zero variance over the training set")]
    DegenerateDimension { dim: usize },
    #[error("expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sin,
    Tanh,
    Elu,
}

impl Activation {
    /// Xavier gain used when none is configured.
    pub fn default_gain(self) -> f64 {
        match self {
            Activation::Tanh => 5.0 / 3.0,
            _ => 1.0,
        }
    }

    /// Writes `f(x), f'(x), …` into `out` (as many orders as `out` holds).
    pub fn derivatives(self, x: f64, out: &mut [f64]) {
        match self {
            Activation::Sin => {
                let (s, c) = x.sin_cos();
                let cycle = [s, c, -s, -c];
                for (n, o) in out.iter_mut().enumerate() {
                    *o = cycle[n % 4];
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                let table = tanh_polynomials();
                for (n, o) in out.iter_mut().enumerate() {
                    *o = table[n].iter().rev().fold(0.0, |acc, c| acc * t + c);
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    out.fill(0.0);
                    out[0] = x;
                    if out.len() > 1 {
                        out[1] = 1.0;
                    }
                } else if x == 0.0 {
                    out.fill(0.0);
                    if out.len() > 1 {
                        out[1] = 1.0;
                    }
                } else {
                    let e = x.exp();
                    out.fill(e);
                    out[0] = x.exp_m1();
                }
            }
        }
    }

    pub fn apply(self, g: &mut Graph, e: Expr) -> Expr {
        match self {
            Activation::Sin => g.sin(e),
            Activation::Tanh => g.tanh(e),
            Activation::Elu => g.elu(e),
        }
    }
}

/// Coefficients (ascending powers of `t = tanh x`) of the first eight
/// derivatives of tanh.
fn tanh_polynomials() -> &'static [Vec<f64>] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = vec![vec![0.0, 1.0]];
        for n in 0..8 {
            let p = &table[n];
            // d/dx p(t) = p'(t) (1 - t²)
            let dp: Vec<f64> = (1..p.len()).map(|i| i as f64 * p[i]).collect();
            let mut next = vec![0.0; dp.len() + 2];
            for (i, c) in dp.iter().enumerate() {
                next[i] += c;
                next[i + 2] -= c;
            }
            table.push(next);
        }
        table
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Number of hidden layers; the network has `hidden_layers + 1` affine maps.
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    /// Xavier gain; `None` selects [`Activation::default_gain`].
    #[serde(default)]
    pub gain: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_layers: usize, width: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim: 1,
            hidden_layers,
            width,
            activation,
            gain: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn gain(&self) -> f64 {
        self.gain.unwrap_or_else(|| self.activation.default_gain())
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.hidden_layers == 0 {
            return bad("hidden_layers must be >= 1");
        }
        if self.width == 0 {
            return bad("width must be >= 1");
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dimensions must be >= 1");
        }
        if !(self.gain() > 0.0 && self.gain().is_finite()) {
            return bad("gain must be positive and finite");
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(std::iter::repeat(self.width).take(self.hidden_layers));
        d.push(self.output_dim);
        d
    }
}

/// Standard deviation of normal Xavier initialization.
pub fn xavier_std(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Flat parameter vector plus the layer shapes needed to read it.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    activation: Activation,
    pub values: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters for the given architecture.
    pub fn zeros(config: &MlpConfig) -> Self {
        let dims = config.dims();
        let n = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Self {
            dims,
            activation: config.activation,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(config: &MlpConfig, values: Vec<f64>) -> Result<Self, NetworkError> {
        let mut p = Self::zeros(config);
        if values.len() != p.values.len() {
            return Err(NetworkError::Shape {
                expected: p.values.len(),
                got: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of affine maps.
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offset of layer `l`'s weight block; its bias follows at
    /// `offset + out * in`.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.dims
            .windows(2)
            .take(l)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let o = self.layer_offset(l);
        &self.values[o..o + self.dims[l + 1] * self.dims[l]]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let o = self.layer_offset(l) + self.dims[l + 1] * self.dims[l];
        &self.values[o..o + self.dims[l + 1]]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.layer_offset(l);
        let n = self.dims[l + 1] * self.dims[l];
        &mut self.values[o..o + n]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.layer_offset(l) + self.dims[l + 1] * self.dims[l];
        let n = self.dims[l + 1];
        &mut self.values[o..o + n]
    }
}

/// Normal Xavier initialization with zero biases, drawn from the `init`
/// stream of `config.seed`.
pub fn init_mlp(config: &MlpConfig) -> Result<MlpParams, NetworkError> {
    config.validate()?;
    let mut params = MlpParams::zeros(config);
    let mut gauss = Gaussian::new(rng::stream(config.seed, rng::streams::INIT));
    for l in 0..params.num_layers() {
        let (fan_in, fan_out) = (params.dims[l], params.dims[l + 1]);
        let std = xavier_std(fan_in, fan_out, config.gain());
        for w in params.weights_mut(l) {
            *w = std * gauss.sample();
        }
    }
    Ok(params)
}

/// Per-dimension mean and population standard deviation of the training
/// inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits statistics to `points`, a row-major `n × dim` array.
    pub fn fit(points: &[f64], dim: usize) -> Result<Self, NetworkError> {
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        let mut mean = vec![0.0; dim];
        for row in points.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in points.chunks_exact(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(d) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(NetworkError::DegenerateDimension { dim: d });
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Output expressions of a network together with its parameter variables
/// in flat-vector order.
#[derive(Clone, Debug)]
pub struct NetworkExpr {
    pub outputs: Vec<Expr>,
    pub params: Vec<VarId>,
}

impl NetworkExpr {
    /// Binds the parameter variables to `params.values`.
    pub fn bind(&self, params: &MlpParams, bindings: &mut crate::autodiff::Bindings) {
        for (v, x) in self.params.iter().zip(&params.values) {
            bindings.set(*v, *x);
        }
    }
}

/// Builds the network as an expression over `inputs`. Input normalization
/// is folded into the graph, so input derivatives carry the `1/std` factor.
pub fn build_output_expr(
    graph: &mut Graph,
    params: &MlpParams,
    stats: &NormStats,
    inputs: &[VarId],
) -> NetworkExpr {
    assert_eq!(inputs.len(), params.dims[0]);
    assert_eq!(stats.dim(), params.dims[0]);
    let mut param_vars = Vec::with_capacity(params.len());
    let mut layer: Vec<Expr> = inputs
        .iter()
        .enumerate()
        .map(|(d, &v)| {
            let x = graph.var(v);
            let m = graph.constant(stats.mean[d]);
            let s = graph.constant(stats.std[d]);
            let c = graph.sub(x, m);
            graph.div(c, s)
        })
        .collect();
    let last = params.num_layers() - 1;
    for l in 0..params.num_layers() {
        let (n_in, n_out) = (params.dims[l], params.dims[l + 1]);
        let mut w = Vec::with_capacity(n_in * n_out);
        for i in 0..n_out {
            for j in 0..n_in {
                let v = graph.parameter(&format!("W{l}[{i},{j}]"));
                param_vars.push(v);
                w.push(graph.var(v));
            }
        }
        let mut b = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let v = graph.parameter(&format!("b{l}[{i}]"));
            param_vars.push(v);
            b.push(graph.var(v));
        }
        layer = (0..n_out)
            .map(|i| {
                let mut acc = b[i];
                for j in 0..n_in {
                    let t = graph.mul(w[i * n_in + j], layer[j]);
                    acc = graph.add(acc, t);
                }
                if l == last {
                    acc
                } else {
                    params.activation.apply(graph, acc)
                }
            })
            .collect();
    }
    NetworkExpr {
        outputs: layer,
        params: param_vars,
    }
}

/// `D^β output` for a multi-index `β` over `inputs`, by repeated symbolic
/// differentiation.
pub fn input_derivative_expr(graph: &mut Graph, output: Expr, inputs: &[VarId], beta: &[usize]) -> Expr {
    assert_eq!(inputs.len(), beta.len());
    let mut e = output;
    for (&v, &order) in inputs.iter().zip(beta) {
        e = graph.differentiate_n(e, v, order);
    }
    e
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const PARAMETER_ORDERING: &str = "layer-major; W (out x in) row-major, then b";

/// Serialized network state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub config: MlpConfig,
    pub norm: NormStats,
    pub ordering: String,
    pub params: Vec<f64>,
    #[serde(default)]
    pub task_params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(config: &MlpConfig, norm: &NormStats, params: &MlpParams, task_params: &[f64], epoch: usize) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch,
            seed: config.seed,
            config: config.clone(),
            norm: norm.clone(),
            ordering: PARAMETER_ORDERING.to_string(),
            params: params.values.clone(),
            task_params: task_params.to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<(Self, MlpParams), NetworkError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| NetworkError::Config(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NetworkError::Config(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        if ck.ordering != PARAMETER_ORDERING {
            return Err(NetworkError::Config(format!("unknown parameter ordering `{}`", ck.ordering)));
        }
        let params = MlpParams::from_values(&ck.config, ck.params.clone())?;
        Ok((ck, params))
    }
}
