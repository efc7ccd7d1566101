//! Fully connected Q-network with ReLU hidden layers and a linear head,
//! trained with Adam.
//!
//! The network is generic over the float type: training runs in `f32`, the
//! finite-difference gradient checker runs the same code in `f64`.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

/// Header magic of the checkpoint format.
pub const CHECKPOINT_MAGIC: &str = "SPARTQ";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub trait Real:
    Float + LinalgScalar + ScalarOperand + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Layer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Per-parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        GradientSet {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == T::zero()))
    }

    /// Adds `2 * lambda * W` to every weight gradient (biases untouched).
    pub fn add_l2(&mut self, net: &Mlp<T>, lambda: f64) {
        let k = T::of(2.0 * lambda);
        for (g, l) in self.layers.iter_mut().zip(&net.layers) {
            g.weight.scaled_add(k, &l.weight);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    layers: Vec<Layer<T>>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input to each layer.
    inputs: Vec<Array2<T>>,
    /// Pre-activations of each layer; the last one is the output.
    pre: Vec<Array2<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Array2<T> {
        self.pre.last().expect("network has layers")
    }

    /// Which hidden units are active, flattened.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = &self.pre[..self.pre.len() - 1];
        hidden.iter().flat_map(|z| z.iter().map(|v| *v > T::zero())).collect()
    }
}

impl<T: Real> Mlp<T> {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (input, output) = (w[0], w[1]);
                let limit = (6.0 / input as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                Layer {
                    weight: Array2::from_shape_simple_fn((output, input), || T::of(dist.sample(&mut rng))),
                    bias: Array1::zeros(output),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Dims("no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(NeuralError::Dims(format!("layer {k}: bias/weight rows differ")));
            }
            if k > 0 && layers[k - 1].weight.nrows() != l.weight.ncols() {
                return Err(NeuralError::Dims(format!("layer {k}: input does not match previous output")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.ncols()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("layers").weight.nrows()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<(), NeuralError> {
        if x.ncols() != self.input_dim() {
            return Err(NeuralError::Dims(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Q-values for a batch of states (one per row).
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>, NeuralError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t()) + &l.bias;
            if k < last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: ArrayView2<T>) -> Result<Trace<T>, NeuralError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.weight.t()) + &l.bias;
            let next = if k < last { z.mapv(relu) } else { z.clone() };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(Trace { inputs, pre })
    }

    /// Gradients of `sum(upstream * output)` with respect to every parameter.
    pub fn backward(&self, trace: &Trace<T>, upstream: ArrayView2<T>) -> Result<GradientSet<T>, NeuralError> {
        if upstream.raw_dim() != trace.output().raw_dim() {
            return Err(NeuralError::Dims(format!(
                "upstream gradient is {:?}, output is {:?}",
                upstream.shape(),
                trace.output().shape()
            )));
        }
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let weight = delta.t().dot(&trace.inputs[k]);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            if k > 0 {
                let mut back = delta.dot(&l.weight);
                Zip::from(&mut back).and(&trace.pre[k - 1]).for_each(|d, z| {
                    if *z <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok(GradientSet { layers: grads })
    }

    /// `sum |w|^2` over weight matrices, biases excluded.
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter())
            .map(|w| w.f64() * w.f64())
            .sum()
    }

    /// Overwrites this network's parameters with `source`'s.
    pub fn copy_from(&mut self, source: &Mlp<T>) -> Result<(), NeuralError> {
        if self.dims() != source.dims() {
            return Err(NeuralError::Dims(format!(
                "cannot copy {:?} into {:?}",
                source.dims(),
                self.dims()
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weight.assign(&src.weight);
            dst.bias.assign(&src.bias);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| U::of(v.f64())),
                    bias: l.bias.mapv(|v| U::of(v.f64())),
                })
                .collect(),
        }
    }
}

impl Mlp<f32> {
    /// The state-to-action network for a `g x g` grid.
    pub fn q_network(g: usize, hidden: [usize; 2], seed: u64) -> Self {
        Mlp::new(&q_network_dims(g, hidden), seed)
    }
}

pub fn q_network_dims(g: usize, hidden: [usize; 2]) -> Vec<usize> {
    vec![(g + 1) * (g + 1) * 3, hidden[0], hidden[1], 2 * g * g]
}

/// `target <- main`.
pub fn sync_target<T: Real>(main: &Mlp<T>, target: &mut Mlp<T>) -> Result<(), NeuralError> {
    target.copy_from(main)
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    first: Vec<Layer<T>>,
    second: Vec<Layer<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &Mlp<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: net.layers.iter().map(Layer::zeros_like).collect(),
            second: net.layers.iter().map(Layer::zeros_like).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected
    /// before any parameter changes.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &GradientSet<T>) -> Result<(), NeuralError> {
        if grads.layers.len() != net.layers.len() {
            return Err(NeuralError::Dims("gradient layer count differs from network".into()));
        }
        for (k, (g, l)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if g.weight.raw_dim() != l.weight.raw_dim() || g.bias.raw_dim() != l.bias.raw_dim() {
                return Err(NeuralError::Dims(format!("gradient shape differs in layer {k}")));
            }
            if !g.is_finite() {
                return Err(NeuralError::NonFinite { layer: k });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let update = |p: &mut T, m: &mut T, v: &mut T, g: &T| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };
        for k in 0..net.layers.len() {
            let (l, g) = (&mut net.layers[k], &grads.layers[k]);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            Zip::from(&mut l.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(update);
            Zip::from(&mut l.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(update);
        }
        Ok(())
    }
}

/// Finite-difference comparison of [`Mlp::backward`] against the scalar
/// loss `sum(upstream * forward(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a ReLU.
    pub skipped: usize,
}

/// Central differences with step `h`. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(net: &Mlp<f64>, x: ArrayView2<f64>, upstream: ArrayView2<f64>, h: f64) -> Result<GradCheck, NeuralError> {
    let trace = net.forward_trace(x)?;
    let analytic = net.backward(&trace, upstream)?;
    let pattern = trace.relu_pattern();
    let loss_and_pattern = |n: &Mlp<f64>| -> Result<(f64, Vec<bool>), NeuralError> {
        let t = n.forward_trace(x)?;
        let loss = (t.output() * &upstream).sum();
        Ok((loss, t.relu_pattern()))
    };
    let mut probe = net.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for k in 0..net.layers.len() {
        let n_weights = net.layers[k].weight.len();
        let n_bias = net.layers[k].bias.len();
        for idx in 0..n_weights + n_bias {
            let original = *param_mut(&mut probe, k, idx);
            *param_mut(&mut probe, k, idx) = original + h;
            let (plus, pat_plus) = loss_and_pattern(&probe)?;
            *param_mut(&mut probe, k, idx) = original - h;
            let (minus, pat_minus) = loss_and_pattern(&probe)?;
            *param_mut(&mut probe, k, idx) = original;
            if pat_plus != pattern || pat_minus != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = if idx < n_weights {
                let cols = analytic.layers[k].weight.ncols();
                analytic.layers[k].weight[[idx / cols, idx % cols]]
            } else {
                analytic.layers[k].bias[idx - n_weights]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Parameter `idx` of layer `k`: weights row-major, then biases.
fn param_mut<T: Real>(net: &mut Mlp<T>, k: usize, idx: usize) -> &mut T {
    let l = &mut net.layers[k];
    let n_weights = l.weight.len();
    if idx < n_weights {
        let cols = l.weight.ncols();
        &mut l.weight[[idx / cols, idx % cols]]
    } else {
        &mut l.bias[idx - n_weights]
    }
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> NeuralError {
    NeuralError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn push_layers(buf: &mut Vec<u8>, layers: &[Layer<f32>]) {
    for l in layers {
        for v in l.weight.iter().chain(l.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes network and optimizer state:
/// `SPARTQ v1 <in> <h1> <h2> <out>\n`, then little-endian `f32` parameters
/// (layer by layer, weights row-major then bias), the same layout for the
/// first and second Adam moments, and the step counter as `u64`.
pub fn checkpoint_bytes(net: &Mlp<f32>, opt: &AdamState<f32>) -> Result<Vec<u8>, NeuralError> {
    let dims = net.dims();
    if dims.len() != 4 {
        return Err(NeuralError::Dims(format!("checkpoints hold 3-layer networks, got dims {dims:?}")));
    }
    let mut buf = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {} {} {}\n",
        dims[0], dims[1], dims[2], dims[3]
    )
    .into_bytes();
    buf.reserve(net.num_params() * 12 + 8);
    push_layers(&mut buf, &net.layers);
    push_layers(&mut buf, &opt.first);
    push_layers(&mut buf, &opt.second);
    buf.extend_from_slice(&opt.step.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Mlp<f32>, opt: &AdamState<f32>) -> Result<(), NeuralError> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(net, opt)?;
    crate::io::write_atomic(path, &bytes).map_err(|e| ckpt_err(path, e.to_string()))
}

/// Parses a checkpoint. With `expected_dims`, a network of any other shape
/// is rejected. Nothing is returned unless the whole file is consistent.
pub fn parse_checkpoint(
    bytes: &[u8],
    expected_dims: Option<&[usize]>,
    config: AdamConfig,
    path: &Path,
) -> Result<(Mlp<f32>, AdamState<f32>), NeuralError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| ckpt_err(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| ckpt_err(path, "header is not text"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, format!("not a checkpoint header: {header:?}")));
    }
    if fields[1] != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {}", fields[1])));
    }
    let dims = fields[2..]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| ckpt_err(path, format!("bad dims in header {header:?}")))?;
    if dims.contains(&0) {
        return Err(ckpt_err(path, format!("zero dimension in {dims:?}")));
    }
    if let Some(expected) = expected_dims {
        if expected != dims.as_slice() {
            return Err(ckpt_err(
                path,
                format!("network dims {dims:?} do not match expected dims {expected:?}"),
            ));
        }
    }
    let template: Mlp<f32> = Mlp::zeros(&dims);
    let n = template.num_params();
    let body = &bytes[nl + 1..];
    if body.len() != n * 3 * 4 + 8 {
        return Err(ckpt_err(
            path,
            format!("body is {} bytes, expected {} for dims {dims:?}", body.len(), n * 12 + 8),
        ));
    }
    let mut floats = body[..n * 12]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut read_layers = || -> Vec<Layer<f32>> {
        template
            .layers
            .iter()
            .map(|l| {
                let mut out = l.clone();
                for v in out.weight.iter_mut().chain(out.bias.iter_mut()) {
                    *v = floats.next().expect("length checked");
                }
                out
            })
            .collect()
    };
    let net = Mlp { layers: read_layers() };
    let first = read_layers();
    let second = read_layers();
    let step = u64::from_le_bytes(body[n * 12..].try_into().expect("8 bytes"));
    if !net.is_finite() {
        return Err(ckpt_err(path, "non-finite parameters"));
    }
    Ok((
        net,
        AdamState {
            config,
            first,
            second,
            step,
        },
    ))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected_dims: Option<&[usize]>,
    config: AdamConfig,
) -> Result<(Mlp<f32>, AdamState<f32>), NeuralError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    parse_checkpoint(&bytes, expected_dims, config, path)
}
