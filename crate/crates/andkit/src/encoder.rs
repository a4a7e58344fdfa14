//! A small MLP encoder `f(x) = normalize(W_L σ(… σ(W_1 x + b_1) …) + b_L)`
//! with hand-written backward pass and Nesterov SGD.

use crate::numerics::{Mat64, SeededRng, NORM_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::format(format!("unknown activation id {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2f64.sqrt(),
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths from input to output feature dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        EncoderConfig {
            layer_sizes,
            activation: Activation::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("encoder needs an input size and at least one layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.output_dim() < 2 {
            return Err(Error::config("output feature dimension must be >= 2"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Weight is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: Mat64::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }
}

/// Encoder weights. Gradients and momentum buffers reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// Scaled-uniform fan-in initialisation, zero biases.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let gain = config.activation.init_gain();
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                layer
                    .weight
                    .values_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.uniform(-bound, bound));
                layer
            })
            .collect();
        Ok(EncoderParams {
            activation: config.activation,
            layers,
        })
    }

    /// Zero-filled parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.cols(), l.weight.rows()))
                .collect(),
        }
    }

    /// Every layer set to the identity map. Only valid when all widths match.
    #[doc(hidden)]
    pub fn identity(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim();
        if config.layer_sizes.iter().any(|&s| s != d) {
            return Err(Error::config("identity encoder needs equal layer widths"));
        }
        Ok(EncoderParams {
            activation: config.activation,
            layers: (1..config.layer_sizes.len())
                .map(|_| Layer {
                    weight: Mat64::identity(d),
                    bias: vec![0.0; d],
                })
                .collect(),
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    /// Flat view in layer order: weights then bias of each layer.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.values_mut().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    /// Convenience wrapper around [`forward`] that drops the cache.
    pub fn features(&self, inputs: &Mat64) -> Result<Mat64> {
        forward(self, inputs).map(|(f, _)| f)
    }
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    activations: Vec<Mat64>,
    /// Pre-activations of every layer, final layer last.
    pre: Vec<Mat64>,
    /// L2 norm of each final pre-normalization row.
    norms: Vec<f64>,
    features: Mat64,
}

fn affine(layer: &Layer, input: &Mat64) -> Mat64 {
    let mut out = input
        .matmul_transposed(&layer.weight)
        .expect("shape checked by caller");
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    out
}

/// Batch forward pass. Returns unit-norm feature rows and the cache.
pub fn forward(params: &EncoderParams, inputs: &Mat64) -> Result<(Mat64, ForwardCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::Dimension {
            expected: params.input_dim(),
            actual: inputs.cols(),
        });
    }
    let act = params.activation;
    let mut activations = vec![inputs.clone()];
    let mut pre = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(layer, activations.last().unwrap());
        if l < last {
            let mut a = z.clone();
            a.values_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            activations.push(a);
        }
        pre.push(z);
    }
    let z = pre.last().unwrap();
    let mut features = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let row = features.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n < NORM_EPS {
            return Err(Error::DegenerateFeature { sample: r, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    let cache = ForwardCache {
        activations,
        pre,
        norms,
        features: features.clone(),
    };
    Ok((features, cache))
}

/// Gradient of the unit-sphere projection `y = z/‖z‖`:
/// `∂L/∂z = (g − ⟨g, y⟩ y) / ‖z‖`.
pub fn normalize_backward(g: &[f64], y: &[f64], norm: f64) -> Vec<f64> {
    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    g.iter().zip(y).map(|(gi, yi)| (gi - gy * yi) / norm).collect()
}

/// Parameter gradients given `∂L/∂features` for the batch in `cache`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_features: &Mat64) -> Result<EncoderParams> {
    let batch = cache.features.rows();
    let shapes_match = cache.pre.len() == params.layers.len()
        && cache.activations.len() == params.layers.len()
        && params.layers.iter().enumerate().all(|(l, layer)| {
            cache.pre[l].cols() == layer.weight.rows()
                && cache.activations[l].cols() == layer.weight.cols()
        });
    if !shapes_match {
        return Err(Error::contract("forward cache does not match these parameters"));
    }
    if grad_features.rows() != batch || grad_features.cols() != params.output_dim() {
        return Err(Error::contract(format!(
            "feature gradient is {}x{}, cache holds {}x{}",
            grad_features.rows(),
            grad_features.cols(),
            batch,
            params.output_dim()
        )));
    }
    let act = params.activation;
    let mut grads = params.zeros_like();

    let mut delta = Mat64::zeros(batch, params.output_dim());
    for r in 0..batch {
        let dz = normalize_backward(grad_features.row(r), cache.features.row(r), cache.norms[r]);
        delta.row_mut(r).copy_from_slice(&dz);
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &cache.activations[l];
        let (fan_out, fan_in) = (layer.weight.rows(), layer.weight.cols());
        let g = &mut grads.layers[l];
        for r in 0..batch {
            let d = delta.row(r);
            let a = input.row(r);
            for o in 0..fan_out {
                if d[o] == 0.0 {
                    continue;
                }
                g.bias[o] += d[o];
                let wrow = g.weight.row_mut(o);
                for (w, &x) in wrow.iter_mut().zip(a) {
                    *w += d[o] * x;
                }
            }
        }
        if l == 0 {
            break;
        }
        let below = &cache.pre[l - 1];
        let mut next = Mat64::zeros(batch, fan_in);
        for r in 0..batch {
            let d = delta.row(r);
            let out = next.row_mut(r);
            for o in 0..fan_out {
                if d[o] == 0.0 {
                    continue;
                }
                for (v, &w) in out.iter_mut().zip(layer.weight.row(o)) {
                    *v += d[o] * w;
                }
            }
            for (v, &z) in out.iter_mut().zip(below.row(r)) {
                *v *= act.derivative(z);
            }
        }
        delta = next;
    }
    Ok(grads)
}

/// Step-decay schedule: `base` until `first_decay`, then multiplied by
/// `factor` every `step` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub first_decay: f64,
    pub step: f64,
    pub factor: f64,
}

/// Epoch count the default schedule boundaries are written for.
pub const REFERENCE_EPOCHS: usize = 200;

impl LrSchedule {
    /// 0.1× after 80 epochs and every 40 after that.
    pub fn standard(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            first_decay: 80.0,
            step: 40.0,
            factor: 0.1,
        }
    }

    /// The standard boundaries stretched to a run of `epochs` instead of
    /// [`REFERENCE_EPOCHS`].
    pub fn scaled(base_lr: f64, epochs: usize) -> Self {
        let s = epochs as f64 / REFERENCE_EPOCHS as f64;
        let std = Self::standard(base_lr);
        LrSchedule {
            first_decay: std.first_decay * s,
            step: std.step * s,
            ..std
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        if e < self.first_decay {
            return self.base_lr;
        }
        let decays = if self.step > 0.0 {
            1 + ((e - self.first_decay) / self.step).floor() as i32
        } else {
            1
        };
        self.base_lr * self.factor.powi(decays)
    }
}

/// Learning rate of the unscaled schedule.
pub fn lr_at(epoch: usize, base_lr: f64) -> f64 {
    LrSchedule::standard(base_lr).lr_at(epoch)
}

/// Momentum buffers and step settings for Nesterov SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: EncoderParams,
    pub lr: f64,
    pub momentum: f64,
    pub epoch: usize,
}

impl OptimState {
    pub fn new(params: &EncoderParams, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(OptimState {
            velocity: params.zeros_like(),
            lr,
            momentum,
            epoch: 0,
        })
    }
}

/// Nesterov update: `v ← μv − lr·g`, then `θ ← θ + μv − lr·g`.
pub fn sgd_nesterov_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut OptimState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(Error::contract("gradient or momentum shape differs from parameters"));
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient, step aborted".into()));
    }
    let (mu, lr) = (state.momentum, state.lr);
    for ((p, v), &g) in params
        .values_mut()
        .zip(state.velocity.values_mut())
        .zip(grads.values())
    {
        *v = mu * *v - lr * g;
        *p += mu * *v - lr * g;
    }
    Ok(())
}
