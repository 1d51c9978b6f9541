//! Dense feed-forward networks with hand-written backprop.
//!
//! Networks map a `B x in` batch to `B x out`. Every mutation stamps the
//! network with a fresh id, and the forward cache remembers the stamp it was
//! produced under, so a cache can't be replayed against changed parameters.

mod checkpoint;
mod optim;
mod policy;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{soft_update, Adam, Optimizer, OptimizerKind, StepOutcome};
pub use policy::{gaussian_log_prob, score_function_gradient, squash, SquashedGaussianSample};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// tanh through a single `exp`; libm's tanh goes through `expm1` and dominated
/// training time for tanh networks. Below 1e-4 a short series avoids the
/// cancellation in `1 - e`. Relative error stays below 1e-12.
fn fast_tanh(z: f64) -> f64 {
    let a = z.abs();
    if a < 1e-4 {
        let z2 = z * z;
        return z * (1.0 - z2 / 3.0 * (1.0 - 0.4 * z2));
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => fast_tanh(z),
        }
    }

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
                let t = fast_tanh(z);
                1.0 - t * t
            }
        }
    }
}

/// Transform applied to the last affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OutputHead {
    Identity,
    /// `mid + half * tanh(z)` per column, mapping onto `[low, high]`.
    TanhScaled { low: Vec<f64>, high: Vec<f64> },
    /// The last layer emits `2n` columns: `n` means then `n` log-stds, the
    /// latter clamped to `[log_std_min, log_std_max]` (no gradient outside).
    Gaussian { log_std_min: f64, log_std_max: f64 },
}

impl OutputHead {
    pub fn gaussian() -> Self {
        OutputHead::Gaussian { log_std_min: LOG_STD_MIN, log_std_max: LOG_STD_MAX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(other: &Layer) -> Layer {
        Layer { weight: Array2::zeros(other.weight.raw_dim()), bias: Array1::zeros(other.bias.len()) }
    }

    fn for_each_param(&self, mut f: impl FnMut(f64)) {
        self.weight.iter().chain(self.bias.iter()).for_each(|x| f(*x));
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    head: OutputHead,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.activation == other.activation && self.head == other.head
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients { layers: net.layers.iter().map(Layer::zeros_like).collect() }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for l in &self.layers {
            l.for_each_param(|x| acc += x * x);
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.for_each_param(|x| out.push(x));
        }
        out
    }
}

impl Mlp {
    /// Builds a network with layer widths `sizes = [in, hidden.., out]`.
    ///
    /// For a Gaussian head the last entry is the action dimension `n`; the
    /// final layer is sized `2n`. Weights and biases start at
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], activation: Activation, head: OutputHead, seed: u64) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(NnError::Architecture(format!("need at least two positive widths, got {sizes:?}")));
        }
        let mut widths = sizes.to_vec();
        match &head {
            OutputHead::Identity => {}
            OutputHead::TanhScaled { low, high } => {
                let n = *widths.last().unwrap();
                if low.len() != n || high.len() != n {
                    return Err(NnError::Architecture(format!("bounds must have {n} entries")));
                }
                if low.iter().zip(high).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
                    return Err(NnError::Architecture("bounds must satisfy low < high".into()));
                }
            }
            OutputHead::Gaussian { log_std_min, log_std_max } => {
                if !(log_std_min < log_std_max) {
                    return Err(NnError::Architecture("log_std_min must be below log_std_max".into()));
                }
                *widths.last_mut().unwrap() *= 2;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { layers, activation, head, stamp: fresh_stamp() })
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation, head: OutputHead) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(NnError::Architecture(format!("layer {i}: bias length {} vs {} rows", l.bias.len(), l.weight.nrows())));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(NnError::Architecture(format!("layer {i} does not chain with layer {}", i - 1)));
            }
        }
        let out = layers.last().unwrap().weight.nrows();
        match &head {
            OutputHead::Identity => {}
            OutputHead::TanhScaled { low, high } => {
                if low.len() != out || high.len() != out {
                    return Err(NnError::Architecture(format!("bounds must have {out} entries")));
                }
            }
            OutputHead::Gaussian { .. } => {
                if out % 2 != 0 {
                    return Err(NnError::Architecture("gaussian head needs an even output width".into()));
                }
            }
        }
        Ok(Self { layers, activation, head, stamp: fresh_stamp() })
    }

    /// Multiplies the last layer's parameters by `scale` (small initial outputs).
    pub fn with_final_layer_scale(mut self, scale: f64) -> Self {
        let last = self.layers.last_mut().unwrap();
        last.weight *= scale;
        last.bias *= scale;
        self.touch();
        self
    }

    fn touch(&mut self) {
        self.stamp = fresh_stamp();
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    /// Width of the forward output (for a Gaussian head, `2n`).
    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.for_each_param(|x| out.push(x));
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::Shape(format!("{} params for a {}-param net", params.len(), self.param_count())));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = *it.next().unwrap());
        }
        self.touch();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    fn check_input(&self, input: &ArrayView2<'_, f64>) -> Result<(), NnError> {
        if input.ncols() != self.in_dim() {
            return Err(NnError::Shape(format!("input width {} vs network input {}", input.ncols(), self.in_dim())));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn affine(layer: &Layer, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    fn apply_head(&self, z: &Array2<f64>) -> Array2<f64> {
        match &self.head {
            OutputHead::Identity => z.clone(),
            OutputHead::TanhScaled { low, high } => {
                let mut out = z.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let (mid, half) = (0.5 * (high[j] + low[j]), 0.5 * (high[j] - low[j]));
                        *v = mid + half * v.tanh();
                    }
                }
                out
            }
            OutputHead::Gaussian { log_std_min, log_std_max } => {
                let n = z.ncols() / 2;
                let mut out = z.clone();
                out.slice_mut(ndarray::s![.., n..]).mapv_inplace(|v| v.clamp(*log_std_min, *log_std_max));
                out
            }
        }
    }

    /// Forward pass returning the output and the cache needed by [`Mlp::backward`].
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache), NnError> {
        self.check_input(&input)?;
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &x.view());
            let next = if i + 1 < depth { z.mapv(|v| self.activation.apply(v)) } else { self.apply_head(&z) };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        Ok((x, ForwardCache { stamp: self.stamp, inputs, pre }))
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&input)?;
        let depth = self.layers.len();
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &x.view());
            x = if i + 1 < depth { z.mapv(|v| self.activation.apply(v)) } else { self.apply_head(&z) };
        }
        Ok(x)
    }

    /// Reverse-mode pass. `grad_output` is dL/d(output); returns parameter
    /// gradients and dL/d(input).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        if cache.stamp != self.stamp {
            return Err(NnError::StaleCache);
        }
        let last = cache.pre.last().unwrap();
        if grad_output.dim() != last.dim() {
            return Err(NnError::Shape(format!("output gradient {:?} vs output {:?}", grad_output.dim(), last.dim())));
        }
        let mut g = grad_output.to_owned();
        match &self.head {
            OutputHead::Identity => {}
            OutputHead::TanhScaled { low, high } => {
                for (mut grow, zrow) in g.rows_mut().into_iter().zip(last.rows()) {
                    for j in 0..grow.len() {
                        let t = zrow[j].tanh();
                        grow[j] *= 0.5 * (high[j] - low[j]) * (1.0 - t * t);
                    }
                }
            }
            OutputHead::Gaussian { log_std_min, log_std_max } => {
                let n = last.ncols() / 2;
                Zip::from(g.slice_mut(ndarray::s![.., n..]))
                    .and(last.slice(ndarray::s![.., n..]))
                    .for_each(|gv, &z| {
                        if z < *log_std_min || z > *log_std_max {
                            *gv = 0.0;
                        }
                    });
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                Zip::from(&mut g).and(&cache.pre[i]).for_each(|gv, &z| *gv *= self.activation.derivative(z));
            }
            let weight = g.t().dot(&cache.inputs[i]);
            let bias = g.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            g = g.dot(&self.layers[i].weight);
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }
}

/// Row-wise concatenation `[a | b]`, used to feed `(state, action)` to critics.
pub fn concat_columns(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
    ndarray::concatenate(Axis(1), &[a, b]).map_err(|e| NnError::Shape(e.to_string()))
}
