//! Dense feed-forward networks with a recorded reverse pass.
//!
//! Parameters are stored as `f32`. Every forward and backward computation
//! widens them to `f64` first, so a network is an exact function of its stored
//! parameters and reductions accumulate in double precision.
//!
//! Batches are row-major `Array2<f64>` with one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`; relu uses 0 at the kink.
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
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One affine layer followed by an element-wise activation.
///
/// `weight` has shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bounds");
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
        Dense {
            weight,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn weight_f64(&self) -> Array2<f64> {
        self.weight.mapv(f64::from)
    }

    fn bias_f64(&self) -> Array1<f64> {
        self.bias.mapv(f64::from)
    }

    /// Pre-activations `x Wᵀ + b`.
    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight_f64().t());
        z += &self.bias_f64();
        z
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A feed-forward stack of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    /// Builds a network, checking that layer dimensions chain and every
    /// parameter is finite.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    format!("layer {} input", i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::dim(format!("layer {i} bias"), layer.out_dim(), layer.bias.len()));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Glorot-initialised MLP through `dims` (`dims[0]` is the input width).
    /// Hidden layers use `hidden`, the last layer uses `output`.
    pub fn mlp<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dims, hidden, output, |i, o, a| Dense::glorot(i, o, a, rng))
    }

    /// Same topology as [`DenseNet::mlp`] with every parameter zero.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::build(dims, hidden, output, Dense::zeros)
    }

    fn build(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        mut make: impl FnMut(usize, usize, Activation) -> Dense,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer widths {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| make(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Dense {
        &mut self.layers[index]
    }

    pub fn last_layer(&self) -> &Dense {
        self.layers.last().expect("non-empty by construction")
    }

    pub fn last_layer_mut(&mut self) -> &mut Dense {
        self.layers.last_mut().expect("non-empty by construction")
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.last_layer().out_dim()
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters in canonical order: per layer, row-major weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_range(0, self.layers.len(), x)
    }

    /// Output of the first `n` layers (post-activation).
    pub fn forward_prefix(&self, n: usize, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_range(0, n, x)
    }

    /// Runs layers `start..` on an input that is already the activation of
    /// layer `start - 1`.
    pub fn forward_from(&self, start: usize, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_range(start, self.layers.len(), x)
    }

    fn forward_range(&self, start: usize, end: usize, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if start >= end || end > self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "layer range {start}..{end} outside a {}-layer network",
                self.layers.len()
            )));
        }
        let expected = self.layers[start].in_dim();
        if x.ncols() != expected {
            return Err(Error::dim("network input", expected, x.ncols()));
        }
        let mut h = x.to_owned();
        for layer in &self.layers[start..end] {
            let act = layer.activation;
            h = layer.affine(h.view()).mapv_into(|z| act.apply(z));
        }
        Ok(h)
    }

    /// Forward pass that records the intermediates `backward` needs.
    pub fn forward_recorded(&self, x: ArrayView2<f64>, tape: &mut GradTape) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::dim("network input", self.in_dim(), x.ncols()));
        }
        tape.ensure_shape(self)?;
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let pre = layer.affine(h.view());
            let act = layer.activation;
            let out = pre.mapv(|z| act.apply(z));
            trace.push(LayerTrace { input: h, pre });
            h = out;
        }
        tape.trace = Some(trace);
        Ok(h)
    }

    /// Reverse pass for the most recent [`forward_recorded`](Self::forward_recorded).
    ///
    /// `grad_out` is the loss gradient w.r.t. the network output. Parameter
    /// gradients are accumulated into `tape.grads`; the gradient w.r.t. the
    /// network input is returned. The recorded trace is consumed.
    pub fn backward(&self, tape: &mut GradTape, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        let trace = tape.trace.take().ok_or(Error::NoForwardRecord)?;
        if trace.len() != self.layers.len() {
            return Err(Error::dim("recorded layers", self.layers.len(), trace.len()));
        }
        let rows = trace[0].input.nrows();
        if grad_out.dim() != (rows, self.out_dim()) {
            return Err(Error::dim("output gradient width", self.out_dim(), grad_out.ncols()));
        }
        let mut grad = grad_out.to_owned();
        for ((layer, rec), acc) in self
            .layers
            .iter()
            .zip(&trace)
            .zip(tape.grads.layers.iter_mut())
            .rev()
        {
            let act = layer.activation;
            let mut dz = grad;
            dz.zip_mut_with(&rec.pre, |g, &z| *g *= act.derivative(z));
            acc.weight += &dz.t().dot(&rec.input);
            acc.bias += &dz.sum_axis(Axis(0));
            grad = dz.dot(&layer.weight_f64());
        }
        Ok(grad)
    }
}

struct LayerTrace {
    input: Array2<f64>,
    pre: Array2<f64>,
}

/// Gradient accumulators for one network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Gradients in the same canonical order as [`DenseNet::params`].
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len())
    }
}

/// Recorded forward pass plus gradient accumulators for one network.
pub struct GradTape {
    trace: Option<Vec<LayerTrace>>,
    pub grads: NetGrads,
    pub loss: f64,
}

impl GradTape {
    pub fn new(net: &DenseNet) -> Self {
        GradTape {
            trace: None,
            grads: NetGrads::zeros_like(net),
            loss: 0.0,
        }
    }

    /// Drops any recorded pass and zeroes the accumulators.
    pub fn reset(&mut self) {
        self.trace = None;
        self.loss = 0.0;
        for l in &mut self.grads.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }

    fn ensure_shape(&self, net: &DenseNet) -> Result<()> {
        if self.grads.matches(net) {
            Ok(())
        } else {
            Err(Error::InvalidInput("gradient tape was built for a different topology".into()))
        }
    }
}
