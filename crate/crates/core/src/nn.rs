//! Fixed-topology multilayer perceptrons.
//!
//! A [`Mlp`] is a chain of dense layers `y = act(W x + b)` with `W` stored row-major as
//! `(out_dim, in_dim)`. Gradients are computed by hand-written reverse mode over a batch
//! ([`Mlp::forward_cached`] / [`Mlp::backward_batch`]) and applied with [`Adam`].

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, softplus, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at the pre-activation `z`. ReLU uses 0 at `z = 0`.
    #[inline]
    pub fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                S::one() - t * t
            }
            Activation::Softplus => sigmoid(z),
            Activation::Identity => S::one(),
        }
    }

    /// True when the activation is 1-Lipschitz, which the Lipschitz product bound relies on.
    pub fn is_one_lipschitz(self) -> bool {
        true
    }
}

/// One dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar> {
    weights: Array2<S>,
    bias: Array1<S>,
    activation: Activation,
}

impl<S: Scalar> Layer<S> {
    pub fn new(weights: Array2<S>, bias: Array1<S>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::dims("Layer::new (bias)", weights.nrows(), bias.len()));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::dims("Layer::new (empty)", 1, 0));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform fan-in initialization `U(-1/√in, 1/√in)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| S::lit(rng.gen_range(-bound..bound)));
        let bias = Array1::from_shape_fn(out_dim, |_| S::lit(rng.gen_range(-bound..bound)));
        Self {
            weights,
            bias,
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    #[inline]
    pub fn weights(&self) -> &Array2<S> {
        &self.weights
    }

    #[inline]
    pub fn bias(&self) -> &Array1<S> {
        &self.bias
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights_mut(&mut self) -> &mut Array2<S> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Array1<S> {
        &mut self.bias
    }
}

/// A feedforward network with a fixed chain of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", try_from = "MlpJson<S>", into = "MlpJson<S>")]
pub struct Mlp<S: Scalar> {
    layers: Vec<Layer<S>>,
}

/// Values recorded by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S: Scalar> {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<S>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<S>>,
    output: Array2<S>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn output(&self) -> &Array2<S> {
        &self.output
    }
}

impl<S: Scalar> Mlp<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dims("Mlp::new (layers)", 1, 0));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims("Mlp::new (chain)", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(Self { layers })
    }

    /// Random network with layer widths `dims` (input first), `hidden` activations on all but
    /// the last layer and `output` on the last.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                Layer::random(dims[k], dims[k + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    /// A network with every parameter zero except the final bias, so it outputs
    /// `act(constant)` everywhere. Handy for tests and for a frozen zero policy.
    pub fn constant(dims: &[usize], hidden: Activation, output: Activation, value: S) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                let mut bias = Array1::zeros(dims[k + 1]);
                if k + 1 == n {
                    bias.fill(value);
                }
                Layer {
                    weights: Array2::zeros((dims[k + 1], dims[k])),
                    bias,
                    activation: act,
                }
            })
            .collect();
        Self { layers }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    #[inline]
    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("Mlp::forward", self.input_dim(), x.len()));
        }
        let mut cur: Vec<S> = x.to_vec();
        for layer in &self.layers {
            let next = layer
                .weights
                .outer_iter()
                .zip(layer.bias.iter())
                .map(|(row, &b)| {
                    let z = row.iter().zip(&cur).fold(b, |acc, (&w, &v)| acc + w * v);
                    layer.activation.apply(z)
                })
                .collect();
            cur = next;
        }
        Ok(cur)
    }

    /// Scalar output of a single-output network.
    pub fn eval_scalar(&self, x: &[S]) -> Result<S> {
        if self.output_dim() != 1 {
            return Err(Error::dims("Mlp::eval_scalar", 1, self.output_dim()));
        }
        Ok(self.forward(x)?[0])
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("Mlp::forward_batch", self.input_dim(), x.ncols()));
        }
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut z = cur.dot(&layer.weights.t());
            z += &layer.bias.view().insert_axis(Axis(0));
            let act = layer.activation;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            cur = z;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, S>) -> Result<ForwardCache<S>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("Mlp::forward_cached", self.input_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut z = cur.dot(&layer.weights.t());
            z += &layer.bias.view().insert_axis(Axis(0));
            let act = layer.activation;
            let a = z.mapv(|v| act.apply(v));
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Reverse pass for the scalar objective `Σ_rows upstream_r · output_r`.
    ///
    /// Returns parameter gradients summed over rows and the gradient with respect to each
    /// input row.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache<S>,
        upstream: ArrayView2<'_, S>,
    ) -> Result<(Gradients<S>, Array2<S>)> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::dims(
                "Mlp::backward_batch",
                cache.output.ncols(),
                upstream.ncols(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                Zip::from(&mut delta)
                    .and(&cache.pre[k])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            grads.layers[k].0 = delta.t().dot(&cache.inputs[k]);
            grads.layers[k].1 = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weights);
        }
        Ok((grads, delta))
    }

    /// Single-sample reverse pass: gradients of `upstreamᵀ · forward(x)`.
    pub fn backward(&self, x: &[S], upstream: &[S]) -> Result<(Gradients<S>, Vec<S>)> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("Mlp::backward (input)", self.input_dim(), x.len()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::dims(
                "Mlp::backward (upstream)",
                self.output_dim(),
                upstream.len(),
            ));
        }
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let ub = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        let cache = self.forward_cached(xb)?;
        let (g, dx) = self.backward_batch(&cache, ub)?;
        Ok((g, dx.row(0).to_vec()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct LayerJson<S: Scalar> {
    w: Vec<S>,
    b: Vec<S>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct MlpJson<S: Scalar> {
    layers: Vec<LayerJson<S>>,
    input_dim: usize,
    output_dim: usize,
}

impl<S: Scalar> From<Mlp<S>> for MlpJson<S> {
    fn from(net: Mlp<S>) -> Self {
        let input_dim = net.input_dim();
        let output_dim = net.output_dim();
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerJson {
                w: l.weights.iter().copied().collect(),
                b: l.bias.to_vec(),
                act: l.activation,
            })
            .collect();
        Self {
            layers,
            input_dim,
            output_dim,
        }
    }
}

impl<S: Scalar> TryFrom<MlpJson<S>> for Mlp<S> {
    type Error = Error;

    fn try_from(json: MlpJson<S>) -> Result<Self> {
        let mut in_dim = json.input_dim;
        let mut layers = Vec::with_capacity(json.layers.len());
        for l in json.layers {
            let out_dim = l.b.len();
            if l.w.len() != out_dim * in_dim {
                return Err(Error::dims("network json (weights)", out_dim * in_dim, l.w.len()));
            }
            let w = Array2::from_shape_vec((out_dim, in_dim), l.w).expect("shape checked");
            layers.push(Layer::new(w, Array1::from(l.b), l.act)?);
            in_dim = out_dim;
        }
        let net = Mlp::new(layers)?;
        if net.output_dim() != json.output_dim {
            return Err(Error::dims(
                "network json (output_dim)",
                json.output_dim,
                net.output_dim(),
            ));
        }
        Ok(net)
    }
}

/// Per-layer weight and bias gradients, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S: Scalar> {
    pub layers: Vec<(Array2<S>, Array1<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &Mlp<S>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(S::zero());
            b.fill(S::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, c: S) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(c, ow);
            b.scaled_add(c, ob);
        }
    }

    pub fn scale(&mut self, c: S) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * c);
            b.mapv_inplace(|v| v * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| *v == S::zero()))
    }

    pub fn matches(&self, net: &Mlp<S>) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|((w, b), l)| w.dim() == l.weights.dim() && b.len() == l.bias.len())
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Gradients<S>,
    v: Gradients<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(net: &Mlp<S>, lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. A non-finite gradient aborts the step and leaves
    /// both the network and the optimizer state untouched.
    pub fn step(&mut self, net: &mut Mlp<S>, grads: &Gradients<S>) -> Result<()> {
        if !grads.matches(net) {
            return Err(Error::dims("Adam::step", net.layers.len(), grads.layers.len()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let (lr, eps) = (self.lr, self.eps);
        let one = S::one();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[k];
            let (mw, mb) = &mut self.m.layers[k];
            let (vw, vb) = &mut self.v.layers[k];
            Zip::from(&mut layer.weights)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            Zip::from(&mut layer.bias)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}
