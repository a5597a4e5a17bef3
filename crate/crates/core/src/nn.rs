//! Minimal dense network with hand-derived reverse-mode gradients.
//!
//! Kept deliberately small: dense layers, LeakyReLU, and exact backprop that
//! can be cross-checked against central finite differences. Parameters are
//! also exposed as a flat vector so tests can perturb them one coordinate at
//! a time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(slope) => {
                if pre > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize, activation: Activation) -> Self {
        Self {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
            activation,
        }
    }

    /// Uniform Glorot-style init in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = DMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-a..a));
        Self { weight, bias: DVector::zeros(out_dim), activation }
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Forward-pass cache: input plus pre- and post-activations per layer.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
}

/// Per-layer parameter gradients, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: mlp.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = &layer.weight * &h + &layer.bias;
            h = pre.map(|v| layer.activation.apply(v));
        }
        h
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        let mut cache = MlpCache { input: x.clone(), pre: Vec::new(), post: Vec::new() };
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = &layer.weight * &h + &layer.bias;
            let post = pre.map(|v| layer.activation.apply(v));
            cache.pre.push(pre);
            cache.post.push(post.clone());
            h = post;
        }
        (h, cache)
    }

    /// Backpropagate `grad_out` (gradient of some scalar with respect to the
    /// network output) through the cached forward pass. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DVector<f64>) -> (MlpGrads, DVector<f64>) {
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            // d/d pre = d/d post * act'(pre)
            for i in 0..delta.len() {
                delta[i] *= layer.activation.derivative(pre[i]);
            }
            let below: &DVector<f64> = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            grads.weights[l] = &delta * below.transpose();
            grads.biases[l] = delta.clone();
            delta = layer.weight.transpose() * &delta;
        }
        (grads, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in l.bias.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
    }

    /// Gradients flattened in the same order as `to_flat`.
    pub fn grads_to_flat(&self, grads: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}
