//! Dense rectifier networks with exact reverse-mode gradients and an Adam optimizer.
//!
//! Parameters live in one flat vector, layer by layer, weights (row-major,
//! `out x in`) followed by biases. Gradients share that layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("shape-mismatch(expected {expected}, got {got})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("stale-cache(cache from parameter version {cache}, net at {net})")]
    StaleCache { cache: u64, net: u64 },
    #[error("non-finite-gradient({tensor})")]
    NonFiniteGradient { tensor: String },
    #[error("invalid-layer-sizes({0:?})")]
    InvalidSizes(Vec<usize>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.params == other.params
    }
}

/// Activations recorded by [`DenseNet::forward`] for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl DenseNet {
    /// He-style uniform fan-in initialisation, zero biases.
    pub fn new(sizes: &[usize], rng: &mut RngStream) -> Result<Self, NetError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::InvalidSizes(sizes.to_vec()));
        }
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { sizes: sizes.to_vec(), params, version: 0 })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NetError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::InvalidSizes(sizes.to_vec()));
        }
        let expected = Self::param_count_for(sizes);
        if params.len() != expected {
            return Err(NetError::ShapeMismatch { expected, got: params.len() });
        }
        Ok(Self { sizes: sizes.to_vec(), params, version: 0 })
    }

    fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// `(name, range)` of every weight and bias tensor in the flat layout.
    pub fn tensors(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for (i, w) in self.sizes.windows(2).enumerate() {
            let nw = w[0] * w[1];
            out.push((format!("layer{i}.weight"), off..off + nw));
            out.push((format!("layer{i}.bias"), off + nw..off + nw + w[1]));
            off += nw + w[1];
        }
        out
    }

    /// Multiplies the last layer's weights by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.sizes.len();
        let (fan_in, fan_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        let start = self.params.len() - fan_out - fan_in * fan_out;
        for p in &mut self.params[start..start + fan_in * fan_out] {
            *p *= factor;
        }
        self.version += 1;
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache, NetError> {
        if x.len() != self.sizes[0] {
            return Err(NetError::ShapeMismatch { expected: self.sizes[0], got: x.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut input = x.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            off += n_in * n_out + n_out;
            let next = if l + 1 < layers { z.iter().map(|&v| relu(v)).collect() } else { Vec::new() };
            acts.push(std::mem::replace(&mut input, next));
            pre.push(z);
        }
        Ok(ForwardCache { acts, pre, version: self.version })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut cache = self.forward(x)?;
        Ok(cache.pre.pop().unwrap_or_default())
    }

    /// Adds the parameter gradient for `grad_out` into `grads` and returns the input gradient.
    pub fn backward_into(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) -> Result<Vec<f64>, NetError> {
        if cache.version != self.version {
            return Err(NetError::StaleCache { cache: cache.version, net: self.version });
        }
        if grad_out.len() != self.output_width() {
            return Err(NetError::ShapeMismatch { expected: self.output_width(), got: grad_out.len() });
        }
        if grads.len() != self.params.len() {
            return Err(NetError::ShapeMismatch { expected: self.params.len(), got: grads.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            if l + 1 < layers {
                for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.acts[l];
            let weights = &self.params[off..off + n_in * n_out];
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += d * a;
                }
                grads[off + n_in * n_out + o] += d;
                let row = &weights[o * n_in..(o + 1) * n_in];
                for (gi, w) in grad_in.iter_mut().zip(row) {
                    *gi += d * w;
                }
            }
            delta = grad_in;
        }
        Ok(delta)
    }

    /// Parameter gradient and input gradient for one cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let mut grads = vec![0.0; self.params.len()];
        let gin = self.backward_into(cache, grad_out, &mut grads)?;
        Ok((grads, gin))
    }
}

/// Log-softmax with max subtraction; `-inf` logits get `-inf` log-probability.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; logits.len()];
    }
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn softmax_logprob(logits: &[f64], index: usize) -> f64 {
    log_softmax(logits)[index]
}

/// Entropy of the categorical induced by `logits`; zero-probability classes contribute nothing.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .filter(|lp| lp.is_finite())
        .map(|lp| -lp.exp() * lp)
        .sum()
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }

    /// One bias-corrected update. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, net: &mut DenseNet, grads: &[f64]) -> Result<(), NetError> {
        if grads.len() != net.param_count() || self.m.len() != net.param_count() {
            return Err(NetError::ShapeMismatch { expected: net.param_count(), got: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let tensor = net
                .tensors()
                .into_iter()
                .find(|(_, r)| r.contains(&i))
                .map(|(n, _)| n)
                .unwrap_or_default();
            return Err(NetError::NonFiniteGradient { tensor });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let params = net.params_mut();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        debug_assert!(params.iter().all(|p| p.is_finite()));
        Ok(())
    }
}
