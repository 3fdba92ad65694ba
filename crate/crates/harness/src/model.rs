//! Softmax regression and a one-hidden-layer MLP with hand-written backprop.
//!
//! Parameters live in one flat vector so the optimizers stay layout-agnostic.
//! Layout: softmax regression `[W (C×D), b (C)]`; MLP
//! `[W1 (H×D), b1 (H), W2 (C×H), b2 (C)]`. The head is always the trailing
//! `W, b` pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{Activation, ModelKind, OptimizerKind};

#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    input_dim: usize,
    classes: usize,
    params: Vec<f64>,
}

/// Scratch buffers for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    pub pre: Vec<f64>,
    pub latent: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let d = x.len();
    out.clear();
    out.extend(
        w.chunks_exact(d)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()),
    );
}

pub fn softmax(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|l| (l - max).exp()));
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
}

impl Model {
    pub fn new(kind: ModelKind, input_dim: usize, classes: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layer = |fan_in: usize, fan_out: usize, params: &mut Vec<f64>| {
            let std = init_scale / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let e: f64 = StandardNormal.sample(&mut rng);
                params.push(std * e);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        };
        match kind {
            ModelKind::SoftmaxRegression => layer(input_dim, classes, &mut params),
            ModelKind::Mlp { hidden_dim, .. } => {
                layer(input_dim, hidden_dim, &mut params);
                layer(hidden_dim, classes, &mut params);
            }
        }
        Self {
            kind,
            input_dim,
            classes,
            params,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Width of the representation fed to the head.
    pub fn latent_dim(&self) -> usize {
        match self.kind {
            ModelKind::SoftmaxRegression => self.input_dim,
            ModelKind::Mlp { hidden_dim, .. } => hidden_dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn head_offset(&self) -> usize {
        self.params.len() - self.classes * (self.latent_dim() + 1)
    }

    pub fn head_weights(&self) -> &[f64] {
        let o = self.head_offset();
        &self.params[o..o + self.classes * self.latent_dim()]
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.params[self.params.len() - self.classes..]
    }

    pub fn forward(&self, x: &[f64], act: &mut Activations) {
        match self.kind {
            ModelKind::SoftmaxRegression => {
                act.latent.clear();
                act.latent.extend_from_slice(x);
            }
            ModelKind::Mlp {
                hidden_dim,
                activation,
            } => {
                let d = self.input_dim;
                let (w1, rest) = self.params.split_at(hidden_dim * d);
                affine(w1, &rest[..hidden_dim], x, &mut act.pre);
                act.latent.clear();
                act.latent.extend(act.pre.iter().map(|&v| match activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                }));
            }
        }
        affine(self.head_weights(), self.head_bias(), &act.latent, &mut act.logits);
        softmax(&act.logits, &mut act.probs);
    }

    pub fn predict(&self, x: &[f64], act: &mut Activations) -> u32 {
        self.forward(x, act);
        argmax(&act.logits) as u32
    }

    /// Adds the cross-entropy gradient of one sample, scaled by `scale`, to
    /// `grad`. `act` must hold this sample's forward pass.
    pub fn accumulate_grad(&self, x: &[f64], label: usize, act: &Activations, scale: f64, grad: &mut [f64], dh: &mut Vec<f64>) {
        let (c, l) = (self.classes, self.latent_dim());
        let o = self.head_offset();
        for k in 0..c {
            let delta = scale * (act.probs[k] - if k == label { 1.0 } else { 0.0 });
            let row = &mut grad[o + k * l..o + (k + 1) * l];
            for (g, z) in row.iter_mut().zip(&act.latent) {
                *g += delta * z;
            }
            grad[o + c * l + k] += delta;
        }
        if let ModelKind::Mlp {
            hidden_dim,
            activation,
        } = self.kind
        {
            let d = self.input_dim;
            let w2 = self.head_weights();
            dh.clear();
            dh.resize(hidden_dim, 0.0);
            for k in 0..c {
                let delta = scale * (act.probs[k] - if k == label { 1.0 } else { 0.0 });
                for (h, w) in dh.iter_mut().zip(&w2[k * hidden_dim..(k + 1) * hidden_dim]) {
                    *h += delta * w;
                }
            }
            for j in 0..hidden_dim {
                let deriv = match activation {
                    Activation::Relu => (act.pre[j] > 0.0) as u8 as f64,
                    Activation::Tanh => 1.0 - act.latent[j] * act.latent[j],
                };
                let g = dh[j] * deriv;
                if g == 0.0 {
                    continue;
                }
                for (gw, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += g * xi;
                }
                grad[hidden_dim * d + j] += g;
            }
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            m: vec![0.0; n_params],
            v,
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                if momentum == 0.0 {
                    for (p, g) in params.iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                } else {
                    for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                        *m = momentum * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(model: &Model, x: &[f64], y: usize) -> f64 {
        let mut act = Activations::default();
        model.forward(x, &mut act);
        -act.probs[y].ln()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for kind in [
            ModelKind::SoftmaxRegression,
            ModelKind::Mlp { hidden_dim: 5, activation: Activation::Tanh },
            ModelKind::Mlp { hidden_dim: 5, activation: Activation::Relu },
        ] {
            let mut model = Model::new(kind, 4, 3, 1.0, 9);
            model.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i % 7) as f64);
            let x = [0.3, -1.2, 0.8, 2.0];
            let mut act = Activations::default();
            model.forward(&x, &mut act);
            let mut grad = vec![0.0; model.params().len()];
            model.accumulate_grad(&x, 1, &act, 1.0, &mut grad, &mut Vec::new());
            let h = 1e-6;
            for (i, &g) in grad.iter().enumerate() {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                let fd = (loss(&plus, &x, 1) - loss(&minus, &x, 1)) / (2.0 * h);
                assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} param {i}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn head_slices_are_trailing() {
        let m = Model::new(ModelKind::Mlp { hidden_dim: 6, activation: Activation::Relu }, 3, 4, 1.0, 1);
        assert_eq!(m.params().len(), 6 * 3 + 6 + 4 * 6 + 4);
        assert_eq!(m.head_weights().len(), 24);
        assert_eq!(m.head_bias().len(), 4);
        assert_eq!(m.latent_dim(), 6);
    }
}
