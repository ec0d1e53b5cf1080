//! Minimal dense-layer toolkit shared by the encoder and the temporal net:
//! seeded initialization, a linear layer with hand-derived backward, Adam on
//! flat parameter vectors, and flatten/unflatten helpers. Everything is f64
//! internally; checkpoints round to f32 on disk.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Fully connected layer computing `y = x W^T + b` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in` weight matrix.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// He-style init: weights ~ N(0, gain / in_dim), zero bias.
    pub fn seeded<R: Rng>(out_dim: usize, in_dim: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / in_dim as f64).sqrt();
        let mut w = Array2::zeros((out_dim, in_dim));
        for v in w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    /// `x`: `B x in` -> `B x out`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Given the layer input and the gradient of the loss w.r.t. the output,
    /// returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dout: &Array2<f64>,
        grads: &mut Linear,
    ) -> Array2<f64> {
        grads.w += &dout.t().dot(x);
        grads.b += &dout.sum_axis(ndarray::Axis(0));
        dout.dot(&self.w)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// In-place ReLU; returns the mask of positive entries for the backward pass.
pub fn relu_inplace(x: &mut Array2<f64>) -> Array2<f64> {
    let mut mask = Array2::zeros(x.raw_dim());
    for (v, m) in x.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = 1.0;
        } else {
            *v = 0.0;
        }
    }
    mask
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Flatten helpers used by the models' `param_vector`/`set_param_vector`.
pub fn push_linear(out: &mut Vec<f64>, l: &Linear) {
    out.extend(l.w.iter());
    out.extend(l.b.iter());
}

pub fn take_linear(src: &[f64], pos: &mut usize, l: &mut Linear) {
    for v in l.w.iter_mut() {
        *v = src[*pos];
        *pos += 1;
    }
    for v in l.b.iter_mut() {
        *v = src[*pos];
        *pos += 1;
    }
}

/// 64-bit mix used to derive independent sub-seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
