//! Independent oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls into the recording graph: forward passes and losses are
//! plain loops so finite differences check the library's backward path
//! against a separate implementation.

#![allow(dead_code)]

use leaklab::model::{Activation, ModelSpec};
use leaklab::params::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain-loop MLP forward: returns `[B, C]` logits row-major.
pub fn mlp_logits(spec: &ModelSpec, params: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut width = spec.layer_dims[0];
    let mut offset = 0;
    for l in 0..spec.num_layers() {
        let out = spec.layer_dims[l + 1];
        let w = &params[offset..offset + width * out];
        offset += width * out;
        let b = if spec.bias_at(l) {
            let b = &params[offset..offset + out];
            offset += out;
            Some(b)
        } else {
            None
        };
        let mut next = vec![0.0; batch * out];
        for i in 0..batch {
            for j in 0..out {
                let mut s = b.map_or(0.0, |b| b[j]);
                for p in 0..width {
                    s += h[i * width + p] * w[p * out + j];
                }
                if l + 1 < spec.num_layers() {
                    s = match spec.activations[l] {
                        Activation::Relu => s.max(0.0),
                        Activation::Tanh => s.tanh(),
                    };
                }
                next[i * out + j] = s;
            }
        }
        h = next;
        width = out;
    }
    h
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean cross-entropy of row-major logits.
pub fn ce_loss(logits: &[f64], y: &[usize], classes: usize) -> f64 {
    let b = y.len();
    (0..b)
        .map(|i| {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y[i]]
        })
        .sum::<f64>()
        / b as f64
}

pub fn mlp_loss(spec: &ModelSpec, params: &[f64], x: &[f64], y: &[usize]) -> f64 {
    let logits = mlp_logits(spec, params, x, y.len());
    ce_loss(&logits, y, spec.num_classes())
}

/// Central finite-difference gradient.
pub fn central_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A random MLP configuration with Gaussian parameters and a random batch.
pub struct RandomProblem {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

pub fn random_problem(seed: u64) -> RandomProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(2..=6)];
    for _ in 1..depth {
        dims.push(rng.random_range(2..=7));
    }
    dims.push(rng.random_range(2..=4));
    let activations = (0..depth - 1)
        .map(|_| {
            if rng.random_bool(0.5) {
                Activation::Tanh
            } else {
                Activation::Relu
            }
        })
        .collect();
    let spec = ModelSpec {
        layer_dims: dims,
        activations,
        has_bias: (0..depth).map(|_| rng.random_bool(0.8)).collect(),
    };
    let layout = spec.layout().unwrap();
    let values = (0..layout.total())
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    let params = ParamVector::new(layout, values).unwrap();
    let batch = rng.random_range(1..=4);
    let x = (0..batch * spec.input_dim())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let y = (0..batch)
        .map(|_| rng.random_range(0..spec.num_classes()))
        .collect();
    RandomProblem { spec, params, x, y }
}

/// Smallest |pre-activation| of any ReLU unit; finite differences are only
/// trustworthy when this exceeds the step.
pub fn min_relu_margin(spec: &ModelSpec, params: &[f64], x: &[f64], batch: usize) -> f64 {
    let mut h = x.to_vec();
    let mut width = spec.layer_dims[0];
    let mut offset = 0;
    let mut margin = f64::INFINITY;
    for l in 0..spec.num_layers() {
        let out = spec.layer_dims[l + 1];
        let w = &params[offset..offset + width * out];
        offset += width * out;
        let b = if spec.bias_at(l) {
            let b = &params[offset..offset + out];
            offset += out;
            Some(b)
        } else {
            None
        };
        let mut next = vec![0.0; batch * out];
        for i in 0..batch {
            for j in 0..out {
                let mut s = b.map_or(0.0, |b| b[j]);
                for p in 0..width {
                    s += h[i * width + p] * w[p * out + j];
                }
                if l + 1 < spec.num_layers() {
                    if spec.activations[l] == Activation::Relu {
                        margin = margin.min(s.abs());
                    }
                    s = match spec.activations[l] {
                        Activation::Relu => s.max(0.0),
                        Activation::Tanh => s.tanh(),
                    };
                }
                next[i * out + j] = s;
            }
        }
        h = next;
        width = out;
    }
    margin
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
