//! Per-class mixing coefficients of a batch gradient.
//!
//! For a dense layer followed by softmax cross-entropy, column `k` of the
//! weight gradient divided by bias gradient `k` is `sum_i lambda_i^k h_i`,
//! where `h_i` is the layer input for sample `i` and
//! `lambda_i^k = r_i^k / sum_j r_j^k` with residual `r_i^k = p_i^k - 1{y_i = k}`.
//! On a linear head `h_i = x_i`; on a deep model `h_i` are the last hidden
//! features, not inputs.

use std::fmt::Write as _;

use crate::autodiff::softmax_row;
use crate::error::{Error, Result};
use crate::fl::GradientCapture;
use crate::io::fmt_f64;
use crate::model::{self, Batch, ModelSpec};

/// Below this magnitude a per-class denominator is treated as singular.
pub const CONDITIONING_EPS: f64 = 1e-12;

/// `C x B` coefficients; row `k` is meaningful only where `valid[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMatrix {
    pub classes: usize,
    pub batch: usize,
    /// Row-major, `values[k * batch + i]`.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LambdaMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.batch..(k + 1) * self.batch]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.batch + i]
    }

    /// `Lambda X`: row `k` is `sum_i lambda_i^k x_i` (NaN rows where invalid).
    pub fn mix(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.batch {
            return Err(Error::invalid(format!(
                "{} rows for a batch of {}",
                x.len(),
                self.batch
            )));
        }
        let dim = x.first().map_or(0, Vec::len);
        Ok((0..self.classes)
            .map(|k| {
                if !self.valid[k] {
                    return vec![f64::NAN; dim];
                }
                let mut out = vec![0.0; dim];
                for (i, xi) in x.iter().enumerate() {
                    let l = self.get(k, i);
                    out.iter_mut().zip(xi).for_each(|(o, v)| *o += l * v);
                }
                out
            })
            .collect())
    }

    /// `class,valid,s0,s1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,valid");
        for i in 0..self.batch {
            let _ = write!(out, ",s{i}");
        }
        out.push('\n');
        for k in 0..self.classes {
            let _ = write!(out, "{k},{}", self.valid[k]);
            for v in self.row(k) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Residual-based coefficients from a forward pass on the true batch.
pub fn compute_lambda(
    spec: &ModelSpec,
    params: &crate::params::ParamVector,
    batch: &Batch,
) -> Result<LambdaMatrix> {
    batch.check(spec)?;
    let logits = model::logits(spec, params, batch.x())?;
    let c = spec.num_classes();
    let b = batch.len();
    let mut residual = vec![0.0; b * c];
    for i in 0..b {
        let row = &mut residual[i * c..(i + 1) * c];
        softmax_row(logits.row(i), row);
        row[batch.y()[i]] -= 1.0;
    }
    Ok(lambda_from_residuals(&residual, b, c))
}

/// Coefficients from a row-major `[B, C]` residual matrix.
pub fn lambda_from_residuals(residual: &[f64], batch: usize, classes: usize) -> LambdaMatrix {
    let mut values = vec![0.0; classes * batch];
    let mut valid = vec![false; classes];
    for k in 0..classes {
        let denom: f64 = (0..batch).map(|i| residual[i * classes + k]).sum();
        if denom.abs() < CONDITIONING_EPS {
            values[k * batch..(k + 1) * batch].fill(f64::NAN);
            continue;
        }
        valid[k] = true;
        for i in 0..batch {
            values[k * batch + i] = residual[i * classes + k] / denom;
        }
    }
    LambdaMatrix {
        classes,
        batch,
        values,
        valid,
    }
}

/// Per-class quotient `dW[:, k] / db[k]` of a dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAverage {
    /// One vector of the layer's input width per class; NaN where invalid.
    pub per_class: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// Recovers the per-class weighted averages of the inputs to dense layer
/// `layer` from a captured gradient.
pub fn weighted_average_from_grads(
    capture: &GradientCapture,
    spec: &ModelSpec,
    layer: usize,
) -> Result<WeightedAverage> {
    if layer >= spec.num_layers() {
        return Err(Error::invalid(format!(
            "layer {layer} out of {}",
            spec.num_layers()
        )));
    }
    if !spec.bias_at(layer) {
        return Err(Error::invalid(format!("layer {layer} has no bias")));
    }
    let (fan_in, fan_out) = (spec.layer_dims[layer], spec.layer_dims[layer + 1]);
    let gw = capture.batch_grad.segment(&ModelSpec::weight_name(layer))?;
    let gb = capture.batch_grad.segment(&ModelSpec::bias_name(layer))?;
    let mut per_class = Vec::with_capacity(fan_out);
    let mut valid = Vec::with_capacity(fan_out);
    for k in 0..fan_out {
        let ok = gb[k].abs() >= CONDITIONING_EPS;
        valid.push(ok);
        per_class.push(
            (0..fan_in)
                .map(|p| {
                    if ok {
                        gw[p * fan_out + k] / gb[k]
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        );
    }
    Ok(WeightedAverage { per_class, valid })
}

/// Concentration of one lambda row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowProfile {
    pub max: f64,
    /// Shannon entropy (nats) of `|lambda_i| / sum_j |lambda_j|`.
    pub entropy: f64,
}

/// Per-class summary; `None` for invalid rows.
pub fn lambda_bias_profile(lambda: &LambdaMatrix) -> Vec<Option<RowProfile>> {
    (0..lambda.classes)
        .map(|k| {
            if !lambda.valid[k] {
                return None;
            }
            let row = lambda.row(k);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mass: f64 = row.iter().map(|v| v.abs()).sum();
            let entropy = row
                .iter()
                .map(|v| v.abs() / mass)
                .filter(|p| *p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            Some(RowProfile { max, entropy })
        })
        .collect()
}

/// `class,valid,max_lambda,entropy`.
pub fn profile_csv(profile: &[Option<RowProfile>]) -> String {
    let mut out = String::from("class,valid,max_lambda,entropy\n");
    for (k, p) in profile.iter().enumerate() {
        match p {
            Some(p) => {
                let _ = writeln!(out, "{k},true,{},{}", fmt_f64(p.max), fmt_f64(p.entropy));
            }
            None => {
                let _ = writeln!(out, "{k},false,,");
            }
        }
    }
    out
}
