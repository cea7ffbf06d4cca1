//! Dense classifiers: the linear head `xW + b` and small MLPs.
//!
//! Parameters live in one flat [`ParamVector`] with segments `fc{l}.weight`
//! (shape `[fan_in, fan_out]`) and `fc{l}.bias` (shape `[fan_out]`).

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamVar, Var};
use crate::error::{Error, Result};
use crate::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

/// Slope assumed by the He initializer's leaky-ReLU gain.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Standard deviation of the `random` initializer.
pub const RANDOM_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    #[default]
    Random,
    Xavier,
    He,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "xavier" => Ok(Self::Xavier),
            "he" => Ok(Self::He),
            other => Err(Error::invalid(format!(
                "unknown init scheme {other:?} (expected random, xavier or he)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input width, hidden widths, class count.
    pub layer_dims: Vec<usize>,
    /// One per hidden layer.
    #[serde(default)]
    pub activations: Vec<Activation>,
    /// One per layer; empty means every layer has a bias.
    #[serde(default)]
    pub has_bias: Vec<bool>,
}

impl ModelSpec {
    /// The single-layer classifier `xW + b`.
    pub fn linear(inputs: usize, classes: usize) -> Self {
        Self {
            layer_dims: vec![inputs, classes],
            activations: Vec::new(),
            has_bias: vec![true],
        }
    }

    /// An MLP with the same activation on every hidden layer.
    pub fn mlp(dims: &[usize], activation: Activation) -> Self {
        let layers = dims.len().saturating_sub(1);
        Self {
            layer_dims: dims.to_vec(),
            activations: vec![activation; layers.saturating_sub(1)],
            has_bias: vec![true; layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated spec has layers")
    }

    pub fn bias_at(&self, layer: usize) -> bool {
        self.has_bias.get(layer).copied().unwrap_or(true)
    }

    /// Fills in implicit defaults (`has_bias` all true).
    pub fn normalized(mut self) -> Self {
        if self.has_bias.is_empty() {
            self.has_bias = vec![true; self.num_layers()];
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.num_layers();
        if layers == 0 {
            return Err(Error::invalid(
                "model needs at least one layer (two layer_dims)",
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.num_classes() < 2 {
            return Err(Error::invalid(
                "output width (class count) must be at least 2",
            ));
        }
        if self.activations.len() != layers - 1 {
            return Err(Error::invalid(format!(
                "{} hidden layers need {} activations, got {}",
                layers - 1,
                layers - 1,
                self.activations.len()
            )));
        }
        if !self.has_bias.is_empty() && self.has_bias.len() != layers {
            return Err(Error::invalid(format!(
                "has_bias needs {layers} entries, got {}",
                self.has_bias.len()
            )));
        }
        Ok(())
    }

    pub fn weight_name(layer: usize) -> String {
        format!("fc{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("fc{layer}.bias")
    }

    /// Name of the final dense layer's weight segment.
    pub fn last_weight(&self) -> String {
        Self::weight_name(self.num_layers() - 1)
    }

    pub fn last_bias(&self) -> String {
        Self::bias_name(self.num_layers() - 1)
    }

    pub fn layout(&self) -> Result<Arc<ParamLayout>> {
        self.validate()?;
        let mut parts = Vec::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            parts.push((Self::weight_name(l), vec![fan_in, fan_out]));
            if self.bias_at(l) {
                parts.push((Self::bias_name(l), vec![fan_out]));
            }
        }
        Ok(Arc::new(ParamLayout::new(parts)?))
    }

    /// Names of all dense weight segments, input layer first.
    pub fn weight_segments(&self) -> Vec<String> {
        (0..self.num_layers()).map(Self::weight_name).collect()
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.total())
    }
}

/// Labeled inputs: `x` is `[B, m]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    x: Tensor,
    y: Vec<usize>,
}

impl Batch {
    /// Builds a batch, clamping inputs into `[0, 1]`.
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::shape("batch (x must be [B, m])", &[x.shape()]));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("batch must hold at least one sample"));
        }
        if x.rows() != y.len() {
            return Err(Error::shape("batch", &[x.shape(), &[y.len()]]));
        }
        Ok(Self {
            x: x.clamp(0.0, 1.0),
            y,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<usize>) -> Result<Self> {
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged batch rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(Tensor::new(vec![rows.len(), m], data)?, y)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// The single-sample batch holding row `i`.
    pub fn sample(&self, i: usize) -> Result<Batch> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "sample {i} out of range {}",
                self.len()
            )));
        }
        Ok(Batch {
            x: Tensor::from_parts(vec![1, self.dim()], self.x.row(i).to_vec()),
            y: vec![self.y[i]],
        })
    }

    /// Rows reordered by ascending label (stable).
    pub fn sorted_by_label(&self) -> Batch {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.y[i]);
        let x = order
            .iter()
            .flat_map(|&i| self.x.row(i).iter().copied())
            .collect();
        Batch {
            x: Tensor::from_parts(vec![self.len(), self.dim()], x),
            y: order.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Checks dimensions and labels against a model.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim() != spec.input_dim() {
            return Err(Error::shape(
                "batch vs model input",
                &[self.x.shape(), &[spec.input_dim()]],
            ));
        }
        let c = spec.num_classes();
        if let Some(&bad) = self.y.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(())
    }
}

/// Deterministic parameter initialization. Biases start at zero.
pub fn init(spec: &ModelSpec, scheme: InitScheme, seed: u64) -> Result<ParamVector> {
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total()];
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        let seg = layout.require(&ModelSpec::weight_name(l))?;
        let out = &mut values[seg.range()];
        match scheme {
            InitScheme::Random => {
                let dist = Normal::new(0.0, RANDOM_INIT_STD).expect("positive std");
                out.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            InitScheme::Xavier => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                out.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            InitScheme::He => {
                let std = he_std(fan_in);
                let dist = Normal::new(0.0, std).expect("positive std");
                out.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
        }
    }
    ParamVector::new(layout, values)
}

/// Kaiming-normal standard deviation for a leaky-ReLU layer.
pub fn he_std(fan_in: usize) -> f64 {
    let gain_sq = 2.0 / (1.0 + LEAKY_RELU_SLOPE * LEAKY_RELU_SLOPE);
    (gain_sq / fan_in as f64).sqrt()
}

/// Affine + activation chain producing `[B, C]` logits.
pub fn forward<'g>(spec: &ModelSpec, theta: &ParamVar<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim() {
        return Err(Error::shape(
            "forward (x vs model input)",
            &[&shape, &[spec.input_dim()]],
        ));
    }
    let mut h = x;
    for l in 0..spec.num_layers() {
        let w = theta.segment(&ModelSpec::weight_name(l))?;
        h = h.matmul(w)?;
        if spec.bias_at(l) {
            h = h.add_row(theta.segment(&ModelSpec::bias_name(l))?)?;
        }
        if l + 1 < spec.num_layers() {
            h = match spec.activations[l] {
                Activation::Relu => h.relu(),
                Activation::Tanh => h.tanh(),
            };
        }
    }
    Ok(h)
}

/// Mean softmax cross-entropy over the batch.
pub fn loss<'g>(logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    logits.softmax_cross_entropy(y)
}

/// Batch loss as a recorded scalar, with `x` entering as a constant.
pub fn batch_loss<'g>(
    spec: &ModelSpec,
    theta: &ParamVar<'g, '_>,
    batch: &Batch,
) -> Result<Var<'g>> {
    let graph = theta.flat().graph();
    let x = graph.constant(batch.x().clone());
    loss(forward(spec, theta, x)?, batch.y())
}

/// Logit values for `x` (no gradient bookkeeping kept).
pub fn logits(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let theta = ParamVar::bind_constant(&graph, params);
    let xv = graph.constant(x.clone());
    Ok(forward(spec, &theta, xv)?.value())
}

/// Hidden features feeding the final dense layer (the input itself for a
/// linear head).
pub fn penultimate_features(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let theta = ParamVar::bind_constant(&graph, params);
    let mut h = graph.constant(x.clone());
    for l in 0..spec.num_layers() - 1 {
        h = h.matmul(theta.segment(&ModelSpec::weight_name(l))?)?;
        if spec.bias_at(l) {
            h = h.add_row(theta.segment(&ModelSpec::bias_name(l))?)?;
        }
        h = match spec.activations[l] {
            Activation::Relu => h.relu(),
            Activation::Tanh => h.tanh(),
        };
    }
    Ok(h.value())
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Vec<usize>> {
    let logits = logits(spec, params, x)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose [`predict`]ion equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, x: &Tensor, y: &[usize]) -> Result<f64> {
    if x.rows() != y.len() || y.is_empty() {
        return Err(Error::invalid(format!(
            "{} rows for {} labels",
            x.rows(),
            y.len()
        )));
    }
    let hits = predict(spec, params, x)?
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / y.len() as f64)
}
