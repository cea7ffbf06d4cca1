//! Passive reconstruction from a captured gradient: gradient matching with a
//! squared-L2 distance, label inference from the last-layer sign pattern,
//! and an IG-style variant matching by cosine with a total-variation prior.
//!
//! The optimizer is plain gradient descent on the dummy batch, clamped to
//! `[0, 1]` after every step. Each step differentiates through the model's
//! gradient, so the graph is built twice over.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamVar, Var};
use crate::error::{Error, Result};
use crate::fl::GradientCapture;
use crate::io::{self, fmt_f64, Header};
use crate::metrics::{self, ImageShape};
use crate::model::{self, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const ZERO_GRAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dlg,
    Ig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    SquaredL2,
    /// `1 - cos(g', g)`, which is zero at a perfect match.
    NegativeCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    pub iterations: usize,
    pub step_size: f64,
    /// Used by [`Method::Ig`] only.
    #[serde(default)]
    pub tv_weight: f64,
    pub distance: Distance,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cosine_decay: bool,
    /// Spatial reading of a sample for the TV prior; a single row if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
    /// When non-empty, each step size is tried in turn and the run with the
    /// lowest match loss is kept (ties go to the earlier candidate).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_candidates: Vec<f64>,
}

fn default_restarts() -> usize {
    2
}

impl AttackConfig {
    pub fn dlg(iterations: usize, step_size: f64) -> Self {
        Self {
            method: Method::Dlg,
            iterations,
            step_size,
            tv_weight: 0.0,
            distance: Distance::SquaredL2,
            restarts: default_restarts(),
            seed: 0,
            cosine_decay: false,
            image: None,
            step_candidates: Vec::new(),
        }
    }

    pub fn ig(iterations: usize, step_size: f64, tv_weight: f64) -> Self {
        Self {
            method: Method::Ig,
            tv_weight,
            distance: Distance::NegativeCosine,
            ..Self::dlg(iterations, step_size)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_candidates(mut self, steps: &[f64]) -> Self {
        self.step_candidates = steps.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("attack needs at least one iteration"));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "tv_weight {} must be >= 0",
                self.tv_weight
            )));
        }
        for &s in std::iter::once(&self.step_size).chain(&self.step_candidates) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("step size {s} must be > 0")));
            }
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        if self.cosine_decay {
            let frac = t as f64 / self.iterations as f64;
            0.5 * self.step_size * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.step_size
        }
    }
}

/// Labels guessed from the captured last layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInference {
    /// Sorted ascending.
    pub labels: Vec<usize>,
    /// Fewer negative class entries than samples, so some labels are guesses.
    pub low_confidence: bool,
}

/// Picks the `B` classes with the most negative last-layer bias gradient
/// (or weight-column sum when the head has no bias; valid because the
/// head's inputs are non-negative after ReLU or in `[0, 1]`).
pub fn idlg_infer_labels(capture: &GradientCapture, spec: &ModelSpec) -> Result<LabelInference> {
    let c = spec.num_classes();
    let b = capture.batch_size();
    if b == 0 || b > c {
        return Err(Error::invalid(format!(
            "cannot infer {b} labels from {c} classes"
        )));
    }
    let last = spec.num_layers() - 1;
    let signal: Vec<f64> = if spec.bias_at(last) {
        capture.batch_grad.segment(&spec.last_bias())?.to_vec()
    } else {
        let w = capture.batch_grad.segment(&spec.last_weight())?;
        (0..c).map(|k| w.iter().skip(k).step_by(c).sum()).collect()
    };
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| signal[i].total_cmp(&signal[j]).then(i.cmp(&j)));
    let negatives = signal.iter().filter(|v| **v < 0.0).count();
    let mut labels = order[..b].to_vec();
    labels.sort_unstable();
    Ok(LabelInference {
        labels,
        low_confidence: negatives < b,
    })
}

/// Anisotropic TV of `x` read as `B` images: the sum of absolute horizontal
/// and vertical neighbor differences.
pub fn total_variation(x: &Tensor, shape: ImageShape) -> Result<f64> {
    let (right, down) = tv_pairs(x, shape)?;
    let d = x.data();
    Ok(right
        .iter()
        .chain(&down)
        .map(|&(a, b)| (d[a] - d[b]).abs())
        .sum())
}

/// Flat index pairs `(neighbor, here)` for horizontal and vertical edges.
#[allow(clippy::type_complexity)]
fn tv_pairs(x: &Tensor, shape: ImageShape) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if x.shape().len() != 2 {
        return Err(Error::shape("total_variation", &[x.shape()]));
    }
    shape.check(x.cols())?;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let at = |s: usize, r: usize, c: usize, k: usize| s * shape.len() + (r * w + c) * ch + k;
    let mut right = Vec::new();
    let mut down = Vec::new();
    for s in 0..x.rows() {
        for r in 0..h {
            for c in 0..w {
                for k in 0..ch {
                    if c + 1 < w {
                        right.push((at(s, r, c + 1, k), at(s, r, c, k)));
                    }
                    if r + 1 < h {
                        down.push((at(s, r + 1, c, k), at(s, r, c, k)));
                    }
                }
            }
        }
    }
    Ok((right, down))
}

fn tv_var<'g>(x: Var<'g>, shape: ImageShape) -> Result<Var<'g>> {
    let (right, down) = tv_pairs(&x.value(), shape)?;
    let pairs: Vec<(usize, usize)> = right.into_iter().chain(down).collect();
    if pairs.is_empty() {
        return Ok(x.graph().scalar(0.0));
    }
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(x.gather(&a)?.sub(x.gather(&b)?)?.abs().sum())
}

/// Gradient-matching distance between a recorded gradient and a target.
pub fn match_distance<'g>(g: Var<'g>, target: &[f64], distance: Distance) -> Result<Var<'g>> {
    let graph = g.graph();
    let t = graph.constant(Tensor::vector(target.to_vec())?);
    match distance {
        Distance::SquaredL2 => Ok(g.sub(t)?.l2_norm_sq()),
        Distance::NegativeCosine => {
            let tiny = graph.scalar(1e-24);
            let gn = g.l2_norm_sq().add(tiny)?.sqrt();
            let tn = (target.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            let cos = g.dot(t)?.mul(gn.recip())?.scale(1.0 / tn);
            Ok(cos.scale(-1.0).add(graph.scalar(1.0))?)
        }
    }
}

/// Attack objective at `x` for labels `y`; returns (value, d/dx).
pub fn attack_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &[f64],
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
) -> Result<(f64, Tensor)> {
    let graph = Graph::new();
    let theta = ParamVar::bind(&graph, params);
    let xv = graph.var(x.clone());
    let logits = model::forward(spec, &theta, xv)?;
    let loss = model::loss(logits, y)?;
    let g = graph.grad(loss, &[theta.flat()])?[0];
    let mut objective = match_distance(g, target, config.distance)?;
    if config.method == Method::Ig && config.tv_weight > 0.0 {
        let shape = config.image.unwrap_or(ImageShape::flat(x.cols()));
        objective = objective.add(tv_var(xv, shape)?.scale(config.tv_weight))?;
    }
    let dx = graph.grad(objective, &[xv])?[0];
    Ok((objective.item(), dx.value()))
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub match_loss: f64,
    /// Mean aligned PSNR against the truth, when the truth was supplied.
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// Best iterate, `[B, m]`, in `[0, 1]`.
    pub x_hat: Tensor,
    pub y_hat: Vec<usize>,
    pub labels_inferred: bool,
    pub low_confidence_labels: bool,
    /// Trajectory of the attempt that produced `x_hat`.
    pub trajectory: Vec<TrajectoryPoint>,
    pub iterations_used: usize,
    pub best_match_loss: f64,
    pub restarts_used: usize,
    /// Step size of the kept run.
    pub step_size: f64,
    /// Zero or flat capture, or every attempt diverged.
    pub failed: bool,
}

impl ReconstructionResult {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.x_hat.rows())
            .map(|i| self.x_hat.row(i).to_vec())
            .collect()
    }

    /// `iteration,match_loss,psnr`.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration,match_loss,psnr\n");
        for p in &self.trajectory {
            let psnr = p.psnr.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", p.iteration, fmt_f64(p.match_loss), psnr);
        }
        out
    }

    /// Writes `x_hat` as `<stem>.f64/.hdr` and the trajectory as
    /// `<stem>.trajectory.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = Header::new()
            .with("kind", "reconstruction")
            .with("batch_size", self.x_hat.rows())
            .with("dim", self.x_hat.cols())
            .with("labels", io::list(&self.y_hat))
            .with("labels_inferred", self.labels_inferred)
            .with("failed", self.failed)
            .with("step_size", fmt_f64(self.step_size))
            .with("best_match_loss", fmt_f64(self.best_match_loss));
        io::write_vector(stem, &header, self.x_hat.data())?;
        io::write_text(
            &stem.with_extension("trajectory.csv"),
            &self.trajectory_csv(),
        )
    }
}

fn aligned_psnr(x: &Tensor, truth: &Batch) -> Result<f64> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let true_rows: Vec<Vec<f64>> = (0..truth.len())
        .map(|i| truth.x().row(i).to_vec())
        .collect();
    let perm = metrics::greedy_alignment(&rows, &true_rows)?;
    let total = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| metrics::psnr(&rows[j], &true_rows[i], 1.0))
        .sum::<Result<f64>>()?;
    Ok(total / perm.len() as f64)
}

struct Attempt {
    best_x: Tensor,
    best_loss: f64,
    trajectory: Vec<TrajectoryPoint>,
    flat: bool,
    diverged: bool,
}

fn attempt(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &[f64],
    y: &[usize],
    config: &AttackConfig,
    truth: Option<&Batch>,
    seed: u64,
) -> Result<Attempt> {
    let (b, m) = (y.len(), spec.input_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = (0..b * m).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut x = Tensor::matrix(b, m, init)?;
    let mut out = Attempt {
        best_x: x.clone(),
        best_loss: f64::INFINITY,
        trajectory: Vec::with_capacity(config.iterations + 1),
        flat: true,
        diverged: false,
    };
    for t in 0..=config.iterations {
        let (loss, dx) = attack_objective(spec, params, target, &x, y, config)?;
        if !loss.is_finite() || !dx.is_finite() {
            out.diverged = true;
            return Ok(out);
        }
        let psnr = truth.map(|tr| aligned_psnr(&x, tr)).transpose()?;
        out.trajectory.push(TrajectoryPoint {
            iteration: t,
            match_loss: loss,
            psnr,
        });
        if loss < out.best_loss {
            out.best_loss = loss;
            out.best_x = x.clone();
        }
        if t == config.iterations {
            break;
        }
        if dx.data().iter().any(|v| v.abs() > ZERO_GRAD) {
            out.flat = false;
        }
        let eta = config.step_at(t);
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(dx.data())
            .map(|(v, d)| (v - eta * d).clamp(0.0, 1.0))
            .collect();
        x = Tensor::matrix(b, m, next)?;
    }
    Ok(out)
}

/// Reconstructs the captured batch by gradient matching against `params`.
///
/// Labels come from `truth` when given, otherwise from
/// [`idlg_infer_labels`]. Returns the iterate with the lowest match loss.
pub fn reconstruct(
    capture: &GradientCapture,
    spec: &ModelSpec,
    params: &ParamVector,
    config: &AttackConfig,
    truth: Option<&Batch>,
) -> Result<ReconstructionResult> {
    config.validate()?;
    if capture.batch_grad.len() != params.len() {
        return Err(Error::shape(
            "reconstruct",
            &[&[capture.batch_grad.len()], &[params.len()]],
        ));
    }
    let (y, inferred, low_confidence) = match truth {
        Some(t) => {
            t.check(spec)?;
            (t.y().to_vec(), false, false)
        }
        None => {
            let inf = idlg_infer_labels(capture, spec)?;
            (inf.labels, true, inf.low_confidence)
        }
    };
    let steps = if config.step_candidates.is_empty() {
        vec![config.step_size]
    } else {
        config.step_candidates.clone()
    };
    let mut best: Option<ReconstructionResult> = None;
    for step in steps {
        let run_config = AttackConfig {
            step_size: step,
            ..config.clone()
        };
        let r = reconstruct_with_step(capture, spec, params, &run_config, truth, &y)?;
        let better = match &best {
            None => true,
            Some(b) => {
                (b.failed && !r.failed)
                    || (b.failed == r.failed && r.best_match_loss < b.best_match_loss)
            }
        };
        if better {
            best = Some(ReconstructionResult {
                labels_inferred: inferred,
                low_confidence_labels: low_confidence,
                ..r
            });
        }
    }
    Ok(best.expect("at least one step size"))
}

fn reconstruct_with_step(
    capture: &GradientCapture,
    spec: &ModelSpec,
    params: &ParamVector,
    config: &AttackConfig,
    truth: Option<&Batch>,
    y: &[usize],
) -> Result<ReconstructionResult> {
    let target = capture.batch_grad.values();
    let zero_capture = capture.batch_grad.norm() < ZERO_GRAD;
    let mut last = None;
    for r in 0..=config.restarts {
        let seed = if r == 0 {
            config.seed
        } else {
            derive_seed(config.seed, "attack-restart", r as u64)
        };
        let a = attempt(spec, params, target, y, config, truth, seed)?;
        let diverged = a.diverged;
        last = Some((r, a));
        if !diverged {
            break;
        }
    }
    let (restarts_used, a) = last.expect("at least one attempt");
    Ok(ReconstructionResult {
        x_hat: a.best_x,
        y_hat: y.to_vec(),
        labels_inferred: false,
        low_confidence_labels: false,
        iterations_used: a.trajectory.len().saturating_sub(1),
        best_match_loss: a.best_loss,
        trajectory: a.trajectory,
        restarts_used,
        step_size: config.step_size,
        failed: zero_capture || a.flat || a.diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_reference_values() {
        let c = Tensor::matrix(1, 4, vec![0.3; 4]).unwrap();
        assert_eq!(total_variation(&c, ImageShape::new(2, 2, 1)).unwrap(), 0.0);
        let p = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&p, ImageShape::new(1, 2, 1)).unwrap(), 1.0);
        assert!(total_variation(&p, ImageShape::new(3, 1, 1)).is_err());
    }

    #[test]
    fn tv_var_matches_value() {
        let x =
            Tensor::matrix(2, 6, (0..12).map(|i| ((i * 7) % 5) as f64 / 5.0).collect()).unwrap();
        let shape = ImageShape::new(2, 3, 1);
        let g = Graph::new();
        let v = tv_var(g.var(x.clone()), shape).unwrap();
        assert!((v.item() - total_variation(&x, shape).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_is_zero_at_match() {
        let g = Graph::new();
        let v = g.var(Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let d = match_distance(v, &[2.0, -4.0, 1.0], Distance::NegativeCosine).unwrap();
        assert!(d.item().abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::dlg(0, 0.1).validate().is_err());
        assert!(AttackConfig::ig(10, 0.1, -1.0).validate().is_err());
        assert!(AttackConfig::ig(10, 0.1, 0.01).validate().is_ok());
    }
}
