//! Active poisoning that makes every sample's gradient decodable.
//!
//! A fixed projector `Pi` keeps a ratio `rho` of gradient entries at
//! positions drawn once per run. An affine decoder `D` maps the projected
//! gradient to the flattened batch. Poisoning descends
//! `L(theta, phi) = |x - D(Pi(grad_theta loss(F(x, theta), y)), phi)|^2`
//! jointly in the model `theta` (a second-order path through the gradient)
//! and the decoder `phi`. `L` at a parameter point is its vulnerability
//! score: lower means more decodable.
//!
//! A fishing-style baseline that biases the batch gradient toward one class
//! is included for contrast.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, ParamVar, Var};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, Header};
use crate::model::{self, Batch, ModelSpec};
use crate::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

/// Fixed gradient positions kept by the projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPlan {
    /// `(segment name, sorted offsets within the segment)` in layout order.
    pub per_layer_positions: Vec<(String, Vec<usize>)>,
    pub rho: f64,
    pub seed: u64,
    /// Flat indices into the full parameter vector, in layer then index order.
    global: Vec<usize>,
    param_count: usize,
}

impl ProjectionPlan {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn global_indices(&self) -> &[usize] {
        &self.global
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Rebuilds a plan from saved per-segment positions.
    pub fn from_positions(
        layout: &ParamLayout,
        per_layer_positions: Vec<(String, Vec<usize>)>,
        rho: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut global = Vec::new();
        for (name, pos) in &per_layer_positions {
            let seg = layout.require(name)?;
            if pos.windows(2).any(|w| w[0] >= w[1]) || pos.last().is_some_and(|&p| p >= seg.len()) {
                return Err(Error::invalid(format!(
                    "positions for {name} must be sorted, unique, below {}",
                    seg.len()
                )));
            }
            global.extend(pos.iter().map(|p| seg.offset + p));
        }
        Ok(Self {
            per_layer_positions,
            rho,
            seed,
            global,
            param_count: layout.total(),
        })
    }
}

/// Selected count for a segment of `n` entries.
pub fn positions_for(n: usize, rho: f64) -> usize {
    ((rho * n as f64).round() as usize).clamp(1, n)
}

/// Samples `max(1, round(rho * n))` positions without replacement inside each
/// parameter segment.
pub fn build_projection_plan(spec: &ModelSpec, rho: f64, seed: u64) -> Result<ProjectionPlan> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!(
            "projection ratio {rho} outside (0, 1]"
        )));
    }
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_layer = layout
        .segments()
        .iter()
        .map(|seg| {
            let mut pos =
                index::sample(&mut rng, seg.len(), positions_for(seg.len(), rho)).into_vec();
            pos.sort_unstable();
            (seg.name.clone(), pos)
        })
        .collect();
    ProjectionPlan::from_positions(&layout, per_layer, rho, seed)
}

/// `Pi(grad)`: the plan's entries of `grad`.
pub fn project(grad: &[f64], plan: &ProjectionPlan) -> Result<Vec<f64>> {
    if grad.len() != plan.param_count {
        return Err(Error::shape(
            "project",
            &[&[grad.len()], &[plan.param_count]],
        ));
    }
    Ok(plan.global.iter().map(|&i| grad[i]).collect())
}

/// Recorded projection of a flat gradient var.
pub fn project_var<'g>(grad: Var<'g>, plan: &ProjectionPlan) -> Result<Var<'g>> {
    if grad.shape() != [plan.param_count] {
        return Err(Error::shape(
            "project",
            &[&grad.shape(), &[plan.param_count]],
        ));
    }
    grad.gather(&plan.global)
}

/// Decoder from a projected gradient to a flattened batch: affine by
/// default, or affine-ReLU-affine with one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub input_dim: usize,
    pub hidden: Option<usize>,
    pub batch_size: usize,
    pub sample_dim: usize,
    pub phi: ParamVector,
}

impl Decoder {
    pub fn output_dim(&self) -> usize {
        self.batch_size * self.sample_dim
    }

    pub fn layout(
        input_dim: usize,
        hidden: Option<usize>,
        output_dim: usize,
    ) -> Result<Arc<ParamLayout>> {
        let parts: Vec<(String, Vec<usize>)> = match hidden {
            None => vec![
                ("dec.weight".into(), vec![input_dim, output_dim]),
                ("dec.bias".into(), vec![output_dim]),
            ],
            Some(h) => vec![
                ("dec0.weight".into(), vec![input_dim, h]),
                ("dec0.bias".into(), vec![h]),
                ("dec1.weight".into(), vec![h, output_dim]),
                ("dec1.bias".into(), vec![output_dim]),
            ],
        };
        Ok(Arc::new(ParamLayout::new(parts)?))
    }

    /// Every weight and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(
        input_dim: usize,
        hidden: Option<usize>,
        batch_size: usize,
        sample_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || batch_size == 0 || sample_dim == 0 || hidden == Some(0) {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        let layout = Self::layout(input_dim, hidden, batch_size * sample_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total()];
        for seg in layout.segments() {
            let fan_in = if seg.name.starts_with("dec1") {
                hidden.unwrap_or(input_dim)
            } else {
                input_dim
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            values[seg.range()]
                .iter_mut()
                .for_each(|v| *v = dist.sample(&mut rng));
        }
        Ok(Self {
            input_dim,
            hidden,
            batch_size,
            sample_dim,
            phi: ParamVector::new(layout, values)?,
        })
    }

    pub fn with_phi(&self, phi: ParamVector) -> Result<Self> {
        if phi.len() != self.phi.len() {
            return Err(Error::shape(
                "decoder phi",
                &[&[phi.len()], &[self.phi.len()]],
            ));
        }
        Ok(Self {
            phi,
            ..self.clone()
        })
    }

    /// Recorded `D(g, phi)` for a `[d]` input; returns `[B * m]`.
    pub fn forward_var<'g>(&self, phi: &ParamVar<'g, '_>, g: Var<'g>) -> Result<Var<'g>> {
        if g.shape() != [self.input_dim] {
            return Err(Error::shape("decoder", &[&g.shape(), &[self.input_dim]]));
        }
        let row = g.reshape(&[1, self.input_dim])?;
        let out = match self.hidden {
            None => row
                .matmul(phi.segment("dec.weight")?)?
                .add_row(phi.segment("dec.bias")?)?,
            Some(_) => row
                .matmul(phi.segment("dec0.weight")?)?
                .add_row(phi.segment("dec0.bias")?)?
                .relu()
                .matmul(phi.segment("dec1.weight")?)?
                .add_row(phi.segment("dec1.bias")?)?,
        };
        out.reshape(&[self.output_dim()])
    }

    /// `D(g)` at the stored `phi`.
    pub fn decode(&self, g: &[f64]) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let phi = ParamVar::bind_constant(&graph, &self.phi);
        let gv = graph.constant(Tensor::vector(g.to_vec())?);
        Ok(self.forward_var(&phi, gv)?.value().into_data())
    }

    fn check(&self, plan: &ProjectionPlan, batch: &Batch) -> Result<()> {
        if plan.dim() != self.input_dim
            || batch.len() != self.batch_size
            || batch.dim() != self.sample_dim
        {
            return Err(Error::invalid(format!(
                "decoder sized for d={} B={} m={}, got plan d={} batch {}x{}",
                self.input_dim,
                self.batch_size,
                self.sample_dim,
                plan.dim(),
                batch.len(),
                batch.dim()
            )));
        }
        Ok(())
    }
}

/// Recorded joint objective; `theta` and `phi` may be leaves or constants.
pub fn joint_loss<'g>(
    spec: &ModelSpec,
    theta: &ParamVar<'g, '_>,
    decoder: &Decoder,
    phi: &ParamVar<'g, '_>,
    plan: &ProjectionPlan,
    batch: &Batch,
) -> Result<Var<'g>> {
    decoder.check(plan, batch)?;
    let graph = theta.flat().graph();
    let loss = model::batch_loss(spec, theta, batch)?;
    let g = graph.grad(loss, &[theta.flat()])?[0];
    let decoded = decoder.forward_var(phi, project_var(g, plan)?)?;
    let x = graph.constant(Tensor::vector(batch.x().data().to_vec())?);
    Ok(decoded.sub(x)?.l2_norm_sq())
}

/// `L(theta, phi)` on `batch`.
pub fn vulnerability_score(
    spec: &ModelSpec,
    params: &ParamVector,
    decoder: &Decoder,
    plan: &ProjectionPlan,
    batch: &Batch,
) -> Result<f64> {
    decoder.check(plan, batch)?;
    let g = autodiff::gradient(params, |_, t| model::batch_loss(spec, t, batch))?;
    let decoded = decoder.decode(&project(g.values(), plan)?)?;
    Ok(decoded
        .iter()
        .zip(batch.x().data())
        .map(|(d, x)| (d - x) * (d - x))
        .sum())
}

/// Poisoning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonConfig {
    /// Maximum number of updates `N`.
    pub iterations: usize,
    /// Model step size.
    pub alpha_model: f64,
    /// Decoder step size.
    pub alpha_decoder: f64,
    /// Stop once the moving average of `L` reaches this.
    pub epsilon: f64,
    pub rho: f64,
    pub moving_average_window: usize,
    pub decoder_hidden: Option<usize>,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            alpha_model: 1e-3,
            alpha_decoder: 1e-2,
            epsilon: 1e-3,
            rho: 0.004,
            moving_average_window: 50,
            decoder_hidden: None,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("rho {} outside (0, 1]", self.rho)));
        }
        for (name, v) in [
            ("alpha_model", self.alpha_model),
            ("alpha_decoder", self.alpha_decoder),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} {v} must be finite and >= 0"
                )));
            }
        }
        if self.moving_average_window == 0 {
            return Err(Error::invalid("moving_average_window must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// Repeated non-finite losses; the curve is partial.
    Aborted,
}

/// Outcome of a poisoning run.
#[derive(Debug, Clone)]
pub struct PoisonRun {
    pub theta_star: ParamVector,
    pub decoder: Decoder,
    pub plan: ProjectionPlan,
    /// `L` at each evaluated iterate; entry `t` is measured before update `t`.
    pub loss_curve: Vec<f64>,
    pub stop: StopReason,
    /// Step sizes in force at the end (halved on non-finite retries).
    pub final_alphas: (f64, f64),
    pub config: PoisonConfig,
}

impl PoisonRun {
    pub fn phi_star(&self) -> &ParamVector {
        &self.decoder.phi
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }

    /// Trailing moving average of the loss curve.
    pub fn final_moving_average(&self) -> f64 {
        moving_average(&self.loss_curve, self.config.moving_average_window)
    }

    /// Writes `theta_star`, `phi_star`, `plan` (`.f64/.hdr`) and
    /// `loss_curve.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let header = Header::new().with("kind", "theta_star");
        io::write_vector(&dir.join("theta_star"), &header, self.theta_star.values())?;
        let header = Header::new()
            .with("kind", "phi_star")
            .with("input_dim", self.decoder.input_dim)
            .with("hidden", self.decoder.hidden.map_or(0, |h| h))
            .with("batch_size", self.decoder.batch_size)
            .with("sample_dim", self.decoder.sample_dim);
        io::write_vector(&dir.join("phi_star"), &header, self.decoder.phi.values())?;
        save_plan(&self.plan, &dir.join("plan"))?;
        let mut csv = String::from("iteration,loss\n");
        for (t, l) in self.loss_curve.iter().enumerate() {
            let _ = writeln!(csv, "{t},{}", fmt_f64(*l));
        }
        let header = Header::new()
            .with("kind", "poison_run")
            .with("stop", format!("{:?}", self.stop).to_lowercase())
            .with("iterations", self.loss_curve.len().saturating_sub(1))
            .with("alpha_model", fmt_f64(self.final_alphas.0))
            .with("alpha_decoder", fmt_f64(self.final_alphas.1))
            .with("rho", fmt_f64(self.plan.rho));
        io::write_text(&dir.join("poison.hdr"), &header.render())?;
        io::write_text(&dir.join("loss_curve.csv"), &csv)
    }

    /// Reads a run written by [`save`](Self::save).
    pub fn load(dir: &Path, spec: &ModelSpec, config: PoisonConfig) -> Result<Self> {
        let layout = spec.layout()?;
        let (_, theta) = io::read_vector(&dir.join("theta_star"))?;
        let theta_star = ParamVector::new(layout.clone(), theta)?;
        let (h, phi) = io::read_vector(&dir.join("phi_star"))?;
        let hidden = match h.parse_usize("hidden")? {
            0 => None,
            n => Some(n),
        };
        let (input_dim, batch_size, sample_dim) = (
            h.parse_usize("input_dim")?,
            h.parse_usize("batch_size")?,
            h.parse_usize("sample_dim")?,
        );
        let phi_layout = Decoder::layout(input_dim, hidden, batch_size * sample_dim)?;
        let decoder = Decoder {
            input_dim,
            hidden,
            batch_size,
            sample_dim,
            phi: ParamVector::new(phi_layout, phi)?,
        };
        let plan = load_plan(&dir.join("plan"), &layout)?;
        let meta = Header::parse(&io::read_text(&dir.join("poison.hdr"))?)?;
        let stop = match meta.require("stop")? {
            "converged" => StopReason::Converged,
            "maxiterations" => StopReason::MaxIterations,
            _ => StopReason::Aborted,
        };
        let parse_f = |k: &str| -> Result<f64> {
            meta.require(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad {k} in poison.hdr")))
        };
        let final_alphas = (parse_f("alpha_model")?, parse_f("alpha_decoder")?);
        let loss_curve = io::read_text(&dir.join("loss_curve.csv"))?
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("bad loss curve row {l:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            theta_star,
            decoder,
            plan,
            loss_curve,
            stop,
            final_alphas,
            config,
        })
    }
}

pub fn save_plan(plan: &ProjectionPlan, stem: &Path) -> Result<()> {
    let mut header = Header::new()
        .with("kind", "projection_plan")
        .with("rho", fmt_f64(plan.rho))
        .with("seed", plan.seed)
        .with("param_count", plan.param_count);
    for (name, pos) in &plan.per_layer_positions {
        header.set(&format!("positions.{name}"), io::list(pos));
    }
    let values: Vec<f64> = plan.global.iter().map(|&i| i as f64).collect();
    io::write_vector(stem, &header, &values)
}

pub fn load_plan(stem: &Path, layout: &ParamLayout) -> Result<ProjectionPlan> {
    let (header, _) = io::read_vector(stem)?;
    let rho: f64 = header
        .require("rho")?
        .parse()
        .map_err(|_| Error::invalid("bad rho in plan header"))?;
    let seed: u64 = header
        .require("seed")?
        .parse()
        .map_err(|_| Error::invalid("bad seed in plan header"))?;
    let per_layer = layout
        .segments()
        .iter()
        .map(|s| {
            Ok((
                s.name.clone(),
                header.parse_list(&format!("positions.{}", s.name))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionPlan::from_positions(layout, per_layer, rho, seed)
}

/// Mean of the last `window` values.
pub fn moving_average(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window.max(1))..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

const MAX_HALVINGS: usize = 5;

fn joint_value_and_grads(
    spec: &ModelSpec,
    theta: &ParamVector,
    decoder: &Decoder,
    plan: &ProjectionPlan,
    batch: &Batch,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let graph = Graph::new();
    let t = ParamVar::bind(&graph, theta);
    let p = ParamVar::bind(&graph, &decoder.phi);
    let l = joint_loss(spec, &t, decoder, &p, plan, batch)?;
    let g = graph.grad(l, &[t.flat(), p.flat()])?;
    Ok((l.item(), g[0].value().into_data(), g[1].value().into_data()))
}

fn step(v: &ParamVector, g: &[f64], alpha: f64) -> Result<ParamVector> {
    v.with_values(
        v.values()
            .iter()
            .zip(g)
            .map(|(a, b)| a - alpha * b)
            .collect(),
    )
}

fn finite(l: f64, a: &[f64], b: &[f64]) -> bool {
    l.is_finite() && a.iter().chain(b).all(|v| v.is_finite())
}

/// Jointly trains the model and a fresh decoder on `aux` batches (cycled in
/// order) until the moving average of `L` reaches `epsilon` or `iterations`
/// updates have been made. A non-finite evaluation rolls back to the
/// previous state and retries that update with both step sizes halved, at
/// most five times.
pub fn poison_model(
    spec: &ModelSpec,
    theta0: &ParamVector,
    aux: &[Batch],
    config: &PoisonConfig,
) -> Result<PoisonRun> {
    config.validate()?;
    let first = aux
        .first()
        .ok_or_else(|| Error::invalid("poisoning needs auxiliary batches"))?;
    if let Some(b) = aux.iter().find(|b| b.len() != first.len()) {
        return Err(Error::invalid(format!(
            "auxiliary batches must share one size ({} vs {})",
            first.len(),
            b.len()
        )));
    }
    aux.iter().try_for_each(|b| b.check(spec))?;
    let plan = build_projection_plan(
        spec,
        config.rho,
        crate::seed::derive_seed(config.seed, "plan", 0),
    )?;
    let mut decoder = Decoder::init(
        plan.dim(),
        config.decoder_hidden,
        first.len(),
        spec.input_dim(),
        crate::seed::derive_seed(config.seed, "decoder", 0),
    )?;
    let mut theta = theta0.clone();
    let (mut a1, mut a2) = (config.alpha_model, config.alpha_decoder);
    let mut curve = Vec::with_capacity(config.iterations + 1);

    let (mut loss, mut gt, mut gp) = joint_value_and_grads(spec, &theta, &decoder, &plan, &aux[0])?;
    if !finite(loss, &gt, &gp) {
        return Err(Error::NonFinite(
            "poisoning loss at the initial parameters".into(),
        ));
    }
    let mut stop = StopReason::MaxIterations;
    let mut t = 0;
    loop {
        curve.push(loss);
        if moving_average(&curve, config.moving_average_window) <= config.epsilon {
            stop = StopReason::Converged;
            break;
        }
        if t == config.iterations {
            break;
        }
        let batch = &aux[(t + 1) % aux.len()];
        let mut halvings = 0;
        let next = loop {
            let theta_next = step(&theta, &gt, a1)?;
            let dec_next = decoder.with_phi(step(&decoder.phi, &gp, a2)?)?;
            let eval = joint_value_and_grads(spec, &theta_next, &dec_next, &plan, batch);
            match eval {
                Ok((l, a, b)) if finite(l, &a, &b) => break Some((theta_next, dec_next, l, a, b)),
                Ok(_) | Err(Error::NonFinite(_)) if halvings < MAX_HALVINGS => {
                    halvings += 1;
                    a1 *= 0.5;
                    a2 *= 0.5;
                }
                Ok(_) | Err(Error::NonFinite(_)) => break None,
                Err(e) => return Err(e),
            }
        };
        match next {
            Some((th, de, l, a, b)) => {
                theta = th;
                decoder = de;
                loss = l;
                gt = a;
                gp = b;
                t += 1;
            }
            None => {
                stop = StopReason::Aborted;
                break;
            }
        }
    }
    Ok(PoisonRun {
        theta_star: theta,
        decoder,
        plan,
        loss_curve: curve,
        stop,
        final_alphas: (a1, a2),
        config: config.clone(),
    })
}

/// Two directions in parameter space, each rescaled segment by segment to
/// the norm of the matching segment of `theta`.
pub fn filter_normalized_directions(theta: &ParamVector, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = || {
        let mut d: Vec<f64> = (0..theta.len()).map(|_| normal.sample(&mut rng)).collect();
        for seg in theta.layout().segments() {
            let r = seg.range();
            let dn = d[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            let tn = theta.values()[r.clone()]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let scale = if dn > 0.0 { tn / dn } else { 0.0 };
            d[r].iter_mut().for_each(|v| *v *= scale);
        }
        d
    };
    let dx = draw();
    let dy = draw();
    (dx, dy)
}

/// `steps` points from `-extent` to `extent`; the middle point of an odd
/// count is exactly zero.
pub fn symmetric_axis(extent: f64, steps: usize) -> Vec<f64> {
    let den = (steps - 1) as f64;
    (0..steps)
        .map(|i| extent * (2.0 * i as f64 - den) / den)
        .collect()
}

/// Vulnerability (and optionally accuracy) over a 2-D slice of parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub axis: Vec<f64>,
    /// `scores[i * steps + j]` at `theta + axis[i] * dx + axis[j] * dy`.
    pub scores: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
}

impl Landscape {
    pub fn steps(&self) -> usize {
        self.axis.len()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.steps() + j]
    }

    /// `a,b,score[,accuracy]`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.accuracy.is_some() {
            "a,b,score,accuracy\n"
        } else {
            "a,b,score\n"
        });
        let n = self.steps();
        for i in 0..n {
            for j in 0..n {
                let _ = write!(
                    out,
                    "{},{},{}",
                    fmt_f64(self.axis[i]),
                    fmt_f64(self.axis[j]),
                    fmt_f64(self.score(i, j))
                );
                if let Some(acc) = &self.accuracy {
                    let _ = write!(out, ",{}", fmt_f64(acc[i * n + j]));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Grid specification for [`landscape_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub extent: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            extent: 1.0,
            steps: 21,
        }
    }
}

/// Scores every cell of a `steps x steps` grid around `theta`, averaging the
/// vulnerability score over `eval_batches`. Cells run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid(
    spec: &ModelSpec,
    theta: &ParamVector,
    decoder: &Decoder,
    plan: &ProjectionPlan,
    eval_batches: &[Batch],
    grid: GridSpec,
    seed: u64,
    accuracy_on: Option<(&Tensor, &[usize])>,
) -> Result<Landscape> {
    if grid.steps < 2 || !(grid.extent.is_finite() && grid.extent > 0.0) {
        return Err(Error::invalid(format!(
            "grid needs steps >= 2 and a positive extent (got {} and {})",
            grid.steps, grid.extent
        )));
    }
    if eval_batches.is_empty() {
        return Err(Error::invalid(
            "landscape needs at least one evaluation batch",
        ));
    }
    let axis = symmetric_axis(grid.extent, grid.steps);
    let (dx, dy) = filter_normalized_directions(theta, seed);
    let n = grid.steps;
    let cells = n * n;
    let workers = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(cells);
    let eval_cell = |c: usize| -> Result<(f64, Option<f64>)> {
        let (a, b) = (axis[c / n], axis[c % n]);
        let values = theta
            .values()
            .iter()
            .zip(dx.iter().zip(&dy))
            .map(|(t, (x, y))| t + a * x + b * y)
            .collect();
        let p = theta.with_values(values)?;
        let mut total = 0.0;
        for batch in eval_batches {
            total += vulnerability_score(spec, &p, decoder, plan, batch)?;
        }
        let acc = accuracy_on
            .map(|(x, y)| model::accuracy(spec, &p, x, y))
            .transpose()?;
        Ok((total / eval_batches.len() as f64, acc))
    };
    let results: Vec<(f64, Option<f64>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let eval_cell = &eval_cell;
                s.spawn(move || {
                    (w..cells)
                        .step_by(workers)
                        .map(|c| eval_cell(c).map(|r| (c, r)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = vec![(0.0, None); cells];
        for h in handles {
            for (c, r) in h.join().expect("landscape worker panicked")? {
                all[c] = r;
            }
        }
        Ok::<_, Error>(all)
    })?;
    let scores = results.iter().map(|r| r.0).collect();
    let accuracy = accuracy_on.map(|_| results.iter().map(|r| r.1.unwrap_or(f64::NAN)).collect());
    Ok(Landscape {
        axis,
        scores,
        accuracy,
    })
}

/// Bias given to the target class so its softmax probability is near zero
/// for every input.
pub const FISHING_TARGET_BIAS: f64 = -20.0;

/// Rewrites the final layer so only samples of `target_class` send gradient
/// into the earlier layers: the target column of the last weight becomes an
/// alternating 1/0 pattern, every other column is zeroed, non-target biases
/// are zero and the target bias is strongly negative.
pub fn fishing_baseline_poison(
    spec: &ModelSpec,
    params: &ParamVector,
    target_class: usize,
) -> Result<ParamVector> {
    let c = spec.num_classes();
    if target_class >= c {
        return Err(Error::invalid(format!(
            "target class {target_class} outside {c} classes"
        )));
    }
    let mut out = params.clone();
    let w = out.segment_mut(&spec.last_weight())?;
    for (idx, v) in w.iter_mut().enumerate() {
        let (row, col) = (idx / c, idx % c);
        *v = if col == target_class && row % 2 == 0 {
            1.0
        } else {
            0.0
        };
    }
    let last = spec.num_layers() - 1;
    if spec.bias_at(last) {
        let b = out.segment_mut(&spec.last_bias())?;
        b.iter_mut().for_each(|v| *v = 0.0);
        b[target_class] = FISHING_TARGET_BIAS;
    }
    Ok(out)
}

/// True when a capture from a fishing-poisoned model contains a sample of
/// `target_class`, read from the target entry of the last bias gradient
/// (or the target weight column when there is no bias).
pub fn fishing_capture_has_target(
    capture: &crate::fl::GradientCapture,
    spec: &ModelSpec,
    target_class: usize,
) -> Result<bool> {
    let c = spec.num_classes();
    let last = spec.num_layers() - 1;
    let signal = if spec.bias_at(last) {
        capture.batch_grad.segment(&spec.last_bias())?[target_class].abs()
    } else {
        capture
            .batch_grad
            .segment(&spec.last_weight())?
            .iter()
            .skip(target_class)
            .step_by(c)
            .map(|v| v.abs())
            .sum()
    };
    Ok(signal > 1e-6)
}
