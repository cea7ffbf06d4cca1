//! Detectability (D-SNR, gradient-norm variance) and reconstruction quality
//! (PSNR, SSIM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::BatchMeta;
use crate::model::ModelSpec;
use crate::params::ParamVector;

/// Reported when the reconstruction is exact.
pub const PSNR_CEILING_DB: f64 = 100.0;
const SINGULAR: f64 = 1e-12;

/// Spatial reading of a flat sample: `height x width x channels`, row-major
/// with channels innermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A single-row image when no spatial layout is known.
    pub fn flat(dim: usize) -> Self {
        Self::new(1, dim, 1)
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.is_empty() || self.len() != dim {
            return Err(Error::invalid(format!(
                "image {}x{}x{} does not factor a sample of {dim} values",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

/// Largest single-sample share of the gradient norm, over dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DsnrReport {
    pub value: f64,
    /// `(weight segment, ratio)` in layer order; `+inf` marks a singular
    /// denominator.
    pub per_layer: Vec<(String, f64)>,
    pub argmax_layer: String,
    /// Set when any layer's denominator fell below the conditioning floor.
    pub singular: bool,
    pub batch_meta: Option<BatchMeta>,
}

/// `max_W max_i |g_i(W)| / (sum_i |g_i(W)| - max_i |g_i(W)|)`.
pub fn d_snr(per_sample: &[ParamVector], spec: &ModelSpec) -> Result<DsnrReport> {
    if per_sample.len() < 2 {
        return Err(Error::invalid(format!(
            "D-SNR needs at least 2 samples, got {}",
            per_sample.len()
        )));
    }
    let mut per_layer = Vec::new();
    let mut singular = false;
    for name in spec.weight_segments() {
        let norms = per_sample
            .iter()
            .map(|g| Ok(g.segment(&name)?.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect::<Result<Vec<f64>>>()?;
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let rest = norms.iter().sum::<f64>() - max;
        let ratio = if rest < SINGULAR {
            singular = true;
            f64::INFINITY
        } else {
            max / rest
        };
        per_layer.push((name, ratio));
    }
    let (argmax_layer, value) =
        per_layer
            .iter()
            .fold((String::new(), f64::NEG_INFINITY), |best, (n, r)| {
                if *r > best.1 {
                    (n.clone(), *r)
                } else {
                    best
                }
            });
    Ok(DsnrReport {
        value,
        per_layer,
        argmax_layer,
        singular,
        batch_meta: None,
    })
}

/// Population variance and mean of whole-vector gradient norms.
pub fn grad_norm_variance(per_sample: &[ParamVector]) -> Result<(f64, f64)> {
    if per_sample.is_empty() {
        return Err(Error::invalid("gradient-norm variance of no samples"));
    }
    let norms: Vec<f64> = per_sample.iter().map(ParamVector::norm).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((var, mean))
}

fn check_same(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, &[&[a.len()], &[b.len()]]));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same("mse", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, clamped to [`PSNR_CEILING_DB`].
pub fn psnr(x_hat: &[f64], x_true: &[f64], peak: f64) -> Result<f64> {
    let m = mse(x_hat, x_true)?;
    if m < SINGULAR {
        return Ok(PSNR_CEILING_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CEILING_DB))
}

/// Global single-window SSIM with dynamic range 1.
pub fn ssim(x_hat: &[f64], x_true: &[f64], shape: ImageShape) -> Result<f64> {
    check_same("ssim", x_hat, x_true)?;
    shape.check(x_true.len())?;
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let n = x_hat.len() as f64;
    let mx = x_hat.iter().sum::<f64>() / n;
    let my = x_true.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x_hat.iter().zip(x_true) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    Ok(s.clamp(-1.0, 1.0))
}

/// Mean after dropping one minimum and one maximum; plain mean below three
/// values.
pub fn pruned_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = values.iter().sum();
    if values.len() < 3 {
        return sum / values.len() as f64;
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ((sum - min - max) / (values.len() - 2) as f64).clamp(min, max)
}

/// Per-sample quality of an aligned reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub per_sample_psnr: Vec<f64>,
    pub per_sample_ssim: Vec<f64>,
    pub min_psnr: f64,
    pub pruned_mean_psnr: f64,
    pub max_psnr: f64,
    pub mean_ssim: f64,
}

impl QualityReport {
    /// Scores row `i` of `x_hat` against row `i` of `x_true`.
    pub fn new(x_hat: &[Vec<f64>], x_true: &[Vec<f64>], shape: ImageShape) -> Result<Self> {
        if x_hat.len() != x_true.len() || x_hat.is_empty() {
            return Err(Error::invalid(format!(
                "{} reconstructed vs {} true samples",
                x_hat.len(),
                x_true.len()
            )));
        }
        let per_sample_psnr = x_hat
            .iter()
            .zip(x_true)
            .map(|(a, b)| psnr(a, b, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let per_sample_ssim = x_hat
            .iter()
            .zip(x_true)
            .map(|(a, b)| ssim(a, b, shape))
            .collect::<Result<Vec<_>>>()?;
        let min_psnr = per_sample_psnr
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max_psnr = per_sample_psnr
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mean_ssim = per_sample_ssim.iter().sum::<f64>() / per_sample_ssim.len() as f64;
        Ok(Self {
            pruned_mean_psnr: pruned_mean(&per_sample_psnr),
            per_sample_psnr,
            per_sample_ssim,
            min_psnr,
            max_psnr,
            mean_ssim,
        })
    }
}

/// Greedy alignment: repeatedly pairs the reconstructed and true rows with
/// the smallest MSE. Returns `perm` with `x_hat[perm[i]]` matched to
/// `x_true[i]`.
pub fn greedy_alignment(x_hat: &[Vec<f64>], x_true: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = x_true.len();
    if x_hat.len() != n {
        return Err(Error::invalid(format!("{} vs {} samples", x_hat.len(), n)));
    }
    let mut pairs = Vec::with_capacity(n * n);
    for (j, h) in x_hat.iter().enumerate() {
        for (i, t) in x_true.iter().enumerate() {
            pairs.push((mse(h, t)?, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, i, j) in pairs {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    Ok(perm)
}
