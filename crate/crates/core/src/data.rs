//! Labeled datasets: synthetic generators and two on-disk formats.
//!
//! `raw_f32` layout, all little-endian: magic `b"LKD1"`, then `n`, `m`, `C`
//! as `u32`; `n * m` `f32` values row-major; `n` `u32` labels.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::Batch;
use crate::tensor::Tensor;

pub const RAW_MAGIC: [u8; 4] = *b"LKD1";
const RAW_HEADER_LEN: usize = 16;

/// Samples in `[0, 1]^m` with labels below `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() || x.rows() == 0 {
            return Err(Error::invalid(format!(
                "dataset of shape {:?} with {} labels",
                x.shape(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self {
            x: x.clamp(0.0, 1.0),
            y,
            classes,
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.x.row(i), self.y[i])
    }

    /// The samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| {
                if i >= self.len() {
                    Err(Error::invalid(format!("sample {i} out of {}", self.len())))
                } else {
                    Ok(self.x.row(i).to_vec())
                }
            })
            .collect::<Result<_>>()?;
        Batch::from_rows(&rows, indices.iter().map(|&i| self.y[i]).collect())
    }

    /// Consecutive batches of `size`; a short tail is dropped.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 || size > self.len() {
            return Err(Error::invalid(format!(
                "batch size {size} for {} samples",
                self.len()
            )));
        }
        (0..self.len() / size)
            .map(|b| self.batch(&(b * size..(b + 1) * size).collect::<Vec<_>>()))
            .collect()
    }

    /// Exactly `count` batches holding one sample of each of `size` distinct
    /// classes, drawn without replacement; fails if the data runs out.
    pub fn unique_label_batches(&self, size: usize, count: usize, seed: u64) -> Result<Vec<Batch>> {
        let out = self.draw_unique_label_batches(size, count, seed)?;
        if out.len() < count {
            return Err(Error::invalid(format!(
                "only {} unique-label batches of {size} available, {count} requested",
                out.len()
            )));
        }
        Ok(out)
    }

    /// As many unique-label batches of `size` as the data allows.
    pub fn all_unique_label_batches(&self, size: usize, seed: u64) -> Result<Vec<Batch>> {
        self.draw_unique_label_batches(size, self.len() / size.max(1), seed)
    }

    /// Each batch takes its classes from the currently largest pools, so the
    /// draw only stops when fewer than `size` classes have samples left.
    fn draw_unique_label_batches(
        &self,
        size: usize,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Batch>> {
        if size == 0 || size > self.classes {
            return Err(Error::invalid(format!(
                "unique-label batches of {size} need at least that many classes (have {})",
                self.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.y.iter().enumerate() {
            pools[l].push(i);
        }
        pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
        let mut out = Vec::with_capacity(count);
        let mut classes: Vec<usize> = (0..self.classes).collect();
        while out.len() < count {
            classes.sort_by_key(|&c| (std::cmp::Reverse(pools[c].len()), c));
            if pools[classes[size - 1]].is_empty() {
                break;
            }
            let mut chosen: Vec<usize> = classes[..size].to_vec();
            chosen.shuffle(&mut rng);
            let idx: Vec<usize> = chosen
                .iter()
                .map(|&c| pools[c].pop().expect("non-empty"))
                .collect();
            out.push(self.batch(&idx)?);
        }
        Ok(out)
    }

    /// Splits into `parts` contiguous shards of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Dataset>> {
        if sizes.iter().sum::<usize>() > self.len() || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "shard sizes {sizes:?} for {} samples",
                self.len()
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let idx: Vec<usize> = (start..start + s).collect();
                start += s;
                let b = self.batch(&idx)?;
                Dataset::new(b.x().clone(), b.y().to_vec(), self.classes)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    GaussianBlobs,
    StripePatterns,
    RandomUniform,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            "stripe_patterns" => Ok(Self::StripePatterns),
            "random_uniform" => Ok(Self::RandomUniform),
            other => Err(Error::invalid(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Parameters of a synthetic dataset. `distribution_seed` fixes the class
/// structure (blob centers, stripe frequencies); the sampling seed passed to
/// [`synth_dataset`] draws the samples, so two sets can share a distribution
/// without sharing samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    #[serde(default)]
    pub distribution_seed: u64,
    /// Per-coordinate noise around the class structure.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, distribution_seed: u64) -> Self {
        Self {
            kind,
            n,
            distribution_seed,
            noise: default_noise(),
        }
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    y.shuffle(rng);
    y
}

/// Generates `spec.n` samples of dimension `dim` over `classes` balanced
/// classes.
pub fn synth_dataset(spec: &SynthSpec, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if dim == 0 || classes < 2 || spec.n < classes {
        return Err(Error::invalid(format!(
            "synthetic set needs dim >= 1, classes >= 2, n >= classes (dim {dim}, classes {classes}, n {})",
            spec.n
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid(format!("noise {} must be >= 0", spec.noise)));
    }
    let mut structure = ChaCha8Rng::seed_from_u64(spec.distribution_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = balanced_labels(spec.n, classes, &mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut x = vec![0.0; spec.n * dim];
    match spec.kind {
        SynthKind::GaussianBlobs => {
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| structure.random_range(0.15..0.85))
                        .collect()
                })
                .collect();
            for (i, &l) in y.iter().enumerate() {
                for p in 0..dim {
                    x[i * dim + p] = centers[l][p] + noise.sample(&mut rng);
                }
            }
        }
        SynthKind::StripePatterns => {
            let waves: Vec<(f64, f64)> = (0..classes)
                .map(|k| {
                    let freq = 1.0 + k as f64 + structure.random_range(0.0..0.5);
                    (freq, structure.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            for (i, &l) in y.iter().enumerate() {
                let (freq, phase) = waves[l];
                for p in 0..dim {
                    let t = std::f64::consts::TAU * freq * p as f64 / dim as f64 + phase;
                    x[i * dim + p] = 0.5 + 0.4 * t.sin() + noise.sample(&mut rng);
                }
            }
        }
        SynthKind::RandomUniform => {
            x.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        }
    }
    let x = Tensor::matrix(spec.n, dim, x)?.clamp(0.0, 1.0);
    Dataset::new(x, y, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    RawF32,
}

/// Reads `path`. CSV rows are `label,v1,...,vm`; `classes` bounds the
/// labels (CSV defaults to `max label + 1`, `raw_f32` uses its header).
pub fn ingest_dataset(path: &Path, format: FileFormat, classes: Option<usize>) -> Result<Dataset> {
    match format {
        FileFormat::Csv => parse_csv(&io::read_text(path)?, classes),
        FileFormat::RawF32 => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_raw_f32(&bytes, classes)
        }
    }
}

fn format_err(what: &'static str, location: String, message: impl Into<String>) -> Error {
    Error::Format {
        what,
        location,
        message: message.into(),
    }
}

pub fn parse_csv(text: &str, classes: Option<usize>) -> Result<Dataset> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let loc = || format!("line {}", n + 1);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("").trim();
        let label: usize = label
            .parse()
            .map_err(|_| format_err("csv dataset", loc(), format!("bad label {label:?}")))?;
        let row = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err("csv dataset", loc(), format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if row.is_empty() => {
                return Err(format_err("csv dataset", loc(), "row has no values"))
            }
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(format_err(
                    "csv dataset",
                    loc(),
                    format!("{} values, expected {d}", row.len()),
                ))
            }
            _ => {}
        }
        x.extend(row);
        y.push(label);
    }
    let dim = dim.ok_or_else(|| format_err("csv dataset", "line 1".into(), "empty file"))?;
    let classes = classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1).max(2));
    Dataset::new(Tensor::matrix(y.len(), dim, x)?, y, classes)
}

pub fn parse_raw_f32(bytes: &[u8], classes: Option<usize>) -> Result<Dataset> {
    let at = |offset: usize| format!("byte {offset}");
    if bytes.len() < RAW_HEADER_LEN {
        return Err(format_err(
            "raw_f32 dataset",
            at(bytes.len()),
            "truncated header",
        ));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(format_err("raw_f32 dataset", at(0), "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, m, c) = (word(4), word(8), word(12));
    if n == 0 || m == 0 {
        return Err(format_err(
            "raw_f32 dataset",
            at(4),
            format!("empty dataset n={n} m={m}"),
        ));
    }
    if let Some(expected) = classes {
        if expected != c {
            return Err(format_err(
                "raw_f32 dataset",
                at(12),
                format!("{c} classes, expected {expected}"),
            ));
        }
    }
    let need = RAW_HEADER_LEN + 4 * n * m + 4 * n;
    if bytes.len() != need {
        return Err(format_err(
            "raw_f32 dataset",
            at(bytes.len().min(need)),
            format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let mut x = Vec::with_capacity(n * m);
    for i in 0..n * m {
        let o = RAW_HEADER_LEN + 4 * i;
        let v = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err("raw_f32 dataset", at(o), "non-finite value"));
        }
        x.push(f64::from(v));
    }
    let labels_at = RAW_HEADER_LEN + 4 * n * m;
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let o = labels_at + 4 * i;
        let l = word(o);
        if l >= c {
            return Err(format_err(
                "raw_f32 dataset",
                at(o),
                format!("label {l} outside {c} classes"),
            ));
        }
        y.push(l);
    }
    Dataset::new(Tensor::matrix(n, m, x)?, y, c)
}

pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let _ = write!(out, "{y}");
        for v in x {
            let _ = write!(out, ",{}", io::fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn to_raw_f32(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * data.x.len() + 4 * data.len());
    out.extend_from_slice(&RAW_MAGIC);
    for v in [data.len(), data.dim(), data.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data.x.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &l in &data.y {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn write_dataset(data: &Dataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => io::write_text(path, &to_csv(data)),
        FileFormat::RawF32 => io::write_bytes(path, &to_raw_f32(data)),
    }
}
