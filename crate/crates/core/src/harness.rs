//! Experiment orchestration: datasets, initialization, poisoning, federated
//! rounds with gradient capture, detection, attack, landscape and report.
//!
//! Every random draw derives from the master seed through [`derive_seed`]
//! with a stage name and index, so each stage reproduces on its own. Stages
//! run in order and persist their outputs under `output_dir/run_id`; the
//! `detect`, `lambda`, `attack` and `landscape` stages can also be rerun
//! from those files alone.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml
//! data/{target,aux}.csv
//! params/initial, params/round<r>, params/final     (.f64 + .hdr)
//! poison/round<r>/                                  (decoder run or fishing.hdr)
//! captures/<stem>                                   (gradient captures)
//! batches/<stem>.csv                                (the captured private batch)
//! lambda/<stem>.csv, attack/<stem>.*
//! landscape/grid.csv
//! report.json, report.csv, report.jsonl, timings.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Batching, DatasetSource, ExperimentConfig, PoisonChoice, PoisonSchedule};
use crate::data::{self, Dataset, FileFormat};
use crate::eggv::{self, Landscape, PoisonRun};
use crate::error::{Error, Result};
use crate::fl::{self, ClientState, GradientCapture};
use crate::io::{self, fmt_f64, Header};
use crate::lambda;
use crate::metrics::{self, ImageShape, QualityReport};
use crate::model::{self, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::pgla::{self, AttackConfig};
use crate::seed::derive_seed;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    Init,
    Poison,
    Capture,
    Detect,
    Lambda,
    Attack,
    Landscape,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Data,
        Stage::Init,
        Stage::Poison,
        Stage::Capture,
        Stage::Detect,
        Stage::Lambda,
        Stage::Attack,
        Stage::Landscape,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Init => "init",
            Stage::Poison => "poison",
            Stage::Capture => "capture",
            Stage::Detect => "detect",
            Stage::Lambda => "lambda",
            Stage::Attack => "attack",
            Stage::Landscape => "landscape",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown stage {s:?}; expected one of {}",
                    Stage::ALL.map(Stage::name).join(", ")
                ))
            })
    }
}

/// Non-finite floats travel through JSON as the strings `inf`, `-inf`, `nan`.
mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&crate::io::fmt_f64(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

/// One metric observation, keyed by the capture it was measured on.
/// `index` is the sample, class or layer the value refers to, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub client: usize,
    pub batch: usize,
    pub metric: String,
    pub index: Option<usize>,
    #[serde(with = "float_repr")]
    pub value: f64,
}

impl MetricRow {
    fn new(capture: &GradientCapture, metric: &str, index: Option<usize>, value: f64) -> Self {
        Self {
            round: capture.round,
            client: capture.client_id,
            batch: capture.batch_index,
            metric: metric.to_string(),
            index,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub round: usize,
    pub kind: String,
    /// Decoder-guided runs only.
    pub updates: Option<usize>,
    pub stop: Option<String>,
    #[serde(with = "float_repr")]
    pub initial_loss: f64,
    #[serde(with = "float_repr")]
    pub final_moving_average: f64,
    /// Relative to the run directory.
    pub loss_curve_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub rows: usize,
    #[serde(with = "float_repr")]
    pub center_score: f64,
    #[serde(with = "float_repr")]
    pub theta_star_score: f64,
    pub file: String,
}

/// Everything a run produced apart from bulky artifacts, which live in files
/// next to it. Wall-clock timings are kept out of the serialized form so
/// identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub master_seed: u64,
    /// The validated config, as TOML.
    pub config: String,
    pub completed: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub poison: Vec<PoisonSummary>,
    pub landscape: Option<LandscapeSummary>,
    pub failures: Vec<StageFailure>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            run_id: config.run_id.clone(),
            master_seed: config.master_seed,
            config: config.to_toml()?,
            completed: Vec::new(),
            rows: Vec::new(),
            poison: Vec::new(),
            landscape: None,
            failures: Vec::new(),
            timings: Vec::new(),
        })
    }

    /// Rows with the given metric name, in report order.
    pub fn metric(&self, name: &str) -> impl Iterator<Item = &MetricRow> + '_ {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.metric == name)
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.metric(name).map(|r| r.value).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "run report",
            location: format!("line {}", e.line()),
            message: e.to_string(),
        })
    }

    /// Header `run_id,round,client,batch,metric,index,value`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,round,client,batch,metric,index,value\n");
        for r in &self.rows {
            let index = r.index.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{index},{}",
                self.run_id,
                r.round,
                r.client,
                r.batch,
                r.metric,
                fmt_f64(r.value)
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            run_id: &'a str,
            round: usize,
            client: usize,
            batch: usize,
            metric: &'a str,
            index: Option<usize>,
            #[serde(with = "float_repr")]
            value: f64,
        }
        let mut out = String::new();
        for r in &self.rows {
            let line = Line {
                run_id: &self.run_id,
                round: r.round,
                client: r.client,
                batch: r.batch,
                metric: &r.metric,
                index: r.index,
                value: r.value,
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::invalid(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Option<T> {
        let start = Instant::now();
        let out = f(self);
        self.timings
            .push((stage.name().to_string(), start.elapsed().as_secs_f64()));
        match out {
            Ok(v) => {
                self.completed.push(stage.name().to_string());
                Some(v)
            }
            Err(e) => {
                self.failures.push(StageFailure {
                    stage: stage.name().to_string(),
                    message: e.to_string(),
                });
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

/// Writes `report.csv` and/or `report.jsonl` into `dir`.
pub fn emit_report(
    report: &RunReport,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for f in formats {
        let (name, text) = match f {
            ReportFormat::Csv => ("report.csv", report.to_csv()),
            ReportFormat::JsonLines => ("report.jsonl", report.to_jsonl()?),
        };
        let path = dir.join(name);
        io::write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `report.json`, both row formats and `timings.csv`.
pub fn save_report(report: &RunReport, dir: &Path) -> Result<()> {
    io::write_text(&dir.join("report.json"), &report.to_json()?)?;
    emit_report(report, dir, &[ReportFormat::Csv, ReportFormat::JsonLines])?;
    let mut timings = String::from("stage,seconds\n");
    for (stage, secs) in &report.timings {
        let _ = writeln!(timings, "{stage},{secs}");
    }
    io::write_text(&dir.join("timings.csv"), &timings)
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    RunReport::from_json(&io::read_text(&dir.join("report.json"))?)
}

pub fn run_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(&config.run_id)
}

/// Argmax-logit accuracy on a whole dataset; ties go to the lowest class.
pub fn evaluate_accuracy(spec: &ModelSpec, params: &ParamVector, dataset: &Dataset) -> Result<f64> {
    model::accuracy(spec, params, dataset.x(), dataset.y())
}

fn load_source(source: &DatasetSource, spec: &ModelSpec, seed: u64) -> Result<Dataset> {
    let d = match source {
        DatasetSource::Synthetic(s) => {
            data::synth_dataset(s, spec.input_dim(), spec.num_classes(), seed)?
        }
        DatasetSource::File { path, format } => {
            data::ingest_dataset(path, *format, Some(spec.num_classes()))?
        }
    };
    if d.dim() != spec.input_dim() || d.classes() != spec.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} features over {} classes; the model expects {} over {}",
            d.dim(),
            d.classes(),
            spec.input_dim(),
            spec.num_classes()
        )));
    }
    Ok(d)
}

/// The clients' private data and the attacker's auxiliary set. Without an
/// explicit auxiliary source, a synthetic target is redrawn from the same
/// distribution with another sampling seed, and a file target is reused.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let spec = &config.model;
    let target = load_source(
        &config.dataset,
        spec,
        derive_seed(config.master_seed, "dataset", 0),
    )?;
    let aux_source = config.aux_dataset.as_ref().unwrap_or(&config.dataset);
    let aux = load_source(aux_source, spec, derive_seed(config.master_seed, "aux", 0))?;
    Ok((target, aux))
}

/// Splits the target set across clients and cuts each shard into batches.
pub fn build_clients(config: &ExperimentConfig, target: &Dataset) -> Result<Vec<ClientState>> {
    let count = config.clients.count;
    let sizes = if config.clients.sizes.is_empty() {
        vec![target.len() / count; count]
    } else {
        config.clients.sizes.clone()
    };
    target
        .split(&sizes)?
        .iter()
        .enumerate()
        .map(|(id, shard)| {
            let batches = match config.batching {
                Batching::Sequential => shard.batches(config.batch_size)?,
                Batching::UniqueLabels => shard.all_unique_label_batches(
                    config.batch_size,
                    derive_seed(config.master_seed, "batching", id as u64),
                )?,
            };
            if batches.is_empty() {
                return Err(Error::invalid(format!("client {id} has no full batch")));
            }
            ClientState::new(id, batches)
        })
        .collect()
}

/// Auxiliary batches for poisoning, each sorted by label so the decoder's
/// output slots line up with a canonical sample order.
pub fn aux_batches(config: &ExperimentConfig, aux: &Dataset) -> Result<Vec<Batch>> {
    let batches = if config.batch_size <= aux.classes() {
        aux.all_unique_label_batches(
            config.batch_size,
            derive_seed(config.master_seed, "aux-batches", 0),
        )?
    } else {
        aux.batches(config.batch_size)?
    };
    Ok(batches.iter().map(Batch::sorted_by_label).collect())
}

pub fn initial_params(config: &ExperimentConfig) -> Result<ParamVector> {
    let seed = config
        .init
        .seed
        .unwrap_or_else(|| derive_seed(config.master_seed, "init", 0));
    model::init(&config.model, config.init.scheme, seed)
}

/// Result of the poisoning applied before one round.
#[derive(Debug, Clone)]
pub enum PoisonOutcome {
    Eggv(Box<PoisonRun>),
    Fishing {
        target_class: usize,
        params: ParamVector,
    },
}

impl PoisonOutcome {
    pub fn params(&self) -> &ParamVector {
        match self {
            PoisonOutcome::Eggv(run) => &run.theta_star,
            PoisonOutcome::Fishing { params, .. } => params,
        }
    }
}

/// Applies the configured poisoning to the parameters about to be sent in
/// `round`. `None` when no poisoning is configured.
pub fn poison_params(
    config: &ExperimentConfig,
    params: &ParamVector,
    aux: &[Batch],
    round: usize,
) -> Result<Option<PoisonOutcome>> {
    match config.poison {
        PoisonChoice::None => Ok(None),
        PoisonChoice::Fishing { target_class } => Ok(Some(PoisonOutcome::Fishing {
            target_class,
            params: eggv::fishing_baseline_poison(&config.model, params, target_class)?,
        })),
        PoisonChoice::Eggv => {
            let mut pc = config.eggv.clone();
            pc.seed = derive_seed(
                derive_seed(config.master_seed, "poison", round as u64),
                "eggv",
                pc.seed,
            );
            let run = eggv::poison_model(&config.model, params, aux, &pc)?;
            Ok(Some(PoisonOutcome::Eggv(Box::new(run))))
        }
    }
}

fn poisoned_round(config: &ExperimentConfig, round: usize) -> bool {
    config.poison != PoisonChoice::None
        && match config.poison_schedule {
            PoisonSchedule::First => round == 0,
            PoisonSchedule::Every => true,
        }
}

/// Per-capture rows recorded by the capture stage itself.
pub fn capture_rows(
    config: &ExperimentConfig,
    capture: &GradientCapture,
) -> Result<Vec<MetricRow>> {
    let mut rows = vec![
        MetricRow::new(capture, "batch_size", None, capture.batch_size() as f64),
        MetricRow::new(capture, "grad_norm", None, capture.batch_grad.norm()),
    ];
    if let PoisonChoice::Fishing { target_class } = config.poison {
        let present = eggv::fishing_capture_has_target(capture, &config.model, target_class)?;
        rows.push(MetricRow::new(
            capture,
            "fishing_target_present",
            Some(target_class),
            f64::from(u8::from(present)),
        ));
    }
    Ok(rows)
}

/// D-SNR (overall, per layer and the singular flag) and per-sample
/// gradient-norm statistics, from the capture's per-sample gradients.
pub fn detect_rows(config: &ExperimentConfig, capture: &GradientCapture) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if !config.detect.needs_per_sample() {
        return Ok(rows);
    }
    let per_sample = capture.per_sample.as_ref().ok_or_else(|| {
        Error::invalid(format!(
            "capture {} has no per-sample gradients",
            capture.file_stem()
        ))
    })?;
    if config.detect.d_snr {
        let r = metrics::d_snr(per_sample, &config.model)?;
        rows.push(MetricRow::new(capture, "d_snr", None, r.value));
        rows.push(MetricRow::new(
            capture,
            "d_snr_singular",
            None,
            f64::from(u8::from(r.singular)),
        ));
        for (l, (_, v)) in r.per_layer.iter().enumerate() {
            rows.push(MetricRow::new(capture, "d_snr_layer", Some(l), *v));
        }
    }
    if config.detect.grad_variance {
        let (var, mean) = metrics::grad_norm_variance(per_sample)?;
        rows.push(MetricRow::new(capture, "grad_norm_variance", None, var));
        rows.push(MetricRow::new(capture, "grad_norm_mean", None, mean));
    }
    Ok(rows)
}

/// λ profile of the captured batch under `params`, and the largest gap
/// between the per-class weighted average read off the last-layer gradient
/// and `Λ` applied to the batch's last-layer inputs.
pub fn lambda_rows(
    spec: &ModelSpec,
    params: &ParamVector,
    capture: &GradientCapture,
    truth: &Batch,
    out: Option<&Path>,
) -> Result<Vec<MetricRow>> {
    let lam = lambda::compute_lambda(spec, params, truth)?;
    let profile = lambda::lambda_bias_profile(&lam);
    let mut rows = vec![MetricRow::new(
        capture,
        "lambda_valid_rows",
        None,
        lam.valid.iter().filter(|v| **v).count() as f64,
    )];
    for (k, p) in profile.iter().enumerate() {
        if let Some(p) = p {
            rows.push(MetricRow::new(capture, "lambda_max", Some(k), p.max));
            rows.push(MetricRow::new(
                capture,
                "lambda_entropy",
                Some(k),
                p.entropy,
            ));
        }
    }
    let last = spec.num_layers() - 1;
    if spec.bias_at(last) {
        let features = model::penultimate_features(spec, params, truth.x())?;
        let feature_rows: Vec<Vec<f64>> = (0..features.rows())
            .map(|i| features.row(i).to_vec())
            .collect();
        let mixed = lam.mix(&feature_rows)?;
        let wavg = lambda::weighted_average_from_grads(capture, spec, last)?;
        let mut gap: f64 = 0.0;
        for k in 0..lam.classes {
            if lam.valid[k] && wavg.valid[k] {
                for (a, b) in wavg.per_class[k].iter().zip(&mixed[k]) {
                    gap = gap.max((a - b).abs());
                }
            }
        }
        rows.push(MetricRow::new(
            capture,
            "lambda_weighted_average_gap",
            None,
            gap,
        ));
    }
    if let Some(dir) = out {
        io::write_text(
            &dir.join(format!("{}.csv", capture.file_stem())),
            &lam.to_csv(),
        )?;
        io::write_text(
            &dir.join(format!("{}.profile.csv", capture.file_stem())),
            &lambda::profile_csv(&profile),
        )?;
    }
    Ok(rows)
}

/// Attack seed for one capture: independent of the order captures are
/// attacked in.
pub fn attack_seed(master_seed: u64, attack: &AttackConfig, capture: &GradientCapture) -> u64 {
    derive_seed(
        derive_seed(master_seed, "attack", attack.seed),
        &capture.file_stem(),
        0,
    )
}

/// Reconstructs the captured batch and scores it against the truth after
/// greedy alignment. Labels come from the truth batch; whether label
/// inference alone would have recovered them is reported separately.
pub fn attack_rows(
    spec: &ModelSpec,
    params: &ParamVector,
    capture: &GradientCapture,
    truth: &Batch,
    attack: &AttackConfig,
    shape: ImageShape,
    out: Option<&Path>,
) -> Result<(Vec<MetricRow>, QualityReport)> {
    let result = pgla::reconstruct(capture, spec, params, attack, Some(truth))?;
    let truth_rows: Vec<Vec<f64>> = (0..truth.len())
        .map(|i| truth.x().row(i).to_vec())
        .collect();
    let q = QualityReport::new(&result.rows(), &truth_rows, shape)?;
    let mut rows = Vec::new();
    for (i, v) in q.per_sample_psnr.iter().enumerate() {
        rows.push(MetricRow::new(capture, "psnr", Some(i), *v));
    }
    for (i, v) in q.per_sample_ssim.iter().enumerate() {
        rows.push(MetricRow::new(capture, "ssim", Some(i), *v));
    }
    rows.push(MetricRow::new(capture, "psnr_min", None, q.min_psnr));
    rows.push(MetricRow::new(
        capture,
        "psnr_pruned_mean",
        None,
        q.pruned_mean_psnr,
    ));
    rows.push(MetricRow::new(capture, "psnr_max", None, q.max_psnr));
    rows.push(MetricRow::new(capture, "ssim_mean", None, q.mean_ssim));
    rows.push(MetricRow::new(
        capture,
        "attack_failed",
        None,
        f64::from(u8::from(result.failed)),
    ));
    rows.push(MetricRow::new(
        capture,
        "attack_match_loss",
        None,
        result.best_match_loss,
    ));
    rows.push(MetricRow::new(
        capture,
        "attack_step_size",
        None,
        result.step_size,
    ));
    if truth.len() <= spec.num_classes() {
        let inferred = pgla::idlg_infer_labels(capture, spec)?;
        let mut true_labels = truth.y().to_vec();
        true_labels.sort_unstable();
        rows.push(MetricRow::new(
            capture,
            "labels_inferred_correct",
            None,
            f64::from(u8::from(inferred.labels == true_labels)),
        ));
    }
    if let Some(dir) = out {
        result.save(&dir.join(capture.file_stem()))?;
    }
    Ok((rows, q))
}

/// Vulnerability and accuracy grid around a decoder-guided run's `theta*`,
/// averaged over the first `eval_batches` auxiliary batches.
pub fn landscape_for(
    config: &ExperimentConfig,
    run: &PoisonRun,
    aux: &[Batch],
    target: &Dataset,
) -> Result<Landscape> {
    let lc = config.landscape.unwrap_or_default();
    let n = lc.eval_batches.min(aux.len()).max(1);
    eggv::landscape_grid(
        &config.model,
        &run.theta_star,
        &run.decoder,
        &run.plan,
        &aux[..n.min(aux.len())],
        lc.grid(),
        derive_seed(config.master_seed, "landscape", 0),
        lc.accuracy.then_some((target.x(), target.y())),
    )
}

fn batch_csv(batch: &Batch, classes: usize) -> Result<String> {
    Ok(data::to_csv(&Dataset::new(
        batch.x().clone(),
        batch.y().to_vec(),
        classes,
    )?))
}

fn read_batch(path: &Path, classes: usize) -> Result<Batch> {
    let d = data::parse_csv(&io::read_text(path)?, Some(classes))?;
    Batch::new(d.x().clone(), d.y().to_vec())
}

fn write_params(stem: &Path, kind: &str, params: &ParamVector) -> Result<()> {
    io::write_vector(stem, &Header::new().with("kind", kind), params.values())
}

fn read_params(stem: &Path, spec: &ModelSpec) -> Result<ParamVector> {
    let (_, values) = io::read_vector(stem)?;
    ParamVector::new(spec.layout()?, values)
}

fn save_poison(dir: &Path, outcome: &PoisonOutcome) -> Result<()> {
    match outcome {
        PoisonOutcome::Eggv(run) => run.save(dir),
        PoisonOutcome::Fishing {
            target_class,
            params,
        } => {
            write_params(&dir.join("theta_star"), "theta_star", params)?;
            io::write_text(
                &dir.join("fishing.hdr"),
                &Header::new()
                    .with("kind", "fishing")
                    .with("target_class", target_class)
                    .render(),
            )
        }
    }
}

fn poison_summary(round: usize, outcome: &PoisonOutcome) -> PoisonSummary {
    match outcome {
        PoisonOutcome::Eggv(run) => PoisonSummary {
            round,
            kind: "eggv".into(),
            updates: Some(run.loss_curve.len() - 1),
            stop: Some(format!("{:?}", run.stop).to_lowercase()),
            initial_loss: run.initial_loss(),
            final_moving_average: run.final_moving_average(),
            loss_curve_file: Some(format!("poison/round{round}/loss_curve.csv")),
        },
        PoisonOutcome::Fishing { .. } => PoisonSummary {
            round,
            kind: "fishing".into(),
            updates: None,
            stop: None,
            initial_loss: f64::NAN,
            final_moving_average: f64::NAN,
            loss_curve_file: None,
        },
    }
}

/// A capture together with the parameters it was computed at and the private
/// batch behind it.
#[derive(Debug, Clone)]
pub struct CaptureRecord {
    pub capture: GradientCapture,
    pub params: ParamVector,
    pub truth: Batch,
}

/// Everything in memory after a run, for callers that want more than the
/// report.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub target: Option<Dataset>,
    pub aux: Option<Dataset>,
    pub aux_batches: Vec<Batch>,
    pub initial: Option<ParamVector>,
    pub poison: Vec<(usize, PoisonOutcome)>,
    pub records: Vec<CaptureRecord>,
    pub quality: Vec<QualityReport>,
    pub landscape: Option<Landscape>,
    pub final_params: Option<ParamVector>,
}

/// Runs every stage and writes the run directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    run_stages(config, Stage::Report).map(|(r, _)| r)
}

/// Runs the pipeline up to and including `last`. A failing stage is
/// recorded in the report and the stages after it are skipped; the report
/// is still written. Errors only when the run directory is unusable.
pub fn run_stages(config: &ExperimentConfig, last: Stage) -> Result<(RunReport, RunArtifacts)> {
    config.validate()?;
    let dir = run_dir(config);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_text(&dir.join("config.toml"), &config.to_toml()?)?;
    let spec = &config.model;
    let mut report = RunReport::new(config)?;
    let mut art = RunArtifacts::default();
    let until = |s: Stage| s <= last;

    let datasets = report.timed(Stage::Data, |_| {
        let (target, aux) = build_datasets(config)?;
        data::write_dataset(&target, &dir.join("data/target.csv"), FileFormat::Csv)?;
        data::write_dataset(&aux, &dir.join("data/aux.csv"), FileFormat::Csv)?;
        let clients = build_clients(config, &target)?;
        let aux_b = aux_batches(config, &aux)?;
        Ok((target, aux, clients, aux_b))
    });
    let Some((target, aux, clients, aux_b)) = datasets else {
        return finish(report, art, &dir);
    };
    art.aux_batches = aux_b;
    art.target = Some(target);
    art.aux = Some(aux);
    if !until(Stage::Init) {
        return finish(report, art, &dir);
    }

    let Some(theta0) = report.timed(Stage::Init, |_| {
        let p = initial_params(config)?;
        write_params(&dir.join("params/initial"), "initial", &p)?;
        Ok(p)
    }) else {
        return finish(report, art, &dir);
    };
    art.initial = Some(theta0.clone());
    if !until(Stage::Poison) {
        return finish(report, art, &dir);
    }

    // Round-0 poisoning is its own stage; later rounds poison inside capture.
    let first = report.timed(Stage::Poison, |rep| {
        if !poisoned_round(config, 0) {
            return Ok(None);
        }
        let out = poison_params(config, &theta0, &art.aux_batches, 0)?
            .expect("poisoned round has an outcome");
        save_poison(&dir.join("poison/round0"), &out)?;
        rep.poison.push(poison_summary(0, &out));
        Ok(Some(out))
    });
    let Some(first) = first else {
        return finish(report, art, &dir);
    };
    if let Some(out) = first {
        art.poison.push((0, out));
    }
    if !until(Stage::Capture) {
        return finish(report, art, &dir);
    }

    let per_sample = config.detect.needs_per_sample();
    let captured = report.timed(Stage::Capture, |rep| {
        let mut params = theta0.clone();
        let mut records = Vec::new();
        let mut later = Vec::new();
        for round in 0..config.rounds {
            if round == 0 {
                if let Some((_, out)) = art.poison.first() {
                    params = out.params().clone();
                }
            } else if poisoned_round(config, round) {
                let out = poison_params(config, &params, &art.aux_batches, round)?
                    .expect("poisoned round has an outcome");
                save_poison(&dir.join(format!("poison/round{round}")), &out)?;
                rep.poison.push(poison_summary(round, &out));
                params = out.params().clone();
                later.push((round, out));
            }
            write_params(
                &dir.join(format!("params/round{round}")),
                "distributed",
                &params,
            )?;
            let outcome = fl::run_round(
                spec,
                &params,
                &clients,
                round,
                config.learning_rate,
                config.repetitions,
                per_sample,
            )?;
            for cap in outcome.captures {
                let stem = cap.file_stem();
                cap.save(&dir.join("captures").join(&stem))?;
                let truth = clients[cap.client_id].dataset()[cap.batch_index].clone();
                io::write_text(
                    &dir.join("batches").join(format!("{stem}.csv")),
                    &batch_csv(&truth, spec.num_classes())?,
                )?;
                rep.rows.extend(capture_rows(config, &cap)?);
                records.push(CaptureRecord {
                    capture: cap,
                    params: outcome.distributed.clone(),
                    truth,
                });
            }
            params = outcome.next;
        }
        write_params(&dir.join("params/final"), "final", &params)?;
        Ok((records, later, params))
    });
    let Some((records, later, final_params)) = captured else {
        return finish(report, art, &dir);
    };
    art.records = records;
    art.poison.extend(later);
    art.final_params = Some(final_params);

    if until(Stage::Detect)
        && report
            .timed(Stage::Detect, |rep| {
                for r in &art.records {
                    rep.rows.extend(detect_rows(config, &r.capture)?);
                }
                Ok(())
            })
            .is_none()
    {
        return finish(report, art, &dir);
    }

    if until(Stage::Lambda)
        && config.detect.lambda
        && report
            .timed(Stage::Lambda, |rep| {
                for r in &art.records {
                    rep.rows.extend(lambda_rows(
                        spec,
                        &r.params,
                        &r.capture,
                        &r.truth,
                        Some(&dir.join("lambda")),
                    )?);
                }
                Ok(())
            })
            .is_none()
    {
        return finish(report, art, &dir);
    }

    if until(Stage::Attack) {
        if let Some(attack) = &config.attack {
            let shape = config.image_shape();
            let quality = report.timed(Stage::Attack, |rep| {
                let out_dir = dir.join("attack");
                let results = parallel_map(&art.records, |r| {
                    let cfg = attack.clone().with_seed(attack_seed(
                        config.master_seed,
                        attack,
                        &r.capture,
                    ));
                    attack_rows(
                        spec,
                        &r.params,
                        &r.capture,
                        &r.truth,
                        &cfg,
                        shape,
                        Some(&out_dir),
                    )
                })?;
                let mut all = Vec::new();
                for (rows, q) in results {
                    rep.rows.extend(rows);
                    all.push(q);
                }
                Ok(all)
            });
            match quality {
                Some(q) => art.quality = q,
                None => return finish(report, art, &dir),
            }
        }
    }

    if until(Stage::Landscape) && config.landscape.is_some() {
        let run = art.poison.iter().find_map(|(_, o)| match o {
            PoisonOutcome::Eggv(run) => Some(run.clone()),
            _ => None,
        });
        let target = art.target.as_ref().expect("data stage ran");
        let grid = report.timed(Stage::Landscape, |rep| {
            let run = run.ok_or_else(|| {
                Error::invalid("the landscape needs a decoder-guided poisoning run")
            })?;
            let land = landscape_for(config, &run, &art.aux_batches, target)?;
            io::write_text(&dir.join("landscape/grid.csv"), &land.to_csv())?;
            let lc = config.landscape.unwrap_or_default();
            let eval = &art.aux_batches[..lc.eval_batches.min(art.aux_batches.len()).max(1)];
            let mut at_star = 0.0;
            for b in eval {
                at_star +=
                    eggv::vulnerability_score(spec, &run.theta_star, &run.decoder, &run.plan, b)?;
            }
            let mid = land.steps() / 2;
            rep.landscape = Some(LandscapeSummary {
                rows: land.scores.len(),
                center_score: land.score(mid, mid),
                theta_star_score: at_star / eval.len() as f64,
                file: "landscape/grid.csv".into(),
            });
            Ok(land)
        });
        match grid {
            Some(l) => art.landscape = Some(l),
            None => return finish(report, art, &dir),
        }
    }

    if until(Stage::Report) {
        report.completed.push(Stage::Report.name().to_string());
    }
    finish(report, art, &dir)
}

/// Maps `f` over `items` on all available cores; output keeps input order
/// and the first error (in input order) wins.
fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(items.len())
        .max(1);
    let f = &f;
    let mut slots: Vec<Option<Result<U>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn finish(report: RunReport, art: RunArtifacts, dir: &Path) -> Result<(RunReport, RunArtifacts)> {
    save_report(&report, dir)?;
    Ok((report, art))
}

/// Stems of all captures persisted under `dir/captures`, sorted by
/// (round, client, batch).
pub fn list_captures(dir: &Path) -> Result<Vec<String>> {
    let cap_dir = dir.join("captures");
    let entries = std::fs::read_dir(&cap_dir).map_err(|e| Error::io(&cap_dir, e))?;
    let mut keyed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&cap_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".hdr") else {
            continue;
        };
        let h = Header::parse(&io::read_text(&entry.path())?)?;
        if h.get("kind") != Some("gradient_capture") {
            continue;
        }
        keyed.push((
            (
                h.parse_usize("round")?,
                h.parse_usize("client")?,
                h.parse_usize("batch")?,
            ),
            stem.to_string(),
        ));
    }
    keyed.sort();
    Ok(keyed.into_iter().map(|(_, s)| s).collect())
}

/// Reloads every capture of a finished capture stage from `dir`.
pub fn load_records(config: &ExperimentConfig, dir: &Path) -> Result<Vec<CaptureRecord>> {
    let spec = &config.model;
    let mut out = Vec::new();
    let mut params_cache: Vec<Option<ParamVector>> = Vec::new();
    for stem in list_captures(dir)? {
        let capture = GradientCapture::load(&dir.join("captures").join(&stem), spec)?;
        if params_cache.len() <= capture.round {
            params_cache.resize(capture.round + 1, None);
        }
        let params = match &params_cache[capture.round] {
            Some(p) => p.clone(),
            None => {
                let p = read_params(&dir.join(format!("params/round{}", capture.round)), spec)?;
                params_cache[capture.round] = Some(p.clone());
                p
            }
        };
        let truth = read_batch(
            &dir.join("batches").join(format!("{stem}.csv")),
            spec.num_classes(),
        )?;
        out.push(CaptureRecord {
            capture,
            params,
            truth,
        });
    }
    Ok(out)
}

/// Reruns one analysis stage on a persisted run directory and writes its
/// rows to `<stage>.csv` there (same columns as `report.csv`).
pub fn rerun_stage(config: &ExperimentConfig, stage: Stage) -> Result<Vec<MetricRow>> {
    let dir = run_dir(config);
    let spec = &config.model;
    let mut rows = Vec::new();
    match stage {
        Stage::Detect | Stage::Lambda | Stage::Attack => {
            for r in load_records(config, &dir)? {
                match stage {
                    Stage::Detect => rows.extend(detect_rows(config, &r.capture)?),
                    Stage::Lambda => rows.extend(lambda_rows(
                        spec,
                        &r.params,
                        &r.capture,
                        &r.truth,
                        Some(&dir.join("lambda")),
                    )?),
                    _ => {
                        let attack = config
                            .attack
                            .as_ref()
                            .ok_or_else(|| Error::invalid("no [attack] section in the config"))?;
                        let cfg = attack.clone().with_seed(attack_seed(
                            config.master_seed,
                            attack,
                            &r.capture,
                        ));
                        let (ar, _) = attack_rows(
                            spec,
                            &r.params,
                            &r.capture,
                            &r.truth,
                            &cfg,
                            config.image_shape(),
                            Some(&dir.join("attack")),
                        )?;
                        rows.extend(ar);
                    }
                }
            }
        }
        Stage::Landscape => {
            let run = PoisonRun::load(&dir.join("poison/round0"), spec, config.eggv.clone())?;
            let aux = data::ingest_dataset(
                &dir.join("data/aux.csv"),
                FileFormat::Csv,
                Some(spec.num_classes()),
            )?;
            let target = data::ingest_dataset(
                &dir.join("data/target.csv"),
                FileFormat::Csv,
                Some(spec.num_classes()),
            )?;
            let land = landscape_for(config, &run, &aux_batches(config, &aux)?, &target)?;
            io::write_text(&dir.join("landscape/grid.csv"), &land.to_csv())?;
            return Ok(rows);
        }
        other => {
            return Err(Error::Stage {
                stage: other.name().into(),
                message: "only detect, lambda, attack and landscape rerun from persisted artifacts"
                    .into(),
            })
        }
    }
    let partial = RunReport {
        rows,
        ..RunReport::new(config)?
    };
    io::write_text(
        &dir.join(format!("{}.csv", stage.name())),
        &partial.to_csv(),
    )?;
    Ok(partial.rows)
}

/// Re-emits `report.csv` and `report.jsonl` from a persisted `report.json`.
pub fn reemit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let report = load_report(dir)?;
    emit_report(&report, dir, &[ReportFormat::Csv, ReportFormat::JsonLines])
}
