//! Experiment configuration: strict TOML with defaults and `GL_` environment
//! overrides.
//!
//! An override `GL_A__B=value` sets key `a.b`; `value` is read as a TOML
//! value, falling back to a string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FileFormat, SynthSpec};
use crate::eggv::{GridSpec, PoisonConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::ImageShape;
use crate::model::{InitScheme, ModelSpec};
use crate::pgla::AttackConfig;

pub const ENV_PREFIX: &str = "GL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    File { path: PathBuf, format: FileFormat },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub scheme: InitScheme,
    /// Derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub count: usize,
    /// Samples per client; empty splits the dataset evenly.
    pub sizes: Vec<usize>,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            count: 1,
            sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum PoisonChoice {
    #[default]
    None,
    Eggv,
    Fishing {
        target_class: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonSchedule {
    /// Poison the parameters distributed in round 0 only.
    #[default]
    First,
    /// Poison before every round.
    Every,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Consecutive samples.
    #[default]
    Sequential,
    /// One sample per distinct class in each batch (needs `B <= C`).
    UniqueLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub d_snr: bool,
    pub grad_variance: bool,
    pub lambda: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            d_snr: true,
            grad_variance: true,
            lambda: true,
        }
    }
}

impl DetectConfig {
    pub fn needs_per_sample(&self) -> bool {
        self.d_snr || self.grad_variance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub extent: f64,
    pub steps: usize,
    pub accuracy: bool,
    /// Auxiliary batches averaged per cell.
    pub eval_batches: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            extent: grid.extent,
            steps: grid.steps,
            accuracy: true,
            eval_batches: 4,
        }
    }
}

impl LandscapeConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            extent: self.extent,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub init: InitConfig,
    pub dataset: DatasetSource,
    /// Defaults to a fresh draw from the target distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_dataset: Option<DatasetSource>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub batching: Batching,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Batches captured per client per round.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub poison: PoisonChoice,
    #[serde(default)]
    pub poison_schedule: PoisonSchedule,
    #[serde(default)]
    pub eggv: PoisonConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeConfig>,
    /// Spatial reading of a sample, for TV and SSIM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
}

fn default_run_id() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_batch_size() -> usize {
    8
}

fn default_rounds() -> usize {
    1
}

fn default_learning_rate() -> f64 {
    0.1
}

fn default_repetitions() -> usize {
    100
}

impl ExperimentConfig {
    /// A config with every default and the given model and dataset.
    pub fn new(model: ModelSpec, dataset: DatasetSource) -> Self {
        Self {
            run_id: default_run_id(),
            master_seed: 0,
            output_dir: default_output_dir(),
            model,
            init: InitConfig::default(),
            dataset,
            aux_dataset: None,
            batch_size: default_batch_size(),
            batching: Batching::default(),
            clients: ClientsConfig::default(),
            rounds: default_rounds(),
            learning_rate: default_learning_rate(),
            repetitions: default_repetitions(),
            poison: PoisonChoice::default(),
            poison_schedule: PoisonSchedule::default(),
            eggv: PoisonConfig::default(),
            attack: None,
            detect: DetectConfig::default(),
            landscape: None,
            image: None,
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image
            .unwrap_or(ImageShape::flat(self.model.input_dim()))
    }

    /// Checks every cross-field invariant. Errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.into(),
            line: None,
            message,
        };
        self.model
            .validate()
            .map_err(|e| bad("model", e.to_string()))?;
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1".into()));
        }
        if !(self.eggv.rho > 0.0 && self.eggv.rho <= 1.0) {
            return Err(bad(
                "eggv.rho",
                format!("{} is outside the range (0, 1]", self.eggv.rho),
            ));
        }
        self.eggv
            .validate()
            .map_err(|e| bad("eggv", e.to_string()))?;
        if self.batching == Batching::UniqueLabels && self.batch_size > self.model.num_classes() {
            return Err(bad(
                "batch_size",
                format!(
                    "unique-label batches of {} need at least as many classes (model has {})",
                    self.batch_size,
                    self.model.num_classes()
                ),
            ));
        }
        if self.clients.count == 0 {
            return Err(bad("clients.count", "must be >= 1".into()));
        }
        if !self.clients.sizes.is_empty() && self.clients.sizes.len() != self.clients.count {
            return Err(bad(
                "clients.sizes",
                format!(
                    "{} sizes for {} clients",
                    self.clients.sizes.len(),
                    self.clients.count
                ),
            ));
        }
        if self.clients.sizes.iter().any(|&s| s < self.batch_size) {
            return Err(bad(
                "clients.sizes",
                "every client needs at least one batch".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(bad("repetitions", "must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(bad("learning_rate", "must be finite".into()));
        }
        if let PoisonChoice::Fishing { target_class } = self.poison {
            if target_class >= self.model.num_classes() {
                return Err(bad(
                    "poison.fishing.target_class",
                    format!(
                        "{target_class} outside {} classes",
                        self.model.num_classes()
                    ),
                ));
            }
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| bad("attack", e.to_string()))?;
            if let Some(img) = a.image {
                img.check(self.model.input_dim())
                    .map_err(|e| bad("attack.image", e.to_string()))?;
            }
        }
        if let Some(img) = self.image {
            img.check(self.model.input_dim())
                .map_err(|e| bad("image", e.to_string()))?;
        }
        if let Some(l) = &self.landscape {
            if l.steps < 2 || !(l.extent > 0.0 && l.extent.is_finite()) {
                return Err(bad(
                    "landscape",
                    "needs steps >= 2 and a positive extent".into(),
                ));
            }
            if l.eval_batches == 0 {
                return Err(bad("landscape.eval_batches", "must be >= 1".into()));
            }
        }
        for (key, src) in [
            ("dataset", Some(&self.dataset)),
            ("aux_dataset", self.aux_dataset.as_ref()),
        ] {
            if let Some(DatasetSource::File { path, .. }) = src {
                if !path.is_file() {
                    return Err(bad(key, format!("file {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    /// Creates `output_dir` and confirms it is writable.
    pub fn check_output_dir(&self) -> Result<()> {
        let dir = &self.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let probe = dir.join(".write_probe");
        std::fs::write(&probe, b"").map_err(|e| Error::Config {
            key: "output_dir".into(),
            line: None,
            message: format!("{} is not writable: {e}", dir.display()),
        })?;
        let _ = std::fs::remove_file(probe);
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("serializing config: {e}")))
    }
}

/// Parses, applies overrides, and validates, without touching the file
/// system beyond referenced dataset files.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    parse_config_in(text, overrides, Path::new(""))
}

/// Relative dataset paths that do not exist as given are resolved against
/// `base` before validation.
fn parse_config_in(
    text: &str,
    overrides: &[(String, String)],
    base: &Path,
) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: String::new(),
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let config: ExperimentConfig =
        ExperimentConfig::deserialize(table).map_err(|e: toml::de::Error| {
            let key = unknown_field(e.message()).unwrap_or_default();
            Error::Config {
                line: locate_key(text, &key),
                key,
                message: e.message().to_string(),
            }
        })?;
    let mut config = config;
    for src in std::iter::once(&mut config.dataset).chain(config.aux_dataset.as_mut()) {
        if let DatasetSource::File { path: p, .. } = src {
            if p.is_relative() && !p.is_file() {
                *p = base.join(&*p);
            }
        }
    }
    config.validate().map_err(|e| match e {
        Error::Config { key, message, .. } => Error::Config {
            line: locate_key(text, &key),
            key,
            message,
        },
        other => other,
    })?;
    Ok(config)
}

/// Reads `path` with `GL_` overrides from the process environment and checks
/// that the output directory is writable.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with_env(path, std::env::vars())
}

pub fn load_config_with_env(
    path: &Path,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<ExperimentConfig> {
    let text = io::read_text(path)?;
    let overrides = env_overrides(env);
    let config = parse_config_in(&text, &overrides, path.parent().unwrap_or(Path::new("")))?;
    config.check_output_dir()?;
    Ok(config)
}

/// `GL_A__B=v` becomes `("a.b", "v")`.
pub fn env_overrides(env: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config {
            key: key.into(),
            line: None,
            message: "empty override key".into(),
        })?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    line: None,
                    message: format!("override descends into non-table {p:?}"),
                })
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn unknown_field(message: &str) -> Option<String> {
    let start = message.find("unknown field `")? + "unknown field `".len();
    let end = message[start..].find('`')?;
    Some(message[start..start + end].to_string())
}

/// Best-effort line of a dotted key (or a bare leaf name) in TOML text.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    if key.is_empty() {
        return None;
    }
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    let mut current = String::new();
    let mut fallback = None;
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim_matches(['[', ']']).trim().to_string();
            if current == key {
                return Some(n + 1);
            }
            continue;
        }
        let Some((k, _)) = t.split_once('=') else {
            continue;
        };
        let k = k.trim();
        let full = if current.is_empty() {
            k.to_string()
        } else {
            format!("{current}.{k}")
        };
        if full == key || (table.is_empty() && k == leaf) || (current == table && k == leaf) {
            return Some(n + 1);
        }
        if k == leaf && fallback.is_none() {
            fallback = Some(n + 1);
        }
        if table.is_empty() && key == current {
            return Some(n + 1);
        }
    }
    fallback
}
