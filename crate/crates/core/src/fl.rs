//! A minimal federated round: clients compute gradients on private batches,
//! the server aggregates them weighted by dataset size and takes one step.
//!
//! The server sees every upload, so each batch gradient doubles as a
//! [`GradientCapture`] for offline analysis.

use std::path::Path;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::io::{self, Header};
use crate::model::{self, Batch, ModelSpec};
use crate::params::ParamVector;

/// A client and its private data.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    dataset: Vec<Batch>,
    size: usize,
}

impl ClientState {
    pub fn new(id: usize, dataset: Vec<Batch>) -> Result<Self> {
        if dataset.is_empty() || dataset.iter().any(Batch::is_empty) {
            return Err(Error::invalid(format!(
                "client {id} has an empty dataset or batch"
            )));
        }
        let size = dataset.iter().map(Batch::len).sum();
        Ok(Self { id, dataset, size })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn dataset(&self) -> &[Batch] {
        &self.dataset
    }

    /// Total sample count across batches.
    pub fn size(&self) -> usize {
        self.size
    }
}

/// Batch size and label multiset (sorted) of a captured batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMeta {
    pub batch_size: usize,
    pub labels: Vec<usize>,
}

impl BatchMeta {
    pub fn of(batch: &Batch) -> Self {
        let mut labels = batch.y().to_vec();
        labels.sort_unstable();
        Self {
            batch_size: batch.len(),
            labels,
        }
    }

    pub fn has_unique_labels(&self) -> bool {
        self.labels.windows(2).all(|w| w[0] != w[1])
    }
}

/// A gradient upload as observed by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCapture {
    pub round: usize,
    pub client_id: usize,
    pub batch_index: usize,
    /// Gradient of the batch-mean loss.
    pub batch_grad: ParamVector,
    pub per_sample: Option<Vec<ParamVector>>,
    pub batch_meta: BatchMeta,
}

impl GradientCapture {
    pub fn at(mut self, round: usize, client_id: usize, batch_index: usize) -> Self {
        self.round = round;
        self.client_id = client_id;
        self.batch_index = batch_index;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.batch_meta.batch_size
    }

    /// `round<r>_client<c>_batch<b>`.
    pub fn file_stem(&self) -> String {
        format!(
            "round{}_client{}_batch{}",
            self.round, self.client_id, self.batch_index
        )
    }

    /// Writes `<stem>.f64`/`<stem>.hdr`, plus `<stem>.per_sample.f64` (B x P,
    /// row-major) when per-sample gradients are present.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = Header::new()
            .with("kind", "gradient_capture")
            .with("round", self.round)
            .with("client", self.client_id)
            .with("batch", self.batch_index)
            .with("batch_size", self.batch_meta.batch_size)
            .with("param_count", self.batch_grad.len())
            .with("labels", io::list(&self.batch_meta.labels))
            .with("per_sample", self.per_sample.is_some());
        io::write_vector(stem, &header, self.batch_grad.values())?;
        if let Some(per_sample) = &self.per_sample {
            let flat: Vec<f64> = per_sample
                .iter()
                .flat_map(|g| g.values().iter().copied())
                .collect();
            io::write_f64(&per_sample_path(stem), &flat)?;
        }
        Ok(())
    }

    /// Reads a capture written by [`save`](Self::save) for a model of `spec`.
    pub fn load(stem: &Path, spec: &ModelSpec) -> Result<Self> {
        let (header, values) = io::read_vector(stem)?;
        let layout = spec.layout()?;
        let param_count = header.parse_usize("param_count")?;
        if param_count != layout.total() || values.len() != param_count {
            return Err(Error::Format {
                what: "gradient capture",
                location: stem.display().to_string(),
                message: format!(
                    "parameter count {param_count} (file holds {}) does not match the model's {}",
                    values.len(),
                    layout.total()
                ),
            });
        }
        let batch_size = header.parse_usize("batch_size")?;
        let per_sample = if header.require("per_sample")? == "true" {
            let flat = io::read_f64(&per_sample_path(stem))?;
            if flat.len() != batch_size * param_count {
                return Err(Error::Format {
                    what: "per-sample capture",
                    location: per_sample_path(stem).display().to_string(),
                    message: format!(
                        "expected {} values, found {}",
                        batch_size * param_count,
                        flat.len()
                    ),
                });
            }
            Some(
                flat.chunks_exact(param_count)
                    .map(|c| ParamVector::new(layout.clone(), c.to_vec()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            round: header.parse_usize("round")?,
            client_id: header.parse_usize("client")?,
            batch_index: header.parse_usize("batch")?,
            batch_grad: ParamVector::new(layout, values)?,
            per_sample,
            batch_meta: BatchMeta {
                batch_size,
                labels: header.parse_list("labels")?,
            },
        })
    }
}

fn per_sample_path(stem: &Path) -> std::path::PathBuf {
    stem.with_extension("per_sample.f64")
}

/// Gradient of the batch-mean cross-entropy at `params`.
pub fn client_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    capture_per_sample: bool,
) -> Result<GradientCapture> {
    batch.check(spec)?;
    let batch_grad = autodiff::gradient(params, |_, t| model::batch_loss(spec, t, batch))?;
    let per_sample = if capture_per_sample {
        Some(autodiff::per_sample_grads(params, batch, |_, t, b| {
            model::batch_loss(spec, t, b)
        })?)
    } else {
        None
    };
    Ok(GradientCapture {
        round: 0,
        client_id: 0,
        batch_index: 0,
        batch_grad,
        per_sample,
        batch_meta: BatchMeta::of(batch),
    })
}

/// `sum_i w_i g_i` with `w_i = |D_i| / sum_j |D_j|`.
pub fn aggregate(captures: &[GradientCapture], client_sizes: &[usize]) -> Result<ParamVector> {
    let first = captures
        .first()
        .ok_or_else(|| Error::invalid("aggregate of no captures"))?;
    if captures.len() != client_sizes.len() {
        return Err(Error::invalid(format!(
            "{} captures but {} client sizes",
            captures.len(),
            client_sizes.len()
        )));
    }
    let total: usize = client_sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("client sizes sum to zero"));
    }
    let mut out = vec![0.0; first.batch_grad.len()];
    for (c, &size) in captures.iter().zip(client_sizes) {
        if c.batch_grad.len() != out.len() {
            return Err(Error::Shape {
                op: "aggregate",
                shapes: format!("[{}] vs [{}]", c.batch_grad.len(), out.len()),
            });
        }
        if c.round != first.round {
            return Err(Error::invalid(format!(
                "captures from rounds {} and {} mixed",
                first.round, c.round
            )));
        }
        let w = size as f64 / total as f64;
        for (o, g) in out.iter_mut().zip(c.batch_grad.values()) {
            *o += w * g;
        }
    }
    first.batch_grad.with_values(out)
}

/// `params - eta * update`.
pub fn sgd_step(params: &ParamVector, update: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.len() != update.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            shapes: format!("[{}] vs [{}]", params.len(), update.len()),
        });
    }
    let values = params
        .values()
        .iter()
        .zip(update.values())
        .map(|(p, u)| p - eta * u)
        .collect();
    params.with_values(values)
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    /// Parameters distributed at the start of the round.
    pub distributed: ParamVector,
    /// One capture per (client, batch), clients in order.
    pub captures: Vec<GradientCapture>,
    pub aggregated: ParamVector,
    pub next: ParamVector,
}

/// Mean of several batch captures of one client, as a single upload.
fn client_upload(captures: &[GradientCapture]) -> Result<GradientCapture> {
    let first = &captures[0];
    let n = captures.len() as f64;
    let mut mean = vec![0.0; first.batch_grad.len()];
    for c in captures {
        mean.iter_mut()
            .zip(c.batch_grad.values())
            .for_each(|(m, g)| *m += g / n);
    }
    Ok(GradientCapture {
        batch_grad: first.batch_grad.with_values(mean)?,
        per_sample: None,
        ..first.clone()
    })
}

/// Runs one round. Each client computes one capture per batch for
/// `batches_per_round` consecutive batches of its dataset (cycling, starting
/// at `round * batches_per_round`); its upload is their mean. Clients run
/// concurrently, then the server aggregates and steps.
pub fn run_round(
    spec: &ModelSpec,
    params: &ParamVector,
    clients: &[ClientState],
    round: usize,
    eta: f64,
    batches_per_round: usize,
    capture_per_sample: bool,
) -> Result<RoundOutcome> {
    if clients.is_empty() || batches_per_round == 0 {
        return Err(Error::invalid(
            "a round needs at least one client and one batch",
        ));
    }
    let per_client = std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter()
            .map(|c| {
                s.spawn(move || {
                    let n = c.dataset.len();
                    let count = batches_per_round.min(n);
                    (0..count)
                        .map(|j| {
                            let index = (round * batches_per_round + j) % n;
                            client_gradient(spec, params, &c.dataset[index], capture_per_sample)
                                .map(|cap| cap.at(round, c.id, index))
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let uploads = per_client
        .iter()
        .map(|caps| client_upload(caps))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
    let aggregated = aggregate(&uploads, &sizes)?;
    let next = sgd_step(params, &aggregated, eta)?;
    Ok(RoundOutcome {
        round,
        distributed: params.clone(),
        captures: per_client.into_iter().flatten().collect(),
        aggregated,
        next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn batch() -> Batch {
        Batch::from_rows(&[vec![0.2, 0.9], vec![0.5, 0.1]], vec![1, 0]).unwrap()
    }

    #[test]
    fn zero_linear_bias_rows_cancel() {
        let spec = ModelSpec::linear(2, 3);
        let params = ParamVector::zeros(spec.layout().unwrap());
        let cap = client_gradient(&spec, &params, &batch(), false).unwrap();
        let gb = cap.batch_grad.segment("fc0.bias").unwrap();
        assert!(gb.iter().sum::<f64>().abs() < 1e-15);
        assert!(cap
            .batch_grad
            .segment("fc0.weight")
            .unwrap()
            .iter()
            .any(|v| *v != 0.0));
    }

    #[test]
    fn duplicate_batch_matches_single() {
        let spec = ModelSpec::linear(2, 3);
        let params = model::init(&spec, model::InitScheme::Xavier, 1).unwrap();
        let one = Batch::from_rows(&[vec![0.3, 0.7]], vec![2]).unwrap();
        let two = Batch::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]], vec![2, 2]).unwrap();
        let a = client_gradient(&spec, &params, &one, false).unwrap();
        let b = client_gradient(&spec, &params, &two, false).unwrap();
        for (x, y) in a.batch_grad.values().iter().zip(b.batch_grad.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn per_sample_only_when_requested() {
        let spec = ModelSpec::linear(2, 2);
        let params = ParamVector::zeros(spec.layout().unwrap());
        let b = Batch::new(Tensor::zeros([1, 2]), vec![0]).unwrap();
        assert!(client_gradient(&spec, &params, &b, false)
            .unwrap()
            .per_sample
            .is_none());
        assert_eq!(
            client_gradient(&spec, &params, &b, true)
                .unwrap()
                .per_sample
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatch() {
        assert!(aggregate(&[], &[]).is_err());
        let spec = ModelSpec::linear(2, 2);
        let params = ParamVector::zeros(spec.layout().unwrap());
        let cap = client_gradient(&spec, &params, &batch_for(&[0]), false).unwrap();
        let other = ModelSpec::linear(3, 2);
        let cap2 = client_gradient(
            &other,
            &ParamVector::zeros(other.layout().unwrap()),
            &Batch::from_rows(&[vec![0.0; 3]], vec![0]).unwrap(),
            false,
        )
        .unwrap();
        assert!(aggregate(&[cap.clone(), cap2], &[1, 1]).is_err());
        assert!(aggregate(&[cap.clone(), cap.at(1, 1, 0)], &[1, 1]).is_err());
    }

    fn batch_for(y: &[usize]) -> Batch {
        Batch::from_rows(
            &y.iter().map(|_| vec![0.5, 0.5]).collect::<Vec<_>>(),
            y.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn meta_is_a_sorted_multiset() {
        let m = BatchMeta::of(&batch_for(&[1, 0, 1]));
        assert_eq!(m.labels, vec![0, 1, 1]);
        assert!(!m.has_unique_labels());
    }
}
