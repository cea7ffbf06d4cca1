//! How much each sample contributes to a class's last-layer gradient, and the
//! weighted input average an observer can read off that gradient.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::fl;
use leaklab::lambda;
use leaklab::model::{self, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::linear(16, 4);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 40, 7), 16, 4, 0)?;
    let batch = data.unique_label_batches(4, 1, 2)?.remove(0);
    let theta = model::init(&spec, InitScheme::Xavier, 0)?;

    let lam = lambda::compute_lambda(&spec, &theta, &batch)?;
    print!(
        "{}",
        lambda::profile_csv(&lambda::lambda_bias_profile(&lam))
    );

    // A linear head leaks inputs directly: each class row of the weight
    // gradient over its bias gradient is the λ-weighted mix of the inputs.
    // Residual signs differ within a row, so weights can leave [0, 1].
    let capture = fl::client_gradient(&spec, &theta, &batch, false)?;
    let avg = lambda::weighted_average_from_grads(&capture, &spec, 0)?;
    let rows: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| batch.x().row(i).to_vec())
        .collect();
    let mixed = lam.mix(&rows)?;
    for (k, (a, m)) in avg.per_class.iter().zip(&mixed).enumerate() {
        let err = a
            .iter()
            .zip(m)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        println!(
            "class {k}: λ {:?}, max |average - λ mix| = {err:.1e}",
            lam.row(k)
                .iter()
                .map(|v| (v * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
