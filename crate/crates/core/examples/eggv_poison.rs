//! Decoder-guided poisoning: trains the model and a gradient decoder on
//! auxiliary batches, then compares how well the decoder reads victim batches
//! under the poisoned and the fresh weights.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::eggv::{self, PoisonConfig};
use leaklab::model::{self, Activation, Batch, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let blobs = SynthSpec::new(SynthKind::GaussianBlobs, 400, 7);
    let sorted = |b: Vec<Batch>| {
        b.into_iter()
            .map(|b| b.sorted_by_label())
            .collect::<Vec<_>>()
    };
    let aux = sorted(synth_dataset(&blobs, 16, 4, 1)?.all_unique_label_batches(4, 0)?);
    let victims = sorted(synth_dataset(&blobs, 16, 4, 2)?.unique_label_batches(4, 10, 0)?);

    let theta0 = model::init(&spec, InitScheme::Random, 0)?;
    let config = PoisonConfig {
        rho: 0.016,
        iterations: 1000,
        ..PoisonConfig::default()
    };
    let run = eggv::poison_model(&spec, &theta0, &aux, &config)?;
    println!(
        "{:?} after {} evaluations: loss {:.4} -> moving average {:.4}, {} projected entries",
        run.stop,
        run.loss_curve.len(),
        run.initial_loss(),
        run.final_moving_average(),
        run.plan.dim()
    );

    let mean_score = |theta| -> leaklab::Result<f64> {
        let mut total = 0.0;
        for b in &victims {
            total += eggv::vulnerability_score(&spec, theta, &run.decoder, &run.plan, b)?;
        }
        Ok(total / victims.len() as f64)
    };
    println!(
        "victim decoding error: poisoned {:.4}, fresh {:.4}",
        mean_score(&run.theta_star)?,
        mean_score(&theta0)?
    );
    Ok(())
}
