//! Per-sample gradient statistics a client could check before uploading:
//! D-SNR and gradient-norm variance, on fresh and fishing-poisoned weights.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::eggv;
use leaklab::fl;
use leaklab::metrics;
use leaklab::model::{self, Activation, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 80, 7), 16, 4, 0)?;
    let batches = data.unique_label_batches(4, 5, 1)?;
    let fresh = model::init(&spec, InitScheme::Random, 0)?;
    let fished = eggv::fishing_baseline_poison(&spec, &fresh, 2)?;

    for (name, theta) in [("fresh", &fresh), ("fishing", &fished)] {
        for (i, b) in batches.iter().enumerate() {
            let cap = fl::client_gradient(&spec, theta, b, true)?;
            let per = cap
                .per_sample
                .as_ref()
                .expect("requested per-sample gradients");
            let snr = metrics::d_snr(per, &spec)?;
            let (var, mean) = metrics::grad_norm_variance(per)?;
            let flagged = eggv::fishing_capture_has_target(&cap, &spec, 2)?;
            println!(
                "{name} batch {i}: D-SNR {:.3e} (layer {}), norm variance {var:.3e}, mean {mean:.3e}, target seen {flagged}",
                snr.value, snr.argmax_layer
            );
        }
    }
    Ok(())
}
