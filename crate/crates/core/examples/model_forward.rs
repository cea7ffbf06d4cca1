//! Builds an MLP under each initialization scheme and reports logit scale and
//! accuracy on a synthetic set.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::model::{self, Activation, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 200, 7), 16, 4, 0)?;
    println!(
        "{} parameters over segments {:?}",
        spec.param_count()?,
        spec.weight_segments()
    );
    for scheme in [InitScheme::Random, InitScheme::Xavier, InitScheme::He] {
        let theta = model::init(&spec, scheme, 3)?;
        let logits = model::logits(&spec, &theta, data.x())?;
        let spread = logits.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let acc = model::accuracy(&spec, &theta, data.x(), data.y())?;
        println!("{scheme:?}: max |logit| {spread:.4}, accuracy {acc:.3}");
    }
    Ok(())
}
