//! Three clients of unequal size run FedAvg rounds; the server keeps every
//! upload it sees.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::fl::{self, ClientState};
use leaklab::model::{self, Activation, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 240, 7), 16, 4, 1)?;
    let clients: Vec<ClientState> = data
        .split(&[120, 80, 40])?
        .iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d.batches(8)?))
        .collect::<leaklab::Result<_>>()?;

    let mut theta = model::init(&spec, InitScheme::He, 0)?;
    for round in 0..10 {
        let out = fl::run_round(&spec, &theta, &clients, round, 0.5, 1, false)?;
        theta = out.next;
        let acc = model::accuracy(&spec, &theta, data.x(), data.y())?;
        let norms: Vec<String> = out
            .captures
            .iter()
            .map(|c| format!("{:.3}", c.batch_grad.norm()))
            .collect();
        println!(
            "round {round}: upload norms [{}], accuracy {acc:.3}",
            norms.join(", ")
        );
    }
    Ok(())
}
