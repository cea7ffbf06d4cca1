//! Scores a filter-normalized 2-D slice around a poisoned model and prints it
//! as a small table.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::eggv::{self, GridSpec, PoisonConfig};
use leaklab::model::{self, Activation, InitScheme, ModelSpec};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 400, 7), 16, 4, 1)?;
    let aux: Vec<_> = data
        .all_unique_label_batches(4, 0)?
        .into_iter()
        .map(|b| b.sorted_by_label())
        .collect();
    let theta0 = model::init(&spec, InitScheme::Random, 0)?;
    let run = eggv::poison_model(
        &spec,
        &theta0,
        &aux,
        &PoisonConfig {
            iterations: 300,
            ..PoisonConfig::default()
        },
    )?;

    let grid = GridSpec {
        extent: 1.0,
        steps: 7,
    };
    let land = eggv::landscape_grid(
        &spec,
        &run.theta_star,
        &run.decoder,
        &run.plan,
        &aux[..4],
        grid,
        3,
        Some((data.x(), data.y())),
    )?;
    let acc = land.accuracy.as_ref().expect("accuracy requested");
    println!("score (accuracy) by row a, column b over {:?}", land.axis);
    for i in 0..land.steps() {
        let cells: Vec<String> = (0..land.steps())
            .map(|j| format!("{:.4} ({:.2})", land.score(i, j), acc[i * land.steps() + j]))
            .collect();
        println!("{}", cells.join("  "));
    }
    Ok(())
}
