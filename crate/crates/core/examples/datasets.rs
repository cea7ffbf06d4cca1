//! Synthetic generators, unique-label batching and the two on-disk formats.

use leaklab::data::{self, FileFormat, SynthKind, SynthSpec};

fn main() -> leaklab::Result<()> {
    let dir = std::env::temp_dir().join("leaklab-datasets-example");
    for kind in [
        SynthKind::GaussianBlobs,
        SynthKind::StripePatterns,
        SynthKind::RandomUniform,
    ] {
        let d = data::synth_dataset(&SynthSpec::new(kind, 60, 7), 16, 4, 0)?;
        let mean = d.x().data().iter().sum::<f64>() / d.x().len() as f64;
        println!(
            "{kind:?}: {} samples of dim {}, mean pixel {mean:.3}",
            d.len(),
            d.dim()
        );
    }

    let d = data::synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 60, 7), 16, 4, 0)?;
    let batches = d.all_unique_label_batches(4, 1)?;
    println!(
        "{} unique-label batches, first labels {:?}",
        batches.len(),
        batches[0].y()
    );

    for (format, name) in [(FileFormat::Csv, "d.csv"), (FileFormat::RawF32, "d.bin")] {
        let path = dir.join(name);
        data::write_dataset(&d, &path, format)?;
        let back = data::ingest_dataset(&path, format, Some(4))?;
        let err = back
            .x()
            .data()
            .iter()
            .zip(d.x().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "{}: {} bytes, max round-trip error {err:.1e}",
            path.display(),
            std::fs::metadata(&path).map_or(0, |m| m.len())
        );
    }
    Ok(())
}
