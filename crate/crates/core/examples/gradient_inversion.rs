//! Reconstructs a captured batch with DLG and with IG (cosine distance plus a
//! TV prior), trying several step sizes and keeping the best match.

use leaklab::data::{synth_dataset, SynthKind, SynthSpec};
use leaklab::fl;
use leaklab::metrics::{greedy_alignment, ImageShape, QualityReport};
use leaklab::model::{self, Activation, InitScheme, ModelSpec};
use leaklab::pgla::{self, AttackConfig};

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[16, 32, 4], Activation::Relu);
    let shape = ImageShape::new(4, 4, 1);
    let data = synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, 40, 7), 16, 4, 0)?;
    let batch = data
        .unique_label_batches(4, 1, 5)?
        .remove(0)
        .sorted_by_label();
    let theta = model::init(&spec, InitScheme::Random, 0)?;
    let capture = fl::client_gradient(&spec, &theta, &batch, false)?;

    let inferred = pgla::idlg_infer_labels(&capture, &spec)?;
    println!("labels {:?} inferred as {:?}", batch.y(), inferred.labels);

    let steps = [0.1, 1.0, 10.0, 100.0];
    let attacks = [
        ("dlg", AttackConfig::dlg(200, 1.0)),
        (
            "ig",
            AttackConfig {
                image: Some(shape),
                ..AttackConfig::ig(400, 1.0, 1e-4)
            },
        ),
    ];
    for (name, cfg) in attacks {
        let r = pgla::reconstruct(
            &capture,
            &spec,
            &theta,
            &cfg.with_step_candidates(&steps),
            None,
        )?;
        let truth: Vec<Vec<f64>> = (0..batch.len())
            .map(|i| batch.x().row(i).to_vec())
            .collect();
        let rows = r.rows();
        let perm = greedy_alignment(&rows, &truth)?;
        let aligned: Vec<Vec<f64>> = perm.iter().map(|&j| rows[j].clone()).collect();
        let q = QualityReport::new(&aligned, &truth, shape)?;
        println!(
            "{name}: step {} match loss {:.3e}, PSNR min {:.1} / max {:.1} dB, SSIM {:.3}",
            r.step_size, r.best_match_loss, q.min_psnr, q.max_psnr, q.mean_ssim
        );
    }
    Ok(())
}
