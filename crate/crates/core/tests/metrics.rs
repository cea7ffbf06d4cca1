use leaklab::metrics::*;
use leaklab::model::{Activation, ModelSpec};
use leaklab::params::ParamVector;
use proptest::prelude::*;

fn with_weight(spec: &ModelSpec, weight: &[f64]) -> ParamVector {
    let layout = spec.layout().unwrap();
    let mut v = vec![0.0; layout.total()];
    v[..weight.len()].copy_from_slice(weight);
    ParamVector::new(layout, v).unwrap()
}

#[test]
fn identical_samples_give_reciprocal_of_b_minus_one() {
    let spec = ModelSpec::linear(2, 2);
    for b in 2..7 {
        let per: Vec<_> = (0..b)
            .map(|_| with_weight(&spec, &[0.3, -0.4, 0.0, 1.2]))
            .collect();
        let r = d_snr(&per, &spec).unwrap();
        assert!((r.value - 1.0 / (b - 1) as f64).abs() < 1e-12);
        assert!(!r.singular);
    }
}

#[test]
fn dominant_sample_norms() {
    let spec = ModelSpec::linear(2, 2);
    let per = [
        with_weight(&spec, &[3.0]),
        with_weight(&spec, &[0.0, 1.0]),
        with_weight(&spec, &[0.0, 0.0, 0.0, -1.0]),
    ];
    let r = d_snr(&per, &spec).unwrap();
    assert!((r.value - 1.5).abs() < 1e-12);
    assert_eq!(r.argmax_layer, "fc0.weight");
}

#[test]
fn single_live_sample_is_singular() {
    let spec = ModelSpec::linear(2, 2);
    let per = [with_weight(&spec, &[1.0]), with_weight(&spec, &[])];
    let r = d_snr(&per, &spec).unwrap();
    assert!(r.singular && r.value.is_infinite());
    assert!(d_snr(&per[..1], &spec).is_err());
}

#[test]
fn d_snr_brute_force_over_layers() {
    let spec = ModelSpec::mlp(&[3, 4, 2], Activation::Relu);
    let layout = spec.layout().unwrap();
    let per: Vec<ParamVector> = (0..4)
        .map(|i| {
            let v = (0..layout.total())
                .map(|j| ((i * 31 + j * 7) % 13) as f64 - 6.0)
                .collect();
            ParamVector::new(layout.clone(), v).unwrap()
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    for name in ["fc0.weight", "fc1.weight"] {
        let norms: Vec<f64> = per
            .iter()
            .map(|g| {
                g.segment(name)
                    .unwrap()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for i in 0..norms.len() {
            let others: f64 = (0..norms.len()).filter(|&j| j != i).map(|j| norms[j]).sum();
            best = best.max(norms[i] / others);
        }
    }
    let r = d_snr(&per, &spec).unwrap();
    assert!((r.value - best).abs() < 1e-12);
    assert_eq!(r.per_layer.len(), 2);
}

#[test]
fn variance_examples() {
    let spec = ModelSpec::linear(2, 2);
    let same: Vec<_> = (0..3).map(|_| with_weight(&spec, &[3.0, 4.0])).collect();
    assert_eq!(grad_norm_variance(&same).unwrap(), (0.0, 5.0));
    let spread = [with_weight(&spec, &[1.0]), with_weight(&spec, &[3.0])];
    let (var, mean) = grad_norm_variance(&spread).unwrap();
    assert!((var - 1.0).abs() < 1e-12 && (mean - 2.0).abs() < 1e-12);
    assert!(grad_norm_variance(&[]).is_err());
}

#[test]
fn psnr_examples() {
    let x = vec![0.2, 0.4, 0.6, 0.8];
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CEILING_DB);
    let off: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&off, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&x, &x[..3], 1.0).is_err());
}

#[test]
fn ssim_matches_literal_formula() {
    let a = [0.1, 0.5, 0.9, 0.3, 0.7, 0.2];
    let b = [0.2, 0.4, 0.8, 0.35, 0.6, 0.1];
    let n = 6.0;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    let (c1, c2) = (1e-4, 9e-4);
    let want =
        (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    let got = ssim(&a, &b, ImageShape::new(2, 3, 1)).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((ssim(&a, &a, ImageShape::new(3, 2, 1)).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&a, &b, ImageShape::new(2, 2, 1)).is_err());
}

#[test]
fn pruned_mean_drops_extremes() {
    assert_eq!(pruned_mean(&[1.0, 100.0, 2.0, 3.0, -50.0]), 2.0);
    assert_eq!(pruned_mean(&[4.0, 6.0]), 5.0);
    assert!(pruned_mean(&[]).is_nan());
}

#[test]
fn alignment_undoes_a_permutation() {
    let truth = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.2]];
    let hat = vec![truth[2].clone(), truth[0].clone(), truth[1].clone()];
    assert_eq!(greedy_alignment(&hat, &truth).unwrap(), vec![1, 2, 0]);
    let q = QualityReport::new(&truth, &truth, ImageShape::flat(2)).unwrap();
    assert_eq!(q.min_psnr, PSNR_CEILING_DB);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn d_snr_ignores_common_scale(
        w in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..6),
        s in 0.01f64..100.0,
    ) {
        let spec = ModelSpec::linear(2, 2);
        let per: Vec<_> = w.iter().map(|r| with_weight(&spec, r)).collect();
        let scaled: Vec<_> = w.iter().map(|r| with_weight(&spec, &r.iter().map(|v| v * s).collect::<Vec<_>>())).collect();
        let (a, b) = (d_snr(&per, &spec).unwrap(), d_snr(&scaled, &spec).unwrap());
        prop_assume!(!a.singular && !b.singular);
        prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.max(1.0));
    }

    #[test]
    fn d_snr_ignores_sample_order(
        w in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..6),
    ) {
        let spec = ModelSpec::linear(2, 2);
        let mut per: Vec<_> = w.iter().map(|r| with_weight(&spec, r)).collect();
        let a = d_snr(&per, &spec).unwrap();
        per.reverse();
        let b = d_snr(&per, &spec).unwrap();
        prop_assert!(a.value == b.value || (a.value - b.value).abs() < 1e-12 * a.value.abs());
    }

    #[test]
    fn psnr_and_ssim_ranges(x in prop::collection::vec(0.0f64..1.0, 16), y in prop::collection::vec(0.0f64..1.0, 16)) {
        let p = psnr(&x, &y, 1.0).unwrap();
        prop_assert!((0.0..=PSNR_CEILING_DB).contains(&p));
        let s = ssim(&x, &y, ImageShape::new(4, 4, 1)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
