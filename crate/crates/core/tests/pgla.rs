use leaklab::fl;
use leaklab::metrics::ImageShape;
use leaklab::model::{self, Activation, Batch, InitScheme, ModelSpec};
use leaklab::params::ParamVector;
use leaklab::pgla::*;
use leaklab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(rows: &[Vec<f64>], y: Vec<usize>) -> (ModelSpec, ParamVector, Batch, fl::GradientCapture) {
    let spec = ModelSpec::mlp(&[rows[0].len(), 8, 4], Activation::Relu);
    let params = model::init(&spec, InitScheme::Xavier, 3).unwrap();
    let batch = Batch::from_rows(rows, y).unwrap();
    let cap = fl::client_gradient(&spec, &params, &batch, false).unwrap();
    (spec, params, batch, cap)
}

#[test]
fn idlg_single_sample() {
    for label in 0..4 {
        let (spec, _, _, cap) = setup(&[vec![0.3, 0.8, 0.1]], vec![label]);
        let inf = idlg_infer_labels(&cap, &spec).unwrap();
        assert_eq!(inf.labels, vec![label]);
        assert!(!inf.low_confidence);
    }
}

#[test]
fn idlg_two_distinct_labels() {
    let (spec, _, _, cap) = setup(&[vec![0.3, 0.8, 0.1], vec![0.9, 0.1, 0.5]], vec![3, 1]);
    assert_eq!(idlg_infer_labels(&cap, &spec).unwrap().labels, vec![1, 3]);
}

#[test]
fn idlg_duplicate_labels_flag_low_confidence() {
    let (spec, _, _, cap) = setup(&[vec![0.3, 0.8, 0.1], vec![0.9, 0.1, 0.5]], vec![2, 2]);
    let inf = idlg_infer_labels(&cap, &spec).unwrap();
    assert!(inf.low_confidence);
    assert!(inf.labels.contains(&2));
}

#[test]
fn match_loss_vanishes_at_truth() {
    let (spec, params, batch, cap) = setup(&[vec![0.3, 0.8, 0.1], vec![0.9, 0.1, 0.5]], vec![0, 3]);
    for cfg in [AttackConfig::dlg(1, 0.1), AttackConfig::ig(1, 0.1, 0.0)] {
        let (v, dx) = attack_objective(
            &spec,
            &params,
            cap.batch_grad.values(),
            batch.x(),
            batch.y(),
            &cfg,
        )
        .unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        assert!(dx.data().iter().all(|d| d.abs() < 1e-6));
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let (spec, params, batch, cap) = setup(&[vec![0.3, 0.8, 0.1], vec![0.9, 0.1, 0.5]], vec![0, 3]);
    let x0 = Tensor::matrix(2, 3, vec![0.4, 0.6, 0.2, 0.7, 0.3, 0.45]).unwrap();
    let cfg = AttackConfig::ig(1, 0.1, 0.01);
    let f = |x: &Tensor| {
        attack_objective(&spec, &params, cap.batch_grad.values(), x, batch.y(), &cfg).unwrap()
    };
    let (_, dx) = f(&x0);
    let h = 1e-6;
    for j in 0..6 {
        let mut up = x0.data().to_vec();
        let mut down = x0.data().to_vec();
        up[j] += h;
        down[j] -= h;
        let fd = (f(&Tensor::matrix(2, 3, up).unwrap()).0
            - f(&Tensor::matrix(2, 3, down).unwrap()).0)
            / (2.0 * h);
        assert!(
            (fd - dx.data()[j]).abs() < 1e-5 * fd.abs().max(1.0),
            "{j}: {fd} vs {}",
            dx.data()[j]
        );
    }
}

#[test]
fn zero_capture_is_flagged_failed() {
    let (spec, params, _, cap) = setup(&[vec![0.3, 0.8, 0.1]], vec![1]);
    let zero = fl::GradientCapture {
        batch_grad: ParamVector::zeros(spec.layout().unwrap()),
        ..cap
    };
    let r = reconstruct(&zero, &spec, &params, &AttackConfig::dlg(20, 0.1), None).unwrap();
    assert!(r.failed);
}

#[test]
fn total_variation_against_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = ImageShape::new(4, 4, 1);
    let data: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::matrix(2, 16, data.clone()).unwrap();
    let mut want = 0.0;
    for b in 0..2 {
        let img = &data[b * 16..(b + 1) * 16];
        for r in 0..4 {
            for c in 0..4 {
                if c + 1 < 4 {
                    want += (img[r * 4 + c + 1] - img[r * 4 + c]).abs();
                }
                if r + 1 < 4 {
                    want += (img[(r + 1) * 4 + c] - img[r * 4 + c]).abs();
                }
            }
        }
    }
    assert!((total_variation(&x, shape).unwrap() - want).abs() < 1e-12);
    let flat = Tensor::matrix(1, 16, vec![0.5; 16]).unwrap();
    assert_eq!(total_variation(&flat, shape).unwrap(), 0.0);
}

#[test]
fn step_candidates_keep_lowest_match_loss() {
    let (spec, params, batch, cap) = setup(
        &[vec![0.3, 0.8, 0.1, 0.6], vec![0.9, 0.1, 0.5, 0.2]],
        vec![0, 2],
    );
    let steps = [0.01, 1.0, 10.0];
    let cfg = AttackConfig::dlg(60, 1.0)
        .with_seed(4)
        .with_step_candidates(&steps);
    let best = reconstruct(&cap, &spec, &params, &cfg, Some(&batch)).unwrap();
    assert!(steps.contains(&best.step_size));
    for s in steps {
        let single = AttackConfig::dlg(60, s).with_seed(4);
        let r = reconstruct(&cap, &spec, &params, &single, Some(&batch)).unwrap();
        assert!(best.best_match_loss <= r.best_match_loss);
    }
    assert!(!best.labels_inferred);
    assert_eq!(best.y_hat, vec![0, 2]);
}

#[test]
fn reconstruction_is_deterministic_and_in_range() {
    let (spec, params, _, cap) = setup(&[vec![0.3, 0.8, 0.1], vec![0.9, 0.1, 0.5]], vec![1, 2]);
    let cfg = AttackConfig::ig(40, 0.1, 1e-3).with_seed(2);
    let a = reconstruct(&cap, &spec, &params, &cfg, None).unwrap();
    let b = reconstruct(&cap, &spec, &params, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert!(a.labels_inferred);
    assert!(a.x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.trajectory.len() <= 40 * (cfg.restarts + 1));
}

#[test]
fn invalid_configs_rejected() {
    assert!(AttackConfig::dlg(0, 0.1).validate().is_err());
    assert!(AttackConfig::dlg(5, -1.0).validate().is_err());
    assert!(AttackConfig::ig(5, 0.1, -1.0).validate().is_err());
    assert!(AttackConfig::dlg(5, 0.1)
        .with_step_candidates(&[1.0, f64::NAN])
        .validate()
        .is_err());
}
