use leaklab::data::*;
use proptest::prelude::*;

fn blobs(n: usize, dseed: u64) -> SynthSpec {
    SynthSpec::new(SynthKind::GaussianBlobs, n, dseed)
}

#[test]
fn blob_classes_cluster_around_shared_centers() {
    let d = synth_dataset(&blobs(2000, 3), 6, 2, 1).unwrap();
    assert_eq!(d.len(), 2000);
    let mut means = vec![vec![0.0; 6]; 2];
    let mut counts = [0usize; 2];
    for i in 0..d.len() {
        let (x, y) = d.sample(i);
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    assert_eq!(counts, [1000, 1000]);
    // A second sampling seed shares the distribution, so class means agree.
    let e = synth_dataset(&blobs(2000, 3), 6, 2, 99).unwrap();
    let mut other = vec![vec![0.0; 6]; 2];
    for i in 0..e.len() {
        let (x, y) = e.sample(i);
        for (m, v) in other[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    for k in 0..2 {
        for p in 0..6 {
            assert!((means[k][p] - other[k][p]).abs() / 1000.0 < 0.02);
        }
    }
    assert!(d.x().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn seeds_are_deterministic() {
    for kind in [
        SynthKind::GaussianBlobs,
        SynthKind::StripePatterns,
        SynthKind::RandomUniform,
    ] {
        let s = SynthSpec::new(kind, 30, 5);
        assert_eq!(
            synth_dataset(&s, 8, 3, 2).unwrap(),
            synth_dataset(&s, 8, 3, 2).unwrap()
        );
        assert_ne!(
            synth_dataset(&s, 8, 3, 2).unwrap(),
            synth_dataset(&s, 8, 3, 4).unwrap()
        );
    }
}

#[test]
fn synth_rejects_degenerate_requests() {
    assert!(synth_dataset(&blobs(1, 0), 4, 2, 0).is_err());
    assert!(synth_dataset(&blobs(10, 0), 0, 2, 0).is_err());
    assert!(synth_dataset(&blobs(10, 0), 4, 1, 0).is_err());
}

#[test]
fn hand_written_csv() {
    let d = parse_csv("1,0.5,0.25\n\n0, 1.0 ,0\n", None).unwrap();
    assert_eq!((d.len(), d.dim(), d.classes()), (2, 2, 2));
    assert_eq!(d.sample(0), (&[0.5, 0.25][..], 1));
    assert_eq!(d.y(), &[1, 0]);
}

#[test]
fn malformed_csv_is_located() {
    assert!(parse_csv("", None).is_err());
    let err = parse_csv("0,0.1,0.2\n1,0.3\n", None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(parse_csv("x,0.1\n", None).is_err());
    assert!(parse_csv("0,nan\n", None).is_err());
    assert!(parse_csv("3,0.1\n", Some(2)).is_err());
}

#[test]
fn file_round_trips() {
    let d = synth_dataset(&SynthSpec::new(SynthKind::StripePatterns, 12, 1), 5, 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_dataset(&d, &csv, FileFormat::Csv).unwrap();
    assert_eq!(ingest_dataset(&csv, FileFormat::Csv, Some(3)).unwrap(), d);
    let raw = dir.path().join("d.bin");
    write_dataset(&d, &raw, FileFormat::RawF32).unwrap();
    let back = ingest_dataset(&raw, FileFormat::RawF32, None).unwrap();
    assert_eq!(back.y(), d.y());
    for (a, b) in back.x().data().iter().zip(d.x().data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn raw_rejects_corruption() {
    let d = synth_dataset(&blobs(4, 0), 2, 2, 0).unwrap();
    let bytes = to_raw_f32(&d);
    assert!(parse_raw_f32(&bytes[..10], None).is_err());
    assert!(parse_raw_f32(&bytes[..bytes.len() - 1], None).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(parse_raw_f32(&bad, None).is_err());
    assert!(parse_raw_f32(&bytes, Some(3)).is_err());
}

#[test]
fn unique_label_batches_have_distinct_sorted_labels() {
    let d = synth_dataset(&blobs(40, 0), 3, 4, 0).unwrap();
    let batches = d.unique_label_batches(3, 10, 1).unwrap();
    assert_eq!(batches.len(), 10);
    for b in &batches {
        let mut y = b.y().to_vec();
        y.sort_unstable();
        y.dedup();
        assert_eq!(y.len(), 3);
    }
    assert!(d.unique_label_batches(3, 1000, 1).is_err());
    assert!(d.unique_label_batches(5, 1, 1).is_err());
    assert_eq!(d.all_unique_label_batches(4, 1).unwrap().len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_are_balanced(n in 2usize..200, c in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= c);
        let d = synth_dataset(&SynthSpec::new(SynthKind::RandomUniform, n, 0), 3, c, seed).unwrap();
        let mut counts = vec![0usize; c];
        d.y().iter().for_each(|&y| counts[y] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn csv_text_round_trips(n in 2usize..20, seed in any::<u64>()) {
        let d = synth_dataset(&blobs(n, seed), 4, 2, seed).unwrap();
        prop_assert_eq!(parse_csv(&to_csv(&d), Some(2)).unwrap(), d);
    }
}
