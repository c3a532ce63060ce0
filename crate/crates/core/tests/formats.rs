mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use team_core::io::{
    decode_metric, encode_metric, load_embeddings, load_metric, save_embeddings, save_metric, save_records,
    EmbeddingFormat,
};
use team_core::{Dataset, EmbeddingVector, MetricMatrix, TeamError};

fn random_f32_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let n = rng.random_range(1..60);
    let d = rng.random_range(1..20);
    let records = (0..n)
        .map(|_| {
            let values = (0..d).map(|_| f64::from(rng.random_range(-1e4f32..1e4))).collect();
            let label = if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..50)) };
            EmbeddingVector::new(values, label)
        })
        .collect();
    Dataset::new(records).unwrap()
}

#[test]
fn binary_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let ds = random_f32_dataset(&mut rng);
        let path = dir.path().join(format!("d{i}.bin"));
        save_embeddings(&ds, &path, EmbeddingFormat::Binary).unwrap();
        let back = load_embeddings(&path, EmbeddingFormat::Binary).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.records().iter().zip(back.records()) {
            assert_eq!(a.label, b.label);
            let bits = |r: &EmbeddingVector| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn binary_file_size_for_ten_thousand_by_512() {
    let (n, d) = (10_000usize, 512usize);
    let records = (0..n)
        .map(|i| EmbeddingVector::labeled((0..d).map(|j| ((i * 7 + j) % 13) as f64).collect(), (i % 10) as u32))
        .collect();
    let ds = Dataset::new(records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.bin");
    save_embeddings(&ds, &path, EmbeddingFormat::Binary).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, 16 + n * (4 + d * 4));
}

#[test]
fn mixed_dimensions_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![EmbeddingVector::labeled(vec![1.0, 2.0], 0), EmbeddingVector::labeled(vec![1.0], 1)];
    for format in [EmbeddingFormat::Csv, EmbeddingFormat::Binary] {
        let path = dir.path().join("mixed");
        let err = save_records(&records, &path, format).unwrap_err();
        assert!(matches!(err, TeamError::Format(_)), "{err}");
        assert!(!path.exists());
    }
}

#[test]
fn missing_file_reports_path() {
    let err = load_embeddings("/nonexistent/embeddings.csv", EmbeddingFormat::Csv).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/embeddings.csv"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn metric_dump_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = MetricMatrix::new(common::random_spd(6, &mut rng)).unwrap();
    assert_eq!(decode_metric(&encode_metric(&m)).unwrap(), m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_metric(&m, &path).unwrap();
    assert_eq!(load_metric(&path).unwrap(), m);
}

proptest! {
    #[test]
    fn csv_round_trip_within_nine_digits(
        rows in prop::collection::vec(
            (prop::option::of(0u32..100), prop::collection::vec(-1e6f64..1e6, 3)),
            1..30,
        )
    ) {
        let records: Vec<_> = rows.into_iter().map(|(l, v)| EmbeddingVector::new(v, l)).collect();
        let ds = Dataset::new(records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_embeddings(&ds, &path, EmbeddingFormat::Csv).unwrap();
        let back = load_embeddings(&path, EmbeddingFormat::Csv).unwrap();
        for (a, b) in ds.records().iter().zip(back.records()) {
            prop_assert_eq!(a.label, b.label);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn metric_construction_rejects_asymmetry(d in 2usize..6, seed in any::<u64>(), skew in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = common::random_spd(d, &mut rng);
        m[(0, 1)] += skew;
        prop_assert!(MetricMatrix::new(m).is_err());
    }

    #[test]
    fn metric_construction_rejects_indefinite(d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spd = common::random_spd(d, &mut rng);
        let shift = spd.clone().symmetric_eigenvalues().max();
        prop_assert!(MetricMatrix::new(spd - DMatrix::identity(d, d) * (shift + 0.1)).is_err());
    }
}
