use orojar_core::data::*;
use proptest::prelude::*;

#[test]
fn sampled_factors_follow_their_ranges() {
    let batch = sample_batch(11, 10_000, 8).unwrap();
    let n = batch.len() as f64;
    let mean_x = batch.iter().map(|s| s.factors.pos_x).sum::<f64>() / n;
    assert!((0.48..=0.52).contains(&mean_x), "mean pos_x {mean_x}");
    let mut counts = [0usize; 3];
    for s in &batch {
        counts[s.factors.shape.id() as usize] += 1;
    }
    for c in counts {
        let f = c as f64 / n;
        assert!((0.30..=0.37).contains(&f), "shape frequency {f}");
    }
}

#[test]
fn sampled_factors_are_uncorrelated() {
    let batch = sample_batch(12, 10_000, 8).unwrap();
    let cols: Vec<Vec<f64>> = (0..FACTOR_COUNT)
        .map(|k| batch.iter().map(|s| s.factors.to_array()[k]).collect())
        .collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
        (m, sd)
    };
    for a in 0..FACTOR_COUNT {
        for b in a + 1..FACTOR_COUNT {
            let ((ma, sa), (mb, sb)) = (stats(&cols[a]), stats(&cols[b]));
            let cov = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / cols[a].len() as f64;
            let r = cov / (sa * sb);
            assert!(r.abs() < 0.05, "factors {a} and {b} correlate at {r}");
        }
    }
}

#[test]
fn dataset_file_layout() {
    let ds = Dataset::generate(3, 5, 16).unwrap();
    let bytes = ds.to_bytes();
    assert_eq!(&bytes[..5], DATASET_MAGIC);
    assert_eq!(bytes.len(), 13 + 5 * (FACTOR_COUNT * 8 + 16 * 16));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dfac");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn contact_sheet_is_png() {
    let ds = Dataset::generate(3, 70, 16).unwrap();
    let png = ds.contact_sheet().unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn render_is_pure_and_bounded(seed in any::<u64>(), res in prop::sample::select(vec![16usize, 32])) {
        let spec = sample_batch(seed, 1, res).unwrap()[0].factors;
        let a = render(&spec, res).unwrap();
        let b = render(&spec, res).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(a.data().iter().any(|&v| v > 0.0));
    }
}
