use orojar_core::discovery::*;
use orojar_core::regularizers::PenaltyConfig;
use orojar_core::toy::{Linear, RotatedFactors};
use orojar_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn penalty() -> PenaltyConfig {
    PenaltyConfig {
        layers: vec![1],
        ..Default::default()
    }
}

#[test]
fn orthonormalize_examples() {
    let a = Tensor::<f64>::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let d = orthonormalize(&a).unwrap();
    let c0 = d.column(0);
    let c1 = d.column(1);
    assert!((c0[0].abs() - 1.0).abs() < 1e-12 && c0[1].abs() < 1e-12);
    assert!((c1[1].abs() - 1.0).abs() < 1e-12 && c1[0].abs() < 1e-12);

    let again = orthonormalize(&d.a).unwrap();
    for (x, y) in again.a.data().iter().zip(d.a.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    let dup = Tensor::<f64>::new(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 0.5, 0.5]).unwrap();
    assert!(matches!(orthonormalize(&dup), Err(Error::DegenerateDirection { column: 1, .. })));
    assert!(orthonormalize(&Tensor::<f64>::zeros(&[2, 3])).is_err());
}

#[test]
fn recovers_planted_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = RotatedFactors::<f64>::random(&mut rng, 4);
    let cfg = DiscoveryConfig {
        iters: 3000,
        seed: 1,
        ..Default::default()
    };
    let (a, log) = discover(&g, &penalty(), &cfg).unwrap();
    assert!(log.orthogonality_error.iter().all(|&e| e < 1e-5));
    let head: f64 = log.penalty[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = log.penalty[log.penalty.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "penalty average {head} -> {tail}");

    let target = Tensor::from_fn(&[4, 4], |idx| g.rotation.data()[(idx % 4) * 4 + idx / 4]);
    let cos = matched_cosines(&a.a, &target);
    assert!(cos.iter().all(|&c| c > 0.9), "{cos:?}");

    let z = vec![0.1, -0.3, 0.2, 0.05];
    let f0 = g.factors(&z);
    for i in 0..4 {
        let moved: Vec<f64> = z.iter().zip(a.column(i)).map(|(x, c)| x + c).collect();
        let delta: Vec<f64> = g.factors(&moved).iter().zip(&f0).map(|(p, q)| (p - q).abs()).collect();
        let mut sorted = delta.clone();
        sorted.sort_by(|p, q| q.total_cmp(p));
        assert!(sorted[1] < 0.5 * sorted[0], "edit {i} moves {delta:?}");
    }
}

#[test]
fn single_direction_is_left_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = RotatedFactors::<f64>::random(&mut rng, 3);
    let init = orthonormalize(&Tensor::new(vec![3, 1], vec![0.3, -0.4, 0.5]).unwrap()).unwrap();
    let cfg = DiscoveryConfig {
        iters: 50,
        ..Default::default()
    };
    let (a, log) = discover_from(&g, init.clone(), &penalty(), &cfg).unwrap();
    assert!(log.penalty.iter().all(|&p| p == 0.0));
    for (x, y) in a.a.data().iter().zip(init.a.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identity_generator_has_no_penalty_and_stays_frozen() {
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let g = Linear::<f64>::from_rows(&rows).unwrap();
    let before = g.clone();
    let cfg = DiscoveryConfig {
        iters: 100,
        ..Default::default()
    };
    let (a, log) = discover(&g, &penalty(), &cfg).unwrap();
    assert!(log.penalty.iter().all(|&p| p.abs() < 1e-8));
    assert!(a.orthogonality_error() < 1e-5);
    assert_eq!(g, before);
}

#[test]
fn edits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Linear::<f64>::random(&mut rng, 5, 3);
    let a = orthonormalize(&Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.0..1.0))).unwrap();
    let z = [0.2, -0.5, 0.9];
    let base = edit(&g, &z, &a, 0, 0.0).unwrap();
    let mut tape = orojar_core::Tape::new();
    let zv = tape.constant(Tensor::from_rows(&[z.to_vec()]).unwrap());
    let direct = orojar_core::models::TapNetwork::forward(&g, &mut tape, zv, orojar_core::models::Norm::Running)
        .unwrap()
        .output;
    assert_eq!(base.data(), tape.value(direct).data());
    let up = edit(&g, &z, &a, 1, 0.7).unwrap();
    let down = edit(&g, &z, &a, 1, -0.7).unwrap();
    for ((u, d), b) in up.data().iter().zip(down.data()).zip(base.data()) {
        assert!((u + d - 2.0 * b).abs() < 1e-12);
    }
    assert!(edit(&g, &z, &a, 2, 1.0).is_err());
}

#[test]
fn matched_cosines_are_permutation_and_sign_invariant() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let t = Tensor::new(vec![2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
    assert_eq!(matched_cosines(&a, &t), vec![1.0, 1.0]);
}
