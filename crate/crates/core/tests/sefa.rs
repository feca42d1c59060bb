use nalgebra::DMatrix;
use orojar_core::models::{Generator, GeneratorConfig};
use orojar_core::sefa::*;
use orojar_core::toy::{random_rotation, Linear};
use orojar_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_weight(seed: u64, n: usize, m: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, m], |_| rng.random_range(-1.0..1.0))
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * m + j]).sum()
    })
}

fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[c, r], |idx| a.data()[(idx % r) * c + idx / r])
}

#[test]
fn identity_weight() {
    let w = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let f = sefa_factorize(&w).unwrap();
    assert!(f.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-12));
    for i in 0..4 {
        let d = f.direction(i);
        assert_eq!(d.iter().filter(|x| x.abs() > 1e-12).count(), 1);
        assert!(d.iter().any(|x| (x.abs() - 1.0).abs() < 1e-12));
    }
}

#[test]
fn diagonal_weight_orders_directions() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
    let f = sefa_factorize(&w).unwrap();
    assert!((f.singular_values[0] - 3.0).abs() < 1e-12);
    assert!((f.singular_values[1] - 1.0).abs() < 1e-12);
    assert!((f.direction(0)[1].abs() - 1.0).abs() < 1e-12);
    assert!((f.direction(1)[0].abs() - 1.0).abs() < 1e-12);
}

#[test]
fn random_weight_matches_reference_svd() {
    for seed in 0..10 {
        let w = random_weight(seed, 64, 6);
        let f = sefa_factorize(&w).unwrap();
        assert!(f.reconstruction_error(&w) < 1e-6);
        let vtv = matmul(&transpose(&f.v), &f.v);
        for (i, x) in vtv.data().iter().enumerate() {
            let want = if i % 7 == 0 { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-8);
        }
        assert!(f.singular_values.windows(2).all(|p| p[0] >= p[1]));
        let reference = DMatrix::from_row_slice(64, 6, w.data()).singular_values();
        let mut r: Vec<f64> = reference.iter().copied().collect();
        r.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in f.singular_values.iter().zip(&r) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b));
        }
        for j in 0..6 {
            let d = f.direction(j);
            let big = d.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(big > 0.0);
        }
    }
}

#[test]
fn rank_deficient_weight_is_flagged() {
    let mut w = random_weight(1, 16, 4);
    for r in 0..16 {
        w.data_mut()[r * 4 + 2] = 0.0;
    }
    let f = sefa_factorize(&w).unwrap();
    assert_eq!(f.degenerate, vec![3]);
}

#[test]
fn proposition_holds_on_random_weights() {
    for seed in 0..50 {
        let w = random_weight(seed, 32, 5);
        let f = sefa_factorize(&w).unwrap();
        let z = random_weight(seed + 1000, 100, 5);
        let r = verify_proposition(&w, &f, &z).unwrap();
        assert!(r.equivalence_error < 1e-10, "{r:?}");
        assert!(r.max_offdiag_relative < 1e-8, "{r:?}");
    }
}

#[test]
fn zero_weight_has_zero_errors() {
    let w = Tensor::zeros(&[8, 3]);
    let f = sefa_factorize(&w).unwrap();
    let r = verify_proposition(&w, &f, &random_weight(0, 10, 3)).unwrap();
    assert_eq!((r.equivalence_error, r.max_offdiag), (0.0, 0.0));
    assert_eq!(f.degenerate, vec![0, 1, 2]);
}

#[test]
fn generator_directions() {
    let g = Generator::<f32>::new(
        GeneratorConfig {
            base_channels: 8,
            resolution: 16,
            tap_count: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let f = sefa_directions(&g).unwrap();
    assert_eq!(f.latent_dim(), 6);
    assert!(f.reconstruction_error(&g.first_layer_weight().cast()) < 1e-6);
}

#[test]
fn traversal_preconditions_and_frames() {
    let g = Linear::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
    let z = [0.5, -0.1, 0.2];
    assert!(traverse_direction(&g, &z, &[1.0, 0.0, 0.0], 0.0, 0.0, 1).is_err());
    assert!(traverse_direction(&g, &z, &[0.0, 0.0, 0.0], -1.0, 1.0, 3).is_err());
    assert!(traverse_direction(&g, &z, &[2.0, 0.0, 0.0], -1.0, 1.0, 3).is_err());

    let frames = traverse_direction(&g, &z, &[1.0, 0.0, 0.0], -1.0, 1.0, 3).unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!(frames[1].data(), &[0.5, 0.4]);
    assert_eq!(frames[0].data(), &[-0.5, 0.4]);

    let null = traverse_direction(&g, &z, &[0.0, 1.0, 0.0], -2.0, 2.0, 5).unwrap();
    assert!(null.windows(2).all(|p| p[0] == p[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn directions_rotate_with_the_latent_basis(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_weight(seed, 24, 4);
        let q = random_rotation(&mut rng, 4);
        let a = sefa_factorize(&w).unwrap();
        let b = sefa_factorize(&matmul(&w, &transpose(&q))).unwrap();
        let qv = matmul(&q, &a.v);
        for j in 0..4 {
            if a.singular_values[j] - a.singular_values.get(j + 1).copied().unwrap_or(0.0) < 1e-6 {
                continue;
            }
            let dot: f64 = (0..4).map(|i| qv.data()[i * 4 + j] * b.v.data()[i * 4 + j]).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-8, "column {j}: {dot}");
        }
    }
}
