use orojar_core::models::*;
use orojar_core::tensor::gradient_check;
use orojar_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        latent_dim: 3,
        base_channels: 8,
        resolution: 16,
        tap_count: 3,
    }
}

fn latents(seed: u64, rows: usize, m: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, m], |_| rng.random_range(-1.5..1.5))
}

fn taps(g: &Generator<f64>, z: &Tensor<f64>) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let f = g.forward(&mut tape, zv, Norm::Running).unwrap();
    (f.taps.iter().map(|&t| tape.value(t).clone()).collect(), tape.value(f.output).clone())
}

fn checkpoint(g: &Generator<f64>) -> Checkpoint<f64> {
    let mut entries = Vec::new();
    g.export(&mut entries);
    Checkpoint {
        entries,
        seed: 4,
        step: 17,
    }
}

#[test]
fn default_generator_shapes() {
    let g = Generator::<f32>::new(GeneratorConfig::default(), 0).unwrap();
    assert_eq!(g.params.count(), DEFAULT_GENERATOR_PARAMS);
    assert_eq!(g.first_layer_weight().shape(), [256 * 16, 6]);
    assert_eq!(g.tap_count(), 4);
    let img = g.generate(&Tensor::zeros(&[2, 6])).unwrap();
    assert_eq!(img.shape(), [2, 1, 32, 32]);
}

#[test]
fn zero_latent_gives_zero_first_tap() {
    let g = Generator::<f64>::new(small(), 1).unwrap();
    let (t, _) = taps(&g, &Tensor::zeros(&[1, 3]));
    assert_eq!(t.len(), 3);
    assert!(t[0].data().iter().all(|&x| x == 0.0));
}

#[test]
fn identical_rows_give_identical_taps() {
    let g = Generator::<f64>::new(small(), 2).unwrap();
    let row = latents(0, 1, 3).data().to_vec();
    let z = Tensor::from_rows(&[row.clone(), row]).unwrap();
    let (t, out) = taps(&g, &z);
    for x in t.iter().chain(std::iter::once(&out)) {
        assert_eq!(x.row(0), x.row(1));
    }
}

#[test]
fn output_is_in_unit_interval() {
    let g = Generator::<f64>::new(small(), 3).unwrap();
    let out = g.generate(&Tensor::from_fn(&[8, 3], |i| (i as f64 - 12.0) * 3.0)).unwrap();
    assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn wrong_latent_width_rejected() {
    let g = Generator::<f64>::new(small(), 0).unwrap();
    assert!(matches!(g.generate(&Tensor::zeros(&[1, 4])), Err(Error::Shape { .. })));
}

#[test]
fn bare_first_tap_is_affine() {
    let g = Generator::<f64>::new(small(), 5).unwrap().first_layer_variant(FirstLayerMode::Bare);
    let z = latents(1, 2, 3);
    let (t, _) = taps(&g, &z);
    let (w, b) = (g.first_layer_weight(), g.first_layer_bias());
    let hidden = w.shape()[0];
    for r in 0..2 {
        for i in 0..hidden {
            let want: f64 = b.data()[i] + (0..3).map(|j| w.data()[i * 3 + j] * z.row(r)[j]).sum::<f64>();
            assert!((t[0].row(r)[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn variants_share_parameters_but_not_outputs() {
    let g = Generator::<f64>::new(small(), 6).unwrap();
    let bare = g.first_layer_variant(FirstLayerMode::Bare);
    assert_eq!(g.params.names(), bare.params.names());
    for (a, b) in g.params.values().iter().zip(bare.params.values()) {
        assert_eq!(a.shape(), b.shape());
    }
    let z = latents(2, 3, 3);
    let (_, oa) = taps(&g, &z);
    let (_, ob) = taps(&bare, &z);
    assert_ne!(oa, ob);

    let mut g = g;
    g.tap_point = TapPoint::Projection;
    let bare = g.first_layer_variant(FirstLayerMode::Bare);
    assert_eq!(taps(&g, &z).0[0], taps(&bare, &z).0[0]);
}

#[test]
fn tap_point_selects_projection_or_activation() {
    let mut g = Generator::<f64>::new(small(), 8).unwrap();
    let z = latents(4, 5, 3);
    let (act, out) = taps(&g, &z);
    assert_eq!(act.len(), small().tap_count);
    assert_eq!(act.last().unwrap(), &out);
    g.tap_point = TapPoint::Projection;
    let (proj, _) = taps(&g, &z);
    let w = g.first_layer_weight().data();
    let m = small().latent_dim;
    for (i, &v) in proj[0].data().iter().take(8).enumerate() {
        let want: f64 = (0..m).map(|j| w[i * m + j] * z.data()[j]).sum();
        assert!((v - want).abs() < 1e-12);
    }
    assert!(act[0].data().iter().zip(proj[0].data()).any(|(a, p)| a != p));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let g = Generator::<f64>::new(small(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    checkpoint(&g).save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!((loaded.seed, loaded.step), (4, 17));
    let mut h = Generator::<f64>::new(small(), 99).unwrap();
    h.import(&loaded).unwrap();
    let z = latents(3, 4, 3);
    assert_eq!(g.generate(&z).unwrap(), h.generate(&z).unwrap());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let g = Generator::<f64>::new(small(), 7).unwrap();
    let bytes = checkpoint(&g).to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Format(_))));

    let mut ver = bytes.clone();
    ver[5..9].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::<f64>::from_bytes(&ver), Err(Error::Version { found: 2, .. })));

    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated(_))
    ));

    let mut wide = Generator::<f64>::new(GeneratorConfig { latent_dim: 8, ..small() }, 0).unwrap();
    match wide.import(&checkpoint(&g)) {
        Err(Error::ParamShape { name, found, expected }) => {
            assert_eq!(name, "g.fc.weight");
            assert_eq!((found[1], expected[1]), (3, 8));
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }

    let mut deeper = Generator::<f64>::new(GeneratorConfig { resolution: 32, ..small() }, 0).unwrap();
    match deeper.import(&checkpoint(&g)) {
        Err(Error::ParamSet { missing, .. }) => assert!(missing.iter().any(|n| n.starts_with("g.deconv3"))),
        other => panic!("expected a parameter-set diff, got {other:?}"),
    }
}

#[test]
fn architecture_is_recovered_from_checkpoint() {
    let cfg = small();
    let g = Generator::<f64>::new(cfg, 0).unwrap();
    assert_eq!(GeneratorConfig::infer(&checkpoint(&g), cfg.tap_count).unwrap(), cfg);
}

#[test]
fn output_gradient_matches_central_differences() {
    let g = Generator::<f64>::new(small(), 8).unwrap();
    let z = latents(4, 2, 3);
    let err = gradient_check(
        |tape, zv| {
            let out = g.forward(tape, zv, Norm::Running)?.output;
            Ok(tape.sum(out))
        },
        &z,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn discriminator_logits_are_finite() {
    let d = Discriminator::<f64>::new(
        DiscriminatorConfig {
            base_channels: 8,
            resolution: 16,
        },
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let l = d.logits(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(l), [3]);
    assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
}
