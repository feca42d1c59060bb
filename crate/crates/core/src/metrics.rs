//! Variation predictability, per-dimension activeness and pixel-space path
//! length.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Norm, ParamStore, TapNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::regularizers::orojar_exact_on;
use crate::regularizers::Site;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Evaluation-mode outputs of latent rows, flattened per row.
fn outputs<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, z: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let out = net.forward(&mut tape, zv, Norm::Running)?.output;
    Ok(tape.value(out).clone())
}

fn normal_rows<T: Real>(rng: &mut impl Rng, rows: usize, m: usize) -> Vec<Vec<T>> {
    (0..rows)
        .map(|_| (0..m).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VpConfig {
    pub n_pairs: usize,
    pub epochs: usize,
    pub repeats: usize,
    /// Latent perturbation size.
    pub delta: f64,
    pub batch: usize,
    pub lr: f64,
    /// Width of the first classifier block (the second has twice as many).
    pub channels: usize,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            epochs: 10,
            repeats: 3,
            delta: 1.0,
            batch: 64,
            lr: 1e-3,
            channels: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VpResult {
    pub accuracy: f64,
    pub std: f64,
    pub repeats: Vec<f64>,
}

/// Pairs `(G(z), G(z + δ·e_i))` as image differences, with labels `i`.
fn vp_pairs<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    n: usize,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f32>>, Vec<usize>, Vec<usize>)> {
    let m = net.latent_dim();
    let chunk = 256;
    let mut diffs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut shape = Vec::new();
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let base = normal_rows::<T>(rng, b, m);
        let lab: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let mut rows = base.clone();
        for (r, &i) in base.iter().zip(&lab) {
            let mut moved = r.clone();
            moved[i] += T::lit(delta);
            rows.push(moved);
        }
        let y = outputs(net, Tensor::from_rows(&rows)?)?;
        shape = y.shape()[1..].to_vec();
        for k in 0..b {
            let d: Vec<f32> = y
                .row(b + k)
                .iter()
                .zip(y.row(k))
                .map(|(&p, &q)| (p - q).as_f64() as f32)
                .collect();
            diffs.push(d);
        }
        labels.extend(lab);
        done += b;
    }
    Ok((diffs, labels, shape))
}

struct Classifier {
    params: ParamStore<f32>,
    classes: usize,
    feat: usize,
}

impl Classifier {
    fn new(rng: &mut impl Rng, channels: usize, side: usize, classes: usize) -> Self {
        let mut he = |shape: &[usize], fan_in: usize| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
            Tensor::from_fn(shape, |_| d.sample(rng) as f32)
        };
        let c2 = 2 * channels;
        let feat = c2 * (side / 4) * (side / 4);
        let mut params = ParamStore::new();
        params.push("conv1.weight", he(&[channels, 1, 4, 4], 16));
        params.push("conv1.bias", Tensor::zeros(&[channels]));
        params.push("conv2.weight", he(&[c2, channels, 4, 4], 16 * channels));
        params.push("conv2.bias", Tensor::zeros(&[c2]));
        params.push("fc.weight", he(&[feat, classes], feat));
        params.push("fc.bias", Tensor::zeros(&[classes]));
        Self { params, classes, feat }
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let slope = 0.2;
        let h = tape.conv2d(x, p[0], 2, 1)?;
        let h = tape.add_channel(h, p[1])?;
        let h = tape.leaky_relu(h, slope);
        let h = tape.conv2d(h, p[2], 2, 1)?;
        let h = tape.add_channel(h, p[3])?;
        let h = tape.leaky_relu(h, slope);
        let h = tape.reshape(h, &[b, self.feat])?;
        let y = tape.matmul(h, p[4])?;
        tape.add_row(y, p[5])
    }
}

fn batch_tensor(diffs: &[Vec<f32>], idx: &[usize], shape: &[usize]) -> Tensor<f32> {
    let n = diffs[0].len();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(&diffs[i]);
    }
    let mut s = vec![idx.len()];
    s.extend_from_slice(shape);
    Tensor::new(s, data).expect("batch shape")
}

/// Held-out accuracy of a small convolutional classifier predicting which
/// latent coordinate was moved from the image difference; mean and
/// population std over `repeats` independent pair sets.
pub fn vp_score<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, config: &VpConfig, seed: u64) -> Result<VpResult> {
    if config.n_pairs < 1000 || config.repeats == 0 || config.batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "vp needs ≥ 1000 pairs, ≥ 1 repeat and a positive batch (got {}, {}, {})",
            config.n_pairs, config.repeats, config.batch
        )));
    }
    let m = net.latent_dim();
    let mut accs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats as u64 {
        let mut rng = stream_rng(seed, r, Stream::Eval);
        let (diffs, labels, shape) = vp_pairs(net, config.n_pairs, config.delta, &mut rng)?;
        if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] || shape[1] % 4 != 0 {
            return Err(Error::shape(
                "vp_score",
                format!("generator output {shape:?} is not a one-channel square image divisible by 4"),
            ));
        }
        let n_train = config.n_pairs * 4 / 5;
        let mut crng = stream_rng(seed, r, Stream::Classifier);
        let mut clf = Classifier::new(&mut crng, config.channels, shape[1], m);
        let mut adam = Adam::new(
            AdamConfig::new(config.lr, 0.9, 0.999),
            &clf.params.values().iter().collect::<Vec<_>>(),
        );
        let mut order: Vec<usize> = (0..n_train).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut crng);
            for chunk in order.chunks(config.batch) {
                let mut tape = Tape::new();
                let vars = clf.params.bind(&mut tape, true);
                let x = tape.constant(batch_tensor(&diffs, chunk, &shape));
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let logits = clf.logits(&mut tape, &vars, x)?;
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("VP classifier loss (repeat {r}, epoch {epoch})"),
                    });
                }
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor<f32>> = vars
                    .iter()
                    .zip(clf.params.values())
                    .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                adam.update(&mut clf.params.values_mut(), &g)?;
            }
        }
        let test: Vec<usize> = (n_train..config.n_pairs).collect();
        let mut correct = 0usize;
        for chunk in test.chunks(256) {
            let mut tape = Tape::new();
            let vars = clf.params.bind(&mut tape, false);
            let x = tape.constant(batch_tensor(&diffs, chunk, &shape));
            let logits = clf.logits(&mut tape, &vars, x)?;
            for (row, &i) in tape.value(logits).data().chunks(clf.classes).zip(chunk) {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                correct += usize::from(best == labels[i]);
            }
        }
        accs.push(correct as f64 / test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(VpResult {
        accuracy: mean,
        std,
        repeats: accs,
    })
}

/// For every latent coordinate: sweep it over `n_steps` values in `[−2, 2]`
/// from `n_z` random bases, take the per-output variance over the sweep,
/// average over outputs and bases.
pub fn activeness<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, n_z: usize, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
    if n_z < 32 || n_steps < 8 {
        return Err(Error::InvalidArgument(format!(
            "activeness needs n_z ≥ 32 and n_steps ≥ 8 (got {n_z}, {n_steps})"
        )));
    }
    let m = net.latent_dim();
    let mut rng = stream_rng(seed, 1 << 32, Stream::Eval);
    let bases = normal_rows::<T>(&mut rng, n_z, m);
    let ts: Vec<f64> = (0..n_steps).map(|s| -2.0 + 4.0 * s as f64 / (n_steps - 1) as f64).collect();
    let mut scores = vec![0.0; m];
    for (i, score) in scores.iter_mut().enumerate() {
        for base in &bases {
            let rows: Vec<Vec<T>> = ts
                .iter()
                .map(|&t| {
                    let mut r = base.clone();
                    r[i] = T::lit(t);
                    r
                })
                .collect();
            let y = outputs(net, Tensor::from_rows(&rows)?)?;
            let f = y.row_len();
            let mut total = 0.0;
            for p in 0..f {
                let first = y.row(0)[p].as_f64();
                let d: Vec<f64> = (0..n_steps).map(|s| y.row(s)[p].as_f64() - first).collect();
                let mean = d.iter().sum::<f64>() / n_steps as f64;
                total += d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_steps as f64;
            }
            *score += total / f as f64;
        }
        *score /= n_z as f64;
    }
    Ok(scores)
}

/// Mean of `‖G(lerp(z₁, z₂, t + ε)) − G(lerp(z₁, z₂, t))‖² / ε²` with
/// `t ~ U[0, 1 − ε]`, for the given endpoint pairs.
pub fn path_length_between<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    pairs: &[(Vec<T>, Vec<T>)],
    t_epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(t_epsilon > 0.0 && t_epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("path epsilon must be in (0, 1), got {t_epsilon}")));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no paths".into()));
    }
    let mut rng = stream_rng(seed, 2 << 32, Stream::Eval);
    let lerp = |a: &[T], b: &[T], t: f64| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| x + (y - x) * T::lit(t)).collect() };
    let mut total = 0.0;
    for chunk in pairs.chunks(128) {
        let mut lo = Vec::with_capacity(chunk.len());
        let mut hi = Vec::with_capacity(chunk.len());
        for (a, b) in chunk {
            let t = rng.random_range(0.0..1.0 - t_epsilon);
            lo.push(lerp(a, b, t));
            hi.push(lerp(a, b, t + t_epsilon));
        }
        let n = lo.len();
        lo.extend(hi);
        let y = outputs(net, Tensor::from_rows(&lo)?)?;
        for k in 0..n {
            let d: f64 = y
                .row(k)
                .iter()
                .zip(y.row(n + k))
                .map(|(&p, &q)| (q.as_f64() - p.as_f64()).powi(2))
                .sum();
            total += d / (t_epsilon * t_epsilon);
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Path length over `n_paths` independent standard-normal endpoint pairs.
pub fn path_length<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, n_paths: usize, t_epsilon: f64, seed: u64) -> Result<f64> {
    let m = net.latent_dim();
    let mut rng = stream_rng(seed, 3 << 32, Stream::Eval);
    let pairs: Vec<(Vec<T>, Vec<T>)> = (0..n_paths)
        .map(|_| {
            let mut r = normal_rows::<T>(&mut rng, 2, m);
            let b = r.pop().expect("two rows");
            (r.pop().expect("two rows"), b)
        })
        .collect();
    path_length_between(net, &pairs, t_epsilon, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub vp: VpConfig,
    pub activeness_z: usize,
    pub activeness_steps: usize,
    pub path_samples: usize,
    pub path_epsilon: f64,
    /// Latents used for the per-layer exact penalty trace.
    pub penalty_probes: usize,
    pub penalty_epsilon: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            vp: VpConfig::default(),
            activeness_z: 64,
            activeness_steps: 16,
            path_samples: 1000,
            path_epsilon: 1e-4,
            penalty_probes: 64,
            penalty_epsilon: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub vp_accuracy: f64,
    pub vp_std: f64,
    pub vp_repeats: Vec<f64>,
    pub activeness: Vec<f64>,
    /// Path length measured on raw pixels.
    pub path_length_pixel: f64,
    /// Exact orthogonal-Jacobian penalty per tap, evaluation mode.
    pub penalty_per_layer: Vec<f64>,
    pub vp_pairs: usize,
    pub activeness_z: usize,
    pub activeness_steps: usize,
    pub path_samples: usize,
    pub penalty_probes: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("vp_accuracy,{}\nvp_std,{}\n", self.vp_accuracy, self.vp_std));
        for (i, a) in self.vp_repeats.iter().enumerate() {
            s.push_str(&format!("vp_repeat_{i},{a}\n"));
        }
        for (i, a) in self.activeness.iter().enumerate() {
            s.push_str(&format!("activeness_{i},{a}\n"));
        }
        s.push_str(&format!("path_length_pixel,{}\n", self.path_length_pixel));
        for (i, p) in self.penalty_per_layer.iter().enumerate() {
            s.push_str(&format!("penalty_l{},{p}\n", i + 1));
        }
        s
    }

    pub fn activeness_csv(&self) -> String {
        let mut s = String::from("dimension,activeness\n");
        for (i, a) in self.activeness.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }

    /// `min / max` of the activeness scores.
    pub fn activeness_ratio(&self) -> f64 {
        activeness_ratio(&self.activeness)
    }
}

pub fn activeness_ratio(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(0.0, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        1.0
    }
}

/// Per-tap exact penalty averaged over `n` standard-normal latents.
pub fn penalty_trace<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, n: usize, epsilon: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, 4 << 32, Stream::Eval);
    let z = Tensor::from_rows(&normal_rows::<T>(&mut rng, n.max(1), net.latent_dim()))?;
    let layers: Vec<usize> = (1..=net.tap_count()).collect();
    let mut tape = Tape::new();
    let base = tape.constant(z);
    let p = orojar_exact_on(&mut tape, net, Site::latent(base), epsilon, &layers, Norm::Running)?;
    Ok(p.layer_values(&tape))
}

pub fn evaluate<T: Real, N: TapNetwork<T> + ?Sized>(net: &N, config: &MetricsConfig) -> Result<MetricsReport> {
    let vp = vp_score(net, &config.vp, config.seed)?;
    let act = activeness(net, config.activeness_z, config.activeness_steps, config.seed)?;
    let pl = path_length(net, config.path_samples, config.path_epsilon, config.seed)?;
    let pen = penalty_trace(net, config.penalty_probes, config.penalty_epsilon, config.seed)?;
    if act.iter().chain(&pen).any(|v| !v.is_finite()) || !pl.is_finite() {
        return Err(Error::NonFinite {
            context: "metrics report".into(),
        });
    }
    Ok(MetricsReport {
        vp_accuracy: vp.accuracy,
        vp_std: vp.std,
        vp_repeats: vp.repeats,
        activeness: act,
        path_length_pixel: pl,
        penalty_per_layer: pen,
        vp_pairs: config.vp.n_pairs,
        activeness_z: config.activeness_z,
        activeness_steps: config.activeness_steps,
        path_samples: config.path_samples,
        penalty_probes: config.penalty_probes,
        seed: config.seed,
    })
}
