//! Adversarial training with an optional Jacobian or Hessian penalty on the
//! generator loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{
    Checkpoint, Discriminator, DiscriminatorConfig, FirstLayerMode, Generator, GeneratorConfig, Norm, ParamNetwork, TapPoint,
};
use crate::optim::{Adam, AdamConfig};
use crate::regularizers::{hessian_penalty_stochastic, orojar_stochastic, PenaltyConfig, Site};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    #[default]
    Orojar,
    Hessian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub penalty: PenaltyKind,
    pub iters: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(skip)]
    pub seed: u64,
    pub first_layer_mode: FirstLayerMode,
    pub tap_point: TapPoint,
    /// Iterations between evaluations (0 disables).
    pub eval_every: usize,
    /// Iterations between checkpoints (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            penalty: PenaltyKind::Orojar,
            iters: 30_000,
            batch: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            first_layer_mode: FirstLayerMode::WithNormAct,
            tap_point: TapPoint::default(),
            eval_every: 1000,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, penalty: &PenaltyConfig, tap_count: usize) -> Result<()> {
        if self.iters == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "train.iters and train.batch must be positive (got {} and {})",
                self.iters, self.batch
            )));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("train.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("train.{name} must be in [0, 1), got {v}")));
            }
        }
        if self.penalty != PenaltyKind::None {
            penalty.validate(tap_count)?;
        }
        Ok(())
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig::new(self.lr_g, self.beta1, self.beta2)
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig::new(self.lr_d, self.beta1, self.beta2)
    }
}

/// One completed iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iter: u64,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub penalty: f64,
    pub penalty_layers: Vec<f64>,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
}

impl TrainRecord {
    pub fn csv_header(layers: &[usize]) -> String {
        let mut h = String::from("iter,d_loss,g_adv_loss,penalty");
        for l in layers {
            h.push_str(&format!(",penalty_l{l}"));
        }
        h.push_str(",d_grad_norm,g_grad_norm");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{},{}", self.iter, self.d_loss, self.g_adv_loss, self.penalty);
        for v in &self.penalty_layers {
            r.push_str(&format!(",{v}"));
        }
        r.push_str(&format!(",{},{}", self.d_grad_norm, self.g_grad_norm));
        r
    }

    fn all_finite(&self) -> bool {
        [self.d_loss, self.g_adv_loss, self.penalty, self.d_grad_norm, self.g_grad_norm]
            .iter()
            .chain(&self.penalty_layers)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

/// Both networks, their optimizers and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState<T, G> {
    pub g: G,
    pub d: Discriminator<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub seed: u64,
    pub step: u64,
}

impl<T: Real, G: ParamNetwork<T>> GanState<T, G> {
    pub fn new(g: G, d: Discriminator<T>, config: &TrainConfig) -> Self {
        let adam_g = Adam::new(config.adam_g(), &g.params().values().iter().collect::<Vec<_>>());
        let adam_d = Adam::new(config.adam_d(), &d.params.values().iter().collect::<Vec<_>>());
        Self {
            g,
            d,
            adam_g,
            adam_d,
            seed: config.seed,
            step: 0,
        }
    }
}

impl<T: Real> GanState<T, Generator<T>> {
    /// Fresh networks initialized from `config.seed`.
    pub fn init(gen: GeneratorConfig, disc: DiscriminatorConfig, config: &TrainConfig) -> Result<Self> {
        if gen.resolution != disc.resolution {
            return Err(Error::InvalidArgument(format!(
                "generator resolution {} vs discriminator resolution {}",
                gen.resolution, disc.resolution
            )));
        }
        let mut g = Generator::new(gen, config.seed)?;
        g.first_layer = config.first_layer_mode;
        g.tap_point = config.tap_point;
        let d = Discriminator::new(disc, config.seed)?;
        Ok(Self::new(g, d, config))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut entries = Vec::new();
        self.g.export(&mut entries);
        self.d.export(&mut entries);
        for (prefix, names, adam) in [
            ("g", self.g.params.names(), &self.adam_g),
            ("d", self.d.params.names(), &self.adam_d),
        ] {
            for (n, m) in names.iter().zip(&adam.m) {
                entries.push((format!("adam_m.{prefix}.{n}"), m.clone()));
            }
            for (n, v) in names.iter().zip(&adam.v) {
                entries.push((format!("adam_v.{prefix}.{n}"), v.clone()));
            }
        }
        Checkpoint {
            entries,
            seed: self.seed,
            step: self.step,
        }
    }

    /// Restores a state saved by [`GanState::checkpoint`] into networks of
    /// the given architecture; the optimizer step equals the checkpoint step.
    pub fn restore(
        ckpt: &Checkpoint<T>,
        gen: GeneratorConfig,
        disc: DiscriminatorConfig,
        config: &TrainConfig,
    ) -> Result<Self> {
        let mut state = Self::init(gen, disc, config)?;
        state.g.import(ckpt)?;
        state.d.import(ckpt)?;
        for (prefix, names, adam) in [
            ("g", state.g.params.names().to_vec(), &mut state.adam_g),
            ("d", state.d.params.names().to_vec(), &mut state.adam_d),
        ] {
            for (kind, slot) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
                for (n, t) in names.iter().zip(slot.iter_mut()) {
                    let name = format!("{kind}.{prefix}.{n}");
                    let src = ckpt.get(&name).ok_or_else(|| Error::ParamSet {
                        missing: vec![name.clone()],
                        unexpected: vec![],
                    })?;
                    if src.shape() != t.shape() {
                        return Err(Error::ParamShape {
                            name,
                            found: src.shape().to_vec(),
                            expected: t.shape().to_vec(),
                        });
                    }
                    *t = src.clone();
                }
            }
            adam.step = ckpt.step;
        }
        state.seed = ckpt.seed;
        state.step = ckpt.step;
        Ok(state)
    }
}

fn grad_list<T: Real>(grads: &Gradients<T>, vars: &[Var], params: &[Tensor<T>]) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

fn check_batches<T: Real>(real: Option<&Tensor<T>>, z: &Tensor<T>, m: usize) -> Result<usize> {
    let b = z.shape()[0];
    if z.shape().len() != 2 || z.shape()[1] != m {
        return Err(Error::shape("train", format!("latent batch {:?}, expected [_, {m}]", z.shape())));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(x) = real {
        if x.shape()[0] != b {
            return Err(Error::InvalidArgument(format!(
                "real batch of {} vs latent batch of {b}",
                x.shape()[0]
            )));
        }
    }
    Ok(b)
}

/// `mean(softplus(s · logits))`
fn logistic<T: Real>(tape: &mut Tape<T>, logits: Var, sign: f64) -> Var {
    let x = tape.scale(logits, T::lit(sign));
    let sp = tape.softplus(x);
    tape.mean(sp)
}

/// One discriminator update on `softplus(−D(x)) + softplus(D(G(z)))`; the
/// generator runs in training mode and is left untouched.
pub fn d_step<T: Real, G: ParamNetwork<T>>(state: &mut GanState<T, G>, real: &Tensor<T>, z: &Tensor<T>) -> Result<(f64, f64)> {
    let b = check_batches(Some(real), z, state.g.latent_dim())?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let fake = state.g.forward(&mut tape, zv, Norm::Batch { stat_rows: b })?.output;
    let xv = tape.constant(real.clone());
    let bound = state.d.bind(&mut tape);
    let lr = bound.logits(&mut tape, xv)?;
    let lf = bound.logits(&mut tape, fake)?;
    let vars = bound.vars;
    let a = logistic(&mut tape, lr, -1.0);
    let c = logistic(&mut tape, lf, 1.0);
    let loss = tape.add(a, c)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("discriminator loss at iteration {} (d_loss={value})", state.step),
        });
    }
    let grads = tape.backward(loss)?;
    let g = grad_list(&grads, &vars, state.d.params.values());
    let norm = global_norm(&g);
    state.adam_d.update(&mut state.d.params.values_mut(), &g)?;
    Ok((value, norm))
}

/// Result of one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct GStep {
    pub adv_loss: f64,
    pub penalty: f64,
    pub penalty_layers: Vec<f64>,
    pub grad_norm: f64,
}

/// One generator update on `softplus(−D(G(z))) + λ·penalty`; probe vectors
/// come from `probe_rng` only, and the discriminator is left untouched.
pub fn g_step<T: Real, G: ParamNetwork<T>>(
    state: &mut GanState<T, G>,
    z: &Tensor<T>,
    kind: PenaltyKind,
    penalty: &PenaltyConfig,
    probe_rng: &mut impl Rng,
) -> Result<GStep> {
    let b = check_batches(None, z, state.g.latent_dim())?;
    let norm = Norm::Batch { stat_rows: b };
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let bound = state.g.bind(&mut tape);
    let site = Site::latent(zv);
    let (fwd, fake, pen) = match kind {
        PenaltyKind::None => {
            let fwd = bound.model.forward_with(&mut tape, &bound.vars, zv, norm)?;
            let out = fwd.output;
            (fwd, out, None)
        }
        PenaltyKind::Orojar | PenaltyKind::Hessian => {
            let p = if kind == PenaltyKind::Orojar {
                orojar_stochastic(&mut tape, &bound, site, penalty, probe_rng, norm)?
            } else {
                hessian_penalty_stochastic(&mut tape, &bound, site, penalty, probe_rng, norm)?
            };
            let fake = p.base_output(&mut tape)?;
            (p.forward.clone(), fake, Some(p))
        }
    };
    let gvars = bound.vars;
    let logits = state.d.logits(&mut tape, fake)?;
    let adv = logistic(&mut tape, logits, -1.0);
    let adv_value = tape.value(adv).item().as_f64();
    let (loss, pen_value, layers) = match &pen {
        None => (adv, 0.0, Vec::new()),
        Some(p) => {
            let weighted = tape.scale(p.total, T::lit(penalty.lambda));
            (tape.add(adv, weighted)?, p.total_value(&tape), p.layer_values(&tape))
        }
    };
    if !adv_value.is_finite() || !pen_value.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "generator loss at iteration {} (g_adv_loss={adv_value}, penalty={pen_value})",
                state.step
            ),
        });
    }
    let grads = tape.backward(loss)?;
    let g = grad_list(&grads, &gvars, state.g.params().values());
    let grad_norm = global_norm(&g);
    state.adam_g.update(&mut state.g.params_mut().values_mut(), &g)?;
    state.g.update_running_stats(&tape, &fwd);
    Ok(GStep {
        adv_loss: adv_value,
        penalty: pen_value,
        penalty_layers: layers,
        grad_norm,
    })
}

/// Standard-normal latent batch.
pub fn sample_latents<T: Real>(rng: &mut impl Rng, rows: usize, m: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows, m], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// One alternating iteration at `state.step`, drawing data, latents and
/// probes from streams keyed by `(seed, step)`.
pub fn train_step<T: Real, G: ParamNetwork<T>>(
    state: &mut GanState<T, G>,
    dataset: &Dataset,
    config: &TrainConfig,
    penalty: &PenaltyConfig,
) -> Result<TrainRecord> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let (seed, t, b, m) = (state.seed, state.step, config.batch, state.g.latent_dim());
    let mut data_rng = stream_rng(seed, t, Stream::Data);
    let idx: Vec<usize> = (0..b).map(|_| data_rng.random_range(0..dataset.len())).collect();
    let real = dataset.batch::<T>(&idx);
    let mut latent_rng = stream_rng(seed, t, Stream::Latent);
    let zd = sample_latents(&mut latent_rng, b, m);
    let zg = sample_latents(&mut latent_rng, b, m);
    let mut probe_rng = stream_rng(seed, t, Stream::Probe);
    let (d_loss, d_grad_norm) = d_step(state, &real, &zd)?;
    let gs = g_step(state, &zg, config.penalty, penalty, &mut probe_rng)?;
    state.step += 1;
    let rec = TrainRecord {
        iter: state.step,
        d_loss,
        g_adv_loss: gs.adv_loss,
        penalty: gs.penalty,
        penalty_layers: gs.penalty_layers,
        d_grad_norm,
        g_grad_norm: gs.grad_norm,
    };
    if !rec.all_finite() {
        return Err(Error::NonFinite {
            context: format!("training record {rec:?}"),
        });
    }
    Ok(rec)
}

/// Runs iterations until `state.step == config.iters`, calling `hook` after
/// every iteration (for periodic evaluation and checkpointing).
pub fn train<T: Real, G: ParamNetwork<T>>(
    state: &mut GanState<T, G>,
    dataset: &Dataset,
    config: &TrainConfig,
    penalty: &PenaltyConfig,
    hook: &mut dyn FnMut(&GanState<T, G>, &TrainRecord) -> Result<()>,
) -> Result<TrainLog> {
    config.validate(penalty, state.g.tap_count())?;
    let mut log = TrainLog::default();
    while state.step < config.iters as u64 {
        let rec = train_step(state, dataset, config, penalty)?;
        hook(state, &rec)?;
        log.records.push(rec);
    }
    Ok(log)
}
