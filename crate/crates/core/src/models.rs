//! The generator and discriminator, per-layer taps and checkpoints.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.9;
const KERNEL: usize = 4;
const BASE_SPATIAL: usize = 4;

/// Parameter count of `Generator::new(GeneratorConfig::default(), _)`.
pub const DEFAULT_GENERATOR_PARAMS: usize = 686_145;

/// How batchnorm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Training mode: statistics of the first `stat_rows` rows, shared by all rows.
    Batch { stat_rows: usize },
    /// Evaluation mode: running statistics.
    Running,
}

/// Output of a tapped forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// The leading layer outputs, read at the generator's [`TapPoint`].
    pub taps: Vec<Var>,
    pub output: Var,
    /// Training-mode batchnorm nodes keyed by layer index.
    pub batchnorms: Vec<(usize, Var)>,
}

/// A layered map `z -> x` whose leading layer outputs can be regularized.
pub trait TapNetwork<T: Real> {
    fn latent_dim(&self) -> usize;
    fn tap_count(&self) -> usize;
    /// Runs `z [R, m]` through the network on `tape`.
    fn forward(&self, tape: &mut Tape<T>, z: Var, norm: Norm) -> Result<Forward>;
}

/// A [`TapNetwork`] with trainable parameters.
pub trait ParamNetwork<T: Real>: TapNetwork<T> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Forward pass with the parameters already on the tape as `vars`.
    fn forward_with(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, norm: Norm) -> Result<Forward>;
    fn update_running_stats(&mut self, _tape: &Tape<T>, _fwd: &Forward) {}

    /// Binds the parameters as trainable leaves.
    fn bind(&self, tape: &mut Tape<T>) -> Bound<'_, Self>
    where
        Self: Sized,
    {
        Bound {
            model: self,
            vars: self.params().bind(tape, true),
        }
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.values.iter_mut().collect()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect()
    }

    pub fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (n, v) in self.names.iter().zip(&self.values) {
            out.push((format!("{prefix}{n}"), v.clone()));
        }
    }

    /// Replaces every tensor by the checkpoint entry `prefix + name`,
    /// requiring identical name sets and shapes.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint<T>) -> Result<()> {
        let have: BTreeSet<&str> = ckpt
            .entries
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(prefix))
            .collect();
        let want: BTreeSet<&str> = self.names.iter().map(String::as_str).collect();
        if have != want {
            return Err(Error::ParamSet {
                missing: want.difference(&have).map(|s| format!("{prefix}{s}")).collect(),
                unexpected: have.difference(&want).map(|s| format!("{prefix}{s}")).collect(),
            });
        }
        let mut loaded = Vec::with_capacity(self.len());
        for (name, cur) in self.names.iter().zip(&self.values) {
            let full = format!("{prefix}{name}");
            let t = ckpt.get(&full).expect("name set checked");
            if t.shape() != cur.shape() {
                return Err(Error::ParamShape {
                    name: full,
                    found: t.shape().to_vec(),
                    expected: cur.shape().to_vec(),
                });
            }
            loaded.push(t.clone());
        }
        self.values = loaded;
        Ok(())
    }
}

fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

fn block_count(resolution: usize) -> Result<usize> {
    let mut n = 0;
    let mut s = BASE_SPATIAL;
    while s < resolution {
        s *= 2;
        n += 1;
    }
    if s != resolution || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} must be {BASE_SPATIAL}·2^k with k ≥ 1"
        )));
    }
    Ok(n)
}

/// Where each layer's tap is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Right after the projection or convolution, before normalization.
    Projection,
    /// After the layer's normalization and nonlinearity.
    #[default]
    Activation,
}

/// Whether the first fully-connected layer keeps its normalization and nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLayerMode {
    #[default]
    WithNormAct,
    Bare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub resolution: usize,
    pub tap_count: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 6,
            base_channels: 256,
            resolution: 32,
            tap_count: 4,
        }
    }
}

impl GeneratorConfig {
    /// Output channels of every transposed convolution.
    fn deconv_channels(&self) -> Result<Vec<usize>> {
        let n = block_count(self.resolution)?;
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.base_channels >> (n - 1) == 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} too small for {n} upsampling blocks",
                self.base_channels
            )));
        }
        if self.tap_count == 0 || self.tap_count > n + 1 {
            return Err(Error::InvalidArgument(format!(
                "tap_count {} outside 1..={}",
                self.tap_count,
                n + 1
            )));
        }
        Ok((1..=n).map(|i| if i == n { 1 } else { self.base_channels >> i }).collect())
    }

    pub fn hidden(&self) -> usize {
        self.base_channels * BASE_SPATIAL * BASE_SPATIAL
    }

    /// Recovers the architecture from a checkpoint's generator entries.
    pub fn infer<T: Real>(ckpt: &Checkpoint<T>, tap_count: usize) -> Result<Self> {
        let fc = ckpt
            .get("g.fc.weight")
            .ok_or_else(|| Error::Format("no generator entry `g.fc.weight`".into()))?;
        let blocks = ckpt
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with("g.deconv") && n.ends_with(".weight"))
            .count();
        if fc.shape().len() != 2 || blocks == 0 {
            return Err(Error::Format("malformed generator entries".into()));
        }
        let cfg = Self {
            latent_dim: fc.shape()[1],
            base_channels: fc.shape()[0] / (BASE_SPATIAL * BASE_SPATIAL),
            resolution: BASE_SPATIAL << blocks,
            tap_count: tap_count.min(blocks + 1),
        };
        cfg.deconv_channels()?;
        Ok(cfg)
    }
}

/// Fully-connected projection followed by upsampling transposed-convolution
/// blocks and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub first_layer: FirstLayerMode,
    pub tap_point: TapPoint,
    pub params: ParamStore<T>,
    /// Running mean and variance per batchnorm layer, as `bn{i}.running_*`.
    pub buffers: ParamStore<T>,
    channels: Vec<usize>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let channels = config.deconv_channels()?;
        let mut rng = stream_rng(seed, 0, Stream::Init);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let c = config.base_channels;
        params.push("fc.weight", normal_tensor(&mut rng, &[config.hidden(), config.latent_dim], INIT_STD));
        params.push("fc.bias", Tensor::zeros(&[config.hidden()]));
        let mut bn = |params: &mut ParamStore<T>, i: usize, ch: usize| {
            params.push(format!("bn{i}.gamma"), Tensor::full(&[ch], T::one()));
            params.push(format!("bn{i}.beta"), Tensor::zeros(&[ch]));
            buffers.push(format!("bn{i}.running_mean"), Tensor::zeros(&[ch]));
            buffers.push(format!("bn{i}.running_var"), Tensor::full(&[ch], T::one()));
        };
        bn(&mut params, 0, c);
        let mut cin = c;
        for (i, &co) in channels.iter().enumerate() {
            let l = i + 1;
            params.push(format!("deconv{l}.weight"), normal_tensor(&mut rng, &[cin, co, KERNEL, KERNEL], INIT_STD));
            params.push(format!("deconv{l}.bias"), Tensor::zeros(&[co]));
            if l < channels.len() {
                bn(&mut params, l, co);
            }
            cin = co;
        }
        Ok(Self {
            config,
            first_layer: FirstLayerMode::WithNormAct,
            tap_point: TapPoint::default(),
            params,
            buffers,
            channels,
        })
    }

    /// The same parameters with the given first-layer treatment.
    pub fn first_layer_variant(&self, mode: FirstLayerMode) -> Self {
        let mut g = self.clone();
        g.first_layer = mode;
        g
    }

    /// First-layer weight `W [hidden, m]`.
    pub fn first_layer_weight(&self) -> &Tensor<T> {
        self.params.get(0)
    }

    pub fn first_layer_bias(&self) -> &Tensor<T> {
        self.params.get(1)
    }

    fn forward_tapped(&self, tape: &mut Tape<T>, p: &[Var], z: Var, norm: Norm) -> Result<Forward> {
        let s = tape.shape(z).to_vec();
        let m = self.config.latent_dim;
        if s.len() != 2 || s[1] != m {
            return Err(Error::shape("generator", format!("latent batch {s:?}, expected [_, {m}]")));
        }
        let rows = s[0];
        let slope = T::lit(LEAKY_SLOPE);
        let mut taps = Vec::new();
        let mut batchnorms = Vec::new();
        let mut idx = 0;
        let mut next = || {
            idx += 1;
            p[idx - 1]
        };
        let wt = tape.transpose(next())?;
        let h = tape.matmul(z, wt)?;
        let h = tape.add_row(h, next())?;
        let at_projection = self.tap_point == TapPoint::Projection;
        if at_projection {
            taps.push(h);
        }
        let c = self.config.base_channels;
        let mut h = tape.reshape(h, &[rows, c, BASE_SPATIAL, BASE_SPATIAL])?;
        let (g0, b0) = (next(), next());
        if self.first_layer == FirstLayerMode::WithNormAct {
            h = self.norm(tape, h, g0, b0, 0, norm, &mut batchnorms)?;
            h = tape.leaky_relu(h, slope);
        }
        if !at_projection {
            let flat = tape.reshape(h, &[rows, self.config.hidden()])?;
            taps.push(flat);
        }
        let n = self.channels.len();
        for l in 1..=n {
            let (w, b) = (next(), next());
            let y = tape.conv2d_transpose(h, w, 2, 1)?;
            let y = tape.add_channel(y, b)?;
            if at_projection {
                taps.push(y);
            }
            if l < n {
                let (g, be) = (next(), next());
                let y = self.norm(tape, y, g, be, l, norm, &mut batchnorms)?;
                h = tape.leaky_relu(y, slope);
            } else {
                h = tape.sigmoid(y);
            }
            if !at_projection {
                taps.push(h);
            }
        }
        taps.truncate(self.config.tap_count);
        Ok(Forward {
            taps,
            output: h,
            batchnorms,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        layer: usize,
        norm: Norm,
        record: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        match norm {
            Norm::Batch { stat_rows } => {
                let y = tape.batchnorm(x, gamma, beta, stat_rows)?;
                record.push((layer, y));
                Ok(y)
            }
            Norm::Running => {
                let mean = self.buffers.by_name(&format!("bn{layer}.running_mean")).expect("buffer");
                let var = self.buffers.by_name(&format!("bn{layer}.running_var")).expect("buffer");
                tape.batchnorm_eval(x, gamma, beta, mean.data(), var.data())
            }
        }
    }

    fn fold_running_stats(&mut self, tape: &Tape<T>, fwd: &Forward) {
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        for &(layer, v) in &fwd.batchnorms {
            let Some(stats) = tape.batchnorm_stats(v) else { continue };
            let n = stats.count as f64;
            let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let mi = self.buffers.names().iter().position(|s| *s == format!("bn{layer}.running_mean"));
            let vi = self.buffers.names().iter().position(|s| *s == format!("bn{layer}.running_var"));
            let (Some(mi), Some(vi)) = (mi, vi) else { continue };
            let mut bufs = self.buffers.values_mut();
            for (r, &b) in bufs[mi].data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in bufs[vi].data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + take * b * unbias;
            }
        }
    }

    /// Evaluation-mode images for a latent batch `[B, m]`.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let fwd = self.forward(&mut tape, zv, Norm::Running)?;
        Ok(tape.value(fwd.output).clone())
    }

    pub fn export(&self, out: &mut Vec<(String, Tensor<T>)>) {
        self.params.export("g.", out);
        self.buffers.export("g.", out);
    }

    pub fn import(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let mut all = self.params.clone();
        for (n, v) in self.buffers.names().iter().zip(self.buffers.values()) {
            all.push(n.clone(), v.clone());
        }
        all.import("g.", ckpt)?;
        let k = self.params.len();
        self.params.values = all.values[..k].to_vec();
        self.buffers.values = all.values[k..].to_vec();
        Ok(())
    }
}

impl<T: Real> TapNetwork<T> for Generator<T> {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn tap_count(&self) -> usize {
        self.config.tap_count
    }

    /// Binds the parameters as constants, so no gradient reaches them.
    fn forward(&self, tape: &mut Tape<T>, z: Var, norm: Norm) -> Result<Forward> {
        let vars = self.params.bind(tape, false);
        self.forward_tapped(tape, &vars, z, norm)
    }
}

impl<T: Real> ParamNetwork<T> for Generator<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_with(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, norm: Norm) -> Result<Forward> {
        self.forward_tapped(tape, vars, z, norm)
    }

    /// Folds the batch statistics of a training-mode forward into the running
    /// statistics (momentum 0.9, unbiased variance).
    fn update_running_stats(&mut self, tape: &Tape<T>, fwd: &Forward) {
        self.fold_running_stats(tape, fwd)
    }
}

/// A model whose parameters sit on a tape as leaves.
pub struct Bound<'a, M> {
    pub model: &'a M,
    pub vars: Vec<Var>,
}

impl<T: Real, M: ParamNetwork<T>> TapNetwork<T> for Bound<'_, M> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn tap_count(&self) -> usize {
        self.model.tap_count()
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, norm: Norm) -> Result<Forward> {
        self.model.forward_with(tape, &self.vars, z, norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 256,
            resolution: 32,
        }
    }
}

/// Strided convolutions mirroring the generator, ending in one logit.
/// Every block after the first is batch-normalized with the statistics of
/// the batch being scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    blocks: usize,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let n = block_count(config.resolution)?;
        let c = config.base_channels;
        if c >> (n - 1) == 0 {
            return Err(Error::InvalidArgument(format!("base_channels {c} too small for {n} blocks")));
        }
        let mut rng = stream_rng(seed, 1, Stream::Init);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for l in 1..=n {
            let co = c >> (n - l);
            params.push(format!("conv{l}.weight"), normal_tensor(&mut rng, &[co, cin, KERNEL, KERNEL], INIT_STD));
            params.push(format!("conv{l}.bias"), Tensor::zeros(&[co]));
            if l > 1 {
                params.push(format!("bn{l}.gamma"), Tensor::full(&[co], T::one()));
                params.push(format!("bn{l}.beta"), Tensor::zeros(&[co]));
            }
            cin = co;
        }
        let feat = c * BASE_SPATIAL * BASE_SPATIAL;
        params.push("fc.weight", normal_tensor(&mut rng, &[feat, 1], INIT_STD));
        params.push("fc.bias", Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params,
            blocks: n,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<'_, Self> {
        Bound {
            model: self,
            vars: self.params.bind(tape, true),
        }
    }

    /// Logits `[B]` for images `[B, 1, H, W]` using parameter nodes `p`.
    pub fn logits_with(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let r = self.config.resolution;
        if s.len() != 4 || s[1..] != [1, r, r] {
            return Err(Error::shape("discriminator", format!("images {s:?}, expected [_, 1, {r}, {r}]")));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut p = p.iter().copied();
        let mut next = || p.next().expect("discriminator parameter");
        let mut h = x;
        for l in 1..=self.blocks {
            let y = tape.conv2d(h, next(), 2, 1)?;
            let mut y = tape.add_channel(y, next())?;
            if l > 1 {
                let (g, b) = (next(), next());
                y = tape.batchnorm(y, g, b, s[0])?;
            }
            h = tape.leaky_relu(y, slope);
        }
        let feat = self.config.base_channels * BASE_SPATIAL * BASE_SPATIAL;
        let h = tape.reshape(h, &[s[0], feat])?;
        let y = tape.matmul(h, next())?;
        let y = tape.add_row(y, next())?;
        tape.reshape(y, &[s[0]])
    }

    pub fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let vars = self.params.bind(tape, false);
        self.logits_with(tape, &vars, x)
    }

    pub fn export(&self, out: &mut Vec<(String, Tensor<T>)>) {
        self.params.export("d.", out);
    }

    pub fn import(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        self.params.import("d.", ckpt)
    }
}

impl<T: Real> Bound<'_, Discriminator<T>> {
    pub fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.model.logits_with(tape, &self.vars, x)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DGAN1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus the seed and step needed to resume.
///
/// Random streams are derived from `(seed, step)`, so those two numbers are
/// the complete generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<(String, Tensor<T>)>,
    pub seed: u64,
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.put_le(&mut out);
            }
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u32("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|_| Error::Format(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let dtype = r.take(1, "dtype tag")?[0];
            if dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "entry `{name}` has dtype tag {dtype}, expected {}",
                    T::DTYPE
                )));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.saturating_mul(T::BYTES), &format!("data of `{name}`"))?;
            let data = raw.chunks_exact(T::BYTES).map(T::get_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
            entries.push((name, t));
        }
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries, seed, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let g = Generator::<f32>::new(GeneratorConfig::default(), 0).unwrap();
        assert_eq!(g.params.count(), DEFAULT_GENERATOR_PARAMS);
    }

    #[test]
    fn block_counts() {
        assert_eq!(block_count(32).unwrap(), 3);
        assert_eq!(block_count(64).unwrap(), 4);
        assert!(block_count(48).is_err());
        assert!(block_count(4).is_err());
    }
}
