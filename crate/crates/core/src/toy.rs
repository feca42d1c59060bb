//! Small analytic generators with known Jacobian structure, used by tests,
//! diagnostics and the recovery benchmarks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{Forward, Norm, ParamNetwork, ParamStore, TapNetwork};
use crate::tensor::{Real, Tape, Tensor, Var};

fn check_width<T: Real>(tape: &Tape<T>, z: Var, m: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(z);
    if s.len() != 2 || s[1] != m {
        return Err(Error::shape(op, format!("latent batch {s:?}, expected [_, {m}]")));
    }
    Ok(s[0])
}

fn single(output: Var) -> Forward {
    Forward {
        taps: vec![output],
        output,
        batchnorms: Vec::new(),
    }
}

/// `G(z) = W·z + b` with `W [n, m]`; optionally shaped as a one-channel
/// square image. The output is the only tap.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub params: ParamStore<T>,
    latent_dim: usize,
    image_side: Option<usize>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("linear", format!("weight {s:?} is not [n, m]")));
        }
        let bias = bias.unwrap_or_else(|| Tensor::zeros(&[s[0]]));
        if bias.shape() != [s[0]] {
            return Err(Error::shape("linear", format!("bias {:?} vs {} outputs", bias.shape(), s[0])));
        }
        let mut params = ParamStore::new();
        params.push("weight", weight);
        params.push("bias", bias);
        Ok(Self {
            params,
            latent_dim: s[1],
            image_side: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_f64(&[n, m], &flat)?, None)
    }

    /// Random `[n, m]` weight with entries uniform in `[-1, 1]`.
    pub fn random(rng: &mut impl Rng, n: usize, m: usize) -> Self {
        let w = Tensor::from_fn(&[n, m], |_| T::lit(rng.random_range(-1.0..1.0)));
        Self::new(w, None).expect("consistent shapes")
    }

    /// Emits `[R, 1, side, side]` images; requires `n = side²`.
    pub fn as_image(mut self, side: usize) -> Result<Self> {
        if side * side != self.weight().shape()[0] {
            return Err(Error::shape("linear", format!("{} outputs is not {side}²", self.weight().shape()[0])));
        }
        self.image_side = Some(side);
        Ok(self)
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.get(0)
    }
}

impl<T: Real> TapNetwork<T> for Linear<T> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn tap_count(&self) -> usize {
        1
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, norm: Norm) -> Result<Forward> {
        let vars = self.params.bind(tape, false);
        self.forward_with(tape, &vars, z, norm)
    }
}

impl<T: Real> ParamNetwork<T> for Linear<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_with(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, _norm: Norm) -> Result<Forward> {
        let rows = check_width(tape, z, self.latent_dim, "linear")?;
        let wt = tape.transpose(vars[0])?;
        let y = tape.matmul(z, wt)?;
        let mut y = tape.add_row(y, vars[1])?;
        if let Some(side) = self.image_side {
            y = tape.reshape(y, &[rows, 1, side, side])?;
        }
        Ok(single(y))
    }
}

/// `G(z) = W₂·tanh(W₁·z + b₁)`. Taps are the hidden pre-activation and the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub params: ParamStore<T>,
    latent_dim: usize,
}

impl<T: Real> Mlp<T> {
    /// Weights uniform in `[-scale, scale]`.
    pub fn random(rng: &mut impl Rng, m: usize, hidden: usize, out: usize, scale: f64) -> Self {
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..scale)));
        let mut params = ParamStore::new();
        params.push("w1", u(&[hidden, m]));
        params.push("b1", u(&[hidden]));
        params.push("w2", u(&[out, hidden]));
        Self { params, latent_dim: m }
    }
}

impl<T: Real> TapNetwork<T> for Mlp<T> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn tap_count(&self) -> usize {
        2
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, norm: Norm) -> Result<Forward> {
        let vars = self.params.bind(tape, false);
        self.forward_with(tape, &vars, z, norm)
    }
}

impl<T: Real> ParamNetwork<T> for Mlp<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_with(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, _norm: Norm) -> Result<Forward> {
        check_width(tape, z, self.latent_dim, "mlp")?;
        let w1t = tape.transpose(vars[0])?;
        let h = tape.matmul(z, w1t)?;
        let h = tape.add_row(h, vars[1])?;
        let a = tape.tanh(h);
        let w2t = tape.transpose(vars[2])?;
        let y = tape.matmul(a, w2t)?;
        Ok(Forward {
            taps: vec![h, y],
            output: y,
            batchnorms: Vec::new(),
        })
    }
}

/// A parameter-free generator defined by a closure over the tape.
pub struct Lambda<F> {
    latent_dim: usize,
    f: F,
}

impl<F> Lambda<F> {
    pub fn new(latent_dim: usize, f: F) -> Self {
        Self { latent_dim, f }
    }
}

impl<T: Real, F: Fn(&mut Tape<T>, Var) -> Result<Var>> TapNetwork<T> for Lambda<F> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn tap_count(&self) -> usize {
        1
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, _norm: Norm) -> Result<Forward> {
        check_width(tape, z, self.latent_dim, "lambda")?;
        Ok(single((self.f)(tape, z)?))
    }
}

/// Random orthogonal `[m, m]` matrix (Gram–Schmidt of a Gaussian matrix).
pub fn random_rotation(rng: &mut impl Rng, m: usize) -> Tensor<f64> {
    loop {
        let a: Vec<f64> = (0..m * m).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        if let Ok((q, _)) = crate::linalg::gram_schmidt(&a, m, m) {
            return Tensor::new(vec![m, m], q).expect("square");
        }
    }
}

/// `G(z) = f(Q·z)` with the separable nonlinearity
/// `f_i(y) = s_i·(y + 0.25·tanh(y))` and a planted rotation `Q`.
///
/// The Jacobian `diag(f'(Qz))·Q` has orthogonal columns only along the rows
/// of `Q`, so directions `A = Qᵀ` (up to permutation and sign) are the unique
/// minimizers of the orthogonal-Jacobian penalty over `z + A·ω`.
#[derive(Clone, Debug)]
pub struct RotatedFactors<T> {
    pub rotation: Tensor<T>,
    pub scales: Vec<f64>,
}

impl<T: Real> RotatedFactors<T> {
    pub fn new(rotation: Tensor<T>, scales: Vec<f64>) -> Result<Self> {
        let s = rotation.shape();
        if s.len() != 2 || s[0] != s[1] || scales.len() != s[0] {
            return Err(Error::shape("rotated_factors", format!("rotation {s:?} with {} scales", scales.len())));
        }
        Ok(Self { rotation, scales })
    }

    /// Random rotation and distinct scales `1, 1.5, 2, …`.
    pub fn random(rng: &mut impl Rng, m: usize) -> Self {
        let q = random_rotation(rng, m).cast();
        Self::new(q, (0..m).map(|i| 1.0 + 0.5 * i as f64).collect()).expect("square")
    }

    /// The planted factor coordinates `Q·z` of one latent row.
    pub fn factors(&self, z: &[T]) -> Vec<T> {
        let m = self.scales.len();
        (0..m)
            .map(|i| (0..m).map(|j| self.rotation.data()[i * m + j] * z[j]).sum())
            .collect()
    }
}

impl<T: Real> TapNetwork<T> for RotatedFactors<T> {
    fn latent_dim(&self) -> usize {
        self.scales.len()
    }

    fn tap_count(&self) -> usize {
        1
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, _norm: Norm) -> Result<Forward> {
        check_width(tape, z, self.scales.len(), "rotated_factors")?;
        let qt = tape.constant(self.rotation.clone());
        let qt = tape.transpose(qt)?;
        let y = tape.matmul(z, qt)?;
        let t = tape.tanh(y);
        let t = tape.scale(t, T::lit(0.25));
        let f = tape.add(y, t)?;
        let s = tape.constant(Tensor::new(vec![self.scales.len()], self.scales.iter().map(|&v| T::lit(v)).collect())?);
        let zero = tape.constant(Tensor::zeros(tape.shape(f)));
        let scaled = tape.add_row(zero, s)?;
        Ok(single(tape.mul(f, scaled)?))
    }
}

/// Writes latent coordinate `i` into its own block of a `side × side` image,
/// with blocks laid out on a grid. Perturbing `z_i` changes only block `i`.
pub struct BlockCopy {
    latent_dim: usize,
    side: usize,
    map: Tensor<f64>,
}

impl BlockCopy {
    pub fn new(latent_dim: usize, side: usize) -> Result<Self> {
        let per_row = (latent_dim as f64).sqrt().ceil() as usize;
        let block = side / per_row;
        if block == 0 {
            return Err(Error::InvalidArgument(format!("{latent_dim} blocks do not fit in {side}²")));
        }
        let mut map = vec![0.0; latent_dim * side * side];
        for i in 0..latent_dim {
            let (by, bx) = (i / per_row, i % per_row);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    map[i * side * side + y * side + x] = 1.0;
                }
            }
        }
        Ok(Self {
            latent_dim,
            side,
            map: Tensor::new(vec![latent_dim, side * side], map)?,
        })
    }
}

impl<T: Real> TapNetwork<T> for BlockCopy {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn tap_count(&self) -> usize {
        1
    }

    fn forward(&self, tape: &mut Tape<T>, z: Var, _norm: Norm) -> Result<Forward> {
        let rows = check_width(tape, z, self.latent_dim, "block_copy")?;
        let map = tape.constant(self.map.cast());
        let y = tape.matmul(z, map)?;
        let y = tape.scale(y, T::lit(0.25));
        let y = tape.sigmoid(y);
        Ok(single(tape.reshape(y, &[rows, 1, self.side, self.side])?))
    }
}
