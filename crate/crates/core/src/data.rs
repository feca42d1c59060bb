//! Procedural sprite dataset with exact ground-truth factors.
//!
//! Five independent factors: shape (square, ellipse, triangle), size,
//! rotation and the centroid position. Sprites are rendered with 4×4
//! supersampled coverage, so images vary smoothly with the continuous
//! factors.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tensor};

pub const SIZE_RANGE: (f64, f64) = (0.3, 0.9);
pub const POS_RANGE: (f64, f64) = (0.15, 0.85);
pub const DEFAULT_RESOLUTION: usize = 32;
pub const FACTOR_COUNT: usize = 5;
/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;
/// Circumradius per unit of `size`; the largest sprite at the most extreme
/// position touches, but never crosses, the canvas border.
const RADIUS_PER_SIZE: f64 = POS_RANGE.0 / SIZE_RANGE.1;

pub const DATASET_MAGIC: &[u8; 5] = b"DFAC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square = 0,
    Ellipse = 1,
    Triangle = 2,
}

impl Shape {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Shape::Square),
            1 => Ok(Shape::Ellipse),
            2 => Ok(Shape::Triangle),
            _ => Err(Error::FactorRange {
                field: "shape_id",
                value: id as f64,
            }),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Rotation period of the shape's symmetry group.
    fn period(self) -> f64 {
        match self {
            Shape::Square => PI / 2.0,
            Shape::Ellipse => PI,
            Shape::Triangle => TAU / 3.0,
        }
    }
}

/// Ground-truth generative factors of one sprite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub shape: Shape,
    /// Fraction of the largest sprite, in `[0.3, 0.9]`.
    pub size: f64,
    /// Radians in `[0, 2π)`.
    pub rotation: f64,
    /// Normalized centroid, `[0.15, 0.85]`.
    pub pos_x: f64,
    pub pos_y: f64,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |field, v: f64, lo: f64, hi: f64, hi_open: bool| {
            let ok = v.is_finite() && v >= lo && if hi_open { v < hi } else { v <= hi };
            if ok {
                Ok(())
            } else {
                Err(Error::FactorRange { field, value: v })
            }
        };
        check("size", self.size, SIZE_RANGE.0, SIZE_RANGE.1, false)?;
        check("rotation", self.rotation, 0.0, TAU, true)?;
        check("pos_x", self.pos_x, POS_RANGE.0, POS_RANGE.1, false)?;
        check("pos_y", self.pos_y, POS_RANGE.0, POS_RANGE.1, false)
    }

    pub fn to_array(&self) -> [f64; FACTOR_COUNT] {
        [
            self.shape.id() as f64,
            self.size,
            self.rotation,
            self.pos_x,
            self.pos_y,
        ]
    }

    pub fn from_array(v: [f64; FACTOR_COUNT]) -> Result<Self> {
        if v[0].fract() != 0.0 || !(0.0..=2.0).contains(&v[0]) {
            return Err(Error::FactorRange {
                field: "shape_id",
                value: v[0],
            });
        }
        let spec = FactorSpec {
            shape: Shape::from_id(v[0] as u8)?,
            size: v[1],
            rotation: v[2],
            pos_x: v[3],
            pos_y: v[4],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Draws every factor independently and uniformly over its range.
    pub fn sample(rng: &mut impl Rng) -> Self {
        FactorSpec {
            shape: Shape::from_id(rng.random_range(0..3u8)).expect("in range"),
            size: rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1),
            rotation: rng.random_range(0.0..TAU),
            pos_x: rng.random_range(POS_RANGE.0..=POS_RANGE.1),
            pos_y: rng.random_range(POS_RANGE.0..=POS_RANGE.1),
        }
    }

    fn contains(&self, x: f64, y: f64, cos: f64, sin: f64) -> bool {
        let r = self.size * RADIUS_PER_SIZE;
        let (dx, dy) = (x - self.pos_x, y - self.pos_y);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        match self.shape {
            Shape::Square => {
                let h = r / 2f64.sqrt();
                u.abs() <= h && v.abs() <= h
            }
            Shape::Ellipse => {
                let (a, b) = (r, r / 2.0);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Triangle => {
                // equilateral, circumradius r; edge normals at 270°, 30°, 150°
                let inr = r / 2.0;
                let c30 = 3f64.sqrt() / 2.0;
                v <= inr && (c30 * u - 0.5 * v) <= inr && (-c30 * u - 0.5 * v) <= inr
            }
        }
    }
}

/// Renders a `[resolution, resolution]` coverage image in `[0, 1]`.
pub fn render(spec: &FactorSpec, resolution: usize) -> Result<Tensor<f64>> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let theta = spec.rotation % spec.shape.period();
    let (sin, cos) = theta.sin_cos();
    let n = resolution as f64;
    let sub = SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let data = (0..resolution * resolution)
        .map(|idx| {
            let (py, px) = (idx / resolution, idx % resolution);
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / sub) / n;
                    let y = (py as f64 + (sy as f64 + 0.5) / sub) / n;
                    hits += spec.contains(x, y, cos, sin) as usize;
                }
            }
            hits as f64 / total
        })
        .collect();
    Tensor::new(vec![resolution, resolution], data)
}

#[derive(Clone, Debug)]
pub struct FactorSample {
    pub image: Tensor<f64>,
    pub factors: FactorSpec,
}

/// Draws `batch` samples; sample `i` uses a generator derived from `(seed, i)`,
/// so batches are reproducible and may be rendered concurrently.
pub fn sample_batch(seed: u64, batch: usize, resolution: usize) -> Result<Vec<FactorSample>> {
    par::map(batch, |i| {
        let mut rng = stream_rng(seed, i as u64, Stream::Data);
        let factors = FactorSpec::sample(&mut rng);
        render(&factors, resolution).map(|image| FactorSample { image, factors })
    })
    .into_iter()
    .collect()
}

/// In-memory dataset with 8-bit images, matching the on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub factors: Vec<FactorSpec>,
    /// Row-major, `resolution²` bytes per sample.
    pub pixels: Vec<u8>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, resolution: usize) -> Result<Self> {
        let samples = sample_batch(seed, count, resolution)?;
        let mut pixels = Vec::with_capacity(count * resolution * resolution);
        let mut factors = Vec::with_capacity(count);
        for s in samples {
            pixels.extend(s.image.data().iter().map(|&v| quantize(v)));
            factors.push(s.factors);
        }
        Ok(Dataset {
            resolution,
            factors,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.resolution * self.resolution;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Gathers `[indices.len(), 1, res, res]` images scaled to `[0, 1]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.resolution * self.resolution;
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| T::lit(b as f64) * scale));
        }
        Tensor::new(vec![indices.len(), 1, self.resolution, self.resolution], data).expect("batch shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.len() * (40 + self.resolution * self.resolution));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (i, f) in self.factors.iter().enumerate() {
            for v in f.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, "resolution")?;
        let resolution = u32::from_le_bytes(word) as usize;
        read_exact(&mut r, &mut word, "count")?;
        let count = u32::from_le_bytes(word) as usize;
        if resolution == 0 {
            return Err(Error::Format("zero resolution".into()));
        }
        let n = resolution * resolution;
        let mut factors = Vec::with_capacity(count);
        let mut pixels = vec![0u8; count * n];
        for i in 0..count {
            let mut vals = [0f64; FACTOR_COUNT];
            for v in vals.iter_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "factor")?;
                *v = f64::from_le_bytes(b);
            }
            factors.push(FactorSpec::from_array(vals)?);
            read_exact(&mut r, &mut pixels[i * n..(i + 1) * n], "image")?;
        }
        Ok(Dataset {
            resolution,
            factors,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(what.to_string()))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Tiles grayscale `[h, w]` images (values in `[0, 1]`) into a grid with a
/// one-pixel gap and encodes it as PNG.
pub fn grid_png(images: &[Vec<f64>], height: usize, width: usize, cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let rows = images.len().div_ceil(cols);
    let gw = cols * (width + 1) + 1;
    let gh = rows * (height + 1) + 1;
    let mut canvas = vec![64u8; gw * gh];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..height {
            for x in 0..width {
                let v = img[y * width + x];
                canvas[(r * (height + 1) + 1 + y) * gw + c * (width + 1) + 1 + x] = quantize(v);
            }
        }
    }
    let buf = image::GrayImage::from_raw(gw as u32, gh as u32, canvas)
        .ok_or_else(|| Error::Image("canvas size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

impl Dataset {
    /// 8×8 contact sheet of the first 64 samples.
    pub fn contact_sheet(&self) -> Result<Vec<u8>> {
        let n = self.len().min(64);
        let images: Vec<Vec<f64>> = (0..n)
            .map(|i| self.image(i).iter().map(|&b| b as f64 / 255.0).collect())
            .collect();
        grid_png(&images, self.resolution, self.resolution, 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, size: f64, rotation: f64) -> FactorSpec {
        FactorSpec {
            shape,
            size,
            rotation,
            pos_x: 0.5,
            pos_y: 0.5,
        }
    }

    fn centroid(img: &Tensor<f64>, res: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for (i, &v) in img.data().iter().enumerate() {
            let (y, x) = ((i / res) as f64 + 0.5, (i % res) as f64 + 0.5);
            sx += v * x;
            sy += v * y;
            m += v;
        }
        (sx / m / res as f64, sy / m / res as f64)
    }

    #[test]
    fn centered_square_centroid() {
        let img = render(&spec(Shape::Square, 0.5, 0.0), 32).unwrap();
        let (cx, cy) = centroid(&img, 32);
        assert!((cx - 0.5).abs() <= 1.0 / 32.0 && (cy - 0.5).abs() <= 1.0 / 32.0);
    }

    #[test]
    fn square_quarter_turn_is_identical() {
        let a = render(&spec(Shape::Square, 0.5, 0.0), 32).unwrap();
        let b = render(&spec(Shape::Square, 0.5, PI / 2.0), 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn square_at_zero_rotation_is_axis_aligned() {
        let img = render(&spec(Shape::Square, 0.9, 0.0), 32).unwrap();
        // every row intersecting the square has the same coverage profile
        let full: Vec<&[f64]> = img.data().chunks(32).filter(|r| r.iter().any(|&v| v == 1.0)).collect();
        assert!(full.len() >= 2);
        assert!(full.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ellipse_area_scales_quadratically() {
        let big: f64 = render(&spec(Shape::Ellipse, 0.6, 0.3), 32).unwrap().sum();
        let small: f64 = render(&spec(Shape::Ellipse, 0.3, 0.3), 32).unwrap().sum();
        let ratio = big / small;
        assert!((ratio - 4.0).abs() <= 0.15 * 4.0, "ratio {ratio}");
    }

    #[test]
    fn foreground_background_and_antialiased_edges() {
        let img = render(&spec(Shape::Triangle, 0.9, 1.0), 32).unwrap();
        let vals = img.data();
        assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(vals.contains(&1.0));
        assert!(vals.contains(&0.0));
        assert!(vals.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sprite_stays_inside_canvas_at_extremes() {
        for shape in [Shape::Square, Shape::Ellipse, Shape::Triangle] {
            for &(x, y) in &[(0.15, 0.15), (0.85, 0.85), (0.15, 0.85)] {
                for k in 0..8 {
                    let s = FactorSpec {
                        shape,
                        size: 0.9,
                        rotation: k as f64 * 0.7,
                        pos_x: x,
                        pos_y: y,
                    };
                    let img = render(&s, 64).unwrap();
                    let mass = img.sum();
                    // analytic area in pixels of the unclipped sprite
                    let r = 0.9 * RADIUS_PER_SIZE * 64.0;
                    let area = match shape {
                        Shape::Square => 2.0 * r * r,
                        Shape::Ellipse => PI * r * r / 2.0,
                        Shape::Triangle => 3.0 * 3f64.sqrt() / 4.0 * r * r,
                    };
                    assert!((mass - area).abs() / area < 0.05, "{shape:?} at ({x},{y}): {mass} vs {area}");
                }
            }
        }
    }

    #[test]
    fn out_of_range_factor_is_named() {
        let mut s = spec(Shape::Ellipse, 0.5, 0.0);
        s.pos_x = 0.9;
        let err = render(&s, 32).unwrap_err().to_string();
        assert!(err.contains("pos_x"), "{err}");
        let mut s = spec(Shape::Ellipse, 0.5, 0.0);
        s.size = 1.0;
        assert!(render(&s, 32).unwrap_err().to_string().contains("size"));
    }

    #[test]
    fn sample_batch_is_deterministic() {
        let a = sample_batch(7, 4, 16).unwrap();
        let b = sample_batch(7, 4, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.factors, y.factors);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn dataset_bytes_roundtrip() {
        let ds = Dataset::generate(3, 5, 16).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(ds, back);
        let mut bad = ds.to_bytes();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        let short = &ds.to_bytes()[..40];
        assert!(matches!(Dataset::from_bytes(short), Err(Error::Truncated(_))));
    }
}
