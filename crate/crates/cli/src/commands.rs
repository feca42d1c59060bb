use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use orojar_core::data::{grid_png, Dataset};
use orojar_core::discovery::discover;
use orojar_core::metrics::evaluate;
use orojar_core::models::{Checkpoint, Generator, GeneratorConfig};
use orojar_core::rng::{stream_rng, Stream};
use orojar_core::sefa::{sefa_directions, traverse_direction, verify_proposition};
use orojar_core::tensor::Tensor;
use orojar_core::training::{sample_latents, train, GanState, TrainRecord};
use serde::Serialize;

use crate::artifacts::{require_file, RunDir};
use crate::config::ExperimentConfig;
use crate::failure::Failure;

type F = f32;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub config_file: Option<PathBuf>,
}

impl Context {
    fn dataset_path(&self) -> PathBuf {
        if self.cfg.dataset.is_empty() {
            self.root.join("make-data").join("dataset.dfac")
        } else {
            PathBuf::from(&self.cfg.dataset)
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        if self.cfg.checkpoint.is_empty() {
            self.root.join("train").join("checkpoint.dgan")
        } else {
            PathBuf::from(&self.cfg.checkpoint)
        }
    }

    fn run_dir(&self, command: &str) -> Result<RunDir, Failure> {
        let mut dir = RunDir::create(&self.root, command)?;
        if let Some(p) = &self.config_file {
            dir.input(p)?;
        }
        Ok(dir)
    }

    /// The generator stored in the configured checkpoint.
    fn load_generator(&self) -> Result<(Generator<F>, PathBuf), Failure> {
        let path = self.checkpoint_path();
        require_file(&path, "checkpoint")?;
        let ckpt = Checkpoint::<F>::load(&path)?;
        let arch = GeneratorConfig::infer(&ckpt, self.cfg.model.tap_count)?;
        let mut g = Generator::new(arch, 0)?;
        g.first_layer = self.cfg.train.first_layer_mode;
        g.tap_point = self.cfg.train.tap_point;
        g.import(&ckpt)?;
        Ok((g, path))
    }

    /// Base latents for traversals, fixed by the seed.
    fn base_latents(&self, m: usize) -> Vec<Vec<F>> {
        let mut rng = stream_rng(self.cfg.seed, 5 << 32, Stream::Eval);
        let z: Tensor<F> = sample_latents(&mut rng, self.cfg.traverse.samples.max(1), m);
        (0..z.shape()[0]).map(|r| z.row(r).to_vec()).collect()
    }
}

fn frames_to_images(frames: &[Tensor<F>]) -> Vec<Vec<f64>> {
    frames.iter().map(|f| f.data().iter().map(|&v| v as f64).collect()).collect()
}

/// Rows are latent dimensions, columns set `z_i` to evenly spaced values.
fn dimension_grid(g: &Generator<F>, z: &[F], cfg: &ExperimentConfig) -> Result<Vec<u8>, Failure> {
    let m = z.len();
    let t = &cfg.traverse;
    let mut images = Vec::with_capacity(m * t.steps);
    for i in 0..m {
        let mut base = z.to_vec();
        base[i] = 0.0;
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        images.extend(frames_to_images(&traverse_direction(g, &base, &e, t.lo, t.hi, t.steps)?));
    }
    let res = g.config.resolution;
    Ok(grid_png(&images, res, res, t.steps)?)
}

/// One strip row per base latent, moving along `direction`.
fn direction_strip(g: &Generator<F>, latents: &[Vec<F>], direction: &[f64], cfg: &ExperimentConfig) -> Result<Vec<u8>, Failure> {
    let t = &cfg.traverse;
    let mut images = Vec::new();
    for z in latents {
        images.extend(frames_to_images(&traverse_direction(g, z, direction, t.lo, t.hi, t.steps)?));
    }
    let res = g.config.resolution;
    Ok(grid_png(&images, res, res, t.steps)?)
}

fn check_traverse(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let t = &cfg.traverse;
    if t.steps < 2 || !(t.lo < t.hi) {
        return Err(Failure::Config(format!(
            "traverse needs steps ≥ 2 and lo < hi (got steps={}, lo={}, hi={})",
            t.steps, t.lo, t.hi
        )));
    }
    Ok(())
}

/// Columns are directions; one row per latent coordinate.
fn directions_csv(header: &[String], columns: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    let m = columns.first().map_or(0, Vec::len);
    for r in 0..m {
        let row: Vec<String> = columns.iter().map(|c| c[r].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn make_data(ctx: &Context) -> Result<PathBuf, Failure> {
    let mut dir = ctx.run_dir("make-data")?;
    let d = &ctx.cfg.data;
    let ds = Dataset::generate(ctx.cfg.seed, d.count, d.resolution)?;
    dir.write("dataset.dfac", &ds.to_bytes())?;
    dir.write("contact_sheet.png", &ds.contact_sheet()?)?;
    dir.finish(&ctx.cfg)
}

fn log_text(header: &str, rows: &[String]) -> String {
    let mut s = String::with_capacity(header.len() + rows.len() * 64);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn train_cmd(ctx: &Context, resume: bool) -> Result<PathBuf, Failure> {
    let cfg = &ctx.cfg;
    cfg.train.validate(&cfg.penalty, cfg.model.tap_count)?;
    check_traverse(cfg)?;
    let data_path = ctx.dataset_path();
    require_file(&data_path, "dataset")?;
    let mut dir = ctx.run_dir("train")?;
    dir.input(&data_path)?;
    let ds = Dataset::load(&data_path)?;
    if ds.resolution != cfg.data.resolution {
        return Err(Failure::Config(format!(
            "dataset resolution {} differs from data.resolution {}",
            ds.resolution, cfg.data.resolution
        )));
    }
    let header = TrainRecord::csv_header(&cfg.penalty.layers);
    let mut rows: Vec<String> = Vec::new();
    let mut state = if resume {
        let path = dir.path.join("checkpoint.dgan");
        require_file(&path, "checkpoint to resume from")?;
        dir.input(&path)?;
        let ckpt = Checkpoint::<F>::load(&path)?;
        let state = GanState::restore(&ckpt, cfg.generator(), cfg.discriminator(), &cfg.train)?;
        if state.seed != cfg.seed {
            return Err(Failure::Config(format!(
                "checkpoint was trained with seed {}, config has seed {}",
                state.seed, cfg.seed
            )));
        }
        if let Ok(text) = std::fs::read_to_string(dir.path.join("train_log.csv")) {
            rows = text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_some_and(|i| i <= state.step))
                .map(str::to_string)
                .collect();
        }
        state
    } else {
        GanState::<F, _>::init(cfg.generator(), cfg.discriminator(), &cfg.train)?
    };
    let grid_z = ctx.base_latents(cfg.model.latent_dim)[0].clone();
    let (eval_every, ckpt_every) = (cfg.train.eval_every as u64, cfg.train.checkpoint_every as u64);
    let mut hook = |s: &GanState<F, Generator<F>>, rec: &TrainRecord| -> orojar_core::Result<()> {
        rows.push(rec.csv_row());
        let at = |every: u64| every > 0 && rec.iter.is_multiple_of(every);
        let io = |f: Failure| orojar_core::Error::Io(std::io::Error::other(f.to_string()));
        if at(eval_every) {
            eprintln!(
                "iter {} d_loss {:.4} g_adv_loss {:.4} penalty {:.4}",
                rec.iter, rec.d_loss, rec.g_adv_loss, rec.penalty
            );
            let png = dimension_grid(&s.g, &grid_z, cfg).map_err(io)?;
            dir.write(&format!("grids/step_{}.png", rec.iter), &png).map_err(io)?;
            dir.write("train_log.csv", log_text(&header, &rows).as_bytes()).map_err(io)?;
        }
        if at(ckpt_every) {
            let bytes = s.checkpoint().to_bytes();
            dir.write(&format!("checkpoints/step_{}.dgan", rec.iter), &bytes).map_err(io)?;
            dir.write("checkpoint.dgan", &bytes).map_err(io)?;
            dir.write("train_log.csv", log_text(&header, &rows).as_bytes()).map_err(io)?;
        }
        Ok(())
    };
    train(&mut state, &ds, &cfg.train, &cfg.penalty, &mut hook)?;
    dir.write("checkpoint.dgan", &state.checkpoint().to_bytes())?;
    dir.write("train_log.csv", log_text(&header, &rows).as_bytes())?;
    let mut rng = stream_rng(cfg.seed, 6 << 32, Stream::Eval);
    let z: Tensor<F> = sample_latents(&mut rng, 64, cfg.model.latent_dim);
    let x = state.g.generate(&z)?;
    let res = cfg.data.resolution;
    let images: Vec<Vec<f64>> = (0..64).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
    dir.write("samples.png", &grid_png(&images, res, res, 8)?)?;
    dir.write("traversal.png", &dimension_grid(&state.g, &grid_z, cfg)?)?;
    dir.finish(cfg)
}

#[derive(Serialize)]
struct SefaReport {
    singular_values: Vec<f64>,
    degenerate: Vec<usize>,
    reconstruction_error: f64,
    equivalence_error: f64,
    max_offdiag: f64,
    max_offdiag_relative: f64,
}

pub fn sefa_cmd(ctx: &Context) -> Result<PathBuf, Failure> {
    check_traverse(&ctx.cfg)?;
    let (g, ckpt) = ctx.load_generator()?;
    let mut dir = ctx.run_dir("sefa")?;
    dir.input(&ckpt)?;
    let f = sefa_directions(&g)?;
    for &i in &f.degenerate {
        eprintln!(
            "warning: direction {i} has singular value {:e} and is degenerate",
            f.singular_values[i]
        );
    }
    let w: Tensor<f64> = g.first_layer_weight().cast();
    let m = f.latent_dim();
    let mut rng = stream_rng(ctx.cfg.seed, 7 << 32, Stream::Eval);
    let z: Tensor<f64> = sample_latents(&mut rng, 256, m);
    let prop = verify_proposition(&w, &f, &z)?;
    let columns: Vec<Vec<f64>> = (0..m).map(|i| f.direction(i)).collect();
    let header: Vec<String> = f.singular_values.iter().map(|s| s.to_string()).collect();
    dir.write("directions.csv", directions_csv(&header, &columns).as_bytes())?;
    let report = SefaReport {
        singular_values: f.singular_values.clone(),
        degenerate: f.degenerate.clone(),
        reconstruction_error: f.reconstruction_error(&w),
        equivalence_error: prop.equivalence_error,
        max_offdiag: prop.max_offdiag,
        max_offdiag_relative: prop.max_offdiag_relative,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    dir.write("report.json", json.as_bytes())?;
    let latents = ctx.base_latents(m);
    for (i, d) in columns.iter().enumerate() {
        if f.degenerate.contains(&i) {
            continue;
        }
        dir.write(&format!("direction_{i}.png"), &direction_strip(&g, &latents, d, &ctx.cfg)?)?;
    }
    dir.finish(&ctx.cfg)
}

pub fn discover_cmd(ctx: &Context) -> Result<PathBuf, Failure> {
    check_traverse(&ctx.cfg)?;
    let (g, ckpt) = ctx.load_generator()?;
    let mut dir = ctx.run_dir("discover")?;
    dir.input(&ckpt)?;
    let (a, log) = discover(&g, &ctx.cfg.penalty, &ctx.cfg.discovery)?;
    let columns: Vec<Vec<f64>> = (0..a.directions())
        .map(|i| a.column(i).iter().map(|&v| v as f64).collect())
        .collect();
    let header: Vec<String> = (0..columns.len()).map(|i| format!("direction_{i}")).collect();
    dir.write("directions.csv", directions_csv(&header, &columns).as_bytes())?;
    let mut csv = String::from("iter,penalty,orthogonality_error\n");
    for (i, (p, e)) in log.penalty.iter().zip(&log.orthogonality_error).enumerate() {
        let _ = writeln!(csv, "{},{p},{e}", i + 1);
    }
    dir.write("discovery_log.csv", csv.as_bytes())?;
    let latents = ctx.base_latents(a.latent_dim());
    for (i, d) in columns.iter().enumerate() {
        dir.write(&format!("direction_{i}.png"), &direction_strip(&g, &latents, d, &ctx.cfg)?)?;
    }
    dir.finish(&ctx.cfg)
}

pub fn eval_cmd(ctx: &Context) -> Result<PathBuf, Failure> {
    let (g, ckpt) = ctx.load_generator()?;
    let mut dir = ctx.run_dir("eval")?;
    dir.input(&ckpt)?;
    let report = evaluate(&g, &ctx.cfg.metrics)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    dir.write("metrics.json", json.as_bytes())?;
    dir.write("metrics.csv", report.to_csv().as_bytes())?;
    dir.write("activeness.csv", report.activeness_csv().as_bytes())?;
    dir.finish(&ctx.cfg)
}

pub fn traverse_cmd(ctx: &Context) -> Result<PathBuf, Failure> {
    check_traverse(&ctx.cfg)?;
    let (g, ckpt) = ctx.load_generator()?;
    let mut dir = ctx.run_dir("traverse")?;
    dir.input(&ckpt)?;
    for (k, z) in ctx.base_latents(g.config.latent_dim).iter().enumerate() {
        dir.write(&format!("traverse_{k}.png"), &dimension_grid(&g, z, &ctx.cfg)?)?;
    }
    dir.finish(&ctx.cfg)
}

pub fn describe(path: &Path) -> String {
    format!("wrote {}", path.display())
}
