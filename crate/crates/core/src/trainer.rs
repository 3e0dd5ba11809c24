//! Rate-distortion training.
//!
//! The per-cube objective is `rate_scale·(R_y + R_z) + λ·D`, where the rates
//! are bits of the noisy latents under the entropy models and `D` is the
//! weighted binary cross-entropy of the reconstruction. Gradients are exact
//! and computed by hand through every stage.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{bits_with_grad, laplace_interval_mass, MASS_FLOOR};
use crate::preprocess::Cube;
use crate::tensor::{adam_step, concat_channels, split_channels, AdamConfig, AdamState, Grid4};
use crate::transforms::{
    occupancy_grid, scale_from_raw, scale_from_raw_grad, ModelParameters, NetConfig, LOG_SCALE_MAX, LOG_SCALE_MIN,
};
use crate::{Error, ModelF64, Result};

/// Normalization of the rate term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateUnit {
    /// Bits per cube. On small cubes this lets the rate term swamp the
    /// distortion at the start of training, and the latents collapse.
    Cube,
    /// Bits per occupied voxel of the cube.
    OccupiedVoxel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Weight of the empty-voxel term of the distortion.
    pub alpha: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub width: usize,
    pub net: NetConfig,
    pub rate_unit: RateUnit,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 16.0,
            alpha: 3.0,
            lr: 1e-5,
            batch: 8,
            steps: 2000,
            seed: 0,
            width: 16,
            net: NetConfig::tiny(),
            rate_unit: RateUnit::OccupiedVoxel,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("λ must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("α must be positive, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        self.net.validate()?;
        self.net.check_width(self.width)
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            rate_unit: self.rate_unit,
        }
    }
}

/// Weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub rate_unit: RateUnit,
}

/// One training cube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSample {
    pub width: usize,
    pub occupancy: Vec<u8>,
    pub occupied: usize,
}

impl TrainSample {
    pub fn new(width: usize, occupancy: Vec<u8>) -> Result<Self> {
        if occupancy.len() != width.pow(3) {
            return Err(Error::Shape(format!("{} voxels for width {width}", occupancy.len())));
        }
        let occupied = occupancy.iter().filter(|&&v| v != 0).count();
        if occupied == 0 {
            return Err(Error::Precondition("training cube has no occupied voxel".into()));
        }
        Ok(Self { width, occupancy, occupied })
    }

    pub fn to_cube(&self) -> Cube {
        Cube {
            grid_pos: [0; 3],
            width: self.width,
            k_occupied: self.occupied as u32,
            occupancy: self.occupancy.clone(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy in nats with its gradient in the logits.
/// The empty-voxel term is dropped when every voxel is occupied.
pub fn wbce_with_grad(logits: &[f64], occupancy: &[u8], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != occupancy.len() {
        return Err(Error::Shape(format!("{} logits for {} voxels", logits.len(), occupancy.len())));
    }
    let n_o = occupancy.iter().filter(|&&v| v != 0).count();
    let n_n = occupancy.len() - n_o;
    if n_o == 0 {
        return Err(Error::Precondition("distortion needs at least one occupied voxel".into()));
    }
    let (wo, wn) = (1.0 / n_o as f64, if n_n > 0 { alpha / n_n as f64 } else { 0.0 });
    let mut d = 0.0;
    let grad = logits
        .iter()
        .zip(occupancy)
        .map(|(&l, &o)| {
            if o != 0 {
                d += wo * softplus(-l);
                wo * (sigmoid(l) - 1.0)
            } else {
                d += wn * softplus(l);
                wn * sigmoid(l)
            }
        })
        .collect();
    Ok((d, grad))
}

pub fn wbce(logits: &[f64], occupancy: &[u8], alpha: f64) -> Result<f64> {
    Ok(wbce_with_grad(logits, occupancy, alpha)?.0)
}

/// Per-cube or batch-mean loss terms; rates in bits per cube.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub r_y: f64,
    pub r_z: f64,
    pub d: f64,
    pub j: f64,
}

impl LossComponents {
    fn add(&mut self, o: &Self) {
        self.r_y += o.r_y;
        self.r_z += o.r_z;
        self.d += o.d;
        self.j += o.j;
    }

    fn scaled(mut self, a: f64) -> Self {
        self.r_y *= a;
        self.r_z *= a;
        self.d *= a;
        self.j *= a;
        self
    }
}

/// Uniform noise standing in for rounding during training.
#[derive(Debug, Clone)]
pub struct SampleNoise {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl SampleNoise {
    pub fn draw(net: &NetConfig, width: usize, rng: &mut impl Rng) -> Self {
        let ny: usize = net.latent_shape(width).iter().product();
        let nz: usize = net.hyper_shape(width).iter().product();
        Self {
            y: (0..ny).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            z: (0..nz).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }
}

fn add_noise(g: &Grid4<f64>, noise: &[f64]) -> Result<Grid4<f64>> {
    if noise.len() != g.data().len() {
        return Err(Error::Shape(format!("{} noise values for a {:?} latent", noise.len(), g.shape())));
    }
    Grid4::from_vec(g.shape(), g.data().iter().zip(noise).map(|(a, b)| a + b).collect())
}

/// Loss of one cube and, when asked, its gradient for every parameter.
pub fn sample_loss(
    model: &ModelF64,
    sample: &TrainSample,
    noise: &SampleNoise,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(LossComponents, Option<Vec<Vec<f64>>>)> {
    let arch = model.arch();
    let net = model.config();
    let w = sample.width;
    let ladder = net.ladder(w);
    let rate_scale = match cfg.rate_unit {
        RateUnit::Cube => 1.0,
        RateUnit::OccupiedVoxel => 1.0 / sample.occupied as f64,
    };

    let x = occupancy_grid::<f64>(&sample.occupancy, w)?;
    let (y, cache_a) = arch.analysis.forward(model, &x, &ladder)?;
    let y_t = add_noise(&y, &noise.y)?;
    let (z, cache_ha) = arch.hyper_analysis.forward(model, &y, &ladder)?;
    let z_t = add_noise(&z, &noise.z)?;
    let (hs, cache_hs) = arch.hyper_synthesis.forward(model, &z_t, &ladder)?;
    let (mu, raw) = split_channels(&hs, net.latent_channels);
    let (logits, cache_s) = arch.synthesis.forward(model, &y_t, &ladder)?;

    let mut d_yt = vec![0.0; y_t.data().len()];
    let mut d_mu = vec![0.0; mu.data().len()];
    let mut d_raw = vec![0.0; raw.data().len()];
    let mut r_y = 0.0;
    for i in 0..y_t.data().len() {
        let r = raw.data()[i];
        let (bits, g) = bits_with_grad(y_t.data()[i], mu.data()[i], scale_from_raw(r));
        r_y += bits;
        d_yt[i] = rate_scale * g.d_value;
        d_mu[i] = rate_scale * g.d_mu;
        d_raw[i] = rate_scale * g.d_sigma * scale_from_raw_grad(r);
    }

    let z_vol = z_t.volume();
    let (loc, log_scale) = (model.tensor(arch.z_loc), model.tensor(arch.z_scale));
    let mut d_zt = vec![0.0; z_t.data().len()];
    let mut d_loc = vec![0.0; loc.len()];
    let mut d_log_scale = vec![0.0; log_scale.len()];
    let mut r_z = 0.0;
    for (i, &v) in z_t.data().iter().enumerate() {
        let c = i / z_vol;
        let (bits, g) = bits_with_grad(v, loc[c], scale_from_raw(log_scale[c]));
        r_z += bits;
        d_zt[i] = rate_scale * g.d_value;
        d_loc[c] += rate_scale * g.d_mu;
        d_log_scale[c] += rate_scale * g.d_sigma * scale_from_raw_grad(log_scale[c]);
    }

    let (d, d_logits) = wbce_with_grad(logits.data(), &sample.occupancy, cfg.alpha)?;
    let comps = LossComponents {
        r_y,
        r_z,
        d,
        j: rate_scale * (r_y + r_z) + cfg.lambda * d,
    };
    if !want_grads {
        return Ok((comps, None));
    }

    let mut grads = model.zero_grads();
    let up = Grid4::from_vec(logits.shape(), d_logits.iter().map(|g| g * cfg.lambda).collect())?;
    let from_synthesis = arch.synthesis.backward(model, &cache_s, up, &mut grads, true)?.expect("input grad");
    let mut g_yt = Grid4::from_vec(y_t.shape(), d_yt)?;
    g_yt.add_assign(&from_synthesis)?;

    let g_hs = concat_channels(&Grid4::from_vec(mu.shape(), d_mu)?, &Grid4::from_vec(raw.shape(), d_raw)?)?;
    let from_hs = arch.hyper_synthesis.backward(model, &cache_hs, g_hs, &mut grads, true)?.expect("input grad");
    let mut g_zt = Grid4::from_vec(z_t.shape(), d_zt)?;
    g_zt.add_assign(&from_hs)?;
    for (g, d) in grads[arch.z_loc].iter_mut().zip(d_loc) {
        *g += d;
    }
    for (g, d) in grads[arch.z_scale].iter_mut().zip(d_log_scale) {
        *g += d;
    }

    let from_z = arch.hyper_analysis.backward(model, &cache_ha, g_zt, &mut grads, true)?.expect("input grad");
    g_yt.add_assign(&from_z)?;
    arch.analysis.backward(model, &cache_a, g_yt, &mut grads, false)?;
    Ok((comps, Some(grads)))
}

/// Batch-mean loss and gradient. Noise is drawn sequentially from `rng`
/// before any work is spread over threads, and per-cube gradients are summed
/// in batch order, so the result does not depend on the thread count.
pub fn rd_loss(
    batch: &[TrainSample],
    model: &ModelF64,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(LossComponents, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let noise: Vec<SampleNoise> = batch
        .iter()
        .map(|s| SampleNoise::draw(model.config(), s.width, rng))
        .collect();
    let results = batch
        .par_iter()
        .zip(&noise)
        .map(|(s, n)| sample_loss(model, s, n, cfg, true))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = LossComponents::default();
    let mut grads = model.zero_grads();
    for (c, g) in results {
        total.add(&c);
        for (acc, g) in grads.iter_mut().zip(g.expect("requested")) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * inv;
            }
        }
    }
    Ok((total.scaled(inv), grads))
}

/// Mean loss over `samples` with noise from a fixed seed; no gradients.
pub fn evaluate_loss(model: &ModelF64, samples: &[TrainSample], cfg: &LossConfig, seed: u64) -> Result<LossComponents> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<SampleNoise> = samples
        .iter()
        .map(|s| SampleNoise::draw(model.config(), s.width, &mut rng))
        .collect();
    let parts = samples
        .par_iter()
        .zip(&noise)
        .map(|(s, n)| Ok(sample_loss(model, s, n, cfg, false)?.0))
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossComponents::default();
    parts.iter().for_each(|c| total.add(c));
    Ok(total.scaled(1.0 / samples.len() as f64))
}

/// One row of the loss curve: batch means at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: LossComponents,
}

pub fn loss_curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,R_y,R_z,D,J\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss.r_y, r.loss.r_z, r.loss.d, r.loss.j));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelF64,
    pub curve: Vec<CurveRow>,
    /// `(step, held-out loss)` at every evaluation.
    pub evals: Vec<(usize, LossComponents)>,
}

const EVAL_SEED: u64 = 0x5eed;

/// Adam on the rate-distortion objective, starting from `init` or from a
/// fresh initialization seeded by `cfg.seed`. Afterwards the factorized
/// latent model is refitted for coding without the hyperprior.
pub fn train(
    cfg: &TrainConfig,
    data: &[TrainSample],
    heldout: &[TrainSample],
    init: Option<&ModelF64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = match init {
        Some(m) if *m.config() != cfg.net => {
            return Err(Error::Config("initial checkpoint does not match the configured network".into()))
        }
        Some(m) => m.clone(),
        None => ModelParameters::init(&cfg.net, cfg.seed)?,
    };
    if let Some(s) = data.iter().chain(heldout).find(|s| s.width != cfg.width) {
        return Err(Error::Shape(format!("sample of width {} in a width-{} run", s.width, cfg.width)));
    }
    let mut outcome = TrainOutcome {
        model: model.clone(),
        curve: Vec::new(),
        evals: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(outcome);
    }
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let loss = cfg.loss();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.tensors.iter().map(Vec::len));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch = Vec::with_capacity(cfg.batch);
    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !heldout.is_empty() {
            outcome.evals.push((step, evaluate_loss(&model, heldout, &loss, EVAL_SEED)?));
        }
        batch.clear();
        batch.extend((0..cfg.batch).map(|_| data[rng.gen_range(0..data.len())].clone()));
        let (comps, grads) = rd_loss(&batch, &model, &loss, &mut rng)?;
        if !comps.j.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {}", comps.j),
            });
        }
        outcome.curve.push(CurveRow { step, loss: comps });
        adam_step(&mut model.tensors, &grads, &mut state, adam).map_err(|e| Error::Diverged {
            step,
            what: e.to_string(),
        })?;
        if !model.all_finite() {
            return Err(Error::Diverged {
                step,
                what: "non-finite parameters".into(),
            });
        }
    }
    if cfg.eval_every > 0 && !heldout.is_empty() {
        outcome.evals.push((cfg.steps, evaluate_loss(&model, heldout, &loss, EVAL_SEED)?));
    }
    fit_factorized_latents(&mut model, data)?;
    outcome.model = model;
    Ok(outcome)
}

fn discrete_bits(values: &[f64], loc: f64, sigma: f64) -> f64 {
    values
        .iter()
        .map(|&v| -laplace_interval_mass(v, loc, sigma).mass.max(MASS_FLOOR).log2())
        .sum()
}

/// Sets each latent channel's factorized Laplace to the median of its
/// rounded values and the scale minimizing their total bits.
pub fn fit_factorized_latents(model: &mut ModelF64, data: &[TrainSample]) -> Result<()> {
    let cy = model.config().latent_channels;
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); cy];
    let latents = data
        .par_iter()
        .map(|s| model.analysis(&occupancy_grid(&s.occupancy, s.width)?))
        .collect::<Result<Vec<_>>>()?;
    for y in &latents {
        for (c, vals) in per_channel.iter_mut().enumerate() {
            vals.extend(y.channel(c).iter().map(|v| v.round()));
        }
    }
    let arch = model.arch().clone();
    for (c, mut vals) in per_channel.into_iter().enumerate() {
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        let loc = vals[vals.len() / 2];
        // Golden-section search; total bits are unimodal in the log-scale.
        let f = |ls: f64| discrete_bits(&vals, loc, ls.exp());
        let (mut a, mut b) = (LOG_SCALE_MIN, LOG_SCALE_MAX);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let (c1, c2) = (b - g * (b - a), a + g * (b - a));
            if f(c1) <= f(c2) {
                b = c2;
            } else {
                a = c1;
            }
        }
        model.tensors[arch.y_loc][c] = loc;
        model.tensors[arch.y_scale][c] = 0.5 * (a + b);
    }
    Ok(())
}

/// Primitive shapes of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
    /// `(|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1) = 1`.
    Superquadric { axes: [f64; 3], e1: f64, e2: f64 },
}

impl Shape {
    /// Signed distance in the shape's frame; exact except for superquadrics,
    /// where it is the first-order estimate `F / |∇F|`.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { radius } => (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius,
            Shape::Box { half } => {
                let q: Vec<f64> = (0..3).map(|i| p[i].abs() - half[i]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dr = (p[0] * p[0] + p[1] * p[1]).sqrt() - radius;
                let dz = p[2].abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
            Shape::Superquadric { .. } => {
                let f = |q: [f64; 3]| self.superquadric_level(q);
                let h = 1e-4;
                let mut grad = [0.0; 3];
                for i in 0..3 {
                    let (mut a, mut b) = (p, p);
                    a[i] += h;
                    b[i] -= h;
                    grad[i] = (f(a) - f(b)) / (2.0 * h);
                }
                let n = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
                if n < 1e-12 {
                    f64::INFINITY
                } else {
                    f(p) / n
                }
            }
        }
    }

    // Degree-one homogeneous level function: zero on the surface, scales
    // like a distance.
    fn superquadric_level(&self, p: [f64; 3]) -> f64 {
        let Shape::Superquadric { axes, e1, e2 } = *self else {
            unreachable!()
        };
        let xy = (p[0] / axes[0]).abs().powf(2.0 / e2) + (p[1] / axes[1]).abs().powf(2.0 / e2);
        let f = xy.powf(e2 / e1) + (p[2] / axes[2]).abs().powf(2.0 / e1);
        let scale = axes[0].min(axes[1]).min(axes[2]);
        (f.powf(e1 / 2.0) - 1.0) * scale
    }
}

/// A shape placed in a cube: voxel centers `v` map to the shape frame by
/// `R·(v − center)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placed {
    pub shape: Shape,
    pub center: [f64; 3],
    pub rotation: Rotation3<f64>,
}

/// Voxels whose centers lie within half a voxel of any surface.
pub fn rasterize_shell(shapes: &[Placed], width: usize) -> Vec<u8> {
    let mut occ = vec![0u8; width.pow(3)];
    for i in 0..width {
        for j in 0..width {
            for k in 0..width {
                let v = Vector3::new(i as f64, j as f64, k as f64);
                let hit = shapes.iter().any(|s| {
                    let q = s.rotation * (v - Vector3::from(s.center));
                    s.shape.distance([q.x, q.y, q.z]).abs() <= 0.5
                });
                if hit {
                    occ[(i * width + j) * width + k] = 1;
                }
            }
        }
    }
    occ
}

fn random_shape(rng: &mut ChaCha8Rng, width: usize) -> Placed {
    let w = width as f64;
    let size = |rng: &mut ChaCha8Rng| rng.gen_range(w / 8.0..w / 2.5);
    let shape = match rng.gen_range(0..4) {
        0 => Shape::Sphere { radius: size(rng) },
        1 => Shape::Box {
            half: [size(rng), size(rng), size(rng)],
        },
        2 => Shape::Cylinder {
            radius: size(rng),
            half_height: size(rng),
        },
        _ => Shape::Superquadric {
            axes: [size(rng), size(rng), size(rng)],
            e1: rng.gen_range(0.3..1.5),
            e2: rng.gen_range(0.3..1.5),
        },
    };
    let center = [0; 3].map(|_| rng.gen_range(0.2 * w..0.8 * w));
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rotation = if axis.norm() > 1e-6 {
        Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen_range(0.0..std::f64::consts::TAU))
    } else {
        Rotation3::identity()
    };
    Placed { shape, center, rotation }
}

/// Occupancy shells of one or two random primitives per cube. Deterministic
/// in `seed`; every sample has at least one occupied voxel.
pub fn gen_synthetic_dataset(seed: u64, count: usize, width: usize) -> Result<Vec<TrainSample>> {
    if width < 4 {
        return Err(Error::Config(format!("cube width {width} is too small for synthetic shapes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = if rng.gen_bool(0.3) { 2 } else { 1 };
        let shapes: Vec<Placed> = (0..n).map(|_| random_shape(&mut rng, width)).collect();
        let occ = rasterize_shell(&shapes, width);
        if let Ok(s) = TrainSample::new(width, occ) {
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wbce_hand_values() {
        let occ = [1, 1, 1, 1, 0, 0, 0, 0];
        let d = wbce(&[0.0; 8], &occ, 3.0).unwrap();
        assert!((d - 2.772589).abs() < 1e-6);
        let d = wbce(&[50.0, 50.0, -50.0, -50.0], &[1, 1, 0, 0], 3.0).unwrap();
        assert!(d < 1e-20);
        // p = 1/e  ⇔  logit = −ln(e − 1).
        let l = -(std::f64::consts::E - 1.0).ln();
        assert!((wbce(&[l], &[1], 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(wbce(&[0.0], &[0], 3.0).is_err());
    }

    #[test]
    fn wbce_alpha_properties() {
        let logits = [0.3, -1.2, 2.0, 0.1, -0.4];
        let occ = [1, 0, 1, 0, 0];
        let occ_term = (softplus(-0.3) + softplus(-2.0)) / 2.0;
        let null_term = (softplus(-1.2) + softplus(0.1) + softplus(-0.4)) / 3.0;
        assert!((wbce(&logits, &occ, 1.0).unwrap() - (occ_term + null_term)).abs() < 1e-12);
        let mut prev = 0.0;
        for a in [0.5, 1.0, 2.0, 3.0, 8.0] {
            let d = wbce(&logits, &occ, a).unwrap();
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn wbce_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.1, -0.4, 5.0];
        let occ = [1, 0, 1, 0, 0, 1];
        let (_, g) = wbce_with_grad(&logits, &occ, 3.0).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (wbce(&a, &occ, 3.0).unwrap() - wbce(&b, &occ, 3.0).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[i]);
        }
    }

    fn micro_net() -> NetConfig {
        NetConfig {
            channels: vec![4, 4],
            latent_channels: 2,
            hyper_channels: 2,
            vrn_per_stage: 1,
        }
    }

    #[test]
    fn rd_loss_gradient_matches_finite_differences() {
        let net = micro_net();
        let mut model = ModelF64::init(&net, 3).unwrap();
        // Random biases keep ReLU inputs off the kink on empty regions.
        let arch = model.arch().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (spec, t) in arch.params.iter().zip(model.tensors.iter_mut()) {
            if spec.name.ends_with(".bias") {
                t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        model.tensors[arch.z_loc] = vec![0.2, -0.3];
        model.tensors[arch.z_scale] = vec![0.4, -0.2];
        let batch = gen_synthetic_dataset(5, 2, 4).unwrap();
        for unit in [RateUnit::Cube, RateUnit::OccupiedVoxel] {
            let cfg = LossConfig {
                lambda: 2.5,
                alpha: 3.0,
                rate_unit: unit,
            };
            let (_, grads) = rd_loss(&batch, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for t in 0..model.tensors.len() {
                for i in 0..model.tensors[t].len() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.tensors[t][i] += delta;
                        rd_loss(&batch, &m, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0.j
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = grads[t][i];
                    worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
                }
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn zero_lambda_ignores_distortion() {
        let net = micro_net();
        let model = ModelF64::init(&net, 4).unwrap();
        let batch = gen_synthetic_dataset(6, 2, 4).unwrap();
        let cfg = LossConfig {
            lambda: 0.0,
            alpha: 3.0,
            rate_unit: RateUnit::Cube,
        };
        let (c, g) = rd_loss(&batch, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((c.j - (c.r_y + c.r_z)).abs() < 1e-9);
        let out = model.arch().params.iter().position(|p| p.name == "synthesis.out.weight").unwrap();
        assert!(g[out].iter().all(|&v| v == 0.0));
        let c2 = rd_loss(&batch, &model, &LossConfig { lambda: 2.0, ..cfg }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        let c4 = rd_loss(&batch, &model, &LossConfig { lambda: 4.0, ..cfg }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        assert!((c4.j - c2.j - 2.0 * c2.d).abs() < 1e-9);
    }

    #[test]
    fn sphere_shell_matches_surface_area() {
        for (w, r) in [(16, 4.0), (16, 5.0), (16, 6.0), (32, 9.0), (32, 11.5), (32, 14.0)] {
            let placed = Placed {
                shape: Shape::Sphere { radius: r },
                center: [(w - 1) as f64 / 2.0; 3],
                rotation: Rotation3::identity(),
            };
            let n = rasterize_shell(&[placed], w).iter().filter(|&&v| v == 1).count() as f64;
            let area = 4.0 * std::f64::consts::PI * r * r;
            assert!((n - area).abs() <= 0.1 * area, "r={r}: {n} vs {area}");
        }
    }

    #[test]
    fn dataset_is_deterministic_and_non_empty() {
        let a = gen_synthetic_dataset(42, 30, 16).unwrap();
        assert_eq!(a, gen_synthetic_dataset(42, 30, 16).unwrap());
        assert_ne!(a, gen_synthetic_dataset(43, 30, 16).unwrap());
        assert!(a.iter().all(|s| s.occupied >= 1 && s.occupancy.len() == 4096));
    }

    #[test]
    fn zero_steps_returns_init() {
        let init = ModelF64::init(&NetConfig::tiny(), 1).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &[], &[], Some(&init)).unwrap();
        assert_eq!(out.model.tensors, init.tensors);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let net = micro_net();
        let data = gen_synthetic_dataset(1, 6, 8).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch: 2,
            lr: 1e-3,
            width: 8,
            net,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &data, &[], None).unwrap();
        let b = train(&cfg, &data, &[], None).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.curve.len(), 5);
        assert!(loss_curve_csv(&a.curve).starts_with("step,R_y,R_z,D,J\n0,"));
    }

    #[test]
    fn config_roundtrips_through_json_shape() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig { alpha: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { width: 10, ..cfg }.validate().is_err());
    }
}
