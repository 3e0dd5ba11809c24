//! Analysis/synthesis transforms built from Voxception-ResNet blocks, the
//! hyper transforms, and the parameter store they read from.
//!
//! Every transform is a [`Chain`] of layers. A chain forward pass keeps what
//! its backward pass needs, so the trainer can differentiate through any
//! combination of transforms without a general autodiff graph.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::FactorizedParams;
use crate::tensor::{
    self, concat_channels, conv3d, conv3d_backward, deconv3d, deconv3d_backward, relu,
    relu_backward, split_channels, ConvSpec, Grid4, LayerGradients,
};
use crate::{Error, Result, Scalar};

/// Clamp range of the log-scale parametrization, `σ = exp(clamp(raw))`.
pub const LOG_SCALE_MIN: f64 = -4.605_170_185_988_091; // ln 1e-2
pub const LOG_SCALE_MAX: f64 = 4.158_883_083_359_672; // ln 64

/// Network shape: stage widths, latent and hyper channels, VRNs per stage.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Channel count of each down/upscaling stage, finest first.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub vrn_per_stage: usize,
}

impl NetConfig {
    /// Smallest profile; what the acceptance training run uses.
    pub fn tiny() -> Self {
        Self {
            channels: vec![4, 8],
            latent_channels: 8,
            hyper_channels: 4,
            vrn_per_stage: 1,
        }
    }

    /// Desk-scale profile at W=16.
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64],
            latent_channels: 16,
            hyper_channels: 8,
            vrn_per_stage: 3,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// 1 = tiny, 2 = desk, 0 = custom.
    pub fn profile_id(&self) -> u8 {
        if *self == Self::tiny() {
            1
        } else if *self == Self::desk() {
            2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() > 8 {
            return Err(Error::Config("between 1 and 8 stages required".into()));
        }
        if self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("latent and hyper channels must be ≥ 1".into()));
        }
        if self.channels.iter().chain([&self.latent_channels, &self.hyper_channels]).any(|&c| c > u16::MAX as usize) {
            return Err(Error::Config("channel counts must fit 16 bits".into()));
        }
        if self.vrn_per_stage > 0 {
            if let Some(c) = self.channels.iter().find(|&&c| c % 2 != 0 || c < 4) {
                return Err(Error::Config(format!(
                    "VRN stages need an even channel count ≥ 4, got {c}"
                )));
            }
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("zero-width stage".into()));
        }
        Ok(())
    }

    /// Checks that a cube width is compatible with the downscaling chain.
    pub fn check_width(&self, width: usize) -> Result<()> {
        let f = 1usize << self.stages();
        if width == 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "cube width {width} is not divisible by {f} ({} stages)",
                self.stages()
            )));
        }
        Ok(())
    }

    /// Spatial size at every level: `ceil(W / 2^i)` for `i = 0..=stages+2`.
    /// Levels past `stages` are the hyperprior resolutions.
    pub fn ladder(&self, width: usize) -> Vec<[usize; 3]> {
        let mut n = width;
        let mut out = vec![[n; 3]];
        for _ in 0..self.stages() + 2 {
            n = n.div_ceil(2);
            out.push([n; 3]);
        }
        out
    }

    pub fn latent_shape(&self, width: usize) -> [usize; 4] {
        let n = self.ladder(width)[self.stages()][0];
        [self.latent_channels, n, n, n]
    }

    pub fn hyper_shape(&self, width: usize) -> [usize; 4] {
        let n = self.ladder(width)[self.stages() + 2][0];
        [self.hyper_channels, n, n, n]
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    cout: usize,
    spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
struct DeconvLayer {
    w: usize,
    b: usize,
    cout: usize,
    /// Index into the size ladder for the output.
    level: usize,
}

#[derive(Debug, Clone, Copy)]
struct VrnLayer {
    a1: ConvLayer,
    a2: ConvLayer,
    b1: ConvLayer,
    b2: ConvLayer,
    b3: ConvLayer,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv(ConvLayer),
    Deconv(DeconvLayer),
    Relu,
    Vrn(VrnLayer),
}

/// A sequential stack of layers.
#[derive(Debug, Clone)]
pub struct Chain {
    ops: Vec<Op>,
}

/// Parameter tensor declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// He-uniform fan-in; `None` for biases and entropy parameters.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer graph derived deterministically from a [`NetConfig`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub params: Vec<ParamSpec>,
    pub analysis: Chain,
    pub synthesis: Chain,
    pub hyper_analysis: Chain,
    pub hyper_synthesis: Chain,
    /// Factorized Laplace location/raw-scale for the hyperprior channels.
    pub z_loc: usize,
    pub z_scale: usize,
    /// Factorized Laplace location/raw-scale for latent channels, used only
    /// when coding without the hyperprior.
    pub y_loc: usize,
    pub y_scale: usize,
}

struct Builder {
    params: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>) -> usize {
        self.params.push(ParamSpec { name, shape, fan_in });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvLayer {
        let spec = ConvSpec::new(kernel, stride);
        let w = self.push(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel, kernel],
            Some(cin * spec.taps()),
        );
        let b = self.push(format!("{name}.bias"), vec![cout], None);
        ConvLayer { w, b, cout, spec }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, level: usize) -> DeconvLayer {
        let w = self.push(format!("{name}.weight"), vec![cin, cout, 3, 3, 3], Some(cin * 27));
        let b = self.push(format!("{name}.bias"), vec![cout], None);
        DeconvLayer { w, b, cout, level }
    }

    fn vrn(&mut self, name: &str, c: usize) -> VrnLayer {
        let (h, q) = (c / 2, c / 4);
        VrnLayer {
            a1: self.conv(&format!("{name}.a1"), c, h, 3, 1),
            a2: self.conv(&format!("{name}.a2"), h, h, 3, 1),
            b1: self.conv(&format!("{name}.b1"), c, h, 1, 1),
            b2: self.conv(&format!("{name}.b2"), h, q, 3, 1),
            b3: self.conv(&format!("{name}.b3"), q, h, 1, 1),
        }
    }
}

impl Architecture {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: Vec::new() };
        let stages = cfg.stages();

        let mut ops = Vec::new();
        let mut cin = 1;
        for (s, &c) in cfg.channels.iter().enumerate() {
            ops.push(Op::Conv(b.conv(&format!("analysis.down{s}"), cin, c, 3, 2)));
            ops.push(Op::Relu);
            for v in 0..cfg.vrn_per_stage {
                ops.push(Op::Vrn(b.vrn(&format!("analysis.vrn{s}.{v}"), c)));
            }
            cin = c;
        }
        ops.push(Op::Conv(b.conv("analysis.out", cin, cfg.latent_channels, 1, 1)));
        let analysis = Chain { ops };

        let mut ops = Vec::new();
        let mut cin = cfg.latent_channels;
        for s in (0..stages).rev() {
            let c = cfg.channels[s];
            ops.push(Op::Deconv(b.deconv(&format!("synthesis.up{s}"), cin, c, s)));
            ops.push(Op::Relu);
            for v in 0..cfg.vrn_per_stage {
                ops.push(Op::Vrn(b.vrn(&format!("synthesis.vrn{s}.{v}"), c)));
            }
            cin = c;
        }
        ops.push(Op::Conv(b.conv("synthesis.out", cin, 1, 1, 1)));
        let synthesis = Chain { ops };

        let (cy, cz) = (cfg.latent_channels, cfg.hyper_channels);
        let hyper_analysis = Chain {
            ops: vec![
                Op::Conv(b.conv("hyper_analysis.0", cy, cz, 3, 1)),
                Op::Relu,
                Op::Conv(b.conv("hyper_analysis.1", cz, cz, 3, 2)),
                Op::Relu,
                Op::Conv(b.conv("hyper_analysis.2", cz, cz, 3, 2)),
            ],
        };
        let hyper_synthesis = Chain {
            ops: vec![
                Op::Deconv(b.deconv("hyper_synthesis.0", cz, cz, stages + 1)),
                Op::Relu,
                Op::Deconv(b.deconv("hyper_synthesis.1", cz, cz, stages)),
                Op::Relu,
                Op::Conv(b.conv("hyper_synthesis.2", cz, 2 * cy, 3, 1)),
            ],
        };

        let z_loc = b.push("entropy.z.loc".into(), vec![cz], None);
        let z_scale = b.push("entropy.z.log_scale".into(), vec![cz], None);
        let y_loc = b.push("entropy.y.loc".into(), vec![cy], None);
        let y_scale = b.push("entropy.y.log_scale".into(), vec![cy], None);

        Ok(Self {
            params: b.params,
            analysis,
            synthesis,
            hyper_analysis,
            hyper_synthesis,
            z_loc,
            z_scale,
            y_loc,
            y_scale,
        })
    }
}

/// Every learnable array of the codec, in [`Architecture::params`] order.
#[derive(Debug, Clone)]
pub struct ModelParameters<T> {
    config: NetConfig,
    arch: Architecture,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let tensors = arch.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Ok(Self {
            config: config.clone(),
            arch,
            tensors,
        })
    }

    /// He-uniform weights from a seeded generator, zero biases, unit-scale
    /// entropy models.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, t) in m.arch.params.iter().zip(m.tensors.iter_mut()) {
            if let Some(fan_in) = spec.fan_in {
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in t.iter_mut() {
                    *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
                }
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensor(&self, slot: usize) -> &[T] {
        &self.tensors[slot]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect())
                .collect(),
        }
    }

    /// Factorized model of the hyperprior channels.
    pub fn factorized_z(&self) -> FactorizedParams {
        self.factorized(self.arch.z_loc, self.arch.z_scale)
    }

    /// Factorized model of the latent channels, for coding without the
    /// hyperprior.
    pub fn factorized_y(&self) -> FactorizedParams {
        self.factorized(self.arch.y_loc, self.arch.y_scale)
    }

    fn factorized(&self, loc: usize, scale: usize) -> FactorizedParams {
        FactorizedParams {
            loc: self.tensors[loc].iter().map(|v| v.as_f64()).collect(),
            log_scale: self.tensors[scale].iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// `y = f_e(x)`: occupancy `(1, W, W, W)` to latents.
    pub fn analysis(&self, x: &Grid4<T>) -> Result<Grid4<T>> {
        self.check_input(x, 1)?;
        Ok(self.arch.analysis.forward(self, x, &self.ladder_for(x))?.0)
    }

    /// Latents to occupancy logits of shape `(1, W, W, W)`.
    pub fn synthesis(&self, y: &Grid4<T>, width: usize) -> Result<Grid4<T>> {
        self.check_latent(y, width)?;
        Ok(self.arch.synthesis.forward(self, y, &self.config.ladder(width))?.0)
    }

    pub fn hyper_analysis(&self, y: &Grid4<T>, width: usize) -> Result<Grid4<T>> {
        self.check_latent(y, width)?;
        Ok(self.arch.hyper_analysis.forward(self, y, &self.config.ladder(width))?.0)
    }

    /// Per-latent `(μ, σ)` from decoded hyperpriors; σ ∈ [1e-2, 64].
    pub fn hyper_synthesis(&self, z: &Grid4<T>, width: usize) -> Result<(Grid4<T>, Grid4<T>)> {
        let want = self.config.hyper_shape(width);
        if z.shape() != want {
            return Err(Error::Shape(format!("hyperprior {:?}, expected {want:?}", z.shape())));
        }
        let out = self.arch.hyper_synthesis.forward(self, z, &self.config.ladder(width))?.0;
        Ok(split_mean_scale(&out, self.config.latent_channels))
    }

    fn ladder_for(&self, x: &Grid4<T>) -> Vec<[usize; 3]> {
        self.config.ladder(x.spatial()[0])
    }

    fn check_input(&self, x: &Grid4<T>, channels: usize) -> Result<()> {
        let [c, d, h, w] = x.shape();
        if c != channels || d != h || h != w {
            return Err(Error::Shape(format!("expected a ({channels}, W, W, W) cube, got {:?}", x.shape())));
        }
        self.config.check_width(d)
    }

    fn check_latent(&self, y: &Grid4<T>, width: usize) -> Result<()> {
        self.config.check_width(width)?;
        let want = self.config.latent_shape(width);
        if y.shape() != want {
            return Err(Error::Shape(format!("latent {:?}, expected {want:?}", y.shape())));
        }
        Ok(())
    }
}

/// Splits hyper-synthesis output into μ (first half) and the clamped
/// exponential scale σ (second half).
pub fn split_mean_scale<T: Scalar>(out: &Grid4<T>, latent_channels: usize) -> (Grid4<T>, Grid4<T>) {
    let (mu, raw) = split_channels(out, latent_channels);
    (mu, raw.map(scale_from_raw))
}

pub fn scale_from_raw<T: Scalar>(raw: T) -> T {
    let lo = T::from_f64_lossy(LOG_SCALE_MIN);
    let hi = T::from_f64_lossy(LOG_SCALE_MAX);
    raw.max(lo).min(hi).exp()
}

/// d σ / d raw: σ inside the clamp, zero outside.
pub fn scale_from_raw_grad<T: Scalar>(raw: T) -> T {
    let lo = T::from_f64_lossy(LOG_SCALE_MIN);
    let hi = T::from_f64_lossy(LOG_SCALE_MAX);
    if raw < lo || raw > hi {
        T::zero()
    } else {
        raw.exp()
    }
}

/// What a chain forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ChainCache<T> {
    entries: Vec<OpCache<T>>,
}

#[derive(Debug, Clone)]
enum OpCache<T> {
    Input(Grid4<T>),
    Vrn(Box<VrnCache<T>>),
}

#[derive(Debug, Clone)]
struct VrnCache<T> {
    x: Grid4<T>,
    a1: Grid4<T>,
    a1r: Grid4<T>,
    b1: Grid4<T>,
    b1r: Grid4<T>,
    b2: Grid4<T>,
    b2r: Grid4<T>,
}

fn conv_fwd<T: Scalar>(p: &ModelParameters<T>, l: &ConvLayer, x: &Grid4<T>) -> Result<Grid4<T>> {
    conv3d(x, p.tensor(l.w), p.tensor(l.b), l.cout, l.spec)
}

fn accumulate<T: Scalar>(grads: &mut [Vec<T>], w: usize, b: usize, g: LayerGradients<T>) {
    for (d, s) in grads[w].iter_mut().zip(&g.weight) {
        *d += *s;
    }
    for (d, s) in grads[b].iter_mut().zip(&g.bias) {
        *d += *s;
    }
}

fn conv_bwd<T: Scalar>(
    p: &ModelParameters<T>,
    l: &ConvLayer,
    x: &Grid4<T>,
    up: &Grid4<T>,
    grads: &mut [Vec<T>],
    want_dx: bool,
) -> Result<Option<Grid4<T>>> {
    let (dx, g) = conv3d_backward(up, x, p.tensor(l.w), l.spec, want_dx)?;
    accumulate(grads, l.w, l.b, g);
    Ok(dx)
}

impl VrnLayer {
    fn forward<T: Scalar>(&self, p: &ModelParameters<T>, x: &Grid4<T>) -> Result<(Grid4<T>, VrnCache<T>)> {
        let a1 = conv_fwd(p, &self.a1, x)?;
        let a1r = relu(&a1);
        let a = conv_fwd(p, &self.a2, &a1r)?;
        let b1 = conv_fwd(p, &self.b1, x)?;
        let b1r = relu(&b1);
        let b2 = conv_fwd(p, &self.b2, &b1r)?;
        let b2r = relu(&b2);
        let bpath = conv_fwd(p, &self.b3, &b2r)?;
        let mut out = concat_channels(&a, &bpath)?;
        out.add_assign(x)?;
        let cache = VrnCache {
            x: x.clone(),
            a1,
            a1r,
            b1,
            b1r,
            b2,
            b2r,
        };
        Ok((out, cache))
    }

    fn backward<T: Scalar>(
        &self,
        p: &ModelParameters<T>,
        c: &VrnCache<T>,
        up: &Grid4<T>,
        grads: &mut [Vec<T>],
    ) -> Result<Grid4<T>> {
        let (ga, gb) = split_channels(up, self.a2.cout);
        let mut dx = up.clone();

        let g = conv_bwd(p, &self.a2, &c.a1r, &ga, grads, true)?.expect("dx requested");
        let g = relu_backward(&g, &c.a1);
        let g = conv_bwd(p, &self.a1, &c.x, &g, grads, true)?.expect("dx requested");
        dx.add_assign(&g)?;

        let g = conv_bwd(p, &self.b3, &c.b2r, &gb, grads, true)?.expect("dx requested");
        let g = relu_backward(&g, &c.b2);
        let g = conv_bwd(p, &self.b2, &c.b1r, &g, grads, true)?.expect("dx requested");
        let g = relu_backward(&g, &c.b1);
        let g = conv_bwd(p, &self.b1, &c.x, &g, grads, true)?.expect("dx requested");
        dx.add_assign(&g)?;
        Ok(dx)
    }
}

impl Chain {
    /// Runs the chain, keeping activations for [`Chain::backward`].
    pub fn forward<T: Scalar>(
        &self,
        p: &ModelParameters<T>,
        x: &Grid4<T>,
        ladder: &[[usize; 3]],
    ) -> Result<(Grid4<T>, ChainCache<T>)> {
        let mut entries = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let next = match op {
                Op::Conv(l) => conv_fwd(p, l, &cur)?,
                Op::Deconv(l) => {
                    let target = *ladder
                        .get(l.level)
                        .ok_or_else(|| Error::Shape(format!("no ladder level {}", l.level)))?;
                    deconv3d(&cur, p.tensor(l.w), p.tensor(l.b), l.cout, target)?
                }
                Op::Relu => relu(&cur),
                Op::Vrn(v) => {
                    let (out, cache) = v.forward(p, &cur)?;
                    entries.push(OpCache::Vrn(Box::new(cache)));
                    cur = out;
                    continue;
                }
            };
            entries.push(OpCache::Input(std::mem::replace(&mut cur, next)));
        }
        Ok((cur, ChainCache { entries }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when requested.
    pub fn backward<T: Scalar>(
        &self,
        p: &ModelParameters<T>,
        cache: &ChainCache<T>,
        upstream: Grid4<T>,
        grads: &mut [Vec<T>],
        want_input_grad: bool,
    ) -> Result<Option<Grid4<T>>> {
        let mut g = upstream;
        let last = 0;
        for (i, (op, entry)) in self.ops.iter().zip(&cache.entries).enumerate().rev() {
            let need = want_input_grad || i != last;
            g = match (op, entry) {
                (Op::Conv(l), OpCache::Input(x)) => match conv_bwd(p, l, x, &g, grads, need)? {
                    Some(dx) => dx,
                    None => return Ok(None),
                },
                (Op::Deconv(l), OpCache::Input(x)) => {
                    let (dx, lg) = deconv3d_backward(&g, x, p.tensor(l.w), need)?;
                    accumulate(grads, l.w, l.b, lg);
                    match dx {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                (Op::Relu, OpCache::Input(x)) => relu_backward(&g, x),
                (Op::Vrn(v), OpCache::Vrn(c)) => v.backward(p, c, &g, grads)?,
                _ => return Err(Error::Shape("chain cache does not match its ops".into())),
            };
        }
        Ok(Some(g))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"PCGM";
const CKPT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Truncated("checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

impl<T: Scalar> ModelParameters<T> {
    /// Little-endian checkpoint:
    ///
    /// ```text
    /// "PCGM" | version u32 | stages u32 | channels u32×stages | latent u32
    /// | hyper u32 | vrn_per_stage u32 | tensor_count u32
    /// | per tensor: name_len u32, name, ndim u32, dims u32×ndim, f64×len
    /// ```
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        write_u32(w, CKPT_VERSION)?;
        let c = &self.config;
        write_u32(w, c.stages() as u32)?;
        for &ch in &c.channels {
            write_u32(w, ch as u32)?;
        }
        write_u32(w, c.latent_channels as u32)?;
        write_u32(w, c.hyper_channels as u32)?;
        write_u32(w, c.vrn_per_stage as u32)?;
        write_u32(w, self.tensors.len() as u32)?;
        for (spec, t) in self.arch.params.iter().zip(&self.tensors) {
            write_u32(w, spec.name.len() as u32)?;
            w.write_all(spec.name.as_bytes())?;
            write_u32(w, spec.shape.len() as u32)?;
            for &d in &spec.shape {
                write_u32(w, d as u32)?;
            }
            for v in t {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated("checkpoint".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Corrupt("not a model checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(Error::Corrupt(format!("checkpoint version {version} unsupported")));
        }
        let stages = read_u32(r)? as usize;
        if stages == 0 || stages > 8 {
            return Err(Error::Corrupt(format!("{stages} stages")));
        }
        let channels = (0..stages).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let config = NetConfig {
            channels,
            latent_channels: read_u32(r)? as usize,
            hyper_channels: read_u32(r)? as usize,
            vrn_per_stage: read_u32(r)? as usize,
        };
        let mut m = Self::zeros(&config)?;
        let count = read_u32(r)? as usize;
        if count != m.tensors.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {count} tensors, architecture needs {}",
                m.tensors.len()
            )));
        }
        for (spec, t) in m.arch.params.iter().zip(m.tensors.iter_mut()) {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len.min(1024)];
            if len > 1024 {
                return Err(Error::Corrupt("tensor name too long".into()));
            }
            r.read_exact(&mut name).map_err(|_| Error::Truncated("checkpoint".into()))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Corrupt("tensor rank too large".into()));
            }
            let dims = (0..ndim).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if name != spec.name.as_bytes() || dims != spec.shape {
                return Err(Error::Corrupt(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    String::from_utf8_lossy(&name),
                    dims,
                    spec.name,
                    spec.shape
                )));
            }
            for v in t.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| Error::Truncated("checkpoint".into()))?;
                *v = T::from_f64_lossy(f64::from_le_bytes(b));
            }
        }
        Ok(m)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let m = Self::load(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        Ok(m)
    }
}

/// Occupancy cube as a `(1, W, W, W)` grid of zeros and ones.
pub fn occupancy_grid<T: Scalar>(occupancy: &[u8], width: usize) -> Result<Grid4<T>> {
    Grid4::from_vec(
        [1, width, width, width],
        occupancy.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
    )
}

pub use tensor::sigmoid;
