//! Quantization, Laplace bin probabilities, rate estimates and the integer
//! CDF tables shared bit-exactly by encoder and decoder.
//!
//! A latent value `v` is modelled by a Laplace density convolved with a unit
//! uniform, so its probability is `F(v + ½) − F(v − ½)`. The same function
//! serves hard-rounded symbols at inference and noisy values in training.

use rand::Rng;

use crate::tensor::Grid4;
use crate::transforms::scale_from_raw;
use crate::{Error, Result, Scalar};

/// Total of every CDF table.
pub const CDF_TOTAL: u32 = 1 << 16;
/// Likelihood floor used in training-time rate terms.
pub const MASS_FLOOR: f64 = 1e-9;
/// μ is snapped to multiples of `1 / MU_STEPS` before building tables.
pub const MU_STEPS: f64 = 256.0;
/// Number of points on the geometric σ grid over `[SIGMA_MIN, SIGMA_MAX]`.
pub const SIGMA_LEVELS: usize = 256;
pub const SIGMA_MIN: f64 = 1e-2;
pub const SIGMA_MAX: f64 = 64.0;
/// Largest table accepted by [`cdf_from_masses`].
pub const MAX_BINS: usize = 1 << 12;

/// Round half away from zero.
pub fn quantize_round<T: Scalar>(y: &Grid4<T>) -> Vec<i32> {
    y.data().iter().map(|v| v.round().to_i32().unwrap_or(0)).collect()
}

/// Additive `U(−½, ½)` noise: the training-time stand-in for rounding.
pub fn quantize_noise<T: Scalar, R: Rng>(y: &Grid4<T>, rng: &mut R) -> Grid4<T> {
    let data = y
        .data()
        .iter()
        .map(|&v| v + T::from_f64_lossy(rng.gen_range(-0.5..0.5)))
        .collect();
    Grid4::from_vec(y.shape(), data).expect("same shape")
}

/// Laplace CDF for location `mu`, scale `sigma`.
pub fn laplace_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let t = (x - mu) / sigma;
    if t < 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

/// Probability of `[v − ½, v + ½)` with its partial derivatives with respect
/// to `v`, `mu` and `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassGrad<T> {
    pub mass: T,
    pub d_value: T,
    pub d_mu: T,
    pub d_sigma: T,
}

pub fn laplace_interval_mass<T: Scalar>(v: T, mu: T, sigma: T) -> MassGrad<T> {
    let half = T::from_f64_lossy(0.5);
    let a = (v - half - mu) / sigma;
    let b = (v + half - mu) / sigma;
    let w = T::one() / sigma;
    // Tail branches avoid cancellation between two nearly equal CDF values.
    let mass = if b <= T::zero() {
        half * b.exp() * -(-w).exp_m1()
    } else if a >= T::zero() {
        half * (-a).exp() * -(-w).exp_m1()
    } else {
        T::one() - half * a.exp() - half * (-b).exp()
    };
    let pa = half * (-a.abs()).exp();
    let pb = half * (-b.abs()).exp();
    let d_value = (pb - pa) / sigma;
    MassGrad {
        mass,
        d_value,
        d_mu: -d_value,
        d_sigma: -(b * pb - a * pa) / sigma,
    }
}

/// Probability of integer symbol `n` under Laplace(μ, σ) convolved with a
/// unit uniform.
pub fn laplace_bin_mass(n: i32, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Precondition(format!("Laplace scale must be positive and finite, got σ={sigma}, μ={mu}")));
    }
    Ok(laplace_interval_mass(n as f64, mu, sigma).mass)
}

/// Per-channel Laplace parameters of the factorized model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedParams {
    pub loc: Vec<f64>,
    /// Raw scales; the effective scale is `exp(clamp(raw, ln 1e-2, ln 64))`.
    pub log_scale: Vec<f64>,
}

impl FactorizedParams {
    pub fn new(loc: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if loc.len() != log_scale.len() {
            return Err(Error::Shape("factorized loc/scale length mismatch".into()));
        }
        Ok(Self { loc, log_scale })
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn scale(&self, c: usize) -> f64 {
        scale_from_raw(self.log_scale[c])
    }
}

pub fn factorized_bin_mass(n: i32, channel: usize, psi: &FactorizedParams) -> Result<f64> {
    if channel >= psi.channels() {
        return Err(Error::Shape(format!("channel {channel} of {}", psi.channels())));
    }
    laplace_bin_mass(n, psi.loc[channel], psi.scale(channel))
}

/// `Σ −log2 mass`.
pub fn rate_bits(masses: &[f64]) -> f64 {
    masses.iter().map(|m| -m.log2()).sum()
}

/// μ snapped to the shared 1/256 grid, as an integer number of steps.
pub fn quantize_mu(mu: f64) -> i32 {
    let lim = (i32::MAX / 2) as f64;
    (mu * MU_STEPS).round().clamp(-lim, lim) as i32
}

pub fn mu_from_steps(steps: i32) -> f64 {
    steps as f64 / MU_STEPS
}

/// Index on the geometric σ grid nearest to `sigma` in log space.
pub fn quantize_sigma(sigma: f64) -> u8 {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let t = (s / SIGMA_MIN).ln() / (SIGMA_MAX / SIGMA_MIN).ln();
    (t * (SIGMA_LEVELS - 1) as f64).round() as u8
}

pub fn sigma_from_index(idx: u8) -> f64 {
    SIGMA_MIN * (SIGMA_MAX / SIGMA_MIN).powf(idx as f64 / (SIGMA_LEVELS - 1) as f64)
}

/// Masses of every symbol in `[lo, hi]`, where the two end bins absorb the
/// tails `(−∞, lo]` and `[hi, ∞)`. Sums to one.
pub fn bin_masses(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<Vec<f64>> {
    if lo > hi {
        return Err(Error::Precondition(format!("empty symbol range [{lo}, {hi}]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("σ must be positive, got {sigma}")));
    }
    if lo == hi {
        return Ok(vec![1.0]);
    }
    let mut m = Vec::with_capacity((hi - lo + 1) as usize);
    m.push(laplace_cdf(lo as f64 + 0.5, mu, sigma));
    for n in lo + 1..hi {
        m.push(laplace_interval_mass(n as f64, mu, sigma).mass);
    }
    m.push(1.0 - laplace_cdf(hi as f64 - 0.5, mu, sigma));
    Ok(m)
}

/// Quantized cumulative distribution over `[s_min, s_max]`. The end bins are
/// escape bins: symbols at or beyond them are coded with a raw payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CdfTable {
    pub s_min: i32,
    pub s_max: i32,
    /// `nbins + 1` entries, from 0 to [`CDF_TOTAL`].
    pub cdf: Vec<u32>,
}

impl CdfTable {
    pub fn nbins(&self) -> usize {
        self.cdf.len() - 1
    }

    /// `(cumulative start, frequency)` of bin `i`.
    pub fn bin(&self, i: usize) -> (u32, u32) {
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    pub fn count(&self, i: usize) -> u32 {
        self.cdf[i + 1] - self.cdf[i]
    }

    /// Bin for `symbol`, clamping to the escape bins.
    pub fn bin_of(&self, symbol: i32) -> usize {
        (symbol.clamp(self.s_min, self.s_max) - self.s_min) as usize
    }

    /// End bins are escapes; a single-bin table escapes everything.
    pub fn is_escape(&self, bin: usize) -> bool {
        bin == 0 || bin == self.nbins() - 1
    }

    /// Bits the coder spends on `symbol`, including the raw escape payload.
    pub fn cost_bits(&self, symbol: i32) -> f64 {
        let b = self.bin_of(symbol);
        let bits = -(self.count(b) as f64 / CDF_TOTAL as f64).log2();
        if self.is_escape(b) {
            bits + 32.0
        } else {
            bits
        }
    }

    /// Largest bin whose cumulative start is `≤ target`.
    pub fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

/// Integer table from real masses: each bin gets `1 + floor(mass·(T − n))`
/// counts, then the remaining counts go to the largest fractional parts
/// (ties to the lower index) until the total is exactly `T = 2^16`.
pub fn cdf_from_masses(masses: &[f64], s_min: i32) -> Result<CdfTable> {
    let n = masses.len();
    if n == 0 {
        return Err(Error::Precondition("empty symbol range".into()));
    }
    if n > MAX_BINS {
        return Err(Error::Precondition(format!("{n} bins exceed the {MAX_BINS}-bin limit")));
    }
    if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::NonFinite("CDF masses".into()));
    }
    let spread = (CDF_TOTAL as usize - n) as f64;
    let sum: f64 = masses.iter().sum();
    let norm = if sum > 0.0 { sum } else { 1.0 };
    let mut counts = Vec::with_capacity(n);
    let mut frac = Vec::with_capacity(n);
    for &m in masses {
        let scaled = m / norm * spread;
        let f = scaled.floor();
        counts.push(1 + f as u32);
        frac.push(scaled - f);
    }
    let total: i64 = counts.iter().map(|&c| c as i64).sum();
    let mut deficit = CDF_TOTAL as i64 - total;
    if deficit != 0 {
        let mut order: Vec<usize> = (0..n).collect();
        if deficit > 0 {
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if deficit == 0 {
                    break;
                }
                counts[i] += 1;
                deficit -= 1;
            }
        } else {
            order.sort_by(|&a, &b| frac[a].total_cmp(&frac[b]).then(a.cmp(&b)));
            while deficit < 0 {
                let before = deficit;
                for &i in &order {
                    if deficit == 0 {
                        break;
                    }
                    if counts[i] > 1 {
                        counts[i] -= 1;
                        deficit += 1;
                    }
                }
                if deficit == before {
                    return Err(Error::Precondition("cannot renormalize CDF".into()));
                }
            }
        }
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0u32);
    let mut acc = 0u32;
    for c in counts {
        acc += c;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, CDF_TOTAL);
    Ok(CdfTable {
        s_min,
        s_max: s_min + n as i32 - 1,
        cdf,
    })
}

/// Table for quantized `(μ, σ)` over `[s_min, s_max]`, end bins escaping.
pub fn build_cdf_table(mu_steps: i32, sigma_idx: u8, s_min: i32, s_max: i32) -> Result<CdfTable> {
    if s_min > s_max {
        return Err(Error::Precondition(format!("empty symbol range [{s_min}, {s_max}]")));
    }
    let masses = bin_masses(mu_from_steps(mu_steps), sigma_from_index(sigma_idx), s_min, s_max)?;
    cdf_from_masses(&masses, s_min)
}

/// Snaps real `(μ, σ)` to the shared grids and builds the table.
pub fn table_for(mu: f64, sigma: f64, s_min: i32, s_max: i32) -> Result<CdfTable> {
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::NonFinite("entropy parameters".into()));
    }
    build_cdf_table(quantize_mu(mu), quantize_sigma(sigma), s_min, s_max)
}

/// Training rate of one value in bits with its gradients, using the
/// likelihood floor. Gradients vanish where the floor is active.
pub fn bits_with_grad<T: Scalar>(v: T, mu: T, sigma: T) -> (T, MassGrad<T>) {
    let g = laplace_interval_mass(v, mu, sigma);
    let floor = T::from_f64_lossy(MASS_FLOOR);
    let ln2 = T::LN_2();
    if g.mass <= floor {
        return (
            -floor.ln() / ln2,
            MassGrad {
                mass: floor,
                d_value: T::zero(),
                d_mu: T::zero(),
                d_sigma: T::zero(),
            },
        );
    }
    let dbits = -T::one() / (g.mass * ln2);
    (
        -g.mass.ln() / ln2,
        MassGrad {
            mass: g.mass,
            d_value: dbits * g.d_value,
            d_mu: dbits * g.d_mu,
            d_sigma: dbits * g.d_sigma,
        },
    )
}
