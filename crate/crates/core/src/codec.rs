//! Cube and point cloud coding, decode-side classification and the
//! bitstream container.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! "PCGC" | version u8 | precision u8 | scale numer u32 | scale denom u32
//! | log2 W u8 | profile u8 [profile 0: stages u8, channels u16.., latent u16,
//!   hyper u16, vrn u8] | hyperprior u8 | grid_levels u8 | cube_count u32
//! | octree occupancy bytes
//! | k fields: k − 1 in 3·log2 W bits each, MSB first, zero padded
//! | per cube, Morton order:
//!     [hyperprior only] z range, z length, z bytes
//!     y range, y length, y bytes
//! ```
//!
//! A range is `zigzag(s_min)` then `s_max − s_min`, and a length is a byte
//! count, all as LEB128 varints. Header, octree and k fields are the
//! metadata; everything after them is payload.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::entropy::{quantize_mu, quantize_round, quantize_sigma, build_cdf_table, table_for, CdfTable, FactorizedParams, MAX_BINS};
use crate::io::{bits_for, extract, voxelize, PointSet, VoxelSet};
use crate::metrics::{d1_mse_f64, d2_mse_f64, estimate_normals};
use crate::preprocess::{
    assemble, decode_cube_positions_prefix, encode_cube_positions, inverse_scale, partition, scale_points, Cube,
    CubeIndexSet, ScaleConfig,
};
use crate::rangecoder::{decode_symbols, encode_symbols, CodedStream};
use crate::tensor::Grid4;
use crate::transforms::{occupancy_grid, ModelParameters, NetConfig};
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 4] = b"PCGC";
pub const VERSION: u8 = 1;
/// Symbol ranges are clamped to `[−RANGE_LIMIT, RANGE_LIMIT)`; anything
/// outside goes through an escape bin.
const RANGE_LIMIT: i32 = (MAX_BINS / 2) as i32;

/// How the quantized latents are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentCoding {
    /// Laplace parameters per element, predicted from the decoded hyperprior.
    Hyperprior,
    /// One Laplace per latent channel; no hyperprior is sent.
    Factorized,
}

impl LatentCoding {
    fn flag(self) -> u8 {
        match self {
            Self::Hyperprior => 1,
            Self::Factorized => 0,
        }
    }
}

/// Distortion used when tuning the transmitted `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMetric {
    D1,
    D2,
}

/// Everything sent for one cube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubePayload {
    pub k_occupied: u32,
    pub z_range: (i32, i32),
    pub y_range: (i32, i32),
    pub z_stream: CodedStream,
    pub y_stream: CodedStream,
}

impl CubePayload {
    /// Bits of the two range-coded streams.
    pub fn coded_bits(&self) -> u64 {
        8 * (self.z_stream.bytes.len() + self.y_stream.bytes.len()) as u64
    }

    fn write(&self, out: &mut Vec<u8>, coding: LatentCoding) {
        if coding == LatentCoding::Hyperprior {
            write_stream(out, self.z_range, &self.z_stream.bytes);
        }
        write_stream(out, self.y_range, &self.y_stream.bytes);
    }

    /// Serialized size in bits, ranges and lengths included.
    pub fn serialized_bits(&self, coding: LatentCoding) -> u64 {
        let mut v = Vec::new();
        self.write(&mut v, coding);
        8 * v.len() as u64
    }
}

fn write_stream(out: &mut Vec<u8>, range: (i32, i32), bytes: &[u8]) {
    write_varint(out, zigzag(range.0));
    write_varint(out, (range.1 - range.0) as u64);
    write_varint(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn read_stream(r: &mut Reader, symbol_count: usize) -> Result<((i32, i32), CodedStream)> {
    let s_min = unzigzag(r.varint()?);
    let span = r.varint()?;
    if !(-RANGE_LIMIT..RANGE_LIMIT).contains(&s_min) || span >= MAX_BINS as u64 || s_min as i64 + span as i64 >= RANGE_LIMIT as i64 {
        return Err(Error::Corrupt(format!("symbol range starting at {s_min} with span {span}")));
    }
    let len = r.varint()? as usize;
    let bytes = r.take(len)?.to_vec();
    Ok(((s_min, s_min + span as i32), CodedStream { bytes, symbol_count }))
}

fn zigzag(v: i32) -> u64 {
    ((v << 1) ^ (v >> 31)) as u32 as u64
}

fn unzigzag(v: u64) -> i32 {
    let v = v as u32;
    ((v >> 1) as i32) ^ -((v & 1) as i32)
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Byte cursor with typed little-endian reads.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= ((b & 0x7F) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::Corrupt("varint longer than 64 bits".into()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// MSB-first bit packer.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, value: u64, bits: u32) {
        for i in (0..bits).rev() {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed") |= 0x80 >> (self.used % 8);
            }
            self.used += 1;
        }
    }

    pub fn bit_len(&self) -> u32 {
        self.used
    }

    /// The packed bytes, zero padded to a byte boundary.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn get(&mut self, bits: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..bits {
            let byte = self
                .bytes
                .get(self.pos / 8)
                .ok_or_else(|| Error::Truncated(format!("bit field past bit {}", self.pos)))?;
            v = (v << 1) | ((byte >> (7 - self.pos % 8)) & 1) as u64;
            self.pos += 1;
        }
        Ok(v)
    }
}

fn log2_width(width: usize) -> Result<u32> {
    if width < 2 || !width.is_power_of_two() {
        return Err(Error::Config(format!("cube width {width} is not a power of two ≥ 2")));
    }
    Ok(width.trailing_zeros())
}

/// Width of one k field: `3·log2 W` bits.
pub fn k_field_bits(width: usize) -> Result<u32> {
    Ok(3 * log2_width(width)?)
}

/// Writes `k ∈ [1, W³]` as `k − 1` in `3·log2 W` bits.
pub fn write_k(w: &mut BitWriter, k: u32, width: usize) -> Result<()> {
    let bits = k_field_bits(width)?;
    if k == 0 || k as u64 > 1u64 << bits {
        return Err(Error::Precondition(format!("k = {k} outside [1, {}]", 1u64 << bits)));
    }
    w.put(k as u64 - 1, bits);
    Ok(())
}

pub fn read_k(r: &mut BitReader, width: usize) -> Result<u32> {
    Ok(r.get(k_field_bits(width)?)? as u32 + 1)
}

/// Exactly `k` ones at the largest scores; equal scores go to the lower
/// index. `k` is capped at the grid size.
pub fn classify_topk<T: Scalar>(p: &[T], k: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    let k = k.min(p.len());
    let cmp = |a: &usize, b: &usize| p[*b].partial_cmp(&p[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    if k > 0 && k < p.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut out = vec![0u8; p.len()];
    for &i in &order[..k] {
        out[i] = 1;
    }
    out
}

/// Ones where `p > threshold`.
pub fn classify_fixed<T: Scalar>(p: &[T], threshold: T) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v > threshold)).collect()
}

fn occupied_points(occupancy: &[u8], width: usize) -> Vec<[f64; 3]> {
    let w = width;
    occupancy
        .iter()
        .enumerate()
        .filter(|(_, &o)| o != 0)
        .map(|(i, _)| [(i / (w * w)) as f64, ((i / w) % w) as f64, (i % w) as f64])
        .collect()
}

fn cube_distortion(reference: &[[f64; 3]], test: &[[f64; 3]], metric: RhoMetric) -> Result<f64> {
    match metric {
        RhoMetric::D2 if reference.len() >= 3 && test.len() >= 3 => {
            let nr = estimate_normals(reference, 20)?;
            let nt = estimate_normals(test, 20)?;
            d2_mse_f64(test, reference, &nt, &nr)
        }
        _ => d1_mse_f64(test, reference),
    }
}

/// Candidate ratios `0.5 + 0.05·j` strictly inside `(0.5, 2)`.
pub fn rho_grid() -> Vec<f64> {
    (11..40).map(|j| j as f64 / 20.0).collect()
}

/// Picks `ρ` minimizing the chosen distortion of `classify_topk(p, round(ρ·k))`
/// against the cube, preferring the `ρ` closest to 1 on ties. Returns
/// `(ρ, k_f)`.
pub fn tune_rho(cube: &Cube, p: &[f64], metric: RhoMetric) -> Result<(f64, u32)> {
    let volume = cube.width.pow(3);
    if p.len() != volume {
        return Err(Error::Shape(format!("{} probabilities for a {}³ cube", p.len(), cube.width)));
    }
    let reference = occupied_points(&cube.occupancy, cube.width);
    if reference.is_empty() {
        return Err(Error::Precondition("cannot tune ρ on an empty cube".into()));
    }
    let k = reference.len() as f64;
    let mut cache: HashMap<usize, f64> = HashMap::new();
    let mut best: Option<(f64, f64, usize)> = None;
    for rho in rho_grid() {
        let kf = ((rho * k).round() as usize).clamp(1, volume);
        let err = match cache.get(&kf) {
            Some(&e) => e,
            None => {
                let test = occupied_points(&classify_topk(p, kf), cube.width);
                let e = cube_distortion(&reference, &test, metric)?;
                cache.insert(kf, e);
                e
            }
        };
        let better = match best {
            None => true,
            Some((be, br, _)) => err < be || (err == be && (rho - 1.0).abs() < (br - 1.0).abs()),
        };
        if better {
            best = Some((err, rho, kf));
        }
    }
    let (_, rho, kf) = best.expect("non-empty grid");
    Ok((rho, kf as u32))
}

/// Distinct tables plus, per symbol, which one codes it.
struct TableSet {
    tables: Vec<CdfTable>,
    which: Vec<usize>,
}

impl TableSet {
    fn refs(&self) -> Vec<&CdfTable> {
        self.which.iter().map(|&i| &self.tables[i]).collect()
    }

    fn estimate_bits(&self, symbols: &[i32]) -> f64 {
        symbols.iter().zip(&self.which).map(|(&s, &i)| self.tables[i].cost_bits(s)).sum()
    }
}

fn symbol_range(symbols: &[i32]) -> (i32, i32) {
    let lo = symbols.iter().copied().min().unwrap_or(0);
    let hi = symbols.iter().copied().max().unwrap_or(0);
    let s_min = lo.saturating_sub(1).clamp(-RANGE_LIMIT, RANGE_LIMIT - 1);
    let s_max = hi.saturating_add(1).clamp(s_min, RANGE_LIMIT - 1);
    (s_min, s_max)
}

fn factorized_tables(psi: &FactorizedParams, per_channel: usize, range: (i32, i32)) -> Result<TableSet> {
    let tables = (0..psi.channels())
        .map(|c| table_for(psi.loc[c], psi.scale(c), range.0, range.1))
        .collect::<Result<Vec<_>>>()?;
    let which = (0..psi.channels() * per_channel).map(|i| i / per_channel).collect();
    Ok(TableSet { tables, which })
}

fn conditional_tables<T: Scalar>(mu: &Grid4<T>, sigma: &Grid4<T>, range: (i32, i32)) -> Result<TableSet> {
    if !mu.all_finite() || !sigma.all_finite() {
        return Err(Error::NonFinite("hyper-synthesis output".into()));
    }
    let mut index: HashMap<(i32, u8), usize> = HashMap::new();
    let mut tables = Vec::new();
    let mut which = Vec::with_capacity(mu.data().len());
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        let key = (quantize_mu(m.as_f64()), quantize_sigma(s.as_f64()));
        let i = match index.get(&key) {
            Some(&i) => i,
            None => {
                tables.push(build_cdf_table(key.0, key.1, range.0, range.1)?);
                index.insert(key, tables.len() - 1);
                tables.len() - 1
            }
        };
        which.push(i);
    }
    Ok(TableSet { tables, which })
}

fn to_grid<T: Scalar>(symbols: &[i32], shape: [usize; 4]) -> Result<Grid4<T>> {
    Grid4::from_vec(shape, symbols.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
}

fn latent_tables<T: Scalar>(
    model: &ModelParameters<T>,
    z_hat: &[i32],
    width: usize,
    coding: LatentCoding,
    range: (i32, i32),
) -> Result<TableSet> {
    let cfg = model.config();
    match coding {
        LatentCoding::Hyperprior => {
            let z = to_grid::<T>(z_hat, cfg.hyper_shape(width))?;
            let (mu, sigma) = model.hyper_synthesis(&z, width)?;
            conditional_tables(&mu, &sigma, range)
        }
        LatentCoding::Factorized => {
            let [_, d, h, w] = cfg.latent_shape(width);
            factorized_tables(&model.factorized_y(), d * h * w, range)
        }
    }
}

fn hyper_tables<T: Scalar>(model: &ModelParameters<T>, width: usize, range: (i32, i32)) -> Result<TableSet> {
    let [_, d, h, w] = model.config().hyper_shape(width);
    factorized_tables(&model.factorized_z(), d * h * w, range)
}

/// Encoder-side view of one coded cube.
#[derive(Debug, Clone)]
pub struct EncodedCube {
    pub payload: CubePayload,
    pub y_hat: Vec<i32>,
    pub z_hat: Vec<i32>,
    /// `Σ −log2` of the quantized table masses, escape payloads included.
    pub estimated_bits: f64,
}

/// Decoder-side view of one cube.
#[derive(Debug, Clone)]
pub struct DecodedCube {
    pub cube: Cube,
    pub y_hat: Vec<i32>,
    pub z_hat: Vec<i32>,
    /// Occupancy logits; the classifier ranks by these.
    pub logits: Vec<f64>,
}

impl DecodedCube {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| crate::tensor::sigmoid_scalar(l)).collect()
    }
}

/// Codes one cube with the hyperprior.
pub fn encode_cube<T: Scalar>(cube: &Cube, model: &ModelParameters<T>) -> Result<CubePayload> {
    Ok(encode_cube_with(cube, model, LatentCoding::Hyperprior)?.payload)
}

pub fn encode_cube_with<T: Scalar>(cube: &Cube, model: &ModelParameters<T>, coding: LatentCoding) -> Result<EncodedCube> {
    let width = cube.width;
    let k = cube.count();
    if k == 0 {
        return Err(Error::Precondition("cannot encode an empty cube".into()));
    }
    let x = occupancy_grid::<T>(&cube.occupancy, width)?;
    let y = model.analysis(&x)?;
    if !y.all_finite() {
        return Err(Error::NonFinite("analysis output".into()));
    }
    let y_hat = quantize_round(&y);
    let mut estimated_bits = 0.0;
    let (z_hat, z_range, z_stream) = match coding {
        LatentCoding::Hyperprior => {
            let z = model.hyper_analysis(&y, width)?;
            if !z.all_finite() {
                return Err(Error::NonFinite("hyper-analysis output".into()));
            }
            let z_hat = quantize_round(&z);
            let range = symbol_range(&z_hat);
            let tables = hyper_tables(model, width, range)?;
            estimated_bits += tables.estimate_bits(&z_hat);
            let stream = encode_symbols(&z_hat, &tables.refs())?;
            (z_hat, range, stream)
        }
        LatentCoding::Factorized => (Vec::new(), (0, 0), CodedStream { bytes: Vec::new(), symbol_count: 0 }),
    };
    let y_range = symbol_range(&y_hat);
    let tables = latent_tables(model, &z_hat, width, coding, y_range)?;
    estimated_bits += tables.estimate_bits(&y_hat);
    let y_stream = encode_symbols(&y_hat, &tables.refs())?;
    Ok(EncodedCube {
        payload: CubePayload {
            k_occupied: k,
            z_range,
            y_range,
            z_stream,
            y_stream,
        },
        y_hat,
        z_hat,
        estimated_bits,
    })
}

/// Decodes one cube with the hyperprior; the result sits at grid position 0.
pub fn decode_cube<T: Scalar>(payload: &CubePayload, model: &ModelParameters<T>, width: usize) -> Result<Cube> {
    Ok(decode_cube_with(payload, model, width, LatentCoding::Hyperprior)?.cube)
}

pub fn decode_cube_with<T: Scalar>(
    payload: &CubePayload,
    model: &ModelParameters<T>,
    width: usize,
    coding: LatentCoding,
) -> Result<DecodedCube> {
    let cfg = model.config();
    cfg.check_width(width)?;
    let volume = width.pow(3);
    if payload.k_occupied == 0 || payload.k_occupied as usize > volume {
        return Err(Error::Corrupt(format!("k = {} for a {width}³ cube", payload.k_occupied)));
    }
    let z_hat = match coding {
        LatentCoding::Hyperprior => {
            let tables = hyper_tables(model, width, payload.z_range)?;
            decode_symbols(&payload.z_stream, &tables.refs())?
        }
        LatentCoding::Factorized => Vec::new(),
    };
    let tables = latent_tables(model, &z_hat, width, coding, payload.y_range)?;
    let y_hat = decode_symbols(&payload.y_stream, &tables.refs())?;
    let logits = model.synthesis(&to_grid::<T>(&y_hat, cfg.latent_shape(width))?, width)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("synthesis output".into()));
    }
    let occupancy = classify_topk(logits.data(), payload.k_occupied as usize);
    Ok(DecodedCube {
        cube: Cube {
            grid_pos: [0; 3],
            width,
            occupancy,
            k_occupied: payload.k_occupied,
        },
        y_hat,
        z_hat,
        logits: logits.data().iter().map(|v| v.as_f64()).collect(),
    })
}

/// Fixed-size fields at the front of a bitstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub precision: u8,
    pub scale: ScaleConfig,
    pub width: usize,
    pub net: NetConfig,
    pub coding: LatentCoding,
    pub grid_levels: u8,
    pub cube_count: u32,
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.precision);
        out.extend_from_slice(&self.scale.numer().to_le_bytes());
        out.extend_from_slice(&self.scale.denom().to_le_bytes());
        out.push(self.width.trailing_zeros() as u8);
        let profile = self.net.profile_id();
        out.push(profile);
        if profile == 0 {
            out.push(self.net.channels.len() as u8);
            for &c in &self.net.channels {
                out.extend_from_slice(&(c as u16).to_le_bytes());
            }
            out.extend_from_slice(&(self.net.latent_channels as u16).to_le_bytes());
            out.extend_from_slice(&(self.net.hyper_channels as u16).to_le_bytes());
            out.push(self.net.vrn_per_stage as u8);
        }
        out.push(self.coding.flag());
        out.push(self.grid_levels);
        out.extend_from_slice(&self.cube_count.to_le_bytes());
    }

    fn read(r: &mut Reader) -> Result<Self> {
        if r.take(4).map_err(|_| Error::Corrupt("missing magic".into()))? != MAGIC {
            return Err(Error::Corrupt("not a PCGC bitstream".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let precision = r.u8()?;
        if !(1..=31).contains(&precision) {
            return Err(Error::Corrupt(format!("precision {precision}")));
        }
        let numer = r.u32()?;
        let denom = r.u32()?;
        let scale = ScaleConfig::new(numer, denom).map_err(|e| Error::Corrupt(e.to_string()))?;
        let log2w = r.u8()?;
        if !(1..=10).contains(&log2w) {
            return Err(Error::Corrupt(format!("cube width 2^{log2w}")));
        }
        let net = match r.u8()? {
            1 => NetConfig::tiny(),
            2 => NetConfig::desk(),
            0 => {
                let stages = r.u8()? as usize;
                let channels = (0..stages).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
                NetConfig {
                    channels,
                    latent_channels: r.u16()? as usize,
                    hyper_channels: r.u16()? as usize,
                    vrn_per_stage: r.u8()? as usize,
                }
            }
            p => return Err(Error::Corrupt(format!("unknown network profile {p}"))),
        };
        net.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let coding = match r.u8()? {
            1 => LatentCoding::Hyperprior,
            0 => LatentCoding::Factorized,
            f => return Err(Error::Corrupt(format!("hyperprior flag {f}"))),
        };
        let grid_levels = r.u8()?;
        let cube_count = r.u32()?;
        let width = 1usize << log2w;
        net.check_width(width).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Self {
            precision,
            scale,
            width,
            net,
            coding,
            grid_levels,
            cube_count,
        })
    }
}

/// A coded point cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub index: CubeIndexSet,
    pub cubes: Vec<CubePayload>,
}

/// Bit counts of the container sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitAccounting {
    pub header_bits: u64,
    pub octree_bits: u64,
    pub k_bits: u64,
    pub payload_bits: u64,
}

impl BitAccounting {
    /// Header, octree and k fields.
    pub fn meta_bits(&self) -> u64 {
        self.header_bits + self.octree_bits + self.k_bits
    }

    pub fn total_bits(&self) -> u64 {
        self.meta_bits() + self.payload_bits
    }
}

impl Bitstream {
    fn sections(&self) -> Result<[Vec<u8>; 4]> {
        let mut header = Vec::new();
        self.header.write(&mut header);
        let octree = encode_cube_positions(&self.index);
        let mut kw = BitWriter::new();
        for c in &self.cubes {
            write_k(&mut kw, c.k_occupied, self.header.width)?;
        }
        let mut payload = Vec::new();
        for c in &self.cubes {
            c.write(&mut payload, self.header.coding);
        }
        Ok([header, octree, kw.into_bytes(), payload])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.sections()?.concat())
    }

    pub fn accounting(&self) -> Result<BitAccounting> {
        let [h, o, k, p] = self.sections()?;
        Ok(BitAccounting {
            header_bits: 8 * h.len() as u64,
            octree_bits: 8 * o.len() as u64,
            k_bits: 8 * k.len() as u64,
            payload_bits: 8 * p.len() as u64,
        })
    }

    /// Total bits per input point.
    pub fn bpp(&self, input_points: usize) -> Result<f64> {
        Ok(self.accounting()?.total_bits() as f64 / input_points as f64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = Header::read(&mut r)?;
        let (index, used) = decode_cube_positions_prefix(r.rest(), header.grid_levels)?;
        r.take(used)?;
        if index.len() != header.cube_count as usize {
            return Err(Error::Corrupt(format!(
                "octree holds {} cubes, header says {}",
                index.len(),
                header.cube_count
            )));
        }
        let kbits = k_field_bits(header.width)? as usize * index.len();
        let kbytes = r.take(kbits.div_ceil(8))?;
        let mut kr = BitReader::new(kbytes);
        let ks = (0..index.len()).map(|_| read_k(&mut kr, header.width)).collect::<Result<Vec<_>>>()?;
        let volume = header.width.pow(3) as u32;
        let y_count = header.net.latent_shape(header.width).iter().product();
        let z_count = header.net.hyper_shape(header.width).iter().product();
        let mut cubes = Vec::with_capacity(ks.len());
        for k in ks {
            if k > volume {
                return Err(Error::Corrupt(format!("k = {k} exceeds {volume}")));
            }
            let (z_range, z_stream) = match header.coding {
                LatentCoding::Hyperprior => read_stream(&mut r, z_count)?,
                LatentCoding::Factorized => ((0, 0), CodedStream { bytes: Vec::new(), symbol_count: 0 }),
            };
            let (y_range, y_stream) = read_stream(&mut r, y_count)?;
            cubes.push(CubePayload {
                k_occupied: k,
                z_range,
                y_range,
                z_stream,
                y_stream,
            });
        }
        if !r.rest().is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.rest().len())));
        }
        Ok(Self { header, index, cubes })
    }

    /// Human-readable header fields and per-cube bit accounting.
    pub fn describe(&self) -> Result<String> {
        let h = &self.header;
        let acc = self.accounting()?;
        let mut s = String::new();
        let profile = match h.net.profile_id() {
            1 => "tiny",
            2 => "desk",
            _ => "custom",
        };
        let _ = writeln!(s, "format      PCGC v{VERSION}");
        let _ = writeln!(s, "precision   {}", h.precision);
        let _ = writeln!(s, "scale       {}", h.scale);
        let _ = writeln!(s, "cube_width  {}", h.width);
        let _ = writeln!(
            s,
            "network     {profile} channels={:?} latent={} hyper={} vrn={}",
            h.net.channels, h.net.latent_channels, h.net.hyper_channels, h.net.vrn_per_stage
        );
        let _ = writeln!(s, "hyperprior  {}", if h.coding == LatentCoding::Hyperprior { "on" } else { "off" });
        let _ = writeln!(s, "grid_levels {}", h.grid_levels);
        let _ = writeln!(s, "cubes       {}", h.cube_count);
        let _ = writeln!(s, "points      {}", self.cubes.iter().map(|c| c.k_occupied as u64).sum::<u64>());
        let _ = writeln!(s, "header_bits {}", acc.header_bits);
        let _ = writeln!(s, "octree_bits {}", acc.octree_bits);
        let _ = writeln!(s, "k_bits      {}", acc.k_bits);
        let _ = writeln!(s, "payload_bits {}", acc.payload_bits);
        let _ = writeln!(s, "total_bits  {}", acc.total_bits());
        let _ = writeln!(s, "cube x y z k z_bits y_bits payload_bits");
        for (i, (pos, c)) in self.index.indices.iter().zip(&self.cubes).enumerate() {
            let _ = writeln!(
                s,
                "{i} {} {} {} {} {} {} {}",
                pos[0],
                pos[1],
                pos[2],
                c.k_occupied,
                8 * c.z_stream.bytes.len(),
                8 * c.y_stream.bytes.len(),
                c.serialized_bits(h.coding)
            );
        }
        Ok(s)
    }
}

/// Encoder settings beyond the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub scale: ScaleConfig,
    pub width: usize,
    pub coding: LatentCoding,
    /// When set, each transmitted `k` is replaced by the tuned `k_f`.
    pub rho_metric: Option<RhoMetric>,
}

impl EncodeOptions {
    pub fn new(scale: ScaleConfig, width: usize) -> Self {
        Self {
            scale,
            width,
            coding: LatentCoding::Hyperprior,
            rho_metric: None,
        }
    }
}

/// Voxelize, scale, partition and code every cube.
pub fn encode_pointcloud<T: Scalar>(points: &PointSet, model: &ModelParameters<T>, opts: &EncodeOptions) -> Result<Bitstream> {
    if points.is_empty() {
        return Err(Error::Precondition("cannot encode an empty point cloud".into()));
    }
    log2_width(opts.width)?;
    model.config().check_width(opts.width)?;
    let voxels = voxelize(points)?;
    let scaled = scale_points(&voxels, opts.scale);
    let (index, cubes) = partition(&scaled, opts.width)?;
    let payloads = cubes
        .par_iter()
        .map(|cube| {
            let mut payload = encode_cube_with(cube, model, opts.coding)?.payload;
            if let Some(metric) = opts.rho_metric {
                let dec = decode_cube_with(&payload, model, opts.width, opts.coding)?;
                let (_, kf) = tune_rho(cube, &dec.logits, metric)?;
                payload.k_occupied = kf;
            }
            Ok(payload)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bitstream {
        header: Header {
            precision: points.precision,
            scale: opts.scale,
            width: opts.width,
            net: model.config().clone(),
            coding: opts.coding,
            grid_levels: index.grid_levels,
            cube_count: index.len() as u32,
        },
        index,
        cubes: payloads,
    })
}

/// Decoded voxels on the scaled grid, before inverse scaling.
pub fn decode_voxels<T: Scalar>(bs: &Bitstream, model: &ModelParameters<T>) -> Result<VoxelSet> {
    let h = &bs.header;
    if h.net != *model.config() {
        return Err(Error::Config("bitstream was produced with a different network configuration".into()));
    }
    let cubes = bs
        .index
        .indices
        .par_iter()
        .zip(&bs.cubes)
        .map(|(&pos, payload)| {
            let mut cube = decode_cube_with(payload, model, h.width, h.coding)?.cube;
            cube.grid_pos = pos;
            Ok(cube)
        })
        .collect::<Result<Vec<_>>>()?;
    let extent = bs.index.indices.iter().flatten().copied().max().unwrap_or(0) as u64;
    let precision = bits_for((extent + 1) * h.width as u64 - 1);
    assemble(&bs.index, &cubes, h.width, precision)
}

/// Decodes, inverse scales and clamps to the original coordinate range.
pub fn decode_pointcloud<T: Scalar>(bs: &Bitstream, model: &ModelParameters<T>) -> Result<PointSet> {
    let voxels = decode_voxels(bs, model)?;
    let up = inverse_scale(&voxels, bs.header.scale);
    let max = (1u64 << bs.header.precision) - 1;
    let coords = up
        .points
        .iter()
        .map(|p| p.map(|c| c.clamp(0, max as i64) as u32))
        .collect();
    Ok(extract(&VoxelSet::from_coords(coords, bs.header.precision)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ModelF32;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, width: usize) -> Cube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density: f64 = rng.gen_range(0.01..0.3);
        let mut local = Vec::new();
        for i in 0..width as u32 {
            for j in 0..width as u32 {
                for k in 0..width as u32 {
                    if rng.gen_bool(density) {
                        local.push([i, j, k]);
                    }
                }
            }
        }
        if local.is_empty() {
            local.push([0, 0, 0]);
        }
        Cube::from_local([0; 3], width, &local)
    }

    fn model() -> ModelF32 {
        ModelParameters::<f64>::init(&NetConfig::tiny(), 7).unwrap().cast()
    }

    #[test]
    fn k_field_widths() {
        assert_eq!(k_field_bits(64).unwrap(), 18);
        assert_eq!(k_field_bits(16).unwrap(), 12);
        let mut w = BitWriter::new();
        write_k(&mut w, 1, 16).unwrap();
        write_k(&mut w, 4096, 16).unwrap();
        write_k(&mut w, 77, 16).unwrap();
        assert_eq!(w.bit_len(), 36);
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        assert_eq!(read_k(&mut r, 16).unwrap(), 1);
        assert_eq!(read_k(&mut r, 16).unwrap(), 4096);
        assert_eq!(read_k(&mut r, 16).unwrap(), 77);
        assert!(write_k(&mut BitWriter::new(), 0, 16).is_err());
        assert!(write_k(&mut BitWriter::new(), 4097, 16).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(classify_topk(&[0.9, 0.8, 0.1, 0.4], 2), vec![1, 1, 0, 0]);
        assert_eq!(classify_topk(&[0.5f64; 6], 1), vec![1, 0, 0, 0, 0, 0]);
        assert_eq!(classify_topk(&[0.3, 0.1, 0.2], 3), vec![1, 1, 1]);
        assert_eq!(classify_topk(&[0.3, 0.1, 0.2], 0), vec![0, 0, 0]);
        assert_eq!(classify_topk(&[0.2, 0.7, 0.7, 0.1], 2), vec![0, 1, 1, 0]);
    }

    #[test]
    fn fixed_threshold_is_strict() {
        assert_eq!(classify_fixed(&[0.6, 0.5, 0.4], 0.5), vec![1, 0, 0]);
    }

    proptest! {
        #[test]
        fn fixed_agrees_with_topk_without_ties(p in prop::collection::hash_set(0u32..100_000, 1..200)) {
            let p: Vec<f64> = p.into_iter().map(|v| v as f64 / 100_000.0).collect();
            let fixed = classify_fixed(&p, 0.5);
            let k = fixed.iter().filter(|&&v| v == 1).count();
            prop_assert_eq!(classify_topk(&p, k), fixed);
        }

        #[test]
        fn zigzag_roundtrip(v in any::<i32>()) {
            prop_assert_eq!(unzigzag(zigzag(v)), v);
        }
    }

    #[test]
    fn rho_on_perfect_probabilities_is_one() {
        let cube = random_cube(3, 8);
        let p: Vec<f64> = cube.occupancy.iter().map(|&o| o as f64).collect();
        for m in [RhoMetric::D1, RhoMetric::D2] {
            let (rho, kf) = tune_rho(&cube, &p, m).unwrap();
            assert_eq!(rho, 1.0);
            assert_eq!(kf, cube.k_occupied);
        }
        assert!(rho_grid().iter().all(|&r| r > 0.5 && r < 2.0));
        assert_eq!(rho_grid().len(), 29);
    }

    #[test]
    fn cube_roundtrip_and_determinism() {
        let m = model();
        for seed in 0..5 {
            let cube = random_cube(seed, 16);
            for coding in [LatentCoding::Hyperprior, LatentCoding::Factorized] {
                let enc = encode_cube_with(&cube, &m, coding).unwrap();
                let dec = decode_cube_with(&enc.payload, &m, 16, coding).unwrap();
                assert_eq!(dec.y_hat, enc.y_hat);
                assert_eq!(dec.z_hat, enc.z_hat);
                assert_eq!(dec.cube.count(), cube.k_occupied);
                let again = encode_cube_with(&cube, &m, coding).unwrap();
                assert_eq!(again.payload, enc.payload);
                let bits = enc.payload.coded_bits() as f64;
                assert!(bits <= enc.estimated_bits * 1.02 + 64.0, "{bits} vs {}", enc.estimated_bits);
            }
        }
        assert!(encode_cube(&Cube::empty([0; 3], 16), &m).is_err());
    }

    #[test]
    fn corrupt_payload_is_an_error() {
        let m = model();
        let mut p = encode_cube(&random_cube(9, 16), &m).unwrap();
        p.y_stream.bytes.truncate(p.y_stream.bytes.len() / 2);
        assert!(decode_cube(&p, &m, 16).is_err());
    }

    fn sample_cloud() -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = (0..400)
            .map(|_| {
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let z: i64 = rng.gen_range(0..40);
                [(30.0 + 20.0 * t.cos()) as i64, (30.0 + 20.0 * t.sin()) as i64, z]
            })
            .collect();
        PointSet::new(pts, 6)
    }

    #[test]
    fn pointcloud_roundtrip_through_bytes() {
        let m = model();
        let cloud = sample_cloud();
        for scale in [ScaleConfig::identity(), ScaleConfig::new(1, 2).unwrap()] {
            let opts = EncodeOptions::new(scale, 16);
            let bs = encode_pointcloud(&cloud, &m, &opts).unwrap();
            let bytes = bs.to_bytes().unwrap();
            let parsed = Bitstream::from_bytes(&bytes).unwrap();
            assert_eq!(parsed, bs);
            let vox = decode_voxels(&parsed, &m).unwrap();
            let k: u64 = bs.cubes.iter().map(|c| c.k_occupied as u64).sum();
            assert_eq!(vox.len() as u64, k);
            let out = decode_pointcloud(&parsed, &m).unwrap();
            assert_eq!(out.precision, cloud.precision);
            assert!(!out.is_empty());
            let acc = bs.accounting().unwrap();
            assert_eq!(acc.total_bits(), 8 * bytes.len() as u64);
            assert_eq!(encode_pointcloud(&cloud, &m, &opts).unwrap().to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn header_errors() {
        let m = model();
        let bs = encode_pointcloud(&sample_cloud(), &m, &EncodeOptions::new(ScaleConfig::identity(), 16)).unwrap();
        let mut bytes = bs.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Version { found: 9, expected: 1 })));
        bytes[4] = VERSION;
        bytes[0] = b'X';
        assert!(Bitstream::from_bytes(&bytes).is_err());
        let good = bs.to_bytes().unwrap();
        assert!(Bitstream::from_bytes(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(Bitstream::from_bytes(&long).is_err());
        let other: ModelF32 = ModelParameters::<f64>::init(&NetConfig::desk(), 1).unwrap().cast();
        assert!(decode_pointcloud(&bs, &other).is_err());
    }

    #[test]
    fn custom_profile_header_roundtrip() {
        let net = NetConfig {
            channels: vec![4, 8],
            latent_channels: 4,
            hyper_channels: 2,
            vrn_per_stage: 0,
        };
        let m: ModelF32 = ModelParameters::<f64>::init(&net, 2).unwrap().cast();
        let mut opts = EncodeOptions::new(ScaleConfig::identity(), 8);
        opts.coding = LatentCoding::Factorized;
        let bs = encode_pointcloud(&sample_cloud(), &m, &opts).unwrap();
        let parsed = Bitstream::from_bytes(&bs.to_bytes().unwrap()).unwrap();
        assert_eq!(parsed.header.net, net);
        assert_eq!(parsed, bs);
    }
}
