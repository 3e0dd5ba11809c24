//! Encode/decode evaluation of whole point clouds and the RD table.

use std::fmt::Write as _;

use crate::codec::{decode_pointcloud, encode_pointcloud, BitAccounting, Bitstream, EncodeOptions};
use crate::io::{bits_for, PointSet};
use crate::metrics::{d1_mse, d2_mse, estimate_normals, psnr};
use crate::preprocess::{Cube, ScaleConfig};
use crate::transforms::ModelParameters;
use crate::{Result, Scalar};

/// Neighbours used for D2 normals.
pub const NORMAL_NEIGHBOURS: usize = 20;

/// Outcome of one encode/decode pass over a cloud.
#[derive(Debug, Clone)]
pub struct CloudEval {
    pub bitstream: Bitstream,
    pub decoded: PointSet,
    pub bits: BitAccounting,
    pub bpp: f64,
    pub d1_psnr: f64,
    /// `None` when either side has fewer than three points.
    pub d2_psnr: Option<f64>,
}

/// Encodes, serializes, parses back and decodes `cloud`, then measures it.
pub fn evaluate_cloud<T: Scalar>(cloud: &PointSet, model: &ModelParameters<T>, opts: &EncodeOptions) -> Result<CloudEval> {
    let bs = encode_pointcloud(cloud, model, opts)?;
    let bytes = bs.to_bytes()?;
    let parsed = Bitstream::from_bytes(&bytes)?;
    let decoded = decode_pointcloud(&parsed, model)?;
    let bits = parsed.accounting()?;
    let bpp = bits.total_bits() as f64 / cloud.len() as f64;
    let d1 = if decoded.is_empty() { f64::INFINITY } else { d1_mse(cloud, &decoded)? };
    let d2 = if cloud.len() >= 3 && decoded.len() >= 3 {
        let na = estimate_normals(&cloud.as_f64(), NORMAL_NEIGHBOURS)?;
        let nb = estimate_normals(&decoded.as_f64(), NORMAL_NEIGHBOURS)?;
        Some(psnr(d2_mse(cloud, &decoded, &na, &nb)?, cloud.precision))
    } else {
        None
    };
    Ok(CloudEval {
        bitstream: parsed,
        decoded,
        bits,
        bpp,
        d1_psnr: psnr(d1, cloud.precision),
        d2_psnr: d2,
    })
}

/// Lays cubes side by side on a 4×4×n grid of cube slots as one cloud.
pub fn cubes_as_cloud(cubes: &[Cube]) -> PointSet {
    let Some(w) = cubes.first().map(|c| c.width) else {
        return PointSet::new(Vec::new(), 1);
    };
    let mut points = Vec::new();
    for (i, cube) in cubes.iter().enumerate() {
        let slot = [i % 4, (i / 4) % 4, i / 16].map(|s| (s * w) as i64);
        for l in cube.occupied_local() {
            points.push([slot[0] + l[0] as i64, slot[1] + l[1] as i64, slot[2] + l[2] as i64]);
        }
    }
    let extent = points.iter().flatten().copied().max().unwrap_or(0);
    PointSet::new(points, bits_for(extent as u64))
}

/// Intersection over union of two occupancy grids of equal size.
pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One row of the RD table.
#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub cloud: String,
    pub scale: ScaleConfig,
    pub lambda: Option<f64>,
    pub bpp: f64,
    pub d1_psnr: f64,
    pub d2_psnr: Option<f64>,
    pub meta_bits: u64,
    pub payload_bits: u64,
}

/// A model under evaluation with the λ it was trained at, when known.
pub struct RunModel<'a, T: Scalar> {
    pub model: &'a ModelParameters<T>,
    pub lambda: Option<f64>,
}

/// Evaluates every (model, scale) pair on every named cloud. Rows are
/// ordered by cloud, then model, then scale.
pub fn eval_run<T: Scalar>(
    models: &[RunModel<T>],
    corpus: &[(String, PointSet)],
    scales: &[ScaleConfig],
    base: &EncodeOptions,
) -> Result<Vec<RdRow>> {
    let mut rows = Vec::new();
    for (name, cloud) in corpus {
        for m in models {
            for &scale in scales {
                let opts = EncodeOptions { scale, ..*base };
                let e = evaluate_cloud(cloud, m.model, &opts)?;
                rows.push(RdRow {
                    cloud: name.clone(),
                    scale,
                    lambda: m.lambda,
                    bpp: e.bpp,
                    d1_psnr: e.d1_psnr,
                    d2_psnr: e.d2_psnr,
                    meta_bits: e.bits.meta_bits(),
                    payload_bits: e.bits.payload_bits,
                });
            }
        }
    }
    Ok(rows)
}

/// CSV with header `cloud,scale,lambda,bpp,d1_psnr,d2_psnr,meta_bits,payload_bits`.
/// Unknown values are left empty; infinite PSNR is written as `inf`.
pub fn rd_table_csv(rows: &[RdRow]) -> String {
    let mut s = String::from("cloud,scale,lambda,bpp,d1_psnr,d2_psnr,meta_bits,payload_bits\n");
    for r in rows {
        let lambda = r.lambda.map(|l| l.to_string()).unwrap_or_default();
        let d2 = r.d2_psnr.map(fmt_db).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{}/{},{},{:.6},{},{},{},{}",
            r.cloud,
            r.scale.numer(),
            r.scale.denom(),
            lambda,
            r.bpp,
            fmt_db(r.d1_psnr),
            d2,
            r.meta_bits,
            r.payload_bits
        );
    }
    s
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}
