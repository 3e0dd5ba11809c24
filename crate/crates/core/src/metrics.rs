//! Geometry distortion and rate-distortion summaries.
//!
//! Neighbour queries are exact. Ties between equidistant neighbours go to the
//! lower point index so every metric is reproducible.

use std::cmp::Ordering;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::io::PointSet;
use crate::{Error, Result};

/// Balanced 3-d tree stored implicitly: the node of a range `[lo, hi)` is
/// its midpoint, split on axis `depth % 3`.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `(distance², index)` ordering used for every neighbour tie-break.
fn closer(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(&points, &mut order, 0);
        Self { points, order }
    }

    fn build(points: &[[f64; 3]], order: &mut [usize], depth: usize) {
        if order.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let (left, right) = order.split_at_mut(mid);
        Self::build(points, left, depth + 1);
        Self::build(points, &mut right[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search_nearest(q, 0, self.order.len(), 0, &mut best);
        (best.1 != usize::MAX).then_some((best.1, best.0))
    }

    fn search_nearest(&self, q: &[f64; 3], lo: usize, hi: usize, depth: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.order[mid];
        let cand = (dist2(q, &self.points[p]), p);
        if closer(cand, *best) {
            *best = cand;
        }
        let axis = depth % 3;
        let diff = q[axis] - self.points[p][axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_nearest(q, first.0, first.1, depth + 1, best);
        if diff * diff <= best.0 {
            self.search_nearest(q, second.0, second.1, depth + 1, best);
        }
    }

    /// The `k` nearest points as `(index, distance²)`, closest first.
    pub fn k_nearest(&self, q: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search_k(q, k, 0, self.order.len(), 0, &mut found);
        }
        found.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn search_k(&self, q: &[f64; 3], k: usize, lo: usize, hi: usize, depth: usize, found: &mut Vec<(f64, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.order[mid];
        let cand = (dist2(q, &self.points[p]), p);
        if found.len() < k || closer(cand, found[found.len() - 1]) {
            let at = found.partition_point(|&f| closer(f, cand));
            found.insert(at, cand);
            found.truncate(k);
        }
        let axis = depth % 3;
        let diff = q[axis] - self.points[p][axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(q, k, first.0, first.1, depth + 1, found);
        if found.len() < k || diff * diff <= found[found.len() - 1].0 {
            self.search_k(q, k, second.0, second.1, depth + 1, found);
        }
    }
}

fn non_empty(p: &[[f64; 3]], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Precondition(format!("{what} point set is empty")));
    }
    Ok(())
}

/// `e(A, B)`: mean over `a ∈ A` of the squared distance to its nearest `b`.
pub fn d1_one_sided(a: &[[f64; 3]], b: &KdTree) -> f64 {
    let sum: f64 = a.iter().map(|q| b.nearest(q).map_or(f64::INFINITY, |n| n.1)).sum();
    sum / a.len() as f64
}

/// Symmetric point-to-point MSE, `max(e(A,B), e(B,A))`.
pub fn d1_mse(a: &PointSet, b: &PointSet) -> Result<f64> {
    d1_mse_f64(&a.as_f64(), &b.as_f64())
}

pub fn d1_mse_f64(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    let ta = KdTree::new(a.to_vec());
    let tb = KdTree::new(b.to_vec());
    Ok(d1_one_sided(a, &tb).max(d1_one_sided(b, &ta)))
}

/// Unit normal per point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Vec<[f64; 3]>,
}

/// `e(A, B)` under point-to-plane distance: the error from `a` to its
/// nearest `b`, projected on the normal at `b`.
pub fn d2_one_sided(a: &[[f64; 3]], b: &KdTree, normals_b: &NormalField) -> Result<f64> {
    if normals_b.normals.len() != b.len() {
        return Err(Error::Precondition(format!(
            "{} normals for {} points",
            normals_b.normals.len(),
            b.len()
        )));
    }
    non_empty(a, "query")?;
    let mut sum = 0.0;
    for q in a {
        let (i, _) = b.nearest(q).ok_or_else(|| Error::Precondition("reference point set is empty".into()))?;
        let p = b.point(i);
        let n = normals_b.normals[i];
        let e = (q[0] - p[0]) * n[0] + (q[1] - p[1]) * n[1] + (q[2] - p[2]) * n[2];
        sum += e * e;
    }
    Ok(sum / a.len() as f64)
}

/// Symmetric point-to-plane MSE. Each direction projects on the normals of
/// its reference side.
pub fn d2_mse(a: &PointSet, b: &PointSet, normals_a: &NormalField, normals_b: &NormalField) -> Result<f64> {
    d2_mse_f64(&a.as_f64(), &b.as_f64(), normals_a, normals_b)
}

pub fn d2_mse_f64(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    normals_a: &NormalField,
    normals_b: &NormalField,
) -> Result<f64> {
    non_empty(a, "first")?;
    non_empty(b, "second")?;
    let ta = KdTree::new(a.to_vec());
    let tb = KdTree::new(b.to_vec());
    Ok(d2_one_sided(a, &tb, normals_b)?.max(d2_one_sided(b, &ta, normals_a)?))
}

/// Normals from PCA over each point's `k` nearest neighbours (itself
/// included, fewer if the cloud is smaller). The sign makes the first
/// non-zero of `z`, `y`, `x` positive.
pub fn estimate_normals(points: &[[f64; 3]], k: usize) -> Result<NormalField> {
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "normal estimation needs at least 3 points, got {}",
            points.len()
        )));
    }
    let tree = KdTree::new(points.to_vec());
    let k = k.clamp(3, points.len());
    let normals = points
        .iter()
        .map(|q| {
            let nb = tree.k_nearest(q, k);
            let mut mean = [0.0; 3];
            for &(i, _) in &nb {
                for (m, c) in mean.iter_mut().zip(points[i]) {
                    *m += c;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nb.len() as f64);
            let mut cov = Matrix3::<f64>::zeros();
            for &(i, _) in &nb {
                let d = nalgebra::Vector3::from_fn(|r, _| points[i][r] - mean[r]);
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let j = eig.eigenvalues.imin();
            let v = eig.eigenvectors.column(j).normalize();
            orient([v[0], v[1], v[2]])
        })
        .collect();
    Ok(NormalField { normals })
}

fn orient(v: [f64; 3]) -> [f64; 3] {
    const EPS: f64 = 1e-12;
    for axis in [2, 1, 0] {
        if v[axis].abs() > EPS {
            return if v[axis] < 0.0 { v.map(|c| -c) } else { v };
        }
    }
    v
}

/// `10·log10(3p² / mse)` with peak `p = 2^precision − 1`; `+∞` when `mse = 0`.
pub fn psnr(mse: f64, precision: u8) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let p = ((1u64 << precision) - 1) as f64;
    10.0 * (3.0 * p * p / mse).log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    /// Bits per input point.
    pub bpp: f64,
    pub psnr: f64,
}

/// Monotone piecewise cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone)]
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = Self::end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = Self::end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    }

    fn segment(&self, t: f64) -> usize {
        self.x.partition_point(|&v| v <= t).clamp(1, self.x.len() - 1) - 1
    }

    fn eval_in(&self, i: usize, t: f64) -> f64 {
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[i]
            + (s3 - 2.0 * s2 + s) * h * self.d[i]
            + (-2.0 * s3 + 3.0 * s2) * self.y[i + 1]
            + (s3 - s2) * h * self.d[i + 1]
    }

    /// Exact integral over `[a, b]`: Simpson's rule per cubic piece.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for i in self.segment(a)..=self.segment(b) {
            let lo = a.max(self.x[i]);
            let hi = b.min(self.x[i + 1]);
            if hi <= lo {
                continue;
            }
            let m = 0.5 * (lo + hi);
            total += (hi - lo) / 6.0 * (self.eval_in(i, lo) + 4.0 * self.eval_in(i, m) + self.eval_in(i, hi));
        }
        total
    }
}

fn rd_curve(points: &[RdPoint], name: &str) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(Error::Precondition(format!("curve {name} needs at least 4 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.bpp > 0.0) || !p.psnr.is_finite() || !p.bpp.is_finite()) {
        return Err(Error::Precondition(format!("curve {name} has an invalid point {p:?}")));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
    if pts.windows(2).any(|w| w[0].psnr == w[1].psnr) {
        return Err(Error::Precondition(format!("curve {name} repeats a PSNR value")));
    }
    Ok(Pchip::new(
        pts.iter().map(|p| p.psnr).collect(),
        pts.iter().map(|p| p.bpp.log10()).collect(),
    ))
}

/// Average rate difference of `b` against `a` in percent at equal PSNR,
/// over the PSNR interval both curves cover.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    let ca = rd_curve(a, "A")?;
    let cb = rd_curve(b, "B")?;
    let lo = ca.x[0].max(cb.x[0]);
    let hi = ca.x[ca.x.len() - 1].min(cb.x[cb.x.len() - 1]);
    if hi.partial_cmp(&lo) != Some(Ordering::Greater) {
        return Err(Error::Precondition("the two curves share no PSNR range".into()));
    }
    let avg = (cb.integrate(lo, hi) - ca.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nearest(pts: &[[f64; 3]], q: &[f64; 3]) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, p) in pts.iter().enumerate() {
            let c = (dist2(q, p), i);
            if closer(c, best) {
                best = c;
            }
        }
        (best.1, best.0)
    }

    fn ps(p: &[[i64; 3]]) -> PointSet {
        PointSet::new(p.to_vec(), 4)
    }

    #[test]
    fn d1_hand_values() {
        let a = ps(&[[0, 0, 0]]);
        let b = ps(&[[1, 0, 0]]);
        assert_eq!(d1_mse(&a, &b).unwrap(), 1.0);
        assert_eq!(d1_mse(&a, &a).unwrap(), 0.0);
        let a2 = ps(&[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(d1_mse(&a2, &a).unwrap(), 2.0);
        assert!(d1_mse(&ps(&[]), &a).is_err());
    }

    #[test]
    fn d2_hand_values() {
        let b = KdTree::new(vec![[0.0; 3]]);
        let n = NormalField { normals: vec![[1.0, 0.0, 0.0]] };
        assert_eq!(d2_one_sided(&[[1.0, 1.0, 0.0]], &b, &n).unwrap(), 1.0);
        assert_eq!(d2_one_sided(&[[0.0, 3.0, -2.0]], &b, &n).unwrap(), 0.0);
        assert!(d2_one_sided(&[[0.0; 3]], &b, &NormalField { normals: vec![] }).is_err());
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let nf = estimate_normals(&pts, 20).unwrap();
        assert_eq!(d2_mse_f64(&pts, &pts, &nf, &nf).unwrap(), 0.0);
    }

    #[test]
    fn moving_a_reference_point_away_never_lowers_error() {
        let a = [[0.0, 0.0, 0.0], [3.0, 1.0, 0.0]];
        let mut b = vec![[1.0, 0.0, 0.0], [2.0, 2.0, 2.0]];
        let before = d1_one_sided(&a, &KdTree::new(b.clone()));
        b[0] = [2.0, 0.0, 0.0];
        assert!(d1_one_sided(&a, &KdTree::new(b)) >= before);
    }

    #[test]
    fn plane_normals() {
        let pts: Vec<[f64; 3]> = (0..8).flat_map(|i| (0..8).map(move |j| [i as f64, j as f64, 0.0])).collect();
        for n in estimate_normals(&pts, 20).unwrap().normals {
            assert!((n[2] - 1.0).abs() < 1e-9, "{n:?}");
        }
        assert!(estimate_normals(&pts[..2], 20).is_err());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let r = 50.0;
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..80 {
                let th = std::f64::consts::PI * (i as f64 + 0.5) / 40.0;
                let ph = 2.0 * std::f64::consts::PI * j as f64 / 80.0;
                pts.push([r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]);
            }
        }
        let a = estimate_normals(&pts, 20).unwrap();
        let b = estimate_normals(&pts, 20).unwrap();
        assert_eq!(a, b);
        for (p, n) in pts.iter().zip(&a.normals) {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-6);
            let dot = (p[0] * n[0] + p[1] * n[1] + p[2] * n[2]) / r;
            assert!(dot.abs() > 0.9, "{dot}");
        }
    }

    #[test]
    fn psnr_values() {
        assert!((psnr(1.0, 10) - 64.97).abs() < 0.01);
        let p = 1023.0f64;
        assert!(psnr(3.0 * p * p, 10).abs() < 1e-12);
        assert_eq!(psnr(0.0, 10), f64::INFINITY);
        assert!(psnr(2.0, 10) < psnr(1.0, 10));
    }

    fn curve(rates: [f64; 4]) -> Vec<RdPoint> {
        let q = [30.0, 34.0, 37.0, 41.0];
        rates.iter().zip(q).map(|(&bpp, psnr)| RdPoint { bpp, psnr }).collect()
    }

    #[test]
    fn bd_rate_oracles() {
        let a = curve([0.1, 0.25, 0.5, 1.2]);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let double: Vec<_> = a.iter().map(|p| RdPoint { bpp: 2.0 * p.bpp, ..*p }).collect();
        let half: Vec<_> = a.iter().map(|p| RdPoint { bpp: 0.5 * p.bpp, ..*p }).collect();
        assert!((bd_rate(&a, &double).unwrap() - 100.0).abs() < 0.5);
        assert!((bd_rate(&a, &half).unwrap() + 50.0).abs() < 0.5);
        let ab = bd_rate(&a, &double).unwrap();
        let ba = bd_rate(&double, &a).unwrap();
        assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 0.01);
        let far: Vec<_> = a.iter().map(|p| RdPoint { psnr: p.psnr + 100.0, ..*p }).collect();
        assert!(bd_rate(&a, &far).is_err());
        assert!(bd_rate(&a[..3], &a).is_err());
    }

    #[test]
    fn pchip_reproduces_lines_and_stays_monotone() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        assert!((p.integrate(0.0, 4.0) - 20.0).abs() < 1e-12);
        let q = Pchip::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, 1.0]);
        let mut prev = -1.0;
        for i in 0..=300 {
            let t = i as f64 / 100.0;
            let v = q.eval_in(q.segment(t), t);
            assert!(v >= prev - 1e-12 && (-1e-12..=1.0 + 1e-12).contains(&v));
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn kd_tree_matches_brute_force(
            pts in prop::collection::vec((0i32..12, 0i32..12, 0i32..12), 1..120),
            qs in prop::collection::vec((-2i32..14, -2i32..14, -2i32..14), 1..20),
            k in 1usize..25,
        ) {
            let pts: Vec<[f64; 3]> = pts.iter().map(|&(a, b, c)| [a as f64, b as f64, c as f64]).collect();
            let tree = KdTree::new(pts.clone());
            for (a, b, c) in qs {
                let q = [a as f64, b as f64, c as f64];
                prop_assert_eq!(tree.nearest(&q).unwrap(), brute_nearest(&pts, &q));
                let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (dist2(&q, p), i)).collect();
                all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let want: Vec<(usize, f64)> = all.iter().take(k).map(|&(d, i)| (i, d)).collect();
                prop_assert_eq!(tree.k_nearest(&q, k), want);
            }
        }
    }
}
