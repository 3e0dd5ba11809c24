//! Scaling, cube partitioning and octree signalling of cube positions.

use std::collections::BTreeMap;

use num_rational::Ratio;

use crate::io::{bits_for, PointSet, VoxelSet};
use crate::{Error, Result};

/// Exact positive scale factor applied to coordinates before partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleConfig {
    ratio: Ratio<u32>,
}

impl ScaleConfig {
    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if numer == 0 || denom == 0 {
            return Err(Error::Config(format!("scale {numer}/{denom} must be positive")));
        }
        Ok(Self {
            ratio: Ratio::new(numer, denom),
        })
    }

    pub fn identity() -> Self {
        Self {
            ratio: Ratio::from_integer(1),
        }
    }

    pub fn numer(&self) -> u32 {
        *self.ratio.numer()
    }

    pub fn denom(&self) -> u32 {
        *self.ratio.denom()
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    /// Parses `a/b` or a bare integer.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid scale '{s}', expected a/b"));
        match s.split_once('/') {
            Some((a, b)) => Self::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => Self::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl std::fmt::Display for ScaleConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

// round(c·n/d) with ties away from zero, for c ≥ 0.
fn mul_round(c: u32, n: u32, d: u32) -> u64 {
    (2 * c as u64 * n as u64 + d as u64) / (2 * d as u64)
}

/// Multiplies every coordinate by `s`, rounds half away from zero and drops
/// the duplicates this creates.
pub fn scale_points(voxels: &VoxelSet, scale: ScaleConfig) -> VoxelSet {
    let (n, d) = (scale.numer(), scale.denom());
    if n == d {
        return voxels.clone();
    }
    let max_in = (1u64 << voxels.precision) - 1;
    let precision = bits_for(mul_round(max_in as u32, n, d));
    let coords = voxels
        .occupied()
        .iter()
        .map(|v| v.map(|c| mul_round(c, n, d) as u32))
        .collect();
    VoxelSet::from_coords(coords, precision)
}

/// Multiplies by `1/s` with the same rounding rule as [`scale_points`].
pub fn inverse_scale(voxels: &VoxelSet, scale: ScaleConfig) -> PointSet {
    let (n, d) = (scale.numer(), scale.denom());
    let max_in = (1u64 << voxels.precision) - 1;
    let precision = if n == d {
        voxels.precision
    } else {
        bits_for(mul_round(max_in as u32, d, n))
    };
    PointSet::new(
        voxels
            .occupied()
            .iter()
            .map(|v| v.map(|c| mul_round(c, d, n) as i64))
            .collect(),
        precision,
    )
}

/// One `W×W×W` partition unit. Occupancy is linearized as `(i·W + j)·W + k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cube {
    pub grid_pos: [u32; 3],
    pub width: usize,
    pub occupancy: Vec<u8>,
    pub k_occupied: u32,
}

impl Cube {
    pub fn empty(grid_pos: [u32; 3], width: usize) -> Self {
        Self {
            grid_pos,
            width,
            occupancy: vec![0; width * width * width],
            k_occupied: 0,
        }
    }

    /// Builds a cube from local coordinates; `k_occupied` is the resulting count.
    pub fn from_local(grid_pos: [u32; 3], width: usize, local: &[[u32; 3]]) -> Self {
        let mut cube = Self::empty(grid_pos, width);
        for &l in local {
            let i = cube.index(l);
            cube.occupancy[i] = 1;
        }
        cube.k_occupied = cube.count();
        cube
    }

    pub fn index(&self, local: [u32; 3]) -> usize {
        let w = self.width;
        (local[0] as usize * w + local[1] as usize) * w + local[2] as usize
    }

    pub fn local_coords(&self, index: usize) -> [u32; 3] {
        let w = self.width;
        [(index / (w * w)) as u32, ((index / w) % w) as u32, (index % w) as u32]
    }

    pub fn count(&self) -> u32 {
        self.occupancy.iter().filter(|&&v| v != 0).count() as u32
    }

    /// Occupied voxels as local coordinates, in linear index order.
    pub fn occupied_local(&self) -> Vec<[u32; 3]> {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.local_coords(i))
            .collect()
    }
}

/// Occupied cube positions plus the octree depth that spans them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeIndexSet {
    /// Sorted by Morton code.
    pub indices: Vec<[u32; 3]>,
    pub grid_levels: u8,
}

impl CubeIndexSet {
    pub fn new(mut indices: Vec<[u32; 3]>, grid_levels: u8) -> Result<Self> {
        if grid_levels == 0 || grid_levels > 21 {
            return Err(Error::Config(format!("grid_levels {grid_levels} outside 1..=21")));
        }
        let limit = 1u64 << grid_levels;
        if let Some(bad) = indices.iter().find(|p| p.iter().any(|&c| c as u64 >= limit)) {
            return Err(Error::Precondition(format!(
                "cube index {bad:?} does not fit {grid_levels} octree levels"
            )));
        }
        indices.sort_unstable_by_key(|&p| morton(p, grid_levels));
        indices.dedup();
        Ok(Self {
            indices,
            grid_levels,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Interleaves the low `levels` bits of `(i, j, k)`, `i` most significant.
pub fn morton(p: [u32; 3], levels: u8) -> u64 {
    let mut code = 0u64;
    for b in (0..levels).rev() {
        for c in p {
            code = (code << 1) | ((c >> b) & 1) as u64;
        }
    }
    code
}

fn demorton(code: u64, levels: u8) -> [u32; 3] {
    let mut p = [0u32; 3];
    for b in 0..levels {
        let group = (code >> (3 * b as u64)) & 7;
        p[0] |= (((group >> 2) & 1) as u32) << b;
        p[1] |= (((group >> 1) & 1) as u32) << b;
        p[2] |= ((group & 1) as u32) << b;
    }
    p
}

fn check_width(width: usize) -> Result<()> {
    if width < 2 || !width.is_power_of_two() || width > 1 << 10 {
        return Err(Error::Config(format!(
            "cube width {width} must be a power of two in 2..=1024"
        )));
    }
    Ok(())
}

/// Splits a voxel set into non-empty cubes of width `width`, in ascending
/// Morton order of their grid positions.
pub fn partition(voxels: &VoxelSet, width: usize) -> Result<(CubeIndexSet, Vec<Cube>)> {
    check_width(width)?;
    let w = width as u32;
    let mut groups: BTreeMap<[u32; 3], Vec<[u32; 3]>> = BTreeMap::new();
    for v in voxels.occupied() {
        let pos = v.map(|c| c / w);
        let local = [v[0] - pos[0] * w, v[1] - pos[1] * w, v[2] - pos[2] * w];
        groups.entry(pos).or_default().push(local);
    }
    let max_idx = groups.keys().flat_map(|p| p.iter()).copied().max().unwrap_or(0);
    let levels = bits_for(max_idx as u64);
    let index = CubeIndexSet::new(groups.keys().copied().collect(), levels)?;
    let cubes = index
        .indices
        .iter()
        .map(|pos| Cube::from_local(*pos, width, &groups[pos]))
        .collect();
    Ok((index, cubes))
}

/// Inverse of [`partition`].
pub fn assemble(
    index: &CubeIndexSet,
    cubes: &[Cube],
    width: usize,
    precision: u8,
) -> Result<VoxelSet> {
    check_width(width)?;
    let mut seen = std::collections::HashSet::new();
    let mut coords = Vec::new();
    for cube in cubes {
        if cube.width != width || cube.occupancy.len() != width.pow(3) {
            return Err(Error::Shape(format!(
                "cube at {:?} has width {} but {width} was expected",
                cube.grid_pos, cube.width
            )));
        }
        if !seen.insert(cube.grid_pos) {
            return Err(Error::Corrupt(format!("duplicate cube index {:?}", cube.grid_pos)));
        }
        let base = cube.grid_pos.map(|c| c * width as u32);
        for l in cube.occupied_local() {
            coords.push([base[0] + l[0], base[1] + l[1], base[2] + l[2]]);
        }
    }
    if cubes.len() != index.len() {
        return Err(Error::Precondition(format!(
            "{} cubes supplied for {} indices",
            cubes.len(),
            index.len()
        )));
    }
    Ok(VoxelSet::from_coords(coords, precision))
}

/// Breadth-first octree occupancy bytes. Each occupied internal node emits
/// one byte; child `c = (i_bit<<2)|(j_bit<<1)|k_bit` maps to bit `7 − c`.
pub fn encode_cube_positions(index: &CubeIndexSet) -> Vec<u8> {
    let levels = index.grid_levels;
    let codes: Vec<u64> = index.indices.iter().map(|&p| morton(p, levels)).collect();
    let mut out = Vec::new();
    for depth in 0..levels {
        let child_shift = 3 * (levels - depth - 1) as u64;
        let parent_shift = child_shift + 3;
        let mut current: Option<(u64, u8)> = None;
        for &code in &codes {
            let parent = code >> parent_shift;
            let child = ((code >> child_shift) & 7) as u8;
            match &mut current {
                Some((p, byte)) if *p == parent => *byte |= 0x80 >> child,
                _ => {
                    if let Some((_, byte)) = current {
                        out.push(byte);
                    }
                    current = Some((parent, 0x80 >> child));
                }
            }
        }
        if let Some((_, byte)) = current {
            out.push(byte);
        }
    }
    out
}

/// Decodes octree bytes from the front of `bytes`, returning the positions
/// and the number of bytes consumed.
pub fn decode_cube_positions_prefix(bytes: &[u8], grid_levels: u8) -> Result<(CubeIndexSet, usize)> {
    if grid_levels == 0 || grid_levels > 21 {
        return Err(Error::Config(format!("grid_levels {grid_levels} outside 1..=21")));
    }
    let mut nodes = vec![0u64];
    let mut pos = 0;
    for depth in 0..grid_levels {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &node in &nodes {
            let byte = *bytes.get(pos).ok_or_else(|| {
                Error::Truncated(format!("octree ended at depth {depth}, byte {pos}"))
            })?;
            pos += 1;
            if byte == 0 {
                return Err(Error::Corrupt(format!("empty octree node at byte {}", pos - 1)));
            }
            for c in 0..8u64 {
                if byte & (0x80 >> c) != 0 {
                    next.push((node << 3) | c);
                }
            }
        }
        nodes = next;
    }
    let indices = nodes.iter().map(|&c| demorton(c, grid_levels)).collect();
    Ok((CubeIndexSet::new(indices, grid_levels)?, pos))
}

/// Decodes octree bytes; the whole slice must be consumed.
pub fn decode_cube_positions(bytes: &[u8], grid_levels: u8) -> Result<CubeIndexSet> {
    let (set, used) = decode_cube_positions_prefix(bytes, grid_levels)?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after octree",
            bytes.len() - used
        )));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vs(c: &[[u32; 3]], p: u8) -> VoxelSet {
        VoxelSet::from_coords(c.to_vec(), p)
    }

    #[test]
    fn scale_examples() {
        let half = ScaleConfig::new(1, 2).unwrap();
        assert_eq!(scale_points(&vs(&[[10, 10, 10]], 10), half).occupied(), &[[5, 5, 5]]);
        let got = scale_points(&vs(&[[1, 2, 3], [2, 3, 5]], 10), half);
        assert_eq!(got.occupied(), &[[1, 1, 2], [1, 2, 3]]);
        let v = vs(&[[3, 7, 1], [0, 0, 9]], 4);
        assert_eq!(scale_points(&v, ScaleConfig::identity()), v);
    }

    #[test]
    fn inverse_scale_examples() {
        let half = ScaleConfig::new(1, 2).unwrap();
        assert_eq!(inverse_scale(&vs(&[[5, 5, 5]], 9), half).points, vec![[10, 10, 10]]);
        assert_eq!(inverse_scale(&vs(&[[1, 1, 2]], 9), half).points, vec![[2, 2, 4]]);
        let v = vs(&[[3, 7, 1]], 4);
        let p = inverse_scale(&v, ScaleConfig::identity());
        assert_eq!(p.points, vec![[3, 7, 1]]);
        assert_eq!(p.precision, 4);
    }

    #[test]
    fn scale_parse() {
        assert_eq!(ScaleConfig::parse("1/2").unwrap(), ScaleConfig::new(2, 4).unwrap());
        assert_eq!(ScaleConfig::parse("1").unwrap(), ScaleConfig::identity());
        assert!(ScaleConfig::parse("0/3").is_err());
        assert!(ScaleConfig::parse("x").is_err());
    }

    #[test]
    fn partition_local_coordinates() {
        let (idx, cubes) = partition(&vs(&[[3, 1, 0]], 2), 2).unwrap();
        assert_eq!(idx.indices, vec![[1, 0, 0]]);
        assert_eq!(cubes[0].occupied_local(), vec![[1, 1, 0]]);
        assert_eq!(cubes[0].k_occupied, 1);
    }

    #[test]
    fn partition_single_cube() {
        let (idx, cubes) = partition(&vs(&[[0, 0, 0], [7, 7, 7], [3, 2, 1]], 3), 8).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(cubes.len(), 1);
        assert_eq!(cubes[0].k_occupied, 3);
    }

    #[test]
    fn assemble_examples() {
        let idx = CubeIndexSet::new(vec![[0, 0, 0]], 1).unwrap();
        let c = Cube::from_local([0, 0, 0], 2, &[[1, 1, 0]]);
        assert_eq!(assemble(&idx, &[c], 2, 4).unwrap().occupied(), &[[1, 1, 0]]);

        let idx = CubeIndexSet::new(vec![[0, 0, 0], [1, 0, 0]], 1).unwrap();
        let a = Cube::from_local([0, 0, 0], 2, &[[1, 1, 1]]);
        let b = Cube::from_local([1, 0, 0], 2, &[[0, 0, 0]]);
        let got = assemble(&idx, &[a.clone(), b], 2, 4).unwrap();
        assert_eq!(got.occupied(), &[[1, 1, 1], [2, 0, 0]]);

        let dup = assemble(&idx, &[a.clone(), a], 2, 4);
        assert!(matches!(dup, Err(Error::Corrupt(_))));
    }

    #[test]
    fn octree_goldens() {
        let one = CubeIndexSet::new(vec![[0, 0, 0]], 1).unwrap();
        assert_eq!(encode_cube_positions(&one), vec![0b1000_0000]);
        let mut all = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    all.push([i, j, k]);
                }
            }
        }
        let full = CubeIndexSet::new(all, 1).unwrap();
        assert_eq!(encode_cube_positions(&full), vec![0xFF]);
        // (1,0,0) is child 4, (0,0,1) child 1; at depth 2 the root holds both
        // in child 0, which has children 1 and 4.
        let two = CubeIndexSet::new(vec![[1, 0, 0], [0, 0, 1]], 2).unwrap();
        assert_eq!(encode_cube_positions(&two), vec![0b1000_0000, 0b0100_1000]);
    }

    #[test]
    fn octree_truncation_and_corruption() {
        let s = CubeIndexSet::new(vec![[3, 1, 2], [0, 0, 0]], 2).unwrap();
        let bytes = encode_cube_positions(&s);
        assert!(matches!(
            decode_cube_positions(&bytes[..bytes.len() - 1], 2),
            Err(Error::Truncated(_))
        ));
        assert!(decode_cube_positions(&[0], 1).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_cube_positions(&extra, 2).is_err());
    }

    fn voxel_strategy() -> impl Strategy<Value = VoxelSet> {
        prop::collection::vec((0u32..200, 0u32..200, 0u32..200), 1..300)
            .prop_map(|v| VoxelSet::from_coords(v.into_iter().map(|(a, b, c)| [a, b, c]).collect(), 8))
    }

    proptest! {
        #[test]
        fn partition_assemble_roundtrip(v in voxel_strategy(), wexp in 3u32..7) {
            let w = 1usize << wexp;
            let (idx, cubes) = partition(&v, w).unwrap();
            let total: u32 = cubes.iter().map(|c| c.k_occupied).sum();
            prop_assert_eq!(total as usize, v.len());
            prop_assert!(cubes.iter().all(|c| c.k_occupied >= 1));
            prop_assert_eq!(assemble(&idx, &cubes, w, 8).unwrap(), v);
        }

        #[test]
        fn octree_roundtrip(pts in prop::collection::vec((0u32..64, 0u32..64, 0u32..64), 1..200), extra in 0u8..3) {
            let levels = 6 + extra;
            let s = CubeIndexSet::new(pts.into_iter().map(|(a, b, c)| [a, b, c]).collect(), levels).unwrap();
            let bytes = encode_cube_positions(&s);
            // One byte per occupied internal node, never more than leaves·depth.
            prop_assert!(bytes.len() <= s.len() * levels as usize);
            prop_assert_eq!(decode_cube_positions(&bytes, levels).unwrap(), s);
        }

        #[test]
        fn downscale_never_grows(v in voxel_strategy(), d in 1u32..5) {
            let s = ScaleConfig::new(1, d).unwrap();
            prop_assert!(scale_points(&v, s).len() <= v.len());
        }
    }
}
