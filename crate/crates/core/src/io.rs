//! ASCII PLY reading/writing and the point list ↔ voxel set conversions.

use std::fmt::Write as _;

use crate::{Error, Result};

/// Integer point list in voxel units. May contain duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointSet {
    pub points: Vec<[i64; 3]>,
    /// Bits per axis.
    pub precision: u8,
}

impl PointSet {
    pub fn new(points: Vec<[i64; 3]>, precision: u8) -> Self {
        Self { points, precision }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Equality as sets: order and multiplicity are ignored.
    pub fn same_set(&self, other: &PointSet) -> bool {
        let norm = |p: &PointSet| {
            let mut v = p.points.clone();
            v.sort_unstable();
            v.dedup();
            v
        };
        norm(self) == norm(other)
    }

    pub fn as_f64(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

/// Occupied voxel coordinates, sorted and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VoxelSet {
    occupied: Vec<[u32; 3]>,
    pub precision: u8,
}

impl VoxelSet {
    /// Builds a set from arbitrary coordinates; duplicates are merged.
    pub fn from_coords(mut coords: Vec<[u32; 3]>, precision: u8) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self {
            occupied: coords,
            precision,
        }
    }

    pub fn occupied(&self) -> &[[u32; 3]] {
        &self.occupied
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn contains(&self, v: [u32; 3]) -> bool {
        self.occupied.binary_search(&v).is_ok()
    }
}

/// Smallest bit depth able to hold `max` (at least one bit).
pub fn bits_for(max: u64) -> u8 {
    (64 - max.leading_zeros()).max(1) as u8
}

#[derive(Debug)]
struct ElementDecl {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Parses an ASCII PLY file. Float coordinates are rounded half away from
/// zero; properties other than `x`, `y`, `z` are skipped. The precision is the
/// smallest bit depth that holds the largest coordinate.
pub fn parse_ply(bytes: &[u8]) -> Result<PointSet> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Ply {
        line: 0,
        msg: format!("not utf-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, msg: &str| Error::Ply {
        line,
        msg: msg.to_string(),
    };

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(err(n, "missing 'ply' magic")),
        None => return Err(err(1, "empty input")),
    }

    let mut elements: Vec<ElementDecl> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => match tok.next() {
                Some("ascii") => {}
                Some(other) => return Err(err(n, &format!("unsupported format '{other}'"))),
                None => return Err(err(n, "malformed format line")),
            },
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| err(n, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| err(n, "element without valid count"))?;
                elements.push(ElementDecl {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element"))?;
                let parts: Vec<&str> = tok.collect();
                let name = match parts.as_slice() {
                    ["list", _, _, name] => name,
                    [_, name] => name,
                    _ => return Err(err(n, "malformed property line")),
                };
                el.props.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(err(n, &format!("unknown header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(err(last_line, "missing end_header"));
    }

    let mut points = Vec::new();
    for el in &elements {
        let axes = if el.name == "vertex" {
            let find = |a: &str| {
                el.props
                    .iter()
                    .position(|p| p == a)
                    .ok_or_else(|| err(last_line, &format!("vertex element lacks property '{a}'")))
            };
            Some([find("x")?, find("y")?, find("z")?])
        } else {
            None
        };
        for _ in 0..el.count {
            let (n, line) = loop {
                match lines.next() {
                    Some((_, "")) => continue,
                    Some(l) => break l,
                    None => {
                        return Err(err(
                            last_line,
                            &format!("element count mismatch for '{}'", el.name),
                        ))
                    }
                }
            };
            last_line = n;
            let Some(axes) = axes else { continue };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < el.props.len() {
                return Err(err(n, "too few values on vertex line"));
            }
            let mut p = [0i64; 3];
            for (slot, &ax) in p.iter_mut().zip(&axes) {
                let v: f64 = fields[ax]
                    .parse()
                    .map_err(|_| err(n, &format!("invalid number '{}'", fields[ax])))?;
                if !v.is_finite() {
                    return Err(err(n, "non-finite coordinate"));
                }
                *slot = v.round() as i64;
            }
            points.push(p);
        }
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(err(n, "element count mismatch: trailing data after last element"));
    }

    let max = points
        .iter()
        .flat_map(|p| p.iter())
        .map(|&c| c.max(0) as u64)
        .max()
        .unwrap_or(0);
    Ok(PointSet::new(points, bits_for(max)))
}

/// Serializes as ASCII PLY with integer `x y z` properties and LF endings.
pub fn write_ply(points: &PointSet) -> Vec<u8> {
    let mut s = String::with_capacity(64 + points.len() * 12);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property int x\nproperty int y\nproperty int z\nend_header\n");
    for p in &points.points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s.into_bytes()
}

/// Merges duplicate points into an occupancy set, checking the precision range.
pub fn voxelize(points: &PointSet) -> Result<VoxelSet> {
    let max = (1i64 << points.precision) - 1;
    let mut coords = Vec::with_capacity(points.len());
    for &p in &points.points {
        if p.iter().any(|&c| c < 0 || c > max) {
            return Err(Error::OutOfRange {
                coord: p,
                precision: points.precision,
            });
        }
        coords.push([p[0] as u32, p[1] as u32, p[2] as u32]);
    }
    Ok(VoxelSet::from_coords(coords, points.precision))
}

/// One point per occupied voxel.
pub fn extract(voxels: &VoxelSet) -> PointSet {
    PointSet::new(
        voxels
            .occupied()
            .iter()
            .map(|v| [v[0] as i64, v[1] as i64, v[2] as i64])
            .collect(),
        voxels.precision,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ply(body: &str, n: usize) -> Vec<u8> {
        format!(
            "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n{body}"
        )
        .into_bytes()
    }

    #[test]
    fn single_origin_vertex() {
        let p = parse_ply(&ply("0 0 0\n", 1)).unwrap();
        assert_eq!(p.points, vec![[0, 0, 0]]);
    }

    #[test]
    fn rounds_half_away_from_zero() {
        let p = parse_ply(&ply("1.4 2.6 3.5\n", 1)).unwrap();
        assert_eq!(p.points, vec![[1, 3, 4]]);
        let p = parse_ply(&ply("-0.5 -1.5 2.5\n", 1)).unwrap();
        assert_eq!(p.points, vec![[-1, -2, 3]]);
    }

    #[test]
    fn count_mismatch_is_reported() {
        let e = parse_ply(&ply("1 2 3\n", 2)).unwrap_err();
        assert!(e.to_string().contains("element count mismatch"), "{e}");
    }

    #[test]
    fn non_finite_coordinate_names_line() {
        let e = parse_ply(&ply("1 2 3\nnan 0 0\n", 2)).unwrap_err();
        match e {
            Error::Ply { line, msg } => {
                assert_eq!(line, 9);
                assert!(msg.contains("non-finite"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn skips_extra_properties_and_elements() {
        let src = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 255 2 3\n4 0 5 6\n3 0 1 1\n";
        let p = parse_ply(src.as_bytes()).unwrap();
        assert_eq!(p.points, vec![[1, 2, 3], [4, 5, 6]]);
        assert_eq!(p.precision, 3);
    }

    #[test]
    fn malformed_header() {
        assert!(parse_ply(b"plx\n").is_err());
        assert!(parse_ply(b"ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\n").is_err());
    }

    #[test]
    fn write_empty_and_single() {
        let s = String::from_utf8(write_ply(&PointSet::new(vec![], 10))).unwrap();
        assert!(s.contains("element vertex 0\n"));
        assert!(s.ends_with("end_header\n"));
        let s = String::from_utf8(write_ply(&PointSet::new(vec![[1, 2, 3]], 10))).unwrap();
        assert!(s.ends_with("end_header\n1 2 3\n"));
    }

    #[test]
    fn voxelize_merges_and_checks_range() {
        let v = voxelize(&PointSet::new(vec![[0, 0, 0], [0, 0, 0]], 10)).unwrap();
        assert_eq!(v.len(), 1);
        let v = voxelize(&PointSet::new(vec![[1, 2, 3], [3, 2, 1]], 10)).unwrap();
        assert_eq!(v.len(), 2);
        assert!(matches!(
            voxelize(&PointSet::new(vec![[1024, 0, 0]], 10)),
            Err(Error::OutOfRange { .. })
        ));
        assert!(voxelize(&PointSet::new(vec![[1023, 1023, 1023]], 10)).is_ok());
    }

    #[test]
    fn extract_cases() {
        assert!(extract(&VoxelSet::default()).is_empty());
        let v = VoxelSet::from_coords(vec![[5, 5, 5]], 4);
        assert_eq!(extract(&v).points, vec![[5, 5, 5]]);
    }

    proptest! {
        #[test]
        fn ply_roundtrip(pts in prop::collection::vec((0i64..1024, 0i64..1024, 0i64..1024), 0..1000)) {
            let p = PointSet::new(pts.into_iter().map(|(a, b, c)| [a, b, c]).collect(), 10);
            let back = parse_ply(&write_ply(&p)).unwrap();
            prop_assert!(back.same_set(&p));
            prop_assert_eq!(back.points, p.points);
        }

        #[test]
        fn voxel_extract_roundtrip(pts in prop::collection::vec((0u32..256, 0u32..256, 0u32..256), 0..500)) {
            let v = VoxelSet::from_coords(pts.into_iter().map(|(a, b, c)| [a, b, c]).collect(), 8);
            let back = voxelize(&extract(&v)).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(voxelize(&extract(&back)).unwrap(), back);
        }
    }
}
