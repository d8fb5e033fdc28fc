//! Zero-isosurface extraction by marching cubes, and ASCII PLY I/O.
//!
//! The case table is built at first use from the face configurations of
//! each cube: every face contributes oriented segments between its edge
//! crossings, and the segments chain into closed polygons that are fan
//! triangulated. Faces with diagonal sign pattern always separate the
//! inside corners, so neighbouring cells agree on shared faces.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::field::{morton_decode, CORNER_OFFSETS};
use crate::network::NeuralMap;

/// Corner pairs of the 12 cube edges, grouped by axis.
pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [2, 3],
    [4, 5],
    [6, 7],
    [0, 2],
    [1, 3],
    [4, 6],
    [5, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Cube faces as corner cycles, counter-clockwise seen from outside.
const FACES: [[usize; 4]; 6] = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES.iter().position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a)).expect("adjacent corners")
}

fn build_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    // next[e] = edge that the oriented contour visits after e.
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), inside(a)));
            }
        }
        // An exit (inside to outside) is joined to the entry that precedes
        // it along the cycle, cutting off the inside arc between them.
        let n = crossings.len();
        for (i, &(e, exits)) in crossings.iter().enumerate() {
            if exits {
                let (entry, _) = crossings[(i + n - 1) % n];
                next[e] = entry;
            }
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut polygon = Vec::new();
        let mut e = start;
        while !used[e] {
            used[e] = true;
            polygon.push(e as u8);
            e = next[e];
        }
        for i in 1..polygon.len() - 1 {
            tris.push([polygon[0], polygon[i], polygon[i + 1]]);
        }
    }
    tris
}

/// Triangles (as edge triples) for each of the 256 inside/outside patterns.
/// Bit `c` of the case index is set when corner `c` is inside.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: Vec<_> = (0..256).map(build_case).collect();
        // Orient so normals point from inside to outside: with corner 0
        // inside, the normal must point into the cube.
        let mid = |e: u8| {
            let [a, b] = EDGES[e as usize];
            let p = |c: usize| Vector3::from(CORNER_OFFSETS[c].map(|v| v as f64));
            (p(a) + p(b)) * 0.5
        };
        let [a, b, c] = table[1][0];
        let n = (mid(b) - mid(a)).cross(&(mid(c) - mid(a)));
        if n.dot(&Vector3::new(1.0, 1.0, 1.0)) < 0.0 {
            for tris in &mut table {
                for t in tris.iter_mut() {
                    t.swap(1, 2);
                }
            }
        }
        table
    })
}

/// Anything that can be sampled on a grid. `None` marks unobserved space.
pub trait ScalarField: Sync {
    fn value(&self, x: &Vector3<f64>) -> Option<f64>;
}

/// Points where some level is allocated count as observed; missing finer
/// levels contribute nothing.
impl ScalarField for NeuralMap {
    fn value(&self, x: &Vector3<f64>) -> Option<f64> {
        let e = self.predict(x, self.all_levels());
        e.any_observed().then_some(e.value)
    }
}

impl<F: Fn(&Vector3<f64>) -> Option<f64> + Sync> ScalarField for F {
    fn value(&self, x: &Vector3<f64>) -> Option<f64> {
        self(x)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} references a missing vertex")));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        Ok(())
    }

    fn corners(&self, t: &[u32; 3]) -> [Vector3<f64>; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// `ceil(area * density)` points drawn uniformly over the surface.
    pub fn sample_surface(&self, density: f64, seed: u64) -> Vec<Vector3<f64>> {
        let areas: Vec<f64> = self.triangles.iter().map(|t| self.triangle_area(t)).collect();
        let total: f64 = areas.iter().sum();
        if total <= 0.0 {
            return self.vertices.clone();
        }
        let n = (total * density).ceil() as usize;
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = rng.random_range(0.0..total);
                let k = cdf.partition_point(|&c| c <= u).min(areas.len() - 1);
                let [a, b, c] = self.corners(&self.triangles[k]);
                let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property double x\nproperty double y\nproperty double z\n");
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_ply().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Reads ASCII PLY with `x y z` vertex properties and an optional face
    /// list. Polygons are fan triangulated.
    pub fn read_ply(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let perr = |line: usize, message: &str| Error::Parse { path: path.to_path_buf(), line, message: message.into() };
        let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
        let mut header_ok = false;
        let mut first = true;
        for (i, line) in lines.by_ref() {
            let line = line?;
            let line = line.trim();
            if first {
                if line != "ply" {
                    return Err(perr(i + 1, "missing 'ply' magic"));
                }
                first = false;
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(perr(i + 1, "only ASCII PLY is supported")),
                ["element", name, count] => {
                    let n = count.parse().map_err(|_| perr(i + 1, "bad element count"))?;
                    elements.push((name.to_string(), n, Vec::new()));
                }
                ["property", rest @ ..] => {
                    let name = rest.last().ok_or_else(|| perr(i + 1, "empty property"))?;
                    let el = elements.last_mut().ok_or_else(|| perr(i + 1, "property before element"))?;
                    el.2.push(name.to_string());
                }
                ["end_header"] => {
                    header_ok = true;
                    break;
                }
                _ => {}
            }
        }
        if !header_ok {
            return Err(perr(0, "unterminated header"));
        }
        let mut mesh = TriangleMesh::default();
        for (name, count, props) in &elements {
            let pos = |p: &str| props.iter().position(|q| q == p);
            for _ in 0..*count {
                let (i, line) = lines.next().ok_or_else(|| perr(0, "truncated body"))?;
                let line = line?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| perr(i + 1, "bad number")))
                    .collect::<Result<_>>()?;
                match name.as_str() {
                    "vertex" => {
                        let (Some(x), Some(y), Some(z)) = (pos("x"), pos("y"), pos("z")) else {
                            return Err(perr(i + 1, "vertex element lacks x, y or z"));
                        };
                        if vals.len() < props.len() {
                            return Err(perr(i + 1, "short vertex row"));
                        }
                        mesh.vertices.push(Vector3::new(vals[x], vals[y], vals[z]));
                    }
                    "face" => {
                        let n = *vals.first().ok_or_else(|| perr(i + 1, "empty face row"))? as usize;
                        if vals.len() < n + 1 {
                            return Err(perr(i + 1, "short face row"));
                        }
                        let idx: Vec<u32> = vals[1..=n].iter().map(|v| *v as u32).collect();
                        for k in 1..n.saturating_sub(1) {
                            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                        }
                    }
                    _ => {}
                }
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Sample lattice: node `n` sits at `origin + (n + 1/2) * step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: Vector3<f64>,
    pub step: f64,
}

impl Lattice {
    pub fn node(&self, n: [i64; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(n[0] as f64 + 0.5, n[1] as f64 + 0.5, n[2] as f64 + 0.5) * self.step
    }
}

/// Marching cubes over the lattice cells whose lower node lies in the given
/// voxels (grid `voxel_size` anchored at `origin`) or their 26 neighbours.
/// Cells with any unobserved node are skipped.
pub fn extract_mesh(
    field: &dyn ScalarField,
    origin: Vector3<f64>,
    voxel_size: f64,
    voxels: &[[i64; 3]],
    resolution: f64,
) -> Result<TriangleMesh> {
    if !(resolution > 0.0) || resolution > voxel_size * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} must be positive and at most the voxel size {voxel_size}"
        )));
    }
    if voxels.is_empty() {
        return Ok(TriangleMesh::default());
    }
    let m = (voxel_size / resolution).round().max(1.0) as i64;
    let lattice = Lattice { origin, step: voxel_size / m as f64 };

    let mut region: Vec<[i64; 3]> = Vec::with_capacity(voxels.len() * 27);
    for v in voxels {
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    region.push([v[0] + dx, v[1] + dy, v[2] + dz]);
                }
            }
        }
    }
    region.sort_unstable_by_key(|v| (v[2], v[1], v[0]));
    region.dedup();

    let mut cells: Vec<[i64; 3]> = Vec::with_capacity(region.len() * (m * m * m) as usize);
    for v in &region {
        for c in 0..m {
            for b in 0..m {
                for a in 0..m {
                    cells.push([v[0] * m + a, v[1] * m + b, v[2] * m + c]);
                }
            }
        }
    }
    cells.sort_unstable_by_key(|c| (c[2], c[1], c[0]));

    let mut nodes: Vec<[i64; 3]> = cells
        .iter()
        .flat_map(|c| CORNER_OFFSETS.iter().map(move |o| [c[0] + o[0] as i64, c[1] + o[1] as i64, c[2] + o[2] as i64]))
        .collect();
    nodes.sort_unstable_by_key(|c| (c[2], c[1], c[0]));
    nodes.dedup();
    let values: Vec<Option<f64>> = nodes.par_iter().map(|n| field.value(&lattice.node(*n))).collect();
    let lookup: FxHashMap<[i64; 3], Option<f64>> = nodes.into_iter().zip(values).collect();

    let table = case_table();
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: FxHashMap<([i64; 3], u8), u32> = FxHashMap::default();
    for c in &cells {
        let mut vals = [0.0; 8];
        let mut observed = true;
        for (k, o) in CORNER_OFFSETS.iter().enumerate() {
            match lookup[&[c[0] + o[0] as i64, c[1] + o[1] as i64, c[2] + o[2] as i64]] {
                Some(v) => vals[k] = v,
                None => {
                    observed = false;
                    break;
                }
            }
        }
        if !observed {
            continue;
        }
        let case = (0..8).filter(|&k| vals[k] < 0.0).fold(0usize, |acc, k| acc | 1 << k);
        for tri in &table[case] {
            let mut idx = [0u32; 3];
            for (slot, &e) in tri.iter().enumerate() {
                let [a, b] = EDGES[e as usize];
                let oa = CORNER_OFFSETS[a];
                let na = [c[0] + oa[0] as i64, c[1] + oa[1] as i64, c[2] + oa[2] as i64];
                let axis = (e / 4) as u8;
                idx[slot] = *edge_vertex.entry((na, axis)).or_insert_with(|| {
                    let (va, vb) = (vals[a], vals[b]);
                    let t = va / (va - vb);
                    let pa = lattice.node(na);
                    let ob = CORNER_OFFSETS[b];
                    let pb = lattice.node([c[0] + ob[0] as i64, c[1] + ob[1] as i64, c[2] + ob[2] as i64]);
                    mesh.vertices.push(pa + (pb - pa) * t);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
                mesh.triangles.push(idx);
            }
        }
    }
    Ok(mesh)
}

/// Mesh of the model's zero level set over its allocated fine voxels.
pub fn extract_map_mesh(map: &NeuralMap, resolution: f64) -> Result<TriangleMesh> {
    let fine = map.octree.fine_level();
    let voxels: Vec<[i64; 3]> = map
        .octree
        .level(fine)
        .sorted_voxel_keys()
        .into_iter()
        .map(|k| morton_decode(k).map(|v| v as i64))
        .collect();
    extract_mesh(map, *map.octree.min_corner(), map.fine_voxel_size(), &voxels, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::OctreeConfig;
    use std::collections::HashMap;

    fn corner(c: usize) -> Vector3<f64> {
        Vector3::from(CORNER_OFFSETS[c].map(|v| v as f64))
    }

    #[test]
    fn trivial_cases_are_empty() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
    }

    #[test]
    fn single_corner_case_is_one_triangle() {
        for c in 0..8 {
            let tris = &case_table()[1 << c];
            assert_eq!(tris.len(), 1);
            let mut edges: Vec<u8> = tris[0].to_vec();
            edges.sort();
            let mut expect: Vec<u8> =
                (0..12u8).filter(|&e| EDGES[e as usize].contains(&c)).collect();
            expect.sort();
            assert_eq!(edges, expect);
        }
    }

    #[test]
    fn every_case_uses_exactly_the_crossed_edges() {
        for case in 0..256usize {
            let crossed: Vec<u8> = (0..12u8)
                .filter(|&e| {
                    let [a, b] = EDGES[e as usize];
                    (case >> a & 1) != (case >> b & 1)
                })
                .collect();
            let mut used: Vec<u8> = case_table()[case].iter().flatten().copied().collect();
            used.sort();
            used.dedup();
            assert_eq!(used, crossed, "case {case}");
        }
    }

    #[test]
    fn complement_cases_have_the_same_triangle_count_when_unambiguous() {
        // Case 3 (edge), case 15 (face) are the canonical quads.
        assert_eq!(case_table()[3].len(), 2);
        assert_eq!(case_table()[15].len(), 2);
        assert_eq!(case_table()[255 - 1].len(), 1);
    }

    #[test]
    fn normals_point_from_inside_to_outside() {
        for case in 1..255usize {
            let inside: Vec<usize> = (0..8).filter(|k| case >> k & 1 == 1).collect();
            let outside: Vec<usize> = (0..8).filter(|k| case >> k & 1 == 0).collect();
            for t in &case_table()[case] {
                let p = t.map(|e| {
                    let [a, b] = EDGES[e as usize];
                    (corner(a) + corner(b)) * 0.5
                });
                let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
                let centroid = (p[0] + p[1] + p[2]) / 3.0;
                // The nearest corner on the normal side must be outside, the
                // nearest one behind must be inside.
                let along = |cs: &[usize]| cs.iter().map(|&c| (corner(c) - centroid).dot(&n)).fold(f64::NEG_INFINITY, f64::max);
                if inside.len() == 1 {
                    assert!(along(&inside) < 0.0, "case {case}");
                }
                if outside.len() == 1 {
                    assert!(along(&outside) > 0.0, "case {case}");
                }
            }
        }
    }

    fn sphere_field(r: f64) -> impl Fn(&Vector3<f64>) -> Option<f64> + Sync {
        move |x: &Vector3<f64>| Some(x.norm() - r)
    }

    fn shell_voxels(r: f64, vs: f64) -> Vec<[i64; 3]> {
        let n = ((r + 2.0 * vs) / vs).ceil() as i64;
        let mut out = Vec::new();
        for z in -n..n {
            for y in -n..n {
                for x in -n..n {
                    let c = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * vs;
                    if (c.norm() - r).abs() < vs {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sphere_vertices_lie_on_surface() {
        let (r, vs) = (2.0, 0.05);
        let origin = Vector3::zeros();
        let voxels = shell_voxels(r, vs);
        let mesh = extract_mesh(&sphere_field(r), origin, vs, &voxels, vs).unwrap();
        assert!(mesh.triangles.len() > 1000);
        mesh.validate().unwrap();
        for v in &mesh.vertices {
            assert!((v.norm() - r).abs() < 0.05);
        }
        let area = mesh.area();
        let exact = 4.0 * std::f64::consts::PI * r * r;
        assert!((area - exact).abs() / exact < 0.02, "area {area} vs {exact}");
    }

    #[test]
    fn closed_surface_is_watertight_and_consistently_oriented() {
        let voxels = shell_voxels(1.0, 0.1);
        let mesh = extract_mesh(&sphere_field(1.0), Vector3::zeros(), 0.1, &voxels, 0.1).unwrap();
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &n) in &directed {
            assert_eq!(n, 1, "directed edge repeated");
            assert_eq!(directed.get(&(b, a)), Some(&1), "edge without opposite twin");
        }
        // Outward orientation gives positive enclosed volume.
        let vol: f64 = mesh
            .triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum();
        assert!((vol - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.05, "volume {vol}");
    }

    #[test]
    fn vertices_lie_on_sign_changing_edges() {
        let field = |x: &Vector3<f64>| Some((x.x * 3.1).sin() + (x.y * 2.3).cos() * 0.7 + x.z * 0.4 - 0.2);
        let voxels: Vec<[i64; 3]> =
            (0..8).flat_map(|z| (0..8).flat_map(move |y| (0..8).map(move |x| [x, y, z]))).collect();
        let lattice = Lattice { origin: Vector3::zeros(), step: 0.25 };
        let mesh = extract_mesh(&field, lattice.origin, 0.25, &voxels, 0.25).unwrap();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            // Find the lattice edge the vertex sits on.
            let g = (v / 0.25).add_scalar(-0.5);
            let frac: Vec<f64> = g.iter().map(|c| c - c.round()).collect();
            let axis = (0..3).max_by(|&a, &b| frac[a].abs().total_cmp(&frac[b].abs())).unwrap();
            let mut lo = [g.x.round() as i64, g.y.round() as i64, g.z.round() as i64];
            lo[axis] = g[axis].floor() as i64;
            let mut hi = lo;
            hi[axis] += 1;
            let (a, b) = (field(&lattice.node(lo)).unwrap(), field(&lattice.node(hi)).unwrap());
            assert!((a < 0.0) != (b < 0.0), "vertex {v:?} not on a crossing edge");
        }
    }

    #[test]
    fn unobserved_cells_are_skipped() {
        let field = |x: &Vector3<f64>| if x.x > 0.2 { None } else { Some(x.z - 0.1) };
        let voxels = [[0, 0, 0], [1, 0, 0]];
        let mesh = extract_mesh(&field, Vector3::zeros(), 0.1, &voxels, 0.1).unwrap();
        assert!(mesh.vertices.iter().all(|v| v.x <= 0.2));
    }

    #[test]
    fn untrained_model_gives_empty_mesh() {
        let mut map = NeuralMap::zeroed(OctreeConfig::default()).unwrap();
        map.octree.allocate_for_points(&[Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 1.0, 1.0)]);
        let mesh = extract_map_mesh(&map, 0.05).unwrap();
        assert!(mesh.is_empty());
        let empty = NeuralMap::zeroed(OctreeConfig::default()).unwrap();
        assert!(extract_map_mesh(&empty, 0.05).unwrap().is_empty());
        assert!(extract_map_mesh(&empty, 0.2).is_err());
    }

    #[test]
    fn mesh_is_independent_of_input_order() {
        let voxels = shell_voxels(0.7, 0.1);
        let mut reversed = voxels.clone();
        reversed.reverse();
        let a = extract_mesh(&sphere_field(0.7), Vector3::zeros(), 0.1, &voxels, 0.05).unwrap();
        let b = extract_mesh(&sphere_field(0.7), Vector3::zeros(), 0.1, &reversed, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_ply(), b.to_ply());
    }

    #[test]
    fn ply_round_trip() {
        let voxels = shell_voxels(0.5, 0.1);
        let mesh = extract_mesh(&sphere_field(0.5), Vector3::zeros(), 0.1, &voxels, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        mesh.write_ply(&path).unwrap();
        assert_eq!(TriangleMesh::read_ply(&path).unwrap(), mesh);
        let empty = dir.path().join("e.ply");
        TriangleMesh::default().write_ply(&empty).unwrap();
        assert!(TriangleMesh::read_ply(&empty).unwrap().is_empty());
        std::fs::write(&empty, "ply\nformat ascii 1.0\nelement vertex 1\n").unwrap();
        assert!(TriangleMesh::read_ply(&empty).is_err());
    }

    #[test]
    fn surface_sampling_density() {
        let mesh = TriangleMesh {
            vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
        };
        let pts = mesh.sample_surface(10.0, 1);
        assert_eq!(pts.len(), 10);
        assert!(pts.iter().all(|p| p.z == 0.0 && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    }
}
