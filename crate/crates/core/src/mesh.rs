//! Marching cubes on the anisotropic inference grid, semantic vertex colors,
//! and PLY/OBJ output.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{normalize_to_unit_cube, Point3, SceneBounds, Vec3};
use crate::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::spatial::KdTree;

/// Triangles with at most this area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    /// Label of the nearest labeled surface point.
    #[default]
    Nearest,
    /// Argmax of the semantic head at the vertex.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Samples along x and y (`N_x = N_y`).
    pub resolution: usize,
    pub color_mode: ColorMode,
    pub binary_ply: bool,
    /// Cells of padding added around the observed z range.
    pub z_padding_cells: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            color_mode: ColorMode::Nearest,
            binary_ply: true,
            z_padding_cells: 2.0,
        }
    }
}

/// Sample lattice over the scene cube: `n_x * n_y` samples per layer spanning
/// the full range, `n_z` layers starting at layer `z_start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub z_start: usize,
    pub bounds: SceneBounds,
}

impl GridSpec {
    /// Full cube, `n` samples per axis.
    pub fn cube(bounds: SceneBounds, n: usize) -> Result<Self> {
        grid_spec(&bounds, bounds.g_min, bounds.g_max, n)
    }

    /// World distance between neighboring samples.
    pub fn spacing(&self) -> f64 {
        self.bounds.range() / (self.n_x - 1) as f64
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.spacing() * 3f64.sqrt()
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        let h = self.spacing();
        let g = self.bounds.g_min;
        Point3::new(
            g + i as f64 * h,
            g + j as f64 * h,
            g + (self.z_start + k) as f64 * h,
        )
    }

    fn layer_points(&self, k: usize) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.n_x * self.n_y);
        for j in 0..self.n_y {
            for i in 0..self.n_x {
                out.push(self.point(i, j, k));
            }
        }
        out
    }
}

/// `N_z = max(2, round((z_max - z_min) / range * N_x))`,
/// `Z_start = round((z_min - G_min) / range * N_x)`.
pub fn grid_spec(bounds: &SceneBounds, z_min: f64, z_max: f64, n_x: usize) -> Result<GridSpec> {
    if n_x < 2 {
        return Err(Error::param(format!("grid resolution must be >= 2, got {n_x}")));
    }
    if !(z_max > z_min) {
        return Err(Error::param(format!("empty z range [{z_min}, {z_max}]")));
    }
    if z_min < bounds.g_min || z_max > bounds.g_max {
        return Err(Error::param(format!(
            "z range [{z_min}, {z_max}] leaves scene bounds [{}, {}]",
            bounds.g_min, bounds.g_max
        )));
    }
    let range = bounds.range();
    let n_z = (((z_max - z_min) / range * n_x as f64).round() as usize).max(2);
    let z_start = ((z_min - bounds.g_min) / range * n_x as f64).round() as usize;
    Ok(GridSpec {
        n_x,
        n_y: n_x,
        n_z,
        z_start,
        bounds: *bounds,
    })
}

/// Grid over the observed z range `[z_lo, z_hi]`, padded and clipped to the
/// scene.
pub fn observed_grid(
    bounds: &SceneBounds,
    z_lo: f64,
    z_hi: f64,
    n_x: usize,
    pad_cells: f64,
) -> Result<GridSpec> {
    let pad = pad_cells * bounds.range() / n_x.max(2) as f64;
    let lo = (z_lo - pad).max(bounds.g_min);
    let hi = (z_hi + pad).min(bounds.g_max);
    grid_spec(bounds, lo, hi, n_x)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Vec<u32>,
    pub colors: Vec<[u8; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        triangle_area(&a, &b, &c)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Edges used by exactly one triangle; zero for a closed surface.
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c == 1).count()
    }

    /// Triangles whose three vertices lie inside the box, with unused
    /// vertices dropped.
    pub fn crop(&self, lo: &Point3, hi: &Point3) -> Mesh {
        let inside = |p: &Point3| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut out = Mesh::default();
        for t in &self.triangles {
            if !t.iter().all(|&i| inside(&self.vertices[i as usize])) {
                continue;
            }
            let mapped = t.map(|i| {
                let i = i as usize;
                if remap[i] == u32::MAX {
                    remap[i] = out.vertices.len() as u32;
                    out.vertices.push(self.vertices[i]);
                    if let Some(&l) = self.labels.get(i) {
                        out.labels.push(l);
                    }
                    if let Some(&c) = self.colors.get(i) {
                        out.colors.push(c);
                    }
                }
                remap[i]
            });
            out.triangles.push(mapped);
        }
        out
    }

    pub fn map_vertices(&mut self, f: impl Fn(&Point3) -> Point3) {
        for v in &mut self.vertices {
            *v = f(v);
        }
    }

    /// Appends `other`, offsetting its indices.
    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend(&other.vertices);
        self.labels.extend(&other.labels);
        self.colors.extend(&other.colors);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }
}

pub fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangles of one slab as edge keys, plus the vertex on each crossed edge.
struct SlabOutput {
    triangles: Vec<[u64; 3]>,
    vertices: HashMap<u64, Point3>,
}

/// Isosurface of sampled values: `values[k][j * n_x + i]` at `grid.point(i, j, k)`.
struct Sampled<'a> {
    grid: &'a GridSpec,
    values: Vec<Vec<f64>>,
    iso: f64,
}

impl Sampled<'_> {
    fn edge_key(&self, c: [usize; 3], axis: usize) -> u64 {
        let g = self.grid;
        (((c[2] * g.n_y + c[1]) * g.n_x + c[0]) * 3 + axis) as u64
    }

    fn value(&self, c: [usize; 3]) -> f64 {
        self.values[c[2]][c[1] * self.grid.n_x + c[0]]
    }

    fn slab(&self, k: usize) -> SlabOutput {
        let g = self.grid;
        let mut out = SlabOutput {
            triangles: Vec::new(),
            vertices: HashMap::new(),
        };
        for j in 0..g.n_y - 1 {
            for i in 0..g.n_x - 1 {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let mut case = 0usize;
                for c in 0..8 {
                    if self.value(corner(c)) < self.iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut keys = [0u64; 12];
                for (e, key) in keys.iter_mut().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (corner(EDGES[e][0]), corner(EDGES[e][1]));
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    let axis = (0..3).find(|&d| lo[d] != hi[d]).expect("edge spans one axis");
                    *key = self.edge_key(lo, axis);
                    out.vertices.entry(*key).or_insert_with(|| {
                        let (v0, v1) = (self.value(lo), self.value(hi));
                        let p0 = g.point(lo[0], lo[1], lo[2]);
                        let p1 = g.point(hi[0], hi[1], hi[2]);
                        let d = v1 - v0;
                        let t = if d.abs() > 1e-300 { ((self.iso - v0) / d).clamp(0.0, 1.0) } else { 0.5 };
                        p0 + (p1 - p0) * t
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // Table winding faces inward under the below-iso case bits.
                    out.triangles.push([
                        keys[tri[0] as usize],
                        keys[tri[2] as usize],
                        keys[tri[1] as usize],
                    ]);
                }
            }
        }
        out
    }
}

/// Marching-cubes output with the number of distinct crossed edges.
pub struct Extraction {
    pub mesh: Mesh,
    pub crossed_edges: usize,
}

/// Marching cubes on `grid` for a batch scalar function of world points.
pub fn extract_isosurface<F>(grid: &GridSpec, f: F, iso: f64, parallel: bool) -> Extraction
where
    F: Fn(&[Point3]) -> Vec<f64> + Sync,
{
    let eval = |k: usize| f(&grid.layer_points(k));
    let values: Vec<Vec<f64>> = if parallel {
        (0..grid.n_z).into_par_iter().map(eval).collect()
    } else {
        (0..grid.n_z).map(eval).collect()
    };
    let sampled = Sampled { grid, values, iso };
    let slabs: Vec<SlabOutput> = if parallel {
        (0..grid.n_z - 1).into_par_iter().map(|k| sampled.slab(k)).collect()
    } else {
        (0..grid.n_z - 1).map(|k| sampled.slab(k)).collect()
    };

    let mut crossed: Vec<u64> = slabs.iter().flat_map(|s| s.vertices.keys().copied()).collect();
    crossed.sort_unstable();
    crossed.dedup();

    let mut mesh = Mesh::default();
    let mut index: HashMap<u64, u32> = HashMap::new();
    for slab in &slabs {
        for tri in &slab.triangles {
            let pts = tri.map(|k| slab.vertices[&k]);
            if triangle_area(&pts[0], &pts[1], &pts[2]) <= MIN_TRIANGLE_AREA {
                continue;
            }
            let mut t = [0u32; 3];
            for v in 0..3 {
                t[v] = *index.entry(tri[v]).or_insert_with(|| {
                    mesh.vertices.push(pts[v]);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            mesh.triangles.push(t);
        }
    }
    Extraction {
        mesh,
        crossed_edges: crossed.len(),
    }
}

/// Zero level set of the field's geometry head; vertices in world units.
pub fn extract_mesh(field: &SceneField, grid: &GridSpec) -> Mesh {
    let bounds = grid.bounds;
    let f = |pts: &[Point3]| {
        let normalized: Vec<Point3> = pts
            .iter()
            .map(|p| p.map(|v| bounds.normalize_scalar(v)))
            .collect();
        field.eval_sdf_batch(&normalized)
    };
    extract_isosurface(grid, f, 0.0, true).mesh
}

/// Per-class RGB colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Palette {
    /// Fixed, well-separated colors; cycles after twelve classes.
    pub fn default_for(classes: usize) -> Self {
        const BASE: [[u8; 3]; 12] = [
            [128, 64, 128],
            [70, 70, 70],
            [0, 0, 142],
            [220, 20, 60],
            [107, 142, 35],
            [152, 251, 152],
            [70, 130, 180],
            [250, 170, 30],
            [220, 220, 0],
            [190, 153, 153],
            [0, 60, 100],
            [119, 11, 32],
        ];
        Self((0..classes).map(|i| BASE[i % BASE.len()]).collect())
    }

    pub fn color(&self, label: u32) -> Result<[u8; 3]> {
        self.0.get(label as usize).copied().ok_or_else(|| {
            Error::param(format!("label {label} outside palette of {} colors", self.0.len()))
        })
    }

    /// Parses `label r g b` lines; labels must cover `0..n` once each.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = (f.len() == 4)
                .then(|| {
                    Some((
                        f[0].parse::<usize>().ok()?,
                        [f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?],
                    ))
                })
                .flatten();
            entries.push(parsed.ok_or_else(|| {
                Error::format(format!("palette line {}: expected `label r g b`", n + 1))
            })?);
        }
        entries.sort_by_key(|e| e.0);
        if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
            return Err(Error::format("palette labels must be 0..n without gaps"));
        }
        Ok(Self(entries.into_iter().map(|e| e.1).collect()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
        Self::parse(&text)
    }
}

/// Where vertex labels come from.
pub enum LabelSource<'a> {
    /// Label of the nearest labeled point (world units).
    Points {
        points: &'a [Point3],
        labels: &'a [u32],
    },
    Head {
        field: &'a SceneField,
        bounds: SceneBounds,
    },
}

/// Assigns a label and color to every vertex.
pub fn colorize(mesh: &mut Mesh, source: &LabelSource, palette: &Palette) -> Result<()> {
    mesh.labels = match source {
        LabelSource::Points { points, labels } => {
            if points.is_empty() || points.len() != labels.len() {
                return Err(Error::param("nearest-label coloring needs labeled points"));
            }
            let tree = KdTree::build(points);
            mesh.vertices
                .iter()
                .map(|v| labels[tree.nearest(v).expect("non-empty").0])
                .collect()
        }
        LabelSource::Head { field, bounds } => {
            let pts = mesh
                .vertices
                .iter()
                .map(|v| {
                    normalize_to_unit_cube(v, bounds)
                        .unwrap_or_else(|_| v.map(|c| bounds.normalize_scalar(c)))
                })
                .collect::<Vec<_>>();
            field.predict_labels(&pts)
        }
    };
    mesh.colors = mesh
        .labels
        .iter()
        .map(|&l| palette.color(l))
        .collect::<Result<_>>()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn vertex_color(mesh: &Mesh, i: usize) -> [u8; 3] {
    mesh.colors.get(i).copied().unwrap_or([200, 200, 200])
}

/// PLY with `x y z red green blue` vertices; `comments` go into the header.
pub fn write_ply(mesh: &Mesh, path: &Path, format: PlyFormat, comments: &[String]) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::param("refusing to write an empty mesh"));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0")?;
    for c in comments {
        writeln!(w, "comment {}", c.replace('\n', " "))?;
    }
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices\nend_header")?;
    match format {
        PlyFormat::Ascii => {
            for (i, v) in mesh.vertices.iter().enumerate() {
                let c = vertex_color(mesh, i);
                writeln!(
                    w,
                    "{} {} {} {} {} {}",
                    v.x as f32, v.y as f32, v.z as f32, c[0], c[1], c[2]
                )?;
            }
            for t in &mesh.triangles {
                writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, v) in mesh.vertices.iter().enumerate() {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&(c as f32).to_le_bytes())?;
                }
                w.write_all(&vertex_color(mesh, i))?;
            }
            for t in &mesh.triangles {
                w.write_all(&[3])?;
                for &i in t {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::param("refusing to write an empty mesh"));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the PLY layout written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    parse_ply(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_ply(bytes: &[u8]) -> Result<Mesh> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format("missing end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("header is not UTF-8"))?;
    let mut binary = None;
    let (mut n_v, mut n_f) = (None, None);
    for line in header.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(Error::format(format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => n_v = n.parse::<usize>().ok(),
            ["element", "face", n] => n_f = n.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (binary, n_v, n_f) = match (binary, n_v, n_f) {
        (Some(b), Some(v), Some(f)) => (b, v, f),
        _ => return Err(Error::format("PLY header lacks format or element counts")),
    };
    let body = &bytes[header_end..];
    let mut mesh = Mesh::default();
    let bad = || Error::format("PLY body does not match header");
    if binary {
        let need = n_v * 15 + n_f * 13;
        if body.len() != need {
            return Err(bad());
        }
        let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
        for v in 0..n_v {
            let o = v * 15;
            mesh.vertices.push(Point3::new(f32_at(o), f32_at(o + 4), f32_at(o + 8)));
            mesh.colors.push([body[o + 12], body[o + 13], body[o + 14]]);
        }
        for t in 0..n_f {
            let o = n_v * 15 + t * 13;
            if body[o] != 3 {
                return Err(Error::format("only triangle faces are supported"));
            }
            let idx = |k: usize| i32::from_le_bytes(body[o + 1 + 4 * k..o + 5 + 4 * k].try_into().unwrap());
            mesh.triangles.push([idx(0) as u32, idx(1) as u32, idx(2) as u32]);
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| bad())?;
        let mut lines = text.lines();
        for _ in 0..n_v {
            let f: Vec<&str> = lines.next().ok_or_else(bad)?.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let c = |i: usize| f[i].parse::<f32>().map(f64::from).map_err(|_| bad());
            let u = |i: usize| f[i].parse::<u8>().map_err(|_| bad());
            mesh.vertices.push(Point3::new(c(0)?, c(1)?, c(2)?));
            mesh.colors.push([u(3)?, u(4)?, u(5)?]);
        }
        for _ in 0..n_f {
            let f: Vec<u32> = lines
                .next()
                .ok_or_else(bad)?
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if f.len() != 4 || f[0] != 3 {
                return Err(Error::format("only triangle faces are supported"));
            }
            mesh.triangles.push([f[1], f[2], f[3]]);
        }
    }
    if mesh
        .triangles
        .iter()
        .flatten()
        .any(|&i| i as usize >= mesh.vertices.len())
    {
        return Err(Error::format("face index out of range"));
    }
    Ok(mesh)
}

/// Unit normal of triangle `t` by its winding.
pub fn triangle_normal(mesh: &Mesh, t: usize) -> Vec3 {
    let [a, b, c] = mesh.triangle(t);
    (b - a).cross(&(c - a)).normalize()
}
