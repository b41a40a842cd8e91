//! Triangle meshes, point clouds, ASCII PLY serialization, and uniform
//! surface sampling.
//!
//! Kept deliberately small:
//! - vertices are double precision; triangles are index triples
//! - the PLY writer emits `double` vertex properties so geometry round-trips
//!   exactly; the reader accepts `float` or `double` and is panic-free on
//!   arbitrary bytes (it is a fuzz target)
//! - surface sampling is area-weighted with a seeded generator, so metric
//!   numbers are reproducible run to run

use crate::error::{EngineError, Result};
use crate::math::{v3, Vec3};
use rand::{Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

/// Zero-area threshold for the degenerate-triangle filter.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * (b - a).cross(c - a).norm()
}

impl Mesh {
    /// Index-range and finiteness contract; meshes from our own extraction
    /// always pass, meshes parsed from disk might not.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.vertices.len() as u32;
        for (i, v) in self.vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(format!("vertex {i} is not finite"));
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&ix| ix >= n) {
                return Err(format!("triangle {i} references a missing vertex"));
            }
        }
        Ok(())
    }

    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                triangle_area(
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                )
            })
            .sum()
    }

    /// Drops triangles with area at or below [`DEGENERATE_AREA`]; returns
    /// how many were removed. Vertices are left untouched.
    pub fn filter_degenerate(&mut self) -> usize {
        let before = self.triangles.len();
        let verts = &self.vertices;
        self.triangles.retain(|t| {
            triangle_area(
                verts[t[0] as usize],
                verts[t[1] as usize],
                verts[t[2] as usize],
            ) > DEGENERATE_AREA
        });
        before - self.triangles.len()
    }

    /// Uniform area-weighted surface sampling with a seeded generator.
    pub fn sample_points(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if self.triangles.is_empty() {
            return Err(EngineError::Config("cannot sample an empty mesh".into()));
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            total += triangle_area(
                self.vertices[t[0] as usize],
                self.vertices[t[1] as usize],
                self.vertices[t[2] as usize],
            );
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(EngineError::Config("mesh has zero total area".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.gen_range(0.0..total);
            let ti = cumulative.partition_point(|&c| c <= r).min(self.triangles.len() - 1);
            let t = self.triangles[ti];
            let (a, b, c) = (
                self.vertices[t[0] as usize],
                self.vertices[t[1] as usize],
                self.vertices[t[2] as usize],
            );
            // square-root warp gives a uniform distribution over the triangle
            let su = rng.gen_range(0.0f64..1.0).sqrt();
            let v = rng.gen_range(0.0f64..1.0);
            let p = a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
            points.push(p);
        }
        Ok(PointCloud { points })
    }

    pub fn encode_ply(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = writeln!(out, "ply");
        let _ = writeln!(out, "format ascii 1.0");
        let _ = writeln!(out, "element vertex {}", self.vertices.len());
        let _ = writeln!(out, "property double x");
        let _ = writeln!(out, "property double y");
        let _ = writeln!(out, "property double z");
        let _ = writeln!(out, "element face {}", self.triangles.len());
        let _ = writeln!(out, "property list uchar int vertex_indices");
        let _ = writeln!(out, "end_header");
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
        }
        out
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ply())
            .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }
}

impl PointCloud {
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let _ = writeln!(out, "ply");
        let _ = writeln!(out, "format ascii 1.0");
        let _ = writeln!(out, "element vertex {}", self.points.len());
        let _ = writeln!(out, "property double x");
        let _ = writeln!(out, "property double y");
        let _ = writeln!(out, "property double z");
        let _ = writeln!(out, "element face 0");
        let _ = writeln!(out, "property list uchar int vertex_indices");
        let _ = writeln!(out, "end_header");
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        std::fs::write(path, out).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }
}

/// Panic-free ASCII PLY reader for the subset this crate writes: double or
/// float `x y z` vertex properties (in that order, other scalar properties
/// are tolerated and skipped) and triangular faces.
pub fn parse_ply(bytes: &[u8]) -> std::result::Result<Mesh, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| "not utf-8 text".to_string())?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut n_vertex: Option<usize> = None;
    let mut n_face: Option<usize> = None;
    let mut vertex_props: usize = 0;
    let mut xyz_at: [Option<usize>; 3] = [None; 3];
    let mut in_element = String::new();
    let mut format_seen = false;
    let mut header_done = false;
    for line in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err("only ascii format is supported".into());
                }
                format_seen = true;
            }
            Some("comment") => {}
            Some("element") => {
                let kind = tok.next().ok_or("element without a name")?;
                let count: usize = tok
                    .next()
                    .ok_or("element without a count")?
                    .parse()
                    .map_err(|_| "bad element count".to_string())?;
                in_element = kind.to_string();
                match kind {
                    "vertex" => {
                        if n_vertex.is_some() {
                            return Err("duplicate vertex element".into());
                        }
                        n_vertex = Some(count);
                    }
                    "face" => {
                        if n_face.is_some() {
                            return Err("duplicate face element".into());
                        }
                        n_face = Some(count);
                    }
                    _ => {
                        if count != 0 {
                            return Err(format!("unsupported element '{kind}'"));
                        }
                    }
                }
            }
            Some("property") => {
                if in_element == "vertex" {
                    let ty = tok.next().ok_or("property without a type")?;
                    if ty == "list" {
                        return Err("list property on vertices".into());
                    }
                    let name = tok.next().ok_or("property without a name")?;
                    match name {
                        "x" => xyz_at[0] = Some(vertex_props),
                        "y" => xyz_at[1] = Some(vertex_props),
                        "z" => xyz_at[2] = Some(vertex_props),
                        _ => {}
                    }
                    vertex_props += 1;
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(format!("unexpected header line '{other}'")),
            None => {}
        }
    }
    if !header_done || !format_seen {
        return Err("truncated header".into());
    }
    let n_vertex = n_vertex.ok_or("no vertex element")?;
    let n_face = n_face.unwrap_or(0);
    let [Some(ix), Some(iy), Some(iz)] = xyz_at else {
        return Err("vertex element lacks x/y/z".into());
    };
    let mut mesh = Mesh::default();
    mesh.vertices.reserve(n_vertex);
    for _ in 0..n_vertex {
        let line = lines.next().ok_or("missing vertex row")?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| "bad vertex number".to_string())?;
        if vals.len() != vertex_props {
            return Err("vertex row width mismatch".into());
        }
        mesh.vertices.push(v3(vals[ix], vals[iy], vals[iz]));
    }
    mesh.triangles.reserve(n_face);
    for _ in 0..n_face {
        let line = lines.next().ok_or("missing face row")?;
        let mut tok = line.split_whitespace();
        let count: usize = tok
            .next()
            .ok_or("empty face row")?
            .parse()
            .map_err(|_| "bad face count".to_string())?;
        if count != 3 {
            return Err("only triangular faces are supported".into());
        }
        let mut tri = [0u32; 3];
        for t in tri.iter_mut() {
            let v: i64 = tok
                .next()
                .ok_or("short face row")?
                .parse()
                .map_err(|_| "bad face index".to_string())?;
            if v < 0 || v as usize >= n_vertex {
                return Err("face index out of range".into());
            }
            *t = v as u32;
        }
        if tok.next().is_some() {
            return Err("face row has trailing tokens".into());
        }
        mesh.triangles.push(tri);
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes =
        std::fs::read(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
    parse_ply(&bytes).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> Mesh {
        Mesh {
            vertices: vec![
                v3(0.0, 0.0, 0.0),
                v3(1.0, 0.0, 0.0),
                v3(1.0, 1.0, 0.0),
                v3(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn ply_round_trip_is_exact() {
        let mesh = quad();
        let bytes = mesh.encode_ply();
        let back = parse_ply(&bytes).unwrap();
        assert_eq!(back.vertices.len(), 4);
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in mesh.vertices.iter().zip(back.vertices.iter()) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn parser_rejects_malformed_input_without_panicking() {
        let cases: &[&[u8]] = &[
            b"",
            b"ply",
            b"ply\nformat binary_little_endian 1.0\nend_header\n",
            b"ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 0 5\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nend_header\n0\n",
            b"\xff\xfe\x00ply",
        ];
        for c in cases {
            assert!(parse_ply(c).is_err());
        }
    }

    #[test]
    fn degenerate_triangles_are_filtered() {
        let mut mesh = quad();
        mesh.triangles.push([0, 1, 1]);
        mesh.triangles.push([2, 2, 2]);
        let removed = mesh.filter_degenerate();
        assert_eq!(removed, 2);
        assert_eq!(mesh.triangles.len(), 2);
    }

    #[test]
    fn sampling_is_area_weighted_and_on_the_surface() {
        // two triangles: one tiny, one 100x larger; counts should split
        // proportionally
        let mesh = Mesh {
            vertices: vec![
                v3(0.0, 0.0, 0.0),
                v3(1.0, 0.0, 0.0),
                v3(0.0, 1.0, 0.0),
                v3(0.0, 0.0, 5.0),
                v3(10.0, 0.0, 5.0),
                v3(0.0, 10.0, 5.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let cloud = mesh.sample_points(20_000, 7).unwrap();
        assert_eq!(cloud.points.len(), 20_000);
        let on_big = cloud.points.iter().filter(|p| p.z > 2.5).count();
        let frac = on_big as f64 / 20_000.0;
        assert!((frac - 100.0 / 101.0).abs() < 0.01, "frac {frac}");
        for p in &cloud.points {
            // barycentric points stay inside their triangle; the weights sum
            // to 1 only up to rounding, so compare with a small slack
            assert!(p.x >= 0.0 && p.y >= 0.0);
            assert!(p.z.abs() < 1e-9 || (p.z - 5.0).abs() < 1e-9);
            let lim = if p.z > 2.5 { 10.0 } else { 1.0 };
            assert!(p.x + p.y <= lim + 1e-9);
        }
    }

    #[test]
    fn sampling_same_seed_reproduces() {
        let mesh = quad();
        let a = mesh.sample_points(100, 3).unwrap();
        let b = mesh.sample_points(100, 3).unwrap();
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            assert_eq!(p.x, q.x);
            assert_eq!(p.y, q.y);
        }
    }

    #[test]
    fn empty_mesh_cannot_be_sampled() {
        let mesh = Mesh::default();
        assert!(mesh.sample_points(10, 0).is_err());
    }
}
