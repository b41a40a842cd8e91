//! Truncated signed-distance fusion of depth maps and zero-level-set
//! triangle extraction.
//!
//! The volume stores one normalized value and one weight per grid node.
//! Integration projects every node into the camera, looks up the nearest
//! depth sample, and folds the truncated signed distance into a running
//! weighted average. Nodes more than one truncation band behind the surface
//! are left untouched, so occluded space never erodes the model.
//!
//! Extraction splits each cell into six tetrahedra around the main diagonal
//! and interpolates the zero crossing on edges linearly. Crossing vertices
//! are deduplicated by global edge key, which makes the surface watertight
//! wherever all incident cells are observed. Triangles are oriented so their
//! normals point from the inside (negative) region outward, and zero-area
//! slivers are filtered before the mesh is returned.
//!
//! Determinism: integration touches each node independently (parallel over
//! z-slabs, no cross-node accumulation) and extraction walks cells in index
//! order, so results are bitwise reproducible.

use crate::camera::Camera;
use crate::error::{EngineError, Result};
use crate::math::{v3, Vec3};
use crate::mesh::Mesh;
use rayon::prelude::*;
use std::collections::HashMap;

/// Default edge length of one fusion cell, scene units.
pub const DEFAULT_VOXEL: f64 = 0.002;
/// Truncation band, in multiples of the cell size.
pub const DEFAULT_TRUNC_FACTOR: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel: f64,
    pub trunc: f64,
    /// Nodes per axis; cells per axis is one less.
    pub dims: [usize; 3],
    /// Normalized signed distance in [-1, 1] per node.
    pub values: Vec<f64>,
    /// Accumulated integration weights per node; 0 = never observed.
    pub weights: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel: f64, trunc_factor: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel > 0.0) || !(trunc_factor > 0.0) {
            return Err(EngineError::Config(
                "fusion voxel size and truncation factor must be positive".into(),
            ));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(EngineError::Config(
                "fusion volume needs at least 2 nodes per axis".into(),
            ));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&v| v <= 1 << 31)
            .ok_or_else(|| EngineError::Config("fusion volume too large".into()))?;
        Ok(TsdfVolume {
            origin,
            voxel,
            trunc: trunc_factor * voxel,
            dims,
            values: vec![1.0; n],
            weights: vec![0.0; n],
        })
    }

    /// Volume covering an axis-aligned box, expanded by one truncation band
    /// so surfaces on the box boundary still get a full crossing.
    pub fn from_bbox(min: Vec3, max: Vec3, voxel: f64, trunc_factor: f64) -> Result<Self> {
        if !(voxel > 0.0) || !(trunc_factor > 0.0) {
            return Err(EngineError::Config(
                "fusion voxel size and truncation factor must be positive".into(),
            ));
        }
        let pad = trunc_factor * voxel;
        let lo = min - v3(pad, pad, pad);
        let ext = max + v3(pad, pad, pad) - lo;
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(EngineError::Config("empty fusion bounding box".into()));
        }
        let dims = [
            (ext.x / voxel).ceil() as usize + 1,
            (ext.y / voxel).ceil() as usize + 1,
            (ext.z / voxel).ceil() as usize + 1,
        ];
        Self::new(lo, voxel, trunc_factor, dims)
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + v3(i as f64, j as f64, k as f64) * self.voxel
    }

    /// Fold one depth map into the volume. `valid` masks trustworthy pixels;
    /// depth entries must be ray-parameter distances, 0 meaning no surface.
    pub fn integrate(&mut self, depth: &[f64], valid: &[bool], cam: &Camera) {
        let (w, h) = (cam.width as usize, cam.height as usize);
        assert_eq!(depth.len(), w * h, "depth map size mismatch");
        assert_eq!(valid.len(), w * h, "valid mask size mismatch");
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel;
        let trunc = self.trunc;
        self.values
            .par_chunks_mut(slab)
            .zip(self.weights.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, (vals, wts))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + v3(i as f64, j as f64, k as f64) * voxel;
                        let Some((u, v, dist)) = cam.project(p) else {
                            continue;
                        };
                        if !(u >= 0.0 && v >= 0.0) {
                            continue;
                        }
                        let (px, py) = (u as usize, v as usize);
                        if px >= w || py >= h {
                            continue;
                        }
                        let pix = py * w + px;
                        if !valid[pix] {
                            continue;
                        }
                        let d = depth[pix];
                        if !(d > 0.0) || !d.is_finite() {
                            continue;
                        }
                        let sdf = d - dist;
                        if sdf < -trunc {
                            continue;
                        }
                        let t = (sdf / trunc).min(1.0);
                        let at = j * nx + i;
                        let w_old = wts[at];
                        vals[at] = (vals[at] * w_old + t) / (w_old + 1.0);
                        wts[at] = w_old + 1.0;
                    }
                }
            });
    }

    /// Write an analytic signed-distance field into the volume with unit
    /// weight everywhere; used by tests and synthetic ground truth.
    pub fn fill_sdf<F: Fn(Vec3) -> f64 + Sync>(&mut self, sdf: F) {
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel;
        let trunc = self.trunc;
        self.values
            .par_chunks_mut(slab)
            .zip(self.weights.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, (vals, wts))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + v3(i as f64, j as f64, k as f64) * voxel;
                        let at = j * nx + i;
                        vals[at] = (sdf(p) / trunc).clamp(-1.0, 1.0);
                        wts[at] = 1.0;
                    }
                }
            });
    }
}

// each cell splits into six tetrahedra sharing the 0-7 main diagonal;
// cube corner c maps to offset (c & 1, c >> 1 & 1, c >> 2 & 1)
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Node values this close to the level set (normalized units) are treated
/// as lying exactly on it, collapsing their crossings to one vertex; without
/// the snap, sliver triangles a few ulps wide appear and the degenerate
/// filter would punch holes where the surface grazes a node.
const SNAP_EPS: f64 = 1e-12;

struct Extractor<'a> {
    vol: &'a TsdfVolume,
    edge_vertices: HashMap<(u32, u32), u32>,
    mesh: Mesh,
}

impl Extractor<'_> {
    #[inline]
    fn value(&self, n: usize) -> f64 {
        let v = self.vol.values[n];
        if v.abs() < SNAP_EPS {
            0.0
        } else {
            v
        }
    }
    /// Vertex at the zero crossing on the edge between two nodes, created
    /// once per global edge. A crossing that lands exactly on a node (its
    /// value is 0) collapses to one per-node vertex shared by every edge
    /// through that node; the resulting zero-area triangles are filtered
    /// later, and the fan around the node stays sealed.
    fn crossing(&mut self, na: u32, nb: u32) -> u32 {
        // only the outside endpoint can be exactly 0 (inside is strict)
        let zero_at = if self.value(na as usize) == 0.0 {
            Some(na)
        } else if self.value(nb as usize) == 0.0 {
            Some(nb)
        } else {
            None
        };
        let key = match zero_at {
            Some(n) => (n, n),
            None => {
                if na < nb {
                    (na, nb)
                } else {
                    (nb, na)
                }
            }
        };
        if let Some(&v) = self.edge_vertices.get(&key) {
            return v;
        }
        let p = match zero_at {
            Some(n) => self.node_pos_linear(n as usize),
            None => {
                let (a, b) = (na as usize, nb as usize);
                let va = self.value(a);
                let vb = self.value(b);
                let t = va / (va - vb);
                let pa = self.node_pos_linear(a);
                let pb = self.node_pos_linear(b);
                pa + (pb - pa) * t
            }
        };
        let id = self.mesh.vertices.len() as u32;
        self.mesh.vertices.push(p);
        self.edge_vertices.insert(key, id);
        id
    }

    fn node_pos_linear(&self, n: usize) -> Vec3 {
        let nx = self.vol.dims[0];
        let ny = self.vol.dims[1];
        let i = n % nx;
        let j = (n / nx) % ny;
        let k = n / (nx * ny);
        self.vol.node_pos(i, j, k)
    }

    /// Emit one triangle oriented so its normal points from the negative
    /// (inside) region toward the positive one.
    fn triangle(&mut self, ids: [u32; 3], outward: Vec3) {
        let a = self.mesh.vertices[ids[0] as usize];
        let b = self.mesh.vertices[ids[1] as usize];
        let c = self.mesh.vertices[ids[2] as usize];
        let n = (b - a).cross(c - a);
        if n.dot(outward) >= 0.0 {
            self.mesh.triangles.push(ids);
        } else {
            self.mesh.triangles.push([ids[0], ids[2], ids[1]]);
        }
    }

    fn tet(&mut self, nodes: [u32; 4]) {
        let vals = [
            self.value(nodes[0] as usize),
            self.value(nodes[1] as usize),
            self.value(nodes[2] as usize),
            self.value(nodes[3] as usize),
        ];
        let inside: Vec<usize> = (0..4).filter(|&i| vals[i] < 0.0).collect();
        if inside.is_empty() || inside.len() == 4 {
            return;
        }
        let outside: Vec<usize> = (0..4).filter(|&i| vals[i] >= 0.0).collect();
        let centroid = |set: &[usize]| {
            let mut c = Vec3::ZERO;
            for &i in set {
                c += self.node_pos_linear(nodes[i] as usize);
            }
            c * (1.0 / set.len() as f64)
        };
        let outward = centroid(&outside) - centroid(&inside);
        match inside.len() {
            1 | 3 => {
                // a single separated corner yields one triangle
                let (lone, rest) = if inside.len() == 1 {
                    (inside[0], &outside)
                } else {
                    (outside[0], &inside)
                };
                let v0 = self.crossing(nodes[lone], nodes[rest[0]]);
                let v1 = self.crossing(nodes[lone], nodes[rest[1]]);
                let v2 = self.crossing(nodes[lone], nodes[rest[2]]);
                self.triangle([v0, v1, v2], outward);
            }
            2 => {
                // two-and-two splits on a quad; corners ordered so the strip
                // walks the quad boundary without a bow-tie
                let (i0, i1) = (inside[0], inside[1]);
                let (o0, o1) = (outside[0], outside[1]);
                let q0 = self.crossing(nodes[i0], nodes[o0]);
                let q1 = self.crossing(nodes[i0], nodes[o1]);
                let q2 = self.crossing(nodes[i1], nodes[o1]);
                let q3 = self.crossing(nodes[i1], nodes[o0]);
                self.triangle([q0, q1, q2], outward);
                self.triangle([q0, q2, q3], outward);
            }
            _ => unreachable!(),
        }
    }
}

/// Extract the zero level set of all fully observed cells. A volume without
/// a sign change yields an empty mesh.
pub fn extract_surface(vol: &TsdfVolume) -> Mesh {
    let mut ex = Extractor {
        vol,
        edge_vertices: HashMap::new(),
        mesh: Mesh::default(),
    };
    let [nx, ny, nz] = vol.dims;
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut nodes = [0u32; 8];
                let mut observed = true;
                for (c, n) in nodes.iter_mut().enumerate() {
                    let idx =
                        vol.node_index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    if vol.weights[idx] == 0.0 {
                        observed = false;
                        break;
                    }
                    *n = idx as u32;
                }
                if !observed {
                    continue;
                }
                for tet in &TETS {
                    ex.tet([
                        nodes[tet[0]],
                        nodes[tet[1]],
                        nodes[tet[2]],
                        nodes[tet[3]],
                    ]);
                }
            }
        }
    }
    let mut mesh = ex.mesh;
    mesh.filter_degenerate();
    mesh
}
