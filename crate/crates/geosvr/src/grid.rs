//! Sparse voxel octree: non-overlapping leaf voxels with per-corner raw
//! densities and per-voxel spherical-harmonic color coefficients.
//!
//! Voxels live at integer coordinates `(i, j, k)` on level `l`, with size
//! `world_size * 2^-l`; the grid formula yields the voxel's minimum corner
//! and the center sits half a size above it. Corner `c` of a voxel maps to
//! the offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
//!
//! Structural invariants maintained here: every voxel's cube lies inside the
//! world cube, no two active voxels overlap (equivalently, no key is an
//! ancestor of another), and the key index and the slot arrays agree
//! bijectively. The traversal accelerator is rebuilt on every structural
//! mutation and doubles as the overlap validator.

use crate::error::{EngineError, Result};
use crate::math::{v3, Vec3};
use crate::sh;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Levels above this would overflow the 3x21-bit interleaved spatial codes.
pub const MAX_LEVEL_LIMIT: u32 = 20;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GSVR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct VoxelKey {
    pub level: u32,
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

/// Smooth, strictly increasing map from raw parameters to densities in
/// `[0, inf)` (softplus), numerically stable over the whole real line.
pub fn activate(raw: f64) -> f64 {
    if raw > 30.0 {
        raw
    } else if raw < -30.0 {
        raw.exp()
    } else {
        raw.exp().ln_1p()
    }
}

/// Derivative of [`activate`] (the logistic sigmoid).
pub fn activate_deriv(raw: f64) -> f64 {
    if raw >= 0.0 {
        1.0 / (1.0 + (-raw).exp())
    } else {
        let e = raw.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`activate`] for positive densities.
pub fn inv_activate(y: f64) -> f64 {
    let y = y.max(1e-300);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Trilinear corner weights at local coordinates `q` in `[0,1]^3`.
pub fn tri_weights(q: [f64; 3]) -> [f64; 8] {
    let (x, y, z) = (q[0], q[1], q[2]);
    let (mx, my, mz) = (1.0 - x, 1.0 - y, 1.0 - z);
    [
        mx * my * mz,
        x * my * mz,
        mx * y * mz,
        x * y * mz,
        mx * my * z,
        x * my * z,
        mx * y * z,
        x * y * z,
    ]
}

/// Trilinear interpolation of 8 corner values.
pub fn tri_interp(vals: &[f64; 8], q: [f64; 3]) -> f64 {
    let w = tri_weights(q);
    let mut acc = 0.0;
    for c in 0..8 {
        acc += w[c] * vals[c];
    }
    acc
}

/// Gradient of the trilinear interpolant with respect to `q`.
pub fn tri_grad(vals: &[f64; 8], q: [f64; 3]) -> Vec3 {
    let (x, y, z) = (q[0], q[1], q[2]);
    let (mx, my, mz) = (1.0 - x, 1.0 - y, 1.0 - z);
    let gx = my * mz * (vals[1] - vals[0])
        + y * mz * (vals[3] - vals[2])
        + my * z * (vals[5] - vals[4])
        + y * z * (vals[7] - vals[6]);
    let gy = mx * mz * (vals[2] - vals[0])
        + x * mz * (vals[3] - vals[1])
        + mx * z * (vals[6] - vals[4])
        + x * z * (vals[7] - vals[5]);
    let gz = mx * my * (vals[4] - vals[0])
        + x * my * (vals[5] - vals[1])
        + mx * y * (vals[6] - vals[2])
        + x * y * (vals[7] - vals[3]);
    v3(gx, gy, gz)
}

/// Traversal accelerator: an explicit octree over the active voxel keys.
///
/// Child entries encode: `0` empty, `n > 0` internal node `n - 1`,
/// `n < 0` leaf slot `-n - 1`.
#[derive(Clone, Debug, Default)]
pub struct Accel {
    pub nodes: Vec<[i32; 8]>,
    /// Same encoding as child entries; the entire world cube.
    pub root: i32,
}

impl Accel {
    fn build(keys: &[VoxelKey]) -> std::result::Result<Accel, String> {
        let mut accel = Accel {
            nodes: Vec::new(),
            root: 0,
        };
        for (slot, key) in keys.iter().enumerate() {
            accel.insert(key, slot as u32)?;
        }
        Ok(accel)
    }

    fn insert(&mut self, key: &VoxelKey, slot: u32) -> std::result::Result<(), String> {
        let leaf_code = -(slot as i32) - 1;
        if key.level == 0 {
            if self.root != 0 {
                return Err("root voxel overlaps existing voxels".into());
            }
            self.root = leaf_code;
            return Ok(());
        }
        if self.root < 0 {
            return Err("voxel overlaps the root voxel".into());
        }
        if self.root == 0 {
            self.nodes.push([0; 8]);
            self.root = 1;
        }
        let mut node = (self.root - 1) as usize;
        for d in 0..key.level {
            let b = key.level - 1 - d;
            let oct = (((key.i >> b) & 1) | (((key.j >> b) & 1) << 1) | (((key.k >> b) & 1) << 2))
                as usize;
            let entry = self.nodes[node][oct];
            if d == key.level - 1 {
                if entry != 0 {
                    return Err("voxel overlaps an existing voxel".into());
                }
                self.nodes[node][oct] = leaf_code;
            } else {
                if entry < 0 {
                    return Err("voxel lies inside an existing voxel".into());
                }
                let next = if entry == 0 {
                    self.nodes.push([0; 8]);
                    let id = self.nodes.len() as i32;
                    self.nodes[node][oct] = id;
                    (id - 1) as usize
                } else {
                    (entry - 1) as usize
                };
                node = next;
            }
        }
        Ok(())
    }
}

/// Mapping from pre-mutation slot ids to post-mutation slot ids.
#[derive(Clone, Debug)]
pub struct SlotRemap {
    /// `None` for removed or subdivided voxels.
    pub old_to_new: Vec<Option<u32>>,
    pub new_len: usize,
}

#[derive(Clone, Debug)]
pub struct OctreeWorld {
    pub world_size: f64,
    pub world_center: Vec3,
    pub max_level: u32,
    pub sh_degree: u32,
    pub keys: Vec<VoxelKey>,
    /// Raw (pre-activation) densities at the 8 cube corners, per voxel.
    pub raw_geo: Vec<[f64; 8]>,
    /// Flattened SH coefficients: `3 * coeff_count(sh_degree)` per voxel,
    /// channel-major (all red coefficients, then green, then blue).
    pub sh: Vec<f64>,
    /// Accumulated subdivision priority since the last octree event.
    pub stats_priority: Vec<f64>,
    /// Maximum blending weight seen since the last octree event.
    pub stats_max_weight: Vec<f64>,
    index: HashMap<VoxelKey, u32>,
    accel: Accel,
}

impl OctreeWorld {
    pub fn new(world_size: f64, world_center: Vec3, max_level: u32, sh_degree: u32) -> Result<Self> {
        if !(world_size > 0.0 && world_size.is_finite()) {
            return Err(EngineError::Config("world size must be positive".into()));
        }
        if max_level == 0 || max_level > MAX_LEVEL_LIMIT {
            return Err(EngineError::Config(format!(
                "max level must be in 1..={MAX_LEVEL_LIMIT}"
            )));
        }
        if sh_degree > sh::MAX_DEGREE {
            return Err(EngineError::Config(format!(
                "sh degree must be <= {}",
                sh::MAX_DEGREE
            )));
        }
        Ok(OctreeWorld {
            world_size,
            world_center,
            max_level,
            sh_degree,
            keys: Vec::new(),
            raw_geo: Vec::new(),
            sh: Vec::new(),
            stats_priority: Vec::new(),
            stats_max_weight: Vec::new(),
            index: HashMap::new(),
            accel: Accel::default(),
        })
    }

    /// Fully tiled grid at `level` with constant raw density and gray color.
    pub fn init_dense(
        world_size: f64,
        world_center: Vec3,
        level: u32,
        max_level: u32,
        sh_degree: u32,
        raw_init: f64,
        init_gray: f64,
    ) -> Result<Self> {
        let mut w = OctreeWorld::new(world_size, world_center, max_level, sh_degree)?;
        if level > max_level {
            return Err(EngineError::Config(
                "init level exceeds max level".into(),
            ));
        }
        let n = 1u32 << level;
        let nc = sh::coeff_count(sh_degree);
        let dc = sh::dc_coeff_for(init_gray);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let key = VoxelKey { level, i, j, k };
                    w.keys.push(key);
                    w.raw_geo.push([raw_init; 8]);
                    let mut coeffs = vec![0.0; 3 * nc];
                    for ch in 0..3 {
                        coeffs[ch * nc] = dc;
                    }
                    w.sh.extend_from_slice(&coeffs);
                }
            }
        }
        w.finish_build()?;
        Ok(w)
    }

    /// Builds a world from explicit voxel records (testing and loading).
    pub fn from_voxels(
        world_size: f64,
        world_center: Vec3,
        max_level: u32,
        sh_degree: u32,
        voxels: Vec<(VoxelKey, [f64; 8], Vec<f64>)>,
    ) -> Result<Self> {
        let mut w = OctreeWorld::new(world_size, world_center, max_level, sh_degree)?;
        let nc = 3 * sh::coeff_count(sh_degree);
        for (key, raw, coeffs) in voxels {
            if coeffs.len() != nc {
                return Err(EngineError::Config(
                    "sh coefficient count does not match degree".into(),
                ));
            }
            w.keys.push(key);
            w.raw_geo.push(raw);
            w.sh.extend_from_slice(&coeffs);
        }
        w.finish_build()?;
        Ok(w)
    }

    /// Validates bounds, rebuilds the key index and accelerator, resets stats.
    fn finish_build(&mut self) -> Result<()> {
        self.index.clear();
        self.index.reserve(self.keys.len());
        for (slot, key) in self.keys.iter().enumerate() {
            if key.level > self.max_level {
                return Err(EngineError::Invariant(format!(
                    "voxel level {} exceeds max level {}",
                    key.level, self.max_level
                )));
            }
            let n = 1u32 << key.level;
            if key.i >= n || key.j >= n || key.k >= n {
                return Err(EngineError::Invariant(
                    "voxel index outside the world cube".into(),
                ));
            }
            if self.index.insert(*key, slot as u32).is_some() {
                return Err(EngineError::Invariant("duplicate voxel key".into()));
            }
        }
        self.accel = Accel::build(&self.keys)
            .map_err(EngineError::Invariant)?;
        self.stats_priority = vec![0.0; self.keys.len()];
        self.stats_max_weight = vec![0.0; self.keys.len()];
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn accel(&self) -> &Accel {
        &self.accel
    }

    pub fn slot_of(&self, key: &VoxelKey) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn coeffs_per_channel(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn sh_stride(&self) -> usize {
        3 * self.coeffs_per_channel()
    }

    pub fn sh_of(&self, slot: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[slot * s..(slot + 1) * s]
    }

    pub fn world_min(&self) -> Vec3 {
        self.world_center - v3(1.0, 1.0, 1.0) * (0.5 * self.world_size)
    }

    /// Voxel size at a level: `world_size * 2^-level`.
    pub fn level_size(&self, level: u32) -> f64 {
        self.world_size * (0.5f64).powi(level as i32)
    }

    /// `(min corner, size, center)` of the voxel cube for `(level, i, j, k)`.
    pub fn voxel_extent(&self, key: &VoxelKey) -> (Vec3, f64, Vec3) {
        let size = self.level_size(key.level);
        let min = self.world_min() + v3(key.i as f64, key.j as f64, key.k as f64) * size;
        let center = min + v3(0.5, 0.5, 0.5) * size;
        (min, size, center)
    }

    pub fn slot_extent(&self, slot: usize) -> (Vec3, f64, Vec3) {
        self.voxel_extent(&self.keys[slot])
    }

    /// Smallest active voxel size, or `None` for an empty world.
    pub fn min_voxel_size(&self) -> Option<f64> {
        let max_l = self.keys.iter().map(|k| k.level).max()?;
        Some(self.level_size(max_l))
    }

    /// Spatial code of a voxel: its anchor corner at `max_level` granularity
    /// with interleaved coordinate bits. Unique across non-overlapping
    /// voxels, so it defines a canonical spatial order.
    pub fn spatial_code(&self, slot: usize) -> u64 {
        let key = &self.keys[slot];
        let shift = self.max_level - key.level;
        let (i, j, k) = (
            (key.i as u64) << shift,
            (key.j as u64) << shift,
            (key.k as u64) << shift,
        );
        let mut code = 0u64;
        for b in 0..self.max_level as u64 {
            code |= ((i >> b) & 1) << (3 * b);
            code |= ((j >> b) & 1) << (3 * b + 1);
            code |= ((k >> b) & 1) << (3 * b + 2);
        }
        code
    }

    /// Slot ids sorted by spatial code.
    pub fn spatial_order(&self) -> Vec<u32> {
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        order.sort_by_key(|&s| self.spatial_code(s as usize));
        order
    }

    /// Raw corner values a child voxel needs so that its activated trilinear
    /// field matches the parent field at the child's corner positions.
    pub fn child_raw(parent_raw: &[f64; 8], octant: usize) -> [f64; 8] {
        let mut parent_act = [0.0; 8];
        for c in 0..8 {
            parent_act[c] = activate(parent_raw[c]);
        }
        let (ox, oy, oz) = (
            (octant & 1) as f64,
            ((octant >> 1) & 1) as f64,
            ((octant >> 2) & 1) as f64,
        );
        let mut out = [0.0; 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let q = [
                0.5 * (ox + (c & 1) as f64),
                0.5 * (oy + ((c >> 1) & 1) as f64),
                0.5 * (oz + ((c >> 2) & 1) as f64),
            ];
            *slot = inv_activate(tri_interp(&parent_act, q));
        }
        out
    }

    /// Removes and subdivides voxels in one deterministic pass.
    ///
    /// Surviving voxels keep their relative order; children of subdivided
    /// voxels are appended afterwards, ordered by parent slot then octant.
    /// All stats reset. Returns the slot remapping for optimizer state.
    pub fn apply_mutation(&mut self, prune: &[bool], subdivide: &[bool]) -> Result<SlotRemap> {
        assert_eq!(prune.len(), self.len());
        assert_eq!(subdivide.len(), self.len());
        let stride = self.sh_stride();
        let mut keys = Vec::with_capacity(self.len());
        let mut raw = Vec::with_capacity(self.len());
        let mut shc = Vec::with_capacity(self.sh.len());
        let mut old_to_new = vec![None; self.len()];
        for slot in 0..self.len() {
            if prune[slot] || subdivide[slot] {
                continue;
            }
            old_to_new[slot] = Some(keys.len() as u32);
            keys.push(self.keys[slot]);
            raw.push(self.raw_geo[slot]);
            shc.extend_from_slice(self.sh_of(slot));
        }
        for slot in 0..self.len() {
            if prune[slot] || !subdivide[slot] {
                continue;
            }
            let key = self.keys[slot];
            if key.level >= self.max_level {
                return Err(EngineError::Invariant(
                    "subdivision would exceed max level".into(),
                ));
            }
            for oct in 0..8usize {
                keys.push(VoxelKey {
                    level: key.level + 1,
                    i: 2 * key.i + (oct & 1) as u32,
                    j: 2 * key.j + ((oct >> 1) & 1) as u32,
                    k: 2 * key.k + ((oct >> 2) & 1) as u32,
                });
                raw.push(Self::child_raw(&self.raw_geo[slot], oct));
                let base = slot * stride;
                shc.extend_from_slice(&self.sh[base..base + stride]);
            }
        }
        self.keys = keys;
        self.raw_geo = raw;
        self.sh = shc;
        self.finish_build()?;
        Ok(SlotRemap {
            old_to_new,
            new_len: self.len(),
        })
    }

    /// Serializes to the versioned little-endian checkpoint format, voxels
    /// in canonical spatial order.
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let nc = self.sh_stride();
        let mut out = Vec::with_capacity(56 + self.len() * (16 + 64 + nc * 8));
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.world_size.to_le_bytes());
        for a in self.world_center.to_array() {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out.extend_from_slice(&self.max_level.to_le_bytes());
        out.extend_from_slice(&self.sh_degree.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &slot in &self.spatial_order() {
            let slot = slot as usize;
            let key = self.keys[slot];
            out.extend_from_slice(&key.level.to_le_bytes());
            out.extend_from_slice(&key.i.to_le_bytes());
            out.extend_from_slice(&key.j.to_le_bytes());
            out.extend_from_slice(&key.k.to_le_bytes());
            for v in self.raw_geo[slot] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in self.sh_of(slot) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_checkpoint();
        let mut f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| EngineError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
        parse_checkpoint(&bytes)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out: [u8; N] = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

/// Parses a checkpoint from raw bytes. Panic-free; a fuzz target.
pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<OctreeWorld, String> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic = r.take::<4>().ok_or("truncated header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let world_size = r.f64().ok_or("truncated header")?;
    if !(world_size > 0.0 && world_size.is_finite()) {
        return Err("world size must be positive and finite".into());
    }
    let wc = [
        r.f64().ok_or("truncated header")?,
        r.f64().ok_or("truncated header")?,
        r.f64().ok_or("truncated header")?,
    ];
    if !wc.iter().all(|v| v.is_finite()) {
        return Err("non-finite world center".into());
    }
    let max_level = r.u32().ok_or("truncated header")?;
    if max_level == 0 || max_level > MAX_LEVEL_LIMIT {
        return Err(format!("max level must be in 1..={MAX_LEVEL_LIMIT}"));
    }
    let sh_degree = r.u32().ok_or("truncated header")?;
    if sh_degree > sh::MAX_DEGREE {
        return Err(format!("sh degree must be <= {}", sh::MAX_DEGREE));
    }
    let count = r.u64().ok_or("truncated header")?;
    let nc = 3 * sh::coeff_count(sh_degree);
    let rec_size = 16 + 64 + nc * 8;
    let body = bytes.len() - r.pos;
    let expect = (count as usize).checked_mul(rec_size).ok_or("voxel count overflow")?;
    if body != expect {
        return Err(format!(
            "voxel payload size mismatch: {body} bytes for {count} voxels"
        ));
    }
    let mut voxels = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let level = r.u32().ok_or("truncated voxel record")?;
        let i = r.u32().ok_or("truncated voxel record")?;
        let j = r.u32().ok_or("truncated voxel record")?;
        let k = r.u32().ok_or("truncated voxel record")?;
        if level > max_level {
            return Err("voxel level exceeds max level".into());
        }
        let n = 1u32 << level;
        if i >= n || j >= n || k >= n {
            return Err("voxel index outside the world cube".into());
        }
        let mut raw = [0.0; 8];
        for v in raw.iter_mut() {
            *v = r.f64().ok_or("truncated voxel record")?;
            if !v.is_finite() {
                return Err("non-finite raw density".into());
            }
        }
        let mut coeffs = vec![0.0; nc];
        for v in coeffs.iter_mut() {
            *v = r.f64().ok_or("truncated voxel record")?;
            if !v.is_finite() {
                return Err("non-finite sh coefficient".into());
            }
        }
        voxels.push((VoxelKey { level, i, j, k }, raw, coeffs));
    }
    OctreeWorld::from_voxels(world_size, Vec3::from_array(wc), max_level, sh_degree, voxels)
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_world(voxels: Vec<(VoxelKey, [f64; 8])>) -> OctreeWorld {
        let vox = voxels
            .into_iter()
            .map(|(k, r)| (k, r, vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]))
            .collect();
        OctreeWorld::from_voxels(1.0, Vec3::ZERO, 8, 1, vox).unwrap()
    }

    #[test]
    fn extent_arithmetic() {
        let w = OctreeWorld::new(8.0, Vec3::ZERO, 8, 0).unwrap();
        let (_, size, _) = w.voxel_extent(&VoxelKey { level: 3, i: 0, j: 0, k: 0 });
        assert_eq!(size, 1.0);
        let (min, _, center) = w.voxel_extent(&VoxelKey { level: 1, i: 1, j: 0, k: 1 });
        assert_eq!(min.to_array(), [0.0, -4.0, 0.0]);
        assert_eq!(center.to_array(), [2.0, -2.0, 2.0]);
        let (_, size0, center0) = w.voxel_extent(&VoxelKey { level: 0, i: 0, j: 0, k: 0 });
        assert_eq!(size0, 8.0);
        assert_eq!(center0, Vec3::ZERO);
    }

    #[test]
    fn level_size_halves_per_level() {
        let w = OctreeWorld::new(3.7, v3(0.1, 0.2, 0.3), 12, 0).unwrap();
        for l in 0..12 {
            assert_eq!(w.level_size(l + 1) * 2.0, w.level_size(l));
        }
    }

    #[test]
    fn root_children_tile_root_exactly() {
        let w = OctreeWorld::new(8.0, Vec3::ZERO, 8, 0).unwrap();
        let (rmin, rsize, _) = w.voxel_extent(&VoxelKey { level: 0, i: 0, j: 0, k: 0 });
        let mut corners = std::collections::HashSet::new();
        for oct in 0..8u32 {
            let key = VoxelKey {
                level: 1,
                i: oct & 1,
                j: (oct >> 1) & 1,
                k: (oct >> 2) & 1,
            };
            let (min, size, _) = w.voxel_extent(&key);
            assert_eq!(size * 2.0, rsize);
            corners.insert(format!("{:?}", min.to_array()));
            for a in 0..3 {
                assert!(min.axis(a) >= rmin.axis(a));
                assert!(min.axis(a) + size <= rmin.axis(a) + rsize + 1e-15);
            }
        }
        assert_eq!(corners.len(), 8);
    }

    #[test]
    fn activation_range_and_limits() {
        for raw in [-10.0, 0.0, 10.0] {
            assert!(activate(raw) >= 0.0);
        }
        assert!(activate(-700.0) >= 0.0 && activate(-700.0) < 1e-300);
        assert!((activate(0.0) - 2.0f64.ln()).abs() < 1e-15);
        for y in [1e-8, 0.3, 2.0, 50.0] {
            assert!((activate(inv_activate(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn activation_derivative_matches_finite_difference() {
        let eps = 1e-6;
        for raw in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (activate(raw + eps) - activate(raw - eps)) / (2.0 * eps);
            assert!((fd - activate_deriv(raw)).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_parent_gives_constant_children() {
        let raw = [0.37; 8];
        for oct in 0..8 {
            let child = OctreeWorld::child_raw(&raw, oct);
            for v in child {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_field_preserved_at_lattice_points() {
        // Corner densities linear in x; children must reproduce the parent
        // field at all 27 shared lattice points.
        let mut raw = [0.0; 8];
        for c in 0..8 {
            raw[c] = inv_activate(0.5 + (c & 1) as f64);
        }
        let mut parent_act = [0.0; 8];
        for c in 0..8 {
            parent_act[c] = activate(raw[c]);
        }
        for oct in 0..8usize {
            let child = OctreeWorld::child_raw(&raw, oct);
            let mut child_act = [0.0; 8];
            for c in 0..8 {
                child_act[c] = activate(child[c]);
            }
            let off = [
                (oct & 1) as f64 * 0.5,
                ((oct >> 1) & 1) as f64 * 0.5,
                ((oct >> 2) & 1) as f64 * 0.5,
            ];
            for gz in 0..=2 {
                for gy in 0..=2 {
                    for gx in 0..=2 {
                        let qc = [gx as f64 * 0.5, gy as f64 * 0.5, gz as f64 * 0.5];
                        let qp = [
                            off[0] + qc[0] * 0.5,
                            off[1] + qc[1] * 0.5,
                            off[2] + qc[2] * 0.5,
                        ];
                        let a = tri_interp(&child_act, qc);
                        let b = tri_interp(&parent_act, qp);
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn double_subdivision_tiles_with_64_voxels() {
        let mut w = gray_world(vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.1; 8])]);
        let n = w.len();
        w.apply_mutation(&vec![false; n], &vec![true; n]).unwrap();
        assert_eq!(w.len(), 8);
        let n = w.len();
        w.apply_mutation(&vec![false; n], &vec![true; n]).unwrap();
        assert_eq!(w.len(), 64);
        // Tiling: total volume matches the root volume and no overlaps
        // (overlap would have failed the accelerator build).
        let vol: f64 = (0..w.len()).map(|s| w.slot_extent(s).1.powi(3)).sum();
        assert!((vol - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_voxels_rejected() {
        let vox = vec![
            (VoxelKey { level: 1, i: 0, j: 0, k: 0 }, [0.0; 8], vec![0.0; 12]),
            (VoxelKey { level: 2, i: 1, j: 1, k: 1 }, [0.0; 8], vec![0.0; 12]),
        ];
        // level-2 voxel (1,1,1) sits inside level-1 voxel (0,0,0)
        let err = OctreeWorld::from_voxels(1.0, Vec3::ZERO, 8, 1, vox).unwrap_err();
        assert!(matches!(err, EngineError::Invariant(_)));
    }

    #[test]
    fn field_preserving_subdivision_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut raw = [0.0; 8];
        for v in raw.iter_mut() {
            *v = rng.gen_range(-2.0..2.5);
        }
        let mut parent_act = [0.0; 8];
        for c in 0..8 {
            parent_act[c] = activate(raw[c]);
        }
        for _ in 0..100 {
            let q = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            let oct = ((q[0] >= 0.5) as usize)
                | (((q[1] >= 0.5) as usize) << 1)
                | (((q[2] >= 0.5) as usize) << 2);
            let child = OctreeWorld::child_raw(&raw, oct);
            let mut child_act = [0.0; 8];
            for c in 0..8 {
                child_act[c] = activate(child[c]);
            }
            let qc = [
                (q[0] - 0.5 * ((oct & 1) as f64)) * 2.0,
                (q[1] - 0.5 * (((oct >> 1) & 1) as f64)) * 2.0,
                (q[2] - 0.5 * (((oct >> 2) & 1) as f64)) * 2.0,
            ];
            // Trilinear in activated space is not preserved exactly off the
            // lattice (activation is nonlinear), but corner-matching makes
            // the fields agree at shared corners; interior agreement holds
            // for multilinear fields, which constant-and-linear cases cover.
            // Here we check the child field stays within the parent's corner
            // bounds, the invariant subdivision must not break.
            let v = tri_interp(&child_act, qc);
            let lo = parent_act.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = parent_act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let mut w = gray_world(vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.3; 8])]);
        let n = w.len();
        w.apply_mutation(&vec![false; n], &vec![true; n]).unwrap();
        for (s, raw) in w.raw_geo.iter_mut().enumerate() {
            for (c, v) in raw.iter_mut().enumerate() {
                *v = (s as f64) * 0.1 - (c as f64) * 0.01;
            }
        }
        let bytes = w.encode_checkpoint();
        let w2 = parse_checkpoint(&bytes).unwrap();
        assert_eq!(w2.encode_checkpoint(), bytes);
        assert_eq!(w.len(), w2.len());
    }

    #[test]
    fn checkpoint_rejects_malformed() {
        assert!(parse_checkpoint(b"").is_err());
        assert!(parse_checkpoint(b"XXXX").is_err());
        let w = gray_world(vec![(VoxelKey { level: 1, i: 0, j: 0, k: 0 }, [0.0; 8])]);
        let mut bytes = w.encode_checkpoint();
        bytes.truncate(bytes.len() - 1);
        assert!(parse_checkpoint(&bytes).is_err());
        let mut bytes = w.encode_checkpoint();
        bytes[4] = 99; // version
        assert!(parse_checkpoint(&bytes).is_err());
    }

    #[test]
    fn spatial_codes_unique_and_canonical() {
        let mut w = gray_world(vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.1; 8])]);
        let n = w.len();
        w.apply_mutation(&vec![false; n], &vec![true; n]).unwrap();
        let n = w.len();
        let mut subdiv = vec![false; n];
        subdiv[3] = true;
        w.apply_mutation(&vec![false; n], &subdiv).unwrap();
        let mut codes: Vec<u64> = (0..w.len()).map(|s| w.spatial_code(s)).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), w.len());
    }

    proptest! {
        #[test]
        fn random_mutations_keep_tiling(ops in proptest::collection::vec(0u8..3, 1..12)) {
            let mut w = gray_world(vec![(VoxelKey { level: 0, i: 0, j: 0, k: 0 }, [0.1; 8])]);
            let mut rng_state = 0x9e3779b97f4a7c15u64;
            let mut next = move || {
                rng_state ^= rng_state << 13;
                rng_state ^= rng_state >> 7;
                rng_state ^= rng_state << 17;
                rng_state
            };
            for op in ops {
                let n = w.len();
                if n == 0 { break; }
                let mut prune = vec![false; n];
                let mut subdiv = vec![false; n];
                match op {
                    0 => {
                        let s = (next() % n as u64) as usize;
                        if w.keys[s].level < w.max_level { subdiv[s] = true; }
                    }
                    1 => {
                        if n > 1 { prune[(next() % n as u64) as usize] = true; }
                    }
                    _ => {
                        for s in 0..n {
                            if next() % 4 == 0 && w.keys[s].level < w.max_level {
                                subdiv[s] = true;
                            }
                        }
                    }
                }
                // apply_mutation rebuilds the accelerator, which rejects any
                // overlap; success means the tiling invariant held
                w.apply_mutation(&prune, &subdiv).unwrap();
                // pairwise AABB check on small grids
                if w.len() <= 128 {
                    for a in 0..w.len() {
                        for b in (a + 1)..w.len() {
                            let (amin, asz, _) = w.slot_extent(a);
                            let (bmin, bsz, _) = w.slot_extent(b);
                            let overlap = (0..3).all(|ax| {
                                amin.axis(ax) + asz > bmin.axis(ax) + 1e-12
                                    && bmin.axis(ax) + bsz > amin.axis(ax) + 1e-12
                            });
                            prop_assert!(!overlap, "voxels {a} and {b} overlap");
                        }
                    }
                }
            }
        }
    }
}
