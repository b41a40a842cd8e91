//! Real spherical-harmonics basis for view-dependent voxel color.
//!
//! Degrees 0..=2 with the hard-coded real SH constants; a voxel's color in a
//! direction `d` is the dot product of its per-channel coefficients with this
//! basis, so color is exactly linear in the coefficients.

use crate::math::Vec3;

pub const MAX_DEGREE: u32 = 2;

/// Basis length at [`MAX_DEGREE`], handy for fixed-size scratch buffers.
pub const MAX_COEFFS: usize = 9;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of coefficients per channel for a given degree.
pub fn coeff_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Fills the first `coeff_count(degree)` entries of `out` with the basis
/// evaluated at unit direction `d`.
pub fn eval_basis(degree: u32, d: Vec3, out: &mut [f64]) {
    debug_assert!(degree <= MAX_DEGREE);
    debug_assert!(out.len() >= coeff_count(degree));
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * d.y;
        out[2] = C1 * d.z;
        out[3] = -C1 * d.x;
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (x * x - y * y);
    }
}

/// Degree-0 coefficient that renders a constant value `v` in every direction.
pub fn dc_coeff_for(v: f64) -> f64 {
    v / C0
}
