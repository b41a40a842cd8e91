//! Pinhole camera with world-to-camera extrinsics.
//!
//! Conventions fixed across the whole engine: `x_cam = R * x_world + t`,
//! pixel `u = fx * x/z + cx`, rays through pixel centers, and depth measured
//! as ray-parameter distance (not z-depth).

use crate::math::{v3, Mat3, Vec3};

#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub r: Mat3,
    pub t: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose().mul_vec(self.t))
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.r.row(2)
    }

    /// Ray through subpixel position `(px, py)`: origin and unit direction,
    /// both in world coordinates.
    pub fn ray(&self, px: f64, py: f64) -> (Vec3, Vec3) {
        let d_cam = v3((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalized();
        (self.center(), self.r.transpose().mul_vec(d_cam))
    }

    /// Unit ray direction in camera coordinates for `(px, py)`.
    pub fn ray_dir_cam(&self, px: f64, py: f64) -> Vec3 {
        v3((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalized()
    }

    /// Projects a world point: `(u, v, ray distance)`. `None` behind camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.r.mul_vec(p) + self.t;
        if pc.z <= 1e-12 {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Some((u, v, pc.norm()))
    }

    /// Intrinsics as an upper-triangular 3x3 matrix.
    pub fn k_matrix(&self) -> Mat3 {
        Mat3 {
            m: [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    /// Inverse intrinsics (analytic, K is upper triangular).
    pub fn k_inv_matrix(&self) -> Mat3 {
        Mat3 {
            m: [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    /// Camera at `eye` looking toward `target`, with `up` fixing the roll.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Camera {
        let fwd = (target - eye).normalized();
        let right = fwd.cross(up).normalized();
        let down = fwd.cross(right);
        // Rows of R are the camera axes expressed in world coordinates.
        let r = Mat3::from_rows(right, down, fwd);
        let t = -(r.mul_vec(eye));
        Camera {
            fx,
            fy,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            r,
            t,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("fx and fy must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        if !self.r.is_finite() || !self.t.is_finite() {
            return Err("non-finite extrinsics".into());
        }
        let rrt = self.r.mul_mat(&self.r.transpose());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt.m[i][j] - want).abs() > 1e-6 {
                    return Err("rotation is not orthonormal".into());
                }
            }
        }
        if (self.r.det() - 1.0).abs() > 1e-6 {
            return Err("rotation determinant is not +1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn test_cam() -> Camera {
        Camera::look_at(
            v3(0.3, -2.5, 1.2),
            Vec3::ZERO,
            v3(0.0, 0.0, 1.0),
            120.0,
            120.0,
            96,
            72,
        )
    }

    #[test]
    fn look_at_is_orthonormal() {
        test_cam().validate().unwrap();
    }

    #[test]
    fn principal_point_ray_is_forward() {
        let c = test_cam();
        let (_, d) = c.ray(c.cx, c.cy);
        assert!((d - c.forward()).norm() < 1e-12);
    }

    #[test]
    fn ray_directions_unit_norm() {
        let c = test_cam();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let px = rng.gen_range(0.0..c.width as f64);
            let py = rng.gen_range(0.0..c.height as f64);
            let (_, d) = c.ray(px, py);
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_unproject_roundtrip() {
        let c = test_cam();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let px = rng.gen_range(1.0..(c.width - 1) as f64);
            let py = rng.gen_range(1.0..(c.height - 1) as f64);
            let (o, d) = c.ray(px, py);
            let t = rng.gen_range(0.5..5.0);
            let p = o + d * t;
            let (u, v, dist) = c.project(p).unwrap();
            assert!((u - px).abs() < 1e-9, "u {u} vs {px}");
            assert!((v - py).abs() < 1e-9);
            assert!((dist - t).abs() < 1e-9);
        }
    }

    #[test]
    fn ray_distance_equals_cam_norm() {
        let c = test_cam();
        let p = v3(0.4, 0.2, -0.3);
        let (_, _, dist) = c.project(p).unwrap();
        assert!((dist - (p - c.center()).norm()).abs() < 1e-12);
    }
}
