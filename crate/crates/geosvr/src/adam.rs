//! Moment-based gradient descent over the voxel parameters.
//!
//! Standard first/second-moment update with bias correction, applied with
//! per-group learning rates:
//! - raw corner densities
//! - degree-0 appearance coefficients (one per color channel)
//! - higher-degree appearance coefficients
//!
//! The moment buffers mirror the world's parameter layout slot for slot, so
//! octree mutations must be followed by [`AdamState::remap`], which carries
//! surviving voxels' moments to their new slots and starts freshly created
//! children at zero. The global step counter is preserved across mutations;
//! bias correction keeps counting from where it was.
//!
//! All arithmetic is straight-line double precision over indexed loops, so
//! identical inputs produce bitwise identical updates.

use crate::grad::GradientStore;
use crate::grid::{OctreeWorld, SlotRemap};

/// Optimizer hyperparameters. Learning rates are per parameter group.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr_density: f64,
    pub lr_sh0: f64,
    pub lr_sh_hi: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr_density: 0.05,
            lr_sh0: 0.01,
            lr_sh_hi: 0.00025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, laid out exactly like the world parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m_geo: Vec<[f64; 8]>,
    v_geo: Vec<[f64; 8]>,
    m_sh: Vec<f64>,
    v_sh: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(world: &OctreeWorld) -> Self {
        AdamState {
            m_geo: vec![[0.0; 8]; world.len()],
            v_geo: vec![[0.0; 8]; world.len()],
            m_sh: vec![0.0; world.sh.len()],
            v_sh: vec![0.0; world.sh.len()],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step in place. Fails without touching any parameter if
    /// a gradient entry is non-finite.
    pub fn apply(
        &mut self,
        world: &mut OctreeWorld,
        grads: &GradientStore,
        params: &AdamParams,
    ) -> Result<(), String> {
        assert_eq!(grads.d_raw.len(), world.len(), "gradient slot mismatch");
        assert_eq!(grads.d_sh.len(), world.sh.len(), "gradient sh mismatch");
        for (slot, g) in grads.d_raw.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite density gradient at voxel {slot}"));
            }
        }
        if let Some(i) = grads.d_sh.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite appearance gradient at entry {i}"));
        }
        self.step += 1;
        let bc1 = 1.0 - params.beta1.powi(self.step as i32);
        let bc2 = 1.0 - params.beta2.powi(self.step as i32);
        for slot in 0..world.len() {
            for c in 0..8 {
                let g = grads.d_raw[slot][c];
                let m = &mut self.m_geo[slot][c];
                let v = &mut self.v_geo[slot][c];
                *m = params.beta1 * *m + (1.0 - params.beta1) * g;
                *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
                let update = params.lr_density * (*m / bc1) / ((*v / bc2).sqrt() + params.eps);
                world.raw_geo[slot][c] -= update;
            }
        }
        let per_channel = world.coeffs_per_channel();
        for i in 0..world.sh.len() {
            let g = grads.d_sh[i];
            let m = &mut self.m_sh[i];
            let v = &mut self.v_sh[i];
            *m = params.beta1 * *m + (1.0 - params.beta1) * g;
            *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
            // channel-major per voxel: coefficient 0 of each channel is the
            // constant term and gets the faster rate
            let coeff = (i % world.sh_stride()) % per_channel;
            let lr = if coeff == 0 { params.lr_sh0 } else { params.lr_sh_hi };
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + params.eps);
            world.sh[i] -= update;
        }
        Ok(())
    }

    /// Rebuild moment buffers after an octree mutation: surviving voxels keep
    /// their moments at their new slots, new voxels start at zero.
    pub fn remap(&mut self, remap: &SlotRemap, world: &OctreeWorld) {
        assert_eq!(world.len(), remap.new_len, "remap does not match world");
        let stride = world.sh_stride();
        let mut m_geo = vec![[0.0; 8]; remap.new_len];
        let mut v_geo = vec![[0.0; 8]; remap.new_len];
        let mut m_sh = vec![0.0; remap.new_len * stride];
        let mut v_sh = vec![0.0; remap.new_len * stride];
        for (old, dst) in remap.old_to_new.iter().enumerate() {
            let Some(new) = *dst else { continue };
            let new = new as usize;
            m_geo[new] = self.m_geo[old];
            v_geo[new] = self.v_geo[old];
            m_sh[new * stride..(new + 1) * stride]
                .copy_from_slice(&self.m_sh[old * stride..(old + 1) * stride]);
            v_sh[new * stride..(new + 1) * stride]
                .copy_from_slice(&self.v_sh[old * stride..(old + 1) * stride]);
        }
        self.m_geo = m_geo;
        self.v_geo = v_geo;
        self.m_sh = m_sh;
        self.v_sh = v_sh;
    }
}
