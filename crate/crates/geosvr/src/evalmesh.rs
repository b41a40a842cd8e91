//! Point-cloud geometry metrics: symmetric Chamfer distance and
//! threshold-based precision/recall/F1.
//!
//! Nearest-neighbor queries run against a uniform hash grid sized so cells
//! hold a handful of points each; lookups expand ring by ring and stop once
//! no farther ring can beat the best distance, so results are exact. Query
//! loops parallelize per point and reduce in index order, keeping every
//! metric bitwise reproducible.

use crate::error::{EngineError, Result};
use crate::math::Vec3;
use crate::mesh::PointCloud;
use rayon::prelude::*;
use std::collections::HashMap;

/// Exact nearest-neighbor index over a fixed point set.
pub struct NearestGrid {
    cell: f64,
    min: Vec3,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vec3>,
}

impl NearestGrid {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(EngineError::Config(
                "nearest-neighbor index needs a nonempty cloud".into(),
            ));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            min.z = min.z.min(p.z);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
            max.z = max.z.max(p.z);
        }
        let ext = max - min;
        let diag = ext.norm();
        // aim for on the order of one point per cell
        let cell = if diag > 0.0 {
            (diag / (points.len() as f64).cbrt()).max(diag * 1e-9)
        } else {
            1.0
        };
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_of(*p, min, cell);
            cells.entry(key).or_default().push(i as u32);
        }
        Ok(NearestGrid {
            cell,
            min,
            cells,
            points: points.to_vec(),
        })
    }

    #[inline]
    fn key_of(p: Vec3, min: Vec3, cell: f64) -> (i64, i64, i64) {
        (
            ((p.x - min.x) / cell).floor() as i64,
            ((p.y - min.y) / cell).floor() as i64,
            ((p.z - min.z) / cell).floor() as i64,
        )
    }

    /// Exact distance from `q` to the closest indexed point.
    pub fn nearest_dist(&self, q: Vec3) -> f64 {
        let center = Self::key_of(q, self.min, self.cell);
        let mut best_sq = f64::INFINITY;
        let mut ring: i64 = 0;
        loop {
            // any point in a ring at Chebyshev cell distance r is at least
            // (r - 1) cells away in euclidean terms
            if best_sq.is_finite() {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if bound * bound > best_sq {
                    break;
                }
            }
            let mut any_cell_in_range = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        // ring shell only
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        if let Some(ids) = self.cells.get(&key) {
                            any_cell_in_range = true;
                            for &i in ids {
                                let d = self.points[i as usize] - q;
                                let sq = d.dot(d);
                                if sq < best_sq {
                                    best_sq = sq;
                                }
                            }
                        }
                    }
                }
            }
            let _ = any_cell_in_range;
            ring += 1;
            // hard stop: past this every occupied cell has been visited
            if ring > 2 + self.span_cells() {
                break;
            }
        }
        best_sq.sqrt()
    }

    fn span_cells(&self) -> i64 {
        self.cells
            .keys()
            .map(|k| k.0.abs().max(k.1.abs()).max(k.2.abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Mean over `from` of the distance to the nearest point of `index`.
fn mean_nn(from: &PointCloud, index: &NearestGrid) -> f64 {
    let dists: Vec<f64> = from
        .points
        .par_iter()
        .map(|&p| index.nearest_dist(p))
        .collect();
    dists.iter().sum::<f64>() / dists.len() as f64
}

/// Symmetric Chamfer distance: mean of the two directional means.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(EngineError::Config(
            "chamfer distance needs two nonempty clouds".into(),
        ));
    }
    let ia = NearestGrid::build(&a.points)?;
    let ib = NearestGrid::build(&b.points)?;
    Ok(0.5 * (mean_nn(a, &ib) + mean_nn(b, &ia)))
}

/// Precision, recall, and F1 at a distance threshold. Zero denominators
/// yield zeros rather than errors.
pub fn f1(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<(f64, f64, f64)> {
    if pred.points.is_empty() || gt.points.is_empty() {
        return Err(EngineError::Config(
            "f1 score needs two nonempty clouds".into(),
        ));
    }
    if !(threshold > 0.0) {
        return Err(EngineError::Config("f1 threshold must be positive".into()));
    }
    let ip = NearestGrid::build(&pred.points)?;
    let ig = NearestGrid::build(&gt.points)?;
    let close = |from: &PointCloud, index: &NearestGrid| -> f64 {
        let hits: Vec<bool> = from
            .points
            .par_iter()
            .map(|&p| index.nearest_dist(p) <= threshold)
            .collect();
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };
    let precision = close(pred, &ig);
    let recall = close(gt, &ip);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f))
}
