//! Scheduled octree adaptation: weight-driven pruning and priority-driven
//! subdivision.
//!
//! The trainer accumulates two statistics per voxel between events: the
//! maximum blending weight any ray assigned to it, and an alpha-weighted
//! gradient priority. On schedule this module turns them into one structural
//! mutation:
//! - prune events remove voxels whose maximum blending weight stayed below
//!   the floor (voxels never rendered have weight 0 and always qualify)
//! - subdivide events split the top fraction of voxels by priority, subject
//!   to the global voxel budget and the tree's maximum level
//!
//! Determinism: candidates sort by priority with ties broken by spatial
//! (Morton) code, so equal-priority selections never depend on slot order.
//! A voxel selected by both rules is pruned, not subdivided. Both statistics
//! reset to zero after any event, whether or not the mutation was empty.
//! During the final tenth of training no events fire at all, leaving the
//! structure fixed while appearance converges.

use crate::error::Result;
use crate::grid::{OctreeWorld, SlotRemap};

/// Event schedule and selection knobs.
#[derive(Clone, Copy, Debug)]
pub struct AdaptSchedule {
    pub prune_interval: u64,
    pub subdivide_interval: u64,
    /// Fraction of all voxels subdivided per event, top priority first.
    pub subdivide_fraction: f64,
    /// Hard cap on the voxel count after any event.
    pub max_voxels: usize,
    /// Voxels whose observed max blending weight stays below this are pruned.
    pub prune_weight_floor: f64,
    /// Total planned training iterations; the last tenth is frozen.
    pub total_iterations: u64,
}

impl Default for AdaptSchedule {
    fn default() -> Self {
        AdaptSchedule {
            prune_interval: 2000,
            subdivide_interval: 2000,
            subdivide_fraction: 0.05,
            max_voxels: 2_000_000,
            prune_weight_floor: 1e-4,
            total_iterations: 20_000,
        }
    }
}

/// What one event did to the octree.
#[derive(Debug)]
pub struct AdaptReport {
    pub iteration: u64,
    pub pruned: usize,
    pub subdivided: usize,
    /// Voxel count after the event.
    pub total: usize,
    /// True when the budget cut the subdivision quota short.
    pub budget_truncated: bool,
    /// Slot remapping for optimizer state; `None` when nothing changed.
    pub remap: Option<SlotRemap>,
}

/// First iteration of the frozen tail.
pub fn freeze_start(total_iterations: u64) -> u64 {
    total_iterations - total_iterations / 10
}

/// Run the adaptation schedule for `iteration`. Returns `None` when the
/// iteration triggers no event; otherwise mutates the world and resets its
/// accumulated statistics.
pub fn adapt_step(
    world: &mut OctreeWorld,
    iteration: u64,
    sched: &AdaptSchedule,
) -> Result<Option<AdaptReport>> {
    assert!(sched.prune_interval >= 1 && sched.subdivide_interval >= 1);
    assert!(sched.subdivide_fraction > 0.0 && sched.subdivide_fraction <= 1.0);
    if iteration == 0 || iteration >= freeze_start(sched.total_iterations) {
        return Ok(None);
    }
    let do_prune = iteration % sched.prune_interval == 0;
    let do_subdivide = iteration % sched.subdivide_interval == 0;
    if !do_prune && !do_subdivide {
        return Ok(None);
    }
    let n = world.len();
    let mut prune = vec![false; n];
    let mut pruned = 0usize;
    if do_prune {
        for slot in 0..n {
            if world.stats_max_weight[slot] < sched.prune_weight_floor {
                prune[slot] = true;
                pruned += 1;
            }
        }
    }
    let mut subdivide = vec![false; n];
    let mut subdivided = 0usize;
    let mut budget_truncated = false;
    if do_subdivide {
        let mut candidates: Vec<(usize, f64, u64)> = (0..n)
            .filter(|&slot| {
                !prune[slot]
                    && world.stats_priority[slot] > 0.0
                    && world.keys[slot].level < world.max_level
            })
            .map(|slot| (slot, world.stats_priority[slot], world.spatial_code(slot)))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
        let quota = (sched.subdivide_fraction * n as f64).ceil() as usize;
        // each split removes the parent and adds 8 children: net +7
        let base = n - pruned;
        let by_budget = sched.max_voxels.saturating_sub(base) / 7;
        let take = quota.min(candidates.len());
        if take > by_budget {
            budget_truncated = true;
        }
        for &(slot, _, _) in candidates.iter().take(take.min(by_budget)) {
            subdivide[slot] = true;
            subdivided += 1;
        }
    }
    let remap = if pruned + subdivided > 0 {
        Some(world.apply_mutation(&prune, &subdivide)?)
    } else {
        // stats still reset on an empty event so the next window starts fresh
        world.stats_priority.iter_mut().for_each(|p| *p = 0.0);
        world.stats_max_weight.iter_mut().for_each(|w| *w = 0.0);
        None
    };
    Ok(Some(AdaptReport {
        iteration,
        pruned,
        subdivided,
        total: world.len(),
        budget_truncated,
        remap,
    }))
}
