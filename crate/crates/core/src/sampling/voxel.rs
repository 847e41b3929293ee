//! Voxel-based thin-out: drain dense voxels first.
//!
//! One step voxelizes the cloud, picks the per-voxel retention quota
//! `p_min`, moves every point above the quota into an overflow pool and then
//! removes random points from that pool.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::seed;

/// Share of the input that must sit in voxels holding more than `p_min`
/// points, as the ratio `NUM / DEN`.
const DENSE_SHARE_NUM: usize = 3;
const DENSE_SHARE_DEN: usize = 4;

/// Outcome of one voxel thin-out step.
#[derive(Debug, Clone)]
pub struct VoxelStep {
    pub cloud: PointCloud,
    /// Retention quota per voxel.
    pub p_min: usize,
    /// Size of the overflow pool.
    pub pool_size: usize,
    /// Points removed from outside the pool because the pool was too small.
    pub shortfall: usize,
}

pub(crate) fn voxel_key(p: [f32; 3], size: [f64; 3]) -> [i64; 3] {
    [0, 1, 2].map(|a| (f64::from(p[a]) / size[a]).floor() as i64)
}

/// Largest `p` such that voxels with more than `p` points together hold at
/// least 3/4 of all points. `counts` must be non-empty.
pub fn retention_quota(counts: &[usize]) -> usize {
    let n: usize = counts.iter().sum();
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    // walk candidate thresholds from the top; `held` is the number of
    // points in voxels with count > p
    let max = sorted[0];
    let mut held = 0usize;
    let mut i = 0usize;
    let mut p = max;
    while p > 0 {
        p -= 1;
        while i < sorted.len() && sorted[i] > p {
            held += sorted[i];
            i += 1;
        }
        if held * DENSE_SHARE_DEN >= n * DENSE_SHARE_NUM {
            return p;
        }
    }
    0
}

/// Remove exactly `remove` points (`remove <= N`), drawing from the overflow
/// pool first.
pub(crate) fn voxel_remove(
    cloud: &PointCloud,
    voxel_size: [f64; 3],
    remove: usize,
    seed: u64,
) -> Result<VoxelStep> {
    if voxel_size.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::arg(format!(
            "voxel size must be positive, got {voxel_size:?}"
        )));
    }
    let n = cloud.len();
    debug_assert!(remove <= n);
    if n == 0 {
        return Ok(VoxelStep {
            cloud: cloud.clone(),
            p_min: 0,
            pool_size: 0,
            shortfall: 0,
        });
    }
    let mut voxels: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        voxels
            .entry(voxel_key(cloud.xyz(i), voxel_size))
            .or_default()
            .push(i);
    }
    let counts: Vec<usize> = voxels.values().map(Vec::len).collect();
    let p_min = retention_quota(&counts);

    let mut rng = seed::rng(seed);
    let mut pool = Vec::new();
    let mut kept = Vec::with_capacity(n);
    for members in voxels.values() {
        if members.len() > p_min {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            kept.extend_from_slice(&m[..p_min]);
            pool.extend_from_slice(&m[p_min..]);
        } else {
            kept.extend_from_slice(members);
        }
    }
    pool.sort_unstable();
    kept.sort_unstable();

    let mut removed = vec![false; n];
    let pool_size = pool.len();
    let shortfall = remove.saturating_sub(pool_size);
    if shortfall == 0 {
        for j in index::sample(&mut rng, pool_size, remove) {
            removed[pool[j]] = true;
        }
    } else {
        for &i in &pool {
            removed[i] = true;
        }
        for j in index::sample(&mut rng, kept.len(), shortfall) {
            removed[kept[j]] = true;
        }
    }
    let survivors: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    Ok(VoxelStep {
        cloud: cloud.select(&survivors),
        p_min,
        pool_size,
        shortfall,
    })
}

/// One halving step: removes `floor(N / 2)` points, leaving `N - floor(N / 2)`.
///
/// When the pool holds fewer than `floor(N / 2)` points, the whole pool is
/// removed and the remainder is drawn uniformly from the retained points.
pub fn voxel_sample_step(cloud: &PointCloud, voxel_size: [f64; 3], seed: u64) -> Result<VoxelStep> {
    if cloud.len() < 2 {
        return Err(Error::arg(format!(
            "voxel step needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    voxel_remove(cloud, voxel_size, cloud.len() / 2, seed)
}
