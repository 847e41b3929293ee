//! Duplicate removal and lidar thin-out strategies.
//!
//! Three strategies reduce a lidar cloud to a fraction of its points:
//!
//! * [`random_sample`]: uniform without replacement.
//! * [`knn_sample`]: keep the lidar points closest to any radar point.
//! * [`voxel_sample_step`]: drain dense voxels first, keep sparse regions.
//!
//! [`thin_out_sequence`] chains them into the halving sequence
//! `1, 1/2, ..., 1/2^depth` used by multi-stage training.

mod knn;
mod share;
mod voxel;

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use knn::{knn_sample, nearest_radar_sq_dists, sq_dist, KdTree};
pub use share::Share;
pub use voxel::{retention_quota, voxel_sample_step, VoxelStep};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::seed;

/// Default voxel edge for voxel thin-out, meters.
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ThinOutMethod {
    Random,
    Knn,
    Voxel { voxel_size: [f64; 3] },
}

impl ThinOutMethod {
    pub fn voxel() -> Self {
        ThinOutMethod::Voxel {
            voxel_size: DEFAULT_VOXEL_SIZE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ThinOutMethod::Random => "random",
            ThinOutMethod::Knn => "knn",
            ThinOutMethod::Voxel { .. } => "voxel",
        }
    }
}

/// Remove exact duplicate rows (bitwise equality over all channels), keeping
/// the first occurrence.
pub fn dedup_points(cloud: &PointCloud) -> PointCloud {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(cloud.len());
    cloud.filter(|row| seen.insert(row.iter().map(|v| v.to_bits()).collect()))
}

/// Uniform sample of `floor(share * N)` rows without replacement, original
/// relative order preserved.
pub fn random_sample(cloud: &PointCloud, share: Share, seed: u64) -> PointCloud {
    let n = cloud.len();
    let k = share.count(n);
    if k == n {
        return cloud.clone();
    }
    let mut rng = seed::rng(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    cloud.select(&picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThinOutStage {
    pub share: Share,
    pub cloud: PointCloud,
}

/// Clouds at fractions `1, 1/2, ..., 1/2^depth` of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinOutSequence {
    pub stages: Vec<ThinOutStage>,
}

impl ThinOutSequence {
    pub fn counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.cloud.len()).collect()
    }

    pub fn last(&self) -> &ThinOutStage {
        self.stages
            .last()
            .expect("sequence always holds the full cloud")
    }
}

/// Iterated halving. Stage `k` holds exactly `floor(N / 2^k)` points.
///
/// Random and voxel stages are derived from the previous stage, so the
/// clouds form a subset chain. Knn stages are selected against the original
/// cloud; since nearest-radar distances do not depend on the stage, they are
/// nested as well.
pub fn thin_out_sequence(
    cloud: &PointCloud,
    method: ThinOutMethod,
    depth: u32,
    seed: u64,
    radar: Option<&PointCloud>,
) -> Result<ThinOutSequence> {
    if depth == 0 {
        return Err(Error::arg("thin-out depth must be at least 1"));
    }
    if depth >= 64 {
        return Err(Error::arg(format!("thin-out depth {depth} too large")));
    }
    let n = cloud.len();
    let mut stages = vec![ThinOutStage {
        share: Share::ONE,
        cloud: cloud.clone(),
    }];
    match method {
        ThinOutMethod::Knn => {
            let radar = radar.ok_or_else(|| Error::arg("knn thin-out requires a radar cloud"))?;
            let dists = nearest_radar_sq_dists(cloud, radar)?;
            for k in 1..=depth {
                let share = Share::half_pow(k);
                let keep = knn::smallest_k(&dists, share.count(n));
                stages.push(ThinOutStage {
                    share,
                    cloud: cloud.select(&keep),
                });
            }
        }
        ThinOutMethod::Random => {
            for k in 1..=depth {
                let prev = &stages.last().unwrap().cloud;
                let next = random_sample(prev, Share::half_pow(1), seed::derive(seed, k.into()));
                stages.push(ThinOutStage {
                    share: Share::half_pow(k),
                    cloud: next,
                });
            }
        }
        ThinOutMethod::Voxel { voxel_size } => {
            for k in 1..=depth {
                let share = Share::half_pow(k);
                let prev = &stages.last().unwrap().cloud;
                // floor(N / 2^k) = floor(floor(N / 2^(k-1)) / 2), so this
                // removes ceil(prev / 2) points
                let remove = prev.len() - share.count(n);
                let step =
                    voxel::voxel_remove(prev, voxel_size, remove, seed::derive(seed, k.into()))?;
                stages.push(ThinOutStage {
                    share,
                    cloud: step.cloud,
                });
            }
        }
    }
    Ok(ThinOutSequence { stages })
}

/// Thin a cloud to `share` of its points.
///
/// Power-of-half shares for random and voxel thin-out run the halving
/// sequence and return its last stage, so runs with the same seed at
/// different shares are nested. Other shares are only supported by random
/// and knn thin-out.
pub fn thin_out(
    cloud: &PointCloud,
    method: ThinOutMethod,
    share: Share,
    seed: u64,
    radar: Option<&PointCloud>,
) -> Result<PointCloud> {
    match (method, share.half_exponent()) {
        (ThinOutMethod::Knn, _) => {
            let radar = radar.ok_or_else(|| Error::arg("knn thin-out requires a radar cloud"))?;
            knn_sample(cloud, radar, share)
        }
        (_, Some(0)) => Ok(cloud.clone()),
        (_, Some(k)) => Ok(thin_out_sequence(cloud, method, k, seed, radar)?
            .stages
            .pop()
            .unwrap()
            .cloud),
        (ThinOutMethod::Random, None) => Ok(random_sample(cloud, share, seed)),
        (ThinOutMethod::Voxel { .. }, None) => Err(Error::arg(format!(
            "voxel thin-out only supports shares of the form 1/2^k, got {share}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Source;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seed::rng(seed);
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..40.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        PointCloud::from_xyz(&pts, Source::Lidar).unwrap()
    }

    fn rows_of(c: &PointCloud) -> Vec<Vec<u32>> {
        c.rows()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    fn is_subsequence(sub: &PointCloud, sup: &PointCloud) -> bool {
        let sup = rows_of(sup);
        let mut it = sup.iter();
        rows_of(sub).iter().all(|r| it.any(|s| s == r))
    }

    #[test]
    fn dedup_keeps_distinct_rows() {
        let c = random_cloud(50, 1);
        assert_eq!(dedup_points(&c), c);
    }

    #[test]
    fn dedup_collapses_identical_pair() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], Source::Lidar).unwrap();
        assert_eq!(dedup_points(&c).len(), 1);
    }

    #[test]
    fn dedup_matches_hash_set_oracle() {
        let base = random_cloud(450, 2);
        let mut rng = seed::rng(3);
        let mut data = base.data().to_vec();
        for _ in 0..50 {
            let i = rng.random_range(0..450);
            data.extend_from_slice(base.row(i));
        }
        let c = PointCloud::with_default_schema(data, Source::Lidar).unwrap();
        assert_eq!(c.len(), 500);
        let out = dedup_points(&c);
        assert_eq!(out.len(), 450);
        // oracle: first occurrence of each distinct bit pattern
        let mut seen = std::collections::BTreeSet::new();
        let expected: Vec<Vec<u32>> = rows_of(&c)
            .into_iter()
            .filter(|r| seen.insert(r.clone()))
            .collect();
        assert_eq!(rows_of(&out), expected);
    }

    #[test]
    fn dedup_distinguishes_signed_zero() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [-0.0, 0.0, 0.0]], Source::Lidar).unwrap();
        assert_eq!(dedup_points(&c).len(), 2);
    }

    #[test]
    fn random_share_one_is_identity() {
        let c = random_cloud(33, 4);
        assert_eq!(random_sample(&c, Share::ONE, 9), c);
    }

    #[test]
    fn random_half_of_ten() {
        let c = random_cloud(10, 4);
        let out = random_sample(&c, Share::half_pow(1), 9);
        assert_eq!(out.len(), 5);
        assert!(is_subsequence(&out, &c));
    }

    #[test]
    fn random_is_repeatable_and_uniform() {
        let c = PointCloud::from_xyz(
            &(0..1000).map(|i| [i as f32, 0.0, 0.0]).collect::<Vec<_>>(),
            Source::Lidar,
        )
        .unwrap();
        let a = random_sample(&c, Share::half_pow(2), 77);
        assert_eq!(a.len(), 250);
        assert_eq!(a, random_sample(&c, Share::half_pow(2), 77));

        // per-index inclusion frequency over 10^4 seeds: Binomial(10^4, 1/4)
        let trials = 10_000u64;
        let mut hits = vec![0u32; 1000];
        for s in 0..trials {
            for i in 0..250 {
                hits[random_sample(&c, Share::half_pow(2), s).xyz(i)[0] as usize] += 1;
            }
        }
        let mean = trials as f64 * 0.25;
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        let outside = hits
            .iter()
            .filter(|&&h| (h as f64 - mean).abs() > 3.0 * sigma)
            .count();
        // about 0.27% of indices fall outside 3 sigma by chance
        assert!(outside <= 10, "{outside} indices outside 3 sigma");
        let max_dev = hits
            .iter()
            .map(|&h| (h as f64 - mean).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 5.0 * sigma);
    }

    #[test]
    fn sequence_depth_eight_fractions() {
        let c = random_cloud(1000, 5);
        let seq = thin_out_sequence(&c, ThinOutMethod::Random, 8, 1, None).unwrap();
        let shares: Vec<String> = seq.stages.iter().map(|s| s.share.to_string()).collect();
        assert_eq!(
            shares,
            ["1", "1/2", "1/4", "1/8", "1/16", "1/32", "1/64", "1/128", "1/256"]
        );
    }

    #[test]
    fn sequence_depth_one_random() {
        let c = random_cloud(41, 5);
        let seq = thin_out_sequence(&c, ThinOutMethod::Random, 1, 1, None).unwrap();
        assert_eq!(seq.counts(), vec![41, 20]);
    }

    #[test]
    fn voxel_sequence_counts_follow_floor() {
        for n in [1000usize, 999, 517, 3] {
            let c = random_cloud(n, n as u64);
            let seq = thin_out_sequence(&c, ThinOutMethod::voxel(), 4, 2, None).unwrap();
            let expected: Vec<usize> = (0..=4).map(|k| n >> k).collect();
            assert_eq!(seq.counts(), expected);
            for w in seq.stages.windows(2) {
                assert!(is_subsequence(&w[1].cloud, &w[0].cloud));
            }
        }
    }

    #[test]
    fn knn_sequence_needs_radar() {
        let c = random_cloud(10, 5);
        assert!(thin_out_sequence(&c, ThinOutMethod::Knn, 2, 0, None).is_err());
        assert!(thin_out_sequence(&c, ThinOutMethod::Random, 0, 0, None).is_err());
    }

    #[test]
    fn thin_out_power_share_matches_sequence() {
        let c = random_cloud(300, 6);
        let seq = thin_out_sequence(&c, ThinOutMethod::voxel(), 3, 4, None).unwrap();
        let direct = thin_out(&c, ThinOutMethod::voxel(), Share::half_pow(3), 4, None).unwrap();
        assert_eq!(direct, seq.last().cloud);
        assert!(thin_out(
            &c,
            ThinOutMethod::voxel(),
            Share::new(3, 10).unwrap(),
            4,
            None
        )
        .is_err());
        assert_eq!(
            thin_out(
                &c,
                ThinOutMethod::Random,
                Share::new(3, 10).unwrap(),
                4,
                None
            )
            .unwrap()
            .len(),
            90
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn knn_keeps_closest(n in 1usize..120, m in 1usize..15, num in 1u64..=16, s in any::<u64>()) {
            let lidar = random_cloud(n, s);
            let radar = PointCloud::from_xyz(
                &(0..m).map(|i| random_cloud(m, s ^ 0xABCD).xyz(i)).collect::<Vec<_>>(),
                Source::Radar,
            ).unwrap();
            let share = Share::new(num, 16).unwrap();
            let out = knn_sample(&lidar, &radar, share).unwrap();
            prop_assert_eq!(out.len(), share.count(n));
            prop_assert!(is_subsequence(&out, &lidar));
            // max kept distance <= min discarded distance
            let d = nearest_radar_sq_dists(&lidar, &radar).unwrap();
            let kept: HashSet<Vec<u32>> = rows_of(&out).into_iter().collect();
            let (mut max_kept, mut min_dropped) = (f64::NEG_INFINITY, f64::INFINITY);
            for (i, r) in rows_of(&lidar).into_iter().enumerate() {
                if kept.contains(&r) { max_kept = max_kept.max(d[i]); } else { min_dropped = min_dropped.min(d[i]); }
            }
            prop_assert!(max_kept <= min_dropped);
        }

        #[test]
        fn voxel_step_contract(n in 2usize..300, s in any::<u64>(), size in 0.5f64..8.0) {
            let c = random_cloud(n, s);
            let step = voxel_sample_step(&c, [size; 3], s).unwrap();
            prop_assert_eq!(step.cloud.len(), n - n / 2);
            prop_assert!(is_subsequence(&step.cloud, &c));
            if step.shortfall == 0 {
                // every voxel keeps min(count, p_min) points
                let mut before = std::collections::BTreeMap::new();
                let mut after = std::collections::BTreeMap::new();
                for i in 0..c.len() { *before.entry(voxel::voxel_key(c.xyz(i), [size; 3])).or_insert(0usize) += 1; }
                for i in 0..step.cloud.len() { *after.entry(voxel::voxel_key(step.cloud.xyz(i), [size; 3])).or_insert(0usize) += 1; }
                for (k, cnt) in before {
                    let kept = after.get(&k).copied().unwrap_or(0);
                    prop_assert!(kept >= cnt.min(step.p_min));
                }
            }
        }

        #[test]
        fn sampling_is_deterministic(n in 2usize..200, s in any::<u64>()) {
            let c = random_cloud(n, s);
            for m in [ThinOutMethod::Random, ThinOutMethod::voxel()] {
                prop_assert_eq!(
                    thin_out_sequence(&c, m, 3, s, None).unwrap(),
                    thin_out_sequence(&c, m, 3, s, None).unwrap()
                );
            }
        }
    }
}
