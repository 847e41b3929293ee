use std::collections::HashSet;

use proptest::prelude::*;
use radarlift::cloud::{crop_to_range, SOURCE_CHANNEL};
use radarlift::mixing::{merge_clouds, pillarize_prioritized, PillarParams};
use radarlift::sampling::{dedup_points, thin_out, Share, ThinOutMethod};
use radarlift::synth::{generate_frames, SceneSpec};
use radarlift::{seed, Range3D};

fn rows(c: &radarlift::PointCloud) -> HashSet<Vec<u32>> {
    c.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
}

fn frame(s: u64) -> radarlift::Frame {
    let spec = SceneSpec {
        seed: s,
        ..SceneSpec::default()
    };
    generate_frames(&spec, 1).unwrap().remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shares_are_nested(s in 0u64..1000, method in 0usize..3) {
        let f = frame(s);
        let lidar = dedup_points(&crop_to_range(&f.lidar, &Range3D::detector_default()));
        let m = [ThinOutMethod::Random, ThinOutMethod::Knn, ThinOutMethod::voxel()][method];
        let seed = seed::derive_str(s, &f.id);
        let mut prev = rows(&lidar);
        for k in 1..=4 {
            let out = thin_out(&lidar, m, Share::half_pow(k), seed, Some(&f.radar)).unwrap();
            prop_assert_eq!(out.len(), lidar.len() >> k);
            let cur = rows(&out);
            prop_assert!(cur.is_subset(&prev), "stage {} of {} is not nested", k, m.name());
            prev = cur;
        }
    }

    #[test]
    fn mixed_pillars_keep_radar_first(s in 0u64..1000, max_points in 1usize..40) {
        let f = frame(s);
        let mixed = merge_clouds(&f.radar, &f.lidar).unwrap();
        prop_assert_eq!(mixed.len(), f.radar.len() + f.lidar.len());
        let flag = mixed.channel_index(SOURCE_CHANNEL).unwrap();
        let params = PillarParams { max_points, ..PillarParams::default() };
        let grid = pillarize_prioritized(&mixed, &params, s).unwrap();
        for p in grid.pillars.values() {
            prop_assert!(p.len() <= max_points);
            prop_assert_eq!(p.radar_kept(), p.radar_in.min(max_points));
            prop_assert_eq!(p.len(), (p.radar_in + p.lidar_in).min(max_points));
            let flags: Vec<f32> = p.data.chunks_exact(mixed.channels()).map(|r| r[flag]).collect();
            prop_assert_eq!(flags.iter().filter(|&&v| v == 1.0).count(), p.radar_kept());
        }
    }
}

#[test]
fn frames_are_reproducible() {
    let spec = SceneSpec {
        seed: 77,
        ..SceneSpec::default()
    };
    let a = generate_frames(&spec, 5).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| generate_frames(&spec, 5)).unwrap();
    assert_eq!(a, b);
}
