//! Radar + lidar merging and radar-prioritized pillarization.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Range3D, Source, SOURCE_CHANNEL};
use crate::error::{Error, Result};
use crate::seed;

/// Merge a radar and a lidar cloud into one mixed cloud.
///
/// The schema is the radar schema, then lidar channels the radar lacks,
/// then the `is_radar` indicator. Missing channels are zero-filled. Radar
/// rows come first.
pub fn merge_clouds(radar: &PointCloud, lidar: &PointCloud) -> Result<PointCloud> {
    if radar.source() == Source::Mixed || lidar.source() == Source::Mixed {
        return Err(Error::arg("merge_clouds expects unmixed inputs"));
    }
    let mut schema: Vec<String> = radar.schema().to_vec();
    for name in lidar.schema() {
        if !schema.contains(name) {
            schema.push(name.clone());
        }
    }
    if schema.iter().any(|s| s == SOURCE_CHANNEL) {
        return Err(Error::arg(format!(
            "input already carries a `{SOURCE_CHANNEL}` channel"
        )));
    }
    schema.push(SOURCE_CHANNEL.to_string());
    let c = schema.len();
    let indicator = c - 1;

    let column_map = |cloud: &PointCloud| -> Vec<usize> {
        cloud
            .schema()
            .iter()
            .map(|n| schema.iter().position(|s| s == n).unwrap())
            .collect()
    };
    let mut data = vec![0.0f32; (radar.len() + lidar.len()) * c];
    let mut rows = data.chunks_exact_mut(c);
    for (cloud, flag) in [(radar, 1.0f32), (lidar, 0.0f32)] {
        let map = column_map(cloud);
        for src in cloud.rows() {
            let dst = rows.next().unwrap();
            for (k, &v) in src.iter().enumerate() {
                dst[map[k]] = v;
            }
            dst[indicator] = flag;
        }
    }
    PointCloud::new(data, schema, Source::Mixed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PillarParams {
    /// Pillar footprint `(dx, dy)`, meters.
    pub pillar_size: [f64; 2],
    pub max_points: usize,
    pub range: Range3D,
}

impl Default for PillarParams {
    /// 0.16 m pillars holding at most 32 points over the detector range.
    fn default() -> Self {
        Self {
            pillar_size: [0.16, 0.16],
            max_points: 32,
            range: Range3D::detector_default(),
        }
    }
}

impl PillarParams {
    pub fn validate(&self) -> Result<()> {
        if !self.pillar_size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::arg("pillar size must be positive"));
        }
        if self.max_points == 0 {
            return Err(Error::arg("max points per pillar must be at least 1"));
        }
        Range3D::new(self.range.min, self.range.max).map(|_| ())
    }

    /// Number of pillars along x and y.
    pub fn grid_dims(&self) -> [u32; 2] {
        [0, 1].map(|a| ((self.range.extent(a) / self.pillar_size[a]).round() as u32).max(1))
    }

    /// Pillar index for a point; `None` outside the range.
    pub fn cell_of(&self, p: [f32; 3]) -> Option<[u32; 2]> {
        if !self.range.contains(p) {
            return None;
        }
        let dims = self.grid_dims();
        Some([0, 1].map(|a| {
            let t = ((f64::from(p[a]) - self.range.min[a]) / self.pillar_size[a]).floor();
            (t.max(0.0) as u32).min(dims[a] - 1)
        }))
    }

    /// xy bounds `[x0, y0, x1, y1]` of a pillar. The last pillar on each
    /// axis extends to the range maximum.
    pub fn cell_bounds(&self, cell: [u32; 2]) -> [f64; 4] {
        let dims = self.grid_dims();
        let lo = [0, 1].map(|a| self.range.min[a] + f64::from(cell[a]) * self.pillar_size[a]);
        let hi = [0, 1].map(|a| {
            if cell[a] + 1 == dims[a] {
                self.range.max[a]
            } else {
                lo[a] + self.pillar_size[a]
            }
        });
        [lo[0], lo[1], hi[0], hi[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    /// Kept rows, row-major over the mixed schema, original order.
    pub data: Vec<f32>,
    pub is_radar: Vec<bool>,
    /// Radar and lidar points that fell in the cell before capping.
    pub radar_in: usize,
    pub lidar_in: usize,
}

impl Pillar {
    pub fn len(&self) -> usize {
        self.is_radar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_radar.is_empty()
    }

    pub fn radar_kept(&self) -> usize {
        self.is_radar.iter().filter(|&&r| r).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub params: PillarParams,
    pub schema: Vec<String>,
    /// Non-empty pillars keyed by `(i, j)`.
    pub pillars: BTreeMap<[u32; 2], Pillar>,
}

impl PillarGrid {
    pub fn total_points(&self) -> usize {
        self.pillars.values().map(Pillar::len).sum()
    }
}

fn cell_tag(cell: [u32; 2]) -> u64 {
    (u64::from(cell[0]) << 32) | u64::from(cell[1])
}

fn pick(rng: &mut seed::Rng, from: &[usize], k: usize) -> Vec<usize> {
    if k >= from.len() {
        return from.to_vec();
    }
    index::sample(rng, from.len(), k)
        .into_iter()
        .map(|j| from[j])
        .collect()
}

/// Bin a mixed cloud into pillars, capping each at `max_points`.
///
/// Overflowing cells keep all radar points first (a uniform subset if radar
/// alone overflows) and fill the remaining slots with uniformly chosen lidar
/// points. Each cell draws from its own seed derived from `(seed, i, j)`, so
/// cells can be filled in parallel without changing the result. Points
/// outside the range are dropped.
pub fn pillarize_prioritized(
    mixed: &PointCloud,
    params: &PillarParams,
    seed: u64,
) -> Result<PillarGrid> {
    params.validate()?;
    if mixed.source() != Source::Mixed {
        return Err(Error::arg("pillarization expects a mixed cloud"));
    }
    let flag = mixed
        .channel_index(SOURCE_CHANNEL)
        .expect("mixed clouds carry the indicator");
    let mut cells: BTreeMap<[u32; 2], Vec<usize>> = BTreeMap::new();
    for i in 0..mixed.len() {
        if let Some(cell) = params.cell_of(mixed.xyz(i)) {
            cells.entry(cell).or_default().push(i);
        }
    }
    let cells: Vec<([u32; 2], Vec<usize>)> = cells.into_iter().collect();
    let c = mixed.channels();
    let filled: Vec<([u32; 2], Pillar)> = cells
        .into_par_iter()
        .map(|(cell, members)| {
            let (radar, lidar): (Vec<usize>, Vec<usize>) =
                members.iter().partition(|&&i| mixed.row(i)[flag] == 1.0);
            let mut keep = if members.len() <= params.max_points {
                members.clone()
            } else {
                let mut rng = seed::rng(seed::derive(seed, cell_tag(cell)));
                let mut k = pick(&mut rng, &radar, params.max_points);
                let room = params.max_points - k.len();
                k.extend(pick(&mut rng, &lidar, room));
                k
            };
            keep.sort_unstable();
            let mut data = Vec::with_capacity(keep.len() * c);
            let mut is_radar = Vec::with_capacity(keep.len());
            for &i in &keep {
                let row = mixed.row(i);
                data.extend_from_slice(row);
                is_radar.push(row[flag] == 1.0);
            }
            (
                cell,
                Pillar {
                    data,
                    is_radar,
                    radar_in: radar.len(),
                    lidar_in: lidar.len(),
                },
            )
        })
        .collect();
    Ok(PillarGrid {
        params: *params,
        schema: mixed.schema().to_vec(),
        pillars: filled.into_iter().collect(),
    })
}

/// One entry of the pillar index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PillarEntry {
    pub i: u32,
    pub j: u32,
    /// Row offset into the payload.
    pub offset: usize,
    pub count: usize,
    pub radar_count: usize,
}

/// JSON index accompanying a pillar payload. The payload is the
/// concatenation of every pillar's rows as little-endian `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PillarIndex {
    pub schema: Vec<String>,
    pub params: PillarParams,
    pub grid_dims: [u32; 2],
    pub pillars: Vec<PillarEntry>,
}

pub fn pillar_index(grid: &PillarGrid) -> (PillarIndex, Vec<f32>) {
    let mut payload = Vec::with_capacity(grid.total_points() * grid.schema.len());
    let mut entries = Vec::with_capacity(grid.pillars.len());
    let mut offset = 0;
    for (&[i, j], p) in &grid.pillars {
        entries.push(PillarEntry {
            i,
            j,
            offset,
            count: p.len(),
            radar_count: p.radar_kept(),
        });
        payload.extend_from_slice(&p.data);
        offset += p.len();
    }
    (
        PillarIndex {
            schema: grid.schema.clone(),
            params: grid.params,
            grid_dims: grid.params.grid_dims(),
            pillars: entries,
        },
        payload,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radar(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::from_xyz(points, Source::Radar).unwrap()
    }

    fn lidar(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::from_xyz(points, Source::Lidar).unwrap()
    }

    #[test]
    fn merge_with_empty_lidar() {
        let r = radar(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let m = merge_clouds(&r, &lidar(&[])).unwrap();
        assert_eq!(m.len(), 2);
        let f = m.channel_index(SOURCE_CHANNEL).unwrap();
        assert!(m.rows().all(|row| row[f] == 1.0));
    }

    #[test]
    fn merge_orders_radar_first() {
        let r = radar(&[[1.0, 0.0, 0.0]; 3]);
        let l = lidar(&[[5.0, 0.0, 0.0]; 5]);
        let m = merge_clouds(&r, &l).unwrap();
        assert_eq!(m.len(), 8);
        let f = m.channel_index(SOURCE_CHANNEL).unwrap();
        let flags: Vec<f32> = m.rows().map(|row| row[f]).collect();
        assert_eq!(flags, [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_zero_fills_per_row() {
        let ls: Vec<String> = ["x", "y", "z", "intensity"].map(String::from).to_vec();
        let rs: Vec<String> = ["x", "y", "z", "rcs", "v_r"].map(String::from).to_vec();
        let l = PointCloud::new(
            vec![1., 2., 3., 0.7, 4., 5., 6., 0.9],
            ls.clone(),
            Source::Lidar,
        )
        .unwrap();
        let r = PointCloud::new(vec![7., 8., 9., -3., 1.5], rs.clone(), Source::Radar).unwrap();
        let m = merge_clouds(&r, &l).unwrap();
        assert_eq!(m.channels(), 7);
        // per-row oracle: look each source channel up by name
        let sources = [(&r, 1.0f32), (&l, 0.0f32)];
        let mut row_idx = 0;
        for (cloud, flag) in sources {
            for src in cloud.rows() {
                let out = m.row(row_idx);
                for (k, name) in m.schema().iter().enumerate() {
                    let expected = if name == SOURCE_CHANNEL {
                        flag
                    } else {
                        cloud.channel_index(name).map(|j| src[j]).unwrap_or(0.0)
                    };
                    assert_eq!(out[k], expected, "row {row_idx} channel {name}");
                }
                row_idx += 1;
            }
        }
    }

    #[test]
    fn merge_rejects_mixed_input() {
        let m = merge_clouds(&radar(&[[0.0; 3]]), &lidar(&[[0.0; 3]])).unwrap();
        assert!(merge_clouds(&m, &lidar(&[])).is_err());
    }

    fn cell_cloud(n_radar: usize, n_lidar: usize) -> PointCloud {
        // all points inside pillar (0, 0) of the default grid
        let r: Vec<[f32; 3]> = (0..n_radar)
            .map(|i| [0.01 + 0.001 * i as f32, 0.01, 0.0])
            .collect();
        let l: Vec<[f32; 3]> = (0..n_lidar)
            .map(|i| [0.02 + 0.001 * i as f32, 0.02, 0.0])
            .collect();
        merge_clouds(&radar(&r), &lidar(&l)).unwrap()
    }

    fn origin_params(max_points: usize) -> PillarParams {
        PillarParams {
            pillar_size: [0.16, 0.16],
            max_points,
            range: Range3D::new([0.0, 0.0, -3.0], [51.2, 25.6, 2.0]).unwrap(),
        }
    }

    #[test]
    fn overflow_keeps_radar_first() {
        let g = pillarize_prioritized(&cell_cloud(2, 10), &origin_params(4), 1).unwrap();
        let p = &g.pillars[&[0, 0]];
        assert_eq!(p.len(), 4);
        assert_eq!(p.radar_kept(), 2);
    }

    #[test]
    fn two_radar_ten_lidar_selection_is_uniform_over_pairs() {
        // enumeration over the cell: each of the C(10, 2) = 45 lidar pairs
        // is equally likely, so each lidar point is kept with prob. 1/5
        let cloud = cell_cloud(2, 10);
        let mut hits = [0u32; 10];
        let trials = 4000;
        for s in 0..trials {
            let g = pillarize_prioritized(&cloud, &origin_params(4), s).unwrap();
            let p = &g.pillars[&[0, 0]];
            for (k, &is_r) in p.is_radar.iter().enumerate() {
                if !is_r {
                    let x = p.data[k * cloud.channels()];
                    hits[((x - 0.02) / 0.001).round() as usize] += 1;
                }
            }
        }
        let expected = trials as f64 / 5.0;
        for h in hits {
            assert!((h as f64 - expected).abs() < 4.0 * (expected * 0.8).sqrt());
        }
    }

    #[test]
    fn small_cells_keep_everything() {
        let g = pillarize_prioritized(&cell_cloud(3, 5), &origin_params(32), 1).unwrap();
        assert_eq!(g.total_points(), 8);
    }

    #[test]
    fn default_params_match_detector_setup() {
        let p = PillarParams::default();
        assert_eq!(p.max_points, 32);
        assert_eq!(p.pillar_size, [0.16, 0.16]);
        assert_eq!(p.grid_dims(), [320, 320]);
    }

    #[test]
    fn radar_overflow_subsamples_radar() {
        let g = pillarize_prioritized(&cell_cloud(40, 10), &origin_params(32), 3).unwrap();
        let p = &g.pillars[&[0, 0]];
        assert_eq!(p.len(), 32);
        assert_eq!(p.radar_kept(), 32);
    }

    #[test]
    fn rejects_unmixed_input() {
        assert!(
            pillarize_prioritized(&lidar(&[[1.0, 0.0, 0.0]]), &PillarParams::default(), 0).is_err()
        );
    }

    #[test]
    fn index_offsets_are_contiguous() {
        let mut pts = vec![];
        for i in 0..50 {
            pts.push([0.05 * i as f32, 0.05, 0.0]);
        }
        let m = merge_clouds(&radar(&pts[..10]), &lidar(&pts[10..])).unwrap();
        let g = pillarize_prioritized(&m, &origin_params(2), 0).unwrap();
        let (idx, payload) = pillar_index(&g);
        let mut off = 0;
        for e in &idx.pillars {
            assert_eq!(e.offset, off);
            off += e.count;
        }
        assert_eq!(payload.len(), off * m.channels());
    }
}
