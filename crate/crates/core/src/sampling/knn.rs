//! Nearest-radar distance selection of lidar points.

use rayon::prelude::*;

use super::Share;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance with a fixed summation order; every path that
/// needs bit-identical distances goes through here.
#[inline]
pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn widen(p: [f32; 3]) -> [f64; 3] {
    [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Static 3-d tree for exact nearest-neighbour distance queries.
///
/// Pruning compares the squared distance to the splitting plane against the
/// best squared distance so far. Rounding is monotone, so the pruned
/// subtree can never hold a strictly smaller distance and the returned
/// minimum equals the brute-force minimum bit for bit.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let slice = &mut self.points[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in slice.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |p, q| p[axis].total_cmp(&q[axis]));
        let value = slice[mid][axis];
        // placeholder, patched once children exist
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id as usize] = Node::Split {
            axis: axis as u8,
            value,
            left,
            right,
        };
        id
    }

    /// Smallest squared distance from `q` to any stored point.
    pub fn nearest_sq_dist(&self, q: [f64; 3]) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        stack.push((0, 0.0));
        while let Some((id, bound)) = stack.pop() {
            if bound > best {
                continue;
            }
            match self.nodes[id as usize] {
                Node::Leaf { start, end } => {
                    for p in &self.points[start as usize..end as usize] {
                        let d = sq_dist(q, *p);
                        if d < best {
                            best = d;
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis as usize] - value;
                    let (near, far) = if diff < 0.0 {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    // far side first so the near side is popped next
                    stack.push((far, diff * diff));
                    stack.push((near, bound));
                }
            }
        }
        Some(best)
    }
}

/// Squared distance from each lidar point to its nearest radar point (xyz).
pub fn nearest_radar_sq_dists(lidar: &PointCloud, radar: &PointCloud) -> Result<Vec<f64>> {
    if radar.is_empty() {
        return Err(Error::arg(
            "knn thin-out needs at least one radar point (nearest distance undefined)",
        ));
    }
    let tree = KdTree::new((0..radar.len()).map(|i| widen(radar.xyz(i))).collect());
    Ok((0..lidar.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            tree.nearest_sq_dist(widen(lidar.xyz(i)))
                .expect("tree is non-empty")
        })
        .collect())
}

/// Indices of the `k` smallest distances, ties broken by lower index,
/// returned in ascending index order.
pub(crate) fn smallest_k(dists: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    let key = |a: &usize, b: &usize| dists[*a].total_cmp(&dists[*b]).then(a.cmp(b));
    if k < idx.len() {
        if k > 0 {
            idx.select_nth_unstable_by(k - 1, key);
        }
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Keep the `floor(share * N)` lidar points closest to the radar cloud.
///
/// Original relative order is preserved. Ties in distance go to the lower
/// original index.
pub fn knn_sample(lidar: &PointCloud, radar: &PointCloud, share: Share) -> Result<PointCloud> {
    let dists = nearest_radar_sq_dists(lidar, radar)?;
    let k = share.count(lidar.len());
    Ok(lidar.select(&smallest_k(&dists, k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Source;
    use rand::Rng as _;

    fn cloud(points: &[[f32; 3]], source: Source) -> PointCloud {
        PointCloud::from_xyz(points, source).unwrap()
    }

    // exhaustive pairwise oracle
    fn brute(lidar: &[[f32; 3]], radar: &[[f32; 3]], k: usize) -> Vec<usize> {
        let d: Vec<f64> = lidar
            .iter()
            .map(|l| {
                radar
                    .iter()
                    .map(|r| {
                        let dx = f64::from(l[0]) - f64::from(r[0]);
                        let dy = f64::from(l[1]) - f64::from(r[1]);
                        let dz = f64::from(l[2]) - f64::from(r[2]);
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut order: Vec<usize> = (0..lidar.len()).collect();
        order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
        let mut keep = order[..k].to_vec();
        keep.sort();
        keep
    }

    #[test]
    fn hand_case_keeps_two_nearest() {
        let l = cloud(
            &[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 0.0, 0.0]],
            Source::Lidar,
        );
        let r = cloud(&[[0.0, 0.0, 0.0]], Source::Radar);
        let out = knn_sample(&l, &r, Share::new(2, 3).unwrap()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.xyz(0), [0.0, 0.0, 0.0]);
        assert_eq!(out.xyz(1), [5.0, 0.0, 0.0]);
    }

    #[test]
    fn full_share_is_identity_and_empty_radar_errors() {
        let l = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], Source::Lidar);
        let r = cloud(&[[0.0, 0.0, 0.0]], Source::Radar);
        assert_eq!(knn_sample(&l, &r, Share::ONE).unwrap(), l);
        let empty = cloud(&[], Source::Radar);
        assert!(knn_sample(&l, &empty, Share::ONE).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let l = cloud(
            &[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            Source::Lidar,
        );
        let r = cloud(&[[0.0, 0.0, 0.0]], Source::Radar);
        let out = knn_sample(&l, &r, Share::new(1, 3).unwrap()).unwrap();
        assert_eq!(out.xyz(0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_pairwise_oracle_on_random_instances() {
        let mut rng = crate::seed::rng(5);
        for _ in 0..50 {
            let lidar: Vec<[f32; 3]> = (0..200)
                .map(|_| {
                    [
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let radar: Vec<[f32; 3]> = (0..20)
                .map(|_| {
                    [
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let share = Share::new(rng.random_range(1..=200), 200).unwrap();
            let k = share.count(lidar.len());
            let out = knn_sample(
                &cloud(&lidar, Source::Lidar),
                &cloud(&radar, Source::Radar),
                share,
            )
            .unwrap();
            let expected = cloud(&lidar, Source::Lidar).select(&brute(&lidar, &radar, k));
            assert_eq!(out, expected);
        }
    }

    #[test]
    fn tree_handles_duplicate_coordinates() {
        let pts = vec![[1.0, 1.0, 1.0]; 40];
        let t = KdTree::new(pts);
        assert_eq!(t.nearest_sq_dist([1.0, 1.0, 2.0]), Some(1.0));
    }
}
