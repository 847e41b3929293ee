//! Deterministic synthetic scenes: boxes on a ground plane, lidar returns on
//! the faces that look towards the sensor, sparse radar near objects plus
//! clutter.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cloud::{Frame, PointCloud, Range3D, Source};
use crate::error::{Error, Result};
use crate::eval::bev_intersection_area;
use crate::geometry::Box3D;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimPrior {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Mean radar cross section, dBsm.
    pub rcs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub priors: BTreeMap<String, DimPrior>,
    /// Lidar points per m² of visible surface at `reference_range`.
    pub lidar_density: f64,
    /// Lidar points per m² of ground before range falloff.
    pub ground_density: f64,
    /// Range up to which density is not attenuated; beyond it density falls
    /// off with the inverse square of range.
    pub reference_range: f64,
    pub ground_z: f64,
    /// Radar points per m² of visible surface at `reference_range`.
    pub radar_density: f64,
    /// Expected number of clutter radar points per frame.
    pub clutter_rate: f64,
    /// Standard deviation of radar position noise, meters.
    pub radar_noise: f64,
    /// Fraction of lidar points repeated verbatim.
    pub duplicate_rate: f64,
    /// Radar is capped at `lidar points / sparsity_ratio`.
    pub sparsity_ratio: f64,
    pub range: Range3D,
    /// Minimum BEV gap between placed boxes, meters.
    pub min_gap: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let counts = [("Car", 3), ("Pedestrian", 2), ("Cyclist", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let priors = [
            ("Car", [3.9, 1.6, 1.56], [0.3, 0.1, 0.1], 10.0),
            ("Pedestrian", [0.8, 0.6, 1.73], [0.1, 0.05, 0.1], -5.0),
            ("Cyclist", [1.76, 0.6, 1.73], [0.15, 0.05, 0.1], 0.0),
        ]
        .into_iter()
        .map(|(k, mean, std, rcs)| (k.to_string(), DimPrior { mean, std, rcs }))
        .collect();
        Self {
            seed: 0,
            counts,
            priors,
            lidar_density: 50.0,
            ground_density: 2.0,
            reference_range: 10.0,
            ground_z: -1.6,
            radar_density: 2.0,
            clutter_rate: 20.0,
            radar_noise: 0.1,
            duplicate_rate: 0.01,
            sparsity_ratio: 10.0,
            range: Range3D::detector_default(),
            min_gap: 0.5,
            max_attempts: 1000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lidar_density", self.lidar_density),
            ("radar_density", self.radar_density),
            ("reference_range", self.reference_range),
            ("sparsity_ratio", self.sparsity_ratio),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("ground_density", self.ground_density),
            ("clutter_rate", self.clutter_rate),
            ("radar_noise", self.radar_noise),
            ("min_gap", self.min_gap),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return Err(Error::arg("duplicate_rate must lie in [0, 1]"));
        }
        for (class, &n) in &self.counts {
            if n == 0 {
                continue;
            }
            let p = self
                .priors
                .get(class)
                .ok_or_else(|| Error::arg(format!("no dimension prior for class {class}")))?;
            if !p.mean.iter().all(|&m| m.is_finite() && m > 0.0)
                || !p.std.iter().all(|&s| s.is_finite() && s >= 0.0)
            {
                return Err(Error::arg(format!(
                    "dimension prior for {class} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Density attenuation at BEV range `r`.
    pub fn falloff(&self, r: f64) -> f64 {
        if r <= self.reference_range {
            1.0
        } else {
            (self.reference_range / r).powi(2)
        }
    }
}

/// A rectangular box face: center, two half-extent edge vectors and the
/// outward normal.
#[derive(Debug, Clone, Copy)]
pub struct Face {
    pub center: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub normal: [f64; 3],
}

impl Face {
    pub fn area(&self) -> f64 {
        let n = |a: [f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        4.0 * n(self.u) * n(self.v)
    }

    fn point(&self, s: f64, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| self.center[k] + s * self.u[k] + t * self.v[k])
    }

    /// Distance of `p` from the face rectangle.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (uu, vv) = (dot(self.u, self.u), dot(self.v, self.v));
        let s = (dot(d, self.u) / uu).clamp(-1.0, 1.0);
        let t = (dot(d, self.v) / vv).clamp(-1.0, 1.0);
        let q = self.point(s, t);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }
}

/// The four side faces and the top face of a box.
pub fn box_faces(b: &Box3D) -> [Face; 5] {
    let (s, c) = b.yaw.sin_cos();
    let [l, w, h] = b.dims.map(|d| 0.5 * d);
    let fwd = [c, s, 0.0];
    let left = [-s, c, 0.0];
    let up = [0.0, 0.0, 1.0];
    let scale = |a: [f64; 3], k: f64| a.map(|x| x * k);
    let at = |a: [f64; 3], k: f64| [0, 1, 2].map(|i| b.center[i] + a[i] * k);
    let side = |dir: [f64; 3], half: f64, along: [f64; 3], along_half: f64| Face {
        center: at(dir, half),
        u: scale(along, along_half),
        v: scale(up, h),
        normal: dir,
    };
    [
        side(fwd, l, left, w),
        side(scale(fwd, -1.0), l, left, w),
        side(left, w, fwd, l),
        side(scale(left, -1.0), w, fwd, l),
        Face {
            center: at(up, h),
            u: scale(fwd, l),
            v: scale(left, w),
            normal: up,
        },
    ]
}

/// Faces seen from a sensor at the origin: sides whose outward normal
/// points towards the sensor, plus the top.
pub fn visible_faces(b: &Box3D) -> Vec<Face> {
    box_faces(b)
        .into_iter()
        .filter(|f| {
            f.normal[2] > 0.0 || f.normal[0] * f.center[0] + f.normal[1] * f.center[1] < 0.0
        })
        .collect()
}

fn bev_range(p: [f64; 3]) -> f64 {
    p[0].hypot(p[1])
}

fn expected_count(density: f64, area: f64, falloff: f64) -> usize {
    (density * area * falloff).round() as usize
}

fn box_inside(b: &Box3D, range: &Range3D) -> bool {
    b.bev_corners().iter().all(|&[x, y]| {
        x >= range.min[0] && x <= range.max[0] && y >= range.min[1] && y <= range.max[1]
    }) && b.z_min() >= range.min[2]
        && b.z_max() <= range.max[2]
}

/// Place the spec's boxes on the ground without BEV overlap.
pub fn place_boxes(spec: &SceneSpec, rng: &mut Rng) -> Result<Vec<Box3D>> {
    let mut boxes: Vec<Box3D> = Vec::new();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (class, &n) in &spec.counts {
        for _ in 0..n {
            let prior = spec.priors[class];
            let mut placed = false;
            for _ in 0..spec.max_attempts {
                let dims: [f64; 3] = [0, 1, 2].map(|k| {
                    let d = prior.mean[k] + prior.std[k] * normal.sample(rng);
                    d.max(0.5 * prior.mean[k])
                });
                let x = rng.random_range(spec.range.min[0]..spec.range.max[0]);
                let y = rng.random_range(spec.range.min[1]..spec.range.max[1]);
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let b = Box3D::new(
                    [x, y, spec.ground_z + 0.5 * dims[2]],
                    dims,
                    yaw,
                    class.as_str(),
                    None,
                )?;
                if !box_inside(&b, &spec.range) {
                    continue;
                }
                let grown = Box3D {
                    dims: [
                        b.dims[0] + 2.0 * spec.min_gap,
                        b.dims[1] + 2.0 * spec.min_gap,
                        b.dims[2],
                    ],
                    ..b.clone()
                };
                if boxes.iter().any(|o| bev_intersection_area(&grown, o) > 0.0) {
                    continue;
                }
                boxes.push(b);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Infeasible(format!(
                    "could not place {class} #{} without overlap after {} attempts",
                    boxes.len() + 1,
                    spec.max_attempts
                )));
            }
        }
    }
    Ok(boxes)
}

fn sample_on_faces(
    faces: &[Face],
    density: f64,
    spec: &SceneSpec,
    rng: &mut Rng,
    mut emit: impl FnMut(&Face, [f64; 3], &mut Rng),
) {
    for f in faces {
        let n = expected_count(density, f.area(), spec.falloff(bev_range(f.center)));
        for _ in 0..n {
            let p = f.point(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            emit(f, p, rng);
        }
    }
}

/// Render lidar and radar for a fixed set of boxes.
pub fn render_scene(
    spec: &SceneSpec,
    boxes: &[Box3D],
    rng: &mut Rng,
) -> Result<(PointCloud, PointCloud)> {
    spec.validate()?;
    let mut lidar: Vec<f32> = Vec::new();
    let push_lidar = |lidar: &mut Vec<f32>, p: [f64; 3], rng: &mut Rng| {
        lidar.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32, rng.random::<f32>()]);
    };
    for b in boxes {
        sample_on_faces(
            &visible_faces(b),
            spec.lidar_density,
            spec,
            rng,
            |_, p, rng| push_lidar(&mut lidar, p, rng),
        );
    }
    if spec.ground_density > 0.0 {
        let r = &spec.range;
        let area = r.extent(0) * r.extent(1);
        let draws = (spec.ground_density * area).round() as usize;
        for _ in 0..draws {
            let x = rng.random_range(r.min[0]..=r.max[0]);
            let y = rng.random_range(r.min[1]..=r.max[1]);
            if rng.random::<f64>() < spec.falloff(x.hypot(y)) {
                push_lidar(&mut lidar, [x, y, spec.ground_z], rng);
            }
        }
    }
    let n_lidar = lidar.len() / 4;
    let dups = (spec.duplicate_rate * n_lidar as f64).round() as usize;
    for _ in 0..dups {
        let i = rng.random_range(0..n_lidar);
        let row: Vec<f32> = lidar[4 * i..4 * i + 4].to_vec();
        lidar.extend_from_slice(&row);
    }
    let n_lidar = lidar.len() / 4;

    let mut radar: Vec<f32> = Vec::new();
    let noise = Normal::new(0.0, spec.radar_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let rcs_noise = Normal::new(0.0, 3.0).expect("finite");
    for b in boxes {
        let prior = spec.priors.get(&b.label).copied();
        let speed = if rng.random::<f64>() < 0.5 {
            0.0
        } else {
            rng.random_range(0.5..10.0)
        };
        let vel = [speed * b.yaw.cos(), speed * b.yaw.sin()];
        sample_on_faces(
            &visible_faces(b),
            spec.radar_density,
            spec,
            rng,
            |_, p, rng| {
                let q = [0, 1, 2].map(|k| p[k] + noise.sample(rng));
                let r = bev_range(q).max(1e-6);
                let v_r = (vel[0] * q[0] + vel[1] * q[1]) / r;
                let rcs = prior.map_or(0.0, |p| p.rcs) + rcs_noise.sample(rng);
                radar.extend_from_slice(&[
                    q[0] as f32,
                    q[1] as f32,
                    q[2] as f32,
                    rcs as f32,
                    v_r as f32,
                    v_r as f32,
                    0.0,
                ]);
            },
        );
    }
    if spec.clutter_rate > 0.0 {
        let n = Poisson::new(spec.clutter_rate)
            .expect("positive rate")
            .sample(rng) as usize;
        let r = &spec.range;
        for _ in 0..n {
            let x = rng.random_range(r.min[0]..=r.max[0]);
            let y = rng.random_range(r.min[1]..=r.max[1]);
            let z = rng.random_range(spec.ground_z..=spec.ground_z + 2.0);
            let rcs = -10.0 + rcs_noise.sample(rng);
            let ego = rng.random_range(-0.3..0.3);
            radar.extend_from_slice(&[
                x as f32, y as f32, z as f32, rcs as f32, ego as f32, 0.0, 0.0,
            ]);
        }
    }
    let cap = (n_lidar as f64 / spec.sparsity_ratio).floor() as usize;
    radar.truncate(cap.min(radar.len() / 7) * 7);
    Ok((
        PointCloud::with_default_schema(lidar, Source::Lidar)?,
        PointCloud::with_default_schema(radar, Source::Radar)?,
    ))
}

/// One synthetic frame, fully determined by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Frame> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let boxes = place_boxes(spec, &mut rng)?;
    let (lidar, radar) = render_scene(spec, &boxes, &mut rng)?;
    Frame::new(format!("{:06}", spec.seed % 1_000_000), lidar, radar, boxes)
}

/// Frames `0..n` with seeds derived from `spec.seed`; ids are `000000`,
/// `000001`, ...
pub fn generate_frames(spec: &SceneSpec, n: usize) -> Result<Vec<Frame>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = SceneSpec {
                seed: seed::derive(spec.seed, i as u64),
                ..spec.clone()
            };
            let mut f = generate_scene(&s)?;
            f.id = format!("{i:06}");
            Ok(f)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Points needed inside a box for it to be detected.
    pub min_points: usize,
    /// Score saturation scale: `score = 1 - exp(-points / scale)`.
    pub scale: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            min_points: 5,
            scale: 20.0,
        }
    }
}

/// Stand-in detector: reports each ground-truth box that is supported by
/// enough points of `cloud`, scored by its support.
pub fn support_detector(cloud: &PointCloud, gt: &[Box3D], params: &DetectorParams) -> Vec<Box3D> {
    gt.iter()
        .filter_map(|b| {
            let grown = Box3D {
                dims: b.dims.map(|d| d + 0.2),
                ..b.clone()
            };
            let n = (0..cloud.len())
                .filter(|&i| grown.contains(cloud.xyz(i).map(f64::from)))
                .count();
            (n >= params.min_points).then(|| Box3D {
                score: Some(1.0 - (-(n as f64) / params.scale).exp()),
                ..b.clone()
            })
        })
        .collect()
}
