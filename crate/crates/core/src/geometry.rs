//! Oriented boxes and convex polygon helpers.
//!
//! Yaw is counter-clockwise about +z with 0 along +x. `dims` are
//! `(length, width, height)`, length measured along the heading.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Map an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid can return exactly 2*pi for tiny negative inputs
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(
        center: [f64; 3],
        dims: [f64; 3],
        yaw: f64,
        label: impl Into<String>,
        score: Option<f64>,
    ) -> Result<Self> {
        let b = Self {
            center,
            dims,
            yaw: normalize_yaw(yaw),
            label: label.into(),
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::arg("box center and yaw must be finite"));
        }
        if !self.dims.iter().all(|&d| d.is_finite() && d > 0.0) {
            return Err(Error::arg(format!(
                "box dims must be positive, got {:?}",
                self.dims
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::arg(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    pub fn z_min(&self) -> f64 {
        self.center[2] - 0.5 * self.dims[2]
    }

    pub fn z_max(&self) -> f64 {
        self.center[2] + 0.5 * self.dims[2]
    }

    /// Euclidean distance of the center from the origin in the xy plane.
    pub fn bev_distance(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Footprint corners, counter-clockwise seen from +z, starting at the
    /// rear-right corner `(-l/2, -w/2)` in the box frame.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.dims[0];
        let hw = 0.5 * self.dims[1];
        let local = [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]];
        local.map(|[u, v]| {
            [
                self.center[0] + c * u - s * v,
                self.center[1] + s * u + c * v,
            ]
        })
    }

    /// The eight cuboid corners: bottom face counter-clockwise from +z, then
    /// the top face in the same order.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let (z0, z1) = (self.z_min(), self.z_max());
        let mut out = [[0.0; 3]; 8];
        for (i, [x, y]) in bev.into_iter().enumerate() {
            out[i] = [x, y, z0];
            out[i + 4] = [x, y, z1];
        }
        out
    }

    /// Inverse of [`Box3D::corners`]. Label and score are not recoverable
    /// and are left empty.
    pub fn from_corners(corners: &[[f64; 3]; 8]) -> Box3D {
        let mut center = [0.0; 3];
        for c in corners {
            for a in 0..3 {
                center[a] += c[a] / 8.0;
            }
        }
        let edge = |i: usize, j: usize| {
            let d = [corners[j][0] - corners[i][0], corners[j][1] - corners[i][1]];
            (d, d[0].hypot(d[1]))
        };
        let (along, l) = edge(0, 1);
        let (_, w) = edge(1, 2);
        let h = corners[4][2] - corners[0][2];
        Box3D {
            center,
            dims: [l, w, h],
            yaw: normalize_yaw(along[1].atan2(along[0])),
            label: String::new(),
            score: None,
        }
    }

    /// Axis-aligned BEV bounding rectangle `(x_min, y_min, x_max, y_max)`.
    pub fn bev_aabb(&self) -> [f64; 4] {
        let c = self.bev_corners();
        let mut r = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for [x, y] in c {
            r[0] = r[0].min(x);
            r[1] = r[1].min(y);
            r[2] = r[2].max(x);
            r[3] = r[3].max(y);
        }
        r
    }

    /// True if `p` lies inside the footprint (inclusive).
    pub fn bev_contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.dims[0] && v.abs() <= 0.5 * self.dims[1]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.bev_contains([p[0], p[1]]) && p[2] >= self.z_min() && p[2] <= self.z_max()
    }

    /// Same box rotated about the world z axis through the origin.
    pub fn rotated_about_origin(&self, angle: f64) -> Box3D {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = self.center;
        Box3D {
            center: [c * x - s * y, s * x + c * y, z],
            yaw: normalize_yaw(self.yaw + angle),
            ..self.clone()
        }
    }
}

/// Signed area (positive for counter-clockwise vertex order).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            let p_in = dp >= 0.0;
            let q_in = dq >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(yaw: f64) -> Box3D {
        Box3D::new([0.0; 3], [1.0; 3], yaw, "Car", None).unwrap()
    }

    #[test]
    fn normalize_yaw_range() {
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-15);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(normalize_yaw(0.25), 0.25);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(Box3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0, "Car", None).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], 0.0, "Car", Some(1.5)).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0, "Car", None).is_err());
    }

    #[test]
    fn unit_cube_corners() {
        let c = unit(0.0).corners();
        let expected = [
            [-0.5, -0.5, -0.5],
            [0.5, -0.5, -0.5],
            [0.5, 0.5, -0.5],
            [-0.5, 0.5, -0.5],
            [-0.5, -0.5, 0.5],
            [0.5, -0.5, 0.5],
            [0.5, 0.5, 0.5],
            [-0.5, 0.5, 0.5],
        ];
        assert_eq!(c, expected);
        // bottom face is counter-clockwise from +z
        let bottom: Vec<[f64; 2]> = c[..4].iter().map(|p| [p[0], p[1]]).collect();
        assert!(polygon_area(&bottom) > 0.0);
    }

    #[test]
    fn quarter_turn_swaps_extents() {
        let b = Box3D::new([0.0; 3], [2.0, 1.0, 1.0], PI / 2.0, "Car", None).unwrap();
        let [x0, y0, x1, y1] = b.bev_aabb();
        assert!((x1 - x0 - 1.0).abs() < 1e-12);
        assert!((y1 - y0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corners_match_rotation_matrix_oracle() {
        let b = Box3D::new([3.0, -2.0, 0.5], [4.2, 1.8, 1.6], 0.3, "Car", None).unwrap();
        // rotation matrix applied to the axis-aligned corners
        let (l, w, h) = (4.2, 1.8, 1.6);
        let r = [[0.3f64.cos(), -0.3f64.sin()], [0.3f64.sin(), 0.3f64.cos()]];
        let signs = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        let got = b.corners();
        for (k, zs) in [-1.0, 1.0].into_iter().enumerate() {
            for (i, (sx, sy)) in signs.iter().enumerate() {
                let u = sx * l / 2.0;
                let v = sy * w / 2.0;
                let e = [
                    r[0][0] * u + r[0][1] * v + 3.0,
                    r[1][0] * u + r[1][1] * v - 2.0,
                    0.5 + zs * h / 2.0,
                ];
                let g = got[k * 4 + i];
                for a in 0..3 {
                    assert!((g[a] - e[a]).abs() < 1e-12, "corner {i} axis {a}");
                }
            }
        }
    }

    #[test]
    fn clip_identical_squares() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let out = clip_convex(&sq, &sq);
        assert!((polygon_area(&out) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn corners_round_trip(
            cx in -50.0f64..50.0, cy in -50.0f64..50.0, cz in -3.0f64..3.0,
            l in 0.1f64..10.0, w in 0.1f64..10.0, h in 0.1f64..5.0,
            yaw in -10.0f64..10.0,
        ) {
            let b = Box3D::new([cx, cy, cz], [l, w, h], yaw, "x", None).unwrap();
            let r = Box3D::from_corners(&b.corners());
            for a in 0..3 {
                prop_assert!((r.center[a] - b.center[a]).abs() < 1e-9);
                prop_assert!((r.dims[a] - b.dims[a]).abs() < 1e-9);
            }
            let dyaw = normalize_yaw(r.yaw - b.yaw);
            prop_assert!(dyaw.abs() < 1e-9);
        }
    }
}
