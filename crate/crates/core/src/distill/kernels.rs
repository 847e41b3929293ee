//! Interpolation, RoI alignment and 1x1 channel alignment.

use serde::{Deserialize, Serialize};

use super::{DenseMap, Geometry};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

/// Adaptive RoI sampling places this many samples per map cell along each
/// axis.
const ADAPTIVE_DENSITY: f64 = 4.0;

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample at continuous `(col, row)`, clamped to the border.
fn sample(map: &DenseMap, u: f64, v: f64, out: &mut [f64]) {
    let u = u.clamp(0.0, (map.w - 1) as f64);
    let v = v.clamp(0.0, (map.h - 1) as f64);
    let c0 = u.floor() as usize;
    let r0 = v.floor() as usize;
    let c1 = (c0 + 1).min(map.w - 1);
    let r1 = (r0 + 1).min(map.h - 1);
    let fu = u - c0 as f64;
    let fv = v - r0 as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let top = lerp(map.get(r0, c0, k), map.get(r0, c1, k), fu);
        let bottom = lerp(map.get(r1, c0, k), map.get(r1, c1, k), fu);
        *o = lerp(top, bottom, fv);
    }
}

fn align_corners_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        (i * (src - 1)) as f64 / (dst - 1) as f64
    }
}

/// Align-corners bilinear resize of every channel to `h x w`.
///
/// Corner cell centers map onto corner cell centers; the geometry, if any,
/// is adjusted so that this holds in world coordinates too.
pub fn bilinear_resize(map: &DenseMap, h: usize, w: usize) -> Result<DenseMap> {
    if h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "resize target must be >= 1x1, got {h}x{w}"
        )));
    }
    let mut data = vec![0.0; h * w * map.c];
    for r in 0..h {
        let v = align_corners_coord(r, map.h, h);
        for col in 0..w {
            let u = align_corners_coord(col, map.w, w);
            let o = (r * w + col) * map.c;
            sample(map, u, v, &mut data[o..o + map.c]);
        }
    }
    let mut out = DenseMap::new(h, w, map.c, data)?;
    if let Some(g) = map.geometry {
        let scale = |axis: usize, src: usize, dst: usize| {
            if src > 1 && dst > 1 {
                g.cell_size[axis] * (src - 1) as f64 / (dst - 1) as f64
            } else {
                g.cell_size[axis] * src as f64 / dst as f64
            }
        };
        let cell_size = [scale(0, map.w, w), scale(1, map.h, h)];
        let first = g.cell_center(0, 0);
        out.geometry = Some(Geometry {
            origin: [first[0] - 0.5 * cell_size[0], first[1] - 0.5 * cell_size[1]],
            cell_size,
        });
    }
    Ok(out)
}

/// Per-box `n x n x C` features.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    /// Row-major `[grid_y][grid_x][channel]`.
    pub data: Vec<f64>,
    /// False when the box lies entirely outside the map; `data` is then zero.
    pub valid: bool,
}

/// Samples per RoI bin along each axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiSampling {
    /// Sample spacing tied to the map resolution.
    #[default]
    Adaptive,
    /// A fixed `s x s` lattice; `Fixed(1)` samples only the bin center.
    Fixed(usize),
}

/// RoI align over each box's axis-aligned BEV rectangle with adaptive
/// per-bin sampling.
pub fn roi_align(map: &DenseMap, boxes: &[Box3D], n: usize) -> Result<Vec<RoiFeature>> {
    roi_align_with(map, boxes, n, RoiSampling::Adaptive)
}

/// RoI align over each box's axis-aligned BEV rectangle.
///
/// The rectangle is split into an `n x n` grid. Each grid bin is the mean of
/// bilinear samples on a regular lattice inside the bin, clamped to the map
/// border.
pub fn roi_align_with(
    map: &DenseMap,
    boxes: &[Box3D],
    n: usize,
    sampling: RoiSampling,
) -> Result<Vec<RoiFeature>> {
    let g = map
        .geometry
        .ok_or_else(|| Error::arg("RoI align needs a map with BEV geometry"))?;
    if boxes.is_empty() {
        return Err(Error::arg("RoI align needs at least one box"));
    }
    if n == 0 || sampling == RoiSampling::Fixed(0) {
        return Err(Error::arg("RoI grid and sampling must be at least 1x1"));
    }
    let extent = [
        g.origin[0],
        g.origin[1],
        g.origin[0] + map.w as f64 * g.cell_size[0],
        g.origin[1] + map.h as f64 * g.cell_size[1],
    ];
    let c = map.c;
    let mut px = vec![0.0; c];
    Ok(boxes
        .iter()
        .map(|b| {
            let [x0, y0, x1, y1] = b.bev_aabb();
            let mut data = vec![0.0; n * n * c];
            let outside = x1 <= extent[0] || x0 >= extent[2] || y1 <= extent[1] || y0 >= extent[3];
            if outside {
                return RoiFeature { data, valid: false };
            }
            let bw = (x1 - x0) / n as f64;
            let bh = (y1 - y0) / n as f64;
            let (sx, sy) = match sampling {
                RoiSampling::Fixed(s) => (s, s),
                RoiSampling::Adaptive => (
                    ((ADAPTIVE_DENSITY * bw / g.cell_size[0]).ceil() as usize).max(1),
                    ((ADAPTIVE_DENSITY * bh / g.cell_size[1]).ceil() as usize).max(1),
                ),
            };
            let norm = 1.0 / (sx * sy) as f64;
            for gy in 0..n {
                for gx in 0..n {
                    let o = (gy * n + gx) * c;
                    let bin = &mut data[o..o + c];
                    for iy in 0..sy {
                        let y = y0 + (gy as f64 + (iy as f64 + 0.5) / sy as f64) * bh;
                        for ix in 0..sx {
                            let x = x0 + (gx as f64 + (ix as f64 + 0.5) / sx as f64) * bw;
                            let (u, v) = g.to_grid(x, y);
                            sample(map, u, v, &mut px);
                            for (acc, p) in bin.iter_mut().zip(&px) {
                                *acc += p;
                            }
                        }
                    }
                    for acc in bin.iter_mut() {
                        *acc *= norm;
                    }
                }
            }
            RoiFeature { data, valid: true }
        })
        .collect())
}

/// 1x1 convolution with folded batch norm and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAlign {
    pub c_in: usize,
    pub c_out: usize,
    /// Row-major `c_in x c_out`.
    pub weight: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelAlign {
    pub fn new(
        c_in: usize,
        c_out: usize,
        weight: Vec<f64>,
        scale: Vec<f64>,
        shift: Vec<f64>,
    ) -> Result<Self> {
        let a = Self {
            c_in,
            c_out,
            weight,
            scale,
            shift,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn identity(c: usize) -> Self {
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            weight[i * c + i] = 1.0;
        }
        Self {
            c_in: c,
            c_out: c,
            weight,
            scale: vec![1.0; c],
            shift: vec![0.0; c],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.c_in * self.c_out {
            return Err(Error::shape(format!(
                "weight needs {}x{} values, got {}",
                self.c_in,
                self.c_out,
                self.weight.len()
            )));
        }
        if self.scale.len() != self.c_out || self.shift.len() != self.c_out {
            return Err(Error::shape(format!(
                "batch-norm scale/shift need {} values, got {}/{}",
                self.c_out,
                self.scale.len(),
                self.shift.len()
            )));
        }
        Ok(())
    }
}

/// `relu(scale * (x . W) + shift)` at every pixel.
pub fn channel_align(map: &DenseMap, align: &ChannelAlign) -> Result<DenseMap> {
    align.validate()?;
    if map.c != align.c_in {
        return Err(Error::shape(format!(
            "map has {} channels, alignment expects {}",
            map.c, align.c_in
        )));
    }
    let co = align.c_out;
    let mut data = Vec::with_capacity(map.h * map.w * co);
    for px in map.data.chunks_exact(map.c) {
        for o in 0..co {
            let mut acc = 0.0;
            for (i, &x) in px.iter().enumerate() {
                acc += x * align.weight[i * co + o];
            }
            data.push((align.scale[o] * acc + align.shift[o]).max(0.0));
        }
    }
    let mut out = DenseMap::new(map.h, map.w, co, data)?;
    out.geometry = map.geometry;
    Ok(out)
}
