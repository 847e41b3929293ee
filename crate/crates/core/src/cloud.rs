//! Point-cloud container, axis-aligned ranges and frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

/// Name of the channel that marks radar rows (1.0) against lidar rows (0.0)
/// in a mixed cloud.
pub const SOURCE_CHANNEL: &str = "is_radar";

pub const LIDAR_SCHEMA: [&str; 4] = ["x", "y", "z", "intensity"];
pub const RADAR_SCHEMA: [&str; 7] = ["x", "y", "z", "rcs", "v_r", "v_r_comp", "t"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Lidar,
    Radar,
    Mixed,
}

impl Source {
    pub fn default_schema(self) -> Vec<String> {
        match self {
            Source::Lidar => LIDAR_SCHEMA.iter().map(|s| s.to_string()).collect(),
            Source::Radar => RADAR_SCHEMA.iter().map(|s| s.to_string()).collect(),
            Source::Mixed => {
                let mut s: Vec<String> = RADAR_SCHEMA.iter().map(|s| s.to_string()).collect();
                s.push("intensity".into());
                s.push(SOURCE_CHANNEL.into());
                s
            }
        }
    }
}

/// Row-major `N x C` array of `f32` points with a named channel schema.
///
/// Channels 0, 1, 2 are always x, y, z in meters. Values are stored as `f32`
/// so that the binary format round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    data: Vec<f32>,
    schema: Vec<String>,
    source: Source,
}

impl PointCloud {
    pub fn new(data: Vec<f32>, schema: Vec<String>, source: Source) -> Result<Self> {
        let c = schema.len();
        if c < 3 {
            return Err(Error::InvalidCloud(format!(
                "schema needs at least x,y,z, got {c} channels"
            )));
        }
        if !data.len().is_multiple_of(c) {
            return Err(Error::InvalidCloud(format!(
                "{} values is not a multiple of {c} channels",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCloud(format!(
                "non-finite value at row {} channel {}",
                i / c,
                i % c
            )));
        }
        if source == Source::Mixed {
            let Some(k) = schema.iter().position(|s| s == SOURCE_CHANNEL) else {
                return Err(Error::InvalidCloud(format!(
                    "mixed cloud lacks the `{SOURCE_CHANNEL}` channel"
                )));
            };
            if data.chunks_exact(c).any(|r| r[k] != 0.0 && r[k] != 1.0) {
                return Err(Error::InvalidCloud(format!(
                    "`{SOURCE_CHANNEL}` values must be 0 or 1"
                )));
            }
        }
        Ok(Self {
            data,
            schema,
            source,
        })
    }

    /// Cloud with the default schema of `source`.
    pub fn with_default_schema(data: Vec<f32>, source: Source) -> Result<Self> {
        Self::new(data, source.default_schema(), source)
    }

    pub fn empty(schema: Vec<String>, source: Source) -> Self {
        Self {
            data: Vec::new(),
            schema,
            source,
        }
    }

    /// Build from `xyz` triples, zero-filling any extra channels.
    pub fn from_xyz(points: &[[f32; 3]], source: Source) -> Result<Self> {
        let schema = source.default_schema();
        let c = schema.len();
        let mut data = vec![0.0; points.len() * c];
        for (row, p) in data.chunks_exact_mut(c).zip(points) {
            row[..3].copy_from_slice(p);
        }
        Self::new(data, schema, source)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.schema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.schema.len()
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.channels())
    }

    pub fn xyz(&self, i: usize) -> [f32; 3] {
        let r = self.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    /// New cloud holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let c = self.channels();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        PointCloud {
            data,
            schema: self.schema.clone(),
            source: self.source,
        }
    }

    /// Rows for which `keep` returns true, original order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&[f32]) -> bool) -> PointCloud {
        let mut data = Vec::new();
        for r in self.rows() {
            if keep(r) {
                data.extend_from_slice(r);
            }
        }
        PointCloud {
            data,
            schema: self.schema.clone(),
            source: self.source,
        }
    }
}

/// Closed axis-aligned box `[min, max]` per axis, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range3D {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Range3D {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite() && min[a] < max[a]) {
                return Err(Error::arg(format!(
                    "range axis {a}: need finite min < max, got [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Detector crop range: x in [0, 51.2], y in [-25.6, 25.6], z in [-3, 2].
    pub fn detector_default() -> Self {
        Self {
            min: [0.0, -25.6, -3.0],
            max: [51.2, 25.6, 2.0],
        }
    }

    /// Inclusive membership test.
    ///
    /// Bounds are rounded to `f32` first so that a point stored as
    /// `51.2f32` counts as lying on the `51.2` boundary.
    pub fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] as f32 && p[a] <= self.max[a] as f32)
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}

impl Default for Range3D {
    fn default() -> Self {
        Self::detector_default()
    }
}

/// Points inside `range` (inclusive on both ends), original order preserved.
pub fn crop_to_range(cloud: &PointCloud, range: &Range3D) -> PointCloud {
    cloud.filter(|r| range.contains([r[0], r[1], r[2]]))
}

/// One timestamp: lidar cloud, radar cloud and ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub lidar: PointCloud,
    pub radar: PointCloud,
    pub gt: Vec<Box3D>,
}

impl Frame {
    pub fn new(
        id: impl Into<String>,
        lidar: PointCloud,
        radar: PointCloud,
        gt: Vec<Box3D>,
    ) -> Result<Self> {
        if lidar.source() != Source::Lidar {
            return Err(Error::arg("frame lidar cloud must have source=lidar"));
        }
        if radar.source() != Source::Radar {
            return Err(Error::arg("frame radar cloud must have source=radar"));
        }
        if gt.iter().any(|b| b.score.is_some()) {
            return Err(Error::arg("ground-truth boxes must not carry scores"));
        }
        Ok(Self {
            id: id.into(),
            lidar,
            radar,
            gt,
        })
    }
}
