//! On-disk formats.
//!
//! * Point clouds: headerless little-endian `f32`, row-major `N x C`
//!   (KITTI `.bin` compatible for `C = 4`). An optional sidecar at
//!   `<file>.json` records the channel schema and source.
//! * Box lists: JSON array of `{id, class, center, dims, yaw, score?}` where
//!   `id` names the frame a box belongs to.
//! * Tensors: headerless little-endian `f32` with a `<file>.json` sidecar
//!   listing named entries (role, shape, offset, optional BEV geometry).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Source};
use crate::distill::{DenseMap, Geometry, RegressionSet};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudMeta {
    pub schema: Vec<String>,
    pub source: Source,
}

/// Decode a headerless cloud buffer.
pub fn decode_cloud(bytes: &[u8], schema: Vec<String>, source: Source) -> Result<PointCloud> {
    let values = bytes_to_f32s(bytes)
        .ok_or_else(|| Error::InvalidCloud("byte length is not a multiple of 4".into()))?;
    PointCloud::new(values, schema, source)
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    f32s_to_bytes(cloud.data())
}

/// Read a cloud. The sidecar wins when present; otherwise `fallback`
/// supplies the schema (e.g. from a `--channels` flag).
pub fn read_cloud(path: &Path, fallback: Option<&CloudMeta>) -> Result<PointCloud> {
    let side = sidecar_path(path);
    let meta = if side.exists() {
        serde_json::from_slice::<CloudMeta>(&read(&side)?)
            .map_err(|e| Error::format(&side, e.to_string()))?
    } else if let Some(m) = fallback {
        m.clone()
    } else {
        return Err(Error::format(
            path,
            "no sidecar metadata and no channel count given",
        ));
    };
    let bytes = read(path)?;
    decode_cloud(&bytes, meta.schema, meta.source).map_err(|e| Error::format(path, e.to_string()))
}

/// Write the binary payload and its sidecar.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write(path, &encode_cloud(cloud))?;
    let meta = CloudMeta {
        schema: cloud.schema().to_vec(),
        source: cloud.source(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write(&sidecar_path(path), &json)
}

/// One entry of a box list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: String,
    pub class: String,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn from_box(frame_id: &str, b: &Box3D) -> Self {
        Self {
            id: frame_id.to_string(),
            class: b.label.clone(),
            center: b.center,
            dims: b.dims,
            yaw: b.yaw,
            score: b.score,
        }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(
            self.center,
            self.dims,
            self.yaw,
            self.class.clone(),
            self.score,
        )
    }
}

pub fn parse_boxes(json: &[u8]) -> Result<Vec<BoxRecord>> {
    serde_json::from_slice(json).map_err(|e| Error::format("<boxes>", e.to_string()))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let recs: Vec<BoxRecord> =
        serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    for r in &recs {
        r.to_box().map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(recs)
}

pub fn write_boxes(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let json = serde_json::to_vec_pretty(records).expect("boxes serialize");
    write(path, &json)
}

/// CSV export: `id,class,x,y,z,l,w,h,yaw,score` (score empty for ground truth).
pub fn boxes_to_csv(records: &[BoxRecord]) -> String {
    let mut out = String::from("id,class,x,y,z,l,w,h,yaw,score\n");
    for r in records {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.class,
            r.center[0],
            r.center[1],
            r.center[2],
            r.dims[0],
            r.dims[1],
            r.dims[2],
            r.yaw,
            score
        ));
    }
    out
}

pub fn write_boxes_csv(path: &Path, records: &[BoxRecord]) -> Result<()> {
    write(path, boxes_to_csv(records).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// Post-sigmoid class map `H x W x K`.
    Cls,
    /// Box regression rows `N x D`.
    Reg,
    /// Intermediate BEV feature map `H x W x C`.
    Feat,
    /// Per-anchor logits `H x W x A`.
    AnchorCls,
    /// Per-anchor regression rows `(H*W*A) x 7`.
    AnchorReg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub tensors: Vec<TensorEntry>,
}

/// A set of named tensors loaded from one payload.
#[derive(Debug, Clone, Default)]
pub struct TensorBundle {
    pub maps: Vec<(TensorRole, DenseMap)>,
    pub rows: Vec<(TensorRole, RegressionSet)>,
}

impl TensorBundle {
    pub fn map(&self, role: TensorRole) -> Option<&DenseMap> {
        self.maps.iter().find(|(r, _)| *r == role).map(|(_, m)| m)
    }

    pub fn regression(&self, role: TensorRole) -> Option<&RegressionSet> {
        self.rows.iter().find(|(r, _)| *r == role).map(|(_, m)| m)
    }
}

pub fn read_tensors(path: &Path) -> Result<TensorBundle> {
    let side = sidecar_path(path);
    let index: TensorIndex =
        serde_json::from_slice(&read(&side)?).map_err(|e| Error::format(&side, e.to_string()))?;
    let values = bytes_to_f32s(&read(path)?)
        .ok_or_else(|| Error::format(path, "byte length is not a multiple of 4"))?;
    let mut bundle = TensorBundle::default();
    for t in index.tensors {
        let n: usize = t.shape.iter().product();
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| Error::format(path, format!("{:?} tensor exceeds payload", t.role)))?;
        let data: Vec<f64> = slice.iter().map(|&v| f64::from(v)).collect();
        match (t.role, t.shape.as_slice()) {
            (TensorRole::Reg | TensorRole::AnchorReg, &[rows, dim]) => {
                bundle
                    .rows
                    .push((t.role, RegressionSet::new(rows, dim, data)?));
            }
            (TensorRole::Cls | TensorRole::Feat | TensorRole::AnchorCls, &[h, w, c]) => {
                let mut m = DenseMap::new(h, w, c, data)?;
                if let Some(g) = t.geometry {
                    m = m.with_geometry(g);
                }
                bundle.maps.push((t.role, m));
            }
            (role, shape) => {
                return Err(Error::format(
                    path,
                    format!("{role:?} tensor has unsupported shape {shape:?}"),
                ))
            }
        }
    }
    Ok(bundle)
}

pub fn write_tensors(path: &Path, bundle: &TensorBundle) -> Result<()> {
    let mut payload: Vec<f32> = Vec::new();
    let mut index = TensorIndex { tensors: vec![] };
    for (role, m) in &bundle.maps {
        index.tensors.push(TensorEntry {
            role: *role,
            shape: vec![m.height(), m.width(), m.channels()],
            offset: payload.len(),
            geometry: m.geometry(),
        });
        payload.extend(m.data().iter().map(|&v| v as f32));
    }
    for (role, r) in &bundle.rows {
        index.tensors.push(TensorEntry {
            role: *role,
            shape: vec![r.rows(), r.dim()],
            offset: payload.len(),
            geometry: None,
        });
        payload.extend(r.data().iter().map(|&v| v as f32));
    }
    write(path, &f32s_to_bytes(&payload))?;
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write(&sidecar_path(path), &json)
}

/// Write any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value).expect("value serializes");
    json.write_all(b"\n").expect("vec write");
    write(path, &json)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}
