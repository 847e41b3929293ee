//! Knowledge-distillation loss kernels on exported tensors.
//!
//! The joint objective is
//!
//! ```text
//! joint = w_lreg * L_lreg + w_lcls * L_lcls + w_feat * L_feat + w_reg * L_reg + w_cls * L_cls
//! ```
//!
//! where the logit terms compare student and teacher predictions, the
//! feature term compares RoI-aligned BEV features and the label terms are
//! the detector loss against ground truth extended with confident teacher
//! detections.

mod detection;
mod kernels;
mod losses;

use serde::{Deserialize, Serialize};

pub use detection::{
    anchor_boxes, decode_box, detection_loss, encode_box, focal_loss, focal_loss_grad,
    match_anchors, AnchorMatch, AnchorTemplate, DetectionLoss, MatcherParams,
};
pub use kernels::{
    bilinear_resize, channel_align, roi_align, roi_align_with, ChannelAlign, RoiFeature,
    RoiSampling,
};
pub use losses::{
    feature_kd_loss, label_kd_targets, logit_kd_loss, smooth_l1, smooth_l1_grad, FeatureKdParams,
    LogitKd, LogitKdParams, Reduction, DEFAULT_SCORE_THRESHOLD,
};

use crate::error::{Error, Result};

/// BEV placement of a dense map. Column index runs along +x, row index along
/// +y; `origin` is the `(x, y)` corner of cell `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
}

impl Geometry {
    /// Continuous `(col, row)` coordinates with cell centers at integers.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0]) / self.cell_size[0] - 0.5,
            (y - self.origin[1]) / self.cell_size[1] - 0.5,
        )
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size[0],
            self.origin[1] + (row as f64 + 0.5) * self.cell_size[1],
        ]
    }
}

/// `H x W x C` array of finite reals, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
    geometry: Option<Geometry>,
}

impl DenseMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "map dims must be >= 1, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "{h}x{w}x{c} map needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("map entries must be finite"));
        }
        Ok(Self {
            h,
            w,
            c,
            data,
            geometry: None,
        })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for col in 0..w {
                for k in 0..c {
                    data.push(f(r, col, k));
                }
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn with_geometry(mut self, g: Geometry) -> Self {
        self.geometry = Some(g);
        self
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, col: usize, k: usize) -> f64 {
        self.data[(r * self.w + col) * self.c + k]
    }

    /// All channels at one location.
    pub fn pixel(&self, r: usize, col: usize) -> &[f64] {
        let o = (r * self.w + col) * self.c;
        &self.data[o..o + self.c]
    }
}

/// Paired box-regression rows: `rows x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl RegressionSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{rows}x{dim} regression set needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("regression entries must be finite"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub feat: f64,
    #[serde(rename = "l-reg")]
    pub logit_reg: f64,
    #[serde(rename = "l-cls")]
    pub logit_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            cls: 1.0,
            feat: 0.1,
            logit_reg: 0.3,
            logit_cls: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.reg,
            self.cls,
            self.feat,
            self.logit_reg,
            self.logit_cls,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_feat: f64,
    #[serde(rename = "l_l-reg")]
    pub l_logit_reg: f64,
    #[serde(rename = "l_l-cls")]
    pub l_logit_cls: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub components: LossComponents,
    pub joint: f64,
}

/// Weighted sum of the five components, accumulated in a fixed order
/// (logit, feature, label).
pub fn joint_loss(components: LossComponents, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let LossComponents {
        l_reg,
        l_cls,
        l_feat,
        l_logit_reg,
        l_logit_cls,
    } = components;
    if [l_reg, l_cls, l_feat, l_logit_reg, l_logit_cls]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::arg("loss components must be finite"));
    }
    let joint = weights.logit_reg * l_logit_reg
        + weights.logit_cls * l_logit_cls
        + weights.feat * l_feat
        + weights.reg * l_reg
        + weights.cls * l_cls;
    Ok(LossReport { components, joint })
}
