use serde::{Deserialize, Serialize};

use super::kernels::{bilinear_resize, channel_align, roi_align_with, ChannelAlign, RoiSampling};
use super::{DenseMap, RegressionSet};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, sum: f64, count: usize) -> f64 {
        match self {
            Reduction::Sum => sum,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => sum / count as f64,
        }
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if beta <= 0.0 {
        a
    } else if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if beta > 0.0 && x.abs() < beta {
        x / beta
    } else {
        x.signum() * (x != 0.0) as u8 as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitKdParams {
    pub beta: f64,
    pub reduction: Reduction,
}

impl Default for LogitKdParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitKd {
    pub l_cls: f64,
    pub l_reg: f64,
}

fn check_unit_interval(map: &DenseMap, what: &str) -> Result<()> {
    if map.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::arg(format!("{what} scores must lie in [0, 1]")));
    }
    Ok(())
}

/// Channel-wise L2 norm per location, summed.
fn sum_of_pixel_norms(a: &[f64], b: &[f64], c: usize) -> f64 {
    a.chunks_exact(c)
        .zip(b.chunks_exact(c))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Logit distillation.
///
/// The student classification map is resized to the teacher's grid, then
/// the per-location L2 norm of the difference is averaged. Regression rows
/// are compared element-wise with smooth-L1.
pub fn logit_kd_loss(
    student_cls: &DenseMap,
    teacher_cls: &DenseMap,
    student_reg: &RegressionSet,
    teacher_reg: &RegressionSet,
    params: &LogitKdParams,
) -> Result<LogitKd> {
    if student_cls.channels() != teacher_cls.channels() {
        return Err(Error::shape(format!(
            "classification maps differ in channels: {} vs {}",
            student_cls.channels(),
            teacher_cls.channels()
        )));
    }
    if student_reg.rows() != teacher_reg.rows() || student_reg.dim() != teacher_reg.dim() {
        return Err(Error::arg(format!(
            "regression sets differ in shape: {}x{} vs {}x{}",
            student_reg.rows(),
            student_reg.dim(),
            teacher_reg.rows(),
            teacher_reg.dim()
        )));
    }
    check_unit_interval(student_cls, "student")?;
    check_unit_interval(teacher_cls, "teacher")?;

    let resized;
    let s = if student_cls.height() == teacher_cls.height()
        && student_cls.width() == teacher_cls.width()
    {
        student_cls
    } else {
        resized = bilinear_resize(student_cls, teacher_cls.height(), teacher_cls.width())?;
        &resized
    };
    let locations = teacher_cls.height() * teacher_cls.width();
    let cls_sum = sum_of_pixel_norms(s.data(), teacher_cls.data(), teacher_cls.channels());
    let l_cls = params.reduction.apply(cls_sum, locations);

    let reg_sum: f64 = student_reg
        .data()
        .iter()
        .zip(teacher_reg.data())
        .map(|(a, b)| smooth_l1(a - b, params.beta))
        .sum();
    let l_reg = params.reduction.apply(reg_sum, student_reg.data().len());
    Ok(LogitKd { l_cls, l_reg })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureKdParams {
    pub grid: usize,
    pub sampling: RoiSampling,
    pub reduction: Reduction,
}

impl Default for FeatureKdParams {
    fn default() -> Self {
        Self {
            grid: 7,
            sampling: RoiSampling::Adaptive,
            reduction: Reduction::Mean,
        }
    }
}

/// Feature distillation inside ground-truth boxes.
///
/// The student map is resized to the teacher grid (inheriting the teacher's
/// geometry), passed through `align` when given, and both maps are RoI
/// aligned on every box. Boxes fully outside the teacher map contribute
/// nothing.
pub fn feature_kd_loss(
    f_s: &DenseMap,
    f_t: &DenseMap,
    gt: &[Box3D],
    align: Option<&ChannelAlign>,
    params: &FeatureKdParams,
) -> Result<f64> {
    let geometry = f_t
        .geometry()
        .ok_or_else(|| Error::arg("teacher feature map needs BEV geometry"))?;
    if gt.is_empty() {
        log::warn!("feature KD loss with no ground-truth boxes is defined as 0");
        return Ok(0.0);
    }
    let resized = bilinear_resize(f_s, f_t.height(), f_t.width())?.with_geometry(geometry);
    let student = match align {
        Some(a) => channel_align(&resized, a)?,
        None => resized,
    };
    if student.channels() != f_t.channels() {
        return Err(Error::shape(format!(
            "aligned student has {} channels, teacher has {}",
            student.channels(),
            f_t.channels()
        )));
    }
    let rs = roi_align_with(&student, gt, params.grid, params.sampling)?;
    let rt = roi_align_with(f_t, gt, params.grid, params.sampling)?;
    let c = f_t.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in rs.iter().zip(&rt) {
        if !b.valid {
            continue;
        }
        sum += sum_of_pixel_norms(&a.data, &b.data, c);
        count += params.grid * params.grid;
    }
    if count == 0 {
        log::warn!("no ground-truth box overlaps the teacher feature map");
    }
    Ok(params.reduction.apply(sum, count))
}

/// Ground truth followed by teacher detections scoring at least `tau`.
pub fn label_kd_targets(gt: &[Box3D], teacher_preds: &[Box3D], tau: f64) -> Result<Vec<Box3D>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::arg(format!(
            "score threshold must lie in [0, 1], got {tau}"
        )));
    }
    let mut out = gt.to_vec();
    for (i, p) in teacher_preds.iter().enumerate() {
        let s = p
            .score
            .ok_or_else(|| Error::arg(format!("teacher prediction {i} has no score")))?;
        if s >= tau {
            out.push(p.clone());
        }
    }
    Ok(out)
}
