//! Reference anchor-based detection loss: IoU-threshold matching, focal
//! classification and smooth-L1 box regression.

use serde::{Deserialize, Serialize};

use super::losses::smooth_l1;
use super::{DenseMap, Geometry, RegressionSet};
use crate::error::{Error, Result};
use crate::eval::bev_iou;
use crate::geometry::{normalize_yaw, Box3D};

/// Per-location anchor shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate {
    pub label: String,
    pub dims: [f64; 3],
    pub yaw: f64,
    pub z_center: f64,
    /// Anchors at or above this IoU with a same-class target are positive.
    pub pos_iou: f64,
    /// Anchors below this IoU with every same-class target are negative.
    pub neg_iou: f64,
}

impl AnchorTemplate {
    fn pair(label: &str, dims: [f64; 3], z: f64, pos: f64, neg: f64) -> [Self; 2] {
        [0.0, std::f64::consts::FRAC_PI_2].map(|yaw| Self {
            label: label.to_string(),
            dims,
            yaw,
            z_center: z,
            pos_iou: pos,
            neg_iou: neg,
        })
    }

    /// Car, pedestrian and cyclist anchors at two orientations.
    pub fn defaults() -> Vec<Self> {
        let mut v = Vec::new();
        v.extend(Self::pair("Car", [3.9, 1.6, 1.56], -1.78, 0.6, 0.45));
        v.extend(Self::pair("Pedestrian", [0.8, 0.6, 1.73], -0.6, 0.5, 0.35));
        v.extend(Self::pair("Cyclist", [1.76, 0.6, 1.73], -0.6, 0.5, 0.35));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    /// Placement of the anchor grid; one anchor set per cell center.
    pub geometry: Geometry,
    pub height: usize,
    pub width: usize,
    pub templates: Vec<AnchorTemplate>,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl MatcherParams {
    pub fn new(
        geometry: Geometry,
        height: usize,
        width: usize,
        templates: Vec<AnchorTemplate>,
    ) -> Self {
        Self {
            geometry,
            height,
            width,
            templates,
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.height * self.width * self.templates.len()
    }
}

/// All anchors, ordered by `(row, col, template)`.
pub fn anchor_boxes(params: &MatcherParams) -> Vec<Box3D> {
    let mut out = Vec::with_capacity(params.num_anchors());
    for r in 0..params.height {
        for c in 0..params.width {
            let [x, y] = params.geometry.cell_center(r, c);
            for t in &params.templates {
                out.push(Box3D {
                    center: [x, y, t.z_center],
                    dims: t.dims,
                    yaw: t.yaw,
                    label: t.label.clone(),
                    score: None,
                });
            }
        }
    }
    out
}

/// Residual box encoding relative to an anchor.
pub fn encode_box(target: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let [la, wa, ha] = anchor.dims;
    let diag = la.hypot(wa);
    [
        (target.center[0] - anchor.center[0]) / diag,
        (target.center[1] - anchor.center[1]) / diag,
        (target.center[2] - anchor.center[2]) / ha,
        (target.dims[0] / la).ln(),
        (target.dims[1] / wa).ln(),
        (target.dims[2] / ha).ln(),
        normalize_yaw(target.yaw - anchor.yaw),
    ]
}

pub fn decode_box(code: &[f64; 7], anchor: &Box3D) -> Box3D {
    let [la, wa, ha] = anchor.dims;
    let diag = la.hypot(wa);
    Box3D {
        center: [
            anchor.center[0] + code[0] * diag,
            anchor.center[1] + code[1] * diag,
            anchor.center[2] + code[2] * ha,
        ],
        dims: [la * code[3].exp(), wa * code[4].exp(), ha * code[5].exp()],
        yaw: normalize_yaw(anchor.yaw + code[6]),
        label: anchor.label.clone(),
        score: None,
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit against a binary target.
pub fn focal_loss(logit: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    if positive {
        alpha * (1.0 - p).powf(gamma) * softplus(-logit)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(logit)
    }
}

/// Derivative of [`focal_loss`] with respect to the logit.
pub fn focal_loss_grad(logit: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    if positive {
        let log_p = -softplus(-logit);
        alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p))
    } else {
        let log_q = -softplus(logit);
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMatch {
    Positive(usize),
    Negative,
    Ignored,
}

fn aabb_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Assign each anchor to a target by BEV IoU with same-class targets.
///
/// Every target's highest-IoU anchor is forced positive, lowest anchor
/// index on ties.
pub fn match_anchors(
    anchors: &[Box3D],
    targets: &[Box3D],
    params: &MatcherParams,
) -> Result<Vec<AnchorMatch>> {
    let per_cell = params.templates.len();
    if per_cell == 0 {
        return Err(Error::arg("matcher has no anchor templates"));
    }
    let target_boxes: Vec<[f64; 4]> = targets.iter().map(Box3D::bev_aabb).collect();
    let mut best_for_target: Vec<Option<(f64, usize)>> = vec![None; targets.len()];
    let mut out = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let t = &params.templates[ai % per_cell];
        let abox = a.bev_aabb();
        let mut best: Option<(f64, usize)> = None;
        for (ti, tb) in targets.iter().enumerate() {
            if tb.label != a.label || !aabb_overlap(&abox, &target_boxes[ti]) {
                continue;
            }
            let iou = bev_iou(a, tb);
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, ti));
            }
            if iou > 0.0 && best_for_target[ti].is_none_or(|(b, _)| iou > b) {
                best_for_target[ti] = Some((iou, ai));
            }
        }
        out.push(match best {
            Some((iou, ti)) if iou >= t.pos_iou => AnchorMatch::Positive(ti),
            Some((iou, _)) if iou >= t.neg_iou => AnchorMatch::Ignored,
            _ => AnchorMatch::Negative,
        });
    }
    for (ti, b) in best_for_target.iter().enumerate() {
        if let Some((_, ai)) = b {
            out[*ai] = AnchorMatch::Positive(ti);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub l_cls: f64,
    pub l_reg: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Focal classification over positive and negative anchors and smooth-L1
/// regression over positives, both mean-reduced.
///
/// `pred_cls` holds one logit per anchor template at each location;
/// `pred_reg` has one 7-vector per anchor in [`anchor_boxes`] order.
pub fn detection_loss(
    pred_cls: &DenseMap,
    pred_reg: &RegressionSet,
    targets: &[Box3D],
    params: &MatcherParams,
) -> Result<DetectionLoss> {
    let n = params.num_anchors();
    if n == 0 {
        return Err(Error::arg("anchor grid is empty"));
    }
    if pred_cls.height() != params.height
        || pred_cls.width() != params.width
        || pred_cls.channels() != params.templates.len()
    {
        return Err(Error::shape(format!(
            "classification map is {}x{}x{}, anchor grid is {}x{}x{}",
            pred_cls.height(),
            pred_cls.width(),
            pred_cls.channels(),
            params.height,
            params.width,
            params.templates.len()
        )));
    }
    if pred_reg.rows() != n || pred_reg.dim() != 7 {
        return Err(Error::shape(format!(
            "regression set is {}x{}, expected {n}x7",
            pred_reg.rows(),
            pred_reg.dim()
        )));
    }
    let anchors = anchor_boxes(params);
    let matches = match_anchors(&anchors, targets, params)?;
    let logits = pred_cls.data();
    let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
    let (mut pos, mut neg) = (0usize, 0usize);
    for (i, m) in matches.iter().enumerate() {
        match *m {
            AnchorMatch::Positive(ti) => {
                pos += 1;
                cls_sum += focal_loss(logits[i], true, params.alpha, params.gamma);
                let code = encode_box(&targets[ti], &anchors[i]);
                reg_sum += pred_reg
                    .row(i)
                    .iter()
                    .zip(&code)
                    .map(|(p, t)| smooth_l1(p - t, params.beta))
                    .sum::<f64>();
            }
            AnchorMatch::Negative => {
                neg += 1;
                cls_sum += focal_loss(logits[i], false, params.alpha, params.gamma);
            }
            AnchorMatch::Ignored => {}
        }
    }
    let l_cls = if pos + neg == 0 {
        0.0
    } else {
        cls_sum / (pos + neg) as f64
    };
    let l_reg = if pos == 0 {
        0.0
    } else {
        reg_sum / (7 * pos) as f64
    };
    Ok(DetectionLoss {
        l_cls,
        l_reg,
        positives: pos,
        negatives: neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn one_cell(template: AnchorTemplate) -> MatcherParams {
        MatcherParams::new(
            Geometry {
                origin: [0.0, 0.0],
                cell_size: [2.0, 2.0],
            },
            1,
            1,
            vec![template],
        )
    }

    fn car_template() -> AnchorTemplate {
        AnchorTemplate::defaults().remove(0)
    }

    #[test]
    fn focal_scalar_formula() {
        // p = sigmoid(0.5)
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        let pos = -0.25 * (1.0 - p).powi(2) * p.ln();
        let neg = -0.75 * p.powi(2) * (1.0 - p).ln();
        assert!((focal_loss(0.5, true, 0.25, 2.0) - pos).abs() < 1e-12);
        assert!((focal_loss(0.5, false, 0.25, 2.0) - neg).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_matches_central_difference() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-6.0..6.0);
            for positive in [true, false] {
                let h = 1e-5;
                let fd = (focal_loss(x + h, positive, 0.25, 2.0)
                    - focal_loss(x - h, positive, 0.25, 2.0))
                    / (2.0 * h);
                let g = focal_loss_grad(x, positive, 0.25, 2.0);
                assert!(
                    (fd - g).abs() <= 1e-4 * g.abs().max(1e-6),
                    "x={x} pos={positive}: {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = Box3D::new([1.0, 2.0, -1.0], [3.9, 1.6, 1.56], 0.0, "Car", None).unwrap();
        let t = Box3D::new([1.7, 1.2, -0.8], [4.2, 1.7, 1.5], 0.4, "Car", None).unwrap();
        let d = decode_box(&encode_box(&t, &a), &a);
        for k in 0..3 {
            assert!((d.center[k] - t.center[k]).abs() < 1e-12);
            assert!((d.dims[k] - t.dims[k]).abs() < 1e-12);
        }
        assert!((d.yaw - t.yaw).abs() < 1e-12);
    }

    #[test]
    fn single_anchor_single_target() {
        let params = one_cell(car_template());
        let anchor = &anchor_boxes(&params)[0];
        let target = Box3D::new([1.2, 0.9, -1.7], [4.0, 1.6, 1.5], 0.1, "Car", None).unwrap();
        let cls = DenseMap::new(1, 1, 1, vec![1.5]).unwrap();
        let reg = RegressionSet::new(1, 7, vec![0.0; 7]).unwrap();
        let out = detection_loss(&cls, &reg, std::slice::from_ref(&target), &params).unwrap();
        assert_eq!((out.positives, out.negatives), (1, 0));
        let p = 1.0 / (1.0 + (-1.5f64).exp());
        let expected = -0.25 * (1.0 - p).powi(2) * p.ln();
        assert!((out.l_cls - expected).abs() < 1e-12);
        let code = encode_box(&target, anchor);
        let reg_expected: f64 = code.iter().map(|&c| smooth_l1(-c, 1.0)).sum::<f64>() / 7.0;
        assert!((out.l_reg - reg_expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_regression_is_zero() {
        let params = one_cell(car_template());
        let anchor = &anchor_boxes(&params)[0];
        let target = Box3D::new([1.2, 0.9, -1.7], [4.0, 1.6, 1.5], 0.1, "Car", None).unwrap();
        let code = encode_box(&target, anchor);
        let cls = DenseMap::new(1, 1, 1, vec![0.0]).unwrap();
        let reg = RegressionSet::new(1, 7, code.to_vec()).unwrap();
        let out = detection_loss(&cls, &reg, &[target], &params).unwrap();
        assert_eq!(out.l_reg, 0.0);
    }

    #[test]
    fn no_targets_is_pure_negative() {
        let mut params = one_cell(car_template());
        params.height = 2;
        params.width = 3;
        let logits: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
        let cls = DenseMap::new(2, 3, 1, logits.clone()).unwrap();
        let reg = RegressionSet::new(6, 7, vec![0.3; 42]).unwrap();
        let out = detection_loss(&cls, &reg, &[], &params).unwrap();
        assert_eq!(out.l_reg, 0.0);
        let expected: f64 = logits
            .iter()
            .map(|&x| focal_loss(x, false, 0.25, 2.0))
            .sum::<f64>()
            / 6.0;
        assert!((out.l_cls - expected).abs() < 1e-12);
    }

    #[test]
    fn other_classes_do_not_match() {
        let params = one_cell(car_template());
        let ped = Box3D::new([1.0, 1.0, -0.6], [0.8, 0.6, 1.7], 0.0, "Pedestrian", None).unwrap();
        let cls = DenseMap::new(1, 1, 1, vec![0.0]).unwrap();
        let reg = RegressionSet::new(1, 7, vec![0.0; 7]).unwrap();
        let out = detection_loss(&cls, &reg, &[ped], &params).unwrap();
        assert_eq!((out.positives, out.negatives), (0, 1));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let mut params = one_cell(car_template());
        params.templates.clear();
        let cls = DenseMap::new(1, 1, 1, vec![0.0]).unwrap();
        let reg = RegressionSet::new(0, 7, vec![]).unwrap();
        assert!(detection_loss(&cls, &reg, &[], &params).is_err());
    }

    #[test]
    fn best_anchor_is_forced_positive() {
        // small target overlapping the anchor far below the positive threshold
        let params = one_cell(car_template());
        let anchors = anchor_boxes(&params);
        let t = Box3D::new([1.0, 1.0, -1.7], [1.0, 0.5, 1.5], 0.0, "Car", None).unwrap();
        let m = match_anchors(&anchors, &[t], &params).unwrap();
        assert_eq!(m, vec![AnchorMatch::Positive(0)]);
    }
}
