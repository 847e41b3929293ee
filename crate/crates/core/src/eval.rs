//! Rotated-box IoU, greedy matching and range-binned average precision.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_convex, polygon_area, Box3D};
use crate::io::BoxRecord;

/// Area of the overlap of two rotated BEV rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        return 0.0;
    }
    polygon_area(&poly)
        .abs()
        .min(a.bev_area())
        .min(b.bev_area())
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    R11,
    #[default]
    R40,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl RangeBin {
    pub fn new(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            min,
            max,
        }
    }

    pub fn contains(&self, d: f64) -> bool {
        self.min <= d && d < self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: BTreeMap<String, f64>,
    pub interpolation: Interpolation,
    pub bins: Vec<RangeBin>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [("Car", 0.5), ("Pedestrian", 0.25), ("Cyclist", 0.25)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            interpolation: Interpolation::R40,
            bins: vec![
                RangeBin::new("SR", 0.0, 30.0),
                RangeBin::new("MR", 30.0, 50.0),
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (class, &t) in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::arg(format!(
                    "IoU threshold for {class} must lie in (0, 1], got {t}"
                )));
            }
        }
        for b in &self.bins {
            if !(b.min >= 0.0 && b.min < b.max) {
                return Err(Error::arg(format!(
                    "range bin {} is empty or negative: [{}, {})",
                    b.name, b.min, b.max
                )));
            }
        }
        for w in self.bins.windows(2) {
            if w[1].min < w[0].max {
                return Err(Error::arg(format!(
                    "range bins {} and {} overlap or are out of order",
                    w[0].name, w[1].name
                )));
            }
        }
        Ok(())
    }

    fn bin_of(&self, d: f64) -> Option<usize> {
        self.bins.iter().position(|b| b.contains(d))
    }
}

/// Matching outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetMatch {
    /// Index into the frame's detection list.
    pub det: usize,
    pub score: f64,
    /// Index of the matched ground-truth box, if any.
    pub gt: Option<usize>,
}

/// Greedy matching of one frame's detections to its ground truth.
///
/// Per class, detections are taken in descending score order (input order
/// on ties) and each claims the unclaimed same-class ground-truth box with
/// the highest IoU at or above the class threshold, lowest index on ties.
/// Classes without a threshold are skipped.
pub fn match_detections(
    dets: &[Box3D],
    gts: &[Box3D],
    config: &EvalConfig,
) -> Result<Vec<DetMatch>> {
    let mut out = Vec::new();
    for (class, &thr) in &config.iou_thresholds {
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| &dets[i].label == class)
            .collect();
        for &i in &order {
            det_score(&dets[i], i)?;
        }
        order.sort_by(|&a, &b| {
            let sa = dets[a].score.unwrap_or(0.0);
            let sb = dets[b].score.unwrap_or(0.0);
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let candidates: Vec<usize> = (0..gts.len()).filter(|&j| &gts[j].label == class).collect();
        let mut taken = vec![false; gts.len()];
        for i in order {
            let mut best: Option<(f64, usize)> = None;
            for &j in &candidates {
                if taken[j] {
                    continue;
                }
                let iou = iou3d(&dets[i], &gts[j]);
                if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            if let Some((_, j)) = best {
                taken[j] = true;
            }
            out.push(DetMatch {
                det: i,
                score: dets[i].score.unwrap_or(0.0),
                gt: best.map(|(_, j)| j),
            });
        }
    }
    Ok(out)
}

fn det_score(b: &Box3D, i: usize) -> Result<f64> {
    b.score
        .ok_or_else(|| Error::arg(format!("detection {i} ({}) has no score", b.label)))
}

/// Average precision from score-ordered hit flags.
///
/// `hits` must already be sorted by descending score. Returns `None` when
/// `n_gt` is zero.
pub fn average_precision(hits: &[bool], n_gt: usize, mode: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut t = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        t += h as usize;
        tp.push(t);
        precision.push(t as f64 / (i + 1) as f64);
    }
    // envelope: best precision at or after each position
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    // first position reaching recall num/den, compared exactly
    let first_at = |num: usize, den: usize| tp.iter().position(|&t| t * den >= num * n_gt);
    let sampled = |points: usize, den: usize, start: usize| {
        let total: f64 = (start..start + points)
            .map(|k| first_at(k, den).map_or(0.0, |i| envelope[i]))
            .sum();
        total / points as f64
    };
    let ap = match mode {
        Interpolation::R40 => sampled(40, 40, 1),
        Interpolation::R11 => sampled(11, 10, 0),
        Interpolation::All => {
            let total: f64 = hits
                .iter()
                .enumerate()
                .filter(|(_, &h)| h)
                .map(|(i, _)| envelope[i])
                .sum();
            total / n_gt as f64
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    /// Absent when the class has no ground truth in this bin.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub classes: BTreeMap<String, ClassResult>,
    /// Mean AP over classes with ground truth in this bin.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub interpolation: Interpolation,
    pub bins: Vec<BinReport>,
    /// Scores over all ranges, without binning.
    pub overall: BinReport,
}

/// Detections or ground truth grouped by frame id.
pub type FrameBoxes = BTreeMap<String, Vec<Box3D>>;

/// Group flat box records by frame id, keeping file order within a frame.
pub fn group_by_frame(records: &[BoxRecord]) -> Result<FrameBoxes> {
    let mut out = FrameBoxes::new();
    for r in records {
        out.entry(r.id.clone()).or_default().push(r.to_box()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Entry<'a> {
    score: f64,
    frame: &'a str,
    det: usize,
    tp: bool,
}

#[derive(Default)]
struct Tally<'a> {
    entries: Vec<Entry<'a>>,
    n_gt: usize,
}

fn finish(
    name: &str,
    min: f64,
    max: f64,
    mut tallies: BTreeMap<String, Tally<'_>>,
    mode: Interpolation,
) -> BinReport {
    let mut classes = BTreeMap::new();
    for (class, t) in tallies.iter_mut() {
        t.entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.frame.cmp(b.frame))
                .then(a.det.cmp(&b.det))
        });
        let hits: Vec<bool> = t.entries.iter().map(|e| e.tp).collect();
        let tp = hits.iter().filter(|&&h| h).count();
        classes.insert(
            class.clone(),
            ClassResult {
                ap: average_precision(&hits, t.n_gt, mode),
                n_gt: t.n_gt,
                tp,
                fp: hits.len() - tp,
                fn_: t.n_gt - tp,
            },
        );
    }
    let aps: Vec<f64> = classes.values().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    };
    BinReport {
        name: name.to_string(),
        min,
        max,
        classes,
        map,
    }
}

/// Score detections against ground truth, per range bin and overall.
///
/// Matching is done once per frame over all ranges. Ground truth is binned
/// by BEV distance of its center; a matched detection follows its ground
/// truth, an unmatched one is binned by its own center.
pub fn evaluate(dets: &FrameBoxes, gts: &FrameBoxes, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let empty = Vec::new();
    let frames: Vec<&String> = dets
        .keys()
        .chain(gts.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let matched: Vec<(&str, Vec<DetMatch>)> = frames
        .par_iter()
        .map(|f| {
            let d = dets.get(*f).unwrap_or(&empty);
            let g = gts.get(*f).unwrap_or(&empty);
            match_detections(d, g, config).map(|m| (f.as_str(), m))
        })
        .collect::<Result<_>>()?;

    let classes: Vec<&String> = config.iou_thresholds.keys().collect();
    let fresh = || -> BTreeMap<String, Tally<'_>> {
        classes
            .iter()
            .map(|c| ((*c).clone(), Tally::default()))
            .collect()
    };
    let mut per_bin: Vec<BTreeMap<String, Tally<'_>>> =
        config.bins.iter().map(|_| fresh()).collect();
    let mut overall = fresh();

    for (frame, matches) in &matched {
        let d = dets.get(*frame).unwrap_or(&empty);
        let g = gts.get(*frame).unwrap_or(&empty);
        for gt in g {
            if let Some(t) = overall.get_mut(&gt.label) {
                t.n_gt += 1;
                if let Some(b) = config.bin_of(gt.bev_distance()) {
                    per_bin[b].get_mut(&gt.label).expect("class present").n_gt += 1;
                }
            }
        }
        for m in matches {
            let det = &d[m.det];
            let entry = Entry {
                score: m.score,
                frame,
                det: m.det,
                tp: m.gt.is_some(),
            };
            overall
                .get_mut(&det.label)
                .expect("matched classes are configured")
                .entries
                .push(entry);
            let dist = match m.gt {
                Some(j) => g[j].bev_distance(),
                None => det.bev_distance(),
            };
            if let Some(b) = config.bin_of(dist) {
                per_bin[b]
                    .get_mut(&det.label)
                    .expect("class present")
                    .entries
                    .push(entry);
            }
        }
    }

    let mode = config.interpolation;
    let bins = config
        .bins
        .iter()
        .zip(per_bin)
        .map(|(b, t)| finish(&b.name, b.min, b.max, t, mode))
        .collect();
    Ok(EvalReport {
        interpolation: mode,
        bins,
        overall: finish("all", 0.0, f64::INFINITY, overall, mode),
    })
}
