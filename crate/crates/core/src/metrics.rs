//! Evaluation: global mIoU, part- and region-level AP, PCP and box AP.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou, BBox};
use crate::raster::LabelRaster;
use crate::refine::compute_map_miou;
use crate::synth::GroundTruthInstance;

/// IoU thresholds 0.1, 0.2, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// One predicted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub bbox: BBox,
    /// Ranking score (fused when mask-quality scoring is on).
    pub score: f64,
    pub det_score: f64,
    pub miou_score: Option<f64>,
    /// Full-image part labels of this instance.
    pub parsing: LabelRaster,
}

/// Predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Sorted by descending score.
    pub instances: Vec<InstanceRecord>,
    pub global: LabelRaster,
}

/// Dataset-level IoU per class (background included) and their mean over
/// classes with a nonzero union.
pub fn miou_global(preds: &[&LabelRaster], gts: &[&LabelRaster], num_classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, g) in preds.iter().zip(gts) {
        assert_eq!((p.width(), p.height()), (g.width(), g.height()), "prediction and ground truth sizes differ");
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let per: Vec<Option<f64>> =
        (0..num_classes).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { f64::NAN } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mean, per)
}

/// Mean IoU over the part classes present in either instance.
pub fn instance_part_miou(pred: &LabelRaster, gt: &LabelRaster) -> f64 {
    compute_map_miou(pred, gt)
}

/// Class-agnostic foreground IoU of two instance rasters.
pub fn region_iou(pred: &LabelRaster, gt: &LabelRaster) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class IoU between two instance rasters for every class present in
/// `gt`.
pub fn part_ious(pred: &LabelRaster, gt: &LabelRaster) -> Vec<(u8, f64)> {
    gt.present_labels()
        .into_iter()
        .map(|c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in pred.data().iter().zip(gt.data()) {
                inter += (a == c && b == c) as usize;
                union += (a == c || b == c) as usize;
            }
            (c, inter as f64 / union as f64)
        })
        .collect()
}

/// Scored predictions of one image with their overlap to every GT of that
/// image.
#[derive(Debug, Clone, Default)]
pub struct ImageMatches {
    pub scores: Vec<f64>,
    /// `overlaps[p][g]`.
    pub overlaps: Vec<Vec<f64>>,
    pub num_gt: usize,
}

/// Outcome of the greedy matching: per image, the prediction matched to
/// each GT, and the ranked true/false-positive sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub gt_to_pred: Vec<Vec<Option<usize>>>,
    pub ranked_tp: Vec<bool>,
    pub num_gt: usize,
}

/// Greedy one-to-one matching in descending score order across the
/// dataset (ties broken by image then prediction index). Each prediction
/// takes the unmatched GT of its image with the highest overlap, if that
/// overlap reaches `threshold`.
pub fn greedy_match(images: &[ImageMatches], threshold: f64) -> Matching {
    let mut order: Vec<(usize, usize)> =
        images.iter().enumerate().flat_map(|(i, im)| (0..im.scores.len()).map(move |p| (i, p))).collect();
    order.sort_by(|&(ia, pa), &(ib, pb)| {
        images[ib].scores[pb].total_cmp(&images[ia].scores[pa]).then(ia.cmp(&ib)).then(pa.cmp(&pb))
    });
    let mut gt_to_pred: Vec<Vec<Option<usize>>> = images.iter().map(|im| vec![None; im.num_gt]).collect();
    let mut ranked_tp = Vec::with_capacity(order.len());
    for (i, p) in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &ov) in images[i].overlaps[p].iter().enumerate() {
            if gt_to_pred[i][g].is_none() && ov >= threshold && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            gt_to_pred[i][g] = Some(p);
        }
        ranked_tp.push(best.is_some());
    }
    Matching { gt_to_pred, ranked_tp, num_gt: images.iter().map(|im| im.num_gt).sum() }
}

/// All-points interpolated area under the precision-recall curve of a
/// ranked TP/FP sequence; NaN when there is no ground truth.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for pt in points.iter_mut().rev() {
        envelope = envelope.max(pt.1);
        pt.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn warn_if_empty(num_gt: usize, name: &str) {
    if num_gt == 0 {
        log::warn!("{name}: no ground-truth instances, reporting NaN");
    }
}

fn build_matches(
    preds: &[PredictionSet],
    gts: &[&[GroundTruthInstance]],
    overlap: impl Fn(&InstanceRecord, &GroundTruthInstance) -> f64,
    score: impl Fn(&InstanceRecord) -> f64,
) -> Vec<ImageMatches> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| ImageMatches {
            scores: p.instances.iter().map(&score).collect(),
            overlaps: p.instances.iter().map(|pi| g.iter().map(|gi| overlap(pi, gi)).collect()).collect(),
            num_gt: g.len(),
        })
        .collect()
}

fn ap_sweep(images: &[ImageMatches], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            let m = greedy_match(images, t);
            average_precision(&m.ranked_tp, m.num_gt)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Part-level AP at every threshold: returns (AP at 0.5, mean over
/// `thresholds`, per-threshold values).
pub fn ap_p(preds: &[PredictionSet], gts: &[&[GroundTruthInstance]], thresholds: &[f64]) -> (f64, f64, Vec<f64>) {
    let images = build_matches(preds, gts, |p, g| instance_part_miou(&p.parsing, &g.parsing), |p| p.score);
    warn_if_empty(images.iter().map(|i| i.num_gt).sum(), "AP^p");
    let per = ap_sweep(&images, thresholds);
    let m = greedy_match(&images, 0.5);
    (average_precision(&m.ranked_tp, m.num_gt), mean(&per), per)
}

/// Percentage of correctly parsed parts (IoU > 0.5) per GT instance under
/// the part-level matching at 0.5; unmatched instances score 0.
pub fn pcp_50(preds: &[PredictionSet], gts: &[&[GroundTruthInstance]]) -> f64 {
    let images = build_matches(preds, gts, |p, g| instance_part_miou(&p.parsing, &g.parsing), |p| p.score);
    let m = greedy_match(&images, 0.5);
    let mut per_instance = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        for (gi, gt) in g.iter().enumerate() {
            let v = match m.gt_to_pred[i][gi] {
                Some(p) => {
                    let ious = part_ious(&preds[i].instances[p].parsing, &gt.parsing);
                    if ious.is_empty() {
                        0.0
                    } else {
                        ious.iter().filter(|(_, v)| *v > 0.5).count() as f64 / ious.len() as f64
                    }
                }
                None => 0.0,
            };
            per_instance.push(v);
        }
    }
    warn_if_empty(per_instance.len(), "PCP_50");
    if per_instance.is_empty() {
        f64::NAN
    } else {
        mean(&per_instance)
    }
}

/// Region-level AP averaged over `thresholds`.
pub fn ap_r(preds: &[PredictionSet], gts: &[&[GroundTruthInstance]], thresholds: &[f64]) -> f64 {
    let images = build_matches(preds, gts, |p, g| region_iou(&p.parsing, &g.parsing), |p| p.score);
    warn_if_empty(images.iter().map(|i| i.num_gt).sum(), "AP^r");
    mean(&ap_sweep(&images, thresholds))
}

/// Single-class box AP at IoU 0.5, ranked by detection score.
pub fn map_bbox(preds: &[PredictionSet], gts: &[&[GroundTruthInstance]]) -> f64 {
    let images = build_matches(preds, gts, |p, g| box_iou(&p.bbox, &g.bbox), |p| p.det_score);
    warn_if_empty(images.iter().map(|i| i.num_gt).sum(), "box AP");
    let m = greedy_match(&images, 0.5);
    average_precision(&m.ranked_tp, m.num_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub ap_p_50: f64,
    pub ap_p_vol: f64,
    pub pcp_50: f64,
    pub ap_r_vol: f64,
    pub map_bbox: f64,
    pub thresholds: Vec<f64>,
    pub ap_p_per_threshold: Vec<f64>,
    pub num_images: usize,
    pub num_instances: usize,
}

impl MetricReport {
    /// Scalar metrics in a fixed order, as (name, value).
    pub fn scalars(&self) -> [(&'static str, f64); 6] {
        [
            ("mIoU", self.miou),
            ("AP^p_50", self.ap_p_50),
            ("AP^p_vol", self.ap_p_vol),
            ("PCP_50", self.pcp_50),
            ("AP^r_vol", self.ap_r_vol),
            ("mAP^bbox", self.map_bbox),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} images, {} ground-truth instances", self.num_images, self.num_instances)?;
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (name, v) in self.scalars() {
            writeln!(f, "{name:<10} {:>8.4}", v)?;
        }
        write!(f, "per-class IoU:")?;
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => write!(f, " {c}:{v:.3}")?,
                None => write!(f, " {c}:-")?,
            }
        }
        Ok(())
    }
}

/// Every metric for a dataset of predictions against its scenes' ground
/// truth (`global_gts` are the scene-level part rasters).
pub fn evaluate(
    preds: &[PredictionSet],
    gts: &[&[GroundTruthInstance]],
    global_gts: &[&LabelRaster],
    num_classes: usize,
    thresholds: &[f64],
) -> MetricReport {
    let globals: Vec<&LabelRaster> = preds.iter().map(|p| &p.global).collect();
    let (miou, per_class_iou) = miou_global(&globals, global_gts, num_classes);
    let (ap_p_50, ap_p_vol, ap_p_per_threshold) = ap_p(preds, gts, thresholds);
    MetricReport {
        miou,
        per_class_iou,
        ap_p_50,
        ap_p_vol,
        pcp_50: pcp_50(preds, gts),
        ap_r_vol: ap_r(preds, gts, thresholds),
        map_bbox: map_bbox(preds, gts),
        thresholds: thresholds.to_vec(),
        ap_p_per_threshold,
        num_images: preds.len(),
        num_instances: gts.iter().map(|g| g.len()).sum(),
    }
}
