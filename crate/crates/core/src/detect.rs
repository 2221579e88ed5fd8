//! Anchor-free detection head: towers, target assignment, losses, decoding.

use candle_core::{DType, Device, Module, Result, Tensor};

use crate::backbone::FeaturePyramid;
use crate::geometry::{
    box_iou, centerness, compute_offsets, level_grid, level_stride, BBox, Location, OffsetVector, MIN_LEVEL,
    NUM_LEVELS,
};
use crate::nn::{group_norm, Conv, Init, ParamStore};

/// Prior probability of the person class at initialisation.
const CLS_PRIOR: f64 = 0.01;
/// Upper clamp on `scale * raw` before the exponential.
const MAX_LOG_OFFSET: f64 = 20.0;

/// Raw head outputs for every level, each (N, C, h, w).
#[derive(Debug, Clone)]
pub struct DetectionOutputs {
    pub class_logits: Vec<Tensor>,
    pub centerness_logits: Vec<Tensor>,
    /// Positive (l, t, r, b) offsets in image pixels.
    pub regression: Vec<Tensor>,
}

impl DetectionOutputs {
    /// Class and centerness logits as (N, L) and regression as (N, L, 4),
    /// locations ordered level-major then row-major.
    pub fn flatten(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let flat1 = |ts: &[Tensor]| -> Result<Tensor> {
            let parts = ts.iter().map(|t| t.flatten_from(1)).collect::<Result<Vec<_>>>()?;
            Tensor::cat(&parts, 1)
        };
        let reg = self
            .regression
            .iter()
            .map(|t| t.flatten_from(2)?.transpose(1, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok((flat1(&self.class_logits)?, flat1(&self.centerness_logits)?, Tensor::cat(&reg, 1)?.contiguous()?))
    }
}

struct Tower {
    layers: Vec<(Conv, candle_nn::GroupNorm)>,
}

impl Tower {
    fn new(ps: &ParamStore, depth: usize, channels: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let p = ps.pp(&i.to_string());
                Ok((Conv::same3(&p, "conv", channels, channels, Init::Normal(0.01))?, group_norm(&p, "gn", channels, 1.0)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, gn) in &self.layers {
            h = gn.forward(&conv.forward(&h)?)?.relu()?;
        }
        Ok(h)
    }
}

/// Towers shared across levels, with a learnable exponent scale per level.
pub struct DetectHead {
    cls_tower: Tower,
    reg_tower: Tower,
    cls_out: Conv,
    ctr_out: Conv,
    reg_out: Conv,
    scales: Tensor,
}

impl DetectHead {
    pub fn new(ps: &ParamStore, channels: usize, depth: usize) -> Result<Self> {
        let ps = ps.pp("detect");
        let p3 = crate::ops::Conv2dParams { padding: 1, ..Default::default() };
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        Ok(Self {
            cls_tower: Tower::new(&ps.pp("cls_tower"), depth, channels)?,
            reg_tower: Tower::new(&ps.pp("reg_tower"), depth, channels)?,
            cls_out: Conv::with_bias_init(&ps, "cls_out", channels, 1, 3, p3, Init::Normal(0.01), prior_bias)?,
            ctr_out: Conv::same3(&ps, "ctr_out", channels, 1, Init::Normal(0.01))?,
            reg_out: Conv::same3(&ps, "reg_out", channels, 4, Init::Normal(0.01))?,
            scales: ps.get("scales", &[NUM_LEVELS], Init::Const(1.0))?,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<DetectionOutputs> {
        let mut out = DetectionOutputs { class_logits: vec![], centerness_logits: vec![], regression: vec![] };
        for (i, p) in pyramid.levels.iter().enumerate() {
            let c = self.cls_tower.forward(p)?;
            let r = self.reg_tower.forward(p)?;
            out.class_logits.push(self.cls_out.forward(&c)?);
            out.centerness_logits.push(self.ctr_out.forward(&r)?);
            let scale = self.scales.narrow(0, i, 1)?.reshape((1, 1, 1, 1))?;
            let raw = self.reg_out.forward(&r)?.broadcast_mul(&scale)?.minimum(MAX_LOG_OFFSET)?;
            out.regression.push((raw.exp()? * level_stride(i + MIN_LEVEL) as f64)?);
        }
        Ok(out)
    }
}

/// Target of one positive location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub box_index: usize,
    pub offsets: OffsetVector,
    pub centerness: f64,
}

/// Per-location targets of one image, level-major like the flattened
/// outputs; `None` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentTargets {
    pub levels: Vec<Vec<Option<Assignment>>>,
}

impl AssignmentTargets {
    pub fn flat(&self) -> impl Iterator<Item = &Option<Assignment>> {
        self.levels.iter().flatten()
    }

    pub fn num_positive(&self) -> usize {
        self.flat().filter(|a| a.is_some()).count()
    }
}

/// Label every location. A location is positive for a box when it lies
/// strictly inside it and its largest offset falls in the level's
/// `(lo, hi]` range; among several such boxes the smallest area wins, then
/// the lower index.
pub fn assign_targets(locations: &[Vec<Location>], gt_boxes: &[BBox], bounds: &[(f64, f64)]) -> AssignmentTargets {
    let areas: Vec<f64> = gt_boxes.iter().map(BBox::area).collect();
    let levels = locations
        .iter()
        .zip(bounds)
        .map(|(locs, &(lo, hi))| {
            locs.iter()
                .map(|loc| {
                    let mut best: Option<(usize, OffsetVector)> = None;
                    for (i, bx) in gt_boxes.iter().enumerate() {
                        let Ok(off) = compute_offsets(loc, bx) else { continue };
                        let m = off.max();
                        if off.min() <= 0.0 || m <= lo || m > hi {
                            continue;
                        }
                        if best.is_none_or(|(j, _)| areas[i] < areas[j]) {
                            best = Some((i, off));
                        }
                    }
                    best.map(|(box_index, offsets)| Assignment { box_index, offsets, centerness: centerness(&offsets) })
                })
                .collect()
        })
        .collect();
    AssignmentTargets { levels }
}

/// `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    x.relu()? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?)
}

fn pow_gamma(t: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 0.0 {
        t.ones_like()
    } else if gamma == 1.0 {
        Ok(t.clone())
    } else if gamma == 2.0 {
        t.sqr()
    } else {
        t.clamp(1e-12, 1.0)?.powf(gamma)
    }
}

/// Summed sigmoid focal loss of `logits` against 0/1 `targets`.
pub fn focal_loss_sum(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let pos = (pow_gamma(&(1.0 - &p)?, gamma)? * softplus(&logits.neg()?)?)?;
    let neg = (pow_gamma(&p, gamma)? * softplus(logits)?)?;
    let per = ((targets * pos)? * alpha)?.add(&(((1.0 - targets)? * neg)? * (1.0 - alpha))?)?;
    per.sum_all()
}

/// `-ln(max(IoU, 1e-6))` per row of (P, 4) offset tensors sharing anchors.
pub fn iou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (pl, pt, pr, pb) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tl, tt, tr, tb) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let pa = ((&pl + &pr)? * (&pt + &pb)?)?;
    let ta = ((&tl + &tr)? * (&tt + &tb)?)?;
    let iw = (pl.minimum(&tl)? + pr.minimum(&tr)?)?;
    let ih = (pt.minimum(&tt)? + pb.minimum(&tb)?)?;
    let inter = (iw * ih)?;
    let union = ((pa + ta)? - &inter)?;
    (inter / union)?.maximum(1e-6)?.log()?.neg()?.flatten_all()
}

/// Per-element binary cross-entropy with logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    softplus(logits)? - (logits * targets)?
}

#[derive(Debug, Clone)]
pub struct DetectionLosses {
    pub cls: Tensor,
    pub reg: Tensor,
    pub ctr: Tensor,
    pub total: Tensor,
}

/// Focal loss over every location normalised by the positive count, IoU
/// and centerness losses averaged over positives.
pub fn detection_loss(outputs: &DetectionOutputs, targets: &[AssignmentTargets], gamma: f64, alpha: f64) -> Result<DetectionLosses> {
    let (cls, ctr, reg) = outputs.flatten()?;
    let (n, l) = cls.dims2()?;
    detection_loss_flat(&cls.reshape(n * l)?, &ctr.reshape(n * l)?, &reg.reshape((n * l, 4))?, targets, gamma, alpha)
}

/// Same as [`detection_loss`] on outputs already flattened over images
/// and locations.
pub fn detection_loss_flat(
    cls: &Tensor,
    ctr: &Tensor,
    reg: &Tensor,
    targets: &[AssignmentTargets],
    gamma: f64,
    alpha: f64,
) -> Result<DetectionLosses> {
    let dev = cls.device();
    let dtype = cls.dtype();
    let mut labels = Vec::new();
    let mut pos_idx = Vec::new();
    let mut pos_off = Vec::new();
    let mut pos_ctr = Vec::new();
    for a in targets.iter().flat_map(|t| t.flat()) {
        match a {
            Some(a) => {
                pos_idx.push(labels.len() as u32);
                pos_off.extend(a.offsets.as_array());
                pos_ctr.push(a.centerness);
                labels.push(1.0);
            }
            None => labels.push(0.0),
        }
    }
    if labels.len() != cls.elem_count() {
        candle_core::bail!("detection_loss: {} targets for {} locations", labels.len(), cls.elem_count());
    }
    let num_pos = pos_idx.len();
    let labels = Tensor::from_vec(labels, cls.elem_count(), &Device::Cpu)?.to_dtype(dtype)?;
    let cls_loss = (focal_loss_sum(cls, &labels, gamma, alpha)? / num_pos.max(1) as f64)?;
    let (reg_loss, ctr_loss) = if num_pos == 0 {
        let z = Tensor::zeros((), dtype, dev)?;
        (z.clone(), z)
    } else {
        let idx = Tensor::from_vec(pos_idx, num_pos, dev)?;
        let off_t = Tensor::from_vec(pos_off, (num_pos, 4), dev)?.to_dtype(dtype)?;
        let ctr_t = Tensor::from_vec(pos_ctr, num_pos, dev)?.to_dtype(dtype)?;
        let reg_loss = iou_loss(&reg.index_select(&idx, 0)?, &off_t)?.mean_all()?;
        let ctr_loss = bce_with_logits(&ctr.index_select(&idx, 0)?, &ctr_t)?.mean_all()?;
        (reg_loss, ctr_loss)
    };
    let total = ((&cls_loss + &reg_loss)? + &ctr_loss)?;
    Ok(DetectionLosses { cls: cls_loss, reg: reg_loss, ctr: ctr_loss, total })
}

/// One decoded box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_top_n: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.6, max_detections: 50, pre_nms_top_n: 1000 }
    }
}

/// Host copy of one image's outputs at one level.
#[derive(Debug, Clone)]
pub struct LevelMaps {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub class_logits: Vec<f64>,
    pub centerness_logits: Vec<f64>,
    /// Row-major `[l, t, r, b]` per cell.
    pub regression: Vec<[f64; 4]>,
}

/// Copy image `index` of `outputs` to the host.
pub fn level_maps(outputs: &DetectionOutputs, index: usize) -> Result<Vec<LevelMaps>> {
    (0..outputs.class_logits.len())
        .map(|i| {
            let cls = outputs.class_logits[i].get(index)?;
            let (_, h, w) = cls.dims3()?;
            let host = |t: &Tensor| t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>();
            let reg = outputs.regression[i].get(index)?.flatten_from(1)?.t()?.contiguous()?;
            let reg = reg.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            Ok(LevelMaps {
                level: i + MIN_LEVEL,
                height: h,
                width: w,
                class_logits: host(&cls)?,
                centerness_logits: host(&outputs.centerness_logits[i].get(index)?)?,
                regression: reg.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect(),
            })
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Descending score, then lower x0, then lower y0, then the remaining
/// coordinates.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then(a.bbox.y0.total_cmp(&b.bbox.y0))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.level.cmp(&b.level))
}

/// Greedy non-maximum suppression; drops any box whose IoU with a kept,
/// higher-ranked box exceeds `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64, keep: usize) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut out: Vec<Detection> = Vec::new();
    for d in dets {
        if out.len() == keep {
            break;
        }
        if out.iter().all(|k| box_iou(&k.bbox, &d.bbox) <= iou) {
            out.push(d);
        }
    }
    out
}

/// Score, threshold, decode and suppress the detections of one image.
pub fn decode_detections(levels: &[LevelMaps], image_size: (usize, usize), p: &DecodeParams) -> Vec<Detection> {
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands = Vec::new();
    for lm in levels {
        for r in 0..lm.height {
            for c in 0..lm.width {
                let i = r * lm.width + c;
                let score = sigmoid(lm.class_logits[i]) * sigmoid(lm.centerness_logits[i]);
                if score <= p.score_threshold {
                    continue;
                }
                let loc = Location::from_cell(lm.level, r, c);
                let [l, t, rr, b] = lm.regression[i];
                let bx = OffsetVector { l, t, r: rr, b }.to_box(loc.x, loc.y);
                if let Some(bbox) = bx.clip(iw, ih) {
                    cands.push(Detection { bbox, score, level: lm.level });
                }
            }
        }
    }
    cands.sort_by(detection_order);
    cands.truncate(p.pre_nms_top_n);
    nms(cands, p.nms_iou, p.max_detections)
}

/// Level grids of a padded input, as used by [`assign_targets`].
pub fn grid_sizes(padded: (usize, usize)) -> Vec<(usize, usize)> {
    (MIN_LEVEL..MIN_LEVEL + NUM_LEVELS).map(|l| level_grid(padded.0, padded.1, l)).collect()
}
