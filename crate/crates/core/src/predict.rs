//! Inference: detect, parse every detection, paste the parsing maps back
//! into the image and rank instances.

use candle_core::DType;

use crate::config::Config;
use crate::detect::{decode_detections, level_maps, DecodeParams, Detection};
use crate::error::Result;
use crate::geometry::BBox;
use crate::metrics::{default_thresholds, evaluate, InstanceRecord, MetricReport, PredictionSet};
use crate::model::{image_batch, Model, Roi};
use crate::raster::LabelRaster;
use crate::refine::fuse_instance_score;
use crate::synth::Scene;

/// Images per forward pass and RoIs per parsing pass during inference.
const IMAGE_CHUNK: usize = 8;
const ROI_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub decode: DecodeParams,
    /// Rank by the fused detection and mask-quality score when the model
    /// has a scorer; otherwise by detection score alone.
    pub use_miou_score: bool,
}

impl PredictOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            decode: DecodeParams {
                score_threshold: cfg.score_threshold,
                nms_iou: cfg.nms_iou,
                max_detections: cfg.max_detections,
                pre_nms_top_n: cfg.pre_nms_top_n,
            },
            use_miou_score: cfg.use_miou_score,
        }
    }
}

/// Resize (K, S, S) class probabilities onto the pixels of `bbox` by
/// bilinear interpolation and take the per-pixel argmax. Pixels whose
/// centres fall outside the box stay background.
pub fn paste_instance(probs: &[f32], k: usize, side: usize, bbox: &BBox, width: usize, height: usize) -> LabelRaster {
    let mut out = LabelRaster::new(width, height);
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let plane = side * side;
    let xs = (bbox.x0.floor().max(0.0) as usize)..(bbox.x1.ceil().min(width as f64) as usize);
    let ys = (bbox.y0.floor().max(0.0) as usize)..(bbox.y1.ceil().min(height as f64) as usize);
    let max = (side - 1) as f64;
    for y in ys {
        let cy = y as f64 + 0.5;
        if cy < bbox.y0 || cy > bbox.y1 {
            continue;
        }
        let v = ((cy - bbox.y0) / bh * side as f64 - 0.5).clamp(0.0, max);
        let (v0, fv) = (v.floor() as usize, (v - v.floor()) as f32);
        let v1 = (v0 + 1).min(side - 1);
        for x in xs.clone() {
            let cx = x as f64 + 0.5;
            if cx < bbox.x0 || cx > bbox.x1 {
                continue;
            }
            let u = ((cx - bbox.x0) / bw * side as f64 - 0.5).clamp(0.0, max);
            let (u0, fu) = (u.floor() as usize, (u - u.floor()) as f32);
            let u1 = (u0 + 1).min(side - 1);
            let mut best = (0usize, f32::NEG_INFINITY);
            for c in 0..k {
                let p = &probs[c * plane..(c + 1) * plane];
                let top = p[v0 * side + u0] * (1.0 - fu) + p[v0 * side + u1] * fu;
                let bot = p[v1 * side + u0] * (1.0 - fu) + p[v1 * side + u1] * fu;
                let val = top * (1.0 - fv) + bot * fv;
                if val > best.1 {
                    best = (c, val);
                }
            }
            out.set(x, y, best.0 as u8);
        }
    }
    out
}

/// Paste instances in ascending score order so the highest-scored instance
/// wins every overlap; only part pixels are written.
pub fn paste_global(instances: &[InstanceRecord], width: usize, height: usize) -> LabelRaster {
    let mut order: Vec<&InstanceRecord> = instances.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut out = LabelRaster::new(width, height);
    for inst in order {
        for (o, &v) in out.data_mut().iter_mut().zip(inst.parsing.data()) {
            if v != 0 {
                *o = v;
            }
        }
    }
    out
}

/// Sort by descending score (stable) and rebuild the global raster.
pub fn finalize(mut instances: Vec<InstanceRecord>, width: usize, height: usize) -> PredictionSet {
    instances.sort_by(|a, b| b.score.total_cmp(&a.score));
    let global = paste_global(&instances, width, height);
    PredictionSet { instances, global }
}

/// Re-rank a prediction set by detection score alone or by the fused score.
pub fn rescore(set: &PredictionSet, use_miou_score: bool) -> PredictionSet {
    let (w, h) = (set.global.width(), set.global.height());
    let instances = set
        .instances
        .iter()
        .map(|i| {
            let score = match (use_miou_score, i.miou_score) {
                (true, Some(m)) => fuse_instance_score(i.det_score, m),
                _ => i.det_score,
            };
            InstanceRecord { score, ..i.clone() }
        })
        .collect();
    finalize(instances, w, h)
}

/// Predictions for planar CHW images in `[0, 1]`, all of one size.
pub fn predict_images(model: &Model, images: &[Vec<f32>], width: usize, height: usize, opts: &PredictOptions) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(IMAGE_CHUNK) {
        let x = image_batch(chunk, height, width)?;
        let pyramid = model.pyramid(&x)?;
        let det_out = model.detections(&pyramid)?;
        let mut dets: Vec<Vec<Detection>> = Vec::with_capacity(chunk.len());
        for i in 0..chunk.len() {
            dets.push(decode_detections(&level_maps(&det_out, i)?, (width, height), &opts.decode));
        }
        let rois: Vec<Roi> = dets.iter().enumerate().flat_map(|(b, ds)| ds.iter().map(move |d| Roi { batch: b, bbox: d.bbox })).collect();
        let mut records: Vec<Vec<InstanceRecord>> = vec![Vec::new(); chunk.len()];
        let flat_dets: Vec<&Detection> = dets.iter().flatten().collect();
        for (ci, roi_chunk) in rois.chunks(ROI_CHUNK).enumerate() {
            let ro = model.roi_forward(&pyramid, roi_chunk)?;
            let probs = candle_nn::ops::softmax(&ro.prediction.parsing_logits, 1)?.to_dtype(DType::F32)?;
            let (r, k, side, _) = probs.dims4()?;
            let probs = probs.flatten_all()?.to_vec1::<f32>()?;
            let scores: Option<Vec<f32>> = ro.miou_score.as_ref().map(|s| s.to_dtype(DType::F32)?.to_vec1::<f32>()).transpose()?;
            for j in 0..r {
                let roi = roi_chunk[j];
                let det = flat_dets[ci * ROI_CHUNK + j];
                let parsing = paste_instance(&probs[j * k * side * side..(j + 1) * k * side * side], k, side, &roi.bbox, width, height);
                let miou_score = scores.as_ref().map(|s| s[j] as f64);
                let score = match (opts.use_miou_score, miou_score) {
                    (true, Some(m)) => fuse_instance_score(det.score, m),
                    _ => det.score,
                };
                records[roi.batch].push(InstanceRecord { bbox: roi.bbox, score, det_score: det.score, miou_score, parsing });
            }
        }
        out.extend(records.into_iter().map(|r| finalize(r, width, height)));
    }
    Ok(out)
}

pub fn predict_scenes(model: &Model, scenes: &[Scene], opts: &PredictOptions) -> Result<Vec<PredictionSet>> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = (scenes[0].width(), scenes[0].height());
    let images: Vec<Vec<f32>> = scenes.iter().map(Scene::image_chw).collect();
    predict_images(model, &images, w, h, opts)
}

/// Every metric of `preds` against the ground truth of `scenes`.
pub fn evaluate_predictions(preds: &[PredictionSet], scenes: &[Scene], k_parts: usize) -> MetricReport {
    let gts: Vec<&[crate::synth::GroundTruthInstance]> = scenes.iter().map(|s| s.instances.as_slice()).collect();
    let globals: Vec<&LabelRaster> = scenes.iter().map(|s| &s.global_parsing).collect();
    evaluate(preds, &gts, &globals, k_parts, &default_thresholds())
}

pub fn evaluate_model(model: &Model, cfg: &Config, scenes: &[Scene]) -> Result<MetricReport> {
    let preds = predict_scenes(model, scenes, &PredictOptions::from_config(cfg))?;
    Ok(evaluate_predictions(&preds, scenes, cfg.k_parts))
}
