//! Training: loss composition, momentum SGD, augmentation, RoI sampling
//! and the epoch loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::detect::{assign_targets, decode_detections, detection_loss, level_maps, DecodeParams, DetectionOutputs};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, pyramid_locations, BBox};
use crate::model::{image_batch, Model, Roi};
use crate::parse::prediction_loss;
use crate::raster::{extract_edge_labels, EdgeRaster, LabelRaster};
use crate::refine::{compute_map_miou, lovasz_softmax};
use crate::synth::{GroundTruthInstance, Scene};

/// Detections overlapping a ground-truth box at least this much become
/// extra training RoIs for it.
pub const DETECTION_ROI_IOU: f64 = 0.5;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `det + pred + refine`, refusing non-finite terms.
pub fn total_loss(det: &Tensor, pred: &Tensor, refine: &Tensor) -> Result<Tensor> {
    for (term, t) in [("detection", det), ("prediction", pred), ("refinement", refine)] {
        let value = scalar(t)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    Ok(((det + pred)? + refine)?)
}

/// Host values of every loss term of one step (or their epoch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub det_cls: f64,
    pub det_reg: f64,
    pub det_ctr: f64,
    pub parsing: f64,
    pub edge: f64,
    pub lovasz: f64,
    pub miou_mse: f64,
    pub det: f64,
    pub pred: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.det_cls += s * o.det_cls;
        self.det_reg += s * o.det_reg;
        self.det_ctr += s * o.det_ctr;
        self.parsing += s * o.parsing;
        self.edge += s * o.edge;
        self.lovasz += s * o.lovasz;
        self.miou_mse += s * o.miou_mse;
        self.det += s * o.det;
        self.pred += s * o.pred;
        self.refine += s * o.refine;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub seconds: f64,
    pub mean: LossTerms,
}

/// Momentum SGD with L2 weight decay and optional global-norm clipping.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buffers: BTreeMap::new() }
    }

    /// `v = mu v + (g + wd w)`, `w -= lr v` for every variable with a
    /// gradient. Returns the gradient norm before clipping.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let mut sq = 0.0;
        for (_, v) in vars {
            if let Some(g) = grads.get(v) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, v) in vars {
            let Some(g) = grads.get(v) else { continue };
            // detached so the buffers never keep a step's graph alive
            let g = ((g.detach() * scale)? + (v.as_tensor().detach() * self.weight_decay)?)?;
            let buf = match self.buffers.get(name) {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g,
            };
            v.set(&(v.as_tensor() - (&buf * lr)?)?)?;
            self.buffers.insert(name.clone(), buf);
        }
        Ok(norm)
    }
}

/// Image and instances of one (possibly zoomed) training scene.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub width: usize,
    pub height: usize,
    /// Planar CHW in `[0, 1]`.
    pub image: Vec<f32>,
    pub instances: Vec<GroundTruthInstance>,
}

impl TrainSample {
    pub fn from_scene(scene: &Scene) -> Self {
        Self { width: scene.width(), height: scene.height(), image: scene.image_chw(), instances: scene.instances.clone() }
    }
}

/// Zoom a scene about its centre by `factor`, keeping its size: factors
/// above one crop, below one shrink the content and replicate the border.
/// Instances that leave the frame are dropped and boxes are re-tightened.
pub fn zoom_scene(scene: &Scene, factor: f64) -> TrainSample {
    let (w, h) = (scene.width(), scene.height());
    if factor == 1.0 {
        return TrainSample::from_scene(scene);
    }
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let src = scene.image_chw();
    let mut image = vec![0f32; 3 * w * h];
    for y in 0..h {
        let sy = (cy + (y as f64 + 0.5 - cy) / factor - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, (sy - sy.floor()) as f32);
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let sx = (cx + (x as f64 + 0.5 - cx) / factor - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, (sx - sx.floor()) as f32);
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[c * w * h + yy * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                image[c * w * h + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let zoom_labels = |r: &LabelRaster| {
        let mut out = LabelRaster::new(w, h);
        for y in 0..h {
            let sy = (cy + (y as f64 + 0.5 - cy) / factor).floor();
            for x in 0..w {
                let sx = (cx + (x as f64 + 0.5 - cx) / factor).floor();
                if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                    out.set(x, y, r.get(sx as usize, sy as usize));
                }
            }
        }
        out
    };
    let instances = scene
        .instances
        .iter()
        .filter_map(|inst| {
            let parsing = zoom_labels(&inst.parsing);
            let bbox = parsing.foreground_bounds()?;
            Some(GroundTruthInstance { bbox, part_ids: parsing.present_labels(), parsing })
        })
        .collect();
    TrainSample { width: w, height: h, image, instances }
}

/// Scale every side of `b` by an independent offset of up to `amount`
/// times its extent, clipped to the image.
pub fn jitter_box(b: &BBox, amount: f64, width: usize, height: usize, rng: &mut impl Rng) -> BBox {
    let (bw, bh) = (b.width(), b.height());
    let mut d = || if amount > 0.0 { rng.gen_range(-amount..=amount) } else { 0.0 };
    let x0 = (b.x0 + d() * bw).max(0.0);
    let y0 = (b.y0 + d() * bh).max(0.0);
    let x1 = (b.x1 + d() * bw).min(width as f64);
    let y1 = (b.y1 + d() * bh).min(height as f64);
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        *b
    } else {
        BBox { x0, y0, x1, y1 }
    }
}

/// A training RoI with its label and edge crops at the prediction
/// resolution.
#[derive(Debug, Clone)]
pub struct RoiTarget {
    pub roi: Roi,
    pub parsing: LabelRaster,
    pub edges: EdgeRaster,
}

fn roi_target(batch: usize, bbox: BBox, gt: &GroundTruthInstance, side: usize) -> RoiTarget {
    let parsing = gt.parsing.crop_resample(&bbox, side);
    let edges = extract_edge_labels(&parsing);
    RoiTarget { roi: Roi { batch, bbox }, parsing, edges }
}

/// Jittered ground-truth boxes plus matched detections, subsampled to at
/// most `cfg.max_rois_per_batch`.
pub fn sample_rois(
    samples: &[TrainSample],
    detections: &[Vec<BBox>],
    cfg: &Config,
    rng: &mut impl Rng,
) -> Vec<RoiTarget> {
    let side = 2 * cfg.roi_size;
    let mut out = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        for gt in &s.instances {
            for _ in 0..cfg.rois_per_instance {
                out.push(roi_target(b, jitter_box(&gt.bbox, cfg.box_jitter, s.width, s.height, rng), gt, side));
            }
        }
        for d in detections.get(b).into_iter().flatten() {
            let best = s
                .instances
                .iter()
                .map(|g| box_iou(d, &g.bbox))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((gi, iou)) = best {
                if iou >= DETECTION_ROI_IOU {
                    out.push(roi_target(b, *d, &s.instances[gi], side));
                }
            }
        }
    }
    if out.len() > cfg.max_rois_per_batch {
        let mut idx: Vec<usize> = (0..out.len()).collect();
        idx.shuffle(rng);
        idx.truncate(cfg.max_rois_per_batch);
        idx.sort_unstable();
        let mut keep: Vec<Option<RoiTarget>> = out.into_iter().map(Some).collect();
        out = idx.into_iter().map(|i| keep[i].take().expect("unique index")).collect();
    }
    out
}

/// Label raster of every RoI from (R, K, H, W) logits.
pub fn argmax_rasters(logits: &Tensor) -> Result<Vec<LabelRaster>> {
    let (_, _, h, w) = logits.dims4()?;
    let am = logits.argmax(1)?.to_dtype(DType::U32)?.to_vec3::<u32>()?;
    Ok(am.into_iter().map(|r| LabelRaster::from_vec(w, h, r.into_iter().flatten().map(|v| v as u8).collect())).collect())
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::zeros((), DType::F32, &Device::Cpu)?)
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            model: Model::new(cfg)?,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e),
            epoch: 0,
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.cfg);
        ck.epoch = self.epoch;
        ck.iteration = self.iteration;
        ck.rng = self.rng.clone();
        ck.momentum = self.sgd.buffers.clone();
        ck
    }

    fn decode_for_rois(&self, outputs: &DetectionOutputs, samples: &[TrainSample]) -> Result<Vec<Vec<BBox>>> {
        let params = DecodeParams {
            score_threshold: self.cfg.score_threshold,
            nms_iou: self.cfg.nms_iou,
            max_detections: self.cfg.max_detections,
            pre_nms_top_n: self.cfg.pre_nms_top_n,
        };
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let maps = level_maps(outputs, i)?;
                Ok(decode_detections(&maps, (s.width, s.height), &params).into_iter().map(|d| d.bbox).collect())
            })
            .collect()
    }

    /// Forward, loss, backward and update on one batch.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<LossTerms> {
        let cfg = &self.cfg;
        let (h, w) = (samples[0].height, samples[0].width);
        let images: Vec<Vec<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let x = image_batch(&images, h, w)?;
        let pyramid = self.model.pyramid(&x)?;
        let outputs = self.model.detections(&pyramid)?;
        let locations = pyramid_locations(pyramid.padded.0, pyramid.padded.1);
        let bounds = cfg.level_bounds();
        let targets: Vec<_> = samples
            .iter()
            .map(|s| assign_targets(&locations, &s.instances.iter().map(|g| g.bbox).collect::<Vec<_>>(), &bounds))
            .collect();
        let det = detection_loss(&outputs, &targets, cfg.focal_gamma, cfg.focal_alpha)?;

        let dets = self.decode_for_rois(&outputs, samples)?;
        let rois = sample_rois(samples, &dets, cfg, &mut self.rng);
        let mut terms = LossTerms {
            det_cls: scalar(&det.cls)?,
            det_reg: scalar(&det.reg)?,
            det_ctr: scalar(&det.ctr)?,
            det: scalar(&det.total)?,
            ..Default::default()
        };
        let (pred_total, refine_total) = if rois.is_empty() {
            (zero()?, zero()?)
        } else {
            let roi_list: Vec<Roi> = rois.iter().map(|r| r.roi).collect();
            let gt_parsing: Vec<LabelRaster> = rois.iter().map(|r| r.parsing.clone()).collect();
            let gt_edges: Vec<EdgeRaster> = rois.iter().map(|r| r.edges.clone()).collect();
            let out = self.model.roi_forward(&pyramid, &roi_list)?;
            let pred = prediction_loss(&out.prediction, &gt_parsing, &gt_edges, cfg.alpha, cfg.beta, cfg.edge_loss_reduction)?;
            terms.parsing = scalar(&pred.parsing)?;
            terms.edge = scalar(&pred.edge)?;
            let mut refine = zero()?;
            if cfg.use_miou_loss {
                let lovasz = lovasz_softmax(&out.prediction.parsing_logits, &gt_parsing)?;
                terms.lovasz = scalar(&lovasz)?;
                refine = (refine + (lovasz * cfg.theta)?)?;
            }
            if let Some(score) = &out.miou_score {
                let predicted = argmax_rasters(&out.prediction.parsing_logits)?;
                let target: Vec<f32> = predicted.iter().zip(&gt_parsing).map(|(p, g)| compute_map_miou(p, g) as f32).collect();
                let target = Tensor::from_vec(target, score.dims(), &Device::Cpu)?;
                let mse = (score - target)?.sqr()?.mean_all()?;
                terms.miou_mse = scalar(&mse)?;
                refine = (refine + (mse * cfg.gamma)?)?;
            }
            (pred.total, refine)
        };
        terms.pred = scalar(&pred_total)?;
        terms.refine = scalar(&refine_total)?;
        let total = total_loss(&det.total, &pred_total, &refine_total)?;
        terms.total = scalar(&total)?;
        if terms.total > cfg.divergence_threshold {
            return Err(Error::Diverged { epoch: self.epoch, loss: terms.total });
        }
        let grads = total.backward()?;
        let lr = cfg.lr_at(self.epoch, self.iteration);
        self.sgd.step(&self.model.params.vars(), &grads, lr, cfg.grad_clip)?;
        self.iteration += 1;
        Ok(terms)
    }

    /// One pass over `scenes` in a seeded random order.
    pub fn run_epoch(&mut self, scenes: &[Scene]) -> Result<EpochLog> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.cfg.lr_at(self.epoch, self.iteration);
        let mut sum = LossTerms::default();
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    let sj = self.cfg.scale_jitter;
                    let f = if sj > 0.0 { 1.0 + self.rng.gen_range(-sj..=sj) } else { 1.0 };
                    zoom_scene(&scenes[i], f)
                })
                .collect();
            let t = self.step(&samples)?;
            sum.add_scaled(&t, 1.0);
            steps += 1;
        }
        let mut mean = LossTerms::default();
        mean.add_scaled(&sum, 1.0 / steps.max(1) as f64);
        let entry = EpochLog { epoch: self.epoch, lr, steps, seconds: start.elapsed().as_secs_f64(), mean };
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }
}

/// Where the loss log of a checkpoint lives.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.json")
}

pub fn save_loss_log(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(log)?)?;
    Ok(())
}

pub fn load_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Train for `cfg.epochs` epochs. With `out`, the checkpoint and loss log
/// are rewritten after every epoch, so a diverged run leaves the last good
/// state on disk.
pub fn train(cfg: &Config, scenes: &[Scene], out: Option<&Path>) -> Result<Trainer> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::from(cfg.train_data.clone().unwrap_or_default())));
    }
    let mut trainer = Trainer::new(cfg)?;
    if let Some(p) = out {
        trainer.checkpoint().save(p)?;
    }
    while trainer.epoch < cfg.epochs {
        let e = trainer.run_epoch(scenes)?;
        log::info!(
            "epoch {:>3} lr {:.5} total {:.4} det {:.4} pred {:.4} refine {:.4} ({:.1}s)",
            e.epoch, e.lr, e.mean.total, e.mean.det, e.mean.pred, e.mean.refine, e.seconds
        );
        if let Some(p) = out {
            trainer.checkpoint().save(p)?;
            save_loss_log(&trainer.log, &loss_log_path(p))?;
        }
    }
    Ok(trainer)
}

/// Centred moving average with a window of `window` epochs, truncated at
/// the ends.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn tiny() -> Config {
        Config {
            fpn_channels: 8,
            backbone_widths: vec![4, 4, 8, 8, 8],
            roi_size: 14,
            batch_size: 2,
            epochs: 2,
            max_rois_per_batch: 6,
            ..Config::default()
        }
    }

    #[test]
    fn total_loss_examples() {
        let t = |v: f64| Tensor::new(v as f32, &Device::Cpu).unwrap();
        assert_eq!(scalar(&total_loss(&t(0.0), &t(0.0), &t(0.0)).unwrap()).unwrap(), 0.0);
        assert!((scalar(&total_loss(&t(1.0), &t(2.0), &t(1.25)).unwrap()).unwrap() - 4.25).abs() < 1e-6);
        match total_loss(&t(1.0), &t(f64::NAN), &t(0.0)) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "prediction"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let v = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        let vars = vec![("w".to_string(), v.clone())];
        let mut sgd = Sgd::new(0.9, 0.1);
        // loss = sum(w^2) so g = 2w
        let g = v.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        sgd.step(&vars, &g, 0.5, None).unwrap();
        // buf = 2w + 0.1w = 2.1w, w' = w - 0.5 * 2.1w = -0.05w
        let w1 = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!((w1[0] + 0.05).abs() < 1e-6 && (w1[1] - 0.1).abs() < 1e-6);
        let g = v.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        sgd.step(&vars, &g, 0.5, None).unwrap();
        // buf = 0.9 * 2.1 + 2.1 * (-0.05) = 1.785 (times w0), w'' = -0.05 - 0.8925
        let w2 = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!((w2[0] + 0.9425).abs() < 1e-5, "{w2:?}");
    }

    #[test]
    fn clipping_bounds_the_update() {
        let v = Var::new(&[3.0f32, 4.0], &Device::Cpu).unwrap();
        let vars = vec![("w".to_string(), v.clone())];
        let mut sgd = Sgd::new(0.0, 0.0);
        let g = (v.as_tensor() * 10.0).unwrap().sum_all().unwrap().backward().unwrap();
        let norm = sgd.step(&vars, &g, 1.0, Some(1.0)).unwrap();
        assert!((norm - 200f64.sqrt()).abs() < 1e-4);
        let w = v.as_tensor().to_vec1::<f32>().unwrap();
        let moved = ((3.0 - w[0]).powi(2) + (4.0 - w[1]).powi(2)).sqrt();
        assert!((moved - 1.0).abs() < 1e-5);
    }

    #[test]
    fn unit_zoom_is_identity_and_zoom_keeps_boxes_tight() {
        let scene = generate_scene(11, &tiny().generator()).unwrap();
        let same = zoom_scene(&scene, 1.0);
        assert_eq!(same.image, scene.image_chw());
        assert_eq!(same.instances, scene.instances);
        for f in [0.875, 1.125] {
            let z = zoom_scene(&scene, f);
            assert_eq!(z.image.len(), scene.image_chw().len());
            for inst in &z.instances {
                assert_eq!(Some(inst.bbox), inst.parsing.foreground_bounds());
            }
        }
    }

    #[test]
    fn jitter_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BBox { x0: 20.0, y0: 30.0, x1: 60.0, y1: 90.0 };
        for _ in 0..200 {
            let j = jitter_box(&b, 0.1, 128, 128, &mut rng);
            assert!((j.x0 - 20.0).abs() <= 4.0 + 1e-9 && (j.y1 - 90.0).abs() <= 6.0 + 1e-9);
        }
        assert_eq!(jitter_box(&b, 0.0, 128, 128, &mut rng), b);
    }

    #[test]
    fn roi_sampling_respects_the_cap_and_matches_detections() {
        let cfg = tiny();
        let scene = generate_scene(3, &cfg.generator()).unwrap();
        let s = TrainSample::from_scene(&scene);
        let gt = s.instances[0].bbox;
        let far = BBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loose = Config { max_rois_per_batch: 100, ..cfg.clone() };
        let rois = sample_rois(std::slice::from_ref(&s), &[vec![gt, far]], &loose, &mut rng);
        assert_eq!(rois.len(), s.instances.len() * cfg.rois_per_instance + 1);
        assert!(rois.iter().all(|r| r.parsing.width() == 2 * cfg.roi_size));
        let capped = sample_rois(&[s.clone(), s], &[], &cfg, &mut rng);
        assert!(capped.len() <= cfg.max_rois_per_batch);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let cfg = Config { epochs: 1, ..tiny() };
        let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(i, &cfg.generator()).unwrap()).collect();
        let a = train(&cfg, &scenes, None).unwrap();
        let b = train(&cfg, &scenes, None).unwrap();
        assert_eq!(a.log.len(), 1);
        assert_eq!(a.log[0].mean, b.log[0].mean);
        assert!(a.log[0].mean.total.is_finite());
    }

    #[test]
    fn step_terms_sum_to_total() {
        let cfg = tiny();
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(i, &cfg.generator()).unwrap()).collect();
        let mut t = Trainer::new(&cfg).unwrap();
        let samples: Vec<TrainSample> = scenes.iter().map(TrainSample::from_scene).collect();
        let terms = t.step(&samples).unwrap();
        assert!((terms.det + terms.pred + terms.refine - terms.total).abs() < 1e-4 * terms.total.abs().max(1.0));
        assert!((terms.det_cls + terms.det_reg + terms.det_ctr - terms.det).abs() < 1e-4);
        let expect_pred = cfg.alpha * terms.parsing + cfg.beta * terms.edge;
        assert!((expect_pred - terms.pred).abs() < 1e-4);
        let expect_refine = cfg.theta * terms.lovasz + cfg.gamma * terms.miou_mse;
        assert!((expect_refine - terms.refine).abs() < 1e-4);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0, 5.0], 3), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
    }
}
