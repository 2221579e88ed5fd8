//! The assembled network: backbone and pyramid, detection head, parsing
//! head and the optional mask-quality scorer.

use candle_core::{DType, Device, Result, Tensor};

use crate::backbone::{BackboneFpn, FeaturePyramid};
use crate::config::Config;
use crate::detect::{DetectHead, DetectionOutputs};
use crate::geometry::BBox;
use crate::nn::ParamStore;
use crate::ops::{roi_align, RoiAlignParams};
use crate::parse::{ParseHead, RoiPrediction};
use crate::refine::MiouScoreNet;

/// RoI features are pooled from P3.
pub const ROI_LEVEL: usize = 3;
pub const ROI_STRIDE: usize = 8;

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// Normalised (N, 3, H, W) batch from planar CHW images in `[0, 1]`.
pub fn image_batch(images: &[Vec<f32>], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * height * width);
    for img in images {
        assert_eq!(img.len(), 3 * height * width, "image size mismatch");
        data.extend(img.iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::from_vec(data, (images.len(), 3, height, width), &Device::Cpu)
}

/// One region of interest: batch index and box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Per-RoI outputs of the parsing side of the network.
#[derive(Debug, Clone)]
pub struct RoiOutputs {
    pub features: Tensor,
    pub prediction: RoiPrediction,
    /// (R,) predicted mask quality, when the scorer is enabled.
    pub miou_score: Option<Tensor>,
}

pub struct Model {
    pub params: ParamStore,
    pub backbone: BackboneFpn,
    pub detect: DetectHead,
    pub parse: ParseHead,
    pub scorer: Option<MiouScoreNet>,
    pub k_parts: usize,
    pub roi_size: usize,
}

impl Model {
    /// Fresh weights seeded by `cfg.seed`. The scorer is built last so the
    /// other parameters do not depend on whether it exists.
    pub fn new(cfg: &Config) -> Result<Self> {
        let params = ParamStore::new(cfg.seed, DType::F32);
        let c = cfg.fpn_channels;
        let backbone = BackboneFpn::new(&params, &cfg.backbone_widths, c)?;
        let detect = DetectHead::new(&params, c, cfg.head_convs)?;
        let parse = ParseHead::new(
            &params,
            c,
            cfg.roi_size,
            cfg.k_parts,
            cfg.context_module,
            cfg.use_nonlocal,
            cfg.use_gn,
            cfg.use_edge_branch,
        )?;
        let scorer = if cfg.use_miou_score { Some(MiouScoreNet::new(&params, c, cfg.k_parts, cfg.roi_size)?) } else { None };
        Ok(Self { params, backbone, detect, parse, scorer, k_parts: cfg.k_parts, roi_size: cfg.roi_size })
    }

    pub fn pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.forward(images)
    }

    pub fn detections(&self, pyramid: &FeaturePyramid) -> Result<DetectionOutputs> {
        self.detect.forward(pyramid)
    }

    /// Pool every RoI from P3 and run the parsing head and scorer.
    pub fn roi_forward(&self, pyramid: &FeaturePyramid, rois: &[Roi]) -> Result<RoiOutputs> {
        let mut flat = Vec::with_capacity(rois.len() * 5);
        for r in rois {
            flat.extend([r.batch as f32, r.bbox.x0 as f32, r.bbox.y0 as f32, r.bbox.x1 as f32, r.bbox.y1 as f32]);
        }
        let p3 = pyramid.level(ROI_LEVEL);
        let boxes = Tensor::from_vec(flat, (rois.len(), 5), &Device::Cpu)?.to_dtype(p3.dtype())?;
        let features = roi_align(p3, &boxes, RoiAlignParams::new(self.roi_size, ROI_STRIDE))?;
        if rois.is_empty() {
            let side = 2 * self.roi_size;
            let empty = |k: usize| Tensor::zeros((0, k, side, side), p3.dtype(), &Device::Cpu);
            let prediction = RoiPrediction {
                parsing_logits: empty(self.k_parts)?,
                edge_logits: self.parse.prediction.has_edge_branch().then(|| empty(1)).transpose()?,
            };
            let miou_score = self.scorer.as_ref().map(|_| Tensor::zeros(0, p3.dtype(), &Device::Cpu)).transpose()?;
            return Ok(RoiOutputs { features, prediction, miou_score });
        }
        let (_, prediction) = self.parse.forward(&features)?;
        let miou_score = self.scorer.as_ref().map(|s| s.forward(&prediction.parsing_logits, &features)).transpose()?;
        Ok(RoiOutputs { features, prediction, miou_score })
    }
}
