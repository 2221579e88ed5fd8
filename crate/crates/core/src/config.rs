//! Flat TOML configuration shared by every stage of the pipeline.
//!
//! Every key is optional; missing keys take the defaults below. The global
//! seed can be overridden with the `INSTPARSE_SEED` environment variable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{level_stride, MAX_LEVEL, MIN_LEVEL};
use crate::synth::GeneratorConfig;

pub const SEED_ENV: &str = "INSTPARSE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextModule {
    Pgec,
    Psp,
    Aspp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeReduction {
    /// Per-pixel weighted terms summed over the crop.
    Sum,
    /// The same sum divided by the crop's pixel count.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // scenes
    pub image_size: usize,
    pub k_parts: usize,
    pub n_instances_min: usize,
    pub n_instances_max: usize,
    pub overlap_prob: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub base_seed: u64,

    // network
    pub fpn_channels: usize,
    pub backbone_widths: Vec<usize>,
    pub head_convs: usize,

    // detection
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_top_n: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Upper bounds of the P3..P6 regression ranges at the reference scale;
    /// P7 is unbounded above.
    pub level_ranges: Vec<f64>,
    /// Image side the ranges are expressed at; ranges are multiplied by
    /// `image_size / range_reference_size`.
    pub range_reference_size: f64,

    // parsing
    pub roi_size: usize,
    pub use_edge_branch: bool,
    pub use_gn: bool,
    pub context_module: ContextModule,
    pub use_nonlocal: bool,
    pub alpha: f64,
    pub beta: f64,
    pub edge_loss_reduction: EdgeReduction,

    // refinement
    pub theta: f64,
    pub gamma: f64,
    pub use_miou_loss: bool,
    pub use_miou_score: bool,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub grad_clip: Option<f64>,
    pub box_jitter: f64,
    pub scale_jitter: f64,
    pub rois_per_instance: usize,
    pub max_rois_per_batch: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
    pub train_data: Option<String>,
    pub val_data: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            image_size: g.image_size,
            k_parts: g.k_parts,
            n_instances_min: g.n_instances_min,
            n_instances_max: g.n_instances_max,
            overlap_prob: g.overlap_prob,
            n_train: 200,
            n_val: 200,
            base_seed: 0,

            fpn_channels: 64,
            backbone_widths: vec![16, 32, 48, 64, 96],
            head_convs: 2,

            score_threshold: 0.05,
            nms_iou: 0.6,
            max_detections: 50,
            pre_nms_top_n: 1000,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            level_ranges: vec![64.0, 128.0, 256.0, 512.0],
            range_reference_size: 800.0,

            roi_size: 32,
            use_edge_branch: true,
            use_gn: true,
            context_module: ContextModule::Pgec,
            use_nonlocal: true,
            alpha: 2.0,
            beta: 2.0,
            edge_loss_reduction: EdgeReduction::Mean,

            theta: 2.0,
            gamma: 1.0,
            use_miou_loss: true,
            use_miou_score: true,

            epochs: 60,
            batch_size: 8,
            base_lr: 0.005,
            lr_decay_epochs: vec![40, 52],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 0,
            grad_clip: None,
            box_jitter: 0.1,
            scale_jitter: 0.125,
            rois_per_instance: 2,
            max_rois_per_batch: 48,
            divergence_threshold: 1e4,
            seed: 0,
            train_data: None,
            val_data: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, then apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            k_parts: self.k_parts,
            n_instances_min: self.n_instances_min,
            n_instances_max: self.n_instances_max,
            overlap_prob: self.overlap_prob,
        }
    }

    /// Effective `(lo, hi]` regression range of every level P3..P7.
    pub fn level_bounds(&self) -> Vec<(f64, f64)> {
        let scale = self.image_size as f64 / self.range_reference_size;
        let mut edges = vec![0.0];
        edges.extend(self.level_ranges.iter().map(|r| r * scale));
        edges.push(f64::INFINITY);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        (MIN_LEVEL..=MAX_LEVEL).map(level_stride).collect()
    }

    /// Learning rate at `epoch` (0-based) and global iteration `iter`.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count() as i32;
        let lr = self.base_lr * self.lr_decay_factor.powi(decays);
        if iter < self.warmup_iters {
            let f = (iter + 1) as f64 / self.warmup_iters as f64;
            lr * (1.0 / 3.0 + f * 2.0 / 3.0)
        } else {
            lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.generator().validate()?;
        if self.level_ranges.len() != MAX_LEVEL - MIN_LEVEL {
            return bad(format!("level_ranges needs {} entries", MAX_LEVEL - MIN_LEVEL));
        }
        if self.level_ranges.windows(2).any(|w| w[0] >= w[1]) || self.level_ranges[0] <= 0.0 {
            return bad("level_ranges must be positive and strictly increasing".into());
        }
        if ![14, 32, 48].contains(&self.roi_size) {
            return bad(format!("roi_size must be 14, 32 or 48, got {}", self.roi_size));
        }
        if self.fpn_channels < 8 || self.fpn_channels % 8 != 0 {
            return bad("fpn_channels must be a positive multiple of 8".into());
        }
        if self.backbone_widths.len() != 5 || self.backbone_widths.iter().any(|&w| w == 0 || w % 4 != 0) {
            return bad("backbone_widths needs five multiples of 4".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.base_lr <= 0.0 {
            return bad("epochs, batch_size and base_lr must be positive".into());
        }
        if self.max_detections == 0 {
            return bad("max_detections must be positive".into());
        }
        Ok(())
    }
}
