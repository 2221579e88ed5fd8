//! Refinement head: Lovász mIoU surrogate, mask-quality regression and
//! score fusion.

use candle_core::{DType, Device, Module, Result, Tensor};

use crate::nn::{Conv, Dense, Init, ParamStore};
use crate::ops::Conv2dParams;
use crate::raster::LabelRaster;

/// Gradient of the Lovász extension of the Jaccard loss for ground-truth
/// indicators already sorted by decreasing error.
pub fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        cum_fg += f;
        cum_bg += 1.0 - f;
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Argmax class of every pixel of a (K, P) row-major buffer.
fn argmax_labels(logits: &[f64], k: usize, p: usize) -> Vec<u8> {
    (0..p)
        .map(|i| {
            (0..k).fold((0usize, f64::NEG_INFINITY), |best, c| if logits[c * p + i] > best.1 { (c, logits[c * p + i]) } else { best }).0
                as u8
        })
        .collect()
}

/// Lovász-softmax loss of (R, K, H, W) logits, averaged over the classes
/// present in each crop's ground truth or argmax prediction, then over
/// RoIs.
pub fn lovasz_softmax(logits: &Tensor, gt: &[LabelRaster]) -> Result<Tensor> {
    let (r, k, h, w) = logits.dims4()?;
    let p = h * w;
    let dtype = logits.dtype();
    let probs = candle_nn::ops::softmax(logits, 1)?.reshape((r, k, p))?;
    let host = logits.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let host_probs = probs.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut per_roi = Vec::with_capacity(r);
    for (i, g) in gt.iter().enumerate().take(r) {
        let pred = argmax_labels(&host[i * k * p..(i + 1) * k * p], k, p);
        let mut present = [false; 256];
        for (&a, &b) in g.data().iter().zip(&pred) {
            present[a as usize] = true;
            present[b as usize] = true;
        }
        let mut terms = Vec::new();
        for c in (0..k).filter(|&c| present[c]) {
            let fg: Vec<f64> = g.data().iter().map(|&v| if v as usize == c { 1.0 } else { 0.0 }).collect();
            let pc = &host_probs[(i * k + c) * p..(i * k + c + 1) * p];
            let mut order: Vec<u32> = (0..p as u32).collect();
            order.sort_by(|&a, &b| {
                let ea = (fg[a as usize] - pc[a as usize]).abs();
                let eb = (fg[b as usize] - pc[b as usize]).abs();
                eb.total_cmp(&ea).then(a.cmp(&b))
            });
            let fg_sorted: Vec<f64> = order.iter().map(|&j| fg[j as usize]).collect();
            let grad = Tensor::from_vec(lovasz_grad(&fg_sorted), p, &Device::Cpu)?.to_dtype(dtype)?;
            let fg_t = Tensor::from_vec(fg, p, &Device::Cpu)?.to_dtype(dtype)?;
            let errors = (fg_t - probs.get(i)?.get(c)?)?.abs()?;
            let idx = Tensor::from_vec(order, p, &Device::Cpu)?;
            terms.push((errors.index_select(&idx, 0)? * grad)?.sum_all()?);
        }
        let n = terms.len().max(1) as f64;
        per_roi.push((Tensor::stack(&terms, 0)?.sum_all()? / n)?);
    }
    if per_roi.is_empty() {
        return Tensor::zeros((), dtype, &Device::Cpu);
    }
    Tensor::stack(&per_roi, 0)?.mean_all()
}

/// Mean IoU over the nonzero classes present in either crop; 1.0 when both
/// are all background.
pub fn compute_map_miou(pred: &LabelRaster, gt: &LabelRaster) -> f64 {
    let mut inter = [0usize; 256];
    let mut union = [0usize; 256];
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        if a == b {
            inter[a as usize] += 1;
            union[a as usize] += 1;
        } else {
            union[a as usize] += 1;
            union[b as usize] += 1;
        }
    }
    let ious: Vec<f64> = (1..256).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// `theta * lovasz + gamma * (score - target)^2`, averaged over RoIs.
pub fn refinement_loss(score_pred: &Tensor, miou_target: &Tensor, lovasz: &Tensor, theta: f64, gamma: f64) -> Result<Tensor> {
    let mse = (score_pred - miou_target)?.sqr()?.mean_all()?;
    (lovasz * theta)? + (mse * gamma)?
}

/// Geometric mean of the detection confidence and the predicted mask
/// quality.
pub fn fuse_instance_score(det_score: f64, miou_score: f64) -> f64 {
    (det_score * miou_score).max(0.0).sqrt()
}

/// Predicts the mIoU of a parsing map from its (pooled, detached) logits
/// and the RoI feature: two stride-2 convolutions then three dense layers.
pub struct MiouScoreNet {
    conv1: Conv,
    conv2: Conv,
    fc1: Dense,
    fc2: Dense,
    fc3: Dense,
}

impl MiouScoreNet {
    pub fn new(ps: &ParamStore, channels: usize, k_parts: usize, roi_size: usize) -> Result<Self> {
        let ps = ps.pp("miou");
        let s2 = Conv2dParams { stride: 2, padding: 1, ..Default::default() };
        let cin = channels + k_parts;
        let side = roi_size.div_ceil(2).div_ceil(2);
        let flat = channels * side * side;
        Ok(Self {
            conv1: Conv::new(&ps, "conv1", cin, channels, 3, s2, true, Init::Kaiming { fan_in: cin * 9 })?,
            conv2: Conv::new(&ps, "conv2", channels, channels, 3, s2, true, Init::Kaiming { fan_in: channels * 9 })?,
            fc1: Dense::new(&ps, "fc1", flat, 256, Init::Kaiming { fan_in: flat })?,
            fc2: Dense::new(&ps, "fc2", 256, 64, Init::Kaiming { fan_in: 256 })?,
            fc3: Dense::new(&ps, "fc3", 64, 1, Init::Normal(0.01))?,
        })
    }

    /// (R,) scores in (0, 1) from (R, K, 2S, 2S) logits and (R, C, S, S)
    /// features.
    pub fn forward(&self, parsing_logits: &Tensor, roi_features: &Tensor) -> Result<Tensor> {
        let pooled = parsing_logits.detach().avg_pool2d(2)?;
        let x = Tensor::cat(&[&pooled, roi_features], 1)?;
        let h = self.conv2.forward(&self.conv1.forward(&x)?.relu()?)?.relu()?;
        let h = h.flatten_from(1)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.relu()?)?.relu()?;
        candle_nn::ops::sigmoid(&self.fc3.forward(&h)?)?.flatten_all()
    }
}
