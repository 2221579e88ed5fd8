use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType};

use super::contiguous_slice;

/// RoIAlign configuration.
///
/// Boxes are given in image pixels and mapped to the feature grid by
/// `u = x * spatial_scale - 0.5`, so feature cell `j` sits at the image
/// location `(j + 0.5) / spatial_scale`. No coordinate is rounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignParams {
    pub out_size: usize,
    pub spatial_scale: f64,
    /// Samples per output cell along each axis (2 gives 4 samples per cell).
    pub sampling_ratio: usize,
}

impl RoiAlignParams {
    pub fn new(out_size: usize, stride: usize) -> Self {
        Self { out_size, spatial_scale: 1.0 / stride as f64, sampling_ratio: 2 }
    }
}

/// One bilinear tap: flat index into a (H, W) plane and its weight.
type Tap = (usize, f64);

/// Bilinear taps of a zero-padded plane at feature coordinates (u, v).
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize, taps: &mut Vec<Tap>) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let wgt = wy * wx;
            if wgt != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                taps.push((yy as usize * w + xx as usize, wgt));
            }
        }
    }
}

/// Sample weights of every output cell of one RoI, flattened as
/// `(cell, plane index, weight)`. Shared by the forward and backward passes.
fn roi_taps(p: &RoiAlignParams, roi: [f64; 4], h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let s = p.out_size;
    let n = p.sampling_ratio.max(1);
    let u0 = roi[0] * p.spatial_scale - 0.5;
    let v0 = roi[1] * p.spatial_scale - 0.5;
    let bin_w = (roi[2] - roi[0]) * p.spatial_scale / s as f64;
    let bin_h = (roi[3] - roi[1]) * p.spatial_scale / s as f64;
    let norm = 1.0 / (n * n) as f64;
    let mut out = Vec::with_capacity(s * s * n * n * 4);
    let mut taps = Vec::with_capacity(4);
    for oy in 0..s {
        for ox in 0..s {
            let cell = oy * s + ox;
            for iy in 0..n {
                let v = v0 + (oy as f64 + (iy as f64 + 0.5) / n as f64) * bin_h;
                for ix in 0..n {
                    let u = u0 + (ox as f64 + (ix as f64 + 0.5) / n as f64) * bin_w;
                    taps.clear();
                    bilinear_taps(u, v, h, w, &mut taps);
                    out.extend(taps.iter().map(|&(idx, wgt)| (cell, idx, wgt * norm)));
                }
            }
        }
    }
    out
}

fn read_rois(rois: &[f64], r: usize) -> Vec<(usize, [f64; 4])> {
    (0..r)
        .map(|i| {
            let row = &rois[i * 5..i * 5 + 5];
            (row[0] as usize, [row[1], row[2], row[3], row[4]])
        })
        .collect()
}

fn rois_as_f64(s: &CpuStorage, l: &Layout) -> Result<Vec<f64>> {
    Ok(match s {
        CpuStorage::F32(_) => contiguous_slice::<f32>(s, l)?.iter().map(|&v| v as f64).collect(),
        CpuStorage::F64(_) => contiguous_slice::<f64>(s, l)?.to_vec(),
        _ => candle_core::bail!("roi_align: rois must be f32 or f64"),
    })
}

struct RoiAlignForward(RoiAlignParams);

impl RoiAlignForward {
    fn run<T: WithDType>(&self, feat: &[T], dims: [usize; 4], rois: &[(usize, [f64; 4])]) -> Result<Vec<T>> {
        let [n, c, h, w] = dims;
        let s = self.0.out_size;
        let mut out = vec![T::zero(); rois.len() * c * s * s];
        for (r, &(b, bx)) in rois.iter().enumerate() {
            if b >= n {
                candle_core::bail!("roi_align: batch index {b} out of range for {n} images");
            }
            let taps = roi_taps(&self.0, bx, h, w);
            for ch in 0..c {
                let plane = &feat[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = &mut out[(r * c + ch) * s * s..(r * c + ch + 1) * s * s];
                for &(cell, idx, wgt) in &taps {
                    dst[cell] += plane[idx] * T::from_f64(wgt);
                }
            }
        }
        Ok(out)
    }
}

impl CustomOp2 for RoiAlignForward {
    fn name(&self) -> &'static str {
        "roi-align"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims: [usize; 4] = l1.dims().try_into().map_err(|_| candle_core::Error::Msg("roi_align: features must be rank 4".into()))?;
        let (r, five) = l2.shape().dims2()?;
        if five != 5 {
            candle_core::bail!("roi_align: rois must be (R, 5), got {:?}", l2.dims());
        }
        let rois = read_rois(&rois_as_f64(s2, l2)?, r);
        let s = self.0.out_size;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.run(contiguous_slice(s1, l1)?, dims, &rois)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.run(contiguous_slice(s1, l1)?, dims, &rois)?),
            _ => candle_core::bail!("roi_align: features must be f32 or f64"),
        };
        Ok((out, Shape::from((r, dims[1], s, s))))
    }

    fn bwd(&self, feat: &Tensor, rois: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let dfeat = grad.contiguous()?.apply_op2_no_bwd(
            rois,
            &RoiAlignBackward { params: self.0, feature_dims: feat.dims().to_vec() },
        )?;
        Ok((Some(dfeat), None))
    }
}

struct RoiAlignBackward {
    params: RoiAlignParams,
    feature_dims: Vec<usize>,
}

impl RoiAlignBackward {
    fn run<T: WithDType>(&self, grad: &[T], rois: &[(usize, [f64; 4])]) -> Vec<T> {
        let (n, c, h, w) = (self.feature_dims[0], self.feature_dims[1], self.feature_dims[2], self.feature_dims[3]);
        let s = self.params.out_size;
        let mut df = vec![T::zero(); n * c * h * w];
        for (r, &(b, bx)) in rois.iter().enumerate() {
            let taps = roi_taps(&self.params, bx, h, w);
            for ch in 0..c {
                let g = &grad[(r * c + ch) * s * s..(r * c + ch + 1) * s * s];
                let plane = &mut df[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for &(cell, idx, wgt) in &taps {
                    plane[idx] += g[cell] * T::from_f64(wgt);
                }
            }
        }
        df
    }
}

impl CustomOp2 for RoiAlignBackward {
    fn name(&self) -> &'static str {
        "roi-align-backward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (r, _) = l2.shape().dims2()?;
        let rois = read_rois(&rois_as_f64(s2, l2)?, r);
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.run(contiguous_slice(s1, l1)?, &rois)),
            CpuStorage::F64(_) => CpuStorage::F64(self.run(contiguous_slice(s1, l1)?, &rois)),
            _ => candle_core::bail!("roi_align: gradient must be f32 or f64"),
        };
        Ok((out, Shape::from(self.feature_dims.clone())))
    }
}

/// Pool `features` (N, C, H, W) inside each RoI of `rois` (R, 5) laid out as
/// `[batch_index, x0, y0, x1, y1]`, producing (R, C, S, S). Differentiable
/// with respect to the features.
pub fn roi_align(features: &Tensor, rois: &Tensor, params: RoiAlignParams) -> Result<Tensor> {
    if !matches!(features.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("roi_align: unsupported dtype {:?}", features.dtype());
    }
    let rois = rois.detach().contiguous()?;
    if rois.dim(0)? == 0 {
        let (_, c, _, _) = features.dims4()?;
        return Tensor::zeros((0, c, params.out_size, params.out_size), features.dtype(), features.device());
    }
    features.contiguous()?.apply_op2(&rois, RoiAlignForward(params))
}
