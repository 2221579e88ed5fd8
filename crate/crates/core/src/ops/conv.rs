use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType};

use super::{contiguous_slice, gemm_into};

/// Geometry of a 2-D convolution. Kernel size is taken from the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        let [n, c_in, h, w] = match input {
            &[a, b, c, d] => [a, b, c, d],
            _ => candle_core::bail!("conv2d input must be rank 4, got {input:?}"),
        };
        let [c_out, cg, kh, kw] = match weight {
            &[a, b, c, d] => [a, b, c, d],
            _ => candle_core::bail!("conv2d weight must be rank 4, got {weight:?}"),
        };
        let groups = p.groups.max(1);
        if c_in % groups != 0 || c_out % groups != 0 || cg * groups != c_in {
            candle_core::bail!(
                "conv2d channel mismatch: input {c_in}, weight {weight:?}, groups {groups}"
            );
        }
        let dil = p.dilation.max(1);
        let (ekh, ekw) = (dil * (kh - 1) + 1, dil * (kw - 1) + 1);
        if p.stride == 0 || h + 2 * p.padding < ekh || w + 2 * p.padding < ekw {
            candle_core::bail!("conv2d kernel {kh}x{kw} does not fit input {h}x{w}");
        }
        let ho = (h + 2 * p.padding - ekh) / p.stride + 1;
        let wo = (w + 2 * p.padding - ekw) / p.stride + 1;
        Ok(Self { n, c_in, h, w, c_out, kh, kw, ho, wo, stride: p.stride, pad: p.padding, dil, groups })
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the column matrix for one group.
    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input offset of kernel tap `k` relative to `o * stride`.
    fn tap(&self, k: usize) -> isize {
        (k * self.dil) as isize - self.pad as isize
    }

    /// Output positions `o` whose input position `o*s + tap(k)` is in bounds.
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = self.tap(k);
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size-1
        let hi_num = size as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { (hi_num / s).min(out as isize - 1) };
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Fill `cols` (k x hw_out) from the group's input block (cg x h x w).
    fn im2col<T: WithDType>(&self, x: &[T], cols: &mut [T]) {
        let hw_out = self.hw_out();
        for c in 0..self.cg() {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.ho, self.h);
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    let (ox0, ox1) = self.valid_range(kx, self.wo, self.w);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride) as isize + self.tap(ky);
                        let iy = iy as usize;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let ix0 = (ox0 as isize + self.tap(kx)) as usize;
                            d[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                d[ox] = src[((ox * self.stride) as isize + self.tap(kx)) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back into the group's input-gradient block.
    fn col2im<T: WithDType>(&self, cols: &[T], dx: &mut [T]) {
        let hw_out = self.hw_out();
        for c in 0..self.cg() {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.ho, self.h);
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    let (ox0, ox1) = self.valid_range(kx, self.wo, self.w);
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride) as isize + self.tap(ky);
                        let iy = iy as usize;
                        let s = &src[oy * self.wo..(oy + 1) * self.wo];
                        let d = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in ox0..ox1 {
                            d[((ox * self.stride) as isize + self.tap(kx)) as usize] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dForward(Conv2dParams);

impl Conv2dForward {
    fn run<T: WithDType>(&self, x: &[T], w: &[T], g: Geometry) -> Vec<T> {
        let (k, hw_out, og, cg) = (g.k(), g.hw_out(), g.og(), g.cg());
        let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw_out] };
        for b in 0..g.n {
            for grp in 0..g.groups {
                let xin = &x[(b * g.c_in + grp * cg) * g.h * g.w..(b * g.c_in + (grp + 1) * cg) * g.h * g.w];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xin
                } else {
                    g.im2col(xin, &mut cols);
                    &cols
                };
                let wg = &w[grp * og * k..(grp + 1) * og * k];
                let dst = &mut out[(b * g.c_out + grp * og) * hw_out..(b * g.c_out + (grp + 1) * og) * hw_out];
                gemm_into(og, hw_out, k, dst, wg, k, 1, cols_ref, hw_out, 1, false);
            }
        }
        out
    }
}

impl CustomOp2 for Conv2dForward {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.0)?;
        let shape = Shape::from((g.n, g.c_out, g.ho, g.wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            _ => candle_core::bail!("conv2d supports matching f32/f64 operands only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            weight,
            &Conv2dGradInput { params: self.0, input_dims: arg.dims().to_vec() },
        )?;
        let dw = arg.apply_op2_no_bwd(
            &grad,
            &Conv2dGradWeight { params: self.0, weight_dims: weight.dims().to_vec() },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

struct Conv2dGradInput {
    params: Conv2dParams,
    input_dims: Vec<usize>,
}

impl Conv2dGradInput {
    fn run<T: WithDType>(&self, dy: &[T], w: &[T], g: Geometry) -> Vec<T> {
        let (k, hw_out, og, cg) = (g.k(), g.hw_out(), g.og(), g.cg());
        let mut dx = vec![T::zero(); g.n * g.c_in * g.h * g.w];
        let mut cols = vec![T::zero(); k * hw_out];
        for b in 0..g.n {
            for grp in 0..g.groups {
                let wg = &w[grp * og * k..(grp + 1) * og * k];
                let dyg = &dy[(b * g.c_out + grp * og) * hw_out..(b * g.c_out + (grp + 1) * og) * hw_out];
                let dxg = &mut dx[(b * g.c_in + grp * cg) * g.h * g.w..(b * g.c_in + (grp + 1) * cg) * g.h * g.w];
                if g.is_pointwise() {
                    gemm_into(k, hw_out, og, dxg, wg, 1, k, dyg, hw_out, 1, false);
                } else {
                    gemm_into(k, hw_out, og, &mut cols, wg, 1, k, dyg, hw_out, 1, false);
                    g.col2im(&cols, dxg);
                }
            }
        }
        dx
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.input_dims, l2.dims(), self.params)?;
        if l1.dims() != [g.n, g.c_out, g.ho, g.wo] {
            candle_core::bail!("conv2d grad shape {:?} does not match output geometry", l1.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            _ => candle_core::bail!("conv2d supports matching f32/f64 operands only"),
        };
        Ok((out, Shape::from(self.input_dims.clone())))
    }
}

struct Conv2dGradWeight {
    params: Conv2dParams,
    weight_dims: Vec<usize>,
}

impl Conv2dGradWeight {
    fn run<T: WithDType>(&self, x: &[T], dy: &[T], g: Geometry) -> Vec<T> {
        let (k, hw_out, og, cg) = (g.k(), g.hw_out(), g.og(), g.cg());
        let mut dw = vec![T::zero(); g.c_out * k];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw_out] };
        for b in 0..g.n {
            for grp in 0..g.groups {
                let xin = &x[(b * g.c_in + grp * cg) * g.h * g.w..(b * g.c_in + (grp + 1) * cg) * g.h * g.w];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xin
                } else {
                    g.im2col(xin, &mut cols);
                    &cols
                };
                let dyg = &dy[(b * g.c_out + grp * og) * hw_out..(b * g.c_out + (grp + 1) * og) * hw_out];
                let dwg = &mut dw[grp * og * k..(grp + 1) * og * k];
                gemm_into(og, k, hw_out, dwg, dyg, hw_out, 1, cols_ref, 1, hw_out, true);
            }
        }
        dw
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), &self.weight_dims, self.params)?;
        if l2.dims() != [g.n, g.c_out, g.ho, g.wo] {
            candle_core::bail!("conv2d grad shape {:?} does not match output geometry", l2.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(self.run(contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?, g))
            }
            _ => candle_core::bail!("conv2d supports matching f32/f64 operands only"),
        };
        Ok((out, Shape::from(self.weight_dims.clone())))
    }
}

/// 2-D cross-correlation of `input` (N, C, H, W) with `weight`
/// (C_out, C/groups, kh, kw), differentiable in both arguments.
pub fn conv2d(input: &Tensor, weight: &Tensor, params: Conv2dParams) -> Result<Tensor> {
    if input.dtype() != weight.dtype() || !matches!(input.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("conv2d: unsupported dtypes {:?}/{:?}", input.dtype(), weight.dtype());
    }
    input.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dForward(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn reference(x: &Tensor, w: &Tensor, p: Conv2dParams) -> Tensor {
        x.conv2d(w, p.padding, p.stride, p.dilation, p.groups).unwrap()
    }

    #[test]
    fn matches_candle_forward() {
        let dev = Device::Cpu;
        for &(c, co, k, s, pad, groups, h, dilation) in &[
            (3, 8, 3, 1, 1, 1, 9, 1),
            (4, 6, 3, 2, 1, 2, 10, 1),
            (5, 5, 3, 2, 1, 5, 7, 1),
            (6, 4, 1, 1, 0, 1, 5, 1),
            (2, 3, 2, 2, 0, 1, 8, 1),
            (3, 4, 3, 1, 2, 1, 9, 2),
            (4, 4, 3, 1, 1, 1, 1, 1),
            (4, 4, 3, 2, 1, 1, 2, 1),
        ] {
            let x = Tensor::randn(0f64, 1., (2, c, h, h + 1), &dev).unwrap();
            let w = Tensor::randn(0f64, 1., (co, c / groups, k, k), &dev).unwrap();
            let p = Conv2dParams { stride: s, padding: pad, dilation, groups };
            let ours = conv2d(&x, &w, p).unwrap();
            let theirs = reference(&x, &w, p);
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10, "diff {diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dev = Device::Cpu;
        for &(c, co, k, s, pad, groups, dilation) in &[(3, 4, 3, 1, 1, 1, 1), (4, 4, 3, 2, 1, 4, 1), (4, 2, 1, 1, 0, 1, 1), (4, 6, 3, 2, 1, 2, 1), (2, 3, 3, 1, 2, 1, 2)] {
            let x = Var::randn(0f64, 1., (2, c, 6, 7), &dev).unwrap();
            let w = Var::randn(0f64, 1., (co, c / groups, k, k), &dev).unwrap();
            let p = Conv2dParams { stride: s, padding: pad, dilation, groups };
            let probe = Tensor::randn(0f64, 1., conv2d(&x, &w, p).unwrap().dims(), &dev).unwrap();
            let f = |x: &Tensor, w: &Tensor| -> f64 {
                (conv2d(x, w, p).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let grads = (conv2d(&x, &w, p).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for (which, v) in [(0, &x), (1, &w)] {
                let g = grads.get(v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for idx in (0..base.len()).step_by(7) {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus[idx] += 1e-5;
                    minus[idx] -= 1e-5;
                    let tp = Tensor::from_vec(plus, v.dims(), &dev).unwrap();
                    let tm = Tensor::from_vec(minus, v.dims(), &dev).unwrap();
                    let fd = if which == 0 {
                        (f(&tp, &w) - f(&tm, &w)) / 2e-5
                    } else {
                        (f(&x, &tp) - f(&x, &tm)) / 2e-5
                    };
                    assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "fd {fd} vs {}", g[idx]);
                }
            }
        }
    }
}
