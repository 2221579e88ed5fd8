use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};

use super::contiguous_slice;

trait Real: Copy + PartialOrd + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {
    const ZERO: Self;
    const NEG_INF: Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
}

fn forward<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(d) {
        let mut m = T::NEG_INF;
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = s.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

/// `dx = y * (dy - <dy, y>)` row by row.
fn backward<T: Real>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for ((o, yr), gr) in out.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(dy.chunks_exact(d)) {
        let mut dot = T::ZERO;
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((o, &a), &b) in o.iter_mut().zip(yr).zip(gr) {
            *o = a * (b - dot);
        }
    }
    out
}

fn last_dim(l: &Layout) -> Result<usize> {
    match l.dims().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => candle_core::bail!("softmax: empty last dimension"),
    }
}

struct Softmax;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = last_dim(l)?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(forward(contiguous_slice::<f32>(s, l)?, d)),
            CpuStorage::F64(_) => CpuStorage::F64(forward(contiguous_slice::<f64>(s, l)?, d)),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxBackward)?))
    }
}

struct SoftmaxBackward;

impl CustomOp2 for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax-last-dim-backward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = last_dim(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(backward(contiguous_slice::<f32>(s1, l1)?, contiguous_slice::<f32>(s2, l2)?, d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(backward(contiguous_slice::<f64>(s1, l1)?, contiguous_slice::<f64>(s2, l2)?, d))
            }
            _ => candle_core::bail!("softmax backward: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last dimension with a fused backward pass.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}
