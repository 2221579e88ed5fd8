//! Tensor kernels that candle either lacks or runs too slowly on the CPU
//! for training: an im2col convolution with a GEMM backward pass, the
//! RoIAlign pooling operator and a fused last-axis softmax.

mod conv;
mod roi_align;
mod softmax;

pub use conv::{conv2d, Conv2dParams};
pub use roi_align::{roi_align, RoiAlignParams};
pub use softmax::softmax_last_dim;

use candle_core::{CpuStorage, Layout, Result, WithDType};

/// Borrow the contiguous data behind a storage/layout pair.
pub(crate) fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

/// Row-major `dst = lhs * rhs` (or `dst += lhs * rhs` when `accumulate`).
///
/// `lhs` is `m x k` addressed through (row stride, col stride), `rhs` is
/// `k x n` likewise; `dst` is a dense row-major `m x n` block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    assert!(dst.len() >= m * n);
    assert!(lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    assert!(rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: the asserts above bound every address gemm touches.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}
