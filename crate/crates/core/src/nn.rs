//! Parameter store and the small layer set the heads are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{conv2d, Conv2dParams};

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Normal(f64),
    /// He-normal over the fan-in.
    Kaiming { fan_in: usize },
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable tensors, created deterministically from a seed.
///
/// Cloning shares the underlying store; `pp` descends into a name scope.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    prefix: String,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        let inner = StoreInner { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        Self { inner: Rc::new(RefCell::new(inner)), prefix: String::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { inner: self.inner.clone(), prefix, dtype: self.dtype }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(&full) {
            candle_core::bail!("parameter {full} created twice");
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => sample_normal(&mut inner.rng, n, std),
            Init::Kaiming { fan_in } => sample_normal(&mut inner.rng, n, (2.0 / fan_in.max(1) as f64).sqrt()),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// All parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner.borrow().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.inner.borrow().vars.values().map(|v| v.elem_count()).sum()
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    params: Conv2dParams,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(ps: &ParamStore, name: &str, cin: usize, cout: usize, k: usize, params: Conv2dParams, bias: bool, init: Init) -> Result<Self> {
        let ps = ps.pp(name);
        let weight = ps.get("weight", &[cout, cin / params.groups, k, k], init)?;
        let bias = if bias { Some(ps.get("bias", &[cout], Init::Const(0.0))?) } else { None };
        Ok(Self { weight, bias, params })
    }

    pub fn with_bias_init(ps: &ParamStore, name: &str, cin: usize, cout: usize, k: usize, params: Conv2dParams, init: Init, bias: f64) -> Result<Self> {
        let ps = ps.pp(name);
        let weight = ps.get("weight", &[cout, cin / params.groups, k, k], init)?;
        let bias = Some(ps.get("bias", &[cout], Init::Const(bias))?);
        Ok(Self { weight, bias, params })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(ps: &ParamStore, name: &str, cin: usize, cout: usize, init: Init) -> Result<Self> {
        Self::new(ps, name, cin, cout, 3, Conv2dParams { padding: 1, ..Default::default() }, true, init)
    }

    pub fn pointwise(ps: &ParamStore, name: &str, cin: usize, cout: usize, init: Init) -> Result<Self> {
        Self::new(ps, name, cin, cout, 1, Conv2dParams::default(), true, init)
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.params)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Group count for `channels`: as many groups as possible with at least
/// four channels each, capped at 32.
pub fn gn_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2, 1].into_iter().find(|&g| channels % g == 0 && channels / g >= 4).unwrap_or(1)
}

pub fn group_norm(ps: &ParamStore, name: &str, channels: usize, gamma: f64) -> Result<candle_nn::GroupNorm> {
    let ps = ps.pp(name);
    let w = ps.get("weight", &[channels], Init::Const(gamma))?;
    let b = ps.get("bias", &[channels], Init::Const(0.0))?;
    candle_nn::GroupNorm::new(w, b, channels, gn_groups(channels), 1e-5)
}

/// Fully connected layer on (N, in) rows.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(ps: &ParamStore, name: &str, cin: usize, cout: usize, init: Init) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self { weight: ps.get("weight", &[cin, cout], init)?, bias: ps.get("bias", &[cout], Init::Const(0.0))? })
    }
}

impl Module for Dense {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// 2x2 stride-2 transposed convolution: every input pixel writes a
/// disjoint 2x2 output patch, so it is one matrix product and a reshuffle.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
    cout: usize,
}

impl Upsample2x {
    pub fn new(ps: &ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let ps = ps.pp(name);
        let weight = ps.get("weight", &[cin, cout * 4], Init::Kaiming { fan_in: cin })?;
        let bias = ps.get("bias", &[cout], Init::Const(0.0))?;
        Ok(Self { weight, bias, cout })
    }
}

impl Module for Upsample2x {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let rows = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((n * h * w, c))?;
        let y = rows.matmul(&self.weight)?.reshape((n, h, w, self.cout, 2, 2))?;
        let y = y.permute((0, 3, 1, 4, 2, 5))?.contiguous()?.reshape((n, self.cout, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, self.cout, 1, 1))?)
    }
}

/// Row-stochastic (out, in) matrix averaging `in` positions into `out`
/// adaptive bins.
fn pool_matrix_1d(input: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    for o in 0..out {
        let start = (o * input) / out;
        let end = ((o + 1) * input).div_ceil(out);
        for i in start..end {
            m[o * input + i] = 1.0 / (end - start) as f64;
        }
    }
    m
}

/// (S*S, m*m) matrix `A` with `x.flatten(2) @ A` = adaptive average pooling
/// of an S x S map to m x m.
pub fn adaptive_pool_matrix(size: usize, out: usize, dtype: DType) -> Result<Tensor> {
    let p = pool_matrix_1d(size, out);
    let mut a = vec![0.0; size * size * out * out];
    for (oy, ox) in (0..out).flat_map(|oy| (0..out).map(move |ox| (oy, ox))) {
        for (iy, ix) in (0..size).flat_map(|iy| (0..size).map(move |ix| (iy, ix))) {
            let wgt = p[oy * size + iy] * p[ox * size + ix];
            if wgt != 0.0 {
                a[(iy * size + ix) * out * out + oy * out + ox] = wgt;
            }
        }
    }
    Tensor::from_vec(a, (size * size, out * out), &Device::Cpu)?.to_dtype(dtype)
}

/// (m*m, S*S) 0/1 matrix performing nearest upsampling of an m x m map to
/// S x S (source index `floor(i * m / S)`).
pub fn nearest_upsample_matrix(small: usize, size: usize, dtype: DType) -> Result<Tensor> {
    let mut a = vec![0.0; small * small * size * size];
    for iy in 0..size {
        let sy = iy * small / size;
        for ix in 0..size {
            let sx = ix * small / size;
            a[(sy * small + sx) * size * size + iy * size + ix] = 1.0;
        }
    }
    Tensor::from_vec(a, (small * small, size * size), &Device::Cpu)?.to_dtype(dtype)
}

/// Apply a (h*w, p) spatial matrix to the trailing two dims of (N, C, h, w).
pub fn spatial_matmul(x: &Tensor, m: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n * c, h * w))?.matmul(m)?.reshape((n, c, out_hw.0, out_hw.1))
}
