//! Small from-scratch backbone and the P3..P7 feature pyramid.

use candle_core::{Module, Result, Tensor};

use crate::geometry::{level_stride, MAX_LEVEL, MIN_LEVEL, NUM_LEVELS};
use crate::nn::{group_norm, Conv, Init, ParamStore};
use crate::ops::Conv2dParams;

/// Input sides are padded up to a multiple of this (the P7 stride).
pub const SIZE_DIVISOR: usize = 128;

/// Feature maps P3..P7, each (N, C, H/2^l, W/2^l).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    /// Padded input size the level grids refer to.
    pub padded: (usize, usize),
}

impl FeaturePyramid {
    /// Map of level `level` (3..=7).
    pub fn level(&self, level: usize) -> &Tensor {
        &self.levels[level - MIN_LEVEL]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dim(1).unwrap_or(0)
    }
}

struct ConvGnRelu {
    conv: Conv,
    gn: candle_nn::GroupNorm,
}

impl ConvGnRelu {
    fn new(ps: &ParamStore, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let p = Conv2dParams { stride, padding: 1, ..Default::default() };
        Ok(Self {
            conv: Conv::new(ps, "conv", cin, cout, 3, p, false, Init::Kaiming { fan_in: cin * 9 })?,
            gn: group_norm(ps, "gn", cout, 1.0)?,
        })
    }
}

impl Module for ConvGnRelu {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.gn.forward(&self.conv.forward(x)?)?.relu()
    }
}

/// Pad (N, C, H, W) on the right and bottom to multiples of `SIZE_DIVISOR`.
pub fn pad_to_divisor(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.next_multiple_of(SIZE_DIVISOR), w.next_multiple_of(SIZE_DIVISOR));
    let x = if ph > h { x.pad_with_zeros(2, 0, ph - h)? } else { x.clone() };
    if pw > w {
        x.pad_with_zeros(3, 0, pw - w)
    } else {
        Ok(x)
    }
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?.broadcast_as((n, c, h, 2, w, 2))?.reshape((n, c, 2 * h, 2 * w))
}

pub struct BackboneFpn {
    stages: Vec<[ConvGnRelu; 2]>,
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    p6: Conv,
    p7: Conv,
}

impl BackboneFpn {
    /// `widths` are the channel counts of the five stride-2 stages; stages
    /// three to five provide C3..C5.
    pub fn new(ps: &ParamStore, widths: &[usize], channels: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let sp = ps.pp(&format!("backbone.stage{}", i + 1));
            stages.push([ConvGnRelu::new(&sp.pp("0"), cin, w, 2)?, ConvGnRelu::new(&sp.pp("1"), w, w, 1)?]);
            cin = w;
        }
        let fp = ps.pp("fpn");
        let c_widths = &widths[widths.len() - 3..];
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &w) in c_widths.iter().enumerate() {
            let l = i + 3;
            lateral.push(Conv::pointwise(&fp, &format!("lateral{l}"), w, channels, Init::Kaiming { fan_in: w })?);
            output.push(Conv::same3(&fp, &format!("output{l}"), channels, channels, Init::Kaiming { fan_in: channels * 9 })?);
        }
        let s2 = Conv2dParams { stride: 2, padding: 1, ..Default::default() };
        let init = Init::Kaiming { fan_in: channels * 9 };
        Ok(Self {
            stages,
            lateral,
            output,
            p6: Conv::new(&fp, "p6", channels, channels, 3, s2, true, init)?,
            p7: Conv::new(&fp, "p7", channels, channels, 3, s2, true, init)?,
        })
    }

    /// C3..C5 of an already padded batch.
    fn backbone(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for [a, b] in &self.stages {
            h = b.forward(&a.forward(&h)?)?;
            feats.push(h.clone());
        }
        Ok(feats.split_off(feats.len() - 3))
    }

    /// Pyramid of an (N, 3, H, W) batch; H and W are zero-padded on the
    /// right and bottom to multiples of 128 first.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let x = pad_to_divisor(images)?;
        let (_, _, ph, pw) = x.dims4()?;
        let c = self.backbone(&x)?;
        let mut inner = self.lateral[2].forward(&c[2])?;
        let mut outs = vec![self.output[2].forward(&inner)?];
        for i in (0..2).rev() {
            inner = (self.lateral[i].forward(&c[i])? + upsample2(&inner)?)?;
            outs.insert(0, self.output[i].forward(&inner)?);
        }
        let p6 = self.p6.forward(&outs[2])?;
        let p7 = self.p7.forward(&p6.relu()?)?;
        outs.push(p6);
        outs.push(p7);
        debug_assert_eq!(outs.len(), NUM_LEVELS);
        debug_assert!(outs.iter().zip(MIN_LEVEL..=MAX_LEVEL).all(|(t, l)| t.dim(2).ok() == Some(ph / level_stride(l))));
        Ok(FeaturePyramid { levels: outs, padded: (ph, pw) })
    }
}
