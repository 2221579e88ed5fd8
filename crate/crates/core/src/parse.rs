//! Per-instance parsing head: context encoding, shared prediction trunk,
//! parsing and edge branches and their losses.

use candle_core::{Device, Module, Result, Tensor};

use crate::config::{ContextModule, EdgeReduction};
use crate::detect::softplus;
use crate::nn::{adaptive_pool_matrix, group_norm, nearest_upsample_matrix, spatial_matmul, Conv, Init, ParamStore, Upsample2x};
use crate::ops::{softmax_last_dim, Conv2dParams};
use crate::raster::{EdgeRaster, LabelRaster};

/// Gather extents of the local units; the global unit follows them.
pub const PGEC_EXTENTS: [usize; 3] = [4, 8, 16];
/// Serial stride-2 depth-wise convolutions of the global unit.
pub const GLOBAL_GATHER_LAYERS: usize = 5;

fn depthwise(ps: &ParamStore, name: &str, channels: usize, stride: usize) -> Result<Conv> {
    let p = Conv2dParams { stride, padding: 1, groups: channels, ..Default::default() };
    Conv::new(ps, name, channels, channels, 3, p, true, Init::Kaiming { fan_in: 9 })
}

struct LocalUnit {
    pool: Tensor,
    up: Tensor,
    cells: usize,
    transform: Conv,
}

/// Multi-extent gather-excite context: a 3x3 branch plus sigmoid-gated
/// copies of the input, one per extent and one global.
pub struct Pgec {
    size: usize,
    conv: Conv,
    gn: candle_nn::GroupNorm,
    local: Vec<LocalUnit>,
    global: Vec<Conv>,
}

impl Pgec {
    pub fn new(ps: &ParamStore, channels: usize, size: usize) -> Result<Self> {
        let ps = ps.pp("pgec");
        let dtype = ps.dtype();
        let local = PGEC_EXTENTS
            .iter()
            .map(|&e| {
                let cells = size.div_ceil(e);
                Ok(LocalUnit {
                    pool: adaptive_pool_matrix(size, cells, dtype)?,
                    up: nearest_upsample_matrix(cells, size, dtype)?,
                    cells,
                    transform: depthwise(&ps, &format!("transform{e}"), channels, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global = (0..GLOBAL_GATHER_LAYERS)
            .map(|i| depthwise(&ps, &format!("global{i}"), channels, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            size,
            conv: Conv::same3(&ps, "conv", channels, channels, Init::Kaiming { fan_in: channels * 9 })?,
            gn: group_norm(&ps, "gn", channels, 1.0)?,
            local,
            global,
        })
    }

    /// Sigmoid gate pre-activations of every unit, local units first, each
    /// broadcastable against the input.
    pub fn gate_logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.local.len() + 1);
        for u in &self.local {
            let g = spatial_matmul(x, &u.pool, (u.cells, u.cells))?;
            let t = u.transform.forward(&g)?;
            out.push(spatial_matmul(&t, &u.up, (self.size, self.size))?);
        }
        let mut g = x.clone();
        for (i, conv) in self.global.iter().enumerate() {
            g = conv.forward(&g)?;
            if i + 1 < self.global.len() {
                g = g.relu()?;
            }
        }
        out.push(g.mean_keepdim(2)?.mean_keepdim(3)?);
        Ok(out)
    }

    pub fn branch(&self, x: &Tensor) -> Result<Tensor> {
        self.gn.forward(&self.conv.forward(x)?)?.relu()
    }
}

impl Module for Pgec {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.branch(x)?;
        for logits in self.gate_logits(x)? {
            out = (out + x.broadcast_mul(&candle_nn::ops::sigmoid(&logits)?)?)?;
        }
        Ok(out)
    }
}

/// Pyramid pooling alternative (bins 1, 2, 3, 6).
pub struct Psp {
    stages: Vec<(Tensor, Tensor, usize, Conv)>,
    size: usize,
    fuse: Conv,
    gn: candle_nn::GroupNorm,
}

impl Psp {
    pub fn new(ps: &ParamStore, channels: usize, size: usize) -> Result<Self> {
        let ps = ps.pp("psp");
        let dtype = ps.dtype();
        let red = channels / 4;
        let stages = [1, 2, 3, 6]
            .iter()
            .map(|&b| {
                let conv = Conv::pointwise(&ps, &format!("bin{b}"), channels, red, Init::Kaiming { fan_in: channels })?;
                Ok((adaptive_pool_matrix(size, b, dtype)?, nearest_upsample_matrix(b, size, dtype)?, b, conv))
            })
            .collect::<Result<Vec<_>>>()?;
        let cin = channels + 4 * red;
        Ok(Self {
            stages,
            size,
            fuse: Conv::same3(&ps, "fuse", cin, channels, Init::Kaiming { fan_in: cin * 9 })?,
            gn: group_norm(&ps, "gn", channels, 1.0)?,
        })
    }
}

impl Module for Psp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = vec![x.clone()];
        for (pool, up, b, conv) in &self.stages {
            let p = conv.forward(&spatial_matmul(x, pool, (*b, *b))?)?.relu()?;
            parts.push(spatial_matmul(&p, up, (self.size, self.size))?);
        }
        self.gn.forward(&self.fuse.forward(&Tensor::cat(&parts, 1)?)?)?.relu()
    }
}

/// Atrous pyramid alternative: 1x1, dilated 3x3 (rates 2, 4, 6) and an
/// image-level branch.
pub struct Aspp {
    branches: Vec<Conv>,
    image: Conv,
    fuse: Conv,
    gn: candle_nn::GroupNorm,
}

impl Aspp {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let ps = ps.pp("aspp");
        let red = channels / 4;
        let mut branches = vec![Conv::pointwise(&ps, "rate1", channels, red, Init::Kaiming { fan_in: channels })?];
        for rate in [2, 4, 6] {
            let p = Conv2dParams { padding: rate, dilation: rate, ..Default::default() };
            branches.push(Conv::new(&ps, &format!("rate{rate}"), channels, red, 3, p, true, Init::Kaiming { fan_in: channels * 9 })?);
        }
        let cin = 5 * red;
        Ok(Self {
            branches,
            image: Conv::pointwise(&ps, "image", channels, red, Init::Kaiming { fan_in: channels })?,
            fuse: Conv::pointwise(&ps, "fuse", cin, channels, Init::Kaiming { fan_in: cin })?,
            gn: group_norm(&ps, "gn", channels, 1.0)?,
        })
    }
}

impl Module for Aspp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = self.branches.iter().map(|b| b.forward(x)?.relu()).collect::<Result<Vec<_>>>()?;
        let g = self.image.forward(&x.mean_keepdim(2)?.mean_keepdim(3)?)?.relu()?;
        parts.push(g.broadcast_as(parts[0].shape())?.contiguous()?);
        self.gn.forward(&self.fuse.forward(&Tensor::cat(&parts, 1)?)?)?.relu()
    }
}

/// Embedded-Gaussian self-attention over all positions with a
/// group-normalised residual projection (zero-initialised scale).
pub struct NonLocal {
    theta: Conv,
    phi: Conv,
    g: Conv,
    proj: Conv,
    gn: candle_nn::GroupNorm,
}

impl NonLocal {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let ps = ps.pp("nonlocal");
        let inner = channels / 2;
        let init = Init::Normal(0.01);
        Ok(Self {
            theta: Conv::pointwise(&ps, "theta", channels, inner, init)?,
            phi: Conv::pointwise(&ps, "phi", channels, inner, init)?,
            g: Conv::pointwise(&ps, "g", channels, inner, init)?,
            proj: Conv::pointwise(&ps, "proj", inner, channels, Init::Kaiming { fan_in: inner })?,
            gn: group_norm(&ps, "gn", channels, 0.0)?,
        })
    }

    /// (N, HW, HW) attention weights; row `i` is a distribution over the
    /// positions attended to by position `i`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let theta = self.theta.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let phi = self.phi.forward(x)?.flatten_from(2)?.contiguous()?;
        softmax_last_dim(&theta.matmul(&phi)?)
    }
}

impl Module for NonLocal {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let att = self.attention(x)?;
        let g = self.g.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let y = att.matmul(&g)?.transpose(1, 2)?.contiguous()?;
        let y = y.reshape((n, y.dim(1)?, h, w))?;
        x + self.gn.forward(&self.proj.forward(&y)?)?
    }
}

pub enum Context {
    Pgec(Pgec),
    Psp(Psp),
    Aspp(Aspp),
    None,
}

impl Context {
    pub fn new(ps: &ParamStore, kind: ContextModule, channels: usize, size: usize) -> Result<Self> {
        Ok(match kind {
            ContextModule::Pgec => Self::Pgec(Pgec::new(ps, channels, size)?),
            ContextModule::Psp => Self::Psp(Psp::new(ps, channels, size)?),
            ContextModule::Aspp => Self::Aspp(Aspp::new(ps, channels)?),
            ContextModule::None => Self::None,
        })
    }
}

impl Module for Context {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Pgec(m) => m.forward(x),
            Self::Psp(m) => m.forward(x),
            Self::Aspp(m) => m.forward(x),
            Self::None => Ok(x.clone()),
        }
    }
}

/// Parsing and edge logits at twice the RoI resolution.
#[derive(Debug, Clone)]
pub struct RoiPrediction {
    pub parsing_logits: Tensor,
    pub edge_logits: Option<Tensor>,
}

struct Branch {
    up: Upsample2x,
    out: Conv,
}

impl Branch {
    fn new(ps: &ParamStore, channels: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            up: Upsample2x::new(ps, "up", channels, channels)?,
            out: Conv::pointwise(ps, "out", channels, classes, Init::Normal(0.01))?,
        })
    }
}

impl Module for Branch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Four shared 3x3 convolutions, the last optionally group-normalised,
/// feeding sibling parsing and edge branches.
pub struct PredictionHead {
    convs: Vec<Conv>,
    gn: Option<candle_nn::GroupNorm>,
    parsing: Branch,
    edge: Option<Branch>,
}

impl PredictionHead {
    pub fn new(ps: &ParamStore, channels: usize, k_parts: usize, use_gn: bool, use_edge: bool) -> Result<Self> {
        let ps = ps.pp("predict");
        let convs = (0..4)
            .map(|i| Conv::same3(&ps, &format!("conv{i}"), channels, channels, Init::Kaiming { fan_in: channels * 9 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            gn: if use_gn { Some(group_norm(&ps, "gn", channels, 1.0)?) } else { None },
            parsing: Branch::new(&ps.pp("parsing"), channels, k_parts)?,
            edge: if use_edge { Some(Branch::new(&ps.pp("edge"), channels, 1)?) } else { None },
        })
    }

    pub fn has_edge_branch(&self) -> bool {
        self.edge.is_some()
    }

    pub fn forward(&self, x: &Tensor) -> Result<RoiPrediction> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 == self.convs.len() {
                if let Some(gn) = &self.gn {
                    h = gn.forward(&h)?;
                }
            }
            h = h.relu()?;
        }
        Ok(RoiPrediction {
            parsing_logits: self.parsing.forward(&h)?,
            edge_logits: self.edge.as_ref().map(|e| e.forward(&h)).transpose()?,
        })
    }
}

/// RoI features through context encoding, attention and prediction.
pub struct ParseHead {
    pub context: Context,
    pub nonlocal: Option<NonLocal>,
    pub prediction: PredictionHead,
}

impl ParseHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &ParamStore,
        channels: usize,
        roi_size: usize,
        k_parts: usize,
        context: ContextModule,
        use_nonlocal: bool,
        use_gn: bool,
        use_edge: bool,
    ) -> Result<Self> {
        let ps = ps.pp("parse");
        Ok(Self {
            context: Context::new(&ps, context, channels, roi_size)?,
            nonlocal: if use_nonlocal { Some(NonLocal::new(&ps, channels)?) } else { None },
            prediction: PredictionHead::new(&ps, channels, k_parts, use_gn, use_edge)?,
        })
    }

    /// Encoded features (input to the prediction trunk) and the prediction.
    pub fn forward(&self, roi_features: &Tensor) -> Result<(Tensor, RoiPrediction)> {
        let mut h = self.context.forward(roi_features)?;
        if let Some(nl) = &self.nonlocal {
            h = nl.forward(&h)?;
        }
        let pred = self.prediction.forward(&h)?;
        Ok((h, pred))
    }
}

/// Weights of the two edge terms: `w0 = |Y+|/|Y|` scales the non-edge
/// pixels and `w1 = |Y-|/|Y|` the edge pixels.
pub fn edge_weights(edges: &EdgeRaster) -> (f64, f64) {
    let n = edges.data().len() as f64;
    let pos = edges.edge_count() as f64;
    (pos / n, (n - pos) / n)
}

#[derive(Debug, Clone)]
pub struct PredictionLosses {
    pub parsing: Tensor,
    pub edge: Tensor,
    pub total: Tensor,
}

/// Mean pixel cross-entropy of (R, K, H, W) logits against label crops.
pub fn parsing_loss(logits: &Tensor, gt: &[LabelRaster]) -> Result<Tensor> {
    let (r, k, h, w) = logits.dims4()?;
    let mut onehot = vec![0f32; r * k * h * w];
    for (i, g) in gt.iter().enumerate() {
        for (p, &label) in g.data().iter().enumerate() {
            onehot[(i * k + label as usize) * h * w + p] = 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, (r, k, h, w), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    ((onehot * logp)?.sum_all()? / -((r * h * w) as f64))?.to_dtype(logits.dtype())
}

/// Weighted edge cross-entropy of (R, 1, H, W) logits, averaged over RoIs.
pub fn edge_loss(logits: &Tensor, gt: &[EdgeRaster], reduction: EdgeReduction) -> Result<Tensor> {
    let (r, _, h, w) = logits.dims4()?;
    let mut pos_w = vec![0f64; r * h * w];
    let mut neg_w = vec![0f64; r * h * w];
    for (i, e) in gt.iter().enumerate() {
        let (w0, w1) = edge_weights(e);
        let norm = match reduction {
            EdgeReduction::Sum => 1.0,
            EdgeReduction::Mean => 1.0 / (h * w) as f64,
        };
        for (p, &v) in e.data().iter().enumerate() {
            if v != 0 {
                pos_w[i * h * w + p] = w1 * norm;
            } else {
                neg_w[i * h * w + p] = w0 * norm;
            }
        }
    }
    let dt = logits.dtype();
    let pos_w = Tensor::from_vec(pos_w, logits.shape(), &Device::Cpu)?.to_dtype(dt)?;
    let neg_w = Tensor::from_vec(neg_w, logits.shape(), &Device::Cpu)?.to_dtype(dt)?;
    let per = ((pos_w * softplus(&logits.neg()?)?)? + (neg_w * softplus(logits)?)?)?;
    per.sum_all()? / r.max(1) as f64
}

/// `alpha * L_parsing + beta * L_edge`; the edge term is zero without an
/// edge branch.
pub fn prediction_loss(
    pred: &RoiPrediction,
    gt_parsing: &[LabelRaster],
    gt_edges: &[EdgeRaster],
    alpha: f64,
    beta: f64,
    reduction: EdgeReduction,
) -> Result<PredictionLosses> {
    let parsing = parsing_loss(&pred.parsing_logits, gt_parsing)?;
    let edge = match &pred.edge_logits {
        Some(e) => edge_loss(e, gt_edges, reduction)?,
        None => Tensor::zeros((), pred.parsing_logits.dtype(), pred.parsing_logits.device())?,
    };
    let total = ((&parsing * alpha)? + (&edge * beta)?)?;
    Ok(PredictionLosses { parsing, edge, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::extract_edge_labels;
    use candle_core::{DType, Var};

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1., shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn pgec_preserves_shape() {
        for size in [14, 32, 48] {
            let ps = ParamStore::new(0, DType::F64);
            let m = Pgec::new(&ps, 8, size).unwrap();
            let x = randn(&[2, 8, size, size]);
            assert_eq!(m.forward(&x).unwrap().dims(), x.dims());
        }
    }

    #[test]
    fn pgec_saturated_gates_leave_the_branch() {
        let ps = ParamStore::new(0, DType::F64);
        let m = Pgec::new(&ps, 8, 32).unwrap();
        for (name, var) in ps.vars() {
            let last_global = format!("pgec.global{}.bias", GLOBAL_GATHER_LAYERS - 1);
            if name.ends_with(&last_global) || (name.contains("transform") && name.ends_with("bias")) {
                var.set(&Tensor::full(-1e3, var.dims(), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let x = randn(&[1, 8, 32, 32]);
        let diff = (m.forward(&x).unwrap() - m.branch(&x).unwrap()).unwrap();
        assert!(max_abs(&diff) < 1e-12);
    }

    fn finite_difference_check(f: impl Fn(&Tensor) -> Tensor, x: &Var, samples: usize) {
        let g = f(x.as_tensor()).sum_all().unwrap().backward().unwrap();
        let g = g.get(x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let step = base.len() / samples.max(1);
        for idx in (0..base.len()).step_by(step.max(1)) {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let t = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
                f(&t).sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - g[idx]).abs() < 1e-9, "index {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn pgec_input_gradient() {
        let ps = ParamStore::new(1, DType::F64);
        let m = Pgec::new(&ps, 4, 14).unwrap();
        let probe = randn(&[1, 4, 14, 14]);
        let x = Var::from_tensor(&randn(&[1, 4, 14, 14])).unwrap();
        finite_difference_check(|t| (m.forward(t).unwrap() * &probe).unwrap(), &x, 40);
    }

    #[test]
    fn nonlocal_starts_as_identity() {
        let ps = ParamStore::new(2, DType::F64);
        let m = NonLocal::new(&ps, 8).unwrap();
        let x = randn(&[2, 8, 5, 5]);
        let y = m.forward(&x).unwrap();
        assert_eq!(max_abs(&(y - &x).unwrap()), 0.0);
        let rows = m.attention(&x).unwrap().sum(2).unwrap();
        assert!(max_abs(&(rows - 1.0).unwrap()) < 1e-12);
    }

    #[test]
    fn nonlocal_is_permutation_equivariant() {
        let ps = ParamStore::new(3, DType::F64);
        let m = NonLocal::new(&ps, 8).unwrap();
        for (name, var) in ps.vars() {
            if name.ends_with("gn.weight") {
                var.set(&Tensor::ones(var.dims(), DType::F64, &Device::Cpu).unwrap()).unwrap();
            }
        }
        let x = randn(&[1, 8, 4, 4]);
        let perm: Vec<u32> = vec![5, 0, 15, 3, 9, 1, 12, 7, 2, 14, 6, 11, 4, 13, 8, 10];
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let permute = |t: &Tensor| t.reshape((1, 8, 16)).unwrap().index_select(&idx, 2).unwrap().reshape((1, 8, 4, 4)).unwrap();
        let a = permute(&m.forward(&x).unwrap());
        let b = m.forward(&permute(&x)).unwrap();
        assert!(max_abs(&(a - b).unwrap()) < 1e-12);
    }

    #[test]
    fn prediction_shapes_and_gn_switch() {
        let x = randn(&[3, 8, 32, 32]);
        let with = PredictionHead::new(&ParamStore::new(4, DType::F64), 8, 7, true, true).unwrap().forward(&x).unwrap();
        let without = PredictionHead::new(&ParamStore::new(4, DType::F64), 8, 7, false, true).unwrap().forward(&x).unwrap();
        assert_eq!(with.parsing_logits.dims(), &[3, 7, 64, 64]);
        assert_eq!(with.edge_logits.as_ref().unwrap().dims(), &[3, 1, 64, 64]);
        assert_eq!(without.parsing_logits.dims(), with.parsing_logits.dims());
        assert!(max_abs(&(with.parsing_logits - without.parsing_logits).unwrap()) > 0.0);
    }

    #[test]
    fn full_head_keeps_batch_and_shapes() {
        for kind in [ContextModule::Pgec, ContextModule::Psp, ContextModule::Aspp, ContextModule::None] {
            let head = ParseHead::new(&ParamStore::new(5, DType::F32), 16, 14, 5, kind, true, true, false).unwrap();
            let x = Tensor::randn(0f32, 1., (3, 16, 14, 14), &Device::Cpu).unwrap();
            let (h, p) = head.forward(&x).unwrap();
            assert_eq!(h.dims(), x.dims());
            assert_eq!(p.parsing_logits.dims(), &[3, 5, 28, 28]);
            assert!(p.edge_logits.is_none());
        }
    }

    #[test]
    fn edge_loss_example() {
        let edges = extract_edge_labels(&LabelRaster::from_vec(2, 2, vec![0, 0, 0, 0]));
        assert_eq!(edges.edge_count(), 0);
        let z = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(edge_loss(&z, &[edges], EdgeReduction::Sum).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        // one edge pixel out of four at probability 0.5
        let one = edge_raster(2, 2, &[1, 0, 0, 0]);
        let l = edge_loss(&z, &[one.clone()], EdgeReduction::Sum).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let m = edge_loss(&z, &[one], EdgeReduction::Mean).unwrap().to_scalar::<f64>().unwrap();
        assert!((m - 1.5 * std::f64::consts::LN_2 / 4.0).abs() < 1e-12);
    }

    fn edge_raster(w: usize, h: usize, bits: &[u8]) -> EdgeRaster {
        EdgeRaster::from_vec(w, h, bits.to_vec())
    }

    #[test]
    fn edge_weights_sum_to_one() {
        let (w0, w1) = edge_weights(&edge_raster(4, 1, &[1, 0, 0, 0]));
        assert_eq!((w0, w1), (0.25, 0.75));
    }

    #[test]
    fn saturated_predictions_have_no_loss() {
        let gt = LabelRaster::from_vec(2, 2, vec![0, 1, 2, 1]);
        let e = extract_edge_labels(&gt);
        let mut logits = vec![-60.0; 3 * 4];
        for (p, &l) in gt.data().iter().enumerate() {
            logits[l as usize * 4 + p] = 60.0;
        }
        let edge_logits: Vec<f64> = e.data().iter().map(|&v| if v == 1 { 60.0 } else { -60.0 }).collect();
        let pred = RoiPrediction {
            parsing_logits: Tensor::from_vec(logits, (1, 3, 2, 2), &Device::Cpu).unwrap(),
            edge_logits: Some(Tensor::from_vec(edge_logits, (1, 1, 2, 2), &Device::Cpu).unwrap()),
        };
        let l = prediction_loss(&pred, &[gt], &[e], 2.0, 2.0, EdgeReduction::Sum).unwrap();
        assert!(l.total.to_scalar::<f64>().unwrap() < 1e-20);
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let gt = vec![LabelRaster::from_vec(4, 4, (0..16).map(|i| (i % 3) as u8).collect())];
        let edges: Vec<EdgeRaster> = gt.iter().map(extract_edge_labels).collect();
        let pred = RoiPrediction { parsing_logits: randn(&[1, 3, 4, 4]), edge_logits: Some(randn(&[1, 1, 4, 4])) };
        let l = prediction_loss(&pred, &gt, &edges, 2.0, 2.0, EdgeReduction::Sum).unwrap();
        let v = |t: &Tensor| t.to_scalar::<f64>().unwrap();
        assert!((v(&l.total) - 2.0 * v(&l.parsing) - 2.0 * v(&l.edge)).abs() < 1e-12);
        let no_edge = RoiPrediction { edge_logits: None, ..pred };
        let l = prediction_loss(&no_edge, &gt, &edges, 2.0, 2.0, EdgeReduction::Sum).unwrap();
        assert_eq!(v(&l.total), 2.0 * v(&l.parsing));
    }

    #[test]
    fn losses_match_finite_differences() {
        let gt: Vec<LabelRaster> = (0..2).map(|s| LabelRaster::from_vec(4, 4, (0..16).map(|i| ((i * 7 + s) % 3) as u8).collect())).collect();
        let edges: Vec<EdgeRaster> = gt.iter().map(extract_edge_labels).collect();
        let x = Var::from_tensor(&randn(&[2, 3, 4, 4])).unwrap();
        finite_difference_check(|t| parsing_loss(t, &gt).unwrap(), &x, 32);
        let e = Var::from_tensor(&randn(&[2, 1, 4, 4])).unwrap();
        finite_difference_check(|t| edge_loss(t, &edges, EdgeReduction::Sum).unwrap(), &e, 32);
    }
}
