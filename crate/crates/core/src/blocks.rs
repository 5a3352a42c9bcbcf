//! Input stem, dense unit cells and level transitions.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{ParamKind, ParamSpec};
use crate::tensor::Dims;

/// Shape of a dense unit cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitCellConfig {
    pub channels: usize,
    /// Number of (pointwise, 3-wide) convolution pairs.
    pub pairs: usize,
    pub dims: Dims,
    /// Width of each pointwise convolution as a multiple of `channels`.
    pub bottleneck: usize,
}

impl UnitCellConfig {
    pub fn new(channels: usize, dims: Dims) -> Self {
        UnitCellConfig { channels, pairs: default_pairs(dims), dims, bottleneck: default_bottleneck(dims) }
    }

    pub fn growth(&self) -> usize {
        self.channels / self.pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.pairs == 0 || self.bottleneck == 0 {
            return Err(Error::Config(format!("unit cell sizes must be positive: {self:?}")));
        }
        if self.channels % self.pairs != 0 {
            return Err(Error::Config(format!(
                "unit cell channels {} are not divisible by its {} layer pairs",
                self.channels, self.pairs
            )));
        }
        Ok(())
    }
}

pub fn default_pairs(dims: Dims) -> usize {
    match dims {
        Dims::D2 => 4,
        Dims::D3 => 2,
    }
}

pub fn default_bottleneck(dims: Dims) -> usize {
    match dims {
        Dims::D2 => 4,
        Dims::D3 => 6,
    }
}

fn spatial_rank(shape: &[usize]) -> usize {
    shape.len() - 2
}

/// Convolution with bias; parameters `{name}.weight` and `{name}.bias`.
pub fn conv<B: Backend>(b: &mut B, name: &str, x: &B::T, c_out: usize, k: usize, geom: ConvGeom) -> Result<B::T> {
    let (w, fan_in) = conv_weight(b, name, x, c_out, k)?;
    let bias = b.param(ParamSpec { name: format!("{name}.bias"), shape: vec![c_out], kind: ParamKind::Bias, fan_in })?;
    b.conv(x, &w, &bias, geom)
}

fn conv_weight<B: Backend>(b: &mut B, name: &str, x: &B::T, c_out: usize, k: usize) -> Result<(B::T, usize)> {
    let xs = b.shape_of(x);
    let c_in = xs[1];
    let mut shape = vec![c_out, c_in];
    shape.extend(std::iter::repeat_n(k, spatial_rank(&xs)));
    let fan_in = c_in * k.pow(spatial_rank(&xs) as u32);
    let w = b.param(ParamSpec { name: format!("{name}.weight"), shape, kind: ParamKind::ConvWeight, fan_in })?;
    Ok((w, fan_in))
}

/// Convolution, normalization and rectification. The convolution has no
/// bias since normalization removes any per-channel offset.
pub fn conv_bn_relu<B: Backend>(
    b: &mut B,
    conv_name: &str,
    bn_name: &str,
    x: &B::T,
    c_out: usize,
    k: usize,
    geom: ConvGeom,
) -> Result<B::T> {
    let (w, _) = conv_weight(b, conv_name, x, c_out, k)?;
    let bias = b.zeros(&[c_out]);
    let y = b.conv(x, &w, &bias, geom)?;
    let y = b.batch_norm(&y, bn_name)?;
    b.relu(&y)
}

/// Kernel-2 stride-2 transposed convolution followed by normalization and
/// rectification.
fn deconv_bn_relu<B: Backend>(b: &mut B, prefix: &str, x: &B::T, c_out: usize) -> Result<B::T> {
    let xs = b.shape_of(x);
    let c_in = xs[1];
    let mut shape = vec![c_in, c_out];
    shape.extend(std::iter::repeat_n(2, spatial_rank(&xs)));
    let fan_in = c_in * 2usize.pow(spatial_rank(&xs) as u32);
    let w = b.param(ParamSpec {
        name: format!("{prefix}.conv.weight"),
        shape,
        kind: ParamKind::ConvWeight,
        fan_in,
    })?;
    let bias = b.zeros(&[c_out]);
    let y = b.deconv(x, &w, &bias)?;
    let y = b.batch_norm(&y, &format!("{prefix}.bn"))?;
    b.relu(&y)
}

fn with_context<T>(r: Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{what}: {m}")),
        other => other,
    })
}

/// Maps raw input channels to the first level's width with a 3-wide
/// convolution, normalization and rectification.
pub fn stem_forward<B: Backend>(b: &mut B, x: &B::T, input_channels: usize, target_channels: usize) -> Result<B::T> {
    let c = b.shape_of(x)[1];
    if c != input_channels {
        return Err(Error::Config(format!("network expects {input_channels} input channels, image has {c}")));
    }
    with_context(conv_bn_relu(b, "stem.conv", "stem.bn", x, target_channels, 3, ConvGeom::SAME3), "stem")
}

/// Densely connected cell mapping `c` channels to `c` channels at constant
/// spatial extent.
pub fn unit_cell_forward<B: Backend>(b: &mut B, prefix: &str, x: &B::T, cfg: &UnitCellConfig) -> Result<B::T> {
    cfg.validate()?;
    let c = b.shape_of(x)[1];
    if c != cfg.channels {
        return Err(Error::Shape(format!("unit cell {prefix} expects {} channels, got {c}", cfg.channels)));
    }
    let width = cfg.bottleneck * cfg.channels;
    let mut feats = vec![x.clone()];
    let mut outs = Vec::with_capacity(cfg.pairs);
    for k in 0..cfg.pairs {
        let lp = format!("{prefix}.layer{k}");
        let cat = b.concat(&feats)?;
        let h = conv_bn_relu(b, &format!("{lp}.pw"), &format!("{lp}.pw_bn"), &cat, width, 1, ConvGeom::POINTWISE)?;
        let h = conv_bn_relu(b, &format!("{lp}.conv"), &format!("{lp}.conv_bn"), &h, cfg.growth(), 3, ConvGeom::SAME3)?;
        feats.push(h.clone());
        outs.push(h);
    }
    with_context(b.concat(&outs), prefix)
}

/// Moves from level `i` to level `i + 1`.
///
/// `outputs[k]` is the encoder output at level `k + 1` for `k < i`. The dense
/// form concatenates the level-`i` map with max-pooled shallower maps and
/// applies a kernel-2 stride-2 convolution. The plain form max-pools the
/// level-`i` map and applies a pointwise convolution.
pub fn down_transition<B: Backend>(
    b: &mut B,
    prefix: &str,
    outputs: &[B::T],
    dense: bool,
    c_next: usize,
) -> Result<B::T> {
    let i = outputs.len();
    if i == 0 {
        return Err(Error::Contract(format!("{prefix}: down transition needs at least one level output")));
    }
    let top = b.shape_of(&outputs[i - 1]);
    if top[2..].iter().any(|&e| e % 2 != 0) {
        return Err(Error::Shape(format!("{prefix}: spatial extents {:?} cannot be halved", &top[2..])));
    }
    let r = (|| {
        if dense {
            let mut parts = vec![outputs[i - 1].clone()];
            for k in (0..i - 1).rev() {
                parts.push(b.max_pool(&outputs[k], 1 << (i - 1 - k))?);
            }
            let agg = b.concat(&parts)?;
            conv_bn_relu(b, &format!("{prefix}.conv"), &format!("{prefix}.bn"), &agg, c_next, 2, ConvGeom::DOWN2)
        } else {
            let p = b.max_pool(&outputs[i - 1], 2)?;
            conv_bn_relu(b, &format!("{prefix}.conv"), &format!("{prefix}.bn"), &p, c_next, 1, ConvGeom::POINTWISE)
        }
    })();
    with_context(r, prefix)
}

/// Moves from level `i` to level `i - 1`.
///
/// `outputs[0]` is the decoder output at level `i` and `outputs[k]` the one
/// at level `i + k`. The dense form concatenates the level-`i` map with the
/// interpolated deeper maps and applies a kernel-2 transposed convolution.
/// The plain form upsamples the level-`i` map and applies a pointwise
/// convolution.
pub fn up_transition<B: Backend>(
    b: &mut B,
    prefix: &str,
    outputs: &[B::T],
    dense: bool,
    c_prev: usize,
) -> Result<B::T> {
    if outputs.is_empty() {
        return Err(Error::Contract(format!("{prefix}: up transition is missing its deeper level outputs")));
    }
    let r = (|| {
        if dense {
            let mut parts = vec![outputs[0].clone()];
            for (gap, o) in outputs.iter().enumerate().skip(1) {
                parts.push(b.upsample(o, 1 << gap)?);
            }
            let agg = b.concat(&parts)?;
            deconv_bn_relu(b, prefix, &agg, c_prev)
        } else {
            let u = b.upsample(&outputs[0], 2)?;
            conv_bn_relu(b, &format!("{prefix}.conv"), &format!("{prefix}.bn"), &u, c_prev, 1, ConvGeom::POINTWISE)
        }
    })();
    with_context(r, prefix)
}

/// Joins a transition output with a fused skip map: concatenation, then a
/// pointwise convolution back to `c` channels.
pub fn merge<B: Backend>(b: &mut B, prefix: &str, x: &B::T, fused: &B::T, c: usize) -> Result<B::T> {
    let r = (|| {
        let cat = b.concat(&[x.clone(), fused.clone()])?;
        conv_bn_relu(b, &format!("{prefix}.conv"), &format!("{prefix}.bn"), &cat, c, 1, ConvGeom::POINTWISE)
    })();
    with_context(r, prefix)
}
