//! Multi-scale fusion between consecutive modules and pyramid fusion.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::blocks::conv_bn_relu;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;

/// How an MSF slot turns the aggregated multi-level features into a
/// level map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// No aggregation: the preceding module's same-level output is passed on.
    Skip,
    /// Aggregation followed by a single pointwise convolution.
    Pointwise,
    /// Aggregation followed by pyramid fusion.
    Pyramid,
}

/// A resampling factor of a pyramid path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    /// Shrink by the given factor, then restore.
    Down(usize),
    /// Enlarge by the given factor, then restore.
    Up(usize),
}

impl Scale {
    pub fn ratio(self) -> f64 {
        match self {
            Scale::Down(k) => 1.0 / k as f64,
            Scale::Up(k) => k as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub scales: Vec<Scale>,
    /// Each path emits `c / reduction` channels.
    pub reduction: usize,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig { scales: vec![Scale::Down(4), Scale::Down(2), Scale::Up(2), Scale::Up(4)], reduction: 4 }
    }
}

impl PfConfig {
    /// Scale set usable on maps with the given spatial extents. Returns the
    /// set and whether the quarter-scale path had to be replaced by a
    /// half-scale one.
    pub fn for_extents(spatial: &[usize]) -> Result<(PfConfig, bool)> {
        let base = PfConfig::default();
        if spatial.iter().all(|&e| e % 4 == 0) {
            return Ok((base, false));
        }
        if spatial.iter().all(|&e| e % 2 == 0) {
            let mut scales = base.scales;
            scales[0] = Scale::Down(2);
            return Ok((PfConfig { scales, reduction: base.reduction }, true));
        }
        Err(Error::Config(format!(
            "pyramid fusion needs spatial extents divisible by 2, got {spatial:?}"
        )))
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.scales.len() != self.reduction {
            return Err(Error::Config(format!(
                "pyramid fusion with {} paths of c/{} channels would not yield 2c channels",
                self.scales.len(),
                self.reduction
            )));
        }
        if c % self.reduction != 0 {
            return Err(Error::Config(format!("pyramid fusion width {c} is not divisible by {}", self.reduction)));
        }
        Ok(())
    }
}

/// Resamples a map from level `from` to level `to` (levels count from 1 at
/// full resolution): max-pooling towards coarser levels, interpolation
/// towards finer ones.
pub fn resample_level<B: Backend>(b: &mut B, x: &B::T, from: usize, to: usize) -> Result<B::T> {
    if from < to {
        b.max_pool(x, 1 << (to - from))
    } else {
        b.upsample(x, 1 << (from - to))
    }
}

/// Gathers the outputs of all preceding modules at level `level`.
///
/// `contributors[m][k]` is the output of the `m`-th preceding module at
/// level `k + 1`, with modules ordered encoders first then decoders. Maps of
/// the same level are concatenated, brought to the target level, and the
/// per-level results concatenated in level order.
pub fn msf_aggregate<B: Backend>(b: &mut B, contributors: &[Vec<B::T>], level: usize) -> Result<B::T> {
    let levels = contributors.first().map(|c| c.len()).unwrap_or(0);
    if levels == 0 || contributors.iter().any(|c| c.len() != levels) {
        return Err(Error::Contract("every preceding module must contribute one map per level".into()));
    }
    if level == 0 || level > levels {
        return Err(Error::Contract(format!("fusion level {level} outside 1..={levels}")));
    }
    let mut parts = Vec::with_capacity(levels);
    for k in 0..levels {
        let same: Vec<B::T> = contributors.iter().map(|c| c[k].clone()).collect();
        let f = b.concat(&same)?;
        parts.push(resample_level(b, &f, k + 1, level)?);
    }
    b.concat(&parts)
}

/// Pyramid fusion: reduce to `c` channels, run one rescale/convolve/restore
/// path per scale, concatenate with the reduced map and project back to `c`.
pub fn pyramid_fuse<B: Backend>(b: &mut B, prefix: &str, f_agg: &B::T, c: usize, cfg: &PfConfig) -> Result<B::T> {
    cfg.validate(c)?;
    let fa = conv_bn_relu(
        b,
        &format!("{prefix}.reduce"),
        &format!("{prefix}.reduce_bn"),
        f_agg,
        c,
        1,
        ConvGeom::POINTWISE,
    )?;
    let mut parts = vec![fa.clone()];
    for (p, &s) in cfg.scales.iter().enumerate() {
        let (conv_name, bn_name) = (format!("{prefix}.path{p}"), format!("{prefix}.path{p}_bn"));
        let out = c / cfg.reduction;
        let y = match s {
            Scale::Down(k) => {
                let h = b.max_pool(&fa, k)?;
                let h = conv_bn_relu(b, &conv_name, &bn_name, &h, out, 3, ConvGeom::SAME3)?;
                b.upsample(&h, k)?
            }
            Scale::Up(k) => {
                let h = b.upsample(&fa, k)?;
                let h = conv_bn_relu(b, &conv_name, &bn_name, &h, out, 3, ConvGeom::SAME3)?;
                b.max_pool(&h, k)?
            }
        };
        parts.push(y);
    }
    let cat = b.concat(&parts)?;
    b.record(&format!("{prefix}.concat"), &cat);
    conv_bn_relu(b, &format!("{prefix}.out"), &format!("{prefix}.out_bn"), &cat, c, 1, ConvGeom::POINTWISE)
}

/// Outputs of the modules preceding an MSF slot, per level.
#[derive(Clone, Debug)]
pub struct MsfContext<T> {
    /// `encoders[j][k]`: encoder `j + 1` at level `k + 1`.
    pub encoders: Vec<Vec<T>>,
    /// `decoders[j][k]`: decoder `j + 1` at level `k + 1`.
    pub decoders: Vec<Vec<T>>,
}

impl<T: Clone> MsfContext<T> {
    /// Slot index `j` (1-based): the number of preceding modules.
    pub fn slot(&self) -> usize {
        self.encoders.len() + self.decoders.len()
    }

    /// All preceding modules, encoders first then decoders.
    pub fn contributors(&self) -> Vec<Vec<T>> {
        self.encoders.iter().chain(&self.decoders).cloned().collect()
    }

    /// The module immediately before the slot.
    pub fn preceding(&self) -> Option<&Vec<T>> {
        if self.encoders.len() > self.decoders.len() {
            self.encoders.last()
        } else {
            self.decoders.last()
        }
    }
}

/// One MSF unit at one level: aggregation then the configured fusion.
pub fn msf_unit_forward<B: Backend>(
    b: &mut B,
    prefix: &str,
    ctx: &MsfContext<B::T>,
    level: usize,
    c: usize,
    kind: FusionKind,
) -> Result<B::T> {
    match kind {
        FusionKind::Skip => ctx
            .preceding()
            .and_then(|m| m.get(level.wrapping_sub(1)))
            .cloned()
            .ok_or_else(|| Error::Contract(format!("{prefix}: no preceding module output at level {level}"))),
        FusionKind::Pointwise => {
            let agg = msf_aggregate(b, &ctx.contributors(), level)?;
            conv_bn_relu(b, &format!("{prefix}.fuse.conv"), &format!("{prefix}.fuse.bn"), &agg, c, 1, ConvGeom::POINTWISE)
        }
        FusionKind::Pyramid => {
            let agg = msf_aggregate(b, &ctx.contributors(), level)?;
            let (cfg, _) = PfConfig::for_extents(&b.shape_of(&agg)[2..])?;
            pyramid_fuse(b, &format!("{prefix}.pf"), &agg, c, &cfg)
        }
    }
}
