//! Network configuration, assembly, ablation variants and parameter
//! accounting.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EagerBackend, ShapeBackend};
use crate::blocks::{
    conv, conv_bn_relu, default_bottleneck, default_pairs, down_transition, merge, stem_forward, unit_cell_forward,
    up_transition, UnitCellConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{msf_unit_forward, pyramid_fuse, FusionKind, MsfContext, PfConfig};
use crate::kernels::ConvGeom;
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{Dims, Scalar, Tensor};

/// Ablation ladder. `V7` is the complete network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::V1, Variant::V2, Variant::V3, Variant::V4, Variant::V5, Variant::V6, Variant::V7];

    /// Aggregating strided-convolution down transitions.
    pub fn dense_down(self) -> bool {
        matches!(self, Variant::V2 | Variant::V4 | Variant::V7)
    }

    /// Aggregating transposed-convolution up transitions.
    pub fn dense_up(self) -> bool {
        matches!(self, Variant::V3 | Variant::V4 | Variant::V7)
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Variant::V5 => FusionKind::Pointwise,
            Variant::V6 | Variant::V7 => FusionKind::Pyramid,
            _ => FusionKind::Skip,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::V1 => "baseline: plain transitions, direct skips",
            Variant::V2 => "baseline + dense down transitions",
            Variant::V3 => "baseline + dense up transitions",
            Variant::V4 => "baseline + dense down and up transitions",
            Variant::V5 => "baseline + multi-scale fusion with pointwise fusion",
            Variant::V6 => "baseline + multi-scale fusion with pyramid fusion",
            Variant::V7 => "full network",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", *self as usize + 1)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::V7),
            t => t
                .strip_prefix('v')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| (1..=7).contains(n))
                .map(|n| Variant::ALL[n - 1])
                .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected V1..V7 or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub levels: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub dims: Dims,
    pub pairs_per_cell: usize,
    /// Pointwise width inside a unit cell as a multiple of its channels.
    pub bottleneck: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub variant: Variant,
    /// Spatial input extents: `[h, w]` or `[s, h, w]`.
    pub input_size: Vec<usize>,
}

impl NetworkConfig {
    pub fn new(dims: Dims, levels: usize, stages: usize, base_channels: usize, input_size: Vec<usize>) -> Self {
        NetworkConfig {
            levels,
            stages,
            base_channels,
            dims,
            pairs_per_cell: default_pairs(dims),
            bottleneck: default_bottleneck(dims),
            input_channels: 1,
            num_classes: 1,
            variant: Variant::V7,
            input_size,
        }
    }

    /// Full-size 2D network on 512x512 slices.
    pub fn default_2d() -> Self {
        NetworkConfig::new(Dims::D2, 5, 2, 16, vec![512, 512])
    }

    /// Full-size 3D network on 32-slice 512x512 volumes.
    pub fn default_3d() -> Self {
        NetworkConfig::new(Dims::D3, 4, 2, 16, vec![32, 512, 512])
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    /// Channels at level `l` (1-based).
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    pub fn cell(&self, l: usize) -> UnitCellConfig {
        UnitCellConfig { channels: self.channels(l), pairs: self.pairs_per_cell, dims: self.dims, bottleneck: self.bottleneck }
    }

    /// Number of MSF slots.
    pub fn msf_slots(&self) -> usize {
        2 * self.stages - 1
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch, self.input_channels];
        s.extend(&self.input_size);
        s
    }

    /// Spatial extents at level `l`.
    pub fn level_extents(&self, l: usize) -> Vec<usize> {
        self.input_size.iter().map(|&e| e >> (l - 1)).collect()
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.levels < 2 {
            v.push(format!("levels must be at least 2 (got {})", self.levels));
        }
        if self.stages < 1 {
            v.push("stages must be at least 1".to_string());
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            v.push(format!("base_channels must be a positive multiple of 4 (got {})", self.base_channels));
        }
        if self.pairs_per_cell == 0 {
            v.push("pairs_per_cell must be positive".to_string());
        } else if self.base_channels % self.pairs_per_cell != 0 {
            v.push(format!(
                "base_channels {} must be divisible by pairs_per_cell {}",
                self.base_channels, self.pairs_per_cell
            ));
        }
        if self.bottleneck == 0 {
            v.push("bottleneck must be positive".to_string());
        }
        if self.input_channels == 0 {
            v.push("input_channels must be positive".to_string());
        }
        if self.num_classes == 0 {
            v.push("num_classes must be positive".to_string());
        }
        if self.input_size.len() != self.dims.spatial_rank() {
            v.push(format!(
                "a {} network needs {} input extents, got {:?}",
                self.dims,
                self.dims.spatial_rank(),
                self.input_size
            ));
        } else if self.levels >= 2 && self.levels < 20 {
            let div = 1usize << (self.levels - 1);
            if self.input_size.iter().any(|&e| e == 0 || e % div != 0) {
                v.push(format!("input extents {:?} must be divisible by 2^(levels-1) = {div}", self.input_size));
            } else if self.variant.fusion() == FusionKind::Pyramid {
                for l in 1..=self.levels {
                    if let Err(e) = PfConfig::for_extents(&self.level_extents(l)) {
                        v.push(format!("level {l}: {e}"));
                    }
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Levels whose pyramid fusion uses the half-scale fallback.
    pub fn pf_fallback_levels(&self) -> Vec<usize> {
        if self.variant.fusion() != FusionKind::Pyramid {
            return Vec::new();
        }
        (1..=self.levels)
            .filter(|&l| matches!(PfConfig::for_extents(&self.level_extents(l)), Ok((_, true))))
            .collect()
    }

    /// Checks that `shape` is a valid `[n, c, spatial...]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.dims.spatial_rank() + 2 {
            return Err(Error::Shape(format!("a {} network cannot take input of shape {shape:?}", self.dims)));
        }
        if shape[1] != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got shape {shape:?}",
                self.input_channels
            )));
        }
        let div = 1usize << (self.levels - 1);
        if shape[2..].iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::Shape(format!("input extents {:?} are not divisible by {div}", &shape[2..])));
        }
        Ok(())
    }
}

fn msf_fusions<B: Backend>(b: &mut B, cfg: &NetworkConfig, ctx: &MsfContext<B::T>) -> Result<Vec<B::T>> {
    let m = ctx.slot();
    let mut fused = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        let y = msf_unit_forward(b, &format!("msf{m}.l{l}"), ctx, l, cfg.channels(l), cfg.variant.fusion())?;
        b.record(&format!("msf{m}.MSF-{l}"), &y);
        fused.push(y);
    }
    Ok(fused)
}

/// The network graph, written once for every backend. Returns per-pixel
/// class probabilities.
pub fn forward<B: Backend>(b: &mut B, cfg: &NetworkConfig, x: &B::T) -> Result<B::T> {
    cfg.check_input(&b.shape_of(x))?;
    let (levels, v) = (cfg.levels, cfg.variant);
    let x0 = stem_forward(b, x, cfg.input_channels, cfg.base_channels)?;
    b.record("stem", &x0);
    let mut ctx = MsfContext { encoders: Vec::new(), decoders: Vec::new() };
    let mut fused: Vec<B::T> = Vec::new();
    for j in 1..=cfg.stages {
        let mut enc: Vec<B::T> = Vec::with_capacity(levels);
        for l in 1..=levels {
            let input = if l == 1 {
                if j == 1 {
                    x0.clone()
                } else {
                    fused[0].clone()
                }
            } else {
                let d = down_transition(b, &format!("enc{j}.down{}", l - 1), &enc, v.dense_down(), cfg.channels(l))?;
                b.record(&format!("enc{j}.DT-{}", l - 1), &d);
                if j == 1 {
                    d
                } else {
                    merge(b, &format!("enc{j}.l{l}.merge"), &d, &fused[l - 1], cfg.channels(l))?
                }
            };
            let y = unit_cell_forward(b, &format!("enc{j}.l{l}.cell"), &input, &cfg.cell(l))?;
            b.record(&format!("enc{j}.E-{l}"), &y);
            enc.push(y);
        }
        ctx.encoders.push(enc);
        fused = msf_fusions(b, cfg, &ctx)?;

        let mut dec: Vec<Option<B::T>> = vec![None; levels];
        for l in (1..=levels).rev() {
            let input = if l == levels {
                fused[l - 1].clone()
            } else {
                let deeper: Vec<B::T> = dec[l..].iter().map(|d| d.clone().expect("deeper levels decoded")).collect();
                let u = up_transition(b, &format!("dec{j}.up{l}"), &deeper, v.dense_up(), cfg.channels(l))?;
                b.record(&format!("dec{j}.UT-{l}"), &u);
                merge(b, &format!("dec{j}.l{l}.merge"), &u, &fused[l - 1], cfg.channels(l))?
            };
            let y = unit_cell_forward(b, &format!("dec{j}.l{l}.cell"), &input, &cfg.cell(l))?;
            b.record(&format!("dec{j}.D-{l}"), &y);
            dec[l - 1] = Some(y);
        }
        ctx.decoders.push(dec.into_iter().map(|d| d.expect("all levels decoded")).collect());
        if j < cfg.stages {
            fused = msf_fusions(b, cfg, &ctx)?;
        }
    }

    let tops: Vec<B::T> = ctx.decoders.iter().map(|d| d[0].clone()).collect();
    let joined = b.concat(&tops)?;
    let base = cfg.base_channels;
    let h = if v.fusion() == FusionKind::Pyramid {
        let (pf, _) = PfConfig::for_extents(&b.shape_of(&joined)[2..])?;
        pyramid_fuse(b, "head.pf", &joined, base, &pf)?
    } else {
        conv_bn_relu(b, "head.fuse.conv", "head.fuse.bn", &joined, base, 1, ConvGeom::POINTWISE)?
    };
    b.record("head.fused", &h);
    let logits = conv(b, "head.mask.conv", &h, cfg.num_classes, 3, ConvGeom::SAME3)?;
    let y = if cfg.num_classes == 1 { b.sigmoid(&logits)? } else { b.softmax(&logits)? };
    b.record("head.out", &y);
    Ok(y)
}

/// Runs the graph on shapes only, at the configured input extents.
pub fn trace(cfg: &NetworkConfig) -> Result<ShapeBackend> {
    cfg.validate()?;
    let mut sb = ShapeBackend::new();
    forward(&mut sb, cfg, &cfg.input_shape(1))?;
    Ok(sb)
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    pub config: NetworkConfig,
    pub specs: Vec<ParamSpec>,
    pub params: ParamStore<S>,
}

/// Builds a seeded model.
pub fn build<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Model<S>> {
    let tr = trace(config)?;
    let fallback = config.pf_fallback_levels();
    if !fallback.is_empty() {
        log::warn!("pyramid fusion at levels {fallback:?} uses a half-scale path in place of the quarter-scale one");
    }
    let params = ParamStore::init(&tr.specs, seed)?;
    Ok(Model { config: config.clone(), specs: tr.specs, params })
}

/// Builds an ablation variant of `base`.
pub fn build_variant<S: Scalar>(tag: Variant, base: &NetworkConfig, seed: u64) -> Result<Model<S>> {
    build(&base.clone().with_variant(tag), seed)
}

/// Parameter count of one top-level module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub module: String,
    pub params: usize,
}

pub fn count_specs(specs: &[ParamSpec]) -> usize {
    specs.iter().filter(|s| !s.kind.is_buffer()).map(|s| s.numel()).sum()
}

/// Parameters per top-level module (`stem`, `enc1`, `msf1`, `dec1`, ...,
/// `head`) in graph order.
pub fn breakdown_specs(specs: &[ParamSpec]) -> Vec<ModuleCount> {
    let mut out: Vec<ModuleCount> = Vec::new();
    for s in specs.iter().filter(|s| !s.kind.is_buffer()) {
        let module = s.name.split('.').next().unwrap_or("").to_string();
        match out.iter_mut().find(|m| m.module == module) {
            Some(m) => m.params += s.numel(),
            None => out.push(ModuleCount { module, params: s.numel() }),
        }
    }
    out
}

impl<S: Scalar> Model<S> {
    pub fn count_parameters(&self) -> usize {
        count_specs(&self.specs)
    }

    pub fn per_module_breakdown(&self) -> Vec<ModuleCount> {
        breakdown_specs(&self.specs)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// Inference with running normalization statistics.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut eb = EagerBackend::new(&self.params);
        let y = forward(&mut eb, &self.config, &Arc::new(x.clone()))?;
        Ok(Arc::try_unwrap(y).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), specs: self.specs.clone(), params: self.params.cast() }
    }
}

/// Published totals in millions of parameters for `(dims, levels)` at two
/// stages and 16 base channels.
pub fn reference_total_millions(dims: Dims, levels: usize, stages: usize) -> Option<f64> {
    if stages != 2 {
        return None;
    }
    match (dims, levels) {
        (Dims::D2, 2) => Some(0.37),
        (Dims::D2, 3) => Some(1.60),
        (Dims::D2, 4) => Some(6.70),
        (Dims::D2, 5) => Some(27.0),
        (Dims::D3, 2) => Some(1.1),
        (Dims::D3, 3) => Some(4.6),
        (Dims::D3, 4) => Some(19.0),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(v: Variant) -> NetworkConfig {
        NetworkConfig { variant: v, ..NetworkConfig::new(Dims::D2, 2, 2, 4, vec![8, 8]) }
    }

    #[test]
    fn variants_parse_and_display() {
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::V7);
        assert_eq!("v3".parse::<Variant>().unwrap(), Variant::V3);
        assert!("V8".parse::<Variant>().is_err());
        assert_eq!(Variant::V5.to_string(), "V5");
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut c = NetworkConfig::new(Dims::D2, 1, 0, 6, vec![9, 9]);
        c.num_classes = 0;
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["levels", "stages", "base_channels", "num_classes"] {
            assert!(msg.contains(needle), "{msg}");
        }
        let c = NetworkConfig::new(Dims::D2, 3, 2, 8, vec![12, 12]);
        assert!(c.validate().unwrap_err().to_string().contains("divisible"));
        assert!(NetworkConfig::new(Dims::D3, 2, 1, 8, vec![8, 8]).validate().is_err());
    }

    #[test]
    fn minimal_network_runs_and_outputs_probabilities() {
        let cfg = NetworkConfig::new(Dims::D2, 2, 1, 4, vec![8, 8]);
        let m: Model<f32> = build(&cfg, 0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let x = Tensor::<f32>::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(cfg.msf_slots(), 1);
        assert!(m.param_names().iter().any(|n| n.starts_with("msf1.")));
        assert!(!m.param_names().iter().any(|n| n.starts_with("msf2.")));
    }

    #[test]
    fn breakdown_sums_to_total() {
        let m: Model<f32> = build(&tiny(Variant::V7), 0).unwrap();
        let b = m.per_module_breakdown();
        assert_eq!(b.iter().map(|c| c.params).sum::<usize>(), m.count_parameters());
        let names: Vec<&str> = b.iter().map(|c| c.module.as_str()).collect();
        assert_eq!(names, ["stem", "enc1", "msf1", "dec1", "msf2", "enc2", "msf3", "dec2", "head"]);
        assert_eq!(breakdown_specs(&[]).len(), 0);
        assert_eq!(count_specs(&[]), 0);
    }

    #[test]
    fn multiclass_head_is_a_distribution() {
        let mut cfg = tiny(Variant::V7);
        cfg.num_classes = 5;
        let m: Model<f64> = build(&cfg, 3).unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 0.3);
        let y = m.forward(&x).unwrap();
        for i in 0..64 {
            let s: f64 = (0..5).map(|c| y.data()[c * 64 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let m: Model<f32> = build(&tiny(Variant::V1), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 1, 5, 8])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 1, 8, 8, 8])).is_err());
    }
}
