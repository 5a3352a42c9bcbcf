//! Run configuration as flat `key = value` text with dotted sections.
//!
//! ```text
//! mode = hybrid
//! network.levels = 4
//! train.learning_rate = 1e-3
//! ```
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. The
//! snapshot written by [`RunConfig::snapshot`] lists every key, so parsing
//! it back reproduces the configuration exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SynthConfig, VolumeFormat};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::network::{NetworkConfig, Variant};
use crate::pipeline::{HybridConfig, TrainConfig};
use crate::tensor::Dims;

/// Which training path a run takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Slice network only.
    D2,
    /// Volume network only.
    D3,
    /// Slice network, then joint slice and volume training.
    Hybrid,
}

impl Mode {
    /// Dimensionality of the dataset a run reads.
    pub fn data_dims(self) -> Dims {
        match self {
            Mode::D2 => Dims::D2,
            Mode::D3 | Mode::Hybrid => Dims::D3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::D2 => "2d",
            Mode::D3 => "3d",
            Mode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Mode::D2),
            "3d" => Ok(Mode::D3),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::Config(format!("unknown mode `{other}` (2d, 3d, hybrid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSection {
    pub levels: usize,
    pub stages: usize,
    pub base: usize,
    pub variant: Variant,
    pub pairs: usize,
    pub bottleneck: usize,
}

impl NetSection {
    fn defaults(dims: Dims, levels: usize, base: usize) -> Self {
        let c = NetworkConfig::new(dims, levels, 2, base, vec![]);
        NetSection { levels, stages: 2, base, variant: Variant::V7, pairs: c.pairs_per_cell, bottleneck: c.bottleneck }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub checkpoint_every: usize,
    pub val_fraction: f64,
    pub max_iterations: Option<usize>,
}

impl From<TrainConfig> for TrainSection {
    fn from(t: TrainConfig) -> Self {
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decay: t.decay,
            decay_every: t.decay_every,
            checkpoint_every: t.checkpoint_every,
            val_fraction: t.val_fraction,
            max_iterations: t.max_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSection {
    pub count: usize,
    pub classes: usize,
    pub lesion_min: f64,
    pub lesion_max: f64,
    pub max_lesions: usize,
    pub edge_sigma: f64,
    pub noise: f64,
    pub format: VolumeFormat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    /// Slices per volume after depth standardization.
    pub depth: usize,
    pub net2d: NetSection,
    pub net3d: NetSection,
    pub train2d: TrainSection,
    pub train3d: TrainSection,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub finetune2d: bool,
    pub threshold: f64,
    pub folds: usize,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::new(12, &[64, 64], 2, 0).expect("valid extents");
        RunConfig {
            mode: Mode::D2,
            seed: 0,
            data_root: None,
            height: 512,
            width: 512,
            depth: 32,
            net2d: NetSection::defaults(Dims::D2, 5, 16),
            net3d: NetSection::defaults(Dims::D3, 4, 16),
            train2d: TrainConfig::default_2d().into(),
            train3d: TrainConfig::default_3d().into(),
            loss_kind: LossKind::FocalTversky,
            loss: LossConfig::default(),
            finetune2d: true,
            threshold: 0.5,
            folds: 5,
            synth: SynthSection {
                count: s.n,
                classes: s.num_classes,
                lesion_min: s.lesion_fraction.0,
                lesion_max: s.lesion_fraction.1,
                max_lesions: s.max_lesions,
                edge_sigma: s.edge_sigma,
                noise: s.noise,
                format: s.volume_format,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_format(key: &str, value: &str) -> Result<VolumeFormat> {
    match value {
        "raw" => Ok(VolumeFormat::Raw),
        "nifti" => Ok(VolumeFormat::Nifti),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (raw, nifti)"))),
    }
}

fn set_net(n: &mut NetSection, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "levels" => n.levels = parse(key, value)?,
        "stages" => n.stages = parse(key, value)?,
        "base" => n.base = parse(key, value)?,
        "variant" => n.variant = value.parse()?,
        "pairs" => n.pairs = parse(key, value)?,
        "bottleneck" => n.bottleneck = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn net_entries(prefix: &str, n: &NetSection, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.levels"), n.levels.to_string()));
    out.push((format!("{prefix}.stages"), n.stages.to_string()));
    out.push((format!("{prefix}.base"), n.base.to_string()));
    out.push((format!("{prefix}.variant"), n.variant.to_string()));
    out.push((format!("{prefix}.pairs"), n.pairs.to_string()));
    out.push((format!("{prefix}.bottleneck"), n.bottleneck.to_string()));
}

fn set_train(t: &mut TrainSection, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => t.epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "learning_rate" => t.learning_rate = parse(key, value)?,
        "decay" => t.decay = parse(key, value)?,
        "decay_every" => t.decay_every = parse(key, value)?,
        "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
        "val_fraction" => t.val_fraction = parse(key, value)?,
        "max_iterations" => {
            t.max_iterations = match value {
                "none" | "" => None,
                v => Some(parse(key, v)?),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainSection, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.epochs"), t.epochs.to_string()));
    out.push((format!("{prefix}.batch_size"), t.batch_size.to_string()));
    out.push((format!("{prefix}.learning_rate"), t.learning_rate.to_string()));
    out.push((format!("{prefix}.decay"), t.decay.to_string()));
    out.push((format!("{prefix}.decay_every"), t.decay_every.to_string()));
    out.push((format!("{prefix}.checkpoint_every"), t.checkpoint_every.to_string()));
    out.push((format!("{prefix}.val_fraction"), t.val_fraction.to_string()));
    let it = t.max_iterations.map_or("none".to_string(), |m| m.to_string());
    out.push((format!("{prefix}.max_iterations"), it));
}

impl RunConfig {
    /// Small CPU-friendly profile: 64x64 slices, 8-slice volumes, 8 base
    /// channels and a learning rate large enough to move in a few epochs.
    pub fn desk() -> Self {
        let mut c = RunConfig {
            height: 64,
            width: 64,
            depth: 8,
            net2d: NetSection::defaults(Dims::D2, 3, 8),
            net3d: NetSection::defaults(Dims::D3, 2, 8),
            ..RunConfig::default()
        };
        c.train2d.epochs = 20;
        c.train2d.batch_size = 4;
        c.train2d.learning_rate = 3e-3;
        c.train3d.epochs = 12;
        c.train3d.batch_size = 1;
        c.train3d.learning_rate = 3e-3;
        c
    }

    /// Reads a config file on top of `base`.
    pub fn load(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = base;
        c.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        Ok(c)
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key {
            "mode" => {
                self.mode = value.parse()?;
                true
            }
            "seed" => {
                self.seed = parse(key, value)?;
                true
            }
            "data.root" => {
                self.data_root = (!value.is_empty()).then(|| PathBuf::from(value));
                true
            }
            "data.height" => {
                self.height = parse(key, value)?;
                true
            }
            "data.width" => {
                self.width = parse(key, value)?;
                true
            }
            "data.depth" => {
                self.depth = parse(key, value)?;
                true
            }
            "loss.kind" => {
                self.loss_kind = value.parse()?;
                true
            }
            "loss.alpha" => {
                self.loss.alpha = parse(key, value)?;
                true
            }
            "loss.beta" => {
                self.loss.beta = parse(key, value)?;
                true
            }
            "loss.gamma" => {
                self.loss.gamma = parse(key, value)?;
                true
            }
            "loss.epsilon" => {
                self.loss.epsilon = parse(key, value)?;
                true
            }
            "loss.include_background" => {
                self.loss.include_background = parse_bool(key, value)?;
                true
            }
            "hybrid.lambda" => {
                self.loss.lambda2d = parse(key, value)?;
                true
            }
            "hybrid.finetune2d" => {
                self.finetune2d = parse_bool(key, value)?;
                true
            }
            "eval.threshold" => {
                self.threshold = parse(key, value)?;
                true
            }
            "eval.folds" => {
                self.folds = parse(key, value)?;
                true
            }
            "synth.count" => {
                self.synth.count = parse(key, value)?;
                true
            }
            "synth.classes" => {
                self.synth.classes = parse(key, value)?;
                true
            }
            "synth.lesion_min" => {
                self.synth.lesion_min = parse(key, value)?;
                true
            }
            "synth.lesion_max" => {
                self.synth.lesion_max = parse(key, value)?;
                true
            }
            "synth.max_lesions" => {
                self.synth.max_lesions = parse(key, value)?;
                true
            }
            "synth.edge_sigma" => {
                self.synth.edge_sigma = parse(key, value)?;
                true
            }
            "synth.noise" => {
                self.synth.noise = parse(key, value)?;
                true
            }
            "synth.format" => {
                self.synth.format = parse_format(key, value)?;
                true
            }
            _ => match key.split_once('.') {
                Some(("network", f)) => set_net(&mut self.net2d, f, key, value)?,
                Some(("network3d", f)) => set_net(&mut self.net3d, f, key, value)?,
                Some(("train", f)) => set_train(&mut self.train2d, f, key, value)?,
                Some(("train3d", f)) => set_train(&mut self.train3d, f, key, value)?,
                _ => false,
            },
        };
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("mode".to_string(), self.mode.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("data.root".to_string(), self.data_root.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data.height".to_string(), self.height.to_string()),
            ("data.width".to_string(), self.width.to_string()),
            ("data.depth".to_string(), self.depth.to_string()),
        ];
        net_entries("network", &self.net2d, &mut out);
        net_entries("network3d", &self.net3d, &mut out);
        train_entries("train", &self.train2d, &mut out);
        train_entries("train3d", &self.train3d, &mut out);
        let l = &self.loss;
        out.extend([
            ("loss.kind".to_string(), self.loss_kind.to_string()),
            ("loss.alpha".to_string(), l.alpha.to_string()),
            ("loss.beta".to_string(), l.beta.to_string()),
            ("loss.gamma".to_string(), l.gamma.to_string()),
            ("loss.epsilon".to_string(), l.epsilon.to_string()),
            ("loss.include_background".to_string(), l.include_background.to_string()),
            ("hybrid.lambda".to_string(), l.lambda2d.to_string()),
            ("hybrid.finetune2d".to_string(), self.finetune2d.to_string()),
            ("eval.threshold".to_string(), self.threshold.to_string()),
            ("eval.folds".to_string(), self.folds.to_string()),
        ]);
        let s = &self.synth;
        let format = match s.format {
            VolumeFormat::Raw => "raw",
            VolumeFormat::Nifti => "nifti",
        };
        out.extend([
            ("synth.count".to_string(), s.count.to_string()),
            ("synth.classes".to_string(), s.classes.to_string()),
            ("synth.lesion_min".to_string(), s.lesion_min.to_string()),
            ("synth.lesion_max".to_string(), s.lesion_max.to_string()),
            ("synth.max_lesions".to_string(), s.max_lesions.to_string()),
            ("synth.edge_sigma".to_string(), s.edge_sigma.to_string()),
            ("synth.noise".to_string(), s.noise.to_string()),
            ("synth.format".to_string(), format.to_string()),
        ]);
        out
    }

    /// Text form of [`RunConfig::entries`], parseable by [`RunConfig::apply_text`].
    pub fn snapshot(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Network configuration for `dims` and `num_classes` network outputs.
    pub fn network(&self, dims: Dims, num_classes: usize) -> NetworkConfig {
        let (n, input) = match dims {
            Dims::D2 => (&self.net2d, vec![self.height, self.width]),
            Dims::D3 => (&self.net3d, vec![self.depth, self.height, self.width]),
        };
        NetworkConfig {
            pairs_per_cell: n.pairs,
            bottleneck: n.bottleneck,
            num_classes,
            variant: n.variant,
            ..NetworkConfig::new(dims, n.levels, n.stages, n.base, input)
        }
    }

    pub fn train_config(&self, dims: Dims) -> TrainConfig {
        let t = match dims {
            Dims::D2 => &self.train2d,
            Dims::D3 => &self.train3d,
        };
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decay: t.decay,
            decay_every: t.decay_every,
            seed: self.seed,
            loss: self.loss.clone(),
            loss_kind: self.loss_kind,
            checkpoint_every: t.checkpoint_every,
            val_fraction: t.val_fraction,
            max_iterations: t.max_iterations,
            threshold: self.threshold,
        }
    }

    pub fn hybrid_config(&self) -> HybridConfig {
        HybridConfig {
            cfg2d: self.network(Dims::D2, 1),
            cfg3d: self.network(Dims::D3, 1),
            lambda2d: self.loss.lambda2d,
            finetune2d: self.finetune2d,
        }
    }

    /// Synthetic corpus matching the run's mode and extents.
    pub fn synth_config(&self) -> Result<SynthConfig> {
        let extents = match self.mode.data_dims() {
            Dims::D2 => vec![self.height, self.width],
            Dims::D3 => vec![self.depth, self.height, self.width],
        };
        let s = &self.synth;
        let mut c = SynthConfig::new(s.count, &extents, s.classes, self.seed)?;
        c.lesion_fraction = (s.lesion_min, s.lesion_max);
        c.max_lesions = s.max_lesions;
        c.edge_sigma = s.edge_sigma;
        c.noise = s.noise;
        c.volume_format = s.format;
        Ok(c)
    }

    /// Checks every section that the run's mode uses.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                v.push(match e {
                    Error::Config(m) => m,
                    e => e.to_string(),
                });
            }
        };
        match self.mode {
            Mode::D2 => {
                check(self.network(Dims::D2, 1).validate());
                check(self.train_config(Dims::D2).validate());
            }
            Mode::D3 => {
                check(self.network(Dims::D3, 1).validate());
                check(self.train_config(Dims::D3).validate());
            }
            Mode::Hybrid => {
                check(self.hybrid_config().validate());
                check(self.train_config(Dims::D2).validate());
                check(self.train_config(Dims::D3).validate());
            }
        }
        if self.folds < 2 {
            check(Err(Error::Config(format!("eval.folds must be at least 2 (got {})", self.folds))));
        }
        check(self.synth_config().and_then(|s| s.validate()));
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::desk();
        c.set("mode", "hybrid").unwrap();
        c.set("train.max_iterations", "17").unwrap();
        c.set("data.root", "/tmp/x y").unwrap();
        c.set("loss.gamma", "1.3333333333333333").unwrap();
        c.set("synth.format", "nifti").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.snapshot()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let c = RunConfig::default();
        for (k, v) in c.entries() {
            let mut d = RunConfig::desk();
            d.set(&k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("network.depth", "3"), Err(Error::Config(_))));
        assert!(matches!(c.set("nonsense", "3"), Err(Error::Config(_))));
        assert!(matches!(c.set("network.levels", "three"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("network.levels 3"), Err(Error::Config(_))));
        let e = c.apply_text("# fine\n\nmode = 2d\nbogus.key = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("bogus.key"), "{e}");
    }

    #[test]
    fn desk_profile_is_valid_in_every_mode() {
        for mode in ["2d", "3d", "hybrid"] {
            let mut c = RunConfig::desk();
            c.set("mode", mode).unwrap();
            c.validate().unwrap();
            assert_eq!(c.network(Dims::D2, 1).input_size, vec![64, 64]);
            assert_eq!(c.network(Dims::D3, 1).input_size, vec![8, 64, 64]);
        }
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_reports_violations() {
        let mut c = RunConfig::desk();
        c.apply_text("data.height = 60\ntrain.batch_size = 0\neval.folds = 1").unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("batch size") && e.contains("eval.folds"), "{e}");
    }

    #[test]
    fn overrides_feed_the_derived_configs() {
        let mut c = RunConfig::desk();
        for kv in ["seed=9", "network.variant=V3", "train.learning_rate=0.5", "hybrid.lambda=0"] {
            c.apply_override(kv).unwrap();
        }
        assert_eq!(c.network(Dims::D2, 1).variant, Variant::V3);
        let t = c.train_config(Dims::D2);
        assert_eq!((t.seed, t.learning_rate), (9, 0.5));
        assert_eq!(c.hybrid_config().lambda2d, 0.0);
        assert!(c.apply_override("seed").is_err());
    }
}
