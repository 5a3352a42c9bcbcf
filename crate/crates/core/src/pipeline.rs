//! Training, hybrid fine-tuning, prediction, cross-validated evaluation and
//! checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrad;
use crate::backend::{Binding, TapeBackend};
use crate::data::{self, DatasetManifest, Samples, SliceData, Volume, VolumeData};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind};
use crate::metrics::{self, ConfusionCounts, EvaluationReport, MetricScores};
use crate::network::{self, Model, NetworkConfig};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub loss_kind: LossKind,
    /// Write a checkpoint every this many epochs (0 = best only).
    pub checkpoint_every: usize,
    /// Fraction of training subjects held out for model selection.
    pub val_fraction: f64,
    /// Stop after this many optimizer steps.
    pub max_iterations: Option<usize>,
    pub threshold: f64,
}

impl TrainConfig {
    pub fn default_2d() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-5,
            decay: 0.99,
            decay_every: 10,
            seed: 0,
            loss: LossConfig::default(),
            loss_kind: LossKind::FocalTversky,
            checkpoint_every: 0,
            val_fraction: 0.1,
            max_iterations: None,
            threshold: 0.5,
        }
    }

    pub fn default_3d() -> Self {
        TrainConfig { batch_size: 2, ..Self::default_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::Config("decay must lie in (0, 1] with a positive period".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.learning_rate, self.decay, self.decay_every, epoch)
    }
}

/// Step decay: `lr0 * decay^floor(epoch / every)`.
pub fn lr_schedule(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub cfg2d: NetworkConfig,
    pub cfg3d: NetworkConfig,
    pub lambda2d: f64,
    /// Update the 2D network during joint training.
    pub finetune2d: bool,
}

impl Default for HybridConfig {
    fn default() -> Self {
        let mut cfg2d = NetworkConfig::default_2d();
        cfg2d.levels = 4;
        let mut cfg3d = NetworkConfig::default_3d();
        cfg3d.levels = 2;
        HybridConfig { cfg2d, cfg3d, lambda2d: 0.2, finetune2d: true }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        self.cfg2d.validate()?;
        self.cfg3d.validate()?;
        if self.cfg2d.dims != Dims::D2 || self.cfg3d.dims != Dims::D3 {
            return Err(Error::Config("hybrid training pairs a 2D network with a 3D network".into()));
        }
        if self.cfg2d.input_size[..] != self.cfg3d.input_size[1..] {
            return Err(Error::Config(format!(
                "2D extents {:?} and 3D slice extents {:?} disagree",
                self.cfg2d.input_size,
                &self.cfg3d.input_size[1..]
            )));
        }
        if self.cfg2d.num_classes != 1 || self.cfg3d.num_classes != 1 {
            return Err(Error::Config("hybrid training supports binary tasks only".into()));
        }
        if !(self.lambda2d >= 0.0 && self.lambda2d.is_finite()) {
            return Err(Error::Config("lambda2d must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with default moment coefficients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    /// Applies one update to every parameter with a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[(&str, &Tensor<f32>)]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has the wrong shape")));
            }
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let upd = self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv = (*pv as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

/// One training or evaluation sample: image and label map, each shaped
/// `[1, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject: String,
    pub image: Tensor<f32>,
    pub labels: Tensor<f32>,
}

impl Sample {
    pub fn from_slice(s: &SliceData) -> Result<Sample> {
        let shape = vec![1, s.extents[0], s.extents[1]];
        Ok(Sample {
            subject: s.subject.clone(),
            image: Tensor::from_vec(shape.clone(), s.image.clone())?,
            labels: Tensor::from_vec(shape, s.mask.clone())?,
        })
    }

    pub fn from_volume(v: &VolumeData) -> Result<Sample> {
        let mut shape = vec![1];
        shape.extend(v.image.shape);
        Ok(Sample {
            subject: v.subject.clone(),
            image: Tensor::from_vec(shape.clone(), v.image.data.clone())?,
            labels: Tensor::from_vec(shape, v.mask.data.clone())?,
        })
    }

    pub fn spatial(&self) -> &[usize] {
        &self.image.shape()[1..]
    }
}

/// Stacks samples into `[n, 1, spatial...]` images and label maps.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut x = Vec::with_capacity(shape.iter().product());
    let mut y = Vec::with_capacity(x.capacity());
    for s in samples {
        if s.image.shape() != first.image.shape() || s.labels.shape() != first.image.shape() {
            return Err(Error::Shape("samples in a batch must share one shape".into()));
        }
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(s.labels.data());
    }
    Ok((Tensor::from_vec(shape.clone(), x)?, Tensor::from_vec(shape, y)?))
}

/// Network output channels for a dataset with `dataset_classes` labels.
pub fn network_classes(dataset_classes: usize) -> usize {
    if dataset_classes <= 2 {
        1
    } else {
        dataset_classes
    }
}

/// Loss target for a network with `classes` output channels.
pub fn targets(labels: &Tensor<f32>, classes: usize) -> Result<Tensor<f32>> {
    if classes == 1 {
        Ok(labels.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    } else {
        losses::one_hot(labels, classes)
    }
}

/// Hard predictions: thresholded foreground for one channel, arg-max labels
/// otherwise.
pub fn hard_labels(prob: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    if prob.channels() == 1 {
        metrics::binarize(prob, threshold)
    } else {
        metrics::argmax_labels(prob)
    }
}

/// Foreground confusion counts, one per foreground class.
pub fn foreground_confusions(prob: &Tensor<f32>, labels: &Tensor<f32>, threshold: f64) -> Result<Vec<ConfusionCounts>> {
    let pred = hard_labels(prob, threshold);
    if prob.channels() == 1 {
        let gt = labels.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        Ok(vec![metrics::confusion(&pred, &gt)?])
    } else {
        let mut cc = metrics::class_confusions(&pred, labels, prob.channels())?;
        cc.remove(0);
        Ok(cc)
    }
}

pub fn summarize(cc: &[ConfusionCounts]) -> MetricScores {
    if cc.len() == 1 {
        cc[0].scores()
    } else {
        metrics::weighted_mean_scores(cc)
    }
}

fn add_counts(acc: &mut Vec<ConfusionCounts>, cc: &[ConfusionCounts]) {
    if acc.is_empty() {
        acc.resize(cc.len(), ConfusionCounts::default());
    }
    for (a, c) in acc.iter_mut().zip(cc) {
        a.add(c);
    }
}

/// One row of `curves.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub lr: f64,
}

impl CurveRow {
    fn new(epoch: usize, split: &str, loss: f64, s: &MetricScores, lr: f64) -> Self {
        CurveRow {
            epoch,
            split: split.into(),
            loss,
            dice: s.dice,
            iou: s.iou,
            sensitivity: s.sensitivity,
            specificity: s.specificity,
            lr,
        }
    }
}

pub const CURVES_HEADER: &str = "epoch,split,loss,dice,iou,sensitivity,specificity,lr";

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.split, r.loss, r.dice, r.iou, r.sensitivity, r.specificity, r.lr
        );
    }
    s
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVES_HEADER) {
        return Err(Error::format("curves.csv", format!("expected header `{CURVES_HEADER}`")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("curves.csv", format!("bad number `{s}`")));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::format("curves.csv", format!("expected 8 fields in `{l}`")));
            }
            Ok(CurveRow {
                epoch: f[0].parse().map_err(|_| Error::format("curves.csv", format!("bad epoch `{}`", f[0])))?,
                split: f[1].to_string(),
                loss: num(f[2])?,
                dice: num(f[3])?,
                iou: num(f[4])?,
                sensitivity: num(f[5])?,
                specificity: num(f[6])?,
                lr: num(f[7])?,
            })
        })
        .collect()
}

/// Anything that maps `[n, 1, spatial...]` images to probabilities.
pub trait Segmenter {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Segmenter + ?Sized> Segmenter for &T {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).probabilities(image)
    }
}

impl Segmenter for Model<f32> {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(image)
    }
}

/// A 2D network applied slice by slice to volumes `[1, 1, s, h, w]`.
pub struct SliceWise<'a>(pub &'a Model<f32>);

impl Segmenter for SliceWise<'_> {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (slices, shape) = volume_as_slices(image)?;
        let p = self.0.forward(&slices)?;
        if p.channels() != 1 {
            return Err(Error::Config("slice-wise volume prediction supports binary tasks only".into()));
        }
        p.reshape(&shape)
    }
}

/// The two-network pipeline: 2D probabilities gate the volume before the
/// 3D network.
pub struct Hybrid<'a> {
    pub model2d: &'a Model<f32>,
    pub model3d: &'a Model<f32>,
}

impl Segmenter for Hybrid<'_> {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (slices, shape) = volume_as_slices(image)?;
        let yp = self.model2d.forward(&slices)?;
        let enhanced = roi_enhance_with(&slices, &yp)?.reshape(&shape)?;
        self.model3d.forward(&enhanced)
    }
}

/// `[1, 1, s, h, w]` as `[s, 1, h, w]`, with the original shape.
fn volume_as_slices(image: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let sh = image.shape();
    if sh.len() != 5 || sh[0] != 1 || sh[1] != 1 {
        return Err(Error::Shape(format!("expected one single-channel volume [1, 1, s, h, w], got {sh:?}")));
    }
    Ok((image.clone().reshape(&[sh[2], 1, sh[3], sh[4]])?, sh.to_vec()))
}

/// `x * yp` elementwise.
pub fn roi_enhance_with(x: &Tensor<f32>, yp: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x.shape() != yp.shape() {
        return Err(Error::Shape(format!(
            "2D output {:?} does not match the slices {:?}",
            yp.shape(),
            x.shape()
        )));
    }
    x.zip_map(yp, |a, b| a * b)
}

/// Multiplies every slice of `volume` by the 2D network's probability map.
pub fn roi_enhance(volume: &Volume, model2d: &Model<f32>) -> Result<Volume> {
    let [s, h, w] = volume.shape;
    let x = Tensor::from_vec(vec![s, 1, h, w], volume.data.clone())?;
    let yp = model2d.forward(&x)?;
    if yp.channels() != 1 {
        return Err(Error::Config("ROI enhancement needs a single-channel 2D network".into()));
    }
    let out = roi_enhance_with(&x, &yp)?;
    Volume::new(volume.shape, out.into_data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Probabilities and a hard mask for `[n, 1, spatial...]` images. Binary
/// masks use `p > threshold`.
pub fn predict(seg: &dyn Segmenter, image: &Tensor<f32>, threshold: f64) -> Result<Prediction> {
    let probabilities = seg.probabilities(image)?;
    let mask = hard_labels(&probabilities, threshold);
    Ok(Prediction { probabilities, mask })
}

/// Scores of one model on a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    /// Counts pooled over all samples, one entry per foreground class.
    pub pooled: Vec<ConfusionCounts>,
    pub scores: MetricScores,
    /// Dice of every sample, in input order.
    pub sample_dice: Vec<f64>,
    pub mean_loss: f64,
}

pub fn score_samples(seg: &dyn Segmenter, samples: &[Sample], threshold: f64, loss: &LossConfig) -> Result<SampleScores> {
    let mut pooled = Vec::new();
    let mut sample_dice = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for s in samples {
        let (x, y) = stack(&[s])?;
        let p = seg.probabilities(&x)?;
        let cc = foreground_confusions(&p, &y, threshold)?;
        sample_dice.push(summarize(&cc).dice);
        add_counts(&mut pooled, &cc);
        loss_sum += losses::focal_tversky_loss(&p, &targets(&y, p.channels())?, loss)?;
    }
    if samples.is_empty() {
        return Err(Error::Contract("no samples to score".into()));
    }
    Ok(SampleScores {
        scores: summarize(&pooled),
        pooled,
        sample_dice,
        mean_loss: loss_sum / samples.len() as f64,
    })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation dice (or the last ones without a
    /// validation set).
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_epoch: Option<usize>,
    pub curves: Vec<CurveRow>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub iterations: usize,
}

/// Where a training run writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
    pub prefix: String,
}

impl CheckpointSink {
    pub fn new(dir: &Path, prefix: &str) -> Self {
        CheckpointSink { dir: Some(dir.to_path_buf()), prefix: prefix.into() }
    }

    fn write(&self, name: &str, model: &Model<f32>, meta: CheckpointMeta) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}{name}.ckpt", self.prefix));
        Checkpoint::from_model(model, meta).save(&path)?;
        Ok(Some(path))
    }
}

fn check_finite(loss: f64, step: usize, epoch: usize, sink: &CheckpointSink, model: &Model<f32>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let meta = CheckpointMeta { phase: "diverged".into(), epoch, step, ..Default::default() };
    let snap = sink.write("diverged", model, meta)?;
    let at = snap.map(|p| format!(", parameters saved to {}", p.display())).unwrap_or_default();
    Err(Error::Divergence(format!("loss became {loss} at epoch {epoch}, step {step}{at}")))
}

fn trainable_grads(grads: &[ParamGrad<f32>], slot: usize) -> Vec<(&str, &Tensor<f32>)> {
    grads.iter().filter(|g| g.slot == slot).map(|g| (g.name.as_str(), &g.grad)).collect()
}

fn grads_finite(grads: &[ParamGrad<f32>]) -> bool {
    grads.iter().all(|g| g.grad.all_finite())
}

/// Trains one network on samples of matching dimensionality.
pub fn train_network(
    mut model: Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    for s in train.iter().chain(val) {
        model.config.check_input(&{
            let mut sh = vec![1];
            sh.extend_from_slice(s.image.shape());
            sh
        })?;
    }
    let classes = model.config.num_classes;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut curves = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = model.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut step = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        debug_assert_eq!(adam.lr, lr_schedule(cfg.learning_rate, cfg.decay, cfg.decay_every, epoch));
        order.shuffle(&mut rng);
        let mut pooled = Vec::new();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = stack(&batch)?;
            let gt = targets(&labels, classes)?;
            let grads = {
                let mut tb = TapeBackend::new(vec![Binding { store: &mut model.params, train: true, trainable: true }]);
                let xin = tb.graph.input(x);
                let out = network::forward(&mut tb, &model.config, &xin)?;
                let (l, g) = losses::loss_with_grad(cfg.loss_kind, tb.graph.value(out), &gt, &cfg.loss)?;
                add_counts(&mut pooled, &foreground_confusions(tb.graph.value(out), &labels, cfg.threshold)?);
                check_finite(l, step, epoch, sink, &best)?;
                let root = tb.graph.scalar(l as f32, &[out], vec![g])?;
                loss_sum += l;
                step_losses.push(l);
                tb.graph.backward(root)?
            };
            if !grads_finite(&grads) {
                check_finite(f64::NAN, step, epoch, sink, &model)?;
            }
            adam.update(&mut model.params, &trainable_grads(&grads, 0))?;
            step += 1;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        curves.push(CurveRow::new(epoch, "train", loss_sum / batches as f64, &summarize(&pooled), adam.lr));
        let select = if val.is_empty() {
            -loss_sum / batches as f64
        } else {
            let s = score_samples(&model, val, cfg.threshold, &cfg.loss)?;
            curves.push(CurveRow::new(epoch, "val", s.mean_loss, &s.scores, adam.lr));
            s.scores.dice
        };
        if select > best_dice {
            best_dice = select;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let meta = CheckpointMeta { phase: "train".into(), epoch, step, ..Default::default() };
            sink.write(&format!("epoch{epoch:04}"), &model, meta)?;
        }
        info!("epoch {epoch}: loss {:.5} lr {:.3e}", loss_sum / batches as f64, adam.lr);
    }
    let meta = CheckpointMeta {
        phase: sink.prefix.trim_end_matches('_').to_string(),
        epoch: best_epoch.unwrap_or(0),
        step,
        selection_score: best_epoch.map(|_| best_dice),
        seed: cfg.seed,
    };
    sink.write("best", &best, meta)?;
    Ok(TrainOutcome { best, last: model, best_epoch, curves, step_losses, iterations: step })
}

/// Samples of the given subjects as 2D slices (volumes are cut into their
/// slices).
pub fn slice_samples(m: &DatasetManifest, extents: [usize; 2], depth: usize, subjects: &[String]) -> Result<Vec<Sample>> {
    let idx = m.indices_for(subjects);
    match &m.samples {
        Samples::Slices(_) => data::load_slices(m, extents, Some(&idx))?.iter().map(Sample::from_slice).collect(),
        Samples::Volumes(_) => data::load_volumes(m, extents, depth, Some(&idx))?
            .iter()
            .flat_map(|v| v.slices())
            .map(|s| Sample::from_slice(&s))
            .collect(),
    }
}

pub fn volume_samples(m: &DatasetManifest, extents: [usize; 2], depth: usize, subjects: &[String]) -> Result<Vec<Sample>> {
    let idx = m.indices_for(subjects);
    data::load_volumes(m, extents, depth, Some(&idx))?.iter().map(Sample::from_volume).collect()
}

/// Samples for a network config: slices for 2D, volumes for 3D.
pub fn samples_for(m: &DatasetManifest, cfg: &NetworkConfig, subjects: &[String]) -> Result<Vec<Sample>> {
    match cfg.dims {
        Dims::D2 => slice_samples(m, [cfg.input_size[0], cfg.input_size[1]], default_depth(m), subjects),
        Dims::D3 => {
            if m.dims != Dims::D3 {
                return Err(Error::Config("a 3D network needs a volume dataset".into()));
            }
            volume_samples(m, [cfg.input_size[1], cfg.input_size[2]], cfg.input_size[0], subjects)
        }
    }
}

/// Slice-level training of a 2D network on the manifest's subjects, with a
/// subject-level validation split.
pub fn train_phase1(
    cfg2d: &NetworkConfig,
    manifest: &DatasetManifest,
    train_cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    if cfg2d.dims != Dims::D2 {
        return Err(Error::Config("phase 1 trains a 2D network".into()));
    }
    train_single(cfg2d, manifest, train_cfg, sink)
}

/// Trains one network of either dimensionality on the manifest's subjects,
/// with a subject-level validation split. The class count is taken from the
/// manifest.
pub fn train_single(
    cfg: &NetworkConfig,
    manifest: &DatasetManifest,
    train_cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.num_classes = network_classes(manifest.num_classes);
    let (tr, va) = data::validation_split(&manifest.subjects(), train_cfg.val_fraction, train_cfg.seed);
    let train = samples_for(manifest, &cfg, &tr)?;
    let val = samples_for(manifest, &cfg, &va)?;
    let model = network::build(&cfg, train_cfg.seed)?;
    train_network(model, &train, &val, train_cfg, sink)
}

fn default_depth(m: &DatasetManifest) -> usize {
    match &m.samples {
        Samples::Volumes(v) => v.first().map_or(1, |s| s.slices),
        Samples::Slices(_) => 1,
    }
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub model2d: Model<f32>,
    pub model3d: Model<f32>,
    pub best_epoch: Option<usize>,
    pub curves: Vec<CurveRow>,
    /// Joint objective of every volume step.
    pub step_losses: Vec<f64>,
}

/// Joint training of the 2D network (fine-tuned) and the 3D network on
/// ROI-enhanced volumes.
pub fn train_phase2(
    model2d: &Model<f32>,
    hybrid: &HybridConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<Phase2Outcome> {
    cfg.validate()?;
    hybrid.validate()?;
    if model2d.config.input_size != hybrid.cfg2d.input_size || model2d.config.levels != hybrid.cfg2d.levels {
        return Err(Error::Config("phase-1 model does not match the hybrid 2D config".into()));
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training volumes".into()));
    }
    let mut m2 = model2d.clone();
    let mut m3 = network::build::<f32>(&hybrid.cfg3d, cfg.seed.wrapping_add(1))?;
    for s in train.iter().chain(val) {
        let mut sh = vec![1];
        sh.extend_from_slice(s.image.shape());
        m3.config.check_input(&sh)?;
    }
    let lambda = hybrid.lambda2d;
    let mut adam2 = Adam::new(cfg.learning_rate);
    let mut adam3 = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut curves, mut step_losses) = (Vec::new(), Vec::new());
    let (mut best, mut best_dice, mut best_epoch) = ((m2.clone(), m3.clone()), f64::NEG_INFINITY, None);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        adam2.lr = cfg.lr_at(epoch);
        adam3.lr = adam2.lr;
        order.shuffle(&mut rng);
        let mut pooled = Vec::new();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| step >= m) {
                break;
            }
            let mut acc: HashMap<(usize, String), Tensor<f32>> = HashMap::new();
            let mut names: Vec<(usize, String)> = Vec::new();
            let w = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &train[i];
                let sh = s.image.shape().to_vec();
                let (d, h, wd) = (sh[1], sh[2], sh[3]);
                let slices = s.image.clone().reshape(&[d, 1, h, wd])?;
                let gt2 = targets(&s.labels.clone().reshape(&[d, 1, h, wd])?, 1)?;
                let gt3 = targets(&s.labels.clone().reshape(&[1, 1, d, h, wd])?, 1)?;
                let grads = {
                    let mut tb = TapeBackend::new(vec![
                        Binding { store: &mut m2.params, train: hybrid.finetune2d, trainable: hybrid.finetune2d },
                        Binding { store: &mut m3.params, train: true, trainable: true },
                    ]);
                    tb.set_active(0);
                    let x = tb.graph.input(slices);
                    let y2 = network::forward(&mut tb, &hybrid.cfg2d, &x)?;
                    let (l2, g2) = losses::focal_tversky_item_mean_with_grad(tb.graph.value(y2), &gt2, &cfg.loss)?;
                    let n2 = tb.graph.scalar(l2 as f32, &[y2], vec![g2])?;
                    let enhanced = tb.graph.mul(x, y2)?;
                    let enhanced = tb.graph.reshape(enhanced, &[1, 1, d, h, wd])?;
                    tb.set_active(1);
                    let y3 = network::forward(&mut tb, &hybrid.cfg3d, &enhanced)?;
                    let (l3, g3) = losses::loss_with_grad(cfg.loss_kind, tb.graph.value(y3), &gt3, &cfg.loss)?;
                    add_counts(&mut pooled, &foreground_confusions(tb.graph.value(y3), &s.labels.clone().reshape(&[1, 1, d, h, wd])?, cfg.threshold)?);
                    let n3 = tb.graph.scalar(l3 as f32, &[y3], vec![g3])?;
                    let f = lambda * l2 + l3;
                    check_finite(f, step, epoch, sink, &best.1)?;
                    batch_loss += f;
                    step_losses.push(f);
                    let root = tb.graph.weighted_sum(&[(n2, lambda), (n3, 1.0)])?;
                    tb.graph.backward(root)?
                };
                if !grads_finite(&grads) {
                    check_finite(f64::NAN, step, epoch, sink, &m3)?;
                }
                for g in grads {
                    let key = (g.slot, g.name);
                    match acc.get_mut(&key) {
                        Some(t) => t.data_mut().iter_mut().zip(g.grad.data()).for_each(|(a, b)| *a += w * b),
                        None => {
                            names.push(key.clone());
                            acc.insert(key, g.grad.map(|v| v * w));
                        }
                    }
                }
            }
            let list = |slot: usize| -> Vec<(&str, &Tensor<f32>)> {
                names.iter().filter(|k| k.0 == slot).map(|k| (k.1.as_str(), &acc[k])).collect()
            };
            if hybrid.finetune2d {
                adam2.update(&mut m2.params, &list(0))?;
            }
            adam3.update(&mut m3.params, &list(1))?;
            loss_sum += batch_loss / chunk.len() as f64;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break;
        }
        curves.push(CurveRow::new(epoch, "train", loss_sum / batches as f64, &summarize(&pooled), adam3.lr));
        let select = if val.is_empty() {
            -loss_sum / batches as f64
        } else {
            let s = score_samples(&Hybrid { model2d: &m2, model3d: &m3 }, val, cfg.threshold, &cfg.loss)?;
            curves.push(CurveRow::new(epoch, "val", s.mean_loss, &s.scores, adam3.lr));
            s.scores.dice
        };
        if select > best_dice {
            best_dice = select;
            best = (m2.clone(), m3.clone());
            best_epoch = Some(epoch);
        }
        info!("phase 2 epoch {epoch}: joint loss {:.5}", loss_sum / batches as f64);
    }
    let meta = |phase: &str| CheckpointMeta {
        phase: phase.into(),
        epoch: best_epoch.unwrap_or(0),
        step,
        selection_score: best_epoch.map(|_| best_dice),
        seed: cfg.seed,
    };
    let name2 = CheckpointSink { dir: sink.dir.clone(), prefix: format!("{}finetuned2d_", sink.prefix) };
    name2.write("best", &best.0, meta("phase2_2d"))?;
    let name3 = CheckpointSink { dir: sink.dir.clone(), prefix: format!("{}model3d_", sink.prefix) };
    name3.write("best", &best.1, meta("phase2_3d"))?;
    Ok(Phase2Outcome { model2d: best.0, model3d: best.1, best_epoch, curves, step_losses })
}

/// Both phases of hybrid training on a volume manifest.
#[derive(Clone, Debug)]
pub struct HybridOutcome {
    /// `None` when a trained 2D model was supplied.
    pub phase1: Option<TrainOutcome>,
    pub phase2: Phase2Outcome,
}

/// Phase 1 on the slices of `subjects`, then phase 2 on their volumes. Both
/// phases hold out the same validation subjects (drawn with `cfg2d.seed`).
/// Passing `phase1_model` skips phase 1. Checkpoints are written as
/// `phase1_best.ckpt`, `finetuned2d_best.ckpt` and `model3d_best.ckpt`.
pub fn train_hybrid(
    hybrid: &HybridConfig,
    manifest: &DatasetManifest,
    subjects: &[String],
    cfg2d: &TrainConfig,
    cfg3d: &TrainConfig,
    phase1_model: Option<Model<f32>>,
    sink: &CheckpointSink,
) -> Result<HybridOutcome> {
    hybrid.validate()?;
    if manifest.dims != Dims::D3 {
        return Err(Error::Config("hybrid training needs a volume dataset".into()));
    }
    if network_classes(manifest.num_classes) != 1 {
        return Err(Error::Config("hybrid training supports binary tasks only".into()));
    }
    let (tr, va) = data::validation_split(subjects, cfg2d.val_fraction, cfg2d.seed);
    let phase1 = match phase1_model {
        Some(_) => None,
        None => {
            let c = &hybrid.cfg2d;
            let extents = [c.input_size[0], c.input_size[1]];
            let depth = hybrid.cfg3d.input_size[0];
            let train = slice_samples(manifest, extents, depth, &tr)?;
            let val = slice_samples(manifest, extents, depth, &va)?;
            let model = network::build(c, cfg2d.seed)?;
            let p1sink = CheckpointSink { dir: sink.dir.clone(), prefix: format!("{}phase1_", sink.prefix) };
            Some(train_network(model, &train, &val, cfg2d, &p1sink)?)
        }
    };
    let model2d = match (&phase1_model, &phase1) {
        (Some(m), _) => m,
        (None, Some(p)) => &p.best,
        (None, None) => unreachable!("phase 1 ran"),
    };
    let train = samples_for(manifest, &hybrid.cfg3d, &tr)?;
    let val = samples_for(manifest, &hybrid.cfg3d, &va)?;
    let phase2 = train_phase2(model2d, hybrid, &train, &val, cfg3d, sink)?;
    Ok(HybridOutcome { phase1, phase2 })
}

/// Model names used by [`cross_validate_hybrid`].
pub const HYBRID_NAME: &str = "hybrid";
pub const SLICE_NAME: &str = "slice2d";

/// Cross-validated hybrid training. Each fold reports the phase-1 network
/// applied slice by slice (`slice2d`) next to the hybrid pair (`hybrid`),
/// and the two are compared by a rank-sum test on per-volume dice.
pub fn cross_validate_hybrid(
    manifest: &DatasetManifest,
    hybrid: &HybridConfig,
    cfg2d: &TrainConfig,
    cfg3d: &TrainConfig,
) -> Result<EvaluationReport> {
    let k = manifest.num_folds();
    if k < 2 {
        return Err(Error::Dataset("manifest has no fold assignment".into()));
    }
    let all = manifest.subjects();
    let mut report = EvaluationReport::default();
    let (mut d2, mut dh) = (Vec::new(), Vec::new());
    for fold in 0..k {
        let test_subjects = manifest.fold_subjects(fold);
        let train_subjects: Vec<String> = all.iter().filter(|s| !test_subjects.contains(s)).cloned().collect();
        let seeded = |c: &TrainConfig| TrainConfig { seed: c.seed.wrapping_add(fold as u64), ..c.clone() };
        let out = train_hybrid(hybrid, manifest, &train_subjects, &seeded(cfg2d), &seeded(cfg3d), None, &CheckpointSink::default())?;
        let p1 = out.phase1.expect("phase 1 ran");
        let test = samples_for(manifest, &hybrid.cfg3d, &test_subjects)?;
        let s2 = score_samples(&SliceWise(&p1.best), &test, cfg3d.threshold, &cfg3d.loss)?;
        let pair = Hybrid { model2d: &out.phase2.model2d, model3d: &out.phase2.model3d };
        let sh = score_samples(&pair, &test, cfg3d.threshold, &cfg3d.loss)?;
        record_fold(&mut report, SLICE_NAME, fold, &s2);
        record_fold(&mut report, HYBRID_NAME, fold, &sh);
        d2.extend(s2.sample_dice);
        dh.extend(sh.sample_dice);
        info!("fold {fold}: slice2d dice {:.4}, hybrid dice {:.4}", s2.scores.dice, sh.scores.dice);
    }
    let compare = [(HYBRID_NAME.to_string(), SLICE_NAME.to_string())];
    finish_report(report, vec![(SLICE_NAME.into(), d2), (HYBRID_NAME.into(), dh)], &compare)
}

/// A model family evaluated by cross-validation.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub name: String,
    pub network: NetworkConfig,
}

/// Trains and tests every candidate on every fold, aggregates fold scores,
/// and runs rank-sum tests on per-sample dice for each requested pair.
pub fn cross_validate(
    manifest: &DatasetManifest,
    candidates: &[Candidate],
    train_cfg: &TrainConfig,
    compare: &[(String, String)],
) -> Result<EvaluationReport> {
    let k = manifest.num_folds();
    if k < 2 {
        return Err(Error::Dataset("manifest has no fold assignment".into()));
    }
    let all = manifest.subjects();
    let mut report = EvaluationReport::default();
    let mut sample_dice: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
    for fold in 0..k {
        let test_subjects = manifest.fold_subjects(fold);
        let train_subjects: Vec<String> = all.iter().filter(|s| !test_subjects.contains(s)).cloned().collect();
        let (tr, va) = data::validation_split(&train_subjects, train_cfg.val_fraction, train_cfg.seed.wrapping_add(fold as u64));
        for (ci, c) in candidates.iter().enumerate() {
            let mut cfg = c.network.clone();
            cfg.num_classes = network_classes(manifest.num_classes);
            let train = samples_for(manifest, &cfg, &tr)?;
            let val = samples_for(manifest, &cfg, &va)?;
            let test = samples_for(manifest, &cfg, &test_subjects)?;
            let model = network::build(&cfg, train_cfg.seed)?;
            let out = train_network(model, &train, &val, train_cfg, &CheckpointSink::default())?;
            let s = score_samples(&out.best, &test, train_cfg.threshold, &train_cfg.loss)?;
            record_fold(&mut report, &c.name, fold, &s);
            sample_dice[ci].extend(&s.sample_dice);
            info!("fold {fold} {}: dice {:.4}", c.name, s.scores.dice);
        }
    }
    finish_report(report, candidates.iter().map(|c| c.name.clone()).zip(sample_dice).collect(), compare)
}

/// Scores already-trained models per fold: `models[i].1[f]` is tested on
/// fold `f` (a single model is reused for every fold).
pub fn evaluate_models(
    manifest: &DatasetManifest,
    models: &[(String, Vec<Model<f32>>)],
    threshold: f64,
    loss: &LossConfig,
    compare: &[(String, String)],
) -> Result<EvaluationReport> {
    let k = manifest.num_folds();
    if k < 2 {
        return Err(Error::Dataset("manifest has no fold assignment".into()));
    }
    let mut report = EvaluationReport::default();
    let mut dice = Vec::new();
    for (name, per_fold) in models {
        if per_fold.len() != 1 && per_fold.len() != k {
            return Err(Error::Contract(format!("`{name}` needs one model or one per fold ({k})")));
        }
        let mut all = Vec::new();
        for fold in 0..k {
            let m = &per_fold[fold.min(per_fold.len() - 1)];
            let test = samples_for(manifest, &m.config, &manifest.fold_subjects(fold))?;
            let s = score_samples(m, &test, threshold, loss)?;
            record_fold(&mut report, name, fold, &s);
            all.extend(s.sample_dice);
        }
        dice.push((name.clone(), all));
    }
    finish_report(report, dice, compare)
}

pub fn record_fold(report: &mut EvaluationReport, model: &str, fold: usize, s: &SampleScores) {
    if s.pooled.len() == 1 {
        report.push_fold(model, "lesion", fold, &s.scores);
    } else {
        for (i, c) in s.pooled.iter().enumerate() {
            report.push_fold(model, &format!("class{}", i + 1), fold, &c.scores());
        }
        report.push_fold(model, "weighted", fold, &s.scores);
    }
}

fn finish_report(
    mut report: EvaluationReport,
    sample_dice: Vec<(String, Vec<f64>)>,
    compare: &[(String, String)],
) -> Result<EvaluationReport> {
    report.sample_dice = sample_dice;
    report.aggregate()?;
    for (a, b) in compare {
        report.compare(a, b)?;
    }
    Ok(report)
}

const MAGIC: &[u8; 8] = b"CSNCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub selection_score: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// A serialized model. Layout: 8-byte magic, `u32` version, `u64` header
/// length, JSON header, then every tensor as little-endian `f32` in header
/// order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(m: &Model<f32>, meta: CheckpointMeta) -> Self {
        Checkpoint { config: m.config.clone(), meta, params: m.params.clone() }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        let specs = network::trace(&self.config)?.specs;
        self.params.check_against(&specs)?;
        Ok(Model { config: self.config, specs, params: self.params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, k, t)| TensorEntry { name: n.into(), kind: k, shape: t.shape().to_vec() })
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + h.len() + 4 * self.params.iter().map(|p| p.2.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let mut params = ParamStore::default();
        let mut off = hend;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = off + 4 * n;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for `{}`", e.name)));
            }
            let data = bytes[off..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.insert(&e.name, e.kind, Tensor::from_vec(e.shape, data)?)?;
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { config: header.config, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub fn save_model(m: &Model<f32>, meta: CheckpointMeta, path: &Path) -> Result<()> {
    Checkpoint::from_model(m, meta).save(path)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.into_model()
}

/// `runs/<name>/` with `config.snapshot`, `checkpoints/`, `curves.csv`,
/// `report.json` and `overlays/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("overlays")] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn curves_path(&self) -> PathBuf {
        self.root.join("curves.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn overlays(&self) -> PathBuf {
        self.root.join("overlays")
    }

    pub fn write_snapshot(&self, text: &str) -> Result<()> {
        let p = self.snapshot_path();
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn write_curves(&self, rows: &[CurveRow]) -> Result<()> {
        let p = self.curves_path();
        std::fs::write(&p, curves_csv(rows)).map_err(|e| Error::io(&p, e))
    }

    pub fn write_report(&self, report: &EvaluationReport) -> Result<()> {
        report.write(&self.report_path(), &self.root.join("report.csv"))
    }
}

/// Logs a warning when the moving average of `losses` over `window` steps
/// rises; returns whether it never did.
pub fn moving_average_non_increasing(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || losses.len() <= window {
        return true;
    }
    let mut sum: f64 = losses[..window].iter().sum();
    let mut prev = sum / window as f64;
    for i in window..losses.len() {
        sum += losses[i] - losses[i - window];
        let cur = sum / window as f64;
        if cur > prev + tolerance {
            warn!("moving average rose from {prev:.5} to {cur:.5} at step {i}");
            return false;
        }
        prev = cur;
    }
    true
}
