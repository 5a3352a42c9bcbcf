//! Dataset manifests, slice and volume IO, preprocessing, fold splitting
//! and a synthetic lesion corpus.
//!
//! Layouts, relative to a dataset root:
//!
//! ```text
//! 2D: images/<subject>[_<slice>].png   masks/<same name>.png
//! 3D: volumes/<subject>.<ext>          masks/<subject>.<ext>
//! ```
//!
//! Volume extensions are `.nii`, `.nii.gz` or `.raw`. A `.raw` file holds
//! little-endian `f32` values in `[depth][height][width]` order and sits next
//! to a `<subject>.json` sidecar `{"shape": [d, h, w]}`. Mask rasters store
//! class indices directly; a mask whose values are exactly `{0, 255}` is read
//! as binary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn for_classes(num_classes: usize) -> Task {
        if num_classes <= 2 {
            Task::Binary
        } else {
            Task::Multiclass
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSample {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub subject: String,
    pub slice: Option<u32>,
    /// `[height, width]` on disk.
    pub extents: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeSample {
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub subject: String,
    pub slices: usize,
    /// `[height, width]` of every slice on disk.
    pub extents: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "snake_case")]
pub enum Samples {
    Slices(Vec<SliceSample>),
    Volumes(Vec<VolumeSample>),
}

/// What to look for under a dataset root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub dims: Dims,
    /// Expected class count. Inferred from the masks when `None`.
    pub num_classes: Option<usize>,
}

impl Layout {
    pub fn new(dims: Dims) -> Self {
        Layout { dims, num_classes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub dims: Dims,
    pub task: Task,
    pub num_classes: usize,
    pub samples: Samples,
    /// Fold index per subject, empty until [`make_folds`] runs.
    #[serde(default)]
    pub folds: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Slices(s) => s.len(),
            Samples::Volumes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct subjects in manifest order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut push = |s: &String| {
            if seen.insert(s.clone()) {
                out.push(s.clone());
            }
        };
        match &self.samples {
            Samples::Slices(s) => s.iter().for_each(|x| push(&x.subject)),
            Samples::Volumes(v) => v.iter().for_each(|x| push(&x.subject)),
        }
        out
    }

    pub fn subject_of(&self, i: usize) -> &str {
        match &self.samples {
            Samples::Slices(s) => &s[i].subject,
            Samples::Volumes(v) => &v[i].subject,
        }
    }

    pub fn num_folds(&self) -> usize {
        self.folds.values().max().map_or(0, |m| m + 1)
    }

    /// Subjects assigned to `fold`, in manifest order.
    pub fn fold_subjects(&self, fold: usize) -> Vec<String> {
        self.subjects().into_iter().filter(|s| self.folds.get(s) == Some(&fold)).collect()
    }

    /// Sample indices whose subject is in `subjects`.
    pub fn indices_for(&self, subjects: &[String]) -> Vec<usize> {
        (0..self.len()).filter(|&i| subjects.iter().any(|s| s == self.subject_of(i))).collect()
    }

    /// Restricts the manifest to the given subjects, keeping order.
    pub fn subset(&self, subjects: &[String]) -> DatasetManifest {
        let keep = |s: &String| subjects.contains(s);
        let samples = match &self.samples {
            Samples::Slices(s) => Samples::Slices(s.iter().filter(|x| keep(&x.subject)).cloned().collect()),
            Samples::Volumes(v) => Samples::Volumes(v.iter().filter(|x| keep(&x.subject)).cloned().collect()),
        };
        DatasetManifest {
            root: self.root.clone(),
            dims: self.dims,
            task: self.task,
            num_classes: self.num_classes,
            samples,
            folds: self.folds.iter().filter(|(s, _)| keep(s)).map(|(s, f)| (s.clone(), *f)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads a cached manifest; sample paths resolve against `root`.
    pub fn load(path: &Path, root: &Path) -> Result<DatasetManifest> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&s)?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

/// Splits `<subject>_<digits>` into subject and slice index.
fn split_stem(stem: &str) -> (String, Option<u32>) {
    if let Some((subject, idx)) = stem.rsplit_once('_') {
        if !subject.is_empty() && !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(i) = idx.parse() {
                return (subject.to_string(), Some(i));
            }
        }
    }
    (stem.to_string(), None)
}

const VOLUME_EXTS: [&str; 3] = [".nii.gz", ".nii", ".raw"];

fn volume_stem(name: &str) -> Option<&str> {
    VOLUME_EXTS.iter().find_map(|e| name.strip_suffix(e))
}

fn list_dir(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Checks mask values are class indices and returns the largest.
fn max_label(mask: &[f32], path: &Path) -> Result<usize> {
    let mut max = 0usize;
    for &v in mask {
        if !(v >= 0.0 && v.fract() == 0.0 && v < 256.0) {
            return Err(Error::Dataset(format!("{}: mask value {v} is not a class index", path.display())));
        }
        max = max.max(v as usize);
    }
    Ok(max)
}

/// Scans a dataset root.
pub fn load_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    let (data_dir, rel) = match layout.dims {
        Dims::D2 => (root.join("images"), "images"),
        Dims::D3 => (root.join("volumes"), "volumes"),
    };
    if !data_dir.is_dir() {
        return Err(Error::Dataset(format!("{} is missing", data_dir.display())));
    }
    let mut max = 0usize;
    let samples = match layout.dims {
        Dims::D2 => {
            let mut out = Vec::new();
            for name in list_dir(&data_dir)? {
                let Some(stem) = name.strip_suffix(".png") else { continue };
                let mask_rel = PathBuf::from("masks").join(&name);
                if !root.join(&mask_rel).is_file() {
                    return Err(Error::Dataset(format!("no mask for image {rel}/{name}")));
                }
                let (w, h) = image::image_dimensions(data_dir.join(&name))?;
                let (mask, mh, mw) = read_png(&root.join(&mask_rel), true)?;
                if (mh, mw) != (h as usize, w as usize) {
                    return Err(Error::Dataset(format!("{name}: mask extents differ from image")));
                }
                max = max.max(max_label(&mask, &mask_rel)?);
                let (subject, slice) = split_stem(stem);
                out.push(SliceSample {
                    image: PathBuf::from(rel).join(&name),
                    mask: mask_rel,
                    subject,
                    slice,
                    extents: [h as usize, w as usize],
                });
            }
            out.sort_by(|a, b| (&a.subject, a.slice).cmp(&(&b.subject, b.slice)));
            Samples::Slices(out)
        }
        Dims::D3 => {
            let mut out = Vec::new();
            for name in list_dir(&data_dir)? {
                let Some(stem) = volume_stem(&name) else { continue };
                let mask_rel = PathBuf::from("masks").join(&name);
                if !root.join(&mask_rel).is_file() {
                    return Err(Error::Dataset(format!("no mask for volume {rel}/{name}")));
                }
                let vol = read_volume(&data_dir.join(&name))?;
                let mask = read_volume(&root.join(&mask_rel))?;
                if vol.shape != mask.shape {
                    return Err(Error::Dataset(format!("{name}: mask shape {:?} differs from volume {:?}", mask.shape, vol.shape)));
                }
                max = max.max(max_label(&mask.data, &mask_rel)?);
                out.push(VolumeSample {
                    volume: PathBuf::from(rel).join(&name),
                    mask: mask_rel,
                    subject: stem.to_string(),
                    slices: vol.shape[0],
                    extents: [vol.shape[1], vol.shape[2]],
                });
            }
            out.sort_by(|a, b| a.subject.cmp(&b.subject));
            Samples::Volumes(out)
        }
    };
    let num_classes = match layout.num_classes {
        Some(k) if max >= k => {
            return Err(Error::Dataset(format!("mask label {max} is outside the configured {k} classes")));
        }
        Some(k) => k,
        None => (max + 1).max(2),
    };
    let m = DatasetManifest {
        root: root.to_path_buf(),
        dims: layout.dims,
        task: Task::for_classes(num_classes),
        num_classes,
        samples,
        folds: BTreeMap::new(),
    };
    if m.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", data_dir.display())));
    }
    Ok(m)
}

/// Uses `root/manifest.json` when present, otherwise scans.
pub fn open_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    let cache = root.join(MANIFEST_FILE);
    if cache.is_file() {
        let m = DatasetManifest::load(&cache, root)?;
        if m.dims == layout.dims {
            return Ok(m);
        }
    }
    load_manifest(root, layout)
}

/// Single-channel raster read as `f32`, `(data, height, width)`.
pub fn read_png(path: &Path, is_mask: bool) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    if is_mask && data.iter().all(|&v| v == 0.0 || v == 255.0) {
        data.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    }
    Ok((data, h, w))
}

/// Writes `[0, 1]` intensities as a 16-bit grayscale raster.
pub fn write_png_intensity(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    let px: Vec<u16> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// Writes class indices as an 8-bit grayscale raster.
pub fn write_png_mask(path: &Path, labels: &[f32], h: usize, w: usize) -> Result<()> {
    let px: Vec<u8> = labels.iter().map(|v| *v as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// A volume in `[depth, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Volume> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("volume shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Volume { shape, data })
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let p = self.shape[1] * self.shape[2];
        &self.data[z * p..(z + 1) * p]
    }
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    shape: [usize; 3],
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name.ends_with(".raw") {
        let side = sidecar_path(path);
        let s = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: RawSidecar = serde_json::from_str(&s)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * meta.shape.iter().product::<usize>() {
            return Err(Error::format(path, format!("expected {:?} f32 values", meta.shape)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Volume::new(meta.shape, data)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        use nifti::{IntoNdArray, NiftiObject};
        let obj = nifti::ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e.to_string()))?;
        let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| Error::format(path, e.to_string()))?;
        if arr.ndim() != 3 {
            return Err(Error::format(path, format!("expected a 3D volume, found {} axes", arr.ndim())));
        }
        let (nx, ny, nz) = (arr.shape()[0], arr.shape()[1], arr.shape()[2]);
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(arr[[x, y, z]]);
                }
            }
        }
        Volume::new([nz, ny, nx], data)
    } else {
        Err(Error::format(path, "unsupported volume extension"))
    }
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name.ends_with(".raw") {
        let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string(&RawSidecar { shape: vol.shape })?).map_err(|e| Error::io(&side, e))
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        let [d, h, w] = vol.shape;
        let arr = ndarray::Array3::from_shape_fn((w, h, d), |(x, y, z)| vol.data[(z * h + y) * w + x]);
        nifti::writer::WriterOptions::new(path).write_nifti(&arr).map_err(|e| Error::format(path, e.to_string()))
    } else {
        Err(Error::format(path, "unsupported volume extension"))
    }
}

/// Source coordinate and weight of linear interpolation with half-pixel
/// centres.
fn linear_taps(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

fn nearest_tap(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Resizes one `h x w` plane. Masks use nearest-neighbour sampling.
pub fn resize_plane(data: &[f32], h: usize, w: usize, oh: usize, ow: usize, is_mask: bool) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = if is_mask {
                data[nearest_tap(y, h, oh) * w + nearest_tap(x, w, ow)]
            } else {
                let (y0, y1, fy) = linear_taps(y, h, oh);
                let (x0, x1, fx) = linear_taps(x, w, ow);
                let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
                let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
                top * (1.0 - fy) + bot * fy
            };
        }
    }
    out
}

/// Min-max normalizes a plane to `[0, 1]` in place. Zero-range planes
/// become zero and return `false`.
pub fn normalize_plane(data: &mut [f32]) -> bool {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        data.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let r = hi - lo;
    data.iter_mut().for_each(|v| *v = (*v - lo) / r);
    true
}

/// Resizes and normalizes an image plane, or resizes a mask plane.
pub fn preprocess_plane(data: &[f32], h: usize, w: usize, target: [usize; 2], is_mask: bool) -> Vec<f32> {
    let mut out = resize_plane(data, h, w, target[0], target[1], is_mask);
    if !is_mask && !normalize_plane(&mut out) {
        warn!("zero-range slice normalized to zeros");
    }
    out
}

/// Resizes every slice of a volume and normalizes image slices.
pub fn preprocess_volume(vol: &Volume, target: [usize; 2], is_mask: bool) -> Volume {
    let [d, h, w] = vol.shape;
    let mut data = Vec::with_capacity(d * target[0] * target[1]);
    let mut flat = 0;
    for z in 0..d {
        let mut p = resize_plane(vol.slice(z), h, w, target[0], target[1], is_mask);
        if !is_mask && !normalize_plane(&mut p) {
            flat += 1;
        }
        data.extend(p);
    }
    if flat > 0 {
        warn!("{flat} zero-range slice(s) normalized to zeros");
    }
    Volume { shape: [d, target[0], target[1]], data }
}

/// Resamples the depth axis to `target` slices.
pub fn standardize_depth(vol: &Volume, target: usize, is_mask: bool) -> Result<Volume> {
    let [d, h, w] = vol.shape;
    if target == 0 || d == 0 {
        return Err(Error::Domain("depth must be at least one slice".into()));
    }
    if d == target {
        return Ok(vol.clone());
    }
    if d == 1 {
        warn!("single-slice volume replicated to {target} slices");
    }
    let p = h * w;
    let mut data = Vec::with_capacity(target * p);
    for z in 0..target {
        if is_mask {
            data.extend_from_slice(vol.slice(nearest_tap(z, d, target)));
        } else {
            let (z0, z1, f) = linear_taps(z, d, target);
            let (a, b) = (vol.slice(z0), vol.slice(z1));
            data.extend(a.iter().zip(b).map(|(x, y)| x * (1.0 - f) + y * f));
        }
    }
    Ok(Volume { shape: [target, h, w], data })
}

/// Assigns subjects to `k` folds: seeded shuffle, then round robin.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let mut subjects = manifest.subjects();
    subjects.sort();
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs at least two folds, got {k}")));
    }
    if k > subjects.len() {
        return Err(Error::Config(format!("{k} folds requested for {} subjects", subjects.len())));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut m = manifest.clone();
    m.folds = subjects.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Ok(m)
}

/// Holds out `fraction` of `subjects` (at least one when there are two or
/// more) for validation. Returns `(train, validation)`.
pub fn validation_split(subjects: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut s = subjects.to_vec();
    s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d));
    let n_val = if s.len() < 2 { 0 } else { ((s.len() as f64 * fraction).round() as usize).clamp(1, s.len() - 1) };
    let val = s.split_off(s.len() - n_val);
    let keep = |set: &[String]| subjects.iter().filter(|x| set.contains(x)).cloned().collect::<Vec<_>>();
    (keep(&s), keep(&val))
}

/// A preprocessed 2D training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceData {
    pub subject: String,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub extents: [usize; 2],
}

/// A preprocessed 3D training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeData {
    pub subject: String,
    pub image: Volume,
    pub mask: Volume,
}

impl VolumeData {
    /// The volume's slices as 2D samples.
    pub fn slices(&self) -> Vec<SliceData> {
        let [_, h, w] = self.image.shape;
        (0..self.image.shape[0])
            .map(|z| SliceData {
                subject: self.subject.clone(),
                image: self.image.slice(z).to_vec(),
                mask: self.mask.slice(z).to_vec(),
                extents: [h, w],
            })
            .collect()
    }
}

/// Loads and preprocesses the listed 2D samples (all when `indices` is
/// `None`).
pub fn load_slices(m: &DatasetManifest, target: [usize; 2], indices: Option<&[usize]>) -> Result<Vec<SliceData>> {
    let Samples::Slices(samples) = &m.samples else {
        return Err(Error::Dataset("expected a 2D slice dataset".into()));
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    indices
        .unwrap_or(&all)
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let (img, h, w) = read_png(&m.resolve(&s.image), false)?;
            let (mask, mh, mw) = read_png(&m.resolve(&s.mask), true)?;
            if (h, w) != (mh, mw) {
                return Err(Error::Dataset(format!("{}: mask extents differ from image", s.image.display())));
            }
            Ok(SliceData {
                subject: s.subject.clone(),
                image: preprocess_plane(&img, h, w, target, false),
                mask: preprocess_plane(&mask, h, w, target, true),
                extents: target,
            })
        })
        .collect()
}

/// Loads, resizes, normalizes and depth-standardizes the listed volumes.
pub fn load_volumes(m: &DatasetManifest, target: [usize; 2], depth: usize, indices: Option<&[usize]>) -> Result<Vec<VolumeData>> {
    let Samples::Volumes(samples) = &m.samples else {
        return Err(Error::Dataset("expected a 3D volume dataset".into()));
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    indices
        .unwrap_or(&all)
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let vol = read_volume(&m.resolve(&s.volume))?;
            let mask = read_volume(&m.resolve(&s.mask))?;
            if vol.shape != mask.shape {
                return Err(Error::Dataset(format!("{}: mask shape differs from volume", s.volume.display())));
            }
            let image = standardize_depth(&preprocess_volume(&vol, target, false), depth, false)?;
            let mask = standardize_depth(&preprocess_volume(&mask, target, true), depth, true)?;
            Ok(VolumeData { subject: s.subject.clone(), image, mask })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

impl VolumeFormat {
    fn ext(self) -> &'static str {
        match self {
            VolumeFormat::Raw => "raw",
            VolumeFormat::Nifti => "nii.gz",
        }
    }
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// `[h, w]` for 2D, `[d, h, w]` for 3D.
    pub extents: Vec<usize>,
    pub dims: Dims,
    pub num_classes: usize,
    pub seed: u64,
    /// Accepted range of the foreground fraction per sample.
    pub lesion_fraction: (f64, f64),
    pub max_lesions: usize,
    /// Gaussian blur width for lesion edges, in pixels.
    pub edge_sigma: f64,
    pub noise: f64,
    pub volume_format: VolumeFormat,
}

impl SynthConfig {
    pub fn new(n: usize, extents: &[usize], num_classes: usize, seed: u64) -> Result<SynthConfig> {
        let dims = match extents.len() {
            2 => Dims::D2,
            3 => Dims::D3,
            k => return Err(Error::Config(format!("synthetic extents need 2 or 3 axes, got {k}"))),
        };
        Ok(SynthConfig {
            n,
            extents: extents.to_vec(),
            dims,
            num_classes,
            seed,
            lesion_fraction: (0.03, 0.25),
            max_lesions: 3,
            edge_sigma: 1.0,
            noise: 0.02,
            volume_format: VolumeFormat::Raw,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic corpus needs at least one sample".into()));
        }
        if self.extents.len() != self.dims.spatial_rank() || self.extents.iter().any(|&e| e < 4) {
            return Err(Error::Config(format!("synthetic extents {:?} are too small", self.extents)));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config("num_classes must lie in 2..=255".into()));
        }
        let (lo, hi) = self.lesion_fraction;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config("lesion fraction range must satisfy 0 < lo < hi < 1".into()));
        }
        if self.max_lesions == 0 {
            return Err(Error::Config("max_lesions must be positive".into()));
        }
        Ok(())
    }
}

/// Separable Gaussian blur of a `[d, h, w]` grid in place.
fn gaussian_blur(data: &mut [f32], shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let src = data.to_vec();
        for (idx, out) in data.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % n;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, k) in (-r..=r).zip(&kernel) {
                let p = pos as isize + t;
                if p >= 0 && (p as usize) < n {
                    acc += k * src[(idx as isize + t * strides[axis] as isize) as usize];
                    norm += k;
                }
            }
            *out = acc / norm;
        }
    }
}

/// Image and label grid of one synthetic sample, `[d, h, w]`.
fn synth_sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>, [usize; 3]) {
    let shape = match cfg.extents[..] {
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => unreachable!("validated"),
    };
    let [d, h, w] = shape;
    let n = d * h * w;
    let is3d = cfg.dims == Dims::D3;
    let coord = |i: usize| {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        ((z as f64 + 0.5) / d as f64, (y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64)
    };
    let (lo, hi) = cfg.lesion_fraction;
    let mut labels = vec![0.0f32; n];
    for _attempt in 0..200 {
        labels.iter_mut().for_each(|v| *v = 0.0);
        let count = rng.random_range(1..=cfg.max_lesions);
        for _ in 0..count {
            let class = rng.random_range(1..cfg.num_classes) as f32;
            let c = (rng.random_range(0.25..0.75), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
            let r = (rng.random_range(0.15..0.35), rng.random_range(0.08..0.22), rng.random_range(0.08..0.22));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (st, ct) = theta.sin_cos();
            for (i, l) in labels.iter_mut().enumerate() {
                let (z, y, x) = coord(i);
                let (dy, dx) = (y - c.1, x - c.2);
                let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
                let dz = if is3d { (z - c.0) / r.0 } else { 0.0 };
                if (u / r.2).powi(2) + (v / r.1).powi(2) + dz * dz <= 1.0 {
                    *l = class;
                }
            }
        }
        let frac = labels.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        if frac >= lo && frac <= hi {
            break;
        }
    }

    // Smooth background from a few low-frequency waves.
    let waves: Vec<(f64, f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let mut lesion: Vec<f32> = labels.iter().map(|&l| if l > 0.0 { 0.25 + 0.15 * l } else { 0.0 }).collect();
    gaussian_blur(&mut lesion, shape, cfg.edge_sigma);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let image = (0..n)
        .map(|i| {
            let (z, y, x) = coord(i);
            let mut b = 0.3;
            for &(fy, fx, fz, ph, a) in &waves {
                b += a * (std::f64::consts::TAU * (fy * y + fx * x + fz * z) + ph).sin();
            }
            (b + lesion[i] as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32
        })
        .collect();
    (image, labels, shape)
}

/// Writes a synthetic corpus under `root` and returns its manifest with
/// five folds when there are enough subjects.
pub fn synth_generate(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (img_dir, mask_dir) = match cfg.dims {
        Dims::D2 => (root.join("images"), root.join("masks")),
        Dims::D3 => (root.join("volumes"), root.join("masks")),
    };
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.n {
        let (image, labels, [d, h, w]) = synth_sample(cfg, &mut rng);
        let subject = format!("s{i:03}");
        match cfg.dims {
            Dims::D2 => {
                let name = format!("{subject}.png");
                write_png_intensity(&img_dir.join(&name), &image, h, w)?;
                write_png_mask(&mask_dir.join(&name), &labels, h, w)?;
            }
            Dims::D3 => {
                let name = format!("{subject}.{}", cfg.volume_format.ext());
                write_volume(&img_dir.join(&name), &Volume::new([d, h, w], image)?)?;
                write_volume(&mask_dir.join(&name), &Volume::new([d, h, w], labels)?)?;
            }
        }
    }
    let layout = Layout { dims: cfg.dims, num_classes: Some(cfg.num_classes) };
    let mut m = load_manifest(root, layout)?;
    if cfg.n >= 5 {
        m = make_folds(&m, 5, cfg.seed)?;
    }
    m.save(&root.join(MANIFEST_FILE))?;
    Ok(m)
}
