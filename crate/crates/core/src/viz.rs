//! Raster outputs: prediction overlays and training-curve plots.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::pipeline::CurveRow;

pub const TP_COLOR: [u8; 3] = [255, 255, 0];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];
pub const FP_COLOR: [u8; 3] = [0, 0, 255];

/// Overlay color of one pixel, or `None` where both masks are background.
pub fn pixel_color(pred: bool, gt: bool) -> Option<[u8; 3]> {
    match (pred, gt) {
        (true, true) => Some(TP_COLOR),
        (false, true) => Some(FN_COLOR),
        (true, false) => Some(FP_COLOR),
        (false, false) => None,
    }
}

/// Colors prediction errors over a grayscale `[h, w]` plane with values
/// in `[0, 1]`. Masks count any nonzero label as foreground.
pub fn overlay(image: &[f32], pred: &[u8], gt: &[u8], extents: [usize; 2]) -> Result<RgbImage> {
    let [h, w] = extents;
    let n = h * w;
    if image.len() != n || pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "overlay needs {n} pixels, got image {} pred {} gt {}",
            image.len(),
            pred.len(),
            gt.len()
        )));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = (image[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb(pixel_color(pred[i] != 0, gt[i] != 0).unwrap_or([g, g, g]));
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &[f32], pred: &[u8], gt: &[u8], extents: [usize; 2]) -> Result<()> {
    save(path, &overlay(image, pred, gt, extents)?)
}

fn save(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const SERIES: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// Line chart of `series` against their index, scaled to fit. Axes are
/// drawn in black; series colors follow the order of `series`.
pub fn line_chart(series: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let finite = || series.iter().flatten().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let (x0, x1) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (y0, y1) = ((HEIGHT - MARGIN) as f64, MARGIN as f64);
    let at = |i: usize, v: f64| (x0 + (x1 - x0) * i as f64 / (n - 1) as f64, y0 + (y1 - y0) * (v - lo) / (hi - lo));
    line(&mut img, (x0, y0), (x1, y0), [0, 0, 0]);
    line(&mut img, (x0, y0), (x0, y1), [0, 0, 0]);
    for (s, color) in series.iter().zip(SERIES.iter().cycle()) {
        let pts: Vec<_> = s.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| at(i, v)).collect();
        for p in pts.windows(2) {
            line(&mut img, p[0], p[1], *color);
        }
        if let [p] = pts[..] {
            line(&mut img, p, p, *color);
        }
    }
    img
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if (0..WIDTH as i64).contains(&px) && (0..HEIGHT as i64).contains(&py) {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

/// Writes `loss.png` and `dice.png` into `dir`, one line per split
/// (train first, then val).
pub fn write_curve_plots(dir: &Path, rows: &[CurveRow]) -> Result<Vec<PathBuf>> {
    let mut splits: Vec<&str> = Vec::new();
    for r in rows {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let mut written = Vec::new();
    for (name, get) in [("loss", (|r: &CurveRow| r.loss) as fn(&CurveRow) -> f64), ("dice", |r| r.dice)] {
        let series: Vec<Vec<f64>> =
            splits.iter().map(|s| rows.iter().filter(|r| r.split == *s).map(get).collect()).collect();
        let path = dir.join(format!("{name}.png"));
        save(&path, &line_chart(&series))?;
        written.push(path);
    }
    Ok(written)
}
