//! PSNR, SSIM and directory-level evaluation.
//!
//! Both metrics work on 8-bit levels: tensors are quantized with
//! [`imageio::denormalize_level`] first, so values computed from saved PNGs
//! and from in-memory predictions agree exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::datapipe;
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::{ImageTensor, Mask};

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Channel-major 8-bit levels as f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Levels {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Levels {
    pub fn from_tensor(t: &ImageTensor) -> Self {
        Levels {
            channels: t.channels(),
            height: t.height(),
            width: t.width(),
            data: t
                .data()
                .iter()
                .map(|&v| imageio::denormalize_level(v) as f64)
                .collect(),
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p[c] as f64;
            }
        }
        Levels {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn same_shape(&self, other: &Levels, op: &'static str) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::shape(
                op,
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{}x{}x{}", other.height, other.width, other.channels),
            ));
        }
        Ok(())
    }
}

/// PSNR in dB over the masked pixels (all pixels without a mask).
/// Identical inputs give `f64::INFINITY`.
pub fn psnr_levels(pred: &Levels, gt: &Levels, mask: Option<&Mask>) -> Result<f64> {
    pred.same_shape(gt, "psnr")?;
    if let Some(m) = mask {
        if (m.height(), m.width()) != (gt.height, gt.width) {
            return Err(Error::shape(
                "psnr mask",
                format!("{}x{}", gt.height, gt.width),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
        if m.count() == 0 {
            return Err(Error::InvalidArgument("PSNR mask selects no pixels".into()));
        }
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for c in 0..gt.channels {
        let (p, g) = (pred.plane(c), gt.plane(c));
        for i in 0..p.len() {
            if mask.is_none_or(|m| m.data()[i]) {
                let d = p[i] - g[i];
                sse += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("PSNR over an empty image".into()));
    }
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / (sse / n as f64)).log10())
}

pub fn psnr(pred: &ImageTensor, gt: &ImageTensor, mask: Option<&Mask>) -> Result<f64> {
    psnr_levels(&Levels::from_tensor(pred), &Levels::from_tensor(gt), mask)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k
                .iter()
                .zip(&line[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM, averaged over valid windows and channels.
pub fn ssim_levels(pred: &Levels, gt: &Levels) -> Result<f64> {
    pred.same_shape(gt, "ssim")?;
    let (h, w) = (gt.height, gt.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let k = gaussian_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..gt.channels {
        let (x, y) = (pred.plane(c), gt.plane(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let [mx, my, exx, eyy, exy] =
            [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, h, w, &k));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sx = exx[i] - ux * ux;
            let sy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2))
                / ((ux * ux + uy * uy + c1) * (sx + sy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    ssim_levels(&Levels::from_tensor(pred), &Levels::from_tensor(gt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_disocc: Option<f64>,
    /// Set when a mask existed but selected no pixels.
    pub empty_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean over rows that have a masked PSNR.
    pub mean_psnr_disocc: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Self {
        MetricReport {
            mean_psnr: mean(rows.iter().map(|r| r.psnr)).unwrap_or(f64::NAN),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
            mean_psnr_disocc: mean(rows.iter().filter_map(|r| r.psnr_disocc)),
            rows,
        }
    }

    /// Fixed-width text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let fmt = |v: f64| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.4}")
            }
        };
        let opt = |v: Option<f64>, flagged: bool| match v {
            Some(v) => fmt(v),
            None if flagged => "empty-mask".to_string(),
            None => "-".to_string(),
        };
        let mut s = format!(
            "{:<24} {:>10} {:>8} {:>12}\n",
            "image", "psnr", "ssim", "psnr_disocc"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>8} {:>12}",
                r.image_id,
                fmt(r.psnr),
                fmt(r.ssim),
                opt(r.psnr_disocc, r.empty_mask)
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>10} {:>8} {:>12}",
            "mean",
            fmt(self.mean_psnr),
            fmt(self.mean_ssim),
            opt(self.mean_psnr_disocc, false)
        );
        s
    }

    /// One JSON object per image: `{image_id, psnr, ssim, psnr_disocc}`;
    /// infinite values are written as the string `"inf"`.
    pub fn to_jsonl(&self) -> String {
        let num = |v: f64| {
            if v.is_infinite() {
                json!("inf")
            } else {
                json!(v)
            }
        };
        let mut s = String::new();
        for r in &self.rows {
            let mut obj = json!({
                "image_id": r.image_id,
                "psnr": num(r.psnr),
                "ssim": num(r.ssim),
                "psnr_disocc": r.psnr_disocc.map(num).unwrap_or(Value::Null),
            });
            if r.empty_mask {
                obj["empty_mask"] = json!(true);
            }
            s.push_str(&obj.to_string());
            s.push('\n');
        }
        s
    }

    /// Writes `metrics.txt` and `metrics.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.txt", self.to_table()),
            ("metrics.jsonl", self.to_jsonl()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for e in rd {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn read_cropped(path: &Path, crop: Option<(usize, usize)>) -> Result<RgbImage> {
    let img = imageio::read_rgb(path)?;
    match crop {
        None => Ok(img),
        Some(size) => {
            let (top, left) =
                datapipe::center_offsets(img.height() as usize, img.width() as usize, size)
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            Ok(image::imageops::crop_imm(
                &img,
                left as u32,
                top as u32,
                size.1 as u32,
                size.0 as u32,
            )
            .to_image())
        }
    }
}

fn evaluate_one(
    pred: &Path,
    gt: &Path,
    mask: Option<PathBuf>,
    id: String,
    crop: Option<(usize, usize)>,
) -> Result<ImageMetrics> {
    let p = Levels::from_rgb(&read_cropped(pred, crop)?);
    let g = Levels::from_rgb(&read_cropped(gt, crop)?);
    let psnr = psnr_levels(&p, &g, None)?;
    let ssim = ssim_levels(&p, &g)?;
    let (psnr_disocc, empty_mask) = match mask {
        Some(m) => {
            let mut m = imageio::load_mask(&m)?;
            if let Some((h, w)) = crop {
                let (top, left) = datapipe::center_offsets(m.height(), m.width(), (h, w))?;
                m = Mask::from_fn(h, w, |y, x| m.get(top + y, left + x));
            }
            if m.count() == 0 {
                (None, true)
            } else {
                (Some(psnr_levels(&p, &g, Some(&m))?), false)
            }
        }
        None => (None, false),
    };
    Ok(ImageMetrics {
        image_id: id,
        psnr,
        ssim,
        psnr_disocc,
        empty_mask,
    })
}

/// Compares same-named PNGs in `pred_dir` and `gt_dir`; with `mask_dir`,
/// also the PSNR restricted to each image's mask (nonzero = disoccluded).
///
/// With `crop`, every image and mask is first center-cropped to `(h, w)`;
/// images already of that size are unchanged.
pub fn evaluate_directory(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: Option<&Path>,
    crop: Option<(usize, usize)>,
) -> Result<MetricReport> {
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    let unpaired: Vec<&String> = pred.symmetric_difference(&gt).collect();
    if !unpaired.is_empty() {
        return Err(Error::Dataset(format!(
            "unpaired files: {}",
            unpaired
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG files in {}",
            pred_dir.display()
        )));
    }
    let names: Vec<&String> = pred.iter().collect();
    let rows = names
        .par_iter()
        .map(|name| {
            let mask = mask_dir.map(|d| d.join(name)).filter(|p| p.exists());
            let id = Path::new(name.as_str())
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.to_string());
            evaluate_one(&pred_dir.join(name), &gt_dir.join(name), mask, id, crop)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}
