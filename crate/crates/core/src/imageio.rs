//! PNG and PFM input/output and the 8-bit ↔ [-1, 1] mapping.
//!
//! Float maps are written as little-endian PFM (`Pf` for one channel, `PF`
//! for three) with rows stored bottom to top. PNG exports of single-channel
//! maps use a plain linear grayscale: `value / max * 255`, rounded and
//! clamped, where `max` is supplied by the caller (1 for confidence maps,
//! the map's own maximum for disparities).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Mask, Shape, Tensor};

#[inline]
pub fn normalize_level(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Maps [-1, 1] back to 8-bit with round-to-nearest and clamping.
#[inline]
pub fn denormalize_level(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Normalizes an 8-bit RGB image to [-1, 1].
pub fn normalize(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(3, h as usize, w as usize), |c, y, x| {
        normalize_level(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn denormalize(t: &ImageTensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::shape("denormalize", "3 channels", t.shape()));
    }
    let mut img = RgbImage::new(t.width() as u32, t.height() as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (xi, yi) = (x as usize, y as usize);
        *p = Rgb([
            denormalize_level(t.get(0, yi, xi)),
            denormalize_level(t.get(1, yi, xi)),
            denormalize_level(t.get(2, yi, xi)),
        ]);
    }
    Ok(img)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    Ok(normalize(&read_rgb(path)?))
}

pub fn save_image(path: &Path, t: &ImageTensor) -> Result<()> {
    denormalize(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a mask PNG; any nonzero luma marks the pixel.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_fn(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] != 0
    }))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Grayscale PNG of a single-channel map, `value / max` mapped to 0..255.
pub fn save_map_png(path: &Path, map: &Tensor<f32>, max: f32) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::shape("save_map_png", "1 channel", map.shape()));
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let img = GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.get(0, y as usize, x as usize) * scale;
        Luma([v.round().clamp(0.0, 255.0) as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let tag = match map.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidArgument(format!(
                "PFM stores 1 or 3 channels, got {c}"
            )))
        }
    };
    let (h, w, ch) = (map.height(), map.width(), map.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * ch * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..ch {
                out.extend_from_slice(&map.get(c, y, x).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |reason: &str| Error::Format {
        what: "PFM file",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad("truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing Pf/PF tag")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < w * h * channels * 4 {
        return Err(bad("truncated pixel data"));
    }
    let mut t = Tensor::zeros(Shape::new(channels, h, w));
    let mut i = 0;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let b = [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                t.set(c, y, x, v);
                i += 4;
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_level(0), -1.0);
        assert_eq!(normalize_level(255), 1.0);
        let v = normalize_level(127);
        assert!((v + 0.003_921_57).abs() < 1e-6);
        assert_eq!(denormalize_level(v), 127);
    }

    #[test]
    fn every_level_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_level(normalize_level(v)), v);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([(x * 40) as u8, (y * 80) as u8, 7]));
        let t = normalize(&img);
        let p = dir.path().join("a.png");
        save_image(&p, &t).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
    }

    #[test]
    fn pfm_header_is_little_endian_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let t = Tensor::from_fn(Shape::new(1, 2, 3), |_, y, x| (y * 3 + x) as f32);
        write_pfm(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom one
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 3.0);
    }

    #[test]
    fn pfm_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }

    proptest! {
        #[test]
        fn pfm_round_trip(h in 1usize..6, w in 1usize..6, three in any::<bool>(), seed in any::<u64>()) {
            let c = if three { 3 } else { 1 };
            let mut s = seed;
            let t = Tensor::from_fn(Shape::new(c, h, w), |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / 1e3 - 5.0
            });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.pfm");
            write_pfm(&p, &t).unwrap();
            prop_assert_eq!(read_pfm(&p).unwrap(), t);
        }
    }
}
