//! Canonical in-memory image representation and the few pixel operations the
//! pipeline needs.
//!
//! Every decoded image is 3-channel RGB with `f32` channels in `[0, 1]`.
//! Alpha is dropped and grayscale sources are replicated across channels.

use std::path::Path;

use image::{Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

pub type FloatImage = Rgb32FImage;

pub fn decode_rgb(path: &Path) -> Result<FloatImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(img.to_rgb8().convert_to_float())
}

trait ToFloat {
    fn convert_to_float(&self) -> FloatImage;
}

impl ToFloat for RgbImage {
    fn convert_to_float(&self) -> FloatImage {
        let (w, h) = self.dimensions();
        let data = self.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        FloatImage::from_raw(w, h, data).expect("buffer length matches dimensions")
    }
}

pub fn from_rgb8(img: &RgbImage) -> FloatImage {
    img.convert_to_float()
}

/// Quantizes to 8 bits with round-to-nearest after clamping to `[0, 1]`.
pub fn to_rgb8(img: &FloatImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(w, h, data).expect("buffer length matches dimensions")
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &FloatImage, path: &Path) -> Result<()> {
    save_rgb8_png(&to_rgb8(img), path)
}

pub fn save_rgb8_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(crate::error::io_err(parent))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> FloatImage {
    FloatImage::from_pixel(width, height, Rgb(rgb))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Output pixel `(x, y)` samples the source at
/// `((x + 0.5) * sw / dw - 0.5, (y + 0.5) * sh / dh - 0.5)`. Identical
/// dimensions therefore reproduce the source exactly.
pub fn resize_bilinear(src: &FloatImage, dst_w: u32, dst_h: u32) -> FloatImage {
    let (sw, sh) = src.dimensions();
    if (sw, sh) == (dst_w, dst_h) {
        return src.clone();
    }
    let scale_x = sw as f64 / dst_w as f64;
    let scale_y = sh as f64 / dst_h as f64;
    let taps = |dst: u32, scale: f64, limit: u32| -> (u32, u32, f32) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as u32).min(limit - 1);
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..dst_w).map(|x| taps(x, scale_x, sw)).collect();
    let mut out = FloatImage::new(dst_w, dst_h);
    for y in 0..dst_h {
        let (y0, y1, fy) = taps(y, scale_y, sh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).0;
            let p10 = src.get_pixel(x1, y0).0;
            let p01 = src.get_pixel(x0, y1).0;
            let p11 = src.get_pixel(x1, y1).0;
            let mut px = [0f32; 3];
            for c in 0..3 {
                let top = p00[c] + (p10[c] - p00[c]) * fx;
                let bottom = p01[c] + (p11[c] - p01[c]) * fx;
                px[c] = top + (bottom - top) * fy;
            }
            out.put_pixel(x as u32, y, Rgb(px));
        }
    }
    out
}

pub fn mean_intensity(img: &FloatImage) -> f64 {
    let raw = img.as_raw();
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let mut img = FloatImage::new(5, 3);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0 = [i as f32 / 15.0, 0.5, 1.0 - i as f32 / 15.0];
        }
        assert_eq!(resize_bilinear(&img, 5, 3), img);
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let mut img = FloatImage::new(4, 4);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let v = (x + 4 * y) as f32 / 16.0;
            p.0 = [v, v, v];
        }
        let small = resize_bilinear(&img, 2, 2);
        let expect = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        assert!((small.get_pixel(0, 0).0[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn quantize_round_trips_u8_values() {
        for k in 0..=255u8 {
            assert_eq!(quantize(k as f32 / 255.0), k);
        }
    }
}
