//! Pixel-buffer helpers: PNG I/O with fixed encoder settings, bilinear
//! sampling and affine warps.
//!
//! Continuous pixel coordinates follow [`crate::geometry::Pixel`]: the center
//! of pixel `(i, j)` is at `(i + 0.5, j + 0.5)`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, ImageResult, Rgb, RgbImage};
use nalgebra::Matrix2;

use crate::geometry::Pixel;

/// Encodes `img` as PNG. Settings are pinned so equal buffers give equal bytes.
pub fn encode_png(img: &RgbImage) -> ImageResult<Vec<u8>> {
    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(&mut bytes, CompressionType::Default, FilterType::Adaptive).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

pub fn save_png(img: &RgbImage, path: &Path) -> ImageResult<()> {
    let file = File::create(path)?;
    let w = BufWriter::new(file);
    PngEncoder::new_with_quality(w, CompressionType::Default, FilterType::Adaptive).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )
}

pub fn load_rgb(path: &Path) -> ImageResult<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Bilinear sample at continuous position `p`; `None` outside the image.
pub fn sample_bilinear(img: &RgbImage, p: &Pixel) -> Option<[f64; 3]> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h) {
        return None;
    }
    // Shift to sample-center coordinates and clamp to the edge samples.
    let x = (p.x - 0.5).clamp(0.0, w - 1.0);
    let y = (p.y - 0.5).clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as u32, y0 as u32);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let px = |x: u32, y: u32| img.get_pixel(x, y).0;
    let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Rounds to the nearest 8-bit value, halves going up.
pub fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Warps `src` into a `width x height` image where output position `q` takes
/// the source value at `linear · q + offset`. Unmapped pixels are black.
pub fn warp_affine(src: &RgbImage, width: u32, height: u32, linear: &Matrix2<f64>, offset: &Pixel) -> RgbImage {
    let mut out = RgbImage::new(width, height);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let q = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
        if let Some(v) = sample_bilinear(src, &(linear * q + offset)) {
            *px = Rgb(v.map(to_u8));
        }
    }
    out
}

/// Resizes with bilinear sampling so that the output grid covers the input
/// exactly (output position `q` samples input position `q · in/out`).
pub fn resize_bilinear(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    let sx = src.width() as f64 / width as f64;
    let sy = src.height() as f64 / height as f64;
    warp_affine(src, width, height, &Matrix2::new(sx, 0.0, 0.0, sy), &Pixel::zeros())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_u8(127.5), 128);
        assert_eq!(to_u8(127.49), 127);
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(300.0), 255);
    }

    #[test]
    fn identity_warp_is_lossless() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([x as u8 * 30, y as u8 * 40, 7]));
        let out = warp_affine(&img, 7, 5, &Matrix2::identity(), &Pixel::zeros());
        assert_eq!(out, img);
        assert_eq!(resize_bilinear(&img, 7, 5), img);
    }

    #[test]
    fn bilinear_midpoint() {
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([x as u8 * 100, 0, 0]));
        assert_eq!(sample_bilinear(&img, &Pixel::new(1.0, 0.5)).unwrap()[0], 50.0);
        assert!(sample_bilinear(&img, &Pixel::new(2.5, 0.5)).is_none());
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let img = RgbImage::from_fn(16, 9, |x, y| Rgb([(x * y) as u8, x as u8, y as u8]));
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode_png(&img).unwrap());
        assert_eq!(load_rgb(&path).unwrap(), img);
    }
}
