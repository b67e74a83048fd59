//! Image tensors and PNG I/O. Every image in the pipeline is a CHW
//! `Array3<f64>` with 3 channels and values in [0, 1]; sketches are the same
//! shape with equal channels. Conversions clamp rather than error so lossy
//! round-trips through u8 stay total.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// RGB [0,1] CHW tensor, shape (3, h, w).
pub type Rgb01 = Array3<f64>;

pub fn check_rgb(img: &Rgb01) -> Result<()> {
    if img.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "expected 3 channels, got shape {:?}",
            img.shape()
        )));
    }
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Rgb01> {
    let img = ::image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_rgb(path: &Path, img: &Rgb01) -> Result<()> {
    check_rgb(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = ::image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = to_u8(img[[c, y as usize, x as usize]]);
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load a grayscale (or color) sketch as a 3-channel tensor with equal planes.
pub fn load_sketch(path: &Path) -> Result<Rgb01> {
    let img = ::image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        let v = p.0[0] as f64 / 255.0;
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = v;
        }
    }
    Ok(out)
}

/// Save averaging the channels to a single gray plane.
pub fn save_sketch(path: &Path, img: &Rgb01) -> Result<()> {
    check_rgb(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = ::image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = (img[[0, y as usize, x as usize]]
            + img[[1, y as usize, x as usize]]
            + img[[2, y as usize, x as usize]])
            / 3.0;
        p.0[0] = to_u8(v);
    }
    buf.save(path)?;
    Ok(())
}

/// Row-major RGBA bytes for canvas-style consumers.
pub fn to_rgba8(img: &Rgb01) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_u8(img[[c, y, x]]));
            }
            out.push(255);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snap to the 8-bit grid exactly as `save_rgb` followed by `load_rgb`
/// would. An image written to PNG and read back equals its quantized self.
pub fn quantize_unit(img: &Rgb01) -> Rgb01 {
    img.map(|&v| to_u8(v) as f64 / 255.0)
}
