//! Small single-channel raster utilities shared by data loading, synthesis
//! and rendering.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Mean filter over a `(2r+1)^2` window with edge replication.
pub fn box_blur(a: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 || a.is_empty() {
        return a.to_vec();
    }
    let ri = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // Separable: rows then columns; edge replication commutes with it.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -ri..=ri {
                s += a[y * w + clamp(x as isize + d, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -ri..=ri {
                s += tmp[clamp(y as isize + d, h) * w + x];
            }
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(a: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return a.to_vec();
    }
    let src = |o: usize, n: usize, nn: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n as f64 / nn as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        let (y0, y1, fy) = src(y, h, nh);
        for x in 0..nw {
            let (x0, x1, fx) = src(x, w, nw);
            let top = a[y0 * w + x0] * (1.0 - fx) + a[y0 * w + x1] * fx;
            let bot = a[y1 * w + x0] * (1.0 - fx) + a[y1 * w + x1] * fx;
            out[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Nearest-neighbour resampling of a binary mask.
pub fn resize_nearest(a: &[bool], h: usize, w: usize, nh: usize, nw: usize) -> Vec<bool> {
    let mut out = vec![false; nh * nw];
    for y in 0..nh {
        let sy = ((y * h) / nh).min(h - 1);
        for x in 0..nw {
            let sx = ((x * w) / nw).min(w - 1);
            out[y * nw + x] = a[sy * w + sx];
        }
    }
    out
}

/// Decoded 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub fn read_gray(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let g = img.to_luma8();
    Ok(Gray8 {
        height: g.height() as usize,
        width: g.width() as usize,
        data: g.into_raw(),
    })
}

pub fn write_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape(format!("gray raster needs {} bytes", h * w)))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.into(),
            reason: other.to_string(),
        },
    })
}

pub fn write_rgb(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape(format!("rgb raster needs {} bytes", 3 * h * w)))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.into(),
            reason: other.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_box(a: &[f64], h: usize, w: usize, r: isize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        s += a[yy * w + xx];
                    }
                }
                out[y as usize * w + x as usize] = s / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
        out
    }

    #[test]
    fn separable_blur_matches_window_sum() {
        let (h, w) = (7, 5);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        for r in 0..3 {
            let got = box_blur(&a, h, w, r);
            let want = naive_box(&a, h, w, r as isize);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let a = vec![0.25; 99 * 99];
        let r = resize_bilinear(&a, 99, 99, 64, 64);
        assert_eq!(r.len(), 64 * 64);
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let b: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(resize_bilinear(&b, 3, 4, 3, 4), b);
        // A horizontal ramp stays a ramp with matching endpoints' centres.
        let ramp: Vec<f64> = (0..4).flat_map(|_| (0..8).map(f64::from)).collect();
        let half = resize_bilinear(&ramp, 4, 8, 2, 4);
        assert!((half[0] - 0.5).abs() < 1e-12 && (half[3] - 6.5).abs() < 1e-12);
    }
}
