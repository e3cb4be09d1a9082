//! Raster container, image loading and convolution primitives.
//!
//! Pixels are stored as `f32` in row-major order. Convolution uses edge
//! replication at the borders. Kernels that factor into a sum of outer
//! products (axis-aligned affine kernels) take a separable path; everything
//! else is convolved densely.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Single-channel floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn same_size(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear interpolation at a continuous position; `None` outside the
    /// pixel-center hull `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f32> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0) as f64;
        let v10 = self.get(x1, y0) as f64;
        let v01 = self.get(x0, y1) as f64;
        let v11 = self.get(x1, y1) as f64;
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        Some((top + (bot - top) * fy) as f32)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GrayImage) -> f32 {
        assert!(self.same_size(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Integer cell and fractional offsets for bilinear lookup.
#[inline]
pub(crate) fn bilinear_cell(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, f64, f64)> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

/// Loads a PGM (P5) or PNG file as luminance in `[0, 1]`.
///
/// RGB inputs are converted with weights 0.299, 0.587, 0.114.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::Format(format!("{other:?}"))),
        None => return Err(Error::Format(format!("unrecognized file {}", path.display()))),
    }
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(img)
}

fn from_dynamic(img: DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf
            .into_raw()
            .chunks_exact(2)
            .map(|p| p[0] as f32 / 255.0)
            .collect(),
        DynamicImage::ImageRgb8(buf) => buf.into_raw().chunks_exact(3).map(luminance).collect(),
        DynamicImage::ImageRgba8(buf) => buf.into_raw().chunks_exact(4).map(luminance).collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?}",
                other.color()
            )))
        }
    };
    GrayImage::from_vec(w, h, data)
}

#[inline]
fn luminance(p: &[u8]) -> f32 {
    ((0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0) as f32
}

/// Writes a binary PGM. Values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).map_err(|e| Error::io(path, e))?;
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Debug dump: affinely maps the raster's value range onto 0..=255.
pub fn save_pgm_normalized(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    save_pgm(&img.map(|v| (v - lo) / span), path)
}

/// Square convolution kernel of side `2 * radius + 1`, row-major.
///
/// `factors`, when present, holds `(column, row)` 1-D pairs whose outer
/// products sum to `weights`; `convolve` then runs separably.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    weights: Vec<f64>,
    factors: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Kernel2D {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::Size(format!(
                "kernel of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Kernel2D {
            radius,
            weights,
            factors: None,
        })
    }

    /// Kernel given as a sum of outer products `column ⊗ row`.
    pub fn from_factors(radius: usize, factors: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let side = 2 * radius + 1;
        let mut weights = vec![0.0; side * side];
        for (col, row) in &factors {
            if col.len() != side || row.len() != side {
                return Err(Error::Size("kernel factor length mismatch".into()));
            }
            for (ky, &c) in col.iter().enumerate() {
                for (kx, &r) in row.iter().enumerate() {
                    weights[ky * side + kx] += c * r;
                }
            }
        }
        Ok(Kernel2D {
            radius,
            weights,
            factors: Some(factors),
        })
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_separable(&self) -> bool {
        self.factors.is_some()
    }

    /// Same kernel with the factorization dropped, forcing the dense path.
    pub fn to_dense(&self) -> Kernel2D {
        Kernel2D {
            radius: self.radius,
            weights: self.weights.clone(),
            factors: None,
        }
    }

    /// Scales every weight (and factor) by `s`.
    pub fn scaled(mut self, s: f64) -> Kernel2D {
        self.weights.iter_mut().for_each(|w| *w *= s);
        if let Some(factors) = &mut self.factors {
            for (col, _) in factors.iter_mut() {
                col.iter_mut().for_each(|w| *w *= s);
            }
        }
        self
    }
}

/// Edge-replicated copy of `img` padded by `pad` on every side.
fn pad_replicate(img: &GrayImage, pad_x: usize, pad_y: usize) -> (Vec<f32>, usize) {
    let pw = img.width + 2 * pad_x;
    let ph = img.height + 2 * pad_y;
    let mut out = vec![0.0f32; pw * ph];
    for py in 0..ph {
        let sy = py.saturating_sub(pad_y).min(img.height - 1);
        let src = img.row(sy);
        let dst = &mut out[py * pw..(py + 1) * pw];
        let left = src[0];
        let right = src[img.width - 1];
        dst[..pad_x].fill(left);
        dst[pad_x..pad_x + img.width].copy_from_slice(src);
        dst[pad_x + img.width..].fill(right);
    }
    (out, pw)
}

/// Same-size convolution with edge replication.
pub fn convolve(img: &GrayImage, k: &Kernel2D) -> Result<GrayImage> {
    if k.radius >= img.width.min(img.height) {
        return Err(Error::Size(format!(
            "kernel radius {} too large for {}x{} image",
            k.radius, img.width, img.height
        )));
    }
    Ok(match &k.factors {
        Some(factors) => convolve_separable(img, k.radius, factors),
        None => convolve_dense(img, k),
    })
}

fn convolve_dense(img: &GrayImage, k: &Kernel2D) -> GrayImage {
    let r = k.radius;
    let side = k.side();
    let (padded, pw) = pad_replicate(img, r, r);
    // out(x) = sum_u k(u) I(x - u): flip the kernel and correlate.
    let flipped: Vec<f32> = k.weights.iter().rev().map(|&w| w as f32).collect();
    let w = img.width;
    let mut out = GrayImage::new(img.width, img.height);
    out.data.par_chunks_mut(w).enumerate().for_each(|(y, dst)| {
        let mut acc = vec![0.0f32; w];
        for ky in 0..side {
            let base = (y + ky) * pw;
            let krow = &flipped[ky * side..(ky + 1) * side];
            for (kx, &wt) in krow.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let src = &padded[base + kx..base + kx + w];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += wt * s;
                }
            }
        }
        dst.copy_from_slice(&acc);
    });
    out
}

fn convolve_separable(img: &GrayImage, r: usize, factors: &[(Vec<f64>, Vec<f64>)]) -> GrayImage {
    let side = 2 * r + 1;
    let w = img.width;
    let h = img.height;
    let (padded, pw) = pad_replicate(img, r, r);
    let ph = h + 2 * r;
    let mut out = GrayImage::new(w, h);
    for (col, row) in factors {
        let row_f: Vec<f32> = row.iter().rev().map(|&v| v as f32).collect();
        let col_f: Vec<f32> = col.iter().rev().map(|&v| v as f32).collect();
        // Horizontal pass over every padded row.
        let mut tmp = vec![0.0f32; ph * w];
        tmp.par_chunks_mut(w).enumerate().for_each(|(py, dst)| {
            let base = py * pw;
            for (kx, &wt) in row_f.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let src = &padded[base + kx..base + kx + w];
                for (a, &s) in dst.iter_mut().zip(src) {
                    *a += wt * s;
                }
            }
        });
        // Vertical pass, accumulated into the output.
        out.data.par_chunks_mut(w).enumerate().for_each(|(y, dst)| {
            let mut acc = vec![0.0f32; w];
            for (ky, &wt) in col_f.iter().enumerate().take(side) {
                if wt == 0.0 {
                    continue;
                }
                let src = &tmp[(y + ky) * w..(y + ky + 1) * w];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += wt * s;
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d += a;
            }
        });
    }
    out
}

/// Halves both dimensions by averaging 2x2 blocks.
///
/// Output pixel `(x, y)` is centered on input coordinate `(2x + 0.5, 2y + 0.5)`.
pub fn downsample2(img: &GrayImage) -> Result<GrayImage> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::Size(format!(
            "cannot downsample {}x{} image",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / 2, img.height / 2);
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = (2 * x, 2 * y);
        0.25 * (img.get(sx, sy) + img.get(sx + 1, sy) + img.get(sx, sy + 1) + img.get(sx + 1, sy + 1))
    }))
}
