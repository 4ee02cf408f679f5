//! Grayscale raster images with intensities in [0,1], plus PNG I/O and the
//! small spatial filters shared across the crate.

use std::path::Path;

use crate::autodiff::{upsample2_forward, Tensor};
use crate::{Error, Result};

/// Single-channel image, row-major, intensities nominally in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::arg(format!("image dimensions must be nonzero, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::shape("element count", h * w, data.len(), "Image::new"));
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Image {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Image { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Multiplies intensities by `gain` and clamps back to [0,1].
    pub fn scaled(&self, gain: f64) -> Image {
        self.map(|v| (v * gain).clamp(0.0, 1.0))
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Image> {
        if r0 + h > self.h || c0 + w > self.w {
            return Err(Error::arg(format!(
                "crop {h}x{w} at ({r0},{c0}) exceeds image {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.w + c0..r * self.w + c0 + w]);
        }
        Ok(Image { h, w, data })
    }

    /// Bilinear x2 upsample with half-pixel-center alignment.
    pub fn upsample_x2(&self) -> Image {
        Image {
            h: self.h * 2,
            w: self.w * 2,
            data: upsample2_forward(&self.data, 1, self.h, self.w),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.h, self.w],
            data: self.data.clone(),
        }
    }

    /// Reinterprets a [1,H,W] tensor as an image.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        if t.shape.len() != 3 || t.shape[0] != 1 {
            return Err(Error::shape(
                "channels",
                1,
                *t.shape.first().unwrap_or(&0),
                "Image::from_tensor",
            ));
        }
        Image::new(t.shape[1], t.shape[2], t.data.clone())
    }

    /// Quantizes to 8-bit with round-half-to-even, matching PNG output.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let scaled = (v.clamp(0.0, 1.0) * 255.0).clamp(0.0, 255.0);
                round_half_even(scaled) as u8
            })
            .collect()
    }
}

fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Loads any PNG as grayscale, mapping 8-bit values to k/255.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let data = luma.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(h, w, data)
}

/// Writes an 8-bit grayscale PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.w as u32, img.h as u32, img.to_bytes())
        .expect("byte buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::data(format!("{}: {other}", path.display())),
        })
}

// ---------------------------------------------------------------------------
// Small spatial filters
// ---------------------------------------------------------------------------

/// Normalized 1-D Gaussian taps of odd length `n`.
pub(crate) fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n as isize - 1) / 2;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// 4-neighbor Laplacian with replicate edge handling.
pub fn laplacian(img: &Image) -> Image {
    let (h, w) = (img.h, img.w);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img.data[r * w + c]
    };
    Image::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c)
    })
}

/// Replicate-padded "same" convolution with a square kernel.
pub(crate) fn conv_replicate_same(img: &Image, kernel: &[f64], k: usize) -> Image {
    debug_assert_eq!(kernel.len(), k * k);
    let (h, w) = (img.h, img.w);
    let half = (k / 2) as isize;
    Image::from_fn(h, w, |r, c| {
        let mut acc = 0.0;
        for ky in 0..k {
            let iy = (r as isize + ky as isize - half).clamp(0, h as isize - 1) as usize;
            for kx in 0..k {
                let ix = (c as isize + kx as isize - half).clamp(0, w as isize - 1) as usize;
                acc += kernel[ky * k + kx] * img.data[iy * w + ix];
            }
        }
        acc
    })
}
