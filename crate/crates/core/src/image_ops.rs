//! Raster types and the perceptual primitives used by the reward engine:
//! luma conversion, histogram entropy, and windowed SSIM.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} rgb image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One channel as a single-plane buffer.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn from_channels(width: usize, height: usize, planes: [&[f64]; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            data.extend([planes[0][i], planes[1][i], planes[2][i]]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rounds every value to the nearest 8-bit level, matching what a PNG
    /// round trip produces.
    pub fn quantize_8bit(&mut self) {
        self.data
            .iter_mut()
            .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    /// Area resample: each destination pixel averages the source pixels
    /// whose index range maps onto it (at least one, so upsampling
    /// replicates).
    pub fn resize_box(&self, width: usize, height: usize) -> Result<RgbImage> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("cannot resize to {width}x{height}")));
        }
        let span = |i: usize, src: usize, dst: usize| {
            let lo = i * src / dst;
            (lo, ((i + 1) * src / dst).max(lo + 1))
        };
        Ok(RgbImage::from_fn(width, height, |x, y| {
            let (x0, x1) = span(x, self.width, width);
            let (y0, y1) = span(y, self.height, height);
            let mut acc = [0.0; 3];
            for sy in y0..y1 {
                for sx in x0..x1 {
                    let p = self.pixel(sx, sy);
                    (0..3).for_each(|c| acc[c] += p[c]);
                }
            }
            let norm = 1.0 / ((x1 - x0) * (y1 - y0)) as f64;
            acc.map(|v| v * norm)
        }))
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img.color().bits_per_pixel() / img.color().channel_count() as u16 {
            8 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            _ => img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        };
        RgbImage::new(w, h, data)
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} gray image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Rec.601 luma, clamped to `[0, 1]`.
pub fn luma(rgb: [f64; 3]) -> f64 {
    (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).clamp(0.0, 1.0)
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    let data = img.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
    GrayImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

pub const DEFAULT_BINS: usize = 256;

/// Shannon entropy in bits of the `bins`-bin intensity histogram.
pub fn shannon_entropy(img: &GrayImage, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in img.data() {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = img.data().len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filtering over valid window positions only.
fn filter_valid(plane: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Per-image SSIM statistics that do not depend on the comparison partner.
#[derive(Clone, Debug)]
pub struct SsimPrep {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

impl SsimPrep {
    pub fn new(img: &GrayImage) -> Result<Self> {
        if img.width() < SSIM_WINDOW || img.height() < SSIM_WINDOW {
            return Err(Error::invalid(format!(
                "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let taps = gaussian_taps();
        let sq: Vec<f64> = img.data().iter().map(|v| v * v).collect();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            pixels: img.data().to_vec(),
            mean: filter_valid(img.data(), img.width(), img.height(), &taps),
            mean_sq: filter_valid(&sq, img.width(), img.height(), &taps),
        })
    }

    /// Mean of the windowed variance over all valid window positions.
    pub fn mean_local_variance(&self) -> f64 {
        let n = self.mean.len() as f64;
        self.mean
            .iter()
            .zip(&self.mean_sq)
            .map(|(m, m2)| (m2 - m * m).max(0.0))
            .sum::<f64>()
            / n
    }

    pub fn ssim(&self, other: &SsimPrep) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid(format!(
                "ssim dimension mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let taps = gaussian_taps();
        let prod: Vec<f64> = self.pixels.iter().zip(&other.pixels).map(|(a, b)| a * b).collect();
        let cross = filter_valid(&prod, self.width, self.height, &taps);
        let mut total = 0.0;
        for i in 0..cross.len() {
            let (mx, my) = (self.mean[i], other.mean[i]);
            let vx = self.mean_sq[i] - mx * mx;
            let vy = other.mean_sq[i] - my * my;
            let cxy = cross[i] - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        Ok(total / cross.len() as f64)
    }
}

/// Mean SSIM over all valid 11x11 Gaussian-window positions.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::invalid(format!(
            "ssim dimension mismatch {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    SsimPrep::new(a)?.ssim(&SsimPrep::new(b)?)
}
