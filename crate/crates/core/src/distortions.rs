//! Distortion-space augmentation and the localized degradations used by the
//! synthetic environment.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Weak,
    Mild,
    Strong,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Weak, Severity::Mild, Severity::Strong];
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Weak => "weak",
            Severity::Mild => "mild",
            Severity::Strong => "strong",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Jpeg,
    MotionBlur,
    DefocusBlur,
    ColorJitter,
    Poisson,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Jpeg,
        DistortionKind::MotionBlur,
        DistortionKind::DefocusBlur,
        DistortionKind::ColorJitter,
        DistortionKind::Poisson,
    ];

    /// Kinds eligible at a severity level. Weak excludes noise.
    pub fn eligible(level: Severity) -> &'static [DistortionKind] {
        match level {
            Severity::Weak => &Self::ALL[..4],
            _ => &Self::ALL,
        }
    }

    /// Inclusive parameter range at a level, or `None` if the kind is not
    /// used there.
    pub fn range(self, level: Severity) -> Option<(f64, f64)> {
        use DistortionKind::*;
        use Severity::*;
        Some(match (self, level) {
            (Jpeg, Weak) => (85.0, 95.0),
            (Jpeg, Mild) => (60.0, 75.0),
            (Jpeg, Strong) => (20.0, 40.0),
            (MotionBlur, Weak) => (3.0, 7.0),
            (MotionBlur, Mild) => (7.0, 11.0),
            (MotionBlur, Strong) => (11.0, 19.0),
            (DefocusBlur, Weak) => (1.0, 2.0),
            (DefocusBlur, Mild) => (2.0, 3.0),
            (DefocusBlur, Strong) => (4.0, 6.0),
            (ColorJitter, Weak) => (JITTER_SPANS[0], JITTER_SPANS[0]),
            (ColorJitter, Mild) => (JITTER_SPANS[1], JITTER_SPANS[1]),
            (ColorJitter, Strong) => (JITTER_SPANS[2], JITTER_SPANS[2]),
            (Poisson, Weak) => return None,
            (Poisson, Mild) => (18.0, 30.0),
            (Poisson, Strong) => (6.0, 12.0),
        })
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistortionKind::Jpeg => "jpeg",
            DistortionKind::MotionBlur => "motion_blur",
            DistortionKind::DefocusBlur => "defocus_blur",
            DistortionKind::ColorJitter => "color_jitter",
            DistortionKind::Poisson => "poisson",
        })
    }
}

/// One distortion application. `param` is the JPEG quality, the motion
/// kernel length, the defocus radius, the color-jitter factor span, or the
/// Poisson rate, depending on `kind`. `seed` drives any randomness the kind
/// needs (blur angle, jitter factors, noise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub param: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let ok = match self.kind {
            DistortionKind::Jpeg => p.fract() == 0.0 && (1.0..=100.0).contains(&p),
            DistortionKind::MotionBlur => p.fract() == 0.0 && p >= 1.0 && (p as u64) % 2 == 1,
            DistortionKind::DefocusBlur => p >= 0.0 && p.is_finite(),
            DistortionKind::ColorJitter => (0.0..1.0).contains(&p),
            DistortionKind::Poisson => p > 0.0 && p.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} parameter {p} out of range", self.kind)))
        }
    }

    /// Normalized severity in `[0, 1]` used by the quality oracle.
    pub fn severity(&self) -> f64 {
        let p = self.param;
        let s = match self.kind {
            DistortionKind::Jpeg => (95.0 - p) / 75.0,
            DistortionKind::MotionBlur => (p - 1.0) / 18.0,
            DistortionKind::DefocusBlur => p / 6.0,
            DistortionKind::ColorJitter => p / JITTER_SPANS[2],
            DistortionKind::Poisson => 6.0 / p,
        };
        s.clamp(0.0, 1.0)
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        self.validate()?;
        match self.kind {
            DistortionKind::Jpeg => jpeg_proxy(img, self.param as u32),
            DistortionKind::MotionBlur => {
                let angle = ChaCha8Rng::seed_from_u64(self.seed).random_range(0.0..PI);
                motion_blur(img, self.param as usize, angle)
            }
            DistortionKind::DefocusBlur => defocus_blur(img, self.param),
            DistortionKind::ColorJitter => color_jitter(img, self.param, self.seed),
            DistortionKind::Poisson => poisson_noise(img, self.param, self.seed),
        }
    }
}

const JPEG_LUMA: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table at libjpeg quality `q`.
pub fn jpeg_table(q: u32) -> [f64; 64] {
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &base) in t.iter_mut().zip(&JPEG_LUMA) {
        *o = ((base * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT-II of an 8x8 block (row-major).
pub(crate) fn dct8(block: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub(crate) fn idct8(coef: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| c[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| c[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Blockwise DCT quantization with the scaled luminance table applied to
/// each channel independently.
pub fn jpeg_proxy(img: &RgbImage, q: u32) -> Result<RgbImage> {
    if !(1..=100).contains(&q) {
        return Err(Error::invalid(format!("jpeg quality must be in 1..=100, got {q}")));
    }
    let table = jpeg_table(q);
    let c = dct_basis();
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for ch in 0..3 {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (sx, sy) = ((bx + x).min(w - 1), (by + y).min(h - 1));
                        block[y * 8 + x] = img.get(sx, sy, ch) * 255.0 - 128.0;
                    }
                }
                let mut coef = dct8(&block, &c);
                for (k, v) in coef.iter_mut().enumerate() {
                    *v = (*v / table[k]).round() * table[k];
                }
                let rec = idct8(&coef, &c);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let v = ((rec[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                        out.data_mut()[((by + y) * w + bx + x) * 3 + ch] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sparse convolution kernel: offsets with weights.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub taps: Vec<(i64, i64, f64)>,
}

impl Kernel {
    fn identity() -> Self {
        Self {
            taps: vec![(0, 0, 1.0)],
        }
    }

    fn from_dense(radius: i64, weights: &[f64]) -> Self {
        let side = 2 * radius + 1;
        let total: f64 = weights.iter().sum();
        let mut taps = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let w = weights[((dy + radius) * side + dx + radius) as usize];
                if w > 0.0 {
                    taps.push((dx, dy, w / total));
                }
            }
        }
        Self { taps }
    }

    pub fn mass(&self) -> f64 {
        self.taps.iter().map(|t| t.2).sum()
    }

    /// Correlates the image with the kernel using replicate padding.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        if self.taps.len() == 1 && self.taps[0] == (0, 0, 1.0) {
            return img.clone();
        }
        let (w, h) = (img.width() as i64, img.height() as i64);
        let src = img.data();
        let mut data = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for &(dx, dy, k) in &self.taps {
                    let sx = (x + dx).clamp(0, w - 1);
                    let sy = (y + dy).clamp(0, h - 1);
                    let i = ((sy * w + sx) * 3) as usize;
                    acc[0] += k * src[i];
                    acc[1] += k * src[i + 1];
                    acc[2] += k * src[i + 2];
                }
                let o = ((y * w + x) * 3) as usize;
                // weights sum to one only up to rounding
                data[o..o + 3].copy_from_slice(&acc.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
    }
}

/// Length of the segment p0 + t (p1 - p0), t in [0, 1], inside the box.
fn clipped_length(p0: (f64, f64), p1: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, dv, l, u) in [(p0.0, d.0, lo.0, hi.0), (p0.1, d.1, lo.1, hi.1)] {
        if dv.abs() < 1e-15 {
            if p < l || p > u {
                return 0.0;
            }
            continue;
        }
        let (a, b) = ((l - p) / dv, (u - p) / dv);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    if t1 <= t0 {
        0.0
    } else {
        (t1 - t0) * (d.0 * d.0 + d.1 * d.1).sqrt()
    }
}

/// Line kernel of length `k` through the origin at `angle` (radians from
/// the +x axis). Each pixel's weight is the segment length inside it.
pub fn motion_kernel(k: usize, angle: f64) -> Result<Kernel> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("motion kernel length must be odd, got {k}")));
    }
    if k == 1 {
        return Ok(Kernel::identity());
    }
    let half = k as f64 / 2.0;
    let (c, s) = (angle.cos(), angle.sin());
    let p0 = (-half * c, -half * s);
    let p1 = (half * c, half * s);
    let radius = (k as i64 + 1) / 2;
    let side = 2 * radius + 1;
    let mut weights = vec![0.0; (side * side) as usize];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (dx as f64, dy as f64);
            weights[((dy + radius) * side + dx + radius) as usize] =
                clipped_length(p0, p1, (x - 0.5, y - 0.5), (x + 0.5, y + 0.5));
        }
    }
    Ok(Kernel::from_dense(radius, &weights))
}

pub fn motion_blur(img: &RgbImage, k: usize, angle: f64) -> Result<RgbImage> {
    Ok(motion_kernel(k, angle)?.apply(img))
}

const DISK_SUBSAMPLES: usize = 32;

/// Normalized disk kernel; each pixel's weight approximates the area of its
/// square inside the disk using a symmetric subsample lattice.
pub fn disk_kernel(r: f64) -> Result<Kernel> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("defocus radius must be >= 0, got {r}")));
    }
    // a disk of radius <= 1/2 lies inside the center pixel
    if r <= 0.5 {
        return Ok(Kernel::identity());
    }
    let radius = (r + 0.5).ceil() as i64;
    let side = 2 * radius + 1;
    let n = DISK_SUBSAMPLES;
    let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    let mut weights = vec![0.0; (side * side) as usize];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let mut inside = 0usize;
            for oy in &offsets {
                for ox in &offsets {
                    let (x, y) = (dx as f64 + ox, dy as f64 + oy);
                    if x * x + y * y <= r * r {
                        inside += 1;
                    }
                }
            }
            weights[((dy + radius) * side + dx + radius) as usize] = inside as f64 / (n * n) as f64;
        }
    }
    Ok(Kernel::from_dense(radius, &weights))
}

pub fn defocus_blur(img: &RgbImage, r: f64) -> Result<RgbImage> {
    Ok(disk_kernel(r)?.apply(img))
}

/// Factor spans per level for brightness, contrast and saturation.
pub const JITTER_SPANS: [f64; 3] = [0.05, 0.15, 0.4];
/// Hue half-ranges in degrees matching [`JITTER_SPANS`].
pub const JITTER_HUE_DEG: [f64; 3] = [3.0, 8.0, 20.0];

/// Hue half-range for an arbitrary span, piecewise linear through the
/// level table and the origin.
pub fn jitter_hue_range(span: f64) -> f64 {
    let pts = [(0.0, 0.0), (JITTER_SPANS[0], JITTER_HUE_DEG[0]), (JITTER_SPANS[1], JITTER_HUE_DEG[1]), (JITTER_SPANS[2], JITTER_HUE_DEG[2])];
    let seg = pts.windows(2).find(|w| span <= w[1].0).unwrap_or(&pts[2..4]);
    let (a, b) = (seg[0], seg[1]);
    a.1 + (span - a.0) * (b.1 - a.1) / (b.0 - a.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_deg: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_deg: 0.0,
    };

    pub fn sample(span: f64, rng: &mut impl Rng) -> Self {
        let hue = jitter_hue_range(span);
        let mut factor = || if span > 0.0 { rng.random_range(1.0 - span..=1.0 + span) } else { 1.0 };
        let (brightness, contrast, saturation) = (factor(), factor(), factor());
        let hue_deg = if hue > 0.0 { rng.random_range(-hue..=hue) } else { 0.0 };
        Self {
            brightness,
            contrast,
            saturation,
            hue_deg,
        }
    }
}

const YIQ: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Brightness, contrast around channel means, saturation around per-pixel
/// luma, then hue rotation in the YIQ chroma plane; clamped at the end.
pub fn color_jitter_with(img: &RgbImage, f: JitterFactors) -> RgbImage {
    let n = (img.width() * img.height()) as f64;
    let mut data: Vec<f64> = img.data().iter().map(|v| v * f.brightness).collect();
    let mut means = [0.0; 3];
    for p in data.chunks_exact(3) {
        (0..3).for_each(|c| means[c] += p[c]);
    }
    means.iter_mut().for_each(|m| *m /= n);
    let inv = invert3(&YIQ);
    let (hs, hc) = f.hue_deg.to_radians().sin_cos();
    for p in data.chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = means[c] + f.contrast * (p[c] - means[c]);
        }
        let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for v in p.iter_mut() {
            *v = l + f.saturation * (*v - l);
        }
        if f.hue_deg != 0.0 {
            let yiq: Vec<f64> = YIQ.iter().map(|r| r[0] * p[0] + r[1] * p[1] + r[2] * p[2]).collect();
            let (i, q) = (yiq[1] * hc - yiq[2] * hs, yiq[1] * hs + yiq[2] * hc);
            for c in 0..3 {
                p[c] = inv[c][0] * yiq[0] + inv[c][1] * i + inv[c][2] * q;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Jitter with factors drawn uniformly from `[1 - span, 1 + span]` and a
/// hue offset from the matching hue range.
pub fn color_jitter(img: &RgbImage, span: f64, seed: u64) -> Result<RgbImage> {
    if !(0.0..1.0).contains(&span) {
        return Err(Error::invalid(format!("jitter span must be in [0, 1), got {span}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(color_jitter_with(img, JitterFactors::sample(span, &mut rng)))
}

/// Poisson variate by sequential inversion below mean 30, rounded normal
/// approximation above.
fn sample_poisson(mean: f64, rng: &mut impl Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean >= 30.0 {
        let z: f64 = rng.sample(StandardNormal);
        return (mean + mean.sqrt() * z).round().max(0.0);
    }
    let u: f64 = rng.random();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0.0;
    while u > cdf && k < 1000.0 {
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}

pub fn poisson_noise(img: &RgbImage, lambda: f64, seed: u64) -> Result<RgbImage> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("poisson rate must be > 0, got {lambda}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| (sample_poisson(v * lambda, &mut rng) / lambda).clamp(0.0, 1.0))
        .collect();
    RgbImage::new(img.width(), img.height(), data)
}

/// Draws one distortion kind and one parameter for `level` and applies it.
pub fn sample_spec(level: Severity, rng: &mut impl Rng) -> DistortionSpec {
    sample_spec_among(level, &DistortionKind::ALL, rng)
}

/// As [`sample_spec`], restricted to the eligible members of `allowed`.
/// Falls back to every eligible kind when none of `allowed` is.
pub fn sample_spec_among(level: Severity, allowed: &[DistortionKind], rng: &mut impl Rng) -> DistortionSpec {
    let mut kinds: Vec<DistortionKind> = DistortionKind::eligible(level).iter().copied().filter(|k| allowed.contains(k)).collect();
    if kinds.is_empty() {
        kinds = DistortionKind::eligible(level).to_vec();
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    let (lo, hi) = kind.range(level).expect("eligible kinds have ranges");
    let param = match kind {
        DistortionKind::Jpeg => rng.random_range(lo as u32..=hi as u32) as f64,
        DistortionKind::MotionBlur => {
            let steps = ((hi - lo) / 2.0) as u32;
            lo + 2.0 * rng.random_range(0..=steps) as f64
        }
        _ if lo == hi => lo,
        _ => rng.random_range(lo..=hi),
    };
    DistortionSpec {
        kind,
        param,
        seed: rng.random(),
    }
}

pub fn augment(img: &RgbImage, level: Severity, seed: u64) -> Result<(RgbImage, DistortionSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_spec(level, &mut rng);
    Ok((spec.apply(img)?, spec))
}
