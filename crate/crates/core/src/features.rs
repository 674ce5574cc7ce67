//! Deterministic compact image descriptor standing in for a frozen
//! pretrained backbone.
//!
//! The raw descriptor has 32 components: a 4x4 mean-luma grid, an 8-bin
//! magnitude-weighted Sobel orientation histogram, per-channel mean and
//! standard deviation, histogram entropy, and the mean SSIM-window
//! variance. It is standardized with fixed constants and mapped to `d`
//! dimensions by a random projection drawn from a constant seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::image_ops::{shannon_entropy, to_gray, GrayImage, RgbImage, SsimPrep, DEFAULT_BINS, SSIM_WINDOW};
use crate::sphere::{render_viewport, ErpImage, ViewportGrid};

pub const RAW_DIM: usize = 32;
pub const PROJECTION_SEED: u64 = 0x0BAD_5EED_1DEA_F00D;
pub const GLOBAL_SIZE: (usize, usize) = (64, 32);
pub const MIN_INPUT: usize = 8;

/// Offsets and scales applied to the raw descriptor. The local variance is
/// standardized on a log10 scale because blur and noise move it across
/// orders of magnitude.
const LUMA_MEAN: (f64, f64) = (0.5, 0.25);
const HIST: (f64, f64) = (0.125, 0.1);
const CHANNEL_MEAN: (f64, f64) = (0.5, 0.25);
const CHANNEL_STD: (f64, f64) = (0.15, 0.1);
const ENTROPY: (f64, f64) = (6.0, 1.5);
const LOG_VARIANCE: (f64, f64) = (-2.5, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVec(pub Tensor);

impl FeatureVec {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Raw 32-component descriptor before standardization.
pub fn raw_descriptor(img: &RgbImage) -> Result<[f64; RAW_DIM]> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_INPUT || h < MIN_INPUT {
        return Err(Error::invalid(format!("encoder input must be at least {MIN_INPUT}x{MIN_INPUT}, got {w}x{h}")));
    }
    let gray = to_gray(img);
    let mut out = [0.0; RAW_DIM];

    for gy in 0..4 {
        for gx in 0..4 {
            let (x0, x1) = (gx * w / 4, (gx + 1) * w / 4);
            let (y0, y1) = (gy * h / 4, (gy + 1) * h / 4);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray.get(x, y);
                }
            }
            out[gy * 4 + gx] = acc / ((x1 - x0) * (y1 - y0)) as f64;
        }
    }

    out[16..24].copy_from_slice(&orientation_histogram(&gray));

    let n = (w * h) as f64;
    for c in 0..3 {
        let plane = img.channel(c);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        out[24 + c] = mean;
        out[27 + c] = var.sqrt();
    }

    out[30] = shannon_entropy(&gray, DEFAULT_BINS);
    out[31] = if w >= SSIM_WINDOW && h >= SSIM_WINDOW {
        SsimPrep::new(&gray)?.mean_local_variance()
    } else {
        let mean = gray.data().iter().sum::<f64>() / n;
        gray.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    };
    Ok(out)
}

/// Sobel orientation histogram, magnitude weighted and L1 normalized; all
/// zeros when the image has no gradient.
fn orientation_histogram(gray: &GrayImage) -> [f64; 8] {
    let (w, h) = (gray.width() as i64, gray.height() as i64);
    let at = |x: i64, y: i64| gray.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut hist = [0.0; 8];
    for y in 0..h {
        for x in 0..w {
            // paired differences keep flat neighborhoods exactly zero
            let gx = (at(x + 1, y - 1) - at(x - 1, y - 1))
                + 2.0 * (at(x + 1, y) - at(x - 1, y))
                + (at(x + 1, y + 1) - at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) - at(x - 1, y - 1))
                + 2.0 * (at(x, y + 1) - at(x, y - 1))
                + (at(x + 1, y + 1) - at(x + 1, y - 1));
            let m = (gx * gx + gy * gy).sqrt();
            if m > 0.0 {
                let theta = gy.atan2(gx) + PI;
                let bin = ((theta / (2.0 * PI) * 8.0) as usize).min(7);
                hist[bin] += m;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 1e-12 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
    hist
}

pub fn standardize(raw: &[f64; RAW_DIM]) -> [f64; RAW_DIM] {
    let mut out = [0.0; RAW_DIM];
    for (i, &v) in raw.iter().enumerate() {
        let (mu, sigma) = match i {
            0..=15 => LUMA_MEAN,
            16..=23 => HIST,
            24..=26 => CHANNEL_MEAN,
            27..=29 => CHANNEL_STD,
            30 => ENTROPY,
            _ => LOG_VARIANCE,
        };
        let x = if i == 31 { (v + 1e-6).log10() } else { v };
        out[i] = (x - mu) / sigma;
    }
    out
}

/// Fixed encoder: standardization followed by a `d x 32` Gaussian
/// projection scaled by `1/sqrt(32)`.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl FeatureEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let scale = 1.0 / (RAW_DIM as f64).sqrt();
        let projection = (0..dim * RAW_DIM)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self { dim, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn encode_raw(&self, raw: &[f64; RAW_DIM]) -> FeatureVec {
        let z = standardize(raw);
        let values = (0..self.dim)
            .map(|i| {
                self.projection[i * RAW_DIM..(i + 1) * RAW_DIM]
                    .iter()
                    .zip(&z)
                    .map(|(p, v)| p * v)
                    .sum()
            })
            .collect();
        FeatureVec(Tensor::vector(values))
    }

    pub fn encode_viewport(&self, img: &RgbImage) -> Result<FeatureVec> {
        Ok(self.encode_raw(&raw_descriptor(img)?))
    }

    /// The panorama is box-resampled to 64x32 before encoding.
    pub fn encode_global(&self, erp: &ErpImage) -> Result<FeatureVec> {
        let small = erp.image().resize_box(GLOBAL_SIZE.0, GLOBAL_SIZE.1)?;
        self.encode_viewport(&small)
    }
}

/// Renders and encodes every grid viewport.
pub fn precompute_all(enc: &FeatureEncoder, erp: &ErpImage, grid: &ViewportGrid, res: usize) -> Result<Vec<FeatureVec>> {
    grid.viewports
        .iter()
        .map(|vp| enc.encode_viewport(&render_viewport(erp, vp, res)?))
        .collect()
}

/// External features for one panorama: per-viewport vectors and the
/// global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sidecar {
    pub viewports: Vec<FeatureVec>,
    pub global: FeatureVec,
}

impl Sidecar {
    /// Stored in the checkpoint container as `global` `[d]` and
    /// `viewports` `[X x d]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.global.dim();
        let flat: Vec<f64> = self.viewports.iter().flat_map(|f| f.values().to_vec()).collect();
        let entries = vec![
            ("global".to_string(), self.global.0.clone()),
            ("viewports".to_string(), Tensor::matrix(self.viewports.len(), d, flat)?),
        ];
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path, x: usize, d: usize) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("{}: sidecar lacks `{name}`", path.display())))
        };
        let global = find("global")?;
        let views = find("viewports")?;
        if global.shape() != [d] || views.shape() != [x, d] {
            return Err(Error::Data(format!(
                "{}: sidecar shapes {:?}/{:?} do not match X={x}, d={d}",
                path.display(),
                global.shape(),
                views.shape()
            )));
        }
        Ok(Self {
            viewports: views.data().chunks(d).map(|c| FeatureVec(Tensor::vector(c.to_vec()))).collect(),
            global: FeatureVec(global.clone()),
        })
    }
}

/// Feature layout consumed by the policy and assessor: the global vector
/// and a `d x X` matrix whose column `j` is viewport `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub global: Tensor,
    pub viewports: Tensor,
}

impl FeatureBank {
    pub fn new(global: &FeatureVec, viewports: &[FeatureVec]) -> Result<Self> {
        let d = global.dim();
        if viewports.is_empty() || viewports.iter().any(|f| f.dim() != d) {
            return Err(Error::contract(format!(
                "feature bank needs at least one viewport of dimension {d}"
            )));
        }
        let cols: Vec<&[f64]> = viewports.iter().map(|f| f.values()).collect();
        Ok(Self { global: global.0.clone(), viewports: Tensor::from_columns(&cols)? })
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn count(&self) -> usize {
        self.viewports.cols()
    }

    pub fn viewport(&self, j: usize) -> Vec<f64> {
        let x = self.count();
        (0..self.dim()).map(|i| self.viewports.data()[i * x + j]).collect()
    }

    /// Encodes a panorama with `enc` on `grid`.
    pub fn compute(enc: &FeatureEncoder, erp: &ErpImage, grid: &ViewportGrid, res: usize) -> Result<Self> {
        let views = precompute_all(enc, erp, grid, res)?;
        Self::new(&enc.encode_global(erp)?, &views)
    }
}

impl Sidecar {
    pub fn bank(&self) -> Result<FeatureBank> {
        FeatureBank::new(&self.global, &self.viewports)
    }
}
