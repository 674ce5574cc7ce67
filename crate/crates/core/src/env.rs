//! Per-panorama environment: everything a rollout needs, precomputed once.
//!
//! Rewards only ever look at grid viewports, so viewport entropies and the
//! full pairwise SSIM table are cached next to the feature banks.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortions::{augment, Severity};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureEncoder, FeatureVec, Sidecar};
use crate::image_ops::{shannon_entropy, to_gray, SsimPrep, DEFAULT_BINS};
use crate::rewards::{step_breakdown, RewardCoeffs, StepBreakdown, StepTerms};
use crate::sphere::{build_grid, pixel_lonlat, render_viewport, ErpImage, ViewportGrid};
use crate::synth::{read_manifest, splitmix, LabeledSample, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_yaw: usize,
    pub n_pitch: usize,
    pub fov_deg: f64,
    /// Side length of rendered viewports in pixels.
    pub viewport_res: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n_yaw: 8, n_pitch: 4, fov_deg: 90.0, viewport_res: 224 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.viewport_res < 16 {
            return Err(Error::Config(format!("viewport_res must be >= 16, got {}", self.viewport_res)));
        }
        self.build().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build(&self) -> Result<ViewportGrid> {
        build_grid(self.n_yaw, self.n_pitch, self.fov_deg)
    }

    pub fn count(&self) -> usize {
        self.n_yaw * self.n_pitch
    }
}

/// Mixes a base seed with stream tags into an independent seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t.wrapping_add(0x51_7CC1))))
}

/// Cached view of one panorama.
#[derive(Clone, Debug)]
pub struct ImageEnv {
    pub name: String,
    pub mos: f64,
    pub bank: FeatureBank,
    /// Weak, mild and strong augmented copies.
    pub variants: Option<[FeatureBank; 3]>,
    /// Viewport histogram entropies, bits.
    pub entropy: Vec<f64>,
    /// `X x X` row-major SSIM between viewports.
    pub ssim: Vec<f64>,
    pub pitch: Vec<f64>,
    /// Fraction of each viewport lying inside a distorted region, when the
    /// scene is known.
    pub distorted: Option<Vec<f64>>,
}

impl ImageEnv {
    pub fn count(&self) -> usize {
        self.entropy.len()
    }

    pub fn ssim_between(&self, a: usize, b: usize) -> f64 {
        self.ssim[a * self.count() + b]
    }

    pub fn step_terms(&self, path: &[usize], t: usize) -> StepTerms {
        let j = path[t];
        StepTerms {
            entropy: self.entropy[j],
            ssim_prev: (t > 0).then(|| self.ssim_between(path[t - 1], j)),
            novel: !path[..t].contains(&j),
            pitch: self.pitch[j],
        }
    }

    pub fn step_breakdowns(&self, path: &[usize], c: &RewardCoeffs) -> Result<Vec<StepBreakdown>> {
        if let Some(&bad) = path.iter().find(|&&j| j >= self.count()) {
            return Err(Error::contract(format!("viewport {bad} outside grid of {}", self.count())));
        }
        (0..path.len()).map(|t| step_breakdown(&self.step_terms(path, t), c)).collect()
    }

    /// Mean distorted fraction over every visit in `paths`.
    pub fn visitation_rate(&self, paths: &[Vec<usize>]) -> Option<f64> {
        let d = self.distorted.as_ref()?;
        let visits: Vec<f64> = paths.iter().flatten().map(|&j| d[j]).collect();
        (!visits.is_empty()).then(|| visits.iter().sum::<f64>() / visits.len() as f64)
    }

    /// The rate a uniformly random viewport choice would achieve.
    pub fn uniform_visitation_rate(&self) -> Option<f64> {
        let d = self.distorted.as_ref()?;
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Builds [`ImageEnv`]s for one grid and encoder.
#[derive(Clone, Debug)]
pub struct EnvBuilder {
    pub grid: ViewportGrid,
    pub res: usize,
    pub encoder: FeatureEncoder,
    pub augment: bool,
}

/// Samples per side when estimating a viewport's distorted fraction.
const REGION_PROBE: usize = 16;

impl EnvBuilder {
    pub fn new(grid: &GridConfig, feature_dim: usize, augment: bool) -> Result<Self> {
        grid.validate()?;
        Ok(Self {
            grid: grid.build()?,
            res: grid.viewport_res,
            encoder: FeatureEncoder::new(feature_dim)?,
            augment,
        })
    }

    /// `aug_seed` fixes the three augmented copies of this image.
    pub fn build(&self, name: &str, erp: &ErpImage, mos: f64, scene: Option<&SceneSpec>, aug_seed: u64) -> Result<ImageEnv> {
        let views = self
            .grid
            .viewports
            .iter()
            .map(|vp| render_viewport(erp, vp, self.res))
            .collect::<Result<Vec<_>>>()?;
        let feats = views.iter().map(|v| self.encoder.encode_viewport(v)).collect::<Result<Vec<FeatureVec>>>()?;
        let bank = FeatureBank::new(&self.encoder.encode_global(erp)?, &feats)?;
        let variants = if self.augment {
            let mut out = Vec::with_capacity(3);
            for (l, level) in Severity::ALL.into_iter().enumerate() {
                let (img, _) = augment(erp.image(), level, derive_seed(aug_seed, &[l as u64]))?;
                out.push(FeatureBank::compute(&self.encoder, &ErpImage::new(img)?, &self.grid, self.res)?);
            }
            let [a, b, c]: [FeatureBank; 3] = out.try_into().expect("three severities");
            Some([a, b, c])
        } else {
            None
        };
        self.assemble(name, &views, bank, variants, mos, scene)
    }

    /// Uses externally supplied features; augmented copies would need the
    /// external encoder, so none are made.
    pub fn build_with_sidecar(&self, name: &str, erp: &ErpImage, mos: f64, scene: Option<&SceneSpec>, sidecar: &Sidecar) -> Result<ImageEnv> {
        let bank = sidecar.bank()?;
        if bank.count() != self.grid.len() {
            return Err(Error::Data(format!("{name}: sidecar has {} viewports, grid has {}", bank.count(), self.grid.len())));
        }
        let views = self
            .grid
            .viewports
            .iter()
            .map(|vp| render_viewport(erp, vp, self.res))
            .collect::<Result<Vec<_>>>()?;
        self.assemble(name, &views, bank, None, mos, scene)
    }

    fn assemble(
        &self,
        name: &str,
        views: &[crate::image_ops::RgbImage],
        bank: FeatureBank,
        variants: Option<[FeatureBank; 3]>,
        mos: f64,
        scene: Option<&SceneSpec>,
    ) -> Result<ImageEnv> {
        let x = views.len();
        let grays: Vec<_> = views.iter().map(to_gray).collect();
        let entropy = grays.iter().map(|g| shannon_entropy(g, DEFAULT_BINS)).collect();
        let preps = grays.iter().map(SsimPrep::new).collect::<Result<Vec<_>>>()?;
        let mut ssim = vec![1.0; x * x];
        for a in 0..x {
            for b in 0..x {
                if a != b {
                    ssim[a * x + b] = preps[a].ssim(&preps[b])?;
                }
            }
        }
        let distorted = scene.map(|s| {
            self.grid
                .viewports
                .iter()
                .map(|vp| {
                    let mut hit = 0usize;
                    for py in 0..REGION_PROBE {
                        for px in 0..REGION_PROBE {
                            let (lon, lat) = pixel_lonlat(vp, REGION_PROBE, px, py);
                            if s.regions.iter().any(|r| r.contains(lon, lat)) {
                                hit += 1;
                            }
                        }
                    }
                    hit as f64 / (REGION_PROBE * REGION_PROBE) as f64
                })
                .collect()
        });
        Ok(ImageEnv {
            name: name.to_string(),
            mos,
            bank,
            variants,
            entropy,
            ssim,
            pitch: self.grid.viewports.iter().map(|v| v.pitch).collect(),
            distorted,
        })
    }
}

/// FNV-1a of an image name, so augmentation seeds follow the image rather
/// than its position in a manifest.
pub fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Builds environments for in-memory samples, in order.
pub fn envs_from_samples(builder: &EnvBuilder, samples: &[LabeledSample], names: &[String], seed: u64, threads: usize) -> Result<Vec<ImageEnv>> {
    if names.len() != samples.len() {
        return Err(Error::contract("one name per sample"));
    }
    pool(threads)?.install(|| {
        samples
            .par_iter()
            .zip(names)
            .map(|(s, n)| builder.build(n, &s.erp, s.mos, Some(&s.scene), derive_seed(seed, &[name_tag(n)])))
            .collect()
    })
}

/// Loads every manifest entry, reading sidecar features when listed.
pub fn load_envs(builder: &EnvBuilder, manifest: &Path, seed: u64, threads: usize) -> Result<Vec<ImageEnv>> {
    let entries = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    pool(threads)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let path = e.image_path(dir);
                let erp = ErpImage::load_png(&path)?;
                match e.features_path(dir) {
                    Some(fp) => {
                        let side = Sidecar::load(&fp, builder.grid.len(), builder.encoder.dim())?;
                        builder.build_with_sidecar(&e.image, &erp, e.mos, e.scene.as_ref(), &side)
                    }
                    None => builder.build(&e.image, &erp, e.mos, e.scene.as_ref(), derive_seed(seed, &[name_tag(&e.image)])),
                }
            })
            .collect()
    })
}

pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
