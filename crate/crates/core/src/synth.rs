//! Procedural panoramas with localized degradations and a closed-form
//! quality oracle.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distortions::{sample_spec_among, DistortionKind, DistortionSpec, Severity};
use crate::error::{Error, Result};
use crate::image_ops::RgbImage;
use crate::sphere::{lonlat_to_dir, ErpImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub octaves: u32,
    /// Lattice frequency of the first octave on the unit sphere.
    pub base_freq: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            octaves: 4,
            base_freq: 3.0,
        }
    }
}

/// Yaw-pitch rectangle `[yaw0, yaw1) x [pitch0, pitch1)` carrying one
/// distortion and a severity weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub yaw0: f64,
    pub yaw1: f64,
    pub pitch0: f64,
    pub pitch1: f64,
    pub distortion: DistortionSpec,
    pub weight: f64,
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        let ok = -PI <= self.yaw0
            && self.yaw0 < self.yaw1
            && self.yaw1 <= PI
            && -FRAC_PI_2 <= self.pitch0
            && self.pitch0 < self.pitch1
            && self.pitch1 <= FRAC_PI_2
            && (0.0..=1.0).contains(&self.weight);
        if !ok {
            return Err(Error::invalid(format!("region out of bounds: {self:?}")));
        }
        self.distortion.validate()
    }

    /// Fraction of the sphere's solid angle inside the rectangle.
    pub fn area_fraction(&self) -> f64 {
        (self.yaw1 - self.yaw0) / TAU * (self.pitch1.sin() - self.pitch0.sin()) / 2.0
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.yaw0..self.yaw1).contains(&lon) && (self.pitch0..self.pitch1).contains(&lat)
    }

    pub fn full_sphere(distortion: DistortionSpec, weight: f64) -> Self {
        Self {
            yaw0: -PI,
            yaw1: PI,
            pitch0: -FRAC_PI_2,
            pitch1: FRAC_PI_2,
            distortion,
            weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub texture: Texture,
    pub regions: Vec<Region>,
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub erp: ErpImage,
    pub mos: f64,
    pub scene: SceneSpec,
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64) ^ splitmix((y as u64) ^ splitmix(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise with smoothstep fade, in `[0, 1]`.
fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let t = [smooth(p[0] - f[0]), smooth(p[1] - f[1]), smooth(p[2] - f[2])];
    let (x, y, z) = (f[0] as i64, f[1] as i64, f[2] as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [(1 - dx) as f64 + (2 * dx - 1) as f64 * t[0], (1 - dy) as f64 + (2 * dy - 1) as f64 * t[1], (1 - dz) as f64 + (2 * dz - 1) as f64 * t[2]];
        acc += w[0] * w[1] * w[2] * lattice(seed, x + dx, y + dy, z + dz);
    }
    acc
}

fn fbm(seed: u64, dir: [f64; 3], tex: &Texture) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, tex.base_freq);
    for o in 0..tex.octaves {
        let p = dir.map(|c| c * freq + 17.0);
        sum += amp * value_noise(splitmix(seed.wrapping_add(o as u64)), p);
        norm += amp;
        amp *= 0.55;
        freq *= 2.0;
    }
    sum / norm
}

/// Stretches fbm output, which concentrates around 0.5, back over [0, 1].
fn contrast(v: f64) -> f64 {
    (0.5 + (v - 0.5) * 2.2).clamp(0.0, 1.0)
}

/// Seam-free panorama: noise is evaluated on the unit sphere, so columns at
/// longitude -pi and +pi see the same field.
pub fn gen_panorama(seed: u64, tex: &Texture, width: usize) -> Result<ErpImage> {
    if width < 2 || width % 2 != 0 {
        return Err(Error::invalid(format!("panorama width must be even and >= 2, got {width}")));
    }
    if !(3..=5).contains(&tex.octaves) || !(tex.base_freq > 0.0) {
        return Err(Error::invalid(format!("unsupported texture {tex:?}")));
    }
    let height = width / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky: [f64; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.5..0.8), rng.random_range(0.7..0.95)];
    let ground: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.25..0.6), rng.random_range(0.1..0.4)];
    let seeds: [u64; 4] = std::array::from_fn(|_| rng.random());
    let img = RgbImage::from_fn(width, height, |x, y| {
        let lon = (x as f64 + 0.5) / width as f64 * TAU - PI;
        let lat = FRAC_PI_2 - (y as f64 + 0.5) / height as f64 * PI;
        let d = lonlat_to_dir(lon, lat);
        // horizon blend, perturbed by low-frequency noise
        let warp = fbm(seeds[3], d, &Texture { octaves: 3, base_freq: tex.base_freq * 0.5 }) - 0.5;
        let h = 0.5 + 0.5 * ((lat + 0.3 * warp) * 4.0).tanh();
        let lum = contrast(fbm(seeds[0], d, tex));
        let tint = [fbm(seeds[1], d, tex) - 0.5, fbm(seeds[2], d, tex) - 0.5];
        let mut out = [0.0; 3];
        for c in 0..3 {
            let base = h * sky[c] + (1.0 - h) * ground[c];
            let chroma = if c == 0 { tint[0] } else if c == 2 { tint[1] } else { -0.5 * (tint[0] + tint[1]) };
            out[c] = (base * (0.35 + 0.9 * lum) + 0.4 * chroma).clamp(0.0, 1.0);
        }
        out
    });
    ErpImage::new(img)
}

/// Replaces each region's pixels with the distorted image, in list order.
/// Pixels outside every region keep their exact values.
pub fn apply_regions(erp: &ErpImage, regions: &[Region]) -> Result<ErpImage> {
    let (w, h) = (erp.width(), erp.height());
    let mut current = erp.image().clone();
    for region in regions {
        region.validate()?;
        let distorted = region.distortion.apply(&current)?;
        for y in 0..h {
            let lat = FRAC_PI_2 - (y as f64 + 0.5) / h as f64 * PI;
            if !(region.pitch0..region.pitch1).contains(&lat) {
                continue;
            }
            for x in 0..w {
                let lon = (x as f64 + 0.5) / w as f64 * TAU - PI;
                if region.contains(lon, lat) {
                    current.set_pixel(x, y, distorted.pixel(x, y));
                }
            }
        }
    }
    ErpImage::new(current)
}

/// `100 * (1 - sum w * a * s)`, clamped to `[0, 100]`.
pub fn oracle_mos(scene: &SceneSpec) -> f64 {
    let loss: f64 = scene
        .regions
        .iter()
        .map(|r| r.weight * r.area_fraction() * r.distortion.severity())
        .sum();
    (100.0 * (1.0 - loss)).clamp(0.0, 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub max_regions: usize,
    /// Yaw extent as a fraction of the region's sector, lower/upper bound.
    pub yaw_fill: (f64, f64),
    /// Pitch extent in degrees, lower/upper bound.
    pub pitch_span_deg: (f64, f64),
    pub weight_range: (f64, f64),
    /// Standard deviation of optional Gaussian noise added to saved labels.
    pub label_noise: f64,
    /// Inclusive octave-count range of the texture.
    pub octaves: (u32, u32),
    pub base_freq: (f64, f64),
    /// Distortion kinds regions may carry.
    pub kinds: Vec<DistortionKind>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("synth.{what}")));
        if self.width < 8 || self.width % 2 != 0 {
            return bad("width must be even and at least 8");
        }
        if self.max_regions == 0 {
            return bad("max_regions must be positive");
        }
        let ordered = |(a, b): (f64, f64), lo: f64, hi: f64| lo <= a && a <= b && b <= hi;
        if !ordered(self.yaw_fill, 0.0, 1.0) || self.yaw_fill.1 <= 0.0 {
            return bad("yaw_fill must satisfy 0 <= lo <= hi <= 1, hi > 0");
        }
        if !ordered(self.pitch_span_deg, 0.0, 180.0) || self.pitch_span_deg.1 <= 0.0 {
            return bad("pitch_span_deg must satisfy 0 <= lo <= hi <= 180, hi > 0");
        }
        if !ordered(self.weight_range, 0.0, 1.0) {
            return bad("weight_range must satisfy 0 <= lo <= hi <= 1");
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return bad("label_noise must be nonnegative");
        }
        if !(3 <= self.octaves.0 && self.octaves.0 <= self.octaves.1 && self.octaves.1 <= 5) {
            return bad("octaves must satisfy 3 <= lo <= hi <= 5");
        }
        if !ordered(self.base_freq, f64::MIN_POSITIVE, 64.0) {
            return bad("base_freq must satisfy 0 < lo <= hi <= 64");
        }
        if !self.kinds.iter().any(|k| *k != DistortionKind::Poisson) {
            return bad("kinds must include a kind usable at weak severity");
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 512,
            max_regions: 3,
            yaw_fill: (0.5, 1.0),
            pitch_span_deg: (60.0, 170.0),
            weight_range: (0.6, 1.0),
            label_noise: 0.0,
            octaves: (3, 5),
            base_freq: (2.0, 4.0),
            kinds: DistortionKind::ALL.to_vec(),
        }
    }
}

/// Random scene: up to `max_regions` regions in disjoint yaw sectors, each
/// with a severity level and distortion drawn uniformly.
pub fn random_scene(seed: u64, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5CE7E));
    let texture = Texture {
        octaves: rng.random_range(cfg.octaves.0..=cfg.octaves.1),
        base_freq: if cfg.base_freq.0 < cfg.base_freq.1 {
            rng.random_range(cfg.base_freq.0..cfg.base_freq.1)
        } else {
            cfg.base_freq.0
        },
    };
    let n = rng.random_range(1..=cfg.max_regions.max(1));
    let sector = TAU / n as f64;
    let mut regions = Vec::with_capacity(n);
    for k in 0..n {
        let width = sector * rng.random_range(cfg.yaw_fill.0..=cfg.yaw_fill.1);
        let yaw0 = -PI + k as f64 * sector + rng.random_range(0.0..=sector - width);
        let span = rng.random_range(cfg.pitch_span_deg.0..=cfg.pitch_span_deg.1).to_radians().min(PI);
        let pitch0 = -FRAC_PI_2 + rng.random_range(0.0..=PI - span);
        let level = Severity::ALL[rng.random_range(0..3)];
        regions.push(Region {
            yaw0,
            yaw1: (yaw0 + width).min(PI),
            pitch0,
            pitch1: (pitch0 + span).min(FRAC_PI_2),
            distortion: sample_spec_among(level, &cfg.kinds, &mut rng),
            weight: rng.random_range(cfg.weight_range.0..=cfg.weight_range.1),
        });
    }
    SceneSpec {
        seed,
        texture,
        regions,
    }
}

/// Renders a scene, quantized to 8 bits so in-memory samples match their
/// PNG files exactly.
pub fn render_scene(scene: &SceneSpec, width: usize) -> Result<LabeledSample> {
    let clean = gen_panorama(scene.seed, &scene.texture, width)?;
    let mut img = apply_regions(&clean, &scene.regions)?.into_image();
    img.quantize_8bit();
    Ok(LabeledSample {
        erp: ErpImage::new(img)?,
        mos: oracle_mos(scene),
        scene: scene.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub mos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    /// Optional sidecar of precomputed features in checkpoint format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

impl ManifestEntry {
    pub fn image_path(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }

    pub fn features_path(&self, manifest_dir: &Path) -> Option<PathBuf> {
        self.features.as_ref().map(|f| {
            let p = Path::new(f);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                manifest_dir.join(p)
            }
        })
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !(0.0..=100.0).contains(&entry.mos) {
            return Err(Error::Data(format!("{}:{}: mos {} outside [0, 100]", path.display(), n + 1, entry.mos)));
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Item counts per split for `n` items; the last split absorbs rounding.
pub fn split_counts(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must be nonnegative and sum to 1, got {fractions:?}")));
    }
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    let assigned: usize = counts[..counts.len() - 1].iter().sum();
    *counts.last_mut().unwrap() = n.saturating_sub(assigned);
    Ok(counts)
}

/// Generates `n` samples under `out_dir/images` and writes `train.jsonl`
/// and `test.jsonl`. Split membership comes from a seeded shuffle.
pub fn make_dataset(out_dir: &Path, n: usize, seed: u64, split: (f64, f64), cfg: &SynthConfig) -> Result<DatasetSummary> {
    cfg.validate()?;
    let counts = split_counts(n, &[split.0, split.1])?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let scene = random_scene(splitmix(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)), cfg);
        let sample = render_scene(&scene, cfg.width)?;
        let name = format!("images/pano_{i:05}.png");
        sample.erp.image().save_png(&out_dir.join(&name))?;
        let mut mos = sample.mos;
        if cfg.label_noise > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            mos = (mos + cfg.label_noise * z).clamp(0.0, 100.0);
        }
        entries.push(ManifestEntry {
            image: name,
            mos,
            scene: Some(scene),
            features: None,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train_ix, test_ix) = order.split_at(counts[0]);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| entries[i].clone()).collect::<Vec<_>>()
    };
    let summary = DatasetSummary {
        train: pick(train_ix),
        test: pick(test_ix),
    };
    write_manifest(&out_dir.join("train.jsonl"), &summary.train)?;
    write_manifest(&out_dir.join("test.jsonl"), &summary.test)?;
    Ok(summary)
}

/// In-memory dataset of `n` random scenes, without touching disk.
pub fn generate_samples(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    (0..n)
        .map(|i| render_scene(&random_scene(splitmix(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)), cfg), cfg.width))
        .collect()
}
