//! Spherical action space and gnomonic viewport rendering.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::RgbImage;

/// Equirectangular panorama: an [`RgbImage`] with `width == 2 * height`
/// and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpImage(RgbImage);

impl ErpImage {
    pub fn new(img: RgbImage) -> Result<Self> {
        if img.height() == 0 || img.width() != 2 * img.height() {
            return Err(Error::invalid(format!(
                "equirectangular image must be 2:1, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("erp value {v} outside [0,1]")));
        }
        Ok(Self(img))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::new(RgbImage::load_png(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_image(self) -> RgbImage {
        self.0
    }

    /// Bilinear sample at (longitude, latitude) with longitude wrap and
    /// latitude clamped to the first/last pixel rows.
    pub fn sample(&self, lon: f64, lat: f64) -> [f64; 3] {
        let (w, h) = (self.width() as i64, self.height() as i64);
        let u = (lon + PI) / TAU * w as f64 - 0.5;
        let v = (FRAC_PI_2 - lat.clamp(-FRAC_PI_2, FRAC_PI_2)) / PI * h as f64 - 0.5;
        let (uf, vf) = (u.floor(), v.floor());
        let (fx, fy) = (u - uf, v - vf);
        let x0 = (uf as i64).rem_euclid(w) as usize;
        let x1 = (x0 + 1) % w as usize;
        let y0 = (vf as i64).clamp(0, h - 1) as usize;
        let y1 = (vf as i64 + 1).clamp(0, h - 1) as usize;
        let img = &self.0;
        let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bot = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }
}

/// Mapping of yaw into `[-pi, pi)`. The result is snapped to a 2^-40 rad
/// lattice so that angles differing by whole turns land on the same value
/// despite rounding in the reduction.
pub fn normalize_yaw(yaw: f64) -> f64 {
    const LATTICE: f64 = 1.0 / (1u64 << 40) as f64;
    let r = (yaw + PI).rem_euclid(TAU) - PI;
    let snapped = (r / LATTICE).round() * LATTICE;
    if snapped >= PI {
        snapped - TAU
    } else {
        snapped
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub index: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub fov_deg: f64,
}

impl Viewport {
    pub fn new(index: usize, yaw: f64, pitch: f64, fov_deg: f64) -> Self {
        Self {
            index,
            yaw: normalize_yaw(yaw),
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
            fov_deg,
        }
    }

    /// Unit forward direction in world coordinates (x right, y up, z at
    /// yaw 0 on the equator).
    pub fn direction(&self) -> [f64; 3] {
        lonlat_to_dir(self.yaw, self.pitch)
    }
}

pub fn lonlat_to_dir(lon: f64, lat: f64) -> [f64; 3] {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

pub fn dir_to_lonlat(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    ((d[0]).atan2(d[2]), (d[1] / n).clamp(-1.0, 1.0).asin())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportGrid {
    pub n_yaw: usize,
    pub n_pitch: usize,
    pub viewports: Vec<Viewport>,
}

impl ViewportGrid {
    pub fn len(&self) -> usize {
        self.viewports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewports.is_empty()
    }

    pub fn get(&self, index: usize) -> &Viewport {
        &self.viewports[index]
    }

    pub fn fov_deg(&self) -> f64 {
        self.viewports[0].fov_deg
    }
}

pub fn build_grid(n_yaw: usize, n_pitch: usize, fov_deg: f64) -> Result<ViewportGrid> {
    if n_yaw == 0 || n_pitch == 0 {
        return Err(Error::invalid(format!("grid counts must be positive, got {n_yaw}x{n_pitch}")));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::invalid(format!("fov must lie in (0, 180), got {fov_deg}")));
    }
    let mut viewports = Vec::with_capacity(n_yaw * n_pitch);
    for j in 0..n_pitch {
        let pitch = -FRAC_PI_2 + (j as f64 + 0.5) * PI / n_pitch as f64;
        for i in 0..n_yaw {
            let yaw = -PI + (i as f64 + 0.5) * TAU / n_yaw as f64;
            viewports.push(Viewport::new(j * n_yaw + i, yaw, pitch, fov_deg));
        }
    }
    Ok(ViewportGrid {
        n_yaw,
        n_pitch,
        viewports,
    })
}

/// Camera-to-world rotation of a viewport: pitch about the camera x axis,
/// then yaw about the world up axis.
#[derive(Clone, Copy, Debug)]
struct Camera {
    half_tan: f64,
    sy: f64,
    cy: f64,
    sp: f64,
    cp: f64,
}

impl Camera {
    fn new(vp: &Viewport) -> Self {
        Self {
            half_tan: (vp.fov_deg.to_radians() / 2.0).tan(),
            sy: vp.yaw.sin(),
            cy: vp.yaw.cos(),
            sp: vp.pitch.sin(),
            cp: vp.pitch.cos(),
        }
    }

    /// World direction of image-plane point (a, b) in `[-1, 1]^2`, with `b`
    /// pointing up.
    fn ray(&self, a: f64, b: f64) -> [f64; 3] {
        let (x, y, z) = (a * self.half_tan, b * self.half_tan, 1.0);
        // pitch: rotate in the y-z plane so +z tilts toward +y
        let (y1, z1) = (y * self.cp + z * self.sp, -y * self.sp + z * self.cp);
        // yaw: rotate in the x-z plane so +z turns toward +x
        [x * self.cy + z1 * self.sy, y1, -x * self.sy + z1 * self.cy]
    }
}

/// Longitude/latitude sampled by output pixel (px, py) of a `res`-pixel
/// viewport. Row 0 is the top of the view.
pub fn pixel_lonlat(vp: &Viewport, res: usize, px: usize, py: usize) -> (f64, f64) {
    let cam = Camera::new(vp);
    let (a, b) = plane_coords(res, px, py);
    dir_to_lonlat(cam.ray(a, b))
}

fn plane_coords(res: usize, px: usize, py: usize) -> (f64, f64) {
    let s = res as f64;
    ((px as f64 + 0.5) / s * 2.0 - 1.0, 1.0 - (py as f64 + 0.5) / s * 2.0)
}

pub fn render_viewport(erp: &ErpImage, vp: &Viewport, res: usize) -> Result<RgbImage> {
    if res < 2 {
        return Err(Error::invalid(format!("viewport resolution must be >= 2, got {res}")));
    }
    let cam = Camera::new(vp);
    let mut data = Vec::with_capacity(res * res * 3);
    for py in 0..res {
        for px in 0..res {
            let (a, b) = plane_coords(res, px, py);
            let (lon, lat) = dir_to_lonlat(cam.ray(a, b));
            data.extend_from_slice(&erp.sample(lon, lat));
        }
    }
    RgbImage::new(res, res, data)
}

/// ERP pixels read by the bilinear sampler when rendering `vp` at `res`,
/// as a row-major mask over the panorama.
pub fn footprint(erp_width: usize, erp_height: usize, vp: &Viewport, res: usize) -> Vec<bool> {
    let (w, h) = (erp_width as i64, erp_height as i64);
    let cam = Camera::new(vp);
    let mut mask = vec![false; erp_width * erp_height];
    for py in 0..res {
        for px in 0..res {
            let (a, b) = plane_coords(res, px, py);
            let (lon, lat) = dir_to_lonlat(cam.ray(a, b));
            let u = (lon + PI) / TAU * w as f64 - 0.5;
            let v = (FRAC_PI_2 - lat) / PI * h as f64 - 0.5;
            let (x0, y0) = (u.floor() as i64, v.floor() as i64);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let x = (x0 + dx).rem_euclid(w);
                let y = (y0 + dy).clamp(0, h - 1);
                mask[(y * w + x) as usize] = true;
            }
        }
    }
    mask
}

/// Fraction of the `x` viewports present in `visited`. Duplicates count once.
pub fn coverage_fraction(visited: &[usize], x: usize) -> Result<f64> {
    if x == 0 {
        return Err(Error::invalid("coverage over an empty grid"));
    }
    let mut seen = vec![false; x];
    for &i in visited {
        if i >= x {
            return Err(Error::contract(format!("viewport index {i} outside grid of {x}")));
        }
        seen[i] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / x as f64)
}

/// Great-circle angle between two (lon, lat) points.
pub fn angular_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (da, db) = (lonlat_to_dir(a.0, a.1), lonlat_to_dir(b.0, b.1));
    let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos()
}
