//! Visit heatmaps: scanpath visits splatted onto the panorama.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::image_ops::RgbImage;
use crate::sphere::{lonlat_to_dir, ErpImage, ViewportGrid};

/// Opacity of the overlay where the heat is at its maximum.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Per-pixel visit density in the ERP frame, scaled so the maximum is 1.
/// Each visit adds a Gaussian in great-circle distance around the viewport
/// center with sigma equal to a quarter of the field of view. No visits
/// give an all-zero map.
pub fn visit_density(grid: &ViewportGrid, paths: &[Vec<usize>], width: usize, height: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; grid.len()];
    for &i in paths.iter().flatten() {
        if i >= grid.len() {
            return Err(Error::invalid(format!("viewport index {i} outside the {}-viewport grid", grid.len())));
        }
        counts[i] += 1;
    }
    let centers: Vec<([f64; 3], f64, f64)> = grid
        .viewports
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(vp, &c)| {
            let sigma = vp.fov_deg.to_radians() / 4.0;
            (lonlat_to_dir(vp.yaw, vp.pitch), c as f64, 0.5 / (sigma * sigma))
        })
        .collect();
    let mut heat = Vec::with_capacity(width * height);
    for y in 0..height {
        let lat = FRAC_PI_2 - (y as f64 + 0.5) / height as f64 * PI;
        for x in 0..width {
            let lon = (x as f64 + 0.5) / width as f64 * TAU - PI;
            let d = lonlat_to_dir(lon, lat);
            let v: f64 = centers
                .iter()
                .map(|(c, n, k)| {
                    let cos = (d[0] * c[0] + d[1] * c[1] + d[2] * c[2]).clamp(-1.0, 1.0);
                    let theta = cos.acos();
                    n * (-k * theta * theta).exp()
                })
                .sum();
            heat.push(v);
        }
    }
    let max = heat.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|v| *v /= max);
    }
    Ok(heat)
}

/// Blue, cyan, green, yellow, red at 0, 1/4, 1/2, 3/4, 1, linear between.
pub fn color_ramp(v: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let s = v.clamp(0.0, 1.0) * 4.0;
    let i = (s.floor() as usize).min(3);
    let f = s - i as f64;
    std::array::from_fn(|c| STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c]))
}

/// Overlays the ramp-colored density on the panorama with opacity
/// `alpha * heat`, so unvisited areas keep their pixels.
pub fn render_heatmap(erp: &ErpImage, grid: &ViewportGrid, paths: &[Vec<usize>], alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("heatmap alpha must lie in [0,1], got {alpha}")));
    }
    let (w, h) = (erp.width(), erp.height());
    let heat = visit_density(grid, paths, w, h)?;
    let img = erp.image();
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let v = heat[y * w + x];
        let a = alpha * v;
        let col = color_ramp(v);
        let px = img.pixel(x, y);
        std::array::from_fn(|c| (1.0 - a) * px[c] + a * col[c])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::build_grid;

    fn argmax(v: &[f64]) -> usize {
        (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
    }

    #[test]
    fn single_viewport_peaks_at_its_center() {
        let grid = build_grid(8, 4, 90.0).unwrap();
        let (w, h) = (256, 128);
        for j in [0, 5, 13, 22, 31] {
            let paths = vec![vec![j; 7]; 15];
            let heat = visit_density(&grid, &paths, w, h).unwrap();
            let p = argmax(&heat);
            let (px, py) = ((p % w) as f64, (p / w) as f64);
            let vp = grid.get(j);
            let cx = (vp.yaw + PI) / TAU * w as f64 - 0.5;
            let cy = (FRAC_PI_2 - vp.pitch) / PI * h as f64 - 0.5;
            let dx = (px - cx).abs().min(w as f64 - (px - cx).abs());
            assert!(dx <= 1.0 && (py - cy).abs() <= 1.0, "viewport {j}: peak ({px},{py}) vs center ({cx},{cy})");
            assert_eq!(heat[p], 1.0);
        }
    }

    #[test]
    fn overlay_keeps_size_and_unvisited_pixels() {
        let grid = build_grid(8, 4, 90.0).unwrap();
        let img = RgbImage::from_fn(64, 32, |x, y| [x as f64 / 64.0, y as f64 / 32.0, 0.5]);
        let erp = ErpImage::new(img.clone()).unwrap();
        let out = render_heatmap(&erp, &grid, &[vec![3]], DEFAULT_ALPHA).unwrap();
        assert_eq!((out.width(), out.height()), (64, 32));
        assert_eq!(render_heatmap(&erp, &grid, &[], DEFAULT_ALPHA).unwrap(), img);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(render_heatmap(&erp, &grid, &[vec![32]], 0.5).is_err());
        assert!(render_heatmap(&erp, &grid, &[vec![0]], 1.5).is_err());
    }

    #[test]
    fn ramp_hits_its_stops() {
        assert_eq!(color_ramp(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(color_ramp(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(color_ramp(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(color_ramp(0.625), [0.5, 1.0, 0.0]);
    }
}
