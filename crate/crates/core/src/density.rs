//! Ground-truth density rendering from dot annotations, and count recovery.
//!
//! Each dot contributes an isotropic Gaussian sampled on the pixel grid and
//! normalised to unit mass over its `±ceil(4σ)` support window, so an interior
//! dot adds exactly one to the map sum. Pixels of the window falling outside
//! the frame are dropped, unless [`RenderOptions::renormalize_border_kernels`]
//! is set, in which case the in-frame part is rescaled to unit mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DensityMap, DotAnnotationSet};

/// Support half-width in units of sigma.
pub const KERNEL_EXTENT_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub renormalize_border_kernels: bool,
}

pub fn kernel_radius(sigma: f64) -> usize {
    (KERNEL_EXTENT_SIGMAS * sigma).ceil() as usize
}

pub fn render_density(
    dots: &DotAnnotationSet,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap> {
    render_density_with(dots, height, width, sigma, RenderOptions::default())
}

pub fn render_density_with(
    dots: &DotAnnotationSet,
    height: usize,
    width: usize,
    sigma: f64,
    opts: RenderOptions,
) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    dots.check_frame(height, width)?;
    let mut map = DensityMap::zeros(height, width, Some(sigma));
    let radius = kernel_radius(sigma) as f64;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut rows = Vec::new();
    let mut cols = Vec::new();

    for dot in &dots.points {
        // Separable kernel: weights along each axis over the support window.
        let axis = |centre: f64, out: &mut Vec<(i64, f64)>| {
            out.clear();
            let lo = (centre - radius).ceil() as i64;
            let hi = (centre + radius).floor() as i64;
            for i in lo..=hi {
                let d = i as f64 - centre;
                out.push((i, (-d * d * inv_two_var).exp()));
            }
        };
        axis(dot.row, &mut rows);
        axis(dot.col, &mut cols);

        let full: f64 = rows.iter().map(|r| r.1).sum::<f64>() * cols.iter().map(|c| c.1).sum::<f64>();
        let inside = |i: i64, n: usize| i >= 0 && (i as usize) < n;
        let norm = if opts.renormalize_border_kernels {
            rows.iter().filter(|r| inside(r.0, height)).map(|r| r.1).sum::<f64>()
                * cols.iter().filter(|c| inside(c.0, width)).map(|c| c.1).sum::<f64>()
        } else {
            full
        };

        for &(r, wr) in rows.iter().filter(|r| inside(r.0, height)) {
            let base = r as usize * width;
            for &(c, wc) in cols.iter().filter(|c| inside(c.0, width)) {
                map.values[base + c as usize] += wr * wc / norm;
            }
        }
    }
    Ok(map)
}

/// Raw count: the sum of all pixels.
pub fn count_from_density(m: &DensityMap) -> f64 {
    m.sum()
}

/// Count rounded to the nearest integer (ties away from zero), clamped at zero.
pub fn integer_count(m: &DensityMap) -> u64 {
    round_count(count_from_density(m))
}

pub fn round_count(raw: f64) -> u64 {
    if raw.is_nan() {
        return 0;
    }
    raw.max(0.0).round() as u64
}
