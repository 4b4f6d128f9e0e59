//! Geometric sample transforms: resizing, cropping, random patches and grid composites.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{Dataset, Dot, DotAnnotationSet, Image, Sample, CHANNELS};

type RgbF = ImageBuffer<Rgb<f32>, Vec<f32>>;

fn to_buffer(img: &Image) -> RgbF {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let p = img.pixels();
    let mut raw = Vec::with_capacity(CHANNELS * plane);
    for i in 0..plane {
        for c in 0..CHANNELS {
            raw.push(p[c * plane + i]);
        }
    }
    RgbF::from_raw(w as u32, h as u32, raw).expect("buffer sized from image")
}

fn from_buffer(id: &str, buf: &RgbF) -> Result<Image> {
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let plane = h * w;
    let mut pixels = vec![0.0f32; CHANNELS * plane];
    for (i, px) in buf.as_raw().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            pixels[c * plane + i] = px[c].clamp(0.0, 1.0);
        }
    }
    Image::new(id, h, w, pixels)
}

/// Bilinear resize.
pub fn resize_image(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("cannot resize to an empty frame"));
    }
    if img.height() == height && img.width() == width {
        return Ok(img.clone());
    }
    let out = imageops::resize(&to_buffer(img), width as u32, height as u32, FilterType::Triangle);
    from_buffer(img.id(), &out)
}

/// Gaussian blur with standard deviation `sigma` pixels; a no-op for `sigma <= 0`.
pub fn blur_image(img: &Image, sigma: f32) -> Result<Image> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let out = imageops::blur(&to_buffer(img), sigma);
    from_buffer(img.id(), &out)
}

/// Maps a pixel-centre coordinate through a resize by `scale`, clamped into the new frame.
fn rescale_coord(v: f64, scale: f64, extent: usize) -> f64 {
    let mapped = (v + 0.5) * scale - 0.5;
    let upper = extent as f64 - 1e-6;
    mapped.clamp(0.0, upper)
}

/// Resizes the image and moves the dots with it.
pub fn resize_sample(s: &Sample, height: usize, width: usize) -> Result<Sample> {
    let image = resize_image(s.image(), height, width)?;
    let sy = height as f64 / s.image().height() as f64;
    let sx = width as f64 / s.image().width() as f64;
    let dots = s.dots().map(|d| {
        let points = d
            .points
            .iter()
            .map(|p| Dot::new(rescale_coord(p.row, sy, height), rescale_coord(p.col, sx, width)))
            .collect();
        DotAnnotationSet::new(image.id(), points)
    });
    Sample::new(image, dots, s.domain())
}

/// Cuts a window out of `s`. A dot is kept iff it lies inside the window;
/// kept dots are translated into window coordinates.
pub fn crop_sample(s: &Sample, top: usize, left: usize, height: usize, width: usize, id: &str) -> Result<Sample> {
    let img = s.image();
    if height == 0 || width == 0 || top + height > img.height() || left + width > img.width() {
        return Err(Error::invalid(format!(
            "window {height}x{width} at ({top}, {left}) does not fit image `{}` ({}x{})",
            img.id(),
            img.height(),
            img.width()
        )));
    }
    let mut pixels = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        for r in top..top + height {
            let start = (c * img.height() + r) * img.width() + left;
            pixels.extend_from_slice(&img.pixels()[start..start + width]);
        }
    }
    let image = Image::new(id, height, width, pixels)?;
    let (t, l) = (top as f64, left as f64);
    let dots = s.dots().map(|d| {
        let points = d
            .points
            .iter()
            .filter(|p| p.row >= t && p.row < t + height as f64 && p.col >= l && p.col < l + width as f64)
            .map(|p| Dot::new(p.row - t, p.col - l))
            .collect();
        DotAnnotationSet::new(id, points)
    });
    Sample::new(image, dots, s.domain())
}

/// Draws `count` square patches, uniformly over all valid (image, top-left
/// corner) pairs of the dataset, with replacement.
pub fn extract_patches(d: &Dataset, patch: usize, count: usize, seed: u64) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.name().to_string()));
    }
    if patch == 0 || count == 0 {
        return Err(Error::invalid("patch size and count must be positive"));
    }
    if let Some(s) = d
        .samples()
        .iter()
        .find(|s| s.image().height() < patch || s.image().width() < patch)
    {
        return Err(Error::invalid(format!(
            "patch {patch} is larger than image `{}` ({}x{})",
            s.id(),
            s.image().height(),
            s.image().width()
        )));
    }
    let corners: Vec<u64> = d
        .samples()
        .iter()
        .map(|s| ((s.image().height() - patch + 1) * (s.image().width() - patch + 1)) as u64)
        .collect();
    let total: u64 = corners.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut u = rng.gen_range(0..total);
        let mut idx = 0;
        while u >= corners[idx] {
            u -= corners[idx];
            idx += 1;
        }
        let s = &d.samples()[idx];
        let span = (s.image().width() - patch + 1) as u64;
        let (top, left) = ((u / span) as usize, (u % span) as usize);
        out.push(crop_sample(s, top, left, patch, patch, &format!("{}_p{k:04}", s.id()))?);
    }
    Dataset::new(format!("{}/patches", d.name()), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { rows: 2, cols: 2 }
    }
}

/// Tiles `samples` row-major into one image; dots are translated per tile.
pub fn stitch(samples: &[&Sample], grid: Grid, id: &str) -> Result<Sample> {
    if samples.len() != grid.rows * grid.cols || samples.is_empty() {
        return Err(Error::invalid(format!(
            "a {}x{} grid needs {} tiles, got {}",
            grid.rows,
            grid.cols,
            grid.rows * grid.cols,
            samples.len()
        )));
    }
    let (h, w) = (samples[0].image().height(), samples[0].image().width());
    if let Some(s) = samples.iter().find(|s| s.image().height() != h || s.image().width() != w) {
        return Err(Error::Shape(format!(
            "image `{}` is {}x{}, composites need uniform {h}x{w} tiles",
            s.id(),
            s.image().height(),
            s.image().width()
        )));
    }
    let (hh, ww) = (h * grid.rows, w * grid.cols);
    let mut pixels = vec![0.0f32; CHANNELS * hh * ww];
    let labelled = samples.iter().all(|s| s.dots().is_some());
    let mut points = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let (gr, gc) = (k / grid.cols, k % grid.cols);
        let src = s.image().pixels();
        for c in 0..CHANNELS {
            for r in 0..h {
                let dst = (c * hh + gr * h + r) * ww + gc * w;
                let from = (c * h + r) * w;
                pixels[dst..dst + w].copy_from_slice(&src[from..from + w]);
            }
        }
        if let Some(d) = s.dots() {
            points.extend(
                d.points
                    .iter()
                    .map(|p| Dot::new(p.row + (gr * h) as f64, p.col + (gc * w) as f64)),
            );
        }
    }
    let image = Image::new(id, hh, ww, pixels)?;
    let dots = labelled.then(|| DotAnnotationSet::new(id, points));
    Sample::new(image, dots, samples[0].domain())
}

/// Builds `count` grid composites. Each one draws its tiles uniformly at
/// random, without replacement when the dataset has enough samples.
pub fn make_composites(d: &Dataset, grid: Grid, count: usize, seed: u64) -> Result<Dataset> {
    let composites = composite_members(d, grid, count, seed)?
        .into_iter()
        .enumerate()
        .map(|(k, members)| {
            let tiles: Vec<&Sample> = members.iter().map(|&i| &d.samples()[i]).collect();
            stitch(&tiles, grid, &format!("composite_{k:04}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("{}/composites", d.name()), composites)
}

/// The sample indices [`make_composites`] uses for each composite, in tile order.
pub fn composite_members(d: &Dataset, grid: Grid, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.name().to_string()));
    }
    if count == 0 || grid.rows == 0 || grid.cols == 0 {
        return Err(Error::invalid("composite count and grid extents must be positive"));
    }
    let tiles = grid.rows * grid.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            if d.len() >= tiles {
                sample_indices(&mut rng, d.len(), tiles).into_vec()
            } else {
                (0..tiles).map(|_| rng.gen_range(0..d.len())).collect()
            }
        })
        .collect())
}
