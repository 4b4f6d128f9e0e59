//! Synthetic counting benchmark with a controllable appearance shift.
//!
//! Source scenes are bright elliptical blobs on a plain, slightly noisy
//! background. Target scenes come from the same object process seen through
//! an appearance shift whose strength `s` scales four effects together:
//! cluttered background texture, elongated blobs with lower contrast, blur,
//! and a global colour cast. Source and target scenes are rendered by the same
//! code path with the same random draws, so `s = 0` reproduces the source
//! distribution exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::transform::blur_image;
use crate::error::{Error, Result};
use crate::types::{Dataset, DomainTag, Dot, Image, Sample, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub min: usize,
    pub max: usize,
    pub blob_radius: f64,
    pub shift_strength: f64,
    pub noise_level: f64,
    pub source_count: usize,
    pub target_count: usize,
    pub test_count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min: 3,
            max: 12,
            blob_radius: 2.5,
            shift_strength: 0.7,
            noise_level: 0.02,
            source_count: 200,
            target_count: 200,
            test_count: 50,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min < 1 || self.min > self.max {
            return Err(Error::invalid(format!(
                "object count bounds must satisfy 1 <= min <= max, got {}..{}",
                self.min, self.max
            )));
        }
        if !(self.blob_radius >= 1.0) {
            return Err(Error::invalid(format!("blob radius must be at least 1, got {}", self.blob_radius)));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(Error::invalid(format!(
                "shift strength must lie in [0, 1], got {}",
                self.shift_strength
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::invalid("noise level must be nonnegative"));
        }
        if (self.image_size as f64) < 2.0 * self.blob_radius + 1.0 {
            return Err(Error::invalid("image is too small for the blob radius"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub source: Dataset,
    /// Unlabelled target images for adaptation.
    pub target: Dataset,
    /// Labelled target images, held out for evaluation only.
    pub target_test: Dataset,
}

const BACKGROUND: [f64; 3] = [0.20, 0.30, 0.16];
const OBJECT: [f64; 3] = [0.92, 0.84, 0.32];
const OBJECT_SHIFTED: [f64; 3] = [0.70, 0.72, 0.46];
const CLUTTER_TINT: [f64; 3] = [0.55, 0.42, 0.28];
const CAST_GAIN: [f64; 3] = [-0.20, -0.05, 0.25];
const CAST_OFFSET: [f64; 3] = [0.10, 0.06, -0.02];
const CLUTTER_PER_IMAGE: usize = 10;

struct Blob {
    row: f64,
    col: f64,
    angle: f64,
    scale: f64,
}

struct Clutter {
    row: f64,
    col: f64,
    radius: f64,
    amplitude: f64,
}

/// Every random quantity one scene needs, drawn before rendering.
struct SceneDraw {
    blobs: Vec<Blob>,
    clutter: Vec<Clutter>,
    grating: (f64, f64, f64),
    cast_jitter: [f64; 3],
    noise: Vec<f64>,
}

fn draw_scene(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> SceneDraw {
    let size = spec.image_size as f64;
    let r = spec.blob_radius;
    let count = rng.gen_range(spec.min..=spec.max);
    let min_sep = 1.5 * r;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    while blobs.len() < count {
        let mut cand = (0.0, 0.0);
        for _ in 0..50 {
            cand = (rng.gen_range(r..size - r), rng.gen_range(r..size - r));
            let clear = blobs
                .iter()
                .all(|b| (b.row - cand.0).hypot(b.col - cand.1) >= min_sep);
            if clear {
                break;
            }
        }
        blobs.push(Blob {
            row: cand.0,
            col: cand.1,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            scale: rng.gen_range(0.85..1.15),
        });
    }
    let clutter = (0..CLUTTER_PER_IMAGE)
        .map(|_| Clutter {
            row: rng.gen_range(0.0..size),
            col: rng.gen_range(0.0..size),
            radius: rng.gen_range(1.0..2.5) * r,
            amplitude: rng.gen_range(-0.35..0.35),
        })
        .collect();
    let grating = (
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::PI),
    );
    let cast_jitter = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let n = CHANNELS * spec.image_size * spec.image_size;
    let noise = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    SceneDraw {
        blobs,
        clutter,
        grating,
        cast_jitter,
        noise,
    }
}

fn render_scene(draw: &SceneDraw, spec: &SyntheticSpec, shift: f64, id: &str) -> Result<(Image, Vec<Dot>)> {
    let n = spec.image_size;
    let plane = n * n;
    let aspect = 1.0 + 0.8 * shift;
    let object: Vec<f64> = (0..3).map(|c| OBJECT[c] + shift * (OBJECT_SHIFTED[c] - OBJECT[c])).collect();
    let (freq, phase, angle) = draw.grating;
    let (gs, gc) = angle.sin_cos();

    let mut pixels = vec![0.0f32; CHANNELS * plane];
    for row in 0..n {
        for col in 0..n {
            let (y, x) = (row as f64, col as f64);
            let mut texture = 0.08 * (freq * (x * gc + y * gs) + phase).sin();
            for c in &draw.clutter {
                let d2 = ((y - c.row).powi(2) + (x - c.col).powi(2)) / (c.radius * c.radius);
                texture += c.amplitude * (-0.5 * d2).exp();
            }
            let mut transparent = 1.0;
            for b in &draw.blobs {
                let (s, co) = b.angle.sin_cos();
                let (dy, dx) = (y - b.row, x - b.col);
                let u = (dx * co + dy * s) / (spec.blob_radius * b.scale * aspect);
                let v = (-dx * s + dy * co) / (spec.blob_radius * b.scale / aspect);
                let d = (u * u + v * v).sqrt();
                let cover = 1.0 / (1.0 + (6.0 * (d - 1.0)).exp());
                transparent *= 1.0 - cover;
            }
            let alpha = 1.0 - transparent;
            for ch in 0..CHANNELS {
                let bg = BACKGROUND[ch] + shift * texture * CLUTTER_TINT[ch] / 0.42;
                let v = bg * (1.0 - alpha) + object[ch] * alpha;
                pixels[ch * plane + row * n + col] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let image = blur_image(&Image::new(id, n, n, pixels)?, (1.2 * shift) as f32)?;

    let mut out = image.pixels().to_vec();
    for ch in 0..CHANNELS {
        let gain = 1.0 + shift * (CAST_GAIN[ch] + draw.cast_jitter[ch]);
        let offset = shift * CAST_OFFSET[ch];
        for i in 0..plane {
            let k = ch * plane + i;
            let v = f64::from(out[k]) * gain + offset + spec.noise_level * draw.noise[k];
            // quantise to 8-bit levels so the in-memory image equals its PNG
            out[k] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
        }
    }
    let dots = draw.blobs.iter().map(|b| Dot::new(b.row, b.col)).collect();
    Ok((Image::new(id, n, n, out)?, dots))
}

fn generate_split(
    spec: &SyntheticSpec,
    seed: u64,
    stream: u64,
    count: usize,
    shift: f64,
    prefix: &str,
    domain: DomainTag,
    labelled: bool,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let samples = (0..count)
        .map(|i| {
            let draw = draw_scene(&mut rng, spec);
            let (image, dots) = render_scene(&draw, spec, shift, &format!("{prefix}_{i:04}"))?;
            if labelled {
                Sample::labeled(image, dots, domain)
            } else {
                Ok(Sample::unlabeled_target(image))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(prefix, samples)
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let s = spec.shift_strength;
    Ok(SyntheticBenchmark {
        source: generate_split(spec, seed, 0, spec.source_count, 0.0, "source", DomainTag::Source, true)?,
        target: generate_split(spec, seed, 1, spec.target_count, s, "target", DomainTag::Target, false)?,
        target_test: generate_split(spec, seed, 2, spec.test_count, s, "target_test", DomainTag::Target, true)?,
    })
}

/// One scene rendered under both the source and the shifted appearance.
pub fn paired_scene(spec: &SyntheticSpec, seed: u64) -> Result<(Sample, Sample)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = draw_scene(&mut rng, spec);
    let (a, dots) = render_scene(&draw, spec, 0.0, "pair_source")?;
    let (b, _) = render_scene(&draw, spec, spec.shift_strength, "pair_target")?;
    Ok((
        Sample::labeled(a, dots.clone(), DomainTag::Source)?,
        Sample::labeled(b, dots, DomainTag::Target)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::render_density;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 32,
            source_count: 6,
            target_count: 5,
            test_count: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sizes_and_count_bounds() {
        let b = generate_synthetic(&small(), 1).unwrap();
        assert_eq!((b.source.len(), b.target.len(), b.target_test.len()), (6, 5, 4));
        assert!(b.target.samples().iter().all(|s| s.dots().is_none()));
        for s in b.source.samples().iter().chain(b.target_test.samples()) {
            let k = s.count().unwrap();
            assert!((3..=12).contains(&k));
        }
        assert_eq!(b.target_test.domain(), Some(DomainTag::Target));
    }

    #[test]
    fn zero_shift_reproduces_source_rendering() {
        let spec = SyntheticSpec {
            shift_strength: 0.0,
            ..small()
        };
        let (a, b) = paired_scene(&spec, 5).unwrap();
        assert_eq!(a.image().pixels(), b.image().pixels());
        let spec = SyntheticSpec {
            shift_strength: 0.7,
            ..small()
        };
        let (a, b) = paired_scene(&spec, 5).unwrap();
        assert_ne!(a.image().pixels(), b.image().pixels());
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_synthetic(&small(), 3).unwrap(), generate_synthetic(&small(), 3).unwrap());
    }

    #[test]
    fn rejects_inverted_bounds() {
        let spec = SyntheticSpec { min: 5, max: 4, ..small() };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn rendered_centres_integrate_to_count() {
        let b = generate_synthetic(&small(), 8).unwrap();
        for s in b.source.samples() {
            let dots = s.dots().unwrap();
            let m = render_density(dots, 32, 32, 1.0).unwrap();
            // blob centres stay at least one radius inside the frame
            assert!((m.sum() - dots.count() as f64).abs() < 0.02 * dots.count() as f64 + 0.05);
        }
    }
}
