//! Domain data shared by every stage: images, dot annotations, density maps,
//! domain tags, samples and datasets.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, so they can be shared freely between readers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image with intensities in `[0, 1]`, stored channel-planar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// `pixels` is channel-planar: all red values row by row, then green, then blue.
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image `{id}` has an empty frame")));
        }
        if pixels.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image `{id}`: expected {} values for {height}x{width}x{CHANNELS}, got {}",
                CHANNELS * height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "image `{id}` has intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from interleaved 8-bit RGB, dividing by 255.
    pub fn from_rgb8(id: impl Into<String>, height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} bytes of RGB data, got {}",
                CHANNELS * height * width,
                rgb.len()
            )));
        }
        let plane = height * width;
        let mut pixels = vec![0.0f32; CHANNELS * plane];
        for (i, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                pixels[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(id, height, width, pixels)
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push((self.pixels[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub row: f64,
    pub col: f64,
}

impl Dot {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn in_frame(&self, height: usize, width: usize) -> bool {
        self.row >= 0.0 && self.col >= 0.0 && self.row < height as f64 && self.col < width as f64
    }
}

/// Point annotations marking one object centre each, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DotAnnotationSet {
    pub image_id: String,
    pub points: Vec<Dot>,
}

impl DotAnnotationSet {
    pub fn new(image_id: impl Into<String>, points: Vec<Dot>) -> Self {
        Self {
            image_id: image_id.into(),
            points,
        }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn check_frame(&self, height: usize, width: usize) -> Result<()> {
        match self.points.iter().find(|d| !d.in_frame(height, width)) {
            Some(d) => Err(Error::OutOfFrame {
                image_id: self.image_id.clone(),
                row: d.row,
                col: d.col,
                height,
                width,
            }),
            None => Ok(()),
        }
    }
}

/// A nonnegative grid whose sum is the object count.
///
/// `sigma` is set for rendered ground truth and absent for model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub sigma: Option<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, sigma: Option<f64>) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            sigma,
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "density map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            sigma: None,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    /// Classification label: source is 1, target is 0.
    pub fn label(self) -> f64 {
        match self {
            DomainTag::Source => 1.0,
            DomainTag::Target => 0.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainTag::Source => DomainTag::Target,
            DomainTag::Target => DomainTag::Source,
        }
    }
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// One image, its optional dots, and the domain it was drawn from.
///
/// Source samples always carry dots. Target samples may carry them for
/// held-out evaluation; training strips them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    image: Image,
    dots: Option<DotAnnotationSet>,
    domain: DomainTag,
}

impl Sample {
    pub fn new(image: Image, dots: Option<DotAnnotationSet>, domain: DomainTag) -> Result<Self> {
        if domain == DomainTag::Source && dots.is_none() {
            return Err(Error::invalid(format!(
                "source sample `{}` has no dot annotations",
                image.id()
            )));
        }
        if let Some(d) = &dots {
            d.check_frame(image.height(), image.width())?;
        }
        Ok(Self {
            image,
            dots,
            domain,
        })
    }

    pub fn labeled(image: Image, dots: Vec<Dot>, domain: DomainTag) -> Result<Self> {
        let set = DotAnnotationSet::new(image.id(), dots);
        Self::new(image, Some(set), domain)
    }

    pub fn unlabeled_target(image: Image) -> Self {
        Self {
            image,
            dots: None,
            domain: DomainTag::Target,
        }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn dots(&self) -> Option<&DotAnnotationSet> {
        self.dots.as_ref()
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn id(&self) -> &str {
        self.image.id()
    }

    /// Ground-truth count, when labeled.
    pub fn count(&self) -> Option<usize> {
        self.dots.as_ref().map(DotAnnotationSet::count)
    }

    /// Drops the annotations; only meaningful for target samples.
    pub fn without_dots(&self) -> Result<Self> {
        Self::new(self.image.clone(), None, self.domain)
    }

    pub fn into_parts(self) -> (Image, Option<DotAnnotationSet>, DomainTag) {
        (self.image, self.dots, self.domain)
    }
}

/// A named, ordered collection of samples from a single domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.domain() != first.domain()) {
                return Err(Error::invalid(format!(
                    "dataset `{name}` mixes source and target samples"
                )));
            }
        }
        Ok(Self { name, samples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain(&self) -> Option<DomainTag> {
        self.samples.first().map(Sample::domain)
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.dots().is_some())
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

/// Randomly partitions `d` into `round(fraction * |d|)` and the remainder.
///
/// Each part keeps the original relative order of its samples.
pub fn split_train_val(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.name().to_string()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let n = d.len();
    let first = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut head = order[..first].to_vec();
    let mut tail = order[first..].to_vec();
    head.sort_unstable();
    tail.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| d.samples[i].clone()).collect::<Vec<_>>();
    Ok((
        Dataset::new(format!("{}/train", d.name()), pick(&head))?,
        Dataset::new(format!("{}/val", d.name()), pick(&tail))?,
    ))
}
