//! The counting network: a shared downsampling encoder, an upsampling density
//! decoder with skip concatenations, and a domain classifier attached to the
//! encoder bottleneck through a gradient-reversal junction.
//!
//! ```text
//!  image ──► encoder ──► bottleneck ──► decoder (+ skips) ──► sigmoid ──► density map
//!                             │
//!                             └──► GRL(-λ) ──► domain head ──► sigmoid ──► P(source)
//! ```
//!
//! The encoder runs once per batch and serves both branches. In training the
//! decoder only sees the leading `n_source` samples of the batch (the labelled
//! ones); the domain head sees all of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    max_pool2, max_pool2_backward, relu_backward, relu_in_place, sigmoid, BatchNormCache,
};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2x2, Param, Tensor};
use crate::scalar::Scalar;
use crate::types::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    #[default]
    Sigmoid,
    Linear,
}

/// How the domain head's gradient re-enters the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Junction {
    /// Multiply by `-lambda` (gradient reversal).
    #[default]
    Reversal,
    /// Pass the gradient through unchanged; used to check the reversal.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Number of pooling stages in the encoder (and upsampling stages in the decoder).
    pub depth: usize,
    /// Channels of the first encoder level; each level doubles it.
    pub base_width: usize,
    pub domain_head: bool,
    pub domain_head_width: usize,
    /// Conv/pool stages in the domain head; derived from `image_size` when absent.
    pub domain_head_stages: Option<usize>,
    pub density_activation: DensityActivation,
    /// Training resolution, used to size the domain head.
    pub image_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 64,
            domain_head: true,
            domain_head_width: 512,
            domain_head_stages: None,
            density_activation: DensityActivation::Sigmoid,
            image_size: 256,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::config("depth", format!("must be in 1..=8, got {}", self.depth)));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be positive"));
        }
        if self.domain_head && self.domain_head_width == 0 {
            return Err(Error::config("domain_head_width", "must be positive"));
        }
        let unit = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % unit != 0 {
            return Err(Error::config(
                "image_size",
                format!("{} is not a positive multiple of 2^depth = {unit}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Channel counts of the encoder levels followed by the bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| self.base_width << i).collect()
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Head plan: for each stage, whether it ends with a pooling step.
    pub fn head_plan(&self) -> Vec<bool> {
        let mut size = self.bottleneck_size();
        let mut plan = Vec::new();
        match self.domain_head_stages {
            Some(n) => {
                for _ in 0..n {
                    size = size.saturating_sub(2);
                    let pool = size > 2;
                    if pool {
                        size /= 2;
                    }
                    plan.push(pool);
                }
            }
            None => {
                while size > 2 {
                    size -= 2;
                    let pool = size > 2;
                    if pool {
                        size /= 2;
                    }
                    plan.push(pool);
                }
            }
        }
        plan
    }
}

/// Skip grids retained per encoder level, plus the bottleneck.
#[derive(Debug, Clone)]
pub struct FeatureStack<T> {
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Encoder,
    Decoder,
    DomainHead,
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    EncoderDecoder,
    DomainHead,
}

impl ParamRole {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamRole::Encoder | ParamRole::Decoder => ParamGroup::EncoderDecoder,
            ParamRole::DomainHead => ParamGroup::DomainHead,
        }
    }
}

/// Convolution, batch normalization, rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

struct ConvBnReluCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(cin: usize, cout: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, pad, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.bn.forward_eval(&self.conv.forward(x)?);
        relu_in_place(&mut y);
        Ok(y)
    }

    fn forward_train(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, ConvBnReluCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (mut y, bn) = self.bn.forward_train(&z);
        relu_in_place(&mut y);
        Ok((
            y.clone(),
            ConvBnReluCache {
                input: x,
                bn,
                output: y,
            },
        ))
    }

    fn backward(&mut self, cache: &ConvBnReluCache<T>, mut dy: Tensor<T>) -> Tensor<T> {
        relu_backward(&cache.output, &mut dy);
        let dz = self.bn.backward(&cache.bn, &dy);
        self.conv.backward(&cache.input, &dz)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.conv.weight);
        f(&self.conv.bias);
        f(&self.bn.gamma);
        f(&self.bn.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.conv.weight);
        f(&mut self.conv.bias);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }
}

/// Two padded 3x3 [`ConvBnRelu`] layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleConv<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

struct DoubleConvCache<T> {
    first: ConvBnReluCache<T>,
    second: ConvBnReluCache<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvBnRelu::new(cin, cout, 1, rng),
            second: ConvBnRelu::new(cout, cout, 1, rng),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.second.forward_eval(&self.first.forward_eval(x)?)
    }

    fn forward_train(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, DoubleConvCache<T>)> {
        let (a, first) = self.first.forward_train(x)?;
        let (b, second) = self.second.forward_train(a)?;
        Ok((b, DoubleConvCache { first, second }))
    }

    fn backward(&mut self, cache: &DoubleConvCache<T>, dy: Tensor<T>) -> Tensor<T> {
        let da = self.second.backward(&cache.second, dy);
        self.first.backward(&cache.first, da)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

/// Transposed convolution, concatenation with the encoder grid, two convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpBlock<T> {
    pub up: ConvTranspose2x2<T>,
    pub conv: DoubleConv<T>,
}

/// Unpadded 3x3 convolution stage, optionally followed by 2x2 pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStage<T> {
    pub layer: ConvBnRelu<T>,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainHead<T> {
    pub stages: Vec<HeadStage<T>>,
    /// 1x1 convolution to a single channel, averaged over space.
    pub out: Conv2d<T>,
}

struct HeadCache<T> {
    stages: Vec<(ConvBnReluCache<T>, Option<([usize; 4], Vec<u32>)>)>,
    out_input: Tensor<T>,
    out_plane: usize,
    probs: Vec<T>,
}

impl<T: Scalar> DomainHead<T> {
    fn forward_eval(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        let mut h = features.clone();
        for stage in &self.stages {
            h = stage.layer.forward_eval(&h)?;
            if stage.pool && h.height() >= 2 && h.width() >= 2 {
                h = max_pool2(&h).0;
            }
        }
        let logits = self.out.forward(&h)?;
        Ok(spatial_mean(&logits).into_iter().map(sigmoid).collect())
    }

    fn forward_train(&mut self, features: Tensor<T>) -> Result<HeadCache<T>> {
        let mut h = features;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let (y, cache) = stage.layer.forward_train(h)?;
            h = y;
            let pool = if stage.pool && h.height() >= 2 && h.width() >= 2 {
                let shape = h.shape();
                let (p, arg) = max_pool2(&h);
                h = p;
                Some((shape, arg))
            } else {
                None
            };
            stages.push((cache, pool));
        }
        let logits = self.out.forward(&h)?;
        let probs = spatial_mean(&logits).into_iter().map(sigmoid).collect();
        Ok(HeadCache {
            stages,
            out_plane: logits.plane(),
            out_input: h,
            probs,
        })
    }

    /// `dlogit` is the gradient with respect to each sample's pre-sigmoid logit.
    fn backward(&mut self, cache: &HeadCache<T>, dlogit: &[T]) -> Tensor<T> {
        let x = &cache.out_input;
        let plane = cache.out_plane;
        let inv = T::of(1.0 / plane as f64);
        let mut dy = Tensor::zeros(x.batch(), 1, x.height(), x.width());
        for (i, &g) in dlogit.iter().enumerate() {
            dy.sample_mut(i).iter_mut().for_each(|v| *v = g * inv);
        }
        let mut dh = self.out.backward(x, &dy);
        for (stage, (conv_cache, pool)) in self.stages.iter_mut().zip(&cache.stages).rev() {
            if let Some((shape, arg)) = pool {
                dh = max_pool2_backward(*shape, arg, &dh);
            }
            dh = stage.layer.backward(conv_cache, dh);
        }
        dh
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for s in &self.stages {
            s.layer.visit(f);
        }
        f(&self.out.weight);
        f(&self.out.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stages {
            s.layer.visit_mut(f);
        }
        f(&mut self.out.weight);
        f(&mut self.out.bias);
    }
}

fn spatial_mean<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let inv = T::of(1.0 / x.sample_len() as f64);
    (0..x.batch())
        .map(|i| x.sample(i).iter().copied().sum::<T>() * inv)
        .collect()
}

/// Identity on the forward pass; scales the backward gradient by `-lambda`.
pub fn gradient_reversal<T: Scalar>(features: &Tensor<T>) -> Tensor<T> {
    features.clone()
}

pub fn gradient_reversal_backward<T: Scalar>(grad: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let k = T::of(-lambda);
    grad.map(|g| g * k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingModel<T> {
    arch: ArchConfig,
    encoder: Vec<DoubleConv<T>>,
    bottleneck: DoubleConv<T>,
    /// Deepest level first.
    decoder: Vec<UpBlock<T>>,
    density_out: Conv2d<T>,
    domain_head: Option<DomainHead<T>>,
    pub grl_lambda: f64,
    pub junction: Junction,
}

/// Everything one training forward pass leaves behind for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    n_source: usize,
    input_shape: [usize; 4],
    encoder: Vec<(DoubleConvCache<T>, [usize; 4], Vec<u32>)>,
    bottleneck: DoubleConvCache<T>,
    decoder: Vec<(Tensor<T>, DoubleConvCache<T>)>,
    density_in: Tensor<T>,
    density: Tensor<T>,
    head: Option<HeadCache<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Activated density maps of the labelled (leading) samples.
    pub fn density(&self) -> &Tensor<T> {
        &self.density
    }

    /// Domain probabilities for every sample, when the head ran.
    pub fn domain(&self) -> Option<&[T]> {
        self.head.as_ref().map(|h| h.probs.as_slice())
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }
}

impl<T: Scalar> CountingModel<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = arch.widths();
        let depth = arch.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = CHANNELS;
        for &w in &widths[..depth] {
            encoder.push(DoubleConv::new(cin, w, &mut rng));
            cin = w;
        }
        let bottleneck = DoubleConv::new(cin, widths[depth], &mut rng);
        let decoder = (0..depth)
            .rev()
            .map(|lvl| UpBlock {
                up: ConvTranspose2x2::new(widths[lvl + 1], widths[lvl], &mut rng),
                conv: DoubleConv::new(2 * widths[lvl], widths[lvl], &mut rng),
            })
            .collect();
        let density_out = Conv2d::new(widths[0], 1, 1, 0, &mut rng);
        let domain_head = arch.domain_head.then(|| {
            let mut c = widths[depth];
            let stages = arch
                .head_plan()
                .into_iter()
                .map(|pool| {
                    let layer = ConvBnRelu::new(c, arch.domain_head_width, 0, &mut rng);
                    c = arch.domain_head_width;
                    HeadStage { layer, pool }
                })
                .collect();
            DomainHead {
                stages,
                out: Conv2d::new(c, 1, 1, 0, &mut rng),
            }
        });
        Ok(Self {
            arch: arch.clone(),
            encoder,
            bottleneck,
            decoder,
            density_out,
            domain_head,
            grl_lambda: 0.0,
            junction: Junction::Reversal,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn has_domain_head(&self) -> bool {
        self.domain_head.is_some()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.arch.depth;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {unit}, the total encoder downsampling",
                self.arch.depth
            )));
        }
        Ok(())
    }

    fn check_tensor(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != CHANNELS {
            return Err(Error::Shape(format!(
                "expected {CHANNELS}-channel input, got {}",
                x.channels()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        self.check_input(x.height(), x.width())
    }

    fn activate(&self, mut z: Tensor<T>) -> Tensor<T> {
        if self.arch.density_activation == DensityActivation::Sigmoid {
            z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        z
    }

    /// Encoder pass in evaluation mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<FeatureStack<T>> {
        self.check_tensor(x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            let a = block.forward_eval(&h)?;
            h = max_pool2(&a).0;
            skips.push(a);
        }
        let bottleneck = self.bottleneck.forward_eval(&h)?;
        Ok(FeatureStack { skips, bottleneck })
    }

    /// Decoder pass in evaluation mode.
    pub fn decode(&self, features: &FeatureStack<T>) -> Result<Tensor<T>> {
        let mut d = features.bottleneck.clone();
        for (block, skip) in self.decoder.iter().zip(features.skips.iter().rev()) {
            let up = block.up.forward(&d)?;
            d = block.conv.forward_eval(&Tensor::concat_channels(skip, &up)?)?;
        }
        Ok(self.activate(self.density_out.forward(&d)?))
    }

    /// Density maps, `[n, 1, h, w]`, in evaluation mode.
    pub fn forward_density(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    /// Probability that each image comes from the source domain, in evaluation mode.
    pub fn forward_domain(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let head = self
            .domain_head
            .as_ref()
            .ok_or_else(|| Error::invalid("model was built without a domain head"))?;
        let features = self.encode(x)?;
        head.forward_eval(&gradient_reversal(&features.bottleneck))
    }

    /// Density maps and, when the head exists, domain probabilities from one encoder pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let features = self.encode(x)?;
        let domain = match &self.domain_head {
            Some(head) => Some(head.forward_eval(&gradient_reversal(&features.bottleneck))?),
            None => None,
        };
        Ok((self.decode(&features)?, domain))
    }

    /// Training-mode forward pass (batch statistics, running averages updated).
    ///
    /// The first `n_source` samples go through the decoder; with `with_domain`
    /// every sample also goes through the domain head.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        n_source: usize,
        with_domain: bool,
    ) -> Result<ForwardCache<T>> {
        self.check_tensor(x)?;
        if n_source > x.batch() {
            return Err(Error::Shape(format!(
                "{n_source} source samples requested from a batch of {}",
                x.batch()
            )));
        }
        if with_domain && self.domain_head.is_none() {
            return Err(Error::invalid("model was built without a domain head"));
        }

        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &mut self.encoder {
            let (a, cache) = block.forward_train(h)?;
            let (p, arg) = max_pool2(&a);
            enc_caches.push((cache, a.shape(), arg));
            skips.push(a);
            h = p;
        }
        let (bottleneck, bottleneck_cache) = self.bottleneck.forward_train(h)?;

        let head = match (&mut self.domain_head, with_domain) {
            (Some(head), true) => Some(head.forward_train(gradient_reversal(&bottleneck))?),
            _ => None,
        };

        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let (density_in, density) = if n_source > 0 {
            let mut d = bottleneck.narrow(0..n_source);
            for (block, skip) in self.decoder.iter_mut().zip(skips.iter().rev()) {
                let up = block.up.forward(&d)?;
                let cat = Tensor::concat_channels(&skip.narrow(0..n_source), &up)?;
                let (out, cache) = block.conv.forward_train(cat)?;
                dec_caches.push((d, cache));
                d = out;
            }
            let z = self.density_out.forward(&d)?;
            (d, self.activate(z))
        } else {
            (Tensor::zeros(0, 0, 0, 0), Tensor::zeros(0, 1, x.height(), x.width()))
        };

        Ok(ForwardCache {
            batch: x.batch(),
            n_source,
            input_shape: x.shape(),
            encoder: enc_caches,
            bottleneck: bottleneck_cache,
            decoder: dec_caches,
            density_in,
            density,
            head,
        })
    }

    /// Accumulates parameter gradients and returns the gradient at the input.
    ///
    /// `d_density` is the loss gradient with respect to the activated density
    /// maps of the source samples; `d_domain_logit` is the gradient with
    /// respect to each sample's domain logit. Either may be absent.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        d_density: Option<&Tensor<T>>,
        d_domain_logit: Option<&[T]>,
    ) -> Result<Tensor<T>> {
        let depth = self.encoder.len();
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; depth];
        let bshape = cache.encoder.last().map_or(cache.input_shape, |e| {
            let [n, _, h, w] = e.1;
            [n, 0, h / 2, w / 2]
        });
        let mut d_bottleneck = Tensor::zeros(
            cache.batch,
            self.arch.widths()[depth],
            bshape[2],
            bshape[3],
        );

        if let Some(dd) = d_density {
            if dd.shape() != cache.density.shape() {
                return Err(Error::Shape(format!(
                    "density gradient {:?} does not match output {:?}",
                    dd.shape(),
                    cache.density.shape()
                )));
            }
            let mut dz = dd.clone();
            if self.arch.density_activation == DensityActivation::Sigmoid {
                for (g, &s) in dz.data_mut().iter_mut().zip(cache.density.data()) {
                    *g = *g * s * (T::one() - s);
                }
            }
            let mut d = self.density_out.backward(&cache.density_in, &dz);
            for (k, (block, (up_in, conv_cache))) in
                self.decoder.iter_mut().zip(&cache.decoder).enumerate().rev()
            {
                let dcat = block.conv.backward(conv_cache, d);
                let skip_c = dcat.channels() / 2;
                let (dskip, dup) = dcat.split_channels(skip_c);
                let level = depth - 1 - k;
                let [n, c, h, w] = cache.encoder[level].1;
                let mut full = Tensor::zeros(n, c, h, w);
                full.add_leading(&dskip);
                d_skips[level] = Some(full);
                d = block.up.backward(up_in, &dup);
            }
            d_bottleneck.add_leading(&d);
        }

        if let Some(dlogit) = d_domain_logit {
            let (head, head_cache) = match (&mut self.domain_head, &cache.head) {
                (Some(h), Some(c)) => (h, c),
                _ => return Err(Error::invalid("domain gradient given but the head did not run")),
            };
            if dlogit.len() != cache.batch {
                return Err(Error::Shape("one domain gradient per sample expected".into()));
            }
            let dfeat = head.backward(head_cache, dlogit);
            let reversed = match self.junction {
                Junction::Reversal => gradient_reversal_backward(&dfeat, self.grl_lambda),
                Junction::Identity => dfeat,
            };
            d_bottleneck.add_assign(&reversed);
        }

        let mut dh = self.bottleneck.backward(&cache.bottleneck, d_bottleneck);
        for (level, (block, (conv_cache, shape, arg))) in
            self.encoder.iter_mut().zip(&cache.encoder).enumerate().rev()
        {
            let mut da = max_pool2_backward(*shape, arg, &dh);
            if let Some(ds) = &d_skips[level] {
                da.add_assign(ds);
            }
            dh = block.backward(conv_cache, da);
        }
        Ok(dh)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(ParamRole, &'a Param<T>)) {
        for block in &self.encoder {
            block.visit(&mut |p| f(ParamRole::Encoder, p));
        }
        self.bottleneck.visit(&mut |p| f(ParamRole::Encoder, p));
        for block in &self.decoder {
            f(ParamRole::Decoder, &block.up.weight);
            f(ParamRole::Decoder, &block.up.bias);
            block.conv.visit(&mut |p| f(ParamRole::Decoder, p));
        }
        f(ParamRole::Decoder, &self.density_out.weight);
        f(ParamRole::Decoder, &self.density_out.bias);
        if let Some(head) = &self.domain_head {
            head.visit(&mut |p| f(ParamRole::DomainHead, p));
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamRole, &mut Param<T>)) {
        for block in &mut self.encoder {
            block.visit_mut(&mut |p| f(ParamRole::Encoder, p));
        }
        self.bottleneck.visit_mut(&mut |p| f(ParamRole::Encoder, p));
        for block in &mut self.decoder {
            f(ParamRole::Decoder, &mut block.up.weight);
            f(ParamRole::Decoder, &mut block.up.bias);
            block.conv.visit_mut(&mut |p| f(ParamRole::Decoder, p));
        }
        f(ParamRole::Decoder, &mut self.density_out.weight);
        f(ParamRole::Decoder, &mut self.density_out.bias);
        if let Some(head) = &mut self.domain_head {
            head.visit_mut(&mut |p| f(ParamRole::DomainHead, p));
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Flattened parameter values of one role, in visiting order.
    pub fn flat_params(&self, role: ParamRole) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |r, p| {
            if r == role {
                out.extend_from_slice(&p.value)
            }
        });
        out
    }

    /// Flattened accumulated gradients of one role, in visiting order.
    pub fn flat_grads(&self, role: ParamRole) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |r, p| {
            if r == role {
                out.extend_from_slice(&p.grad)
            }
        });
        out
    }
}

/// Stacks equally sized images into a `[n, 3, h, w]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape(format!(
                "image `{}` is {}x{}, batch expects {h}x{w}",
                img.id(),
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::from_vec(images.len(), CHANNELS, h, w, data)
}
