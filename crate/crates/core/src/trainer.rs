//! Joint training loop: mixed source/target batches, density loss on the
//! source part, domain loss on the whole batch, reversal coefficient ramped per
//! iteration, source-only validation and per-epoch checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::datasets::transform::{resize_image, resize_sample};
use crate::density::{render_density_with, RenderOptions};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricReport};
use crate::network::{images_to_tensor, ArchConfig, CountingModel, DensityActivation};
use crate::nn::Tensor;
use crate::objective::{
    density_loss, density_loss_grad, domain_logit_grad, domain_loss, lambda_at, total_loss, LambdaSchedule,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::types::{split_train_val, Dataset, DensityMap, DomainTag, Image, Sample, CHANNELS};

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub lr_encoder_decoder: f64,
    pub lr_domain_head: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub seed: u64,
    pub density_activation: DensityActivation,
    /// `false` trains the supervised baseline: no domain head, no target data.
    pub adaptation_enabled: bool,
    pub source_per_batch: usize,
    pub depth: usize,
    pub base_width: usize,
    pub domain_head_width: usize,
    pub domain_head_stages: Option<usize>,
    pub renormalize_border_kernels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            image_size: 256,
            lr_encoder_decoder: 1e-3,
            lr_domain_head: 1e-4,
            epochs: 150,
            val_fraction: 0.2,
            sigma: 3.0,
            gamma: 10.0,
            seed: 0,
            density_activation: DensityActivation::Sigmoid,
            adaptation_enabled: true,
            source_per_batch: 4,
            depth: 4,
            base_width: 64,
            domain_head_width: 512,
            domain_head_stages: None,
            renormalize_border_kernels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.source_per_batch == 0 || self.source_per_batch > self.batch_size {
            return Err(Error::config(
                "source_per_batch",
                format!("must lie in 1..={} (batch_size), got {}", self.batch_size, self.source_per_batch),
            ));
        }
        if self.adaptation_enabled && self.source_per_batch == self.batch_size {
            return Err(Error::config(
                "source_per_batch",
                "must leave room for target samples when adaptation is enabled",
            ));
        }
        for (key, v) in [("lr_encoder_decoder", self.lr_encoder_decoder), ("lr_domain_head", self.lr_domain_head)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a positive rate, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", format!("must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be positive, got {}", self.gamma)));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            depth: self.depth,
            base_width: self.base_width,
            domain_head: self.adaptation_enabled,
            domain_head_width: self.domain_head_width,
            domain_head_stages: self.domain_head_stages,
            density_activation: self.density_activation,
            image_size: self.image_size,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            renormalize_border_kernels: self.renormalize_border_kernels,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config file", e.message().to_string()))
    }
}

/// A freshly initialised model for `cfg`, seeded by `cfg.seed`.
pub fn build_model<T: Scalar>(cfg: &TrainConfig) -> Result<CountingModel<T>> {
    CountingModel::new(&cfg.arch(), cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub density_loss: f64,
    /// Zero for the baseline, which has no domain term.
    pub domain_loss: f64,
    pub total: f64,
    pub val_loss: f64,
    pub mean_lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Weights after the final epoch.
    pub model: CountingModel<T>,
    /// Weights at the lowest validation loss.
    pub best_model: CountingModel<T>,
    pub optimizer: Adam<T>,
    pub iteration: u64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub lambda_trace: Vec<f64>,
}

/// What one optimisation step saw, reported to an optional observer.
#[derive(Debug, Clone)]
pub struct BatchInfo<'a> {
    pub iteration: u64,
    pub lambda: f64,
    pub domains: &'a [DomainTag],
    pub ids: &'a [&'a str],
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write the config snapshot, history and checkpoints.
    pub run_dir: Option<PathBuf>,
    pub on_batch: Option<&'a mut dyn FnMut(&BatchInfo)>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Images and rendered targets converted once, up front.
struct Prepared<T> {
    ids: Vec<String>,
    pixels: Vec<Vec<T>>,
    targets: Vec<Vec<T>>,
}

fn prepare<T: Scalar>(d: &Dataset, cfg: &TrainConfig, with_targets: bool) -> Result<Prepared<T>> {
    let size = cfg.image_size;
    let mut out = Prepared {
        ids: Vec::with_capacity(d.len()),
        pixels: Vec::with_capacity(d.len()),
        targets: Vec::new(),
    };
    for s in d.samples() {
        let resized;
        let s: &Sample = if s.image().height() != size || s.image().width() != size {
            resized = resize_sample(s, size, size)?;
            &resized
        } else {
            s
        };
        out.ids.push(s.id().to_string());
        out.pixels.push(s.image().pixels().iter().map(|&v| T::of(f64::from(v))).collect());
        if with_targets {
            let dots = s
                .dots()
                .ok_or_else(|| Error::invalid(format!("source sample `{}` has no dot annotations", s.id())))?;
            let m = render_density_with(dots, size, size, cfg.sigma, cfg.render_options())?;
            out.targets.push(m.values.iter().map(|&v| T::of(v)).collect());
        }
    }
    Ok(out)
}

fn gather<T: Scalar>(rows: &[&[T]], c: usize, size: usize) -> Result<Tensor<T>> {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::from_vec(rows.len(), c, size, size, data)
}

/// Density loss over the whole split, evaluated in inference mode.
fn validation_loss<T: Scalar>(model: &CountingModel<T>, val: &Prepared<T>, size: usize, chunk: usize) -> Result<f64> {
    let mut pred = Vec::with_capacity(val.targets.len() * size * size);
    for idx in (0..val.pixels.len()).collect::<Vec<_>>().chunks(chunk) {
        let rows: Vec<&[T]> = idx.iter().map(|&i| val.pixels[i].as_slice()).collect();
        pred.extend(model.forward_density(&gather(&rows, CHANNELS, size)?)?.into_data());
    }
    let target: Vec<T> = val.targets.iter().flatten().copied().collect();
    Ok(density_loss(&pred, &target)?.f64())
}

/// Yields target indices forever, reshuffling after each full pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn checkpoint_path(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(name)
}

pub fn train<T: Scalar>(source: &Dataset, target: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainState<T>> {
    train_with(source, target, cfg, TrainOptions::default())
}

/// Runs `cfg.epochs` epochs. The target set is ignored (and may be absent)
/// when adaptation is disabled.
pub fn train_with<T: Scalar>(
    source: &Dataset,
    target: Option<&Dataset>,
    cfg: &TrainConfig,
    mut opts: TrainOptions,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset(source.name().to_string()));
    }
    if source.domain() != Some(DomainTag::Source) || !source.is_labeled() {
        return Err(Error::invalid(format!("`{}` must hold labelled source samples", source.name())));
    }
    let target = if cfg.adaptation_enabled {
        let t = target.ok_or_else(|| Error::invalid("adaptation is enabled but no target dataset was given"))?;
        if t.is_empty() {
            return Err(Error::EmptyDataset(t.name().to_string()));
        }
        if t.domain() != Some(DomainTag::Target) {
            return Err(Error::invalid(format!("`{}` must hold target samples", t.name())));
        }
        Some(t)
    } else {
        None
    };

    let (val_split, train_split) = split_train_val(source, cfg.val_fraction, cfg.seed)?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::config(
            "val_fraction",
            format!("leaves an empty split of the {} source samples", source.len()),
        ));
    }
    let spb = cfg.source_per_batch;
    let iters_per_epoch = train_split.len() / spb;
    if iters_per_epoch == 0 {
        return Err(Error::config(
            "source_per_batch",
            format!("{spb} exceeds the {} training samples", train_split.len()),
        ));
    }
    let size = cfg.image_size;
    let train_data = prepare::<T>(&train_split, cfg, true)?;
    let val_data = prepare::<T>(&val_split, cfg, true)?;
    let target_data = target.map(|t| prepare::<T>(t, cfg, false)).transpose()?;
    let n_target = cfg.batch_size - spb;

    let total_iterations = (cfg.epochs * iters_per_epoch) as u64;
    let schedule = LambdaSchedule::new(cfg.gamma, total_iterations)?;
    let mut model = build_model::<T>(cfg)?;
    model.zero_grad();
    let mut optimizer = Adam::new(cfg.lr_encoder_decoder, cfg.lr_domain_head);
    let mut source_rng = seeded_stream(cfg.seed, 1);
    let mut target_cycle = target_data.as_ref().map(|t| Cycler::new(t.pixels.len(), seeded_stream(cfg.seed, 2)));

    let mut history_file = match &opts.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            let hist = dir.join(HISTORY_FILE);
            Some((fs::File::create(&hist).map_err(|e| Error::io(&hist, e))?, hist))
        }
        None => None,
    };

    let mut domains = vec![DomainTag::Source; spb];
    if target_data.is_some() {
        domains.extend(std::iter::repeat(DomainTag::Target).take(n_target));
    }
    let mut state_history = Vec::with_capacity(cfg.epochs);
    let mut lambda_trace = Vec::with_capacity(total_iterations as usize);
    let mut best_val_loss = f64::INFINITY;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut iteration = 0u64;
    let mut order: Vec<usize> = (0..train_data.pixels.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut source_rng);
        let (mut sum_density, mut sum_domain, mut sum_lambda) = (0.0, 0.0, 0.0);
        for step in 0..iters_per_epoch {
            let src_idx = &order[step * spb..(step + 1) * spb];
            let mut rows: Vec<&[T]> = src_idx.iter().map(|&i| train_data.pixels[i].as_slice()).collect();
            let mut ids: Vec<&str> = src_idx.iter().map(|&i| train_data.ids[i].as_str()).collect();
            if let (Some(td), Some(cycle)) = (&target_data, &mut target_cycle) {
                for _ in 0..n_target {
                    let j = cycle.next();
                    rows.push(td.pixels[j].as_slice());
                    ids.push(td.ids[j].as_str());
                }
            }
            let x = gather(&rows, CHANNELS, size)?;
            let density_target: Vec<T> = src_idx.iter().flat_map(|&i| train_data.targets[i].iter().copied()).collect();

            let lambda = lambda_at(&schedule, iteration)?;
            lambda_trace.push(lambda);
            model.grl_lambda = lambda;
            if let Some(cb) = opts.on_batch.as_mut() {
                cb(&BatchInfo {
                    iteration,
                    lambda,
                    domains: &domains,
                    ids: &ids,
                });
            }

            let adapt = target_data.is_some();
            let cache = model.forward_train(&x, spb, adapt)?;
            let (dl, grad) = density_loss_grad(cache.density().data(), &density_target)?;
            let (dom, dlogit) = match cache.domain() {
                Some(probs) => (domain_loss(probs, &domains)?.f64(), Some(domain_logit_grad(probs, &domains))),
                None => (0.0, None),
            };
            let loss = total_loss(dl.f64(), dom).map_err(|e| match e {
                Error::Divergence { density, domain, .. } => Error::Divergence {
                    iteration,
                    density,
                    domain,
                },
                other => other,
            })?;
            let d_density = Tensor::from_vec(spb, 1, size, size, grad)?;
            model.zero_grad();
            model.backward(&cache, Some(&d_density), dlogit.as_deref())?;
            optimizer.step(&mut model);

            sum_density += loss.density_loss;
            sum_domain += loss.domain_loss;
            sum_lambda += lambda;
            iteration += 1;
        }

        let k = iters_per_epoch as f64;
        let val_loss = validation_loss(&model, &val_data, size, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                density: val_loss,
                domain: sum_domain / k,
            });
        }
        let record = EpochRecord {
            epoch,
            density_loss: sum_density / k,
            domain_loss: sum_domain / k,
            total: (sum_density + sum_domain) / k,
            val_loss,
            mean_lambda: sum_lambda / k,
        };
        let improved = val_loss < best_val_loss;
        if improved {
            best_val_loss = val_loss;
            best_model = model.clone();
            best_epoch = epoch;
        }
        if let (Some(dir), Some((file, hist_path))) = (&opts.run_dir, &mut history_file) {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(hist_path.as_path(), e))?;
            let ckpt = Checkpoint::new(cfg.clone(), epoch, iteration, model.clone(), Some(optimizer.clone()));
            save_checkpoint(&checkpoint_path(dir, &format!("epoch_{epoch}")), &ckpt)?;
            if improved {
                save_checkpoint(&checkpoint_path(dir, BEST_CHECKPOINT), &ckpt)?;
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        state_history.push(record);
    }

    Ok(TrainState {
        model,
        best_model,
        optimizer,
        iteration,
        best_val_loss,
        best_epoch,
        history: state_history,
        lambda_trace,
    })
}

/// Density map and raw count for each image, in inference mode.
///
/// Consecutive images of equal size are batched together; every image must
/// have sides divisible by `2^depth`.
pub fn predict<T: Scalar>(model: &CountingModel<T>, images: &[&Image]) -> Result<Vec<(DensityMap, f64)>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let (h, w) = (images[start].height(), images[start].width());
        let mut end = start + 1;
        while end < images.len() && end - start < CHUNK && images[end].height() == h && images[end].width() == w {
            end += 1;
        }
        let y = model.forward_density(&images_to_tensor::<T>(&images[start..end])?)?;
        for i in 0..end - start {
            let values: Vec<f64> = y.sample(i).iter().map(|v| v.f64()).collect();
            let m = DensityMap::from_values(h, w, values)?;
            let count = m.sum();
            out.push((m, count));
        }
        start = end;
    }
    Ok(out)
}

/// Raw predicted counts and ground-truth counts for a labelled dataset,
/// resizing images to `image_size` when given.
pub fn predict_counts<T: Scalar>(
    model: &CountingModel<T>,
    d: &Dataset,
    image_size: Option<usize>,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let resized: Vec<Image> = match image_size {
        Some(s) => d
            .samples()
            .iter()
            .map(|x| {
                let img = x.image();
                if img.height() == s && img.width() == s {
                    Ok(img.clone())
                } else {
                    resize_image(img, s, s)
                }
            })
            .collect::<Result<_>>()?,
        None => d.samples().iter().map(|x| x.image().clone()).collect(),
    };
    let refs: Vec<&Image> = resized.iter().collect();
    let pred = predict(model, &refs)?.into_iter().map(|(_, c)| c).collect();
    let truth = d
        .samples()
        .iter()
        .map(|s| {
            s.count()
                .map(|c| c as u64)
                .ok_or_else(|| Error::invalid(format!("sample `{}` has no ground-truth count", s.id())))
        })
        .collect::<Result<_>>()?;
    Ok((pred, truth))
}

pub fn evaluate<T: Scalar>(model: &CountingModel<T>, d: &Dataset, image_size: Option<usize>) -> Result<MetricReport> {
    let (pred, truth) = predict_counts(model, d, image_size)?;
    compute_metrics(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{generate_synthetic, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            depth: 1,
            base_width: 4,
            domain_head_width: 4,
            epochs: 2,
            sigma: 1.0,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(seed: u64) -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            image_size: 16,
            min: 1,
            max: 3,
            blob_radius: 1.5,
            source_count: 20,
            target_count: 16,
            test_count: 1,
            ..SyntheticSpec::default()
        };
        let b = generate_synthetic(&spec, seed).unwrap();
        (b.source, b.target)
    }

    #[test]
    fn config_validation_names_the_key() {
        let cfg = TrainConfig {
            source_per_batch: 9,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "source_per_batch"),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig {
            lr_domain_head: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "lr_domain_head"));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = tiny_cfg();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml("epochs = 3").unwrap().epochs, 3);
        assert!(TrainConfig::from_toml("epoch = 3").is_err());
    }

    #[test]
    fn batches_are_balanced_and_lambda_follows_schedule() {
        let (s, t) = tiny_data(0);
        let cfg = tiny_cfg();
        let mut seen = Vec::new();
        let mut obs = |b: &BatchInfo| {
            let n_src = b.domains.iter().filter(|&&d| d == DomainTag::Source).count();
            seen.push((b.iteration, b.lambda, n_src, b.domains.len(), b.ids[0].starts_with("source")));
        };
        let state = train_with::<f32>(
            &s,
            Some(&t),
            &cfg,
            TrainOptions {
                on_batch: Some(&mut obs),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        // 16 training samples, 4 per batch, 2 epochs
        assert_eq!(state.iteration, 8);
        assert_eq!(state.history.len(), 2);
        let sched = LambdaSchedule::new(10.0, 8).unwrap();
        for (k, &(it, lambda, n_src, n, first_is_source)) in seen.iter().enumerate() {
            assert_eq!(it, k as u64);
            assert_eq!(lambda, lambda_at(&sched, it).unwrap());
            assert_eq!(state.lambda_trace[k], lambda);
            assert_eq!((n_src, n), (4, 8));
            assert!(first_is_source);
        }
    }

    #[test]
    fn baseline_has_no_head_and_ignores_target() {
        let (s, t) = tiny_data(1);
        let cfg = TrainConfig {
            adaptation_enabled: false,
            ..tiny_cfg()
        };
        let a = train::<f32>(&s, Some(&t), &cfg).unwrap();
        let b = train::<f32>(&s, None, &cfg).unwrap();
        assert!(!a.model.has_domain_head());
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().all(|r| r.domain_loss == 0.0));
    }

    #[test]
    fn rejects_missing_or_empty_target_when_adapting() {
        let (s, _) = tiny_data(2);
        assert!(train::<f32>(&s, None, &tiny_cfg()).is_err());
        let empty = Dataset::new("empty", vec![]).unwrap();
        assert!(matches!(train::<f32>(&s, Some(&empty), &tiny_cfg()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn same_seed_same_history() {
        let (s, t) = tiny_data(3);
        let a = train::<f32>(&s, Some(&t), &tiny_cfg()).unwrap();
        let b = train::<f32>(&s, Some(&t), &tiny_cfg()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn run_directory_layout() {
        let (s, t) = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        train_with::<f32>(
            &s,
            Some(&t),
            &tiny_cfg(),
            TrainOptions {
                run_dir: Some(run.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let hist = fs::read_to_string(run.join(HISTORY_FILE)).unwrap();
        assert_eq!(hist.lines().count(), 2);
        let rec: EpochRecord = serde_json::from_str(hist.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 1);
        assert!(run.join(CONFIG_FILE).exists());
        for name in ["epoch_1", "epoch_2", BEST_CHECKPOINT] {
            assert!(checkpoint_path(&run, name).exists(), "{name}");
        }
    }

    #[test]
    fn prediction_properties() {
        let (s, _) = tiny_data(5);
        let model = build_model::<f32>(&TrainConfig {
            adaptation_enabled: false,
            ..tiny_cfg()
        })
        .unwrap();
        let img = s.samples()[0].image();
        let out = predict(&model, &[img, s.samples()[1].image(), img]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].1, out[2].1);
        assert!(out.iter().all(|(m, c)| *c >= 0.0 && m.values.iter().all(|&v| v >= 0.0)));
        assert_eq!(out[0].0.sum(), out[0].1);
    }
}
