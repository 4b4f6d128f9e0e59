use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dacount::checkpoint::{load_checkpoint, Checkpoint};
use dacount::datasets::io::{open_dataset_dir, read_annotations, save_dataset, write_density_png, ANNOTATIONS_FILE};
use dacount::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use dacount::datasets::transform::{extract_patches, make_composites, resize_image, Grid};
use dacount::density::{render_density_with, round_count, RenderOptions};
use dacount::metrics::compute_metrics;
use dacount::network::DensityActivation;
use dacount::trainer::{
    checkpoint_path, predict, predict_counts, train_with, EpochRecord, TrainConfig, TrainOptions, BEST_CHECKPOINT,
    CHECKPOINT_DIR,
};
use dacount::types::{Dataset, DomainTag, DotAnnotationSet, Image};
use npyz::WriterBuilder;

const RUN_ROOT_ENV: &str = "DACOUNT_RUN_ROOT";
const COUNTS_FILE: &str = "counts.csv";

#[derive(Parser)]
#[command(name = "dacount", version, about = "Density-map counting with adversarial domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a counting model (adapted by default, baseline with --no-adapt).
    Train(TrainArgs),
    /// Score a checkpoint or a predictions table against a labelled dataset.
    Eval(EvalArgs),
    /// Write density maps and counts for every image of a dataset.
    Predict(PredictArgs),
    /// Render ground-truth density maps from dot annotations.
    RenderDensity(RenderArgs),
    /// Generate the synthetic source/target benchmark.
    Synth(SynthArgs),
    /// Cut random square patches out of a dataset.
    Patches(PatchArgs),
    /// Stitch random grids of images into composites.
    Composite(CompositeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Unlabelled target dataset directory (required unless --no-adapt).
    #[arg(long)]
    target: Option<PathBuf>,
    /// TOML file with configuration keys; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to <run-root>/<name>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    #[arg(long)]
    name: Option<String>,
    /// Train the baseline without the domain classifier.
    #[arg(long)]
    no_adapt: bool,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Activation {
    Sigmoid,
    Linear,
}

#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    source_per_batch: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    lr_encoder_decoder: Option<f64>,
    #[arg(long)]
    lr_domain_head: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    domain_head_width: Option<usize>,
    #[arg(long)]
    domain_head_stages: Option<usize>,
    #[arg(long, value_enum)]
    density_activation: Option<Activation>,
    #[arg(long)]
    renormalize_border_kernels: bool,
}

#[derive(Args)]
struct ModelSource {
    /// Checkpoint file, or a run directory (its last epoch is used).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// With a run directory, use the best-validation checkpoint instead.
    #[arg(long)]
    best: bool,
    /// Resize images to the training resolution.
    #[arg(long, conflicts_with = "native_size")]
    resize: bool,
    /// Run on images at their own size (sides must divide by 2^depth).
    #[arg(long)]
    native_size: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Labelled evaluation dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelSource,
    /// CSV with `image_id,count` rows, scored instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Evaluation ledger; defaults to <run-root>/evaluations.csv.
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Dataset directory; image sizes are read from its images.
    #[arg(long, conflicts_with = "annotations")]
    data: Option<PathBuf>,
    /// Bare annotation file; needs --height and --width.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    #[arg(long)]
    renormalize_border_kernels: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    min: usize,
    #[arg(long, default_value_t = 12)]
    max: usize,
    #[arg(long)]
    blob_radius: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 200)]
    source_count: usize,
    #[arg(long, default_value_t = 200)]
    target_count: usize,
    #[arg(long, default_value_t = 50)]
    test_count: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 512)]
    patch: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Domain of the input; inferred from the presence of annotations when absent.
    #[arg(long)]
    domain: Option<DomainTag>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompositeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 2)]
    cols: usize,
    #[arg(long)]
    domain: Option<DomainTag>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dacount::Error> for Failure {
    fn from(e: dacount::Error) -> Self {
        match e {
            dacount::Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::RenderDensity(a) => cmd_render_density(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Patches(a) => cmd_patches(a),
        Command::Composite(a) => cmd_composite(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Refuses to reuse an existing path unless `force`, in which case it is cleared.
fn claim_output(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !force {
            return usage(format!("{} already exists; pass --force to overwrite it", dir.display()));
        }
        let cleared = if dir.is_dir() { fs::remove_dir_all(dir) } else { fs::remove_file(dir) };
        cleared.map_err(|e| runtime(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

fn require_dir(dir: &Path, what: &str) -> CliResult {
    if dir.is_dir() {
        Ok(())
    } else {
        usage(format!("{what} directory {} does not exist", dir.display()))
    }
}

fn open_auto(dir: &Path, domain: Option<DomainTag>) -> CliResult<Dataset> {
    require_dir(dir, "dataset")?;
    let domain = domain.unwrap_or(if dir.join(ANNOTATIONS_FILE).is_file() {
        DomainTag::Source
    } else {
        DomainTag::Target
    });
    Ok(open_dataset_dir(dir, domain)?)
}

fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    let o = &args.overrides;
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = o.$field { cfg.$field = v; } )* };
    }
    apply!(
        epochs,
        seed,
        batch_size,
        source_per_batch,
        image_size,
        lr_encoder_decoder,
        lr_domain_head,
        val_fraction,
        sigma,
        gamma,
        depth,
        base_width,
        domain_head_width
    );
    if let Some(n) = o.domain_head_stages {
        cfg.domain_head_stages = Some(n);
    }
    if let Some(a) = o.density_activation {
        cfg.density_activation = match a {
            Activation::Sigmoid => DensityActivation::Sigmoid,
            Activation::Linear => DensityActivation::Linear,
        };
    }
    if o.renormalize_border_kernels {
        cfg.renormalize_border_kernels = true;
    }
    if args.no_adapt {
        cfg.adaptation_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = resolve_config(&args)?;
    require_dir(&args.source, "source")?;
    let target_dir = if cfg.adaptation_enabled {
        match &args.target {
            Some(t) => {
                require_dir(t, "target")?;
                Some(t.clone())
            }
            None => return usage("--target is required unless adaptation is disabled with --no-adapt"),
        }
    } else {
        None
    };
    let run_dir = args.run_dir.clone().unwrap_or_else(|| {
        let name = args.name.clone().unwrap_or_else(|| {
            let kind = if cfg.adaptation_enabled { "adapted" } else { "baseline" };
            format!("{kind}-seed{}", cfg.seed)
        });
        args.run_root.join(name)
    });

    let source = open_dataset_dir(&args.source, DomainTag::Source)?;
    // the baseline never touches the target directory
    let target = target_dir.map(|t| open_dataset_dir(&t, DomainTag::Target)).transpose()?;
    claim_output(&run_dir, args.force)?;

    let quiet = args.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  density {:.5}  domain {:.5}  val {:.5}  lambda {:.4}",
                r.epoch, r.density_loss, r.domain_loss, r.val_loss, r.mean_lambda
            );
        }
    };
    let state = train_with::<f32>(
        &source,
        target.as_ref(),
        &cfg,
        TrainOptions {
            run_dir: Some(run_dir.clone()),
            on_epoch: Some(&mut progress),
            ..TrainOptions::default()
        },
    )?;
    println!("run_dir = {}", run_dir.display());
    println!("epochs = {}", state.history.len());
    println!("iterations = {}", state.iteration);
    println!("best_epoch = {}", state.best_epoch);
    println!("best_val_loss = {}", state.best_val_loss);
    Ok(())
}

fn resolve_checkpoint(path: &Path, best: bool) -> CliResult<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if !path.is_dir() {
        return usage(format!("checkpoint {} does not exist", path.display()));
    }
    if best {
        let p = checkpoint_path(path, BEST_CHECKPOINT);
        return if p.is_file() {
            Ok(p)
        } else {
            usage(format!("{} has no best checkpoint", path.display()))
        };
    }
    let dir = path.join(CHECKPOINT_DIR);
    let last = fs::read_dir(&dir)
        .map_err(|e| runtime(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("epoch_")?.parse::<usize>().ok().map(|n| (n, e.path()))
        })
        .max_by_key(|(n, _)| *n);
    match last {
        Some((_, p)) => Ok(p),
        None => usage(format!("{} holds no epoch checkpoints", dir.display())),
    }
}

fn load_model(src: &ModelSource) -> CliResult<(PathBuf, Checkpoint<f32>)> {
    let Some(path) = &src.checkpoint else {
        return usage("--checkpoint is required");
    };
    let path = resolve_checkpoint(path, src.best)?;
    let ckpt = load_checkpoint::<f32>(&path)?;
    Ok((path, ckpt))
}

/// The resolution to run the model at, or a usage error explaining the mismatch.
fn inference_size(d: &Dataset, cfg: &TrainConfig, src: &ModelSource) -> CliResult<Option<usize>> {
    if src.resize {
        return Ok(Some(cfg.image_size));
    }
    if src.native_size {
        return Ok(None);
    }
    let s = cfg.image_size;
    if let Some(bad) = d.samples().iter().find(|x| x.image().height() != s || x.image().width() != s) {
        return usage(format!(
            "image `{}` is {}x{} but the checkpoint was trained at {s}x{s}; \
             pass --resize to rescale inputs or --native-size to run at their own size",
            bad.id(),
            bad.image().height(),
            bad.image().width()
        ));
    }
    Ok(Some(s))
}

fn read_predictions(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| runtime(path, e))?;
    let mut out = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| runtime(path, e))?;
        let line = i + 2;
        let (Some(id), Some(count)) = (rec.get(0), rec.get(1)) else {
            return usage(format!("{}:{line}: expected `image_id,count`", path.display()));
        };
        let count: f64 = count
            .parse()
            .map_err(|_| Failure::Usage(format!("{}:{line}: count `{count}` is not a number", path.display())))?;
        out.insert(id.to_string(), count);
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    require_dir(&args.data, "evaluation")?;
    let data = open_dataset_dir(&args.data, DomainTag::Target)?;
    if !data.is_labeled() {
        return usage(format!("{} has no annotations; evaluation needs ground-truth counts", args.data.display()));
    }
    let (pred, truth, label) = match &args.predictions {
        Some(path) => {
            let table = read_predictions(path)?;
            let mut pred = Vec::with_capacity(data.len());
            let mut truth = Vec::with_capacity(data.len());
            for s in data.samples() {
                match table.get(s.id()) {
                    Some(&c) => pred.push(c),
                    None => return usage(format!("{} has no prediction for `{}`", path.display(), s.id())),
                }
                truth.push(s.count().unwrap_or(0) as u64);
            }
            (pred, truth, path.display().to_string())
        }
        None => {
            let (path, ckpt) = load_model(&args.model)?;
            let size = inference_size(&data, &ckpt.config, &args.model)?;
            let (pred, truth) = predict_counts(&ckpt.model, &data, size)?;
            (pred, truth, path.display().to_string())
        }
    };
    let report = compute_metrics(&pred, &truth)?;
    print!("{}", report.to_key_values());
    let ledger = args.ledger.unwrap_or_else(|| args.run_root.join("evaluations.csv"));
    if let Some(parent) = ledger.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(parent, e))?;
    }
    report.append_to_ledger(&ledger, &args.label.unwrap_or(label))?;
    Ok(())
}

fn write_npy(path: &Path, values: &[f64], height: usize, width: usize) -> CliResult {
    let file = fs::File::create(path).map_err(|e| runtime(path, e))?;
    let mut writer = npyz::WriteOptions::<f64>::new()
        .default_dtype()
        .shape(&[height as u64, width as u64])
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| runtime(path, e))?;
    writer.extend(values.iter().copied()).map_err(|e| runtime(path, e))?;
    writer.finish().map_err(|e| runtime(path, e))
}

/// Writes `<id>.npy` (exact values) and `<id>.png` (scaled for viewing).
fn write_map(dir: &Path, id: &str, values: &[f64], height: usize, width: usize) -> CliResult {
    write_npy(&dir.join(format!("{id}.npy")), values, height, width)?;
    write_density_png(&dir.join(format!("{id}.png")), values, height, width)?;
    Ok(())
}

fn write_counts(path: &Path, header: [&str; 3], rows: &[(String, String, String)]) -> CliResult {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(path, e))?;
    w.write_record(header).map_err(|e| runtime(path, e))?;
    for (a, b, c) in rows {
        w.write_record([a, b, c]).map_err(|e| runtime(path, e))?;
    }
    w.flush().map_err(|e| runtime(path, e))
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    require_dir(&args.data, "input")?;
    let data = open_dataset_dir(&args.data, DomainTag::Target)?;
    let (_, ckpt) = load_model(&args.model)?;
    let size = inference_size(&data, &ckpt.config, &args.model)?;
    let images: Vec<Image> = data
        .samples()
        .iter()
        .map(|s| match size {
            Some(n) if s.image().height() != n || s.image().width() != n => resize_image(s.image(), n, n),
            _ => Ok(s.image().clone()),
        })
        .collect::<dacount::Result<_>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let outputs = predict(&ckpt.model, &refs)?;

    claim_output(&args.out, args.force)?;
    let maps = args.out.join("density");
    fs::create_dir_all(&maps).map_err(|e| runtime(&maps, e))?;
    let mut rows = Vec::with_capacity(outputs.len());
    for (img, (map, count)) in images.iter().zip(&outputs) {
        write_map(&maps, img.id(), &map.values, map.height, map.width)?;
        rows.push((img.id().to_string(), count.to_string(), round_count(*count).to_string()));
    }
    write_counts(&args.out.join(COUNTS_FILE), ["image_id", "count", "rounded"], &rows)?;
    println!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_render_density(args: RenderArgs) -> CliResult {
    let opts = RenderOptions {
        renormalize_border_kernels: args.renormalize_border_kernels,
    };
    let jobs: Vec<(DotAnnotationSet, usize, usize)> = match (&args.data, &args.annotations) {
        (Some(dir), _) => {
            require_dir(dir, "dataset")?;
            let d = open_dataset_dir(dir, DomainTag::Source)?;
            d.samples()
                .iter()
                .map(|s| {
                    let dots = s.dots().cloned().unwrap_or_else(|| DotAnnotationSet::new(s.id(), vec![]));
                    (dots, s.image().height(), s.image().width())
                })
                .collect()
        }
        (None, Some(path)) => {
            let (Some(h), Some(w)) = (args.height, args.width) else {
                return usage("--annotations needs --height and --width");
            };
            read_annotations(path)?
                .into_iter()
                .map(|(id, points)| (DotAnnotationSet::new(id, points), h, w))
                .collect()
        }
        (None, None) => return usage("give either --data or --annotations"),
    };
    claim_output(&args.out, args.force)?;
    let mut rows = Vec::with_capacity(jobs.len());
    for (dots, h, w) in &jobs {
        let m = render_density_with(dots, *h, *w, args.sigma, opts)?;
        write_map(&args.out, &dots.image_id, &m.values, *h, *w)?;
        rows.push((dots.image_id.clone(), dots.count().to_string(), m.sum().to_string()));
    }
    write_counts(&args.out.join(COUNTS_FILE), ["image_id", "dots", "map_sum"], &rows)?;
    println!("rendered {} density maps into {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        image_size: args.image_size,
        min: args.min,
        max: args.max,
        blob_radius: args.blob_radius.unwrap_or(defaults.blob_radius),
        shift_strength: args.shift,
        noise_level: args.noise.unwrap_or(defaults.noise_level),
        source_count: args.source_count,
        target_count: args.target_count,
        test_count: args.test_count,
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    claim_output(&args.out, args.force)?;
    let bench = generate_synthetic(&spec, args.seed)?;
    for (name, d) in [("source", &bench.source), ("target", &bench.target), ("target_test", &bench.target_test)] {
        save_dataset(d, &args.out.join(name))?;
    }
    println!(
        "wrote {} source, {} target and {} target_test images to {}",
        bench.source.len(),
        bench.target.len(),
        bench.target_test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_patches(args: PatchArgs) -> CliResult {
    let d = open_auto(&args.data, args.domain)?;
    if args.count == 0 {
        return usage("--count must be at least 1");
    }
    let patches = extract_patches(&d, args.patch, args.count, args.seed)?;
    claim_output(&args.out, args.force)?;
    save_dataset(&patches, &args.out)?;
    println!("wrote {} patches to {}", patches.len(), args.out.display());
    Ok(())
}

fn cmd_composite(args: CompositeArgs) -> CliResult {
    let d = open_auto(&args.data, args.domain)?;
    if args.count == 0 || args.rows == 0 || args.cols == 0 {
        return usage("--count, --rows and --cols must be at least 1");
    }
    let grid = Grid {
        rows: args.rows,
        cols: args.cols,
    };
    let composites = make_composites(&d, grid, args.count, args.seed)?;
    claim_output(&args.out, args.force)?;
    save_dataset(&composites, &args.out)?;
    println!("wrote {} composites to {}", composites.len(), args.out.display());
    Ok(())
}
