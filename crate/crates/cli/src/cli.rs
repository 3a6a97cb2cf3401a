//! The `res` command line.
//!
//! Every subcommand takes `--config <file>` with `key = value` lines keyed by
//! long flag names; flags given on the command line win. Exit status is 0 on
//! success, 1 on a runtime failure or any failed experiment cell, 2 on a
//! usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use res_core::data::{split, Dataset, NoiseSpec, Sample, SyntheticConfig};
use res_core::imputation::ImputerDepth;
use res_core::loss::Supervision;
use res_core::train::{evaluate, Evaluation, TrainConfig, TrainReport, ThresholdScope};

use crate::checkpoint::{self, Checkpoint};
use crate::config::Settings;
use crate::dataset_io::save_dataset;
use crate::error::{Error, Result};
use crate::experiment::{self, run_cell, run_cells, Cell, DataSource, ExperimentSpec, SweepAxis};
use crate::heatmap::write_heatmaps;

#[derive(Debug, Parser)]
#[command(name = "res", version, about = "Robust explanation supervision experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a (variant × sweep value × seed) grid.
    Experiment(ExperimentArgs),
    /// Write input | annotation | saliency PNGs.
    Heatmaps(HeatmapArgs),
}

/// Synthetic recipe. Defaults: 500 samples of 64×64, 2 classes,
/// 2 distractors, background noise 0.25, boundary radius 2, drop 0.3.
#[derive(Debug, Args, Default)]
pub struct RecipeArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub background_noise: Option<f64>,
    /// Grow (positive) or shrink (negative) annotations by this many pixels.
    #[arg(long, allow_hyphen_values = true)]
    pub boundary: Option<i32>,
    /// Chance of dropping each connected annotated region.
    #[arg(long)]
    pub drop: Option<f64>,
}

const RECIPE_KEYS: [&str; 7] = ["n", "size", "classes", "distractors", "background-noise", "boundary", "drop"];

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset directory; when absent a synthetic dataset is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    /// Seed of the synthetic images and of their annotation noise.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Train,validation,test sizes; default 20%/40%/40% of the dataset.
    #[arg(long)]
    pub split: Option<SplitSizes>,
}

#[derive(Debug, Args, Default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Leading epochs trained on the prediction loss only.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Training accuracy an epoch must reach before the warm-up ends.
    #[arg(long)]
    pub warmup_accuracy: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the explanation loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `batch` or `sample`.
    #[arg(long)]
    pub scope: Option<String>,
    /// `shallow` or `deep`.
    #[arg(long)]
    pub imputer: Option<String>,
    /// Gaussian imputation kernel size.
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Backbone block widths.
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// none, gradia, haics, res-g or res-l.
    #[arg(long)]
    pub variant: Option<String>,
    /// Seed of the split, the initialisation and the shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// all, train, val or test.
    #[arg(long)]
    pub subset: Option<String>,
    /// Split seed when a subset is chosen.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the metrics row to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Default: all five.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Default: 0,1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// none, train_size or alpha.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Parallel cells; default: available CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write a checkpoint per successful cell.
    #[arg(long)]
    pub checkpoints: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Render the first `count` samples (default 4) unless `--ids` is given.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes(pub usize, pub usize, pub usize);

impl FromStr for SplitSizes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("split {s:?}: {e}"))?;
        match parts[..] {
            [a, b, c] => Ok(SplitSizes(a, b, c)),
            _ => Err(format!("split {s:?}: expected train,val,test")),
        }
    }
}

impl std::fmt::Display for SplitSizes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.0, self.1, self.2)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

fn invalid_as_usage(e: res_core::Error) -> Error {
    match e {
        res_core::Error::InvalidArgument(m) => Error::Usage(m),
        other => Error::Core(other),
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("--{key} is required")))
}

fn parsed<T: FromStr<Err = res_core::Error>>(value: Option<String>, key: &str) -> Result<Option<T>> {
    value
        .map(|v| v.parse().map_err(|e| Error::Usage(format!("--{key}: {e}"))))
        .transpose()
}

struct ResolvedRecipe {
    config: SyntheticConfig,
    noise: NoiseSpec,
    /// `key = value` lines for the config snapshot.
    lines: Vec<(String, String)>,
}

fn resolve_recipe(s: &Settings, r: &RecipeArgs, seed: u64) -> Result<ResolvedRecipe> {
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        n: s.get_or("n", r.n, d.n)?,
        image_size: s.get_or("size", r.size, d.image_size)?,
        class_count: s.get_or("classes", r.classes, d.class_count)?,
        seed,
        distractors: s.get_or("distractors", r.distractors, d.distractors)?,
        background_noise: s.get_or("background-noise", r.background_noise, d.background_noise)?,
    };
    let noise = NoiseSpec {
        boundary_radius: s.get_or("boundary", r.boundary, 2)?,
        drop_probability: s.get_or("drop", r.drop, 0.3)?,
        seed,
    };
    noise.validate().map_err(invalid_as_usage)?;
    if config.image_size < 32 || !(2..=4).contains(&config.class_count) || config.n == 0 {
        return usage("synthetic data needs n >= 1, size >= 32 and 2 to 4 classes");
    }
    let lines = vec![
        ("n".into(), config.n.to_string()),
        ("size".into(), config.image_size.to_string()),
        ("classes".into(), config.class_count.to_string()),
        ("distractors".into(), config.distractors.to_string()),
        ("background-noise".into(), format!("{:?}", config.background_noise)),
        ("boundary".into(), noise.boundary_radius.to_string()),
        ("drop".into(), format!("{:?}", noise.drop_probability)),
    ];
    Ok(ResolvedRecipe { config, noise, lines })
}

struct ResolvedData {
    dataset: Dataset,
    split: (usize, usize, usize),
    lines: Vec<(String, String)>,
}

fn resolve_data(s: &Settings, a: &DataArgs) -> Result<ResolvedData> {
    let dir: Option<PathBuf> = s.get("data", a.data.clone())?;
    let data_seed = s.get_or("data-seed", a.data_seed, 0)?;
    let mut lines = Vec::new();
    let source = match dir {
        Some(dir) => {
            let given = [
                a.recipe.n.is_some(),
                a.recipe.size.is_some(),
                a.recipe.classes.is_some(),
                a.recipe.distractors.is_some(),
                a.recipe.background_noise.is_some(),
                a.recipe.boundary.is_some(),
                a.recipe.drop.is_some(),
            ];
            let from_file = RECIPE_KEYS.iter().any(|k| s.get::<String>(k, None).ok().flatten().is_some());
            if given.contains(&true) || from_file {
                return usage("synthetic recipe settings cannot be combined with --data");
            }
            lines.push(("data".into(), dir.display().to_string()));
            DataSource::Directory(dir)
        }
        None => {
            let r = resolve_recipe(s, &a.recipe, data_seed)?;
            lines.extend(r.lines);
            lines.push(("data-seed".into(), data_seed.to_string()));
            DataSource::Synthetic {
                config: r.config,
                noise: r.noise,
            }
        }
    };
    let split = s.get("split", a.split)?;
    let dataset = source.load()?;
    let n = dataset.len();
    let split = match split {
        Some(SplitSizes(a, b, c)) if a + b + c <= n => (a, b, c),
        Some(sizes) => return usage(format!("split {sizes} needs more than the {n} samples available")),
        None => (n / 5, 2 * n / 5, n - n / 5 - 2 * n / 5),
    };
    lines.push(("split".into(), SplitSizes(split.0, split.1, split.2).to_string()));
    Ok(ResolvedData { dataset, split, lines })
}

struct ResolvedTraining {
    config: TrainConfig,
    widths: Vec<usize>,
}

fn resolve_training(s: &Settings, a: &TrainingArgs) -> Result<ResolvedTraining> {
    let d = TrainConfig::default();
    let mut config = d.clone();
    config.epochs = s.get_or("epochs", a.epochs, d.epochs)?;
    config.warmup_epochs = s.get_or("warmup", a.warmup, d.warmup_epochs)?;
    config.warmup_accuracy = s.get_or("warmup-accuracy", a.warmup_accuracy, d.warmup_accuracy)?;
    config.batch_size = s.get_or("batch-size", a.batch_size, d.batch_size)?;
    config.optimizer.learning_rate = s.get_or("lr", a.lr, d.optimizer.learning_rate)?;
    config.loss.alpha = s.get_or("alpha", a.alpha, d.loss.alpha)?;
    config.loss.gamma = s.get_or("gamma", a.gamma, d.loss.gamma)?;
    config.loss.lambda_exp = s.get_or("lambda", a.lambda, d.loss.lambda_exp)?;
    config.loss.gaussian_kernel = s.get_or("kernel", a.kernel, d.loss.gaussian_kernel)?;
    config.loss.gaussian_sigma = s.get_or("sigma", a.sigma, d.loss.gaussian_sigma)?;
    let scope: Option<ThresholdScope> = parsed(s.get("scope", a.scope.clone())?, "scope")?;
    config.threshold_scope = scope.unwrap_or(d.threshold_scope);
    let depth: Option<ImputerDepth> = parsed(s.get("imputer", a.imputer.clone())?, "imputer")?;
    config.loss.imputer_depth = depth.unwrap_or(d.loss.imputer_depth);
    config.validate().map_err(invalid_as_usage)?;
    let widths = s.get_list("widths", a.widths.clone())?.unwrap_or_else(|| vec![16, 32, 64]);
    Ok(ResolvedTraining { config, widths })
}

fn training_lines(t: &ResolvedTraining) -> Vec<(String, String)> {
    let c = &t.config;
    let widths: Vec<String> = t.widths.iter().map(|w| w.to_string()).collect();
    vec![
        ("epochs".into(), c.epochs.to_string()),
        ("warmup".into(), c.warmup_epochs.to_string()),
        ("warmup-accuracy".into(), format!("{:?}", c.warmup_accuracy)),
        ("batch-size".into(), c.batch_size.to_string()),
        ("lr".into(), format!("{:?}", c.optimizer.learning_rate)),
        ("alpha".into(), format!("{:?}", c.loss.alpha)),
        ("gamma".into(), format!("{:?}", c.loss.gamma)),
        ("lambda".into(), format!("{:?}", c.loss.lambda_exp)),
        ("scope".into(), c.threshold_scope.to_string()),
        ("imputer".into(), c.loss.imputer_depth.to_string()),
        ("kernel".into(), c.loss.gaussian_kernel.to_string()),
        ("sigma".into(), format!("{:?}", c.loss.gaussian_sigma)),
        ("widths".into(), widths.join(",")),
    ]
}

fn settings_text(lines: &[(String, String)]) -> String {
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(Error::io(path))
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let s = Settings::load(a.config.as_deref())?;
    let seed = s.get_or("seed", a.seed, 0)?;
    let recipe = resolve_recipe(&s, &a.recipe, seed)?;
    let out: PathBuf = required(s.get("out", a.out)?, "out")?;
    s.finish()?;
    let data = DataSource::Synthetic {
        config: recipe.config.clone(),
        noise: recipe.noise.clone(),
    }
    .load()?;
    create_dir(&out)?;
    save_dataset(&data, &out)?;
    let counts: Vec<String> = data.class_counts().iter().map(|c| c.to_string()).collect();
    println!(
        "wrote {} samples of {}×{} to {} (class counts {}; boundary radius {}, drop probability {}, seed {})",
        data.len(),
        recipe.config.image_size,
        recipe.config.image_size,
        out.display(),
        counts.join("/"),
        recipe.noise.boundary_radius,
        recipe.noise.drop_probability,
        seed
    );
    Ok(0)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn metric_fields(e: Option<&Evaluation>) -> Vec<String> {
    match e {
        Some(e) => {
            let x = &e.explanation;
            [e.accuracy, x.iou, x.precision, x.recall, x.f1].iter().map(|v| v.to_string()).collect()
        }
        None => vec![String::new(); 5],
    }
}

/// `row,epoch,pred_loss,exp_loss,objective,mean_threshold,train_accuracy,accuracy,iou,precision,recall,f1`.
/// `epoch` rows carry training losses and validation metrics; the final
/// `test` row names the selected epoch and carries its test metrics.
pub fn train_log_csv(report: &TrainReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["row", "epoch", "pred_loss", "exp_loss", "objective", "mean_threshold", "train_accuracy"];
    let header: Vec<&str> = header.into_iter().chain(experiment::METRICS).collect();
    w.write_record(&header).expect("in-memory write");
    for e in &report.epochs {
        let mut row = vec![
            "epoch".to_string(),
            e.epoch.to_string(),
            e.train.prediction.to_string(),
            e.train.explanation.to_string(),
            e.train.objective.to_string(),
            e.train.mean_threshold.map_or(String::new(), |t| t.to_string()),
            e.train.accuracy.to_string(),
        ];
        row.extend(metric_fields(e.validation.as_ref()));
        w.write_record(&row).expect("in-memory write");
    }
    let mut row = vec!["test".to_string(), report.best_epoch.to_string()];
    row.extend(vec![String::new(); 5]);
    row.extend(metric_fields(report.test.as_ref()));
    w.write_record(&row).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let s = Settings::load(a.config.as_deref())?;
    let data = resolve_data(&s, &a.data)?;
    let training = resolve_training(&s, &a.training)?;
    let variant: Supervision = parsed(s.get("variant", a.variant)?, "variant")?.unwrap_or(Supervision::ResLearnable);
    let seed = s.get_or("seed", a.seed, 0)?;
    let out: PathBuf = required(s.get("out", a.out)?, "out")?;
    s.finish()?;

    let spec = ExperimentSpec {
        variants: vec![variant],
        seeds: vec![seed],
        split: data.split,
        axis: SweepAxis::None,
        values: vec![],
        train: training.config.clone(),
        widths: training.widths.clone(),
        workers: 1,
        checkpoints: false,
    };
    let backbone = spec.backbone(&data.dataset)?;
    let cell = Cell {
        variant,
        seed,
        value: None,
    };
    let start = Instant::now();
    let (params, mut report) = run_cell(&spec, &backbone, &data.dataset, &cell)?;
    report.wall_clock_secs = Some(start.elapsed().as_secs_f64());

    create_dir(&out)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &Checkpoint { backbone, params })?;
    write_file(&out.join(TRAIN_LOG_FILE), &train_log_csv(&report))?;
    let mut lines = data.lines;
    lines.extend(training_lines(&training));
    lines.push(("variant".into(), variant.to_string()));
    lines.push(("seed".into(), seed.to_string()));
    write_file(&out.join(CONFIG_FILE), &settings_text(&lines))?;
    let test = report.test.expect("run_cell scores the test split");
    println!(
        "{variant} seed {seed}: best epoch {} | test accuracy {:.4} iou {:.4} precision {:.4} recall {:.4} f1 {:.4} | {:.1}s",
        report.best_epoch,
        test.accuracy,
        test.explanation.iou,
        test.explanation.precision,
        test.explanation.recall,
        test.explanation.f1,
        report.wall_clock_secs.unwrap_or_default()
    );
    Ok(0)
}

fn subset(data: ResolvedData, which: &str, seed: u64) -> Result<Dataset> {
    if which == "all" {
        return Ok(data.dataset);
    }
    let splits = split(&data.dataset, data.split, seed)?;
    match which {
        "train" => Ok(splits.train),
        "val" => Ok(splits.val),
        "test" => Ok(splits.test),
        other => usage(format!("--subset {other:?}: expected all, train, val or test")),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let s = Settings::load(a.config.as_deref())?;
    let ckpt_path: PathBuf = required(s.get("checkpoint", a.checkpoint)?, "checkpoint")?;
    let which: String = s.get_or("subset", a.subset, "all".into())?;
    let seed = s.get_or("seed", a.seed, 0)?;
    let out: Option<PathBuf> = s.get("out", a.out)?;
    let data = resolve_data(&s, &a.data)?;
    s.finish()?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    let data = subset(data, &which, seed)?;
    let e = evaluate(&ckpt.backbone, &ckpt.params, &data)?;
    let mut text = String::from("samples,accuracy,iou,precision,recall,f1\n");
    let _ = writeln!(text, "{},{}", data.len(), metric_fields(Some(&e)).join(","));
    print!("{text}");
    if let Some(out) = out {
        write_file(&out, &text)?;
    }
    Ok(0)
}

fn experiment_cmd(a: ExperimentArgs) -> Result<i32> {
    let s = Settings::load(a.config.as_deref())?;
    let training = resolve_training(&s, &a.training)?;
    let variants = match s.get_list::<String>("variants", a.variants)? {
        Some(names) => names
            .iter()
            .map(|n| n.parse().map_err(|e| Error::Usage(format!("--variants: {e}"))))
            .collect::<Result<_>>()?,
        None => Supervision::ALL.to_vec(),
    };
    let seeds = s.get_list("seeds", a.seeds)?.unwrap_or_else(|| (0..5).collect());
    let axis: SweepAxis = s
        .get("sweep", a.sweep)?
        .map(|v: String| v.parse().map_err(Error::Usage))
        .transpose()?
        .unwrap_or(SweepAxis::None);
    let values = s.get_list("values", a.values)?.unwrap_or_default();
    let default_workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = s.get_or("workers", a.workers, default_workers)?;
    let checkpoints = s.get_or("checkpoints", a.checkpoints.then_some(true), false)?;
    let out: PathBuf = required(s.get("out", a.out)?, "out")?;
    let data = resolve_data(&s, &a.data)?;
    s.finish()?;

    let spec = ExperimentSpec {
        variants,
        seeds,
        split: data.split,
        axis,
        values,
        train: training.config.clone(),
        widths: training.widths.clone(),
        workers,
        checkpoints,
    };
    spec.validate()?;
    let backbone = spec.backbone(&data.dataset)?;
    let start = Instant::now();
    let outcomes = run_cells(&spec, &backbone, &data.dataset, |done, total, o| {
        let label = o.cell.label(spec.axis);
        match (&o.result, o.test()) {
            (Ok(_), Some(t)) => eprintln!(
                "[{done}/{total}] {label}: accuracy {:.4} iou {:.4} f1 {:.4} ({:.1}s)",
                t.accuracy, t.explanation.iou, t.explanation.f1, o.secs
            ),
            (Err(e), _) => eprintln!("[{done}/{total}] {label}: FAILED: {e}"),
            _ => eprintln!("[{done}/{total}] {label}: no test metrics"),
        }
    });
    create_dir(&out)?;
    experiment::write_outputs(&spec, &backbone, &outcomes, &out)?;
    let mut lines = data.lines;
    lines.extend(training_lines(&training));
    write_file(&out.join(CONFIG_FILE), &settings_text(&lines))?;
    let report = std::fs::read_to_string(out.join(experiment::REPORT_FILE)).map_err(Error::io(&out))?;
    print!("{report}");
    eprintln!("{} cells in {:.1}s", outcomes.len(), start.elapsed().as_secs_f64());
    Ok(if outcomes.iter().any(|o| o.result.is_err()) { 1 } else { 0 })
}

fn heatmaps_cmd(a: HeatmapArgs) -> Result<i32> {
    let s = Settings::load(a.config.as_deref())?;
    let ckpt_path: PathBuf = required(s.get("checkpoint", a.checkpoint)?, "checkpoint")?;
    let count = s.get_or("count", a.count, 4)?;
    let ids: Vec<String> = s.get_list("ids", a.ids)?.unwrap_or_default();
    let out: PathBuf = required(s.get("out", a.out)?, "out")?;
    let data = resolve_data(&s, &a.data)?;
    s.finish()?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    let samples: Vec<&Sample> = if ids.is_empty() {
        data.dataset.samples.iter().take(count).collect()
    } else {
        ids.iter()
            .map(|id| {
                data.dataset
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Usage(format!("no sample with id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let paths = write_heatmaps(&ckpt.backbone, &ckpt.params, &samples, &out)?;
    println!("wrote {} heatmaps to {}", paths.len(), out.display());
    Ok(0)
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Heatmaps(a) => heatmaps_cmd(a),
    }
}

/// Parses `args` (including the program name), runs the command, reports
/// errors on stderr and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
