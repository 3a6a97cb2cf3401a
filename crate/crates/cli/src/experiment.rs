//! Sweeps over (variant × sweep value × seed) cells.
//!
//! The dataset is built once. Each cell splits it with its own seed, trains
//! with that seed, and is scored on its test split. Cells run on a bounded
//! pool of threads; a cell that errors or panics is recorded as failed and
//! the rest still run.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use res_core::data::{generate_synthetic, split, Dataset, NoiseSpec, SyntheticConfig};
use res_core::loss::Supervision;
use res_core::model::{BackboneConfig, ModelParams};
use res_core::train::{evaluate, train, Evaluation, TrainConfig, TrainReport};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset_io::load_dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generate in memory, then corrupt the annotations.
    Synthetic { config: SyntheticConfig, noise: NoiseSpec },
    Directory(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { config, noise } => {
                noise.validate()?;
                Ok(generate_synthetic(config)?.corrupted(noise)?)
            }
            DataSource::Directory(dir) => load_dataset(dir),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    TrainSize,
    Alpha,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(SweepAxis::None),
            "train_size" => Ok(SweepAxis::TrainSize),
            "alpha" => Ok(SweepAxis::Alpha),
            _ => Err(format!("unknown sweep axis {s:?} (none, train_size or alpha)")),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::None => "none",
            SweepAxis::TrainSize => "train_size",
            SweepAxis::Alpha => "alpha",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub variants: Vec<Supervision>,
    pub seeds: Vec<u64>,
    /// Train, validation and test sizes.
    pub split: (usize, usize, usize),
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Template for every cell; variant, seed and swept fields are overwritten.
    pub train: TrainConfig,
    pub widths: Vec<usize>,
    pub workers: usize,
    /// Also write one checkpoint per successful cell.
    pub checkpoints: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.variants.is_empty() || self.seeds.is_empty() {
            return usage("variants and seeds must be nonempty".into());
        }
        if self.workers == 0 {
            return usage("workers must be positive".into());
        }
        match (self.axis, self.values.is_empty()) {
            (SweepAxis::None, false) => return usage("sweep values given without a sweep axis".into()),
            (SweepAxis::TrainSize | SweepAxis::Alpha, true) => {
                return usage(format!("sweep axis {} needs values", self.axis))
            }
            _ => {}
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::TrainSize => v >= 1.0 && v.fract() == 0.0 && v <= self.split.0 as f64,
                SweepAxis::Alpha => (0.0..=2.0).contains(&v),
                SweepAxis::None => true,
            };
            if !ok {
                return usage(format!("sweep value {v} is invalid for axis {}", self.axis));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn backbone(&self, data: &Dataset) -> Result<BackboneConfig> {
        let (c, h, w) = data
            .image_shape()
            .ok_or_else(|| Error::Usage("the dataset is empty".into()))?;
        let backbone = BackboneConfig {
            widths: self.widths.clone(),
            kernel_sizes: vec![3; self.widths.len()],
            ..BackboneConfig::new(c, h, w, data.num_classes().max(2))
        };
        backbone.validate()?;
        Ok(backbone)
    }

    /// Variant-major, then sweep value, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let values: Vec<Option<f64>> = match self.axis {
            SweepAxis::None => vec![None],
            _ => self.values.iter().copied().map(Some).collect(),
        };
        let mut cells = Vec::new();
        for &variant in &self.variants {
            for &value in &values {
                for &seed in &self.seeds {
                    cells.push(Cell { variant, seed, value });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub variant: Supervision,
    pub seed: u64,
    pub value: Option<f64>,
}

impl Cell {
    pub fn label(&self, axis: SweepAxis) -> String {
        match self.value {
            Some(v) => format!("{}-seed{}-{axis}{v}", self.variant, self.seed),
            None => format!("{}-seed{}", self.variant, self.seed),
        }
    }
}

/// Training config for one cell.
pub fn cell_config(spec: &ExperimentSpec, cell: &Cell) -> TrainConfig {
    let mut cfg = spec.train.clone();
    cfg.seed = cell.seed;
    cfg.loss.variant = cell.variant;
    if let (SweepAxis::Alpha, Some(v)) = (spec.axis, cell.value) {
        cfg.loss.alpha = v;
    }
    cfg
}

/// Train one cell and score it on its test split.
pub fn run_cell(
    spec: &ExperimentSpec,
    backbone: &BackboneConfig,
    data: &Dataset,
    cell: &Cell,
) -> Result<(ModelParams, TrainReport)> {
    let splits = split(data, spec.split, cell.seed)?;
    let train_set = match (spec.axis, cell.value) {
        (SweepAxis::TrainSize, Some(k)) => split(&splits.train, (k as usize, 0, 0), cell.seed)?.train,
        _ => splits.train,
    };
    let (params, mut report) = train(backbone, &cell_config(spec, cell), &train_set, &splits.val)?;
    report.test = Some(evaluate(backbone, &params, &splits.test)?);
    Ok((params, report))
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub result: std::result::Result<CellSuccess, String>,
    pub secs: f64,
}

#[derive(Clone, Debug)]
pub struct CellSuccess {
    pub params: ModelParams,
    pub report: TrainReport,
}

impl CellOutcome {
    pub fn test(&self) -> Option<Evaluation> {
        self.result.as_ref().ok().and_then(|s| s.report.test)
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every cell on `spec.workers` threads. `progress` is called from the
/// collecting thread as cells finish; the result is in cell order.
pub fn run_cells(
    spec: &ExperimentSpec,
    backbone: &BackboneConfig,
    data: &Dataset,
    mut progress: impl FnMut(usize, usize, &CellOutcome),
) -> Vec<CellOutcome> {
    let cells = spec.cells();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut slots: Vec<Option<CellOutcome>> = vec![None; cells.len()];
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.min(cells.len()) {
            let tx = tx.clone();
            let (cells, next) = (&cells, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let start = Instant::now();
                let result = catch_unwind(AssertUnwindSafe(|| run_cell(spec, backbone, data, cell)))
                    .map_err(panic_message)
                    .and_then(|r| r.map_err(|e| e.to_string()))
                    .map(|(params, report)| CellSuccess { params, report });
                let outcome = CellOutcome {
                    cell: *cell,
                    result,
                    secs: start.elapsed().as_secs_f64(),
                };
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (done, (i, outcome)) in rx.iter().enumerate() {
            progress(done + 1, cells.len(), &outcome);
            slots[i] = Some(outcome);
        }
    });
    slots.into_iter().map(|s| s.expect("every cell reports")).collect()
}

pub const METRICS: [&str; 5] = ["accuracy", "iou", "precision", "recall", "f1"];

fn metric_values(e: &Evaluation) -> [f64; 5] {
    let x = &e.explanation;
    [e.accuracy, x.iou, x.precision, x.recall, x.f1]
}

fn value_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// One row per cell:
/// `variant,seed,axis,value,status,best_epoch,accuracy,iou,precision,recall,f1`.
/// Failed cells have status `failed` and empty metric fields.
pub fn results_csv(axis: SweepAxis, outcomes: &[CellOutcome]) -> String {
    let header: Vec<String> = ["variant", "seed", "axis", "value", "status", "best_epoch"]
        .into_iter()
        .chain(METRICS)
        .map(String::from)
        .collect();
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let mut row = vec![
                o.cell.variant.to_string(),
                o.cell.seed.to_string(),
                axis.to_string(),
                value_field(o.cell.value),
            ];
            match (&o.result, o.test()) {
                (Ok(s), Some(test)) => {
                    row.push("ok".into());
                    row.push(s.report.best_epoch.to_string());
                    row.extend(metric_values(&test).iter().map(|v| v.to_string()));
                }
                _ => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), 1 + METRICS.len()));
                }
            }
            row
        })
        .collect();
    csv_text(&header, &rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    /// Lower median.
    pub median: f64,
}

impl Stat {
    /// `None` for an empty slice. The mean sums in slice order.
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Stat {
            mean,
            std: var.sqrt(),
            median: sorted[(n - 1) / 2],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Supervision,
    pub value: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    /// Indexed like [`METRICS`]; `None` when every run failed.
    pub stats: [Option<Stat>; 5],
}

/// One row per (variant, sweep value), in cell order.
pub fn summarize(outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, Vec<[f64; 5]>)> = Vec::new();
    for o in outcomes {
        let key = (o.cell.variant, o.cell.value.map(f64::to_bits));
        let pos = rows
            .iter()
            .position(|(r, _)| (r.variant, r.value.map(f64::to_bits)) == key);
        let (row, values) = match pos {
            Some(p) => &mut rows[p],
            None => {
                rows.push((
                    SummaryRow {
                        variant: o.cell.variant,
                        value: o.cell.value,
                        runs: 0,
                        failed: 0,
                        stats: [None; 5],
                    },
                    Vec::new(),
                ));
                rows.last_mut().expect("just pushed")
            }
        };
        row.runs += 1;
        match o.test() {
            Some(t) => values.push(metric_values(&t)),
            None => row.failed += 1,
        }
    }
    rows.into_iter()
        .map(|(mut row, values)| {
            for (m, stat) in row.stats.iter_mut().enumerate() {
                *stat = Stat::of(&values.iter().map(|v| v[m]).collect::<Vec<_>>());
            }
            row
        })
        .collect()
}

/// `variant,axis,value,runs,failed` then `<metric>_mean,<metric>_std,<metric>_median`
/// for every metric.
pub fn summary_csv(axis: SweepAxis, rows: &[SummaryRow]) -> String {
    let mut header: Vec<String> = ["variant", "axis", "value", "runs", "failed"]
        .into_iter()
        .map(String::from)
        .collect();
    for m in METRICS {
        header.extend([format!("{m}_mean"), format!("{m}_std"), format!("{m}_median")]);
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.variant.to_string(),
                axis.to_string(),
                value_field(r.value),
                r.runs.to_string(),
                r.failed.to_string(),
            ];
            for s in &r.stats {
                match s {
                    Some(s) => row.extend([s.mean.to_string(), s.std.to_string(), s.median.to_string()]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            row
        })
        .collect();
    csv_text(&header, &body)
}

/// Fixed-width table of mean ± std per summary row, then failure messages.
pub fn report_text(spec: &ExperimentSpec, outcomes: &[CellOutcome], rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let variants: Vec<String> = spec.variants.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "variants: {}", variants.join(", "));
    let _ = writeln!(out, "seeds: {:?}", spec.seeds);
    let _ = writeln!(out, "split: {:?}", spec.split);
    let _ = writeln!(out, "sweep: {} {:?}", spec.axis, spec.values);
    let t = &spec.train;
    let _ = writeln!(
        out,
        "epochs {} warmup {} (accuracy {:?}) batch {} lr {:?} alpha {:?} gamma {:?} lambda {:?} scope {}",
        t.epochs,
        t.warmup_epochs,
        t.warmup_accuracy,
        t.batch_size,
        t.optimizer.learning_rate,
        t.loss.alpha,
        t.loss.gamma,
        t.loss.lambda_exp,
        t.threshold_scope
    );
    let _ = writeln!(out);
    let _ = write!(out, "{:<8} {:>10} {:>5}", "variant", spec.axis, "runs");
    for m in METRICS {
        let _ = write!(out, " {m:>17}");
    }
    let _ = writeln!(out);
    for r in rows {
        let _ = write!(out, "{:<8} {:>10} {:>5}", r.variant, value_field(r.value), r.runs - r.failed);
        for s in &r.stats {
            let cell = s.map_or("-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
            let _ = write!(out, " {cell:>17}");
        }
        let _ = writeln!(out);
    }
    let failures: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    if !failures.is_empty() {
        let _ = writeln!(out, "\nfailed cells:");
        for o in failures {
            if let Err(e) = &o.result {
                let _ = writeln!(out, "  {}: {e}", o.cell.label(spec.axis));
            }
        }
    }
    out
}

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Writes results, summary, report and (optionally) checkpoints under `out`.
pub fn write_outputs(
    spec: &ExperimentSpec,
    backbone: &BackboneConfig,
    outcomes: &[CellOutcome],
    out: &Path,
) -> Result<Vec<SummaryRow>> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let rows = summarize(outcomes);
    write(&out.join(RESULTS_FILE), &results_csv(spec.axis, outcomes))?;
    write(&out.join(SUMMARY_FILE), &summary_csv(spec.axis, &rows))?;
    write(&out.join(REPORT_FILE), &report_text(spec, outcomes, &rows))?;
    if spec.checkpoints {
        let dir = out.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for o in outcomes {
            if let Ok(s) = &o.result {
                let ckpt = Checkpoint {
                    backbone: backbone.clone(),
                    params: s.params.clone(),
                };
                checkpoint::save(&dir.join(format!("{}.ckpt", o.cell.label(spec.axis))), &ckpt)?;
            }
        }
    }
    Ok(rows)
}
