//! Command implementations behind the `unetrpp` binary. Each command
//! writes its artifacts and returns a summary; the binary maps errors to a
//! nonzero exit status.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unetrpp_core::bench::{self, BenchConfig, BenchRecord, Mechanism};
use unetrpp_core::data::synth_dataset;
use unetrpp_core::gradcheck_suite::{run_suite, SuiteRow};
use unetrpp_core::io::{Checkpoint, RunConfig, Volume};
use unetrpp_core::metrics::{mean_foreground_dsc, MetricsReport};
use unetrpp_core::model::{complexity_ledger, Ledger, SegModel};
use unetrpp_core::train::{fit_with, predict};

/// Published totals the `count` report is compared against.
pub const REFERENCE_PARAMS: f64 = 42.96e6;
pub const REFERENCE_FLOPS: f64 = 47.98e9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] unetrpp_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Shortest round-tripping decimal form.
fn num(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Mean foreground DSC of the trained model over the training set.
    pub train_dsc: f64,
    pub checkpoint: PathBuf,
}

/// Trains on synthetic volumes. Writes `model.ckpt`, `train_log.csv`,
/// `config.txt` and the training volumes under `data/`.
pub fn train(config: &Path, out: &Path, mut on_epoch: impl FnMut(usize, f64, f64) + Send) -> Result<TrainSummary> {
    let cfg = RunConfig::parse(&read_text(config)?)?;
    create_dir(out)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_err(out))?;
    pool(cfg.threads)?.install(|| {
        let data = synth_dataset(cfg.num_samples, cfg.model.input_extents, cfg.model.num_classes, cfg.data_seed)?;
        let data_dir = out.join("data");
        create_dir(&data_dir)?;
        for (i, s) in data.iter().enumerate() {
            Volume::from_tensor(&s.image)?.save(&data_dir.join(format!("image_{i}.hdr")))?;
            Volume::from_labels(&s.label)?.save(&data_dir.join(format!("label_{i}.hdr")))?;
        }

        let mut model = SegModel::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
        let mut log = csv::Writer::from_path(out.join("train_log.csv"))?;
        log.write_record(["epoch", "loss", "mean_dsc"])?;
        let mut write_err = None;
        let fitted = fit_with(&mut model, &data, &cfg.train, |r| {
            on_epoch(r.epoch, r.loss, r.mean_dsc);
            let row = [r.epoch.to_string(), num(r.loss), num(r.mean_dsc)];
            if let Err(e) = log.write_record(&row).and_then(|()| Ok(log.flush()?)) {
                write_err.get_or_insert(e);
            }
        });
        if let Some(e) = write_err {
            return Err(e.into());
        }
        let history = fitted?;

        let checkpoint = out.join("model.ckpt");
        Checkpoint::from_model(&model).save(&checkpoint)?;
        let mut dsc = 0.0;
        for s in &data {
            dsc += mean_foreground_dsc(&predict(&model, &s.image)?, &s.label, cfg.model.num_classes)?;
        }
        let last = history.last().expect("at least one epoch");
        Ok(TrainSummary {
            epochs_run: history.records.len(),
            final_loss: last.loss,
            train_dsc: dsc / data.len() as f64,
            checkpoint,
        })
    })
}

/// Segments `image` with a checkpoint, writes `pred.hdr` and `metrics.csv`
/// (per-class and mean DSC / HD95 against `truth`).
pub fn eval(ckpt: &Path, image: &Path, truth: &Path, out: &Path) -> Result<MetricsReport> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let cfg = &model.config;
    let image = Volume::load(image)?;
    if image.channels != cfg.in_channels || image.extents != cfg.input_extents {
        return Err(CliError::Usage(format!(
            "image is {}×{:?}, model expects {}×{:?}",
            image.channels, image.extents, cfg.in_channels, cfg.input_extents
        )));
    }
    let truth = Volume::load(truth)?.to_labels()?;
    let pred = predict(&model, &image.to_tensor()?)?;
    let report = MetricsReport::compute(&pred, &truth, cfg.num_classes, [1.0; 3])?;

    create_dir(out)?;
    Volume::from_labels(&pred)?.save(&out.join("pred.hdr"))?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["class", "dsc", "hd95"])?;
    for (i, &c) in report.classes.iter().enumerate() {
        w.write_record([c.to_string(), num(report.per_class_dsc[i]), num(report.per_class_hd95[i])])?;
    }
    w.write_record(["mean".to_string(), num(report.mean_dsc), num(report.mean_hd95)])?;
    w.flush().map_err(io_err(out))?;
    Ok(report)
}

/// Runs the full finite-difference suite; fails listing every failing
/// check.
pub fn gradcheck(seeds: usize, on_row: impl FnMut(&SuiteRow)) -> Result<Vec<SuiteRow>> {
    let rows = run_suite(seeds, on_row)?;
    let failed: Vec<String> =
        rows.iter().filter(|r| !r.passed).map(|r| format!("{}:{}", r.kind.name(), r.name)).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::GradCheck(failed))
    }
}

pub fn format_suite_row(r: &SuiteRow) -> String {
    format!(
        "{:<6} {:<18} tol {:<7e} max_rel {:<10.3e} max_abs {:<10.3e} {}",
        r.kind.name(),
        r.name,
        r.tolerance,
        r.max_rel_error,
        r.max_abs_error,
        if r.passed { "PASS" } else { "FAIL" }
    )
}

/// Analytic ledger of the configured model, written as CSV to `csv_path`
/// with a closing `total` row.
pub fn count(config: &Path, csv_path: &Path) -> Result<Ledger> {
    let cfg = RunConfig::parse(&read_text(config)?)?;
    let ledger = complexity_ledger(&cfg.model)?;
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["module", "params", "flops"])?;
    for r in &ledger.rows {
        w.write_record([r.module.clone(), r.params.to_string(), r.flops.to_string()])?;
    }
    w.write_record(["total".to_string(), ledger.total_params().to_string(), ledger.total_flops().to_string()])?;
    w.flush().map_err(io_err(csv_path))?;
    Ok(ledger)
}

pub fn format_ledger(ledger: &Ledger) -> String {
    let mut s = format!("{:<22} {:>12} {:>16}\n", "module", "params", "flops");
    for r in &ledger.rows {
        s += &format!("{:<22} {:>12} {:>16}\n", r.module, r.params, r.flops);
    }
    let (p, f) = (ledger.total_params() as f64, ledger.total_flops() as f64);
    s += &format!("{:<22} {:>12} {:>16}\n", "total", ledger.total_params(), ledger.total_flops());
    s += &format!(
        "params {:.2}M ({:+.1}% vs {:.2}M), FLOPs {:.2}G ({:+.1}% vs {:.2}G)\n",
        p / 1e6,
        100.0 * (p / REFERENCE_PARAMS - 1.0),
        REFERENCE_PARAMS / 1e6,
        f / 1e9,
        100.0 * (f / REFERENCE_FLOPS - 1.0),
        REFERENCE_FLOPS / 1e9
    );
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    pub slopes: Vec<(Mechanism, f64)>,
}

/// Benchmarks every mechanism on one thread. Writes `bench.csv` and
/// `bench_fit.csv` (fitted log-log slope per mechanism).
pub fn bench(cfg: &BenchConfig, out: &Path, on_record: impl FnMut(&BenchRecord) + Send) -> Result<BenchSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let records = pool(1)?.install(|| bench::run(cfg, &Mechanism::ALL, on_record))?;
    let slopes = bench::fit_slopes(&records)?;

    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    w.write_record(["mechanism", "n", "p", "c", "h", "analytic_flops", "wall_ns", "peak_bytes"])?;
    for r in &records {
        w.write_record([
            r.mechanism.name().to_string(),
            r.n.to_string(),
            r.p.to_string(),
            r.c.to_string(),
            r.h.to_string(),
            r.analytic_flops.to_string(),
            r.wall_ns.to_string(),
            r.peak_bytes.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(out))?;
    let mut w = csv::Writer::from_path(out.join("bench_fit.csv"))?;
    w.write_record(["mechanism", "slope"])?;
    for (m, s) in &slopes {
        w.write_record([m.name().to_string(), num(*s)])?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(BenchSummary { records, slopes })
}

/// Parses `512,1024,...`.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Usage(format!("bad token count `{t}` in `{s}`"))))
        .collect()
}
