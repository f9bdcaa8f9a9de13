//! `wrfgs` command-line tool.
//!
//! Environment: `WRFGS_THREADS` sets the worker count when `--threads` is
//! absent; `WRFGS_LOG` is `quiet`, `info` (default) or `debug`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use nalgebra::Vector3;

use wrfgs::checkpoint;
use wrfgs::dataset::{self, Dataset, GenConfig, Split};
use wrfgs::io;
use wrfgs::oracle::SpatialSpectrum;
use wrfgs::scene::Pipeline;
use wrfgs::tasks::{self, TaskKind, TrainedModel, CSI_HALF};
use wrfgs::train::config::TrainConfig;
use wrfgs::train::trainer::{self, Checkpoint};
use wrfgs::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_LOG_FILE: &str = "loss_log.txt";
const NAN_DUMP_FILE: &str = "nan_dump.txt";

#[derive(Parser)]
#[command(name = "wrfgs", version, about = "Wireless radiation field reconstruction with 3D Gaussian splatting")]
struct Cli {
    /// Worker threads (defaults to WRFGS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Wrfgs,
    Wrfgsplus,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Wrfgs => Pipeline::WrfGs,
            PipelineArg::Wrfgsplus => Pipeline::WrfGsPlus,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Spectrum,
    Rssi,
    Csi,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Spectrum => TaskKind::Spectrum,
            TaskArg::Rssi => TaskKind::Rssi,
            TaskArg::Csi => TaskKind::Csi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the multipath oracle.
    Gen {
        /// Generation config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset, or resume from a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pipeline: Option<PipelineArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Expected dataset task.
        #[arg(long)]
        task: Option<TaskArg>,
        /// Stop after this iteration; continue later with --checkpoint.
        #[arg(long)]
        until: Option<u64>,
        /// Output directory for the checkpoint, loss log and train metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize spatial spectra for TX positions.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        query: TxQuery,
        /// Also write an 8-bit grayscale PNG per spectrum.
        #[arg(long)]
        heatmap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        task: Option<TaskArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict RSSI for TX positions.
    PredictRssi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        query: TxQuery,
        #[command(flatten)]
        from_dataset: DatasetQuery,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict downlink CSI from uplink CSI.
    PredictCsi {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV of uplink rows `re_0,im_0,...,re_25,im_25`.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[command(flatten)]
        from_dataset: DatasetQuery,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TxQuery {
    /// A single TX position `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    tx: Option<String>,
    /// CSV of TX positions `x,y,z`, one per row; a header row is optional.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetQuery {
    /// Take queries from this dataset's records instead.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

fn log_level() -> LogLevel {
    match std::env::var("WRFGS_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn info(msg: impl AsRef<str>) {
    if log_level() >= LogLevel::Info {
        eprintln!("{}", msg.as_ref());
    }
}

fn debug(msg: impl AsRef<str>) {
    if log_level() >= LogLevel::Debug {
        eprintln!("{}", msg.as_ref());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| std::env::var("WRFGS_THREADS").ok().and_then(|s| s.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::TileOverflow { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, task, seed, out } => cmd_gen(config.as_deref(), task, seed, &out),
        Command::Train { dataset, config, checkpoint, pipeline, seed, task, until, out } => {
            cmd_train(&dataset, config.as_deref(), checkpoint.as_deref(), pipeline, seed, task, until, &out)
        }
        Command::Render { checkpoint, query, heatmap, out } => cmd_render(&checkpoint, &query, heatmap, &out),
        Command::Eval { checkpoint, dataset, split, task, out } => cmd_eval(&checkpoint, &dataset, split.into(), task, &out),
        Command::PredictRssi { checkpoint, query, from_dataset, out } => cmd_predict_rssi(&checkpoint, &query, &from_dataset, &out),
        Command::PredictCsi { checkpoint, queries, from_dataset, out } => {
            cmd_predict_csi(&checkpoint, queries.as_deref(), &from_dataset, &out)
        }
    }
}

fn expect_task(found: TaskKind, expected: Option<TaskArg>) -> Result<()> {
    match expected.map(TaskKind::from) {
        Some(t) if t != found => Err(Error::invalid(format!("expected the {} task, found {}", t.name(), found.name()))),
        _ => Ok(()),
    }
}

fn load_model(path: &Path, task: TaskKind) -> Result<TrainedModel> {
    let ck = checkpoint::load(path)?;
    expect_task(ck.trained.task, Some(task_arg(task)))?;
    Ok(ck.trained)
}

fn task_arg(t: TaskKind) -> TaskArg {
    match t {
        TaskKind::Spectrum => TaskArg::Spectrum,
        TaskKind::Rssi => TaskArg::Rssi,
        TaskKind::Csi => TaskArg::Csi,
    }
}

fn cmd_gen(config: Option<&Path>, task: Option<TaskArg>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => GenConfig::parse(&io::read_text(p)?, &p.display().to_string())?,
        None => GenConfig::default(),
    };
    if let Some(t) = task {
        cfg.task = t.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = dataset::generate(&cfg)?;
    dataset::save(&ds, out)?;
    info(format!("wrote {} {} records to {}", ds.records.len(), ds.task().name(), out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset_dir: &Path,
    config: Option<&Path>,
    resume: Option<&Path>,
    pipeline: Option<PipelineArg>,
    seed: Option<u64>,
    task: Option<TaskArg>,
    until: Option<u64>,
    out: &Path,
) -> Result<()> {
    let ds = dataset::load(dataset_dir)?;
    expect_task(ds.task(), task)?;
    let mut cfg = match config {
        Some(p) => Some(TrainConfig::parse(&io::read_text(p)?, &p.display().to_string())?),
        None => None,
    };
    if let Some(c) = cfg.as_mut() {
        if let Some(p) = pipeline {
            c.pipeline = p.into();
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
    }
    let (mut ck, mut log) = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let embedded = &ck.trained.config;
            if let Some(c) = &cfg {
                if c != embedded {
                    return Err(Error::invalid("config differs from the one embedded in the checkpoint"));
                }
            }
            if pipeline.is_some_and(|p| Pipeline::from(p) != embedded.pipeline) || seed.is_some_and(|s| s != embedded.seed) {
                return Err(Error::invalid("--pipeline/--seed differ from the checkpoint"));
            }
            let log = previous_log(&out.join(LOSS_LOG_FILE), ck.state.iteration)?;
            (ck, log)
        }
        None => {
            let c = cfg.ok_or_else(|| Error::invalid("train needs --config or --checkpoint"))?;
            (trainer::initialize(&ds, &c)?, format!("# {}\n", LOG_COLUMNS))
        }
    };
    info(format!(
        "training {} / {} from iteration {} to {}",
        ck.trained.task.name(),
        ck.trained.config.pipeline.name(),
        ck.state.iteration,
        until.unwrap_or(ck.trained.config.iterations).min(ck.trained.config.iterations)
    ));
    let result = trainer::run(&ds, &mut ck, until, &mut |l| {
        writeln!(log, "{} {:.6e} {:.6e} {} {}", l.iteration, l.loss.loss, l.loss.l1, fmt_ssim(l.loss.ssim), l.n_gaussians)
            .unwrap();
        info(l.to_string());
    });
    io::write_file(&out.join(LOSS_LOG_FILE), log.as_bytes())?;
    if let Err(e) = result {
        if let Error::Numerical(msg) = &e {
            io::write_file(&out.join(NAN_DUMP_FILE), format!("{msg}\n").as_bytes())?;
        }
        return Err(e);
    }
    checkpoint::save(&ck, &out.join(CHECKPOINT_FILE))?;
    write_report(&ck, &ds, Split::Train, out, "train_")?;
    info(format!("wrote {}", out.join(CHECKPOINT_FILE).display()));
    Ok(())
}

/// Loss log columns; wall time is only printed, so the file is reproducible.
const LOG_COLUMNS: &str = "iteration loss l1 ssim n_gaussians";

fn fmt_ssim(s: Option<f64>) -> String {
    s.map_or("-".to_string(), |v| format!("{v:.6}"))
}

/// Lines of an existing loss log up to `iteration`, so a resumed run
/// reproduces the uninterrupted log.
fn previous_log(path: &Path, iteration: u64) -> Result<String> {
    let mut out = format!("# {LOG_COLUMNS}\n");
    if !path.exists() {
        return Ok(out);
    }
    for line in io::read_text(path)?.lines() {
        let Some(first) = line.split_whitespace().next() else { continue };
        if let Ok(it) = first.parse::<u64>() {
            if it <= iteration {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn write_report(ck: &Checkpoint, ds: &Dataset, split: Split, out: &Path, prefix: &str) -> Result<String> {
    let report = trainer::evaluate(&ck.trained, ds, split)?;
    let summary = report.summary_text()?;
    io::write_file(&out.join(format!("{prefix}metrics.csv")), report.to_csv().as_bytes())?;
    io::write_file(&out.join(format!("{prefix}summary.txt")), summary.as_bytes())?;
    Ok(summary)
}

fn cmd_eval(ck_path: &Path, dataset_dir: &Path, split: Split, task: Option<TaskArg>, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ck_path)?;
    expect_task(ck.trained.task, task)?;
    let ds = dataset::load(dataset_dir)?;
    let summary = write_report(&ck, &ds, split, out, "")?;
    print!("{summary}");
    Ok(())
}

/// Numeric CSV rows with `width` columns; an optional header row and `#`
/// comments are skipped.
fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = io::read_text(path)?;
    let origin = path.display().to_string();
    let mut rows = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let header = first && parsed.is_err();
        first = false;
        if header {
            continue;
        }
        let err = |m: String| Error::Config { path: origin.clone(), line: i + 1, message: m };
        let values = parsed.map_err(|_| err(format!("expected {width} numbers, found {line:?}")))?;
        if values.len() != width {
            return Err(err(format!("expected {width} columns, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Config { path: origin, line: 0, message: "no query rows".into() });
    }
    Ok(rows)
}

fn parse_tx(s: &str) -> Result<Vector3<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("--tx expects x,y,z, got {s:?}")))?;
    if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("--tx expects three finite numbers, got {s:?}")));
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn tx_queries(q: &TxQuery) -> Result<Option<Vec<Vector3<f64>>>> {
    match (&q.tx, &q.queries) {
        (Some(_), Some(_)) => Err(Error::invalid("use only one of --tx and --queries")),
        (Some(s), None) => Ok(Some(vec![parse_tx(s)?])),
        (None, Some(p)) => Ok(Some(read_rows(p, 3)?.into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())),
        (None, None) => Ok(None),
    }
}

/// Min-max 8-bit grayscale, row 0 at the top; only the maximum reaches 255.
fn heatmap(s: &SpatialSpectrum) -> (Vec<u8>, f64, f64) {
    let min = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels = s
        .values
        .iter()
        .map(|&v| if range > 0.0 { (255.0 * (v - min) / range).floor().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    (pixels, min, max)
}

fn write_png(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    io::write_file(path, &bytes)
}

fn cmd_render(ck_path: &Path, query: &TxQuery, with_heatmap: bool, out: &Path) -> Result<()> {
    let tm = load_model(ck_path, TaskKind::Spectrum)?;
    let txs = tx_queries(query)?.ok_or_else(|| Error::invalid("render needs --tx or --queries"))?;
    let mut report = String::from("index,tx_x,tx_y,tx_z,file,min,max,argmax_row,argmax_col\n");
    for (i, tx) in txs.iter().enumerate() {
        let spectrum = tasks::synthesize_spectrum(&tm, tx)?;
        let name = format!("spectrum_{i:04}.wspc");
        let bytes = io::encode_spectrum(&spectrum);
        io::write_file(&out.join(&name), &bytes)?;
        // Work from the stored values so the image matches the file.
        let stored = io::decode_spectrum(&bytes, &out.join(&name))?;
        let (row, col) = stored.argmax();
        let (pixels, min, max) = heatmap(&stored);
        if with_heatmap {
            write_png(&out.join(format!("spectrum_{i:04}.png")), stored.w, stored.h, pixels)?;
        }
        writeln!(report, "{i},{},{},{},{name},{min},{max},{row},{col}", tx.x, tx.y, tx.z).unwrap();
        debug(format!("rendered {name}"));
    }
    io::write_file(&out.join("render_report.csv"), report.as_bytes())?;
    if with_heatmap {
        println!("heatmap scale: pixel = floor(255 * (value - min) / (max - min)), per spectrum");
    }
    print!("{report}");
    Ok(())
}

fn dataset_records(q: &DatasetQuery, task: TaskKind) -> Result<Option<Dataset>> {
    let Some(dir) = &q.dataset else { return Ok(None) };
    let ds = dataset::load(dir)?;
    expect_task(ds.task(), Some(task_arg(task)))?;
    if ds.split(q.split.into()).is_empty() {
        return Err(Error::invalid(format!("the {} split is empty", Split::from(q.split).name())));
    }
    Ok(Some(ds))
}

fn cmd_predict_rssi(ck_path: &Path, query: &TxQuery, from: &DatasetQuery, out: &Path) -> Result<()> {
    let tm = load_model(ck_path, TaskKind::Rssi)?;
    let ds = dataset_records(from, TaskKind::Rssi)?;
    let queries: Vec<(usize, Vector3<f64>)> = match (tx_queries(query)?, &ds) {
        (Some(_), Some(_)) => return Err(Error::invalid("use either TX queries or --dataset")),
        (Some(txs), None) => txs.into_iter().enumerate().collect(),
        (None, Some(ds)) => ds.split(from.split.into()).iter().map(|r| (r.id, r.tx)).collect(),
        (None, None) => return Err(Error::invalid("predict-rssi needs --tx, --queries or --dataset")),
    };
    let mut csv = String::from("id,tx_x,tx_y,tx_z,rssi_db\n");
    for (id, tx) in &queries {
        let v = tasks::predict_rssi(&tm, tx)?;
        writeln!(csv, "{id},{},{},{},{v}", tx.x, tx.y, tx.z).unwrap();
    }
    io::write_file(out, csv.as_bytes())?;
    info(format!("wrote {} predictions to {}", queries.len(), out.display()));
    Ok(())
}

fn cmd_predict_csi(ck_path: &Path, queries: Option<&Path>, from: &DatasetQuery, out: &Path) -> Result<()> {
    let tm = load_model(ck_path, TaskKind::Csi)?;
    let ds = dataset_records(from, TaskKind::Csi)?;
    let rows: Vec<(usize, Vec<Complex64>)> = match (queries, &ds) {
        (Some(_), Some(_)) => return Err(Error::invalid("use either --queries or --dataset")),
        (Some(p), None) => read_rows(p, 2 * CSI_HALF)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i, r.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect()))
            .collect(),
        (None, Some(ds)) => {
            ds.split(from.split.into()).iter().map(|r| (r.id, r.target.csi().unwrap().0.to_vec())).collect()
        }
        (None, None) => return Err(Error::invalid("predict-csi needs --queries or --dataset")),
    };
    let mut csv = String::from("id");
    for k in 0..CSI_HALF {
        write!(csv, ",re_{k},im_{k}").unwrap();
    }
    csv.push('\n');
    for (id, uplink) in &rows {
        let down = tasks::predict_csi(&tm, uplink)?;
        write!(csv, "{id}").unwrap();
        for z in down {
            write!(csv, ",{},{}", z.re, z.im).unwrap();
        }
        csv.push('\n');
    }
    io::write_file(out, csv.as_bytes())?;
    info(format!("wrote {} predictions to {}", rows.len(), out.display()));
    Ok(())
}
