use std::fmt;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Record, Split, Target};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::scene::{densify_and_prune, ConditioningInput, GradStats, WrfModel};
use crate::tasks::{self, TaskKind, TrainedModel};
use crate::train::adam::{adam_step, AdamConfig};
use crate::train::config::TrainConfig;
use crate::train::loss::spectrum_loss;
use crate::train::metrics::{self, MetricReport};
use crate::train::ssim::ssim;

/// Optimizer-loop state that is not part of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub stats: GradStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub trained: TrainedModel,
    pub state: TrainerState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub l1: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub iteration: u64,
    pub loss: StepLoss,
    pub n_gaussians: usize,
    pub wall_ms: u128,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ssim = self.loss.ssim.map_or("-".to_string(), |s| format!("{s:.6}"));
        write!(
            f,
            "{} {:.6e} {:.6e} {} {} {}",
            self.iteration, self.loss.loss, self.loss.l1, ssim, self.n_gaussians, self.wall_ms
        )
    }
}

fn train_records(ds: &Dataset) -> Result<Vec<&Record>> {
    let r = ds.split(Split::Train);
    if r.is_empty() {
        return Err(Error::invalid("dataset has no training records"));
    }
    Ok(r)
}

fn check_compatible(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let g = &ds.config;
    if ds.task() == TaskKind::Spectrum && (cfg.canvas.h, cfg.canvas.w) != (g.spectrum_h, g.spectrum_w) {
        return Err(Error::invalid(format!(
            "render canvas {}x{} does not match the dataset spectra {}x{}",
            cfg.canvas.h, cfg.canvas.w, g.spectrum_h, g.spectrum_w
        )));
    }
    Ok(())
}

/// Fresh model and optimizer state for `ds`.
pub fn initialize(ds: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    check_compatible(ds, cfg)?;
    let task = ds.task();
    let records = train_records(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_cfg = cfg.model_config(task.d_sig(), task.conditioning());
    let model = WrfModel::init_random(model_cfg, ds.config.bounds(), ds.config.rx_pose(), cfg.n_gaussians, &mut rng)?;
    let mut trained = TrainedModel { task, config: cfg.clone(), model };
    if task == TaskKind::Rssi {
        // Start the calibration at the median offset so the field only has
        // to learn relative power.
        trained.model.set_calibration(0.0);
        let offsets: Vec<f64> = records
            .par_iter()
            .map(|r| Ok(r.target.rssi().unwrap() - tasks::rssi_unclamped(&trained, &r.tx)?))
            .collect::<Result<_>>()?;
        trained.model.set_calibration(metrics::percentile(&offsets, 50.0).unwrap());
    }
    let n = trained.model.gaussian_count();
    Ok(Checkpoint { trained, state: TrainerState { iteration: 0, rng, stats: GradStats::new(n) } })
}

fn conditioning(rec: &Record) -> Result<(ConditioningInput, Option<Complex64>)> {
    Ok(match &rec.target {
        Target::Csi(_) => {
            let (up, _) = rec.target.csi().unwrap();
            let r = tasks::csi_reference(up);
            (ConditioningInput::UplinkCsi(tasks::scale_csi(up, r)), Some(r))
        }
        _ => (ConditioningInput::TxPosition(rec.tx), None),
    })
}

/// Forward, loss and backward for one record; gradients are scaled by
/// `weight` and accumulated into the store.
pub fn sample_step(tm: &mut TrainedModel, rec: &Record, weight: f64, stats: Option<&mut GradStats>) -> Result<StepLoss> {
    let cfg = &tm.config;
    let (cond, reference) = conditioning(rec)?;
    match &rec.target {
        Target::Spectrum(gt) => {
            let f = pipeline::render_field(&tm.model, &cond, &cfg.render_options())?;
            let pred = pipeline::field_to_spectrum(&f.field, cfg.quantity);
            let l = spectrum_loss(&pred.values, &gt.values, gt.h, gt.w, cfg.eta, cfg.ssim_options())?;
            if l.loss.is_finite() {
                let d: Vec<f64> = l.grad.iter().map(|g| g * weight).collect();
                let d_field = pipeline::spectrum_grad_to_field_grad(&f.field, cfg.quantity, &d);
                pipeline::field_backward(&mut tm.model, &f, &d_field, stats);
            }
            Ok(StepLoss { loss: l.loss, l1: l.l1, ssim: Some(l.ssim) })
        }
        Target::Rssi(gt) => {
            let f = pipeline::render_field(&tm.model, &cond, &cfg.render_options())?;
            let pred = pipeline::field_power_db(&f.field, cfg.rssi_coherent) + tm.model.calibration();
            let diff = pred - gt;
            if diff.is_finite() {
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let coherent = cfg.rssi_coherent;
                pipeline::rssi_backward(&mut tm.model, &f, coherent, weight * sign, stats);
            }
            Ok(StepLoss { loss: diff.abs(), l1: diff.abs(), ssim: None })
        }
        Target::Csi(_) => {
            let (_, down) = rec.target.csi().unwrap();
            let gt = tasks::scale_csi(down, reference.unwrap());
            let energy: f64 = gt.iter().map(|z| z.norm_sqr()).sum();
            if !(energy > 0.0) {
                return Err(Error::invalid(format!("record {} has an all-zero downlink", rec.id)));
            }
            let f = pipeline::render_channels(&tm.model, &cond)?;
            let err: Vec<Complex64> = f.output.iter().zip(&gt).map(|(p, g)| p - g).collect();
            let loss = err.iter().map(|e| e.norm_sqr()).sum::<f64>() / energy;
            if loss.is_finite() {
                let d: Vec<Complex64> = err.iter().map(|e| e * (2.0 * weight / energy)).collect();
                pipeline::channels_backward(&mut tm.model, &f, &d);
            }
            let l1 = err.iter().map(|e| e.norm()).sum::<f64>() / err.len() as f64;
            Ok(StepLoss { loss, l1, ssim: None })
        }
    }
}

fn nan_report(ck: &Checkpoint, iteration: u64, batch: &[&Record], losses: &[StepLoss], what: &str) -> Error {
    let ids: Vec<String> = batch.iter().map(|r| r.id.to_string()).collect();
    let bad: Vec<String> = ck
        .trained
        .model
        .store
        .params
        .iter()
        .filter(|p| p.value.iter().chain(&p.grad).any(|v| !v.is_finite()))
        .map(|p| p.name.clone())
        .collect();
    let mut msg = format!("{what} at iteration {iteration}; batch records [{}]", ids.join(", "));
    for (r, l) in batch.iter().zip(losses) {
        msg.push_str(&format!("; record {} tx ({}, {}, {}) loss {} l1 {}", r.id, r.tx.x, r.tx.y, r.tx.z, l.loss, l.l1));
    }
    msg.push_str(&format!("; non-finite tensors [{}]", bad.join(", ")));
    msg.push_str(&format!("; gaussians {}", ck.trained.model.gaussian_count()));
    Error::Numerical(msg)
}

/// Runs the optimizer from the checkpoint's iteration to `stop_at` (or the
/// configured total). Returns the per-iteration batch losses.
pub fn run(ds: &Dataset, ck: &mut Checkpoint, stop_at: Option<u64>, on_log: &mut dyn FnMut(&LogLine)) -> Result<Vec<f64>> {
    let cfg = ck.trained.config.clone();
    check_compatible(ds, &cfg)?;
    if ds.task() != ck.trained.task {
        return Err(Error::invalid("dataset task does not match the checkpoint"));
    }
    let records = train_records(ds)?;
    let adam = AdamConfig::new(cfg.lr.clone(), cfg.iterations);
    let end = stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let track_density = ck.trained.task != TaskKind::Csi;
    let start = Instant::now();
    let mut losses = Vec::new();
    while ck.state.iteration < end {
        let it = ck.state.iteration + 1;
        let batch: Vec<&Record> = (0..cfg.batch).map(|_| records[ck.state.rng.gen_range(0..records.len())]).collect();
        ck.trained.model.store.zero_grad();
        let weight = 1.0 / cfg.batch as f64;
        let mut step = Vec::with_capacity(batch.len());
        for rec in &batch {
            let stats = if track_density { Some(&mut ck.state.stats) } else { None };
            match sample_step(&mut ck.trained, rec, weight, stats) {
                Ok(l) => step.push(l),
                Err(Error::Numerical(m)) => return Err(nan_report(ck, it, &batch, &step, &format!("non-finite values ({m})"))),
                Err(e) => return Err(e),
            }
        }
        let mean = |f: fn(&StepLoss) -> f64| step.iter().map(f).sum::<f64>() / step.len() as f64;
        let loss = StepLoss {
            loss: mean(|s| s.loss),
            l1: mean(|s| s.l1),
            ssim: step[0].ssim.map(|_| mean(|s| s.ssim.unwrap())),
        };
        if !loss.loss.is_finite() {
            return Err(nan_report(ck, it, &batch, &step, "non-finite loss"));
        }
        if ck.trained.model.store.params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(nan_report(ck, it, &batch, &step, "non-finite gradient"));
        }
        adam_step(&mut ck.trained.model.store, &adam);
        ck.state.iteration = it;
        losses.push(loss.loss);

        let d = &cfg.densify;
        if track_density && it as usize >= d.warmup && it as usize % d.interval == 0 {
            let densify = it as usize <= d.until;
            densify_and_prune(&mut ck.trained.model, &ck.state.stats, d, cfg.canvas, densify, &mut ck.state.rng);
            ck.state.stats = GradStats::new(ck.trained.model.gaussian_count());
        }
        if it % cfg.log_interval == 0 || it == cfg.iterations {
            on_log(&LogLine {
                iteration: it,
                loss,
                n_gaussians: ck.trained.model.gaussian_count(),
                wall_ms: start.elapsed().as_millis(),
            });
        }
    }
    // Gradients are transient and are not persisted.
    ck.trained.model.store.zero_grad();
    Ok(losses)
}

/// Per-record metrics on one split.
pub fn evaluate(tm: &TrainedModel, ds: &Dataset, split: Split) -> Result<MetricReport> {
    if ds.task() != tm.task {
        return Err(Error::invalid(format!(
            "dataset task {} does not match checkpoint task {}",
            ds.task().name(),
            tm.task.name()
        )));
    }
    let records = ds.split(split);
    if records.is_empty() {
        return Err(Error::invalid(format!("the {} split is empty", split.name())));
    }
    let values: Vec<f64> = records
        .par_iter()
        .map(|r| match &r.target {
            Target::Spectrum(gt) => {
                let pred = tasks::synthesize_spectrum(tm, &r.tx)?;
                ssim(&gt.values, &pred.values, gt.h, gt.w, tm.config.ssim_options())
            }
            Target::Rssi(gt) => Ok((tasks::predict_rssi(tm, &r.tx)? - gt).abs()),
            Target::Csi(_) => {
                let (up, down) = r.target.csi().unwrap();
                metrics::cea(&tasks::predict_csi(tm, up)?, down)
            }
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport { record_ids: records.iter().map(|r| r.id).collect(), ..MetricReport::default() };
    match tm.task {
        TaskKind::Spectrum => report.ssim_per_sample = values,
        TaskKind::Rssi => report.rssi_abs_error_db = values,
        TaskKind::Csi => report.cea_db = values,
    }
    Ok(report)
}
