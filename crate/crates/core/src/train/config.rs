//! Plain-text `key = value` training configuration.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::{self, parse_bool, parse_num};
use crate::pipeline::{RenderOptions, RenderQuantity};
use crate::projection::Canvas;
use crate::scene::{ConditioningKind, DensifyConfig, ModelConfig, Pipeline};
use crate::train::adam::LearningRates;
use crate::train::ssim::SsimOptions;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    pub iterations: u64,
    pub eta: f64,
    pub seed: u64,
    pub batch: usize,
    /// Gaussians at initialization.
    pub n_gaussians: usize,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    /// Render canvas; the spectrum task requires it to match the dataset.
    pub canvas: Canvas,
    pub tile_size: usize,
    pub quantity: RenderQuantity,
    pub early_exit: bool,
    pub ssim_wrap: bool,
    pub rssi_coherent: bool,
    pub log_interval: u64,
    pub encoding_order: usize,
    pub mlp1_width: usize,
    pub mlp1_depth: usize,
    pub feature_width: usize,
    pub mlp2_hidden: Vec<usize>,
    pub deform_width: usize,
    pub deform_depth: usize,
    pub deform_skip: usize,
    pub signal_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Pipeline::WrfGsPlus, 1, ConditioningKind::TxPosition);
        Self {
            pipeline: Pipeline::WrfGsPlus,
            iterations: 30_000,
            eta: 0.2,
            seed: 0,
            batch: 1,
            n_gaussians: 2000,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            canvas: Canvas::SPECTRUM,
            tile_size: crate::projection::TILE_SIZE,
            quantity: RenderQuantity::Power,
            early_exit: true,
            ssim_wrap: true,
            rssi_coherent: true,
            log_interval: 100,
            encoding_order: m.encoding_order,
            mlp1_width: m.mlp1_width,
            mlp1_depth: m.mlp1_depth,
            feature_width: m.feature_width,
            mlp2_hidden: m.mlp2_hidden,
            deform_width: m.deform_width,
            deform_depth: m.deform_depth,
            deform_skip: m.deform_skip,
            signal_init: m.signal_init,
        }
    }
}

impl TrainConfig {
    /// Keys in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "pipeline",
        "iterations",
        "eta",
        "seed",
        "batch",
        "n_gaussians",
        "lr.position",
        "lr.signal",
        "lr.opacity",
        "lr.rotation",
        "lr.scale",
        "lr.network",
        "lr.calibration",
        "densify.interval",
        "densify.warmup",
        "densify.until",
        "densify.grad_threshold",
        "densify.scale_fraction",
        "densify.opacity_prune",
        "densify.min_gaussians",
        "densify.max_gaussians",
        "render.height",
        "render.width",
        "render.tile_size",
        "render.quantity",
        "render.early_exit",
        "ssim.wrap_columns",
        "rssi.coherent",
        "log.interval",
        "model.encoding_order",
        "model.mlp1_width",
        "model.mlp1_depth",
        "model.feature_width",
        "model.mlp2_hidden",
        "model.deform_width",
        "model.deform_depth",
        "model.deform_skip",
        "model.signal_init",
    ];

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "pipeline" => self.pipeline = Pipeline::parse(v).ok_or_else(|| format!("unknown pipeline {v:?}"))?,
            "iterations" => self.iterations = parse_num(v)?,
            "eta" => self.eta = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "batch" => self.batch = parse_num(v)?,
            "n_gaussians" => self.n_gaussians = parse_num(v)?,
            "lr.position" => self.lr.position = parse_num(v)?,
            "lr.signal" => self.lr.signal = parse_num(v)?,
            "lr.opacity" => self.lr.opacity = parse_num(v)?,
            "lr.rotation" => self.lr.rotation = parse_num(v)?,
            "lr.scale" => self.lr.scale = parse_num(v)?,
            "lr.network" => self.lr.network = parse_num(v)?,
            "lr.calibration" => self.lr.calibration = parse_num(v)?,
            "densify.interval" => self.densify.interval = parse_num(v)?,
            "densify.warmup" => self.densify.warmup = parse_num(v)?,
            "densify.until" => self.densify.until = parse_num(v)?,
            "densify.grad_threshold" => self.densify.grad_threshold = parse_num(v)?,
            "densify.scale_fraction" => self.densify.scale_fraction = parse_num(v)?,
            "densify.opacity_prune" => self.densify.opacity_prune = parse_num(v)?,
            "densify.min_gaussians" => self.densify.min_gaussians = parse_num(v)?,
            "densify.max_gaussians" => self.densify.max_gaussians = parse_num(v)?,
            "render.height" => self.canvas.h = parse_num(v)?,
            "render.width" => self.canvas.w = parse_num(v)?,
            "render.tile_size" => self.tile_size = parse_num(v)?,
            "render.quantity" => self.quantity = RenderQuantity::parse(v).ok_or_else(|| format!("unknown quantity {v:?}"))?,
            "render.early_exit" => self.early_exit = parse_bool(v)?,
            "ssim.wrap_columns" => self.ssim_wrap = parse_bool(v)?,
            "rssi.coherent" => self.rssi_coherent = parse_bool(v)?,
            "log.interval" => self.log_interval = parse_num(v)?,
            "model.encoding_order" => self.encoding_order = parse_num(v)?,
            "model.mlp1_width" => self.mlp1_width = parse_num(v)?,
            "model.mlp1_depth" => self.mlp1_depth = parse_num(v)?,
            "model.feature_width" => self.feature_width = parse_num(v)?,
            "model.mlp2_hidden" => self.mlp2_hidden = kv::parse_list(v)?,
            "model.deform_width" => self.deform_width = parse_num(v)?,
            "model.deform_depth" => self.deform_depth = parse_num(v)?,
            "model.deform_skip" => self.deform_skip = parse_num(v)?,
            "model.signal_init" => self.signal_init = parse_num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "pipeline" => self.pipeline.name().to_string(),
            "iterations" => self.iterations.to_string(),
            "eta" => self.eta.to_string(),
            "seed" => self.seed.to_string(),
            "batch" => self.batch.to_string(),
            "n_gaussians" => self.n_gaussians.to_string(),
            "lr.position" => self.lr.position.to_string(),
            "lr.signal" => self.lr.signal.to_string(),
            "lr.opacity" => self.lr.opacity.to_string(),
            "lr.rotation" => self.lr.rotation.to_string(),
            "lr.scale" => self.lr.scale.to_string(),
            "lr.network" => self.lr.network.to_string(),
            "lr.calibration" => self.lr.calibration.to_string(),
            "densify.interval" => self.densify.interval.to_string(),
            "densify.warmup" => self.densify.warmup.to_string(),
            "densify.until" => self.densify.until.to_string(),
            "densify.grad_threshold" => self.densify.grad_threshold.to_string(),
            "densify.scale_fraction" => self.densify.scale_fraction.to_string(),
            "densify.opacity_prune" => self.densify.opacity_prune.to_string(),
            "densify.min_gaussians" => self.densify.min_gaussians.to_string(),
            "densify.max_gaussians" => self.densify.max_gaussians.to_string(),
            "render.height" => self.canvas.h.to_string(),
            "render.width" => self.canvas.w.to_string(),
            "render.tile_size" => self.tile_size.to_string(),
            "render.quantity" => self.quantity.name().to_string(),
            "render.early_exit" => self.early_exit.to_string(),
            "ssim.wrap_columns" => self.ssim_wrap.to_string(),
            "rssi.coherent" => self.rssi_coherent.to_string(),
            "log.interval" => self.log_interval.to_string(),
            "model.encoding_order" => self.encoding_order.to_string(),
            "model.mlp1_width" => self.mlp1_width.to_string(),
            "model.mlp1_depth" => self.mlp1_depth.to_string(),
            "model.feature_width" => self.feature_width.to_string(),
            "model.mlp2_hidden" => kv::join(&self.mlp2_hidden),
            "model.deform_width" => self.deform_width.to_string(),
            "model.deform_depth" => self.deform_depth.to_string(),
            "model.deform_skip" => self.deform_skip.to_string(),
            "model.signal_init" => self.signal_init.to_string(),
            _ => unreachable!("key list and accessors out of sync"),
        }
    }

    /// Parses a config file body; keys not given keep their defaults.
    /// `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text, origin)? {
            let err = |m: String| kv::error(origin, e.line, m);
            cfg.set(&e.key, &e.value).map_err(err)?;
            cfg.validate_key(&e.key).map_err(err)?;
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidInput(message) => kv::error(origin, 0, message),
            other => other,
        })?;
        Ok(cfg)
    }

    fn validate_key(&self, key: &str) -> std::result::Result<(), String> {
        match key {
            "eta" if !(0.0..=1.0).contains(&self.eta) => Err(format!("eta must lie in [0, 1], found {}", self.eta)),
            k if k.starts_with("lr.") && !self.lr.all_positive() => Err(format!("{k} must be positive")),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], found {}", self.eta)));
        }
        if !self.lr.all_positive() {
            return bad("all learning rates must be positive");
        }
        if self.iterations == 0 || self.batch == 0 || self.n_gaussians == 0 {
            return bad("iterations, batch and n_gaussians must be positive");
        }
        if self.canvas.h == 0 || self.canvas.w == 0 || self.canvas.w % 2 != 0 || self.tile_size == 0 {
            return bad("render canvas needs positive size and an even width");
        }
        if self.log_interval == 0 || self.densify.interval == 0 {
            return bad("intervals must be positive");
        }
        if self.densify.min_gaussians > self.densify.max_gaussians || self.n_gaussians > self.densify.max_gaussians {
            return bad("density limits are inconsistent");
        }
        if !(self.signal_init > 0.0) {
            return bad("signal_init must be positive");
        }
        self.model_config(1, ConditioningKind::TxPosition).validate()
    }

    pub fn model_config(&self, d_sig: usize, conditioning: ConditioningKind) -> ModelConfig {
        ModelConfig {
            pipeline: self.pipeline,
            d_sig,
            conditioning,
            encoding_order: self.encoding_order,
            mlp1_width: self.mlp1_width,
            mlp1_depth: self.mlp1_depth,
            feature_width: self.feature_width,
            mlp2_hidden: self.mlp2_hidden.clone(),
            deform_width: self.deform_width,
            deform_depth: self.deform_depth,
            deform_skip: self.deform_skip,
            signal_init: self.signal_init,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { canvas: self.canvas, tile_size: self.tile_size, quantity: self.quantity, early_exit: self.early_exit }
    }

    pub fn ssim_options(&self) -> SsimOptions {
        SsimOptions { wrap_columns: self.ssim_wrap }
    }

    /// Every key in canonical order; parsing this text returns `self`.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
