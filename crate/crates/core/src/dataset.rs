//! Synthetic datasets: generation from the multipath oracle, and the on-disk
//! layout (`manifest.txt`, `index.csv`, `spectra/*.wspc`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::kv::{self, parse_num};
use crate::oracle::{self, ArrayGeometry, MultipathScene, SpatialSpectrum};
use crate::projection::RxPose;
use crate::scene::Bounds;
use crate::tasks::{TaskKind, CSI_HALF};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const INDEX_FILE: &str = "index.csv";

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub task: TaskKind,
    pub room: [f64; 3],
    /// Real reflection coefficient per wall, order x0 x1 y0 y1 z0 z1.
    pub gamma: [f64; 6],
    pub order: usize,
    pub rx: [f64; 3],
    /// Receiver rotation about the room z axis.
    pub rx_yaw_deg: f64,
    pub wavelength: f64,
    pub array_k: usize,
    pub array_spacing: f64,
    pub spectrum_h: usize,
    pub spectrum_w: usize,
    pub csi_center: f64,
    pub csi_spacing: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Minimum TX clearance from every wall.
    pub margin: f64,
    pub min_rx_distance: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Spectrum,
            room: [6.0, 4.0, 3.0],
            gamma: [0.5; 6],
            order: 2,
            rx: [3.0, 2.0, 0.5],
            rx_yaw_deg: 0.0,
            wavelength: 0.327,
            array_k: 4,
            array_spacing: 0.1635,
            spectrum_h: 90,
            spectrum_w: 360,
            csi_center: 2.4e9,
            csi_spacing: 312.5e3,
            n_train: 200,
            n_eval: 50,
            seed: 0,
            margin: 0.1,
            min_rx_distance: 0.3,
        }
    }
}

impl GenConfig {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "room",
        "gamma",
        "order",
        "rx",
        "rx.yaw_deg",
        "wavelength",
        "array.k",
        "array.spacing",
        "spectrum.height",
        "spectrum.width",
        "csi.center",
        "csi.spacing",
        "n_train",
        "n_eval",
        "seed",
        "margin",
        "min_rx_distance",
    ];

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "task" => self.task = TaskKind::parse(v).ok_or_else(|| format!("unknown task {v:?}"))?,
            "room" => self.room = kv::parse_vec3(v)?,
            "gamma" => {
                let g: Vec<f64> = kv::parse_list(v)?;
                self.gamma = match g.len() {
                    1 => [g[0]; 6],
                    6 => g.try_into().unwrap(),
                    _ => return Err("gamma takes one value or six".into()),
                }
            }
            "order" => self.order = parse_num(v)?,
            "rx" => self.rx = kv::parse_vec3(v)?,
            "rx.yaw_deg" => self.rx_yaw_deg = parse_num(v)?,
            "wavelength" => self.wavelength = parse_num(v)?,
            "array.k" => self.array_k = parse_num(v)?,
            "array.spacing" => self.array_spacing = parse_num(v)?,
            "spectrum.height" => self.spectrum_h = parse_num(v)?,
            "spectrum.width" => self.spectrum_w = parse_num(v)?,
            "csi.center" => self.csi_center = parse_num(v)?,
            "csi.spacing" => self.csi_spacing = parse_num(v)?,
            "n_train" => self.n_train = parse_num(v)?,
            "n_eval" => self.n_eval = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "margin" => self.margin = parse_num(v)?,
            "min_rx_distance" => self.min_rx_distance = parse_num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "task" => self.task.name().into(),
            "room" => kv::join(&self.room),
            "gamma" => kv::join(&self.gamma),
            "order" => self.order.to_string(),
            "rx" => kv::join(&self.rx),
            "rx.yaw_deg" => self.rx_yaw_deg.to_string(),
            "wavelength" => self.wavelength.to_string(),
            "array.k" => self.array_k.to_string(),
            "array.spacing" => self.array_spacing.to_string(),
            "spectrum.height" => self.spectrum_h.to_string(),
            "spectrum.width" => self.spectrum_w.to_string(),
            "csi.center" => self.csi_center.to_string(),
            "csi.spacing" => self.csi_spacing.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "seed" => self.seed.to_string(),
            "margin" => self.margin.to_string(),
            "min_rx_distance" => self.min_rx_distance.to_string(),
            _ => unreachable!("key list and accessors out of sync"),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text, origin)? {
            cfg.set(&e.key, &e.value).map_err(|m| kv::error(origin, e.line, m))?;
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidInput(m) => kv::error(origin, 0, m),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene()?.validate()?;
        self.geometry()?;
        if self.n_train + self.n_eval == 0 {
            return Err(Error::invalid("dataset needs at least one record"));
        }
        if self.spectrum_h == 0 || self.spectrum_w == 0 || self.spectrum_w % 2 != 0 {
            return Err(Error::invalid("spectrum needs positive size and an even width"));
        }
        if !(self.csi_center > 0.0 && self.csi_spacing > 0.0 && self.csi_center > CSI_HALF as f64 * self.csi_spacing) {
            return Err(Error::invalid("subcarrier grid must be positive"));
        }
        if self.room.iter().any(|&e| !(e > 2.0 * self.margin)) || self.margin < 0.0 || self.min_rx_distance < 0.0 {
            return Err(Error::invalid("margin leaves no room for transmitters"));
        }
        Ok(())
    }

    pub fn rx_orientation(&self) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), self.rx_yaw_deg.to_radians()).matrix()
    }

    pub fn scene(&self) -> Result<MultipathScene> {
        let s = MultipathScene {
            room_extent: Vector3::from(self.room),
            reflection_coeff: self.gamma.map(|g| Complex64::new(g, 0.0)),
            max_reflection_order: self.order,
            rx_position: Vector3::from(self.rx),
            rx_orientation: self.rx_orientation(),
            wavelength: self.wavelength,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.array_k, self.array_spacing, self.wavelength)
    }

    pub fn rx_pose(&self) -> RxPose {
        RxPose { position: Vector3::from(self.rx), rotation: self.rx_orientation() }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::new(Vector3::zeros(), Vector3::from(self.room)).expect("validated room")
    }

    pub fn subcarriers(&self) -> Vec<f64> {
        oracle::subcarrier_grid(self.csi_center, self.csi_spacing, 2 * CSI_HALF)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Spectrum(SpatialSpectrum),
    Rssi(f64),
    /// Uplink then downlink, `2 * CSI_HALF` values.
    Csi(Vec<Complex64>),
}

impl Target {
    pub fn spectrum(&self) -> Option<&SpatialSpectrum> {
        match self {
            Target::Spectrum(s) => Some(s),
            _ => None,
        }
    }

    pub fn rssi(&self) -> Option<f64> {
        match self {
            Target::Rssi(v) => Some(*v),
            _ => None,
        }
    }

    pub fn csi(&self) -> Option<(&[Complex64], &[Complex64])> {
        match self {
            Target::Csi(v) => Some(v.split_at(CSI_HALF)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub split: Split,
    pub tx: Vector3<f64>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn task(&self) -> TaskKind {
        self.config.task
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Jittered grid over the room interior: one uniformly placed point per
/// cell, cells visited in seeded random order.
pub fn jittered_positions(cfg: &GenConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<Vector3<f64>>> {
    let lo = Vector3::repeat(cfg.margin);
    let ext = Vector3::from(cfg.room) - 2.0 * lo;
    let cell = (ext.product() / n.max(1) as f64).cbrt();
    let mut dims = ext.map(|e| ((e / cell).round() as usize).max(1));
    while dims.product() < n {
        let a = (0..3).max_by(|&a, &b| (ext[a] / dims[a] as f64).total_cmp(&(ext[b] / dims[b] as f64))).unwrap();
        dims[a] += 1;
    }
    let mut cells: Vec<usize> = (0..dims.product()).collect();
    cells.shuffle(rng);
    let step = ext.component_div(&dims.map(|d| d as f64));
    let rx = Vector3::from(cfg.rx);
    let mut out = Vec::with_capacity(n);
    for c in cells {
        if out.len() == n {
            break;
        }
        let idx = Vector3::new(c % dims.x, (c / dims.x) % dims.y, c / (dims.x * dims.y)).map(|v| v as f64);
        for _ in 0..16 {
            let u = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let p = lo + (idx + u).component_mul(&step);
            if (p - rx).norm() >= cfg.min_rx_distance {
                out.push(p);
                break;
            }
        }
    }
    if out.len() < n {
        return Err(Error::invalid(format!("could only place {} of {n} transmitters", out.len())));
    }
    Ok(out)
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_train + cfg.n_eval;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positions = jittered_positions(cfg, n, &mut rng)?;
    let scene = cfg.scene()?;
    let geom = cfg.geometry()?;
    let subcarriers = cfg.subcarriers();
    let targets: Vec<Target> = positions
        .par_iter()
        .map(|tx| {
            Ok(match cfg.task {
                TaskKind::Spectrum => {
                    let s = oracle::ground_truth_spectrum_sized(&scene, &geom, tx, cfg.spectrum_h, cfg.spectrum_w)?;
                    // Stored as f32; keep the in-memory copy identical to a reload.
                    Target::Spectrum(SpatialSpectrum { values: s.values.iter().map(|&v| v as f32 as f64).collect(), ..s })
                }
                TaskKind::Rssi => Target::Rssi(oracle::ground_truth_rssi(&scene, tx)?),
                TaskKind::Csi => Target::Csi(oracle::ground_truth_csi(&scene, tx, &subcarriers)?),
            })
        })
        .collect::<Result<_>>()?;
    let records = positions
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(id, (tx, target))| Record { id, split: if id < cfg.n_train { Split::Train } else { Split::Eval }, tx, target })
        .collect();
    Ok(Dataset { config: cfg.clone(), records })
}

fn spectrum_file(id: usize) -> String {
    format!("spectra/{id:05}.wspc")
}

fn index_header(task: TaskKind) -> String {
    let mut h = "id,split,tx_x,tx_y,tx_z".to_string();
    match task {
        TaskKind::Spectrum => h.push_str(",spectrum_file"),
        TaskKind::Rssi => h.push_str(",rssi_db"),
        TaskKind::Csi => {
            for k in 0..2 * CSI_HALF {
                write!(h, ",re_{k},im_{k}").unwrap();
            }
        }
    }
    h
}

/// Serialized files in write order, paths relative to the dataset root.
pub fn encode(ds: &Dataset) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut index = index_header(ds.task());
    index.push('\n');
    for r in &ds.records {
        write!(index, "{},{},{},{},{}", r.id, r.split.name(), r.tx.x, r.tx.y, r.tx.z).unwrap();
        match &r.target {
            Target::Spectrum(s) => {
                let name = spectrum_file(r.id);
                write!(index, ",{name}").unwrap();
                files.push((name, io::encode_spectrum(s)));
            }
            Target::Rssi(v) => write!(index, ",{v}").unwrap(),
            Target::Csi(v) => {
                for z in v {
                    write!(index, ",{},{}", z.re, z.im).unwrap();
                }
            }
        }
        index.push('\n');
    }
    files.insert(0, (INDEX_FILE.to_string(), index.into_bytes()));
    let mut manifest = format!("# wrfgs dataset\nversion = {MANIFEST_VERSION}\n");
    manifest.push_str(&ds.config.to_text());
    writeln!(manifest, "record_count = {}", ds.records.len()).unwrap();
    for (name, bytes) in &files {
        writeln!(manifest, "file.{name} = {}", io::sha256_hex(bytes)).unwrap();
    }
    files.push((MANIFEST_FILE.to_string(), manifest.into_bytes()));
    files
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    for (name, bytes) in encode(ds) {
        io::write_file(&dir.join(name), &bytes)?;
    }
    Ok(())
}

/// Loads a dataset, verifying every file hash listed in the manifest.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let origin = manifest_path.display().to_string();
    let text = io::read_text(&manifest_path)?;
    let mut gen_text = String::new();
    let mut files = Vec::new();
    let mut version = None;
    let mut count = None;
    for e in kv::parse(&text, &origin)? {
        let err = |m: String| kv::error(&origin, e.line, m);
        if let Some(name) = e.key.strip_prefix("file.") {
            files.push((name.to_string(), e.value.clone()));
        } else if e.key == "version" {
            version = Some(parse_num::<u32>(&e.value).map_err(err)?);
        } else if e.key == "record_count" {
            count = Some(parse_num::<usize>(&e.value).map_err(err)?);
        } else {
            // Keep line numbers aligned for error messages.
            while gen_text.lines().count() + 1 < e.line {
                gen_text.push('\n');
            }
            writeln!(gen_text, "{} = {}", e.key, e.value).unwrap();
        }
    }
    if version != Some(MANIFEST_VERSION) {
        return Err(Error::corrupt(&manifest_path, format!("unsupported manifest version {version:?}")));
    }
    let config = GenConfig::parse(&gen_text, &origin)?;
    let mut contents = std::collections::HashMap::new();
    for (name, hash) in &files {
        let path = dir.join(name);
        let bytes = io::read_file(&path)?;
        if io::sha256_hex(&bytes) != *hash {
            return Err(Error::corrupt(&path, "content hash does not match the manifest"));
        }
        contents.insert(name.clone(), bytes);
    }
    let index_path = dir.join(INDEX_FILE);
    let index = contents.get(INDEX_FILE).ok_or_else(|| Error::corrupt(&manifest_path, "index.csv is not listed"))?;
    let index = std::str::from_utf8(index).map_err(|_| Error::corrupt(&index_path, "not UTF-8"))?;
    let mut lines = index.lines();
    if lines.next() != Some(index_header(config.task).as_str()) {
        return Err(Error::corrupt(&index_path, "unexpected header"));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |m: &str| Error::corrupt(&index_path, format!("row {}: {m}", n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> { cols.get(i).and_then(|c| c.parse().ok()).ok_or_else(|| bad("bad number")) };
        let id: usize = cols[0].parse().map_err(|_| bad("bad id"))?;
        let split = cols.get(1).and_then(|s| Split::parse(s)).ok_or_else(|| bad("bad split"))?;
        let tx = Vector3::new(num(2)?, num(3)?, num(4)?);
        let target = match config.task {
            TaskKind::Spectrum => {
                let name = cols.get(5).ok_or_else(|| bad("missing spectrum file"))?;
                let bytes = contents.get(*name).ok_or_else(|| bad("spectrum file not listed in the manifest"))?;
                let s = io::decode_spectrum(bytes, &dir.join(name))?;
                if (s.h, s.w) != (config.spectrum_h, config.spectrum_w) || !s.is_valid() {
                    return Err(bad("spectrum has the wrong shape or invalid values"));
                }
                Target::Spectrum(s)
            }
            TaskKind::Rssi => Target::Rssi(num(5)?),
            TaskKind::Csi => {
                if cols.len() != 5 + 4 * CSI_HALF {
                    return Err(bad("wrong number of CSI columns"));
                }
                Target::Csi((0..2 * CSI_HALF).map(|k| Ok(Complex64::new(num(5 + 2 * k)?, num(6 + 2 * k)?))).collect::<Result<_>>()?)
            }
        };
        if id != records.len() {
            return Err(bad("ids must be consecutive from 0"));
        }
        records.push(Record { id, split, tx, target });
    }
    if count != Some(records.len()) {
        return Err(Error::corrupt(&manifest_path, "record_count does not match the index"));
    }
    Ok(Dataset { config, records })
}
