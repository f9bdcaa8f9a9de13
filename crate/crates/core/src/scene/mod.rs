//! The trainable world model: Gaussian attributes plus either the WRF-GS
//! scenario network (attenuation + signal MLPs) or the WRF-GS+ deformation
//! network, all stored in one [`ParamStore`].

mod density;

pub use density::{densify_and_prune, DensifyConfig, DensifyReport, GradStats};

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;

use crate::em::{self, Quat};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, MlpSpec, OutputInit};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::projection::RxPose;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    WrfGs,
    WrfGsPlus,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::WrfGs => "wrfgs",
            Pipeline::WrfGsPlus => "wrfgsplus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wrfgs" => Some(Pipeline::WrfGs),
            "wrfgsplus" => Some(Pipeline::WrfGsPlus),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningKind {
    TxPosition,
    UplinkCsi,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditioningInput {
    TxPosition(Vector3<f64>),
    UplinkCsi(Vec<Complex64>),
}

impl ConditioningInput {
    pub fn kind(&self) -> ConditioningKind {
        match self {
            ConditioningInput::TxPosition(_) => ConditioningKind::TxPosition,
            ConditioningInput::UplinkCsi(_) => ConditioningKind::UplinkCsi,
        }
    }

    /// Raw vector fed to the positional encoding: the TX position mapped to
    /// `[-1, 1]` by the scene bounds, or the CSI flattened as `(re, im)`.
    pub fn raw(&self, bounds: &Bounds) -> Vec<f64> {
        match self {
            ConditioningInput::TxPosition(p) => bounds.normalize(p).iter().copied().collect(),
            ConditioningInput::UplinkCsi(v) => v.iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }
}

/// Axis-aligned box used for initialization and input normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::invalid("bounds must have positive extent"));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let e = self.extent();
        Vector3::new(
            2.0 * (p.x - self.min.x) / e.x - 1.0,
            2.0 * (p.y - self.min.y) / e.y - 1.0,
            2.0 * (p.z - self.min.z) / e.z - 1.0,
        )
    }

    /// `d normalize / d p` per axis.
    pub fn normalize_scale(&self) -> Vector3<f64> {
        let e = self.extent();
        Vector3::new(2.0 / e.x, 2.0 / e.y, 2.0 / e.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub pipeline: Pipeline,
    pub d_sig: usize,
    pub conditioning: ConditioningKind,
    pub encoding_order: usize,
    pub mlp1_width: usize,
    pub mlp1_depth: usize,
    pub feature_width: usize,
    pub mlp2_hidden: Vec<usize>,
    pub deform_width: usize,
    pub deform_depth: usize,
    /// Hidden layer (0-based) that re-receives the encoded inputs.
    pub deform_skip: usize,
    /// Initial magnitude of static signals and bound of the signal head.
    pub signal_init: f64,
}

impl ModelConfig {
    pub fn new(pipeline: Pipeline, d_sig: usize, conditioning: ConditioningKind) -> Self {
        Self {
            pipeline,
            d_sig,
            conditioning,
            encoding_order: 9,
            mlp1_width: 128,
            mlp1_depth: 8,
            feature_width: 128,
            mlp2_hidden: vec![128, 64],
            deform_width: 256,
            deform_depth: 8,
            deform_skip: 4,
            signal_init: 0.3,
        }
    }

    pub fn cond_raw_dim(&self) -> usize {
        match self.conditioning {
            ConditioningKind::TxPosition => 3,
            ConditioningKind::UplinkCsi => 2 * self.d_sig,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_sig == 0 {
            return Err(Error::invalid("d_sig must be positive"));
        }
        if self.encoding_order == 0 || self.encoding_order > 20 {
            return Err(Error::invalid("encoding order must be in [1, 20]"));
        }
        if self.mlp1_width == 0 || self.mlp1_depth == 0 || self.feature_width == 0 || self.mlp2_hidden.iter().any(|&w| w == 0)
        {
            return Err(Error::invalid("network widths must be positive"));
        }
        if self.deform_width == 0 || self.deform_depth == 0 || self.deform_skip >= self.deform_depth {
            return Err(Error::invalid("deformation network needs positive width and a skip inside its depth"));
        }
        Ok(())
    }

    fn mlp1_spec(&self) -> MlpSpec {
        MlpSpec {
            row_in: em::encoded_len(3, self.encoding_order),
            shared_in: 0,
            hidden: vec![self.mlp1_width; self.mlp1_depth],
            out: 2 + self.feature_width,
            skip: None,
        }
    }

    fn mlp2_spec(&self) -> MlpSpec {
        MlpSpec {
            row_in: self.feature_width,
            shared_in: em::encoded_len(self.cond_raw_dim(), self.encoding_order),
            hidden: self.mlp2_hidden.clone(),
            out: 2 * self.d_sig,
            skip: None,
        }
    }

    fn deform_spec(&self) -> MlpSpec {
        MlpSpec {
            row_in: em::encoded_len(3, self.encoding_order),
            shared_in: em::encoded_len(self.cond_raw_dim(), self.encoding_order),
            hidden: vec![self.deform_width; self.deform_depth],
            out: 2 * self.d_sig + 4 + 3,
            skip: Some(self.deform_skip),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Networks {
    WrfGs { mlp1: Mlp, mlp2: Mlp },
    WrfGsPlus { deform: Mlp },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributeIds {
    pub mu: ParamId,
    pub rot: ParamId,
    pub log_scale: ParamId,
    /// WRF-GS+ only.
    pub opacity: Option<ParamId>,
    /// WRF-GS+ only: `n x 2 d_sig` interleaved `(re, im)`.
    pub signal: Option<ParamId>,
    pub calibration: ParamId,
}

pub const PARAM_MU: &str = "gaussian.mu";
pub const PARAM_ROT: &str = "gaussian.rot";
pub const PARAM_LOG_SCALE: &str = "gaussian.log_scale";
pub const PARAM_OPACITY: &str = "gaussian.opacity_logit";
pub const PARAM_SIGNAL: &str = "gaussian.signal";
pub const PARAM_CALIBRATION: &str = "rssi.calibration";

#[derive(Clone, Debug, PartialEq)]
pub struct WrfModel {
    pub config: ModelConfig,
    pub bounds: Bounds,
    pub rx: RxPose,
    pub store: ParamStore,
    pub ids: AttributeIds,
    pub nets: Networks,
}

/// Per-Gaussian attributes after the network pass, plus saved activations.
#[derive(Clone, Debug)]
pub struct SceneForward {
    pub n: usize,
    pub mu: Vec<Vector3<f64>>,
    /// Raw (unnormalized) rotation after deformation.
    pub rot: Vec<Quat>,
    pub log_scale: Vec<[f64; 3]>,
    /// Opacity in (0, 1); WRF-GS fills ones.
    pub opacity: Vec<f64>,
    /// `n x d_sig`.
    pub signal: Vec<Complex64>,
    /// WRF-GS attenuation; WRF-GS+ fills ones.
    pub attenuation: Vec<Complex64>,
    enc_mu: Vec<f64>,
    enc_cond: Vec<f64>,
    caches: ForwardCaches,
}

#[derive(Clone, Debug)]
enum ForwardCaches {
    WrfGs { mlp1: MlpCache, mlp2: MlpCache, head: Vec<[f64; 2]> },
    WrfGsPlus { deform: MlpCache },
}

/// Gradients with respect to the [`SceneForward`] outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrads {
    pub mu: Vec<Vector3<f64>>,
    pub rot: Vec<Quat>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub signal: Vec<Complex64>,
    pub attenuation: Vec<Complex64>,
}

impl SceneGrads {
    pub fn zeros(n: usize, d_sig: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            signal: vec![Complex64::new(0.0, 0.0); n * d_sig],
            attenuation: vec![Complex64::new(0.0, 0.0); n],
        }
    }
}

/// Mean distance from each point to its `k` nearest neighbours.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let take = k.min(d.len());
            if take == 0 {
                1.0
            } else {
                d[..take].iter().sum::<f64>() / take as f64
            }
        })
        .collect()
}

pub const INIT_OPACITY: f64 = 0.1;

impl WrfModel {
    /// Random initialization: centers uniform in `bounds`, isotropic scales
    /// from the 3-nearest-neighbour distance, opacity 0.1, identity
    /// rotations. WRF-GS+ static signals start with magnitude
    /// `signal_init` and uniform random phase; the WRF-GS signal head is
    /// uniform in `+-signal_init`. The attenuation head and the deformation
    /// output layer start at zero.
    pub fn init_random(config: ModelConfig, bounds: Bounds, rx: RxPose, n: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::invalid("need at least one gaussian"));
        }
        let mut store = ParamStore::new();
        let centers: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(bounds.min.x..bounds.max.x),
                    rng.gen_range(bounds.min.y..bounds.max.y),
                    rng.gen_range(bounds.min.z..bounds.max.z),
                )
            })
            .collect();
        let scales = mean_knn_distance(&centers, 3);
        let mu = store.add(PARAM_MU, n, 3, ParamGroup::Position, true, centers.iter().flat_map(|c| [c.x, c.y, c.z]).collect());
        let rot = store.add(PARAM_ROT, n, 4, ParamGroup::Rotation, true, (0..n).flat_map(|_| em::QUAT_IDENTITY).collect());
        let log_scale = store.add(
            PARAM_LOG_SCALE,
            n,
            3,
            ParamGroup::Scale,
            true,
            scales.iter().flat_map(|s| [s.ln(); 3]).collect(),
        );
        let (opacity, signal) = match config.pipeline {
            Pipeline::WrfGs => (None, None),
            Pipeline::WrfGsPlus => {
                let o = store.add(PARAM_OPACITY, n, 1, ParamGroup::Opacity, true, vec![em::logit(INIT_OPACITY); n]);
                let d = config.d_sig;
                let mut sig = Vec::with_capacity(n * 2 * d);
                for _ in 0..n * d {
                    let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let z = Complex64::from_polar(config.signal_init, phase);
                    sig.push(z.re);
                    sig.push(z.im);
                }
                (Some(o), Some(store.add(PARAM_SIGNAL, n, 2 * d, ParamGroup::Signal, true, sig)))
            }
        };
        let calibration = store.add(PARAM_CALIBRATION, 1, 1, ParamGroup::Calibration, false, vec![0.0]);
        let nets = match config.pipeline {
            Pipeline::WrfGs => Networks::WrfGs {
                mlp1: Mlp::register(&mut store, "mlp1", config.mlp1_spec(), OutputInit::Zero, rng),
                mlp2: Mlp::register(&mut store, "mlp2", config.mlp2_spec(), OutputInit::Uniform(config.signal_init), rng),
            },
            Pipeline::WrfGsPlus => Networks::WrfGsPlus {
                deform: Mlp::register(&mut store, "deform", config.deform_spec(), OutputInit::Zero, rng),
            },
        };
        let ids = AttributeIds { mu, rot, log_scale, opacity, signal, calibration };
        Ok(Self { config, bounds, rx, store, ids, nets })
    }

    /// Rebuilds handles after the store was loaded from disk.
    pub fn from_store(config: ModelConfig, bounds: Bounds, rx: RxPose, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let optional = |name: &str| store.find(name);
        let ids = AttributeIds {
            mu: store.id(PARAM_MU)?,
            rot: store.id(PARAM_ROT)?,
            log_scale: store.id(PARAM_LOG_SCALE)?,
            opacity: optional(PARAM_OPACITY),
            signal: optional(PARAM_SIGNAL),
            calibration: store.id(PARAM_CALIBRATION)?,
        };
        let nets = match config.pipeline {
            Pipeline::WrfGs => Networks::WrfGs {
                mlp1: Mlp::attach(&store, "mlp1", config.mlp1_spec())?,
                mlp2: Mlp::attach(&store, "mlp2", config.mlp2_spec())?,
            },
            Pipeline::WrfGsPlus => {
                if ids.opacity.is_none() || ids.signal.is_none() {
                    return Err(Error::invalid("WRF-GS+ store lacks opacity or signal attributes"));
                }
                Networks::WrfGsPlus { deform: Mlp::attach(&store, "deform", config.deform_spec())? }
            }
        };
        Ok(Self { config, bounds, rx, store, ids, nets })
    }

    pub fn gaussian_count(&self) -> usize {
        self.store.get(self.ids.mu).rows
    }

    pub fn calibration(&self) -> f64 {
        self.store.value(self.ids.calibration)[0]
    }

    pub fn set_calibration(&mut self, b: f64) {
        self.store.get_mut(self.ids.calibration).value[0] = b;
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.store.value(self.ids.mu).chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
    }

    /// Static attributes of Gaussian `i` as a primitive (WRF-GS signals and
    /// attenuation are network outputs and are left empty here).
    pub fn primitive(&self, i: usize) -> em::GaussianPrimitive {
        let p = &self.store;
        let mu = p.get(self.ids.mu).row(i);
        let r = p.get(self.ids.rot).row(i);
        let s = p.get(self.ids.log_scale).row(i);
        em::GaussianPrimitive {
            mu: Vector3::new(mu[0], mu[1], mu[2]),
            rot: em::quat_normalize(&[r[0], r[1], r[2], r[3]]),
            log_scale: [s[0], s[1], s[2]],
            opacity_logit: self.ids.opacity.map_or(f64::INFINITY, |o| p.get(o).value[i]),
            static_signal: self
                .ids
                .signal
                .map(|id| p.get(id).row(i).chunks(2).map(|c| Complex64::new(c[0], c[1])).collect())
                .unwrap_or_default(),
            attenuation: None,
        }
    }

    fn encode_centers(&self, mu: &[Vector3<f64>]) -> Vec<f64> {
        let order = self.config.encoding_order;
        let len = em::encoded_len(3, order);
        let mut out = vec![0.0; mu.len() * len];
        for (c, chunk) in mu.iter().zip(out.chunks_mut(len)) {
            let t = self.bounds.normalize(c);
            em::positional_encode_into(t.as_slice(), order, chunk);
        }
        out
    }

    pub fn encode_conditioning(&self, cond: &ConditioningInput) -> Result<Vec<f64>> {
        if cond.kind() != self.config.conditioning {
            return Err(Error::invalid("conditioning kind does not match the model"));
        }
        let raw = cond.raw(&self.bounds);
        if raw.len() != self.config.cond_raw_dim() {
            return Err(Error::invalid(format!(
                "conditioning has {} values, model expects {}",
                raw.len(),
                self.config.cond_raw_dim()
            )));
        }
        Ok(em::positional_encode(&raw, self.config.encoding_order))
    }

    /// Network pass for one conditioning input.
    pub fn forward(&self, cond: &ConditioningInput) -> Result<SceneForward> {
        let n = self.gaussian_count();
        let d = self.config.d_sig;
        let mu = self.centers();
        let rot_raw: Vec<Quat> = self.store.value(self.ids.rot).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let log_scale: Vec<[f64; 3]> = self.store.value(self.ids.log_scale).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let enc_mu = self.encode_centers(&mu);
        let enc_cond = self.encode_conditioning(cond)?;
        match &self.nets {
            Networks::WrfGs { mlp1, mlp2 } => {
                let c1 = mlp1.forward(&self.store, &enc_mu, n, &[]);
                let width = mlp1.spec.out;
                let fw = self.config.feature_width;
                let mut feature = vec![0.0; n * fw];
                let mut head = Vec::with_capacity(n);
                let mut attenuation = Vec::with_capacity(n);
                for (i, row) in c1.out.chunks(width).enumerate() {
                    head.push([row[0], row[1]]);
                    attenuation.push(attenuation_activation(row[0], row[1]));
                    feature[i * fw..(i + 1) * fw].copy_from_slice(&row[2..]);
                }
                let c2 = mlp2.forward(&self.store, &feature, n, &enc_cond);
                let signal = c2.out.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
                Ok(SceneForward {
                    n,
                    mu,
                    rot: rot_raw,
                    log_scale,
                    opacity: vec![1.0; n],
                    signal,
                    attenuation,
                    enc_mu,
                    enc_cond,
                    caches: ForwardCaches::WrfGs { mlp1: c1, mlp2: c2, head },
                })
            }
            Networks::WrfGsPlus { deform } => {
                let cache = deform.forward(&self.store, &enc_mu, n, &enc_cond);
                let width = deform.spec.out;
                let stat = self.store.value(self.ids.signal.expect("WRF-GS+ signal"));
                let logits = self.store.value(self.ids.opacity.expect("WRF-GS+ opacity"));
                let mut signal = Vec::with_capacity(n * d);
                let mut rot = Vec::with_capacity(n);
                let mut ls = Vec::with_capacity(n);
                for (i, row) in cache.out.chunks(width).enumerate() {
                    for c in 0..d {
                        signal.push(Complex64::new(
                            stat[i * 2 * d + 2 * c] + row[2 * c],
                            stat[i * 2 * d + 2 * c + 1] + row[2 * c + 1],
                        ));
                    }
                    let q = rot_raw[i];
                    let o = 2 * d;
                    rot.push([q[0] + row[o], q[1] + row[o + 1], q[2] + row[o + 2], q[3] + row[o + 3]]);
                    let s = log_scale[i];
                    ls.push([s[0] + row[o + 4], s[1] + row[o + 5], s[2] + row[o + 6]]);
                }
                Ok(SceneForward {
                    n,
                    mu,
                    rot,
                    log_scale: ls,
                    opacity: logits.iter().map(|&l| em::sigmoid(l)).collect(),
                    signal,
                    attenuation: vec![Complex64::new(1.0, 0.0); n],
                    enc_mu,
                    enc_cond,
                    caches: ForwardCaches::WrfGsPlus { deform: cache },
                })
            }
        }
    }

    /// Accumulates parameter gradients for one forward pass.
    pub fn backward(&mut self, fwd: &SceneForward, grads: &SceneGrads) {
        let n = fwd.n;
        let d = self.config.d_sig;
        let order = self.config.encoding_order;
        let enc_len = em::encoded_len(3, order);
        let mut d_mu: Vec<Vector3<f64>> = grads.mu.clone();

        let mut d_enc_mu = match (&self.nets, &fwd.caches) {
            (Networks::WrfGs { mlp1, mlp2 }, ForwardCaches::WrfGs { mlp1: c1, mlp2: c2, head }) => {
                let (mlp1, mlp2) = (mlp1.clone(), mlp2.clone());
                let d_sig_out: Vec<f64> = grads.signal.iter().flat_map(|z| [z.re, z.im]).collect();
                let fw = self.config.feature_width;
                let mut feature = vec![0.0; n * fw];
                let width = mlp1.spec.out;
                for (i, row) in c1.out.chunks(width).enumerate() {
                    feature[i * fw..(i + 1) * fw].copy_from_slice(&row[2..]);
                }
                let d_feature = mlp2.backward(&mut self.store, &feature, &fwd.enc_cond, c2, &d_sig_out);
                let mut d_out1 = vec![0.0; n * width];
                for i in 0..n {
                    let (da, db) = attenuation_activation_backward(head[i][0], head[i][1], grads.attenuation[i]);
                    d_out1[i * width] = da;
                    d_out1[i * width + 1] = db;
                    d_out1[i * width + 2..(i + 1) * width].copy_from_slice(&d_feature[i * fw..(i + 1) * fw]);
                }
                mlp1.backward(&mut self.store, &fwd.enc_mu, &[], c1, &d_out1)
            }
            (Networks::WrfGsPlus { deform }, ForwardCaches::WrfGsPlus { deform: cache }) => {
                let deform = deform.clone();
                let width = deform.spec.out;
                let mut d_out = vec![0.0; n * width];
                let sig_id = self.ids.signal.expect("WRF-GS+ signal");
                let op_id = self.ids.opacity.expect("WRF-GS+ opacity");
                let rot_id = self.ids.rot;
                let ls_id = self.ids.log_scale;
                for i in 0..n {
                    let row = &mut d_out[i * width..(i + 1) * width];
                    for c in 0..d {
                        let g = grads.signal[i * d + c];
                        row[2 * c] = g.re;
                        row[2 * c + 1] = g.im;
                    }
                    row[2 * d..2 * d + 4].copy_from_slice(&grads.rot[i]);
                    row[2 * d + 4..2 * d + 7].copy_from_slice(&grads.log_scale[i]);
                }
                {
                    let g = self.store.grad_mut(sig_id);
                    for i in 0..n {
                        for c in 0..d {
                            let z = grads.signal[i * d + c];
                            g[i * 2 * d + 2 * c] += z.re;
                            g[i * 2 * d + 2 * c + 1] += z.im;
                        }
                    }
                }
                {
                    let g = self.store.grad_mut(op_id);
                    for i in 0..n {
                        let o = fwd.opacity[i];
                        g[i] += grads.opacity[i] * o * (1.0 - o);
                    }
                }
                self.accumulate_rows(rot_id, 4, grads.rot.iter().map(|r| r.as_slice()));
                self.accumulate_rows(ls_id, 3, grads.log_scale.iter().map(|r| r.as_slice()));
                deform.backward(&mut self.store, &fwd.enc_mu, &fwd.enc_cond, cache, &d_out)
            }
            _ => unreachable!("forward caches do not match the network variant"),
        };

        if let Networks::WrfGs { .. } = self.nets {
            let rot_id = self.ids.rot;
            let ls_id = self.ids.log_scale;
            self.accumulate_rows(rot_id, 4, grads.rot.iter().map(|r| r.as_slice()));
            self.accumulate_rows(ls_id, 3, grads.log_scale.iter().map(|r| r.as_slice()));
        }

        let scale = self.bounds.normalize_scale();
        for i in 0..n {
            let t = self.bounds.normalize(&fwd.mu[i]);
            let mut d_t = [0.0; 3];
            em::positional_encode_backward(t.as_slice(), order, &d_enc_mu[i * enc_len..(i + 1) * enc_len], &mut d_t);
            for a in 0..3 {
                d_mu[i][a] += d_t[a] * scale[a];
            }
        }
        d_enc_mu.clear();
        let mu_id = self.ids.mu;
        let g = self.store.grad_mut(mu_id);
        for i in 0..n {
            for a in 0..3 {
                g[i * 3 + a] += d_mu[i][a];
            }
        }
    }

    fn accumulate_rows<'a>(&mut self, id: ParamId, cols: usize, rows: impl Iterator<Item = &'a [f64]>) {
        let g = self.store.grad_mut(id);
        for (i, r) in rows.enumerate() {
            for c in 0..cols {
                g[i * cols + c] += r[c];
            }
        }
    }
}

/// `delta = sigmoid(a) * exp(i pi tanh(b))`.
pub fn attenuation_activation(a: f64, b: f64) -> Complex64 {
    Complex64::from_polar(em::sigmoid(a), std::f64::consts::PI * b.tanh())
}

fn attenuation_activation_backward(a: f64, b: f64, g: Complex64) -> (f64, f64) {
    let s = em::sigmoid(a);
    let th = b.tanh();
    let phase = Complex64::from_polar(1.0, std::f64::consts::PI * th);
    let d_a = phase * (s * (1.0 - s));
    let d_b = phase * Complex64::new(0.0, s * std::f64::consts::PI * (1.0 - th * th));
    ((g.conj() * d_a).re, (g.conj() * d_b).re)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config(pipeline: Pipeline, d_sig: usize, cond: ConditioningKind) -> ModelConfig {
        ModelConfig {
            mlp1_width: 16,
            mlp1_depth: 3,
            feature_width: 8,
            mlp2_hidden: vec![12, 6],
            deform_width: 16,
            deform_depth: 4,
            deform_skip: 2,
            encoding_order: 3,
            ..ModelConfig::new(pipeline, d_sig, cond)
        }
    }

    fn bounds() -> Bounds {
        Bounds::new(Vector3::zeros(), Vector3::new(6.0, 4.0, 3.0)).unwrap()
    }

    fn model(pipeline: Pipeline, seed: u64) -> WrfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rx = RxPose::identity_at(Vector3::new(3.0, 2.0, 0.5));
        WrfModel::init_random(small_config(pipeline, 1, ConditioningKind::TxPosition), bounds(), rx, 24, &mut rng).unwrap()
    }

    #[test]
    fn knn_scale_on_collinear_points() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let d = mean_knn_distance(&pts, 3);
        // the middle point has neighbours at 1 and 1 only
        assert_eq!(d[1], 1.0);
        assert_eq!(d[0], 1.5);
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let a = model(Pipeline::WrfGsPlus, 3);
        let b = model(Pipeline::WrfGsPlus, 3);
        assert_eq!(a, b);
        for i in 0..a.gaussian_count() {
            let p = a.primitive(i);
            assert!((0..3).all(|k| p.mu[k] >= 0.0 && p.mu[k] <= a.bounds.max[k]));
            assert!((em::quat_norm(&p.rot) - 1.0).abs() < 1e-6);
            assert!((p.opacity() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn deformation_zero_output_is_identity() {
        let m = model(Pipeline::WrfGsPlus, 5);
        let f = m.forward(&ConditioningInput::TxPosition(Vector3::new(1.0, 1.0, 1.0))).unwrap();
        for i in 0..m.gaussian_count() {
            let p = m.primitive(i);
            assert_eq!(f.signal[i], p.static_signal[0]);
            assert_eq!(f.log_scale[i], p.log_scale);
            let raw = m.store.get(m.ids.rot).row(i);
            assert_eq!(&f.rot[i][..], raw);
            assert_eq!(f.opacity[i], p.opacity());
        }
    }

    #[test]
    fn random_deformation_depends_on_conditioning() {
        let mut m = model(Pipeline::WrfGsPlus, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in m.store.params.iter_mut().filter(|p| p.name.starts_with("deform")) {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        let a = m.forward(&ConditioningInput::TxPosition(Vector3::new(1.0, 1.0, 1.0))).unwrap();
        let b = m.forward(&ConditioningInput::TxPosition(Vector3::new(4.0, 2.0, 2.0))).unwrap();
        assert!(a.signal.iter().zip(&b.signal).any(|(x, y)| x != y));
    }

    #[test]
    fn attenuation_depends_only_on_position() {
        let m = model(Pipeline::WrfGs, 7);
        let a = m.forward(&ConditioningInput::TxPosition(Vector3::new(1.0, 1.0, 1.0))).unwrap();
        let b = m.forward(&ConditioningInput::TxPosition(Vector3::new(5.0, 3.0, 2.0))).unwrap();
        assert_eq!(a.attenuation, b.attenuation);
        assert_ne!(a.signal, b.signal);
        // fresh attenuation head: sigmoid(0) with zero phase
        assert!(a.attenuation.iter().all(|z| (z - Complex64::new(0.5, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn zero_heads_give_half_attenuation_and_zero_signal() {
        let mut m = model(Pipeline::WrfGs, 8);
        for p in m.store.params.iter_mut().filter(|p| p.name.starts_with("mlp2.2.")) {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = m.forward(&ConditioningInput::TxPosition(Vector3::new(2.0, 2.0, 2.0))).unwrap();
        assert!(f.signal.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert!(f.attenuation.iter().all(|z| (z.norm() - 0.5).abs() < 1e-15));
    }

    #[test]
    fn conditioning_kind_is_checked() {
        let m = model(Pipeline::WrfGsPlus, 9);
        assert!(m.forward(&ConditioningInput::UplinkCsi(vec![Complex64::new(1.0, 0.0); 26])).is_err());
    }

    #[test]
    fn csi_conditioning_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rx = RxPose::identity_at(Vector3::new(3.0, 2.0, 0.5));
        let cfg = small_config(Pipeline::WrfGsPlus, 26, ConditioningKind::UplinkCsi);
        let m = WrfModel::init_random(cfg, bounds(), rx, 20, &mut rng).unwrap();
        let f = m.forward(&ConditioningInput::UplinkCsi(vec![Complex64::new(0.1, -0.2); 26])).unwrap();
        assert_eq!(f.signal.len(), 20 * 26);
    }

    fn scalar_loss(m: &WrfModel, cond: &ConditioningInput, w: &SceneGrads) -> f64 {
        let f = m.forward(cond).unwrap();
        let mut l = 0.0;
        for i in 0..f.n {
            l += f.mu[i].dot(&w.mu[i]);
            l += (0..4).map(|k| f.rot[i][k] * w.rot[i][k]).sum::<f64>();
            l += (0..3).map(|k| f.log_scale[i][k] * w.log_scale[i][k]).sum::<f64>();
            l += f.opacity[i] * w.opacity[i];
            l += (f.attenuation[i].conj() * w.attenuation[i]).re;
        }
        l + f.signal.iter().zip(&w.signal).map(|(a, b)| (a.conj() * b).re).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for pipeline in [Pipeline::WrfGs, Pipeline::WrfGsPlus] {
            let mut m = model(pipeline, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for p in m.store.params.iter_mut().filter(|p| !p.per_gaussian) {
                p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
            }
            let n = m.gaussian_count();
            let mut w = SceneGrads::zeros(n, 1);
            w.mu.iter_mut().for_each(|v| *v = Vector3::new(rng.gen(), rng.gen(), rng.gen()));
            w.rot.iter_mut().for_each(|v| *v = [rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            w.log_scale.iter_mut().for_each(|v| *v = [rng.gen(), rng.gen(), rng.gen()]);
            w.opacity.iter_mut().for_each(|v| *v = rng.gen());
            w.signal.iter_mut().for_each(|v| *v = Complex64::new(rng.gen(), rng.gen()));
            w.attenuation.iter_mut().for_each(|v| *v = Complex64::new(rng.gen(), rng.gen()));
            let cond = ConditioningInput::TxPosition(Vector3::new(1.5, 2.5, 1.0));
            let f = m.forward(&cond).unwrap();
            m.store.zero_grad();
            m.backward(&f, &w);
            let h = 1e-6;
            for _ in 0..60 {
                let (id, idx) = m.store.scalar_at(rng.gen_range(0..m.store.scalar_count()));
                let mut p = m.clone();
                let mut q = m.clone();
                p.store.get_mut(id).value[idx] += h;
                q.store.get_mut(id).value[idx] -= h;
                let fd = (scalar_loss(&p, &cond, &w) - scalar_loss(&q, &cond, &w)) / (2.0 * h);
                let an = m.store.get(id).grad[idx];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(1.0),
                    "{pipeline:?} {}[{idx}]: fd {fd} analytic {an}",
                    m.store.get(id).name
                );
            }
        }
    }
}
