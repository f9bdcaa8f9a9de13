use crate::em;
use crate::params::{ParamGroup, ParamStore};
use crate::scene::PARAM_ROT;

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub signal: f64,
    pub opacity: f64,
    pub rotation: f64,
    pub scale: f64,
    pub network: f64,
    pub calibration: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            signal: 2.5e-3,
            opacity: 5e-2,
            rotation: 1e-3,
            scale: 5e-3,
            network: 1e-4,
            calibration: 5e-2,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Position => self.position,
            ParamGroup::Signal => self.signal,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Network => self.network,
            ParamGroup::Calibration => self.calibration,
        }
    }

    pub fn all_positive(&self) -> bool {
        [self.position, self.signal, self.opacity, self.rotation, self.scale, self.network, self.calibration]
            .iter()
            .all(|&v| v > 0.0 && v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: LearningRates,
    /// Position learning rate decays exponentially to `lr * final_factor`
    /// at `total_steps`.
    pub position_final_factor: f64,
    pub total_steps: u64,
}

impl AdamConfig {
    pub fn new(lr: LearningRates, total_steps: u64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15, lr, position_final_factor: 0.01, total_steps }
    }

    pub fn position_lr(&self, step: u64) -> f64 {
        let t = if self.total_steps == 0 { 1.0 } else { (step as f64 / self.total_steps as f64).min(1.0) };
        self.lr.position * self.position_final_factor.powf(t)
    }
}

/// One Adam update over every parameter, then quaternion renormalization.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    let step = store.step_count;
    // powf rather than powi: powi's rounding depends on how it is lowered,
    // which would make results differ between builds.
    let t = (step + 1) as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for p in store.params.iter_mut() {
        let lr = match p.group {
            ParamGroup::Position => cfg.position_lr(step),
            g => cfg.lr.for_group(g),
        };
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if p.name == PARAM_ROT {
            for q in p.value.chunks_mut(4) {
                let n = em::quat_normalize(&[q[0], q[1], q[2], q[3]]);
                q.copy_from_slice(&n);
            }
        }
    }
    store.step_count += 1;
}
