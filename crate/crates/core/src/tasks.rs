//! Task adapters over a trained field: spectrum synthesis, RSSI and
//! uplink-to-downlink CSI prediction.

use nalgebra::Vector3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::oracle::{SpatialSpectrum, RSSI_FLOOR_DB};
use crate::pipeline;
use crate::scene::{ConditioningInput, ConditioningKind, WrfModel};
use crate::train::config::TrainConfig;

/// Subcarriers per CSI half (uplink or downlink).
pub const CSI_HALF: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Spectrum,
    Rssi,
    Csi,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Spectrum, TaskKind::Rssi, TaskKind::Csi];

    pub fn d_sig(self) -> usize {
        match self {
            TaskKind::Spectrum | TaskKind::Rssi => 1,
            TaskKind::Csi => CSI_HALF,
        }
    }

    pub fn conditioning(self) -> ConditioningKind {
        match self {
            TaskKind::Csi => ConditioningKind::UplinkCsi,
            _ => ConditioningKind::TxPosition,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Spectrum => "spectrum",
            TaskKind::Rssi => "rssi",
            TaskKind::Csi => "csi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn code(self) -> u8 {
        match self {
            TaskKind::Spectrum => 0,
            TaskKind::Rssi => 1,
            TaskKind::Csi => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == c)
    }
}

/// A trained field together with the settings it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub task: TaskKind,
    pub config: TrainConfig,
    pub model: WrfModel,
}

impl TrainedModel {
    fn expect(&self, task: TaskKind) -> Result<()> {
        if self.task != task {
            return Err(Error::invalid(format!(
                "checkpoint was trained for the {} task, not {}",
                self.task.name(),
                task.name()
            )));
        }
        Ok(())
    }
}

pub fn synthesize_spectrum(tm: &TrainedModel, tx: &Vector3<f64>) -> Result<SpatialSpectrum> {
    tm.expect(TaskKind::Spectrum)?;
    let f = pipeline::render_field(&tm.model, &ConditioningInput::TxPosition(*tx), &tm.config.render_options())?;
    Ok(pipeline::field_to_spectrum(&f.field, tm.config.quantity))
}

/// Calibrated RSSI before the floor is applied; the training target.
pub fn rssi_unclamped(tm: &TrainedModel, tx: &Vector3<f64>) -> Result<f64> {
    tm.expect(TaskKind::Rssi)?;
    let f = pipeline::render_field(&tm.model, &ConditioningInput::TxPosition(*tx), &tm.config.render_options())?;
    Ok(pipeline::field_power_db(&f.field, tm.config.rssi_coherent) + tm.model.calibration())
}

pub fn predict_rssi(tm: &TrainedModel, tx: &Vector3<f64>) -> Result<f64> {
    Ok(rssi_unclamped(tm, tx)?.max(RSSI_FLOOR_DB))
}

/// Complex scale that maps `uplink` to unit norm with a real first entry;
/// 1 for an all-zero uplink.
pub fn csi_reference(uplink: &[Complex64]) -> Complex64 {
    let norm = uplink.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Complex64::new(1.0, 0.0);
    }
    let phase = uplink.first().map_or(0.0, |z| if z.norm() > 0.0 { z.arg() } else { 0.0 });
    Complex64::from_polar(norm, phase)
}

pub fn scale_csi(values: &[Complex64], by: Complex64) -> Vec<Complex64> {
    values.iter().map(|z| z / by).collect()
}

/// Downlink prediction in the normalized frame of `uplink`.
pub fn predict_csi_normalized(tm: &TrainedModel, uplink_normalized: &[Complex64]) -> Result<Vec<Complex64>> {
    tm.expect(TaskKind::Csi)?;
    if uplink_normalized.len() != CSI_HALF {
        return Err(Error::invalid(format!("uplink has {} subcarriers, expected {CSI_HALF}", uplink_normalized.len())));
    }
    let f = pipeline::render_channels(&tm.model, &ConditioningInput::UplinkCsi(uplink_normalized.to_vec()))?;
    Ok(f.output)
}

pub fn predict_csi(tm: &TrainedModel, uplink: &[Complex64]) -> Result<Vec<Complex64>> {
    if uplink.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("uplink contains non-finite values"));
    }
    let r = csi_reference(uplink);
    let out = predict_csi_normalized(tm, &scale_csi(uplink, r))?;
    Ok(out.into_iter().map(|z| z * r).collect())
}
