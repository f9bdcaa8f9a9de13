use num_complex::Complex64;

use crate::error::{Error, Result};

/// Reported in place of an infinite CEA when the prediction is exact.
pub const CEA_CAP_DB: f64 = 300.0;

/// Channel estimation accuracy `-10 log10(|pred - gt|^2 / |gt|^2)`.
pub fn cea(pred: &[Complex64], gt: &[Complex64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("CEA inputs differ in length"));
    }
    let energy: f64 = gt.iter().map(|z| z.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::invalid("CEA undefined for an all-zero reference"));
    }
    let err: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_sqr()).sum();
    if err == 0.0 {
        return Ok(CEA_CAP_DB);
    }
    Ok((-10.0 * (err / energy).log10()).min(CEA_CAP_DB))
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the data at or below it.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.max(1) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self { median: percentile(values, 50.0)?, p10: percentile(values, 10.0)?, p90: percentile(values, 90.0)? })
    }
}

/// Per-record evaluation results; only the lists relevant to the task are
/// populated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub record_ids: Vec<usize>,
    pub ssim_per_sample: Vec<f64>,
    pub rssi_abs_error_db: Vec<f64>,
    pub cea_db: Vec<f64>,
}

impl MetricReport {
    pub fn primary(&self) -> &[f64] {
        if !self.ssim_per_sample.is_empty() {
            &self.ssim_per_sample
        } else if !self.rssi_abs_error_db.is_empty() {
            &self.rssi_abs_error_db
        } else {
            &self.cea_db
        }
    }

    pub fn metric_name(&self) -> &'static str {
        if !self.ssim_per_sample.is_empty() {
            "ssim"
        } else if !self.rssi_abs_error_db.is_empty() {
            "rssi_abs_error_db"
        } else {
            "cea_db"
        }
    }

    /// `id,<metric>` rows; values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", self.metric_name());
        for (id, v) in self.record_ids.iter().zip(self.primary()) {
            out.push_str(&format!("{id},{v}\n"));
        }
        out
    }

    /// Nearest-rank median, 10th and 90th percentiles of the primary metric.
    pub fn summary_text(&self) -> Result<String> {
        let s = Summary::of(self.primary()).ok_or_else(|| Error::invalid("no metric values to summarize"))?;
        Ok(format!(
            "metric = {}\ncount = {}\nmedian = {}\np10 = {}\np90 = {}\npercentile_method = nearest-rank\n",
            self.metric_name(),
            self.primary().len(),
            s.median,
            s.p10,
            s.p90
        ))
    }
}
