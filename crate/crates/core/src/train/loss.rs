use crate::error::{Error, Result};
use crate::oracle::SpatialSpectrum;
use crate::train::ssim::{ssim_with_grad_fixed_range, SsimOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumLoss {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Gradient with respect to `pred`, holding the SSIM dynamic range fixed.
    pub grad: Vec<f64>,
}

/// `(1 - eta) mean|gt - pred| + eta (1 - ssim(gt, pred))` with its gradient.
pub fn spectrum_loss(pred: &[f64], gt: &[f64], h: usize, w: usize, eta: f64, opts: SsimOptions) -> Result<SpectrumLoss> {
    if pred.len() != gt.len() || pred.len() != h * w {
        return Err(Error::Shape { expected: (h, w), found: pred.len() });
    }
    let n = (h * w) as f64;
    let (s, ssim_grad) = ssim_with_grad_fixed_range(gt, pred, h, w, opts)?;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(gt) {
        let d = p - t;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = (1.0 - eta) * sign / n;
    }
    l1 /= n;
    for (g, sg) in grad.iter_mut().zip(&ssim_grad) {
        *g -= eta * sg;
    }
    Ok(SpectrumLoss { loss: (1.0 - eta) * l1 + eta * (1.0 - s), l1, ssim: s, grad })
}

pub fn loss(pred: &SpatialSpectrum, gt: &SpatialSpectrum, eta: f64) -> Result<f64> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Shape { expected: (gt.h, gt.w), found: pred.values.len() });
    }
    Ok(spectrum_loss(&pred.values, &gt.values, gt.h, gt.w, eta, SsimOptions::default())?.loss)
}
