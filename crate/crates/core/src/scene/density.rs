//! Adaptive density control: clone small Gaussians with large view-space
//! gradients, split large ones, prune transparent or oversized ones.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{WrfModel, PARAM_LOG_SCALE, PARAM_MU};
use crate::em;
use crate::projection::Canvas;

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    pub interval: usize,
    pub warmup: usize,
    /// Densification stops after this iteration; pruning continues.
    pub until: usize,
    pub grad_threshold: f64,
    /// Clone/split boundary as a fraction of the scene diagonal.
    pub scale_fraction: f64,
    pub opacity_prune: f64,
    pub min_gaussians: usize,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            warmup: 500,
            until: 15_000,
            grad_threshold: 2e-4,
            scale_fraction: 0.01,
            opacity_prune: 0.005,
            min_gaussians: 16,
            max_gaussians: 20_000,
        }
    }
}

/// Running statistics collected between density-control passes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    /// Sum of view-space gradient norms in uniform `[-1, 1]` canvas units.
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
    /// Sum of world-space center gradients (direction for clones).
    pub mu_grad: Vec<Vector3<f64>>,
    /// Largest footprint radius (pixels) seen.
    pub max_radius: Vec<f64>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n], mu_grad: vec![Vector3::zeros(); n], max_radius: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }

    /// Records one visible Gaussian's pixel-center gradient.
    pub fn record(&mut self, i: usize, d_pixel: [f64; 2], canvas: Canvas, radius: f64) {
        let gx = d_pixel[0] * canvas.w as f64 / 2.0;
        let gy = d_pixel[1] * canvas.h as f64;
        self.accum[i] += (gx * gx + gy * gy).sqrt();
        self.count[i] += 1;
        self.max_radius[i] = self.max_radius[i].max(radius);
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

struct NewRow {
    source: usize,
    mu: Vector3<f64>,
    log_scale: [f64; 3],
}

/// One density-control pass. `densify` is false once past the densification
/// window, in which case only pruning runs.
pub fn densify_and_prune(
    model: &mut WrfModel,
    stats: &GradStats,
    cfg: &DensifyConfig,
    canvas: Canvas,
    densify: bool,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = model.gaussian_count();
    assert_eq!(stats.len(), n, "gradient statistics out of sync with the store");
    let mut report = DensifyReport::default();
    let scale_limit = cfg.scale_fraction * model.bounds.extent().norm();
    let mut remove = vec![false; n];
    let mut new_rows = Vec::new();

    if densify && n < cfg.max_gaussians {
        let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.average(i) > cfg.grad_threshold).collect();
        candidates.sort_by(|&a, &b| stats.average(b).total_cmp(&stats.average(a)).then(a.cmp(&b)));
        let mut budget = cfg.max_gaussians - n;
        for i in candidates {
            if budget == 0 {
                break;
            }
            let p = model.primitive(i);
            let max_scale = p.max_scale();
            if max_scale < scale_limit {
                let g = stats.mu_grad[i];
                let dir = if g.norm() > 0.0 { -g.normalize() } else { Vector3::zeros() };
                new_rows.push(NewRow { source: i, mu: p.mu + dir * max_scale, log_scale: p.log_scale });
                report.cloned += 1;
            } else {
                let r = em::rotation_matrix(&p.rot);
                let s = Vector3::new(p.log_scale[0].exp(), p.log_scale[1].exp(), p.log_scale[2].exp());
                let shrink = SPLIT_SCALE_DIVISOR.ln();
                let ls = [p.log_scale[0] - shrink, p.log_scale[1] - shrink, p.log_scale[2] - shrink];
                for _ in 0..2 {
                    let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                    new_rows.push(NewRow { source: i, mu: p.mu + r * s.component_mul(&z), log_scale: ls });
                }
                remove[i] = true;
                report.split += 1;
            }
            budget -= 1;
        }
    }

    // Pruning, most transparent first, never dropping below the floor.
    let opacity = model.ids.opacity.map(|id| model.store.value(id).to_vec());
    let mut prune: Vec<usize> = (0..n)
        .filter(|&i| !remove[i])
        .filter(|&i| {
            let transparent = opacity.as_ref().is_some_and(|o| em::sigmoid(o[i]) < cfg.opacity_prune);
            transparent || stats.max_radius[i] > canvas.w as f64 / 2.0
        })
        .collect();
    if let Some(o) = &opacity {
        prune.sort_by(|&a, &b| o[a].total_cmp(&o[b]).then(a.cmp(&b)));
    }
    let after_densify = n - report.split + new_rows.len();
    let allowed = after_densify.saturating_sub(cfg.min_gaussians);
    for &i in prune.iter().take(allowed) {
        remove[i] = true;
        report.pruned += 1;
    }

    let mut rows: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for p in model.store.params.iter().filter(|p| p.per_gaussian) {
        let built = new_rows
            .iter()
            .map(|r| match p.name.as_str() {
                PARAM_MU => vec![r.mu.x, r.mu.y, r.mu.z],
                PARAM_LOG_SCALE => r.log_scale.to_vec(),
                _ => p.row(r.source).to_vec(),
            })
            .collect();
        rows.insert(p.name.clone(), built);
    }
    let keep: Vec<bool> = remove.iter().map(|r| !r).collect();
    model.store.retain_gaussians(&keep);
    model.store.append_gaussians(new_rows.len(), |name, k| rows[name][k].clone());
    report
}
