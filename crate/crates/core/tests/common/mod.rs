#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wrfgs::pipeline::{self, RenderOptions, RenderQuantity};
use wrfgs::projection::{Canvas, ProjectedGaussian, RxPose};
use wrfgs::scene::{
    Bounds, ConditioningInput, Pipeline, WrfModel, PARAM_LOG_SCALE, PARAM_MU, PARAM_OPACITY, PARAM_ROT, PARAM_SIGNAL,
};
use wrfgs::splat::{Compositor, SplatInput, SplatPoint};
use wrfgs::tasks::TaskKind;
use wrfgs::train::config::TrainConfig;

/// Untiled per-pixel compositor written directly from the definitions:
/// every Gaussian is visited for every pixel in `(depth, index)` order.
pub fn brute_force_render(input: &SplatInput) -> Vec<Complex64> {
    let c = input.canvas;
    let w = c.w as f64;
    let mut order: Vec<usize> = (0..input.projected.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&input.projected[a], &input.projected[b]);
        pa.depth.partial_cmp(&pb.depth).unwrap().then(pa.source_index.cmp(&pb.source_index))
    });
    let inverses: Vec<Matrix2<f64>> = input.projected.iter().map(|p| p.cov2d.try_inverse().unwrap()).collect();
    let tail = (-4.5f64).exp();
    let weight = |i: usize, col: usize, row: usize| -> f64 {
        let p = &input.projected[i];
        let mut dx = col as f64 - p.pixel_center.x;
        dx -= w * (dx / w).round();
        let d = Vector2::new(dx, row as f64 - p.pixel_center.y);
        let m = (d.transpose() * inverses[i] * d)[(0, 0)];
        if m > 9.0 {
            0.0
        } else {
            ((-0.5 * m).exp() - tail) / (1.0 - tail)
        }
    };
    let one = Complex64::new(1.0, 0.0);
    let mut out = vec![Complex64::new(0.0, 0.0); c.pixels()];
    for row in 0..c.h {
        for col in 0..c.w {
            let mut acc = Complex64::new(0.0, 0.0);
            match input.compositor {
                Compositor::ChainedAttenuation => {
                    let mut through = one;
                    for &i in &order {
                        let k = weight(i, col, row);
                        if k == 0.0 {
                            continue;
                        }
                        let pt = &input.points[i];
                        acc += through * pt.signal * k;
                        through *= one + (pt.attenuation - one) * k;
                    }
                }
                Compositor::AlphaBlend => {
                    let mut t = 1.0;
                    for &i in &order {
                        let k = weight(i, col, row);
                        if k == 0.0 {
                            continue;
                        }
                        let pt = &input.points[i];
                        let alpha = pt.opacity * k;
                        acc += pt.signal * (alpha * t);
                        t *= 1.0 - alpha;
                        if input.early_exit && t < wrfgs::splat::TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                }
            }
            out[row * c.w + col] = acc;
        }
    }
    out
}

/// Random projected scene with footprints from sub-pixel to a few tens of
/// pixels, including Gaussians straddling the azimuth seam.
pub fn random_splat_input(rng: &mut ChaCha8Rng, n: usize, canvas: Canvas, compositor: Compositor, early_exit: bool) -> SplatInput {
    let mut projected = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let s1: f64 = rng.gen_range(0.7..14.0);
        let s2: f64 = rng.gen_range(0.7..14.0);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let r = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let cov = r * Matrix2::new(s1 * s1, 0.0, 0.0, s2 * s2) * r.transpose();
        let cx = if i % 10 == 0 { rng.gen_range(-2.0..2.0f64).rem_euclid(canvas.w as f64) } else { rng.gen_range(0.0..canvas.w as f64) };
        projected.push(ProjectedGaussian {
            pixel_center: Vector2::new(cx, rng.gen_range(0.0..canvas.h as f64)),
            cov2d: cov,
            // A few exact depth ties exercise the index tie-break.
            depth: if i % 17 == 0 { 2.0 } else { rng.gen_range(0.2..8.0) },
            source_index: i,
        });
        points.push(SplatPoint {
            signal: Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            attenuation: Complex64::from_polar(rng.gen_range(0.3..1.0), rng.gen_range(-1.0..1.0)),
            opacity: rng.gen_range(0.0..0.95),
        });
    }
    SplatInput { projected, points, compositor, canvas, early_exit }
}

/// `max |a - b| / max |b|`.
pub fn relative_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

pub fn small_train_config(pipeline: Pipeline) -> TrainConfig {
    TrainConfig {
        pipeline,
        iterations: 20,
        n_gaussians: 40,
        canvas: Canvas::new(18, 72),
        mlp1_width: 12,
        mlp1_depth: 3,
        feature_width: 6,
        mlp2_hidden: vec![8],
        deform_width: 12,
        deform_depth: 3,
        deform_skip: 1,
        encoding_order: 3,
        log_interval: 5,
        ..TrainConfig::default()
    }
}

/// A model with perturbed output layers and larger footprints so that every
/// parameter group carries gradient.
pub fn gradient_model(pipeline: Pipeline, cfg: &TrainConfig, n: usize, seed: u64) -> WrfModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Bounds::new(Vector3::zeros(), Vector3::new(6.0, 4.0, 3.0)).unwrap();
    let rx = RxPose::identity_at(Vector3::new(3.0, 2.0, 0.5));
    let task = TaskKind::Spectrum;
    let mut cfg = cfg.clone();
    cfg.pipeline = pipeline;
    let mut m = WrfModel::init_random(cfg.model_config(task.d_sig(), task.conditioning()), bounds, rx, n, &mut rng).unwrap();
    let ls = m.ids.log_scale;
    for v in m.store.get_mut(ls).value.iter_mut() {
        *v = rng.gen_range(-1.2..-0.3);
    }
    for p in m.store.params.iter_mut().filter(|p| p.name.ends_with("weight")) {
        for v in p.value.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    if let Some(op) = m.ids.opacity {
        for v in m.store.get_mut(op).value.iter_mut() {
            *v = rng.gen_range(-1.5..0.5);
        }
    }
    m
}

/// Gaussian attributes (which also feed the projection) plus the first and
/// last layer of every network.
pub fn gradient_groups(m: &WrfModel) -> Vec<(String, usize)> {
    let mut g: Vec<(String, usize)> = vec![(PARAM_MU.into(), 3), (PARAM_ROT.into(), 3), (PARAM_LOG_SCALE.into(), 3)];
    if m.ids.opacity.is_some() {
        g.push((PARAM_OPACITY.into(), 3));
        g.push((PARAM_SIGNAL.into(), 3));
    }
    let names: Vec<&str> = m.store.params.iter().map(|p| p.name.as_str()).collect();
    for prefix in ["mlp1.", "mlp2.", "deform."] {
        let net: Vec<&str> = names.iter().copied().filter(|n| n.starts_with(prefix) && n.ends_with(".weight")).collect();
        if let (Some(first), Some(last)) = (net.first(), net.last()) {
            g.push((first.to_string(), 3));
            g.push((last.to_string(), 3));
            g.push((last.replace(".weight", ".bias"), 2));
        }
    }
    g
}

pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Smooth objective `sum_p c_p spectrum_p` with fixed random `c`.
pub fn spectrum_objective(m: &WrfModel, cond: &ConditioningInput, opts: &RenderOptions, weights: &[f64]) -> f64 {
    let f = pipeline::render_field(m, cond, opts).unwrap();
    let s = pipeline::field_to_spectrum(&f.field, opts.quantity);
    s.values.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Central differences on `picks` entries drawn from each named parameter
/// (an entry is drawn among those with non-negligible gradient).
pub fn full_pipeline_gradient_check(
    m: &mut WrfModel,
    cond: &ConditioningInput,
    opts: &RenderOptions,
    groups: &[(&str, usize)],
    seed: u64,
) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = pipeline::render_field(m, cond, opts).unwrap();
    let n = opts.canvas.pixels();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_field = pipeline::spectrum_grad_to_field_grad(&f.field, opts.quantity, &weights);
    m.store.zero_grad();
    pipeline::field_backward(m, &f, &d_field, None);
    let mut out = Vec::new();
    for &(name, picks) in groups {
        let pi = m.store.params.iter().position(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}"));
        let grads = m.store.params[pi].grad.clone();
        let top = grads.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let candidates: Vec<usize> = (0..grads.len()).filter(|&j| grads[j].abs() > 1e-3 * top).collect();
        assert!(!candidates.is_empty(), "{name} has no gradient");
        for _ in 0..picks {
            let j = candidates[rng.gen_range(0..candidates.len())];
            let orig = m.store.params[pi].value[j];
            let eps = 1e-6 * orig.abs().max(1.0);
            m.store.params[pi].value[j] = orig + eps;
            let fp = spectrum_objective(m, cond, opts, &weights);
            m.store.params[pi].value[j] = orig - eps;
            let fm = spectrum_objective(m, cond, opts, &weights);
            m.store.params[pi].value[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads[j];
            let rel_error = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
            out.push(GradCheck { name: name.to_string(), index: j, analytic, numeric, rel_error });
        }
    }
    out
}

pub fn render_options(canvas: Canvas) -> RenderOptions {
    RenderOptions { canvas, tile_size: 16, quantity: RenderQuantity::Power, early_exit: false }
}
