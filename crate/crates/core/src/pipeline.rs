//! Per-sample rendering passes tying the scene model to the splatting
//! engine, and their reverse passes.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::em;
use crate::error::Result;
use crate::oracle::SpatialSpectrum;
use crate::projection::{self, Canvas, ProjectedGaussian, TILE_SIZE};
use crate::scene::{GradStats, ConditioningInput, Pipeline, SceneForward, SceneGrads, WrfModel};
use crate::splat::{self, Compositor, RenderedField, SplatInput, SplatPoint, TilePlan};

/// Added inside the RSSI logarithm so an empty field stays finite.
pub const POWER_FLOOR: f64 = 1e-30;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderQuantity {
    /// `|R|^2` per pixel.
    Power,
    /// `|R|` per pixel.
    Magnitude,
}

impl RenderQuantity {
    pub fn name(self) -> &'static str {
        match self {
            RenderQuantity::Power => "power",
            RenderQuantity::Magnitude => "magnitude",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "power" => Some(RenderQuantity::Power),
            "magnitude" => Some(RenderQuantity::Magnitude),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub canvas: Canvas,
    pub tile_size: usize,
    pub quantity: RenderQuantity,
    pub early_exit: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { canvas: Canvas::SPECTRUM, tile_size: TILE_SIZE, quantity: RenderQuantity::Power, early_exit: true }
    }
}

pub fn compositor_for(pipeline: Pipeline) -> Compositor {
    match pipeline {
        Pipeline::WrfGs => Compositor::ChainedAttenuation,
        Pipeline::WrfGsPlus => Compositor::AlphaBlend,
    }
}

/// Everything the reverse pass of [`render_field`] needs.
#[derive(Clone, Debug)]
pub struct FieldForward {
    pub scene: SceneForward,
    pub input: SplatInput,
    pub plan: TilePlan,
    pub field: RenderedField,
    sigma: Vec<Matrix3<f64>>,
}

/// Network pass, projection and splatting of channel 0 onto the canvas.
pub fn render_field(model: &WrfModel, cond: &ConditioningInput, opts: &RenderOptions) -> Result<FieldForward> {
    let scene = model.forward(cond)?;
    let d = model.config.d_sig;
    let canvas = opts.canvas;
    let rx = model.rx;
    let projected: Vec<(ProjectedGaussian, Matrix3<f64>)> = (0..scene.n)
        .into_par_iter()
        .filter_map(|i| {
            let sigma = em::covariance_raw(&scene.rot[i], &scene.log_scale[i]);
            projection::project_gaussian(&scene.mu[i], &sigma, &rx, canvas, i).map(|pg| (pg, sigma))
        })
        .collect();
    let (projected, sigma): (Vec<_>, Vec<_>) = projected.into_iter().unzip();
    let points = projected
        .iter()
        .map(|pg| {
            let i = pg.source_index;
            SplatPoint { signal: scene.signal[i * d], attenuation: scene.attenuation[i], opacity: scene.opacity[i] }
        })
        .collect();
    let input = SplatInput { projected, points, compositor: compositor_for(model.config.pipeline), canvas, early_exit: opts.early_exit };
    input.validate()?;
    let plan = splat::sort_per_tile(&input.projected, canvas, opts.tile_size)?;
    let field = splat::render_with_plan(&input, &plan);
    Ok(FieldForward { scene, input, plan, field, sigma })
}

/// Reverse pass of [`render_field`]; accumulates parameter gradients and,
/// when given, the density-control statistics.
pub fn field_backward(model: &mut WrfModel, fwd: &FieldForward, d_field: &[Complex64], stats: Option<&mut GradStats>) {
    let sg = splat::render_backward_field(&fwd.input, &fwd.plan, d_field);
    let d = model.config.d_sig;
    let canvas = fwd.input.canvas;
    let rx = model.rx;
    let scene = &fwd.scene;
    let geom: Vec<(Vector3<f64>, em::Quat, [f64; 3])> = fwd
        .input
        .projected
        .par_iter()
        .enumerate()
        .map(|(k, pg)| {
            let i = pg.source_index;
            let (d_mu, d_sigma) =
                projection::project_gaussian_backward(&scene.mu[i], &fwd.sigma[k], &rx, canvas, &sg.center[k], &sg.cov2d[k]);
            let (d_rot, d_ls) = em::covariance_raw_backward(&scene.rot[i], &scene.log_scale[i], &d_sigma);
            (d_mu, d_rot, d_ls)
        })
        .collect();

    let mut grads = SceneGrads::zeros(scene.n, d);
    for (k, pg) in fwd.input.projected.iter().enumerate() {
        let i = pg.source_index;
        let (d_mu, d_rot, d_ls) = geom[k];
        grads.mu[i] = d_mu;
        grads.rot[i] = d_rot;
        grads.log_scale[i] = d_ls;
        grads.signal[i * d] = sg.signal[k];
        grads.attenuation[i] = sg.attenuation[k];
        grads.opacity[i] = sg.opacity[k];
    }
    if let Some(stats) = stats {
        for (k, pg) in fwd.input.projected.iter().enumerate() {
            let i = pg.source_index;
            stats.record(i, [sg.center[k].x, sg.center[k].y], canvas, projection::footprint_radius(&pg.cov2d));
            stats.mu_grad[i] += grads.mu[i];
        }
    }
    model.backward(scene, &grads);
}

/// Rendered pixels rearranged into spectrum layout: spectrum column `c` is
/// azimuth `c`, which sits at pixel column `c + W/2`.
pub fn field_to_spectrum(field: &RenderedField, quantity: RenderQuantity) -> SpatialSpectrum {
    let Canvas { h, w } = field.canvas;
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let z = field.complex_field[r * w + (c + w / 2) % w];
            values[r * w + c] = match quantity {
                RenderQuantity::Power => z.norm_sqr(),
                RenderQuantity::Magnitude => z.norm(),
            };
        }
    }
    SpatialSpectrum { h, w, values }
}

/// Maps a gradient with respect to the spectrum values back to the field.
pub fn spectrum_grad_to_field_grad(field: &RenderedField, quantity: RenderQuantity, d_spectrum: &[f64]) -> Vec<Complex64> {
    let Canvas { h, w } = field.canvas;
    let mut out = vec![ZERO; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + (c + w / 2) % w;
            let z = field.complex_field[p];
            let g = d_spectrum[r * w + c];
            out[p] = match quantity {
                RenderQuantity::Power => z * (2.0 * g),
                RenderQuantity::Magnitude => {
                    let n = z.norm();
                    if n > 0.0 {
                        z * (g / n)
                    } else {
                        ZERO
                    }
                }
            };
        }
    }
    out
}

/// Received power in dB before calibration and clamping: coherent
/// `|sum R_k|^2` or incoherent `sum |R_k|^2` over every pixel.
pub fn field_power_db(field: &RenderedField, coherent: bool) -> f64 {
    10.0 * (field_power(field, coherent) + POWER_FLOOR).log10()
}

fn field_power(field: &RenderedField, coherent: bool) -> f64 {
    if coherent {
        field.complex_field.iter().sum::<Complex64>().norm_sqr()
    } else {
        field.power.iter().sum()
    }
}

/// Field gradient of [`field_power_db`] scaled by `d_db`.
pub fn power_db_grad_to_field_grad(field: &RenderedField, coherent: bool, d_db: f64) -> Vec<Complex64> {
    let p = field_power(field, coherent) + POWER_FLOOR;
    let k = d_db * 20.0 / (std::f64::consts::LN_10 * p);
    if coherent {
        let s: Complex64 = field.complex_field.iter().sum();
        vec![s * k; field.complex_field.len()]
    } else {
        field.complex_field.iter().map(|z| z * k).collect()
    }
}

/// Reverse pass of the RSSI head: field gradients plus `d_db` for `b`.
pub fn rssi_backward(model: &mut WrfModel, fwd: &FieldForward, coherent: bool, d_db: f64, stats: Option<&mut GradStats>) {
    let d_field = power_db_grad_to_field_grad(&fwd.field, coherent, d_db);
    let id = model.ids.calibration;
    model.store.grad_mut(id)[0] += d_db;
    field_backward(model, fwd, &d_field, stats);
}

/// Multi-channel output with no angular footprint.
#[derive(Clone, Debug)]
pub struct ChannelForward {
    pub scene: SceneForward,
    /// Gaussians front to back by distance from the receiver.
    pub order: Vec<usize>,
    pub output: Vec<Complex64>,
}

pub fn depth_order(centers: &[Vector3<f64>], rx: &Vector3<f64>) -> Vec<usize> {
    let dist: Vec<f64> = centers.iter().map(|m| (m - rx).norm()).collect();
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// Composites every Gaussian's `d_sig`-channel signal: alpha blending for
/// WRF-GS+, chained attenuation for WRF-GS.
pub fn render_channels(model: &WrfModel, cond: &ConditioningInput) -> Result<ChannelForward> {
    let scene = model.forward(cond)?;
    let d = model.config.d_sig;
    let order = depth_order(&scene.mu, &model.rx.position);
    let output = match model.config.pipeline {
        Pipeline::WrfGsPlus => splat::blend_channels(&order, &scene.opacity, &scene.signal, d),
        Pipeline::WrfGs => splat::chain_channels(&order, &scene.attenuation, &scene.signal, d),
    };
    Ok(ChannelForward { scene, order, output })
}

pub fn channels_backward(model: &mut WrfModel, fwd: &ChannelForward, d_out: &[Complex64]) {
    let d = model.config.d_sig;
    let scene = &fwd.scene;
    let mut grads = SceneGrads::zeros(scene.n, d);
    match model.config.pipeline {
        Pipeline::WrfGsPlus => {
            let (d_sig, d_op) = splat::blend_channels_backward(&fwd.order, &scene.opacity, &scene.signal, d, d_out);
            grads.signal = d_sig;
            grads.opacity = d_op;
        }
        Pipeline::WrfGs => {
            let (d_sig, d_att) = splat::chain_channels_backward(&fwd.order, &scene.attenuation, &scene.signal, d, d_out);
            grads.signal = d_sig;
            grads.attenuation = d_att;
        }
    }
    model.backward(scene, &grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::RxPose;
    use crate::scene::tests::small_config;
    use crate::scene::{Bounds, ConditioningKind, WrfModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CANVAS: Canvas = Canvas { h: 18, w: 72 };

    fn model(pipeline: Pipeline, d: usize, cond: ConditioningKind, n: usize, seed: u64) -> WrfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = Bounds::new(Vector3::zeros(), Vector3::new(6.0, 4.0, 3.0)).unwrap();
        let rx = RxPose::identity_at(Vector3::new(3.0, 2.0, 0.5));
        let mut m = WrfModel::init_random(small_config(pipeline, d, cond), bounds, rx, n, &mut rng).unwrap();
        // Larger footprints so every Gaussian touches several pixels.
        let ls = m.ids.log_scale;
        for v in m.store.get_mut(ls).value.iter_mut() {
            *v = rng.gen_range(-1.0..-0.2);
        }
        // Zero-initialized output layers would leave inner layers without gradient.
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

    fn opts() -> RenderOptions {
        RenderOptions { canvas: CANVAS, tile_size: 16, quantity: RenderQuantity::Power, early_exit: false }
    }

    fn cond() -> ConditioningInput {
        ConditioningInput::TxPosition(Vector3::new(1.2, 0.7, 1.9))
    }

    fn weights(len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn spectrum_objective(m: &WrfModel, quantity: RenderQuantity) -> f64 {
        let o = RenderOptions { quantity, ..opts() };
        let f = render_field(m, &cond(), &o).unwrap();
        let s = field_to_spectrum(&f.field, quantity);
        s.values.iter().zip(weights(s.values.len())).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(m: &mut WrfModel, f: impl Fn(&WrfModel) -> f64, picks: usize, tol: f64) {
        let analytic: Vec<Vec<f64>> = m.store.params.iter().map(|p| p.grad.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for (pi, grads) in analytic.iter().enumerate() {
            for _ in 0..picks {
                let j = rng.gen_range(0..grads.len());
                let orig = m.store.params[pi].value[j];
                let eps = 1e-6 * orig.abs().max(1.0);
                m.store.params[pi].value[j] = orig + eps;
                let fp = f(m);
                m.store.params[pi].value[j] = orig - eps;
                let fm = f(m);
                m.store.params[pi].value[j] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let a = grads[j];
                let scale = fd.abs().max(a.abs()).max(1e-5);
                assert!((fd - a).abs() / scale < tol, "{}[{j}]: fd {fd} analytic {a}", m.store.params[pi].name);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn single_gaussian_peaks_at_its_direction() {
        let mut m = model(Pipeline::WrfGsPlus, 1, ConditioningKind::TxPosition, 16, 1);
        let mu = m.ids.mu;
        let ls = m.ids.log_scale;
        let op = m.ids.opacity.unwrap();
        let (az, el) = (250.0f64.to_radians(), 30.0f64.to_radians());
        let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let p = m.rx.position + dir * 1.5;
        for (i, v) in m.store.get_mut(op).value.iter_mut().enumerate() {
            *v = if i == 0 { 0.0 } else { -40.0 };
        }
        m.store.get_mut(mu).value[0..3].copy_from_slice(&[p.x, p.y, p.z]);
        m.store.get_mut(ls).value[0..3].copy_from_slice(&[-4.0; 3]);
        let o = RenderOptions { canvas: Canvas::SPECTRUM, ..opts() };
        let f = render_field(&m, &cond(), &o).unwrap();
        let s = field_to_spectrum(&f.field, RenderQuantity::Power);
        assert_eq!(s.argmax(), (30, 250));
    }

    #[test]
    fn spectrum_gradients_match_finite_differences() {
        for pipeline in [Pipeline::WrfGs, Pipeline::WrfGsPlus] {
            for quantity in [RenderQuantity::Power, RenderQuantity::Magnitude] {
                let mut m = model(pipeline, 1, ConditioningKind::TxPosition, 24, 2);
                let f = render_field(&m, &cond(), &RenderOptions { quantity, ..opts() }).unwrap();
                assert!(!f.input.projected.is_empty());
                let s = field_to_spectrum(&f.field, quantity);
                let d_field = spectrum_grad_to_field_grad(&f.field, quantity, &weights(s.values.len()));
                m.store.zero_grad();
                let mut stats = GradStats::new(m.gaussian_count());
                field_backward(&mut m, &f, &d_field, Some(&mut stats));
                assert!(stats.count.iter().any(|&c| c > 0));
                check_gradients(&mut m, |m| spectrum_objective(m, quantity), 3, 2e-4);
            }
        }
    }

    #[test]
    fn rssi_is_a_one_pixel_reduction() {
        let mut m = model(Pipeline::WrfGsPlus, 1, ConditioningKind::TxPosition, 20, 3);
        let f = render_field(&m, &cond(), &opts()).unwrap();
        let total: Complex64 = f.field.complex_field.iter().sum();
        let db = field_power_db(&f.field, true);
        assert!((db - 10.0 * total.norm_sqr().log10()).abs() < 1e-9);
        let inc = field_power_db(&f.field, false);
        assert!((inc - 10.0 * f.field.power.iter().sum::<f64>().log10()).abs() < 1e-9);

        let obj = |m: &WrfModel| field_power_db(&render_field(m, &cond(), &opts()).unwrap().field, true) + m.calibration();
        m.store.zero_grad();
        rssi_backward(&mut m, &f, true, 1.0, None);
        assert_eq!(m.store.get(m.ids.calibration).grad[0], 1.0);
        check_gradients(&mut m, obj, 2, 2e-4);
    }

    #[test]
    fn channel_gradients_match_finite_differences() {
        let uplink: Vec<Complex64> = (0..26).map(|i| Complex64::from_polar(0.2, i as f64 * 0.3)).collect();
        let cond = ConditioningInput::UplinkCsi(uplink);
        let w: Vec<Complex64> = weights(52).chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        for pipeline in [Pipeline::WrfGs, Pipeline::WrfGsPlus] {
            let mut m = model(pipeline, 26, ConditioningKind::UplinkCsi, 12, 4);
            let obj = |m: &WrfModel| {
                let f = render_channels(m, &cond).unwrap();
                f.output.iter().zip(&w).map(|(o, w)| o.re * w.re + o.im * w.im).sum::<f64>()
            };
            let f = render_channels(&m, &cond).unwrap();
            assert_eq!(f.output.len(), 26);
            m.store.zero_grad();
            channels_backward(&mut m, &f, &w);
            check_gradients(&mut m, obj, 3, 2e-4);
        }
    }

    #[test]
    fn depth_order_sorts_by_distance() {
        let c = [Vector3::new(3.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -1.0)];
        assert_eq!(depth_order(&c, &Vector3::zeros()), vec![1, 2, 0]);
    }
}
