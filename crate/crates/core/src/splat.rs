//! Tile-based electromagnetic rasterizer.
//!
//! Projected Gaussians are binned into 16x16 tiles, sorted front to back by
//! `(depth, source_index)` and composited per pixel under one of two laws:
//!
//! * chained attenuation: `R = sum_i (prod_{j<i} d_j) w_i S_i` where the
//!   attenuation of each predecessor is kernel-weighted,
//!   `d_j = 1 + w_j (delta_j - 1)`, so it fades out with the footprint;
//! * alpha blending: `R = sum_i c_i a_i prod_{j<i} (1 - a_j)` with
//!   `a_i = o_i w_i`.
//!
//! `w_i` is the 2D kernel at the pixel, shifted so it reaches zero at the
//! three-sigma ellipse and stays continuous. Pixels sit at integer
//! coordinates and azimuth distance is measured to the nearest periodic
//! image, so footprints crossing the seam render on both edges.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::projection::{footprint_tiles, Canvas, ProjectedGaussian, TILE_SIZE};

pub const MAX_PER_TILE: usize = 4096;
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Squared Mahalanobis radius of the kernel support.
pub const KERNEL_CUTOFF: f64 = 9.0;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// `exp(-KERNEL_CUTOFF / 2)`.
const KERNEL_TAIL: f64 = 0.011108996538242306;

/// Kernel weight for squared Mahalanobis distance `m`; 1 at the center and 0
/// from the cutoff outward.
pub fn kernel_weight(m: f64) -> f64 {
    if m > KERNEL_CUTOFF {
        return 0.0;
    }
    ((-0.5 * m).exp() - KERNEL_TAIL) / (1.0 - KERNEL_TAIL)
}

fn kernel_weight_dm(m: f64) -> f64 {
    -0.5 * (-0.5 * m).exp() / (1.0 - KERNEL_TAIL)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compositor {
    ChainedAttenuation,
    AlphaBlend,
}

/// Per-Gaussian payload; unused fields are ignored by the other compositor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatPoint {
    pub signal: Complex64,
    pub attenuation: Complex64,
    pub opacity: f64,
}

#[derive(Clone, Debug)]
pub struct SplatInput {
    pub projected: Vec<ProjectedGaussian>,
    pub points: Vec<SplatPoint>,
    pub compositor: Compositor,
    pub canvas: Canvas,
    /// Stop alpha blending once transmittance drops below
    /// [`TRANSMITTANCE_EPS`].
    pub early_exit: bool,
}

impl SplatInput {
    pub fn validate(&self) -> Result<()> {
        if self.projected.len() != self.points.len() {
            return Err(Error::invalid("projected and per-gaussian lists differ in length"));
        }
        for (pg, pt) in self.projected.iter().zip(&self.points) {
            if !(pg.depth > 0.0) {
                return Err(Error::invalid("projected depth must be positive"));
            }
            if self.compositor == Compositor::AlphaBlend && !(pt.opacity >= 0.0 && pt.opacity < 1.0) {
                return Err(Error::invalid(format!("opacity {} outside [0, 1)", pt.opacity)));
            }
            if !pt.attenuation.is_finite() || !pt.signal.is_finite() {
                return Err(Error::Numerical("non-finite gaussian payload".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedField {
    pub canvas: Canvas,
    pub complex_field: Vec<Complex64>,
    pub power: Vec<f64>,
}

impl RenderedField {
    fn from_field(canvas: Canvas, complex_field: Vec<Complex64>) -> Self {
        let power = complex_field.iter().map(|z| z.re * z.re + z.im * z.im).collect();
        Self { canvas, complex_field, power }
    }
}

/// Depth-ordered Gaussian lists per tile (indices into the projected list).
#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

/// Bins projected Gaussians into tiles, each list ascending by
/// `(depth, source_index)`.
pub fn sort_per_tile(projected: &[ProjectedGaussian], canvas: Canvas, tile_size: usize) -> Result<TilePlan> {
    let tiles_x = canvas.tiles_x(tile_size);
    let tiles_y = canvas.tiles_y(tile_size);
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].source_index.cmp(&projected[b].source_index))
    });
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        for t in footprint_tiles(&projected[i], tile_size, canvas) {
            lists[t].push(i as u32);
        }
    }
    for (t, list) in lists.iter().enumerate() {
        if list.len() > MAX_PER_TILE {
            return Err(Error::TileOverflow {
                tile_x: t % tiles_x,
                tile_y: t / tiles_x,
                count: list.len(),
                limit: MAX_PER_TILE,
            });
        }
    }
    Ok(TilePlan { tile_size, tiles_x, tiles_y, lists })
}

/// Center and inverse covariance of a projected Gaussian. The center column
/// is reduced to `[0, width)`.
#[derive(Clone, Copy, Debug)]
struct Conic {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    c: f64,
}

impl Conic {
    fn new(pg: &ProjectedGaussian, width: f64) -> Self {
        let m = pg.cov2d;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let inv = 1.0 / det;
        let cx = pg.pixel_center.x;
        Self {
            cx: cx - width * (cx / width).floor(),
            cy: pg.pixel_center.y,
            a: m[(1, 1)] * inv,
            b: -0.5 * (m[(0, 1)] + m[(1, 0)]) * inv,
            c: m[(0, 0)] * inv,
        }
    }
}

/// Nearest periodic image of a column offset in `(-width, width)`; halves
/// round away from zero.
#[inline]
fn wrap_dx(dx: f64, width: f64) -> f64 {
    let half = 0.5 * width;
    if dx >= half {
        dx - width
    } else if dx <= -half {
        dx + width
    } else {
        dx
    }
}

/// A tile entry specialised to one pixel row: `m(dx) = (a dx + e) dx + f`,
/// and `m <= KERNEL_CUTOFF` only for `dx` in `[lo, hi]`.
#[derive(Clone, Copy)]
struct RowEntry {
    slot: u32,
    gi: u32,
    cx: f64,
    lo: f64,
    hi: f64,
    a: f64,
    e: f64,
    f: f64,
    dy: f64,
    signal: Complex64,
    att_minus_one: Complex64,
    opacity: f64,
}

impl RowEntry {
    #[inline]
    fn mahalanobis(&self, col: f64, width: f64) -> Option<(f64, f64)> {
        let dx = wrap_dx(col - self.cx, width);
        if dx < self.lo || dx > self.hi {
            return None;
        }
        let m = (self.a * dx + self.e) * dx + self.f;
        (m <= KERNEL_CUTOFF).then_some((dx, m))
    }
}

/// Entries of `list` whose support meets pixel row `row`, in list order.
fn row_entries(input: &SplatInput, conics: &[Conic], list: &[u32], row: f64, out: &mut Vec<RowEntry>) {
    // Slightly enlarged so that the exact test in `mahalanobis` decides.
    let k = KERNEL_CUTOFF * (1.0 + 1e-9) + 1e-9;
    out.clear();
    for (slot, &gi) in list.iter().enumerate() {
        let q = &conics[gi as usize];
        let dy = row - q.cy;
        let e = 2.0 * q.b * dy;
        let f = q.c * dy * dy;
        let disc = e * e - 4.0 * q.a * (f - k);
        if !(disc >= 0.0) {
            continue;
        }
        let s = disc.sqrt();
        let margin = 1e-6;
        let pt = &input.points[gi as usize];
        out.push(RowEntry {
            slot: slot as u32,
            gi,
            cx: q.cx,
            lo: (-e - s) / (2.0 * q.a) - margin,
            hi: (-e + s) / (2.0 * q.a) + margin,
            a: q.a,
            e,
            f,
            dy,
            signal: pt.signal,
            att_minus_one: pt.attenuation - ONE,
            opacity: pt.opacity,
        });
    }
}

fn tile_pixels(plan: &TilePlan, canvas: Canvas, tile: usize) -> (usize, usize, usize, usize) {
    let tx = tile % plan.tiles_x;
    let ty = tile / plan.tiles_x;
    let x0 = tx * plan.tile_size;
    let y0 = ty * plan.tile_size;
    (x0, (x0 + plan.tile_size).min(canvas.w), y0, (y0 + plan.tile_size).min(canvas.h))
}

fn conics_for(input: &SplatInput) -> Vec<Conic> {
    let width = input.canvas.w as f64;
    input.projected.iter().map(|pg| Conic::new(pg, width)).collect()
}

pub fn render(input: &SplatInput) -> Result<RenderedField> {
    input.validate()?;
    let plan = sort_per_tile(&input.projected, input.canvas, TILE_SIZE)?;
    Ok(render_with_plan(input, &plan))
}

pub fn render_with_plan(input: &SplatInput, plan: &TilePlan) -> RenderedField {
    let canvas = input.canvas;
    let conics = conics_for(input);
    let width = canvas.w as f64;
    let tiles: Vec<Vec<Complex64>> = (0..plan.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_pixels(plan, canvas, tile);
            let list = &plan.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut entries = Vec::with_capacity(list.len());
            for row in y0..y1 {
                row_entries(input, &conics, list, row as f64, &mut entries);
                for col in x0..x1 {
                    out.push(composite_pixel(input, &entries, col as f64, width));
                }
            }
            out
        })
        .collect();
    let mut field = vec![ZERO; canvas.pixels()];
    for (tile, values) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_pixels(plan, canvas, tile);
        let mut it = values.into_iter();
        for row in y0..y1 {
            for col in x0..x1 {
                field[row * canvas.w + col] = it.next().unwrap();
            }
        }
    }
    RenderedField::from_field(canvas, field)
}

#[inline]
fn composite_pixel(input: &SplatInput, entries: &[RowEntry], col: f64, width: f64) -> Complex64 {
    let mut acc = ZERO;
    match input.compositor {
        Compositor::ChainedAttenuation => {
            let mut through = ONE;
            for r in entries {
                let Some((_, m)) = r.mahalanobis(col, width) else { continue };
                let w = kernel_weight(m);
                acc += through * (r.signal * w);
                through *= ONE + r.att_minus_one * w;
            }
        }
        Compositor::AlphaBlend => {
            let mut trans = 1.0;
            for r in entries {
                let Some((_, m)) = r.mahalanobis(col, width) else { continue };
                let alpha = r.opacity * kernel_weight(m);
                acc += r.signal * (alpha * trans);
                trans *= 1.0 - alpha;
                if input.early_exit && trans < TRANSMITTANCE_EPS {
                    break;
                }
            }
        }
    }
    acc
}

/// Gradients indexed like `SplatInput::projected`. Complex gradients use the
/// `dL/dRe + i dL/dIm` convention; matrix gradients are full.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub signal: Vec<Complex64>,
    pub attenuation: Vec<Complex64>,
    pub opacity: Vec<f64>,
    pub center: Vec<Vector2<f64>>,
    pub cov2d: Vec<Matrix2<f64>>,
}

impl SplatGrads {
    fn zeros(n: usize) -> Self {
        Self {
            signal: vec![ZERO; n],
            attenuation: vec![ZERO; n],
            opacity: vec![0.0; n],
            center: vec![Vector2::zeros(); n],
            cov2d: vec![Matrix2::zeros(); n],
        }
    }
}

/// Local per-tile accumulator; conic gradients are kept as `(a, b, c)` with
/// `b` the off-diagonal entry of the symmetric inverse covariance.
#[derive(Clone, Copy, Default)]
struct SlotGrad {
    signal: Complex64,
    attenuation: Complex64,
    opacity: f64,
    cx: f64,
    cy: f64,
    qa: f64,
    qb: f64,
    qc: f64,
}

struct Entry {
    /// Index into the row entries.
    row: usize,
    w: f64,
    m: f64,
    dx: f64,
    /// Accumulated through-attenuation (chained) or transmittance (alpha).
    carry: Complex64,
}

/// `dL/dR = 2 dL/dpower * R` per pixel.
pub fn power_grad_to_field_grad(field: &RenderedField, d_power: &[f64]) -> Vec<Complex64> {
    field.complex_field.iter().zip(d_power).map(|(r, g)| r * (2.0 * g)).collect()
}

/// Reverse pass given `dL/dpower` per pixel.
pub fn render_backward(input: &SplatInput, plan: &TilePlan, field: &RenderedField, d_power: &[f64]) -> SplatGrads {
    render_backward_field(input, plan, &power_grad_to_field_grad(field, d_power))
}

/// Reverse pass given the complex gradient of the loss with respect to the
/// rendered field.
pub fn render_backward_field(input: &SplatInput, plan: &TilePlan, d_field: &[Complex64]) -> SplatGrads {
    let canvas = input.canvas;
    let conics = conics_for(input);
    let width = canvas.w as f64;
    let locals: Vec<Vec<SlotGrad>> = (0..plan.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &plan.lists[tile];
            let mut local = vec![SlotGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, x1, y0, y1) = tile_pixels(plan, canvas, tile);
            let mut rows = Vec::with_capacity(list.len());
            let mut entries = Vec::with_capacity(list.len());
            for row in y0..y1 {
                let grads = &d_field[row * canvas.w + x0..row * canvas.w + x1];
                if grads.iter().all(|g| *g == ZERO) {
                    continue;
                }
                row_entries(input, &conics, list, row as f64, &mut rows);
                for (col, &g) in (x0..x1).zip(grads) {
                    if g == ZERO {
                        continue;
                    }
                    backward_pixel(input, &conics, &rows, col as f64, width, g, &mut entries, &mut local);
                }
            }
            local
        })
        .collect();

    let mut grads = SplatGrads::zeros(input.projected.len());
    let mut conic_grads = vec![[0.0f64; 3]; input.projected.len()];
    for (tile, local) in locals.iter().enumerate() {
        for (slot, &gi) in plan.lists[tile].iter().enumerate() {
            let gi = gi as usize;
            let s = &local[slot];
            grads.signal[gi] += s.signal;
            grads.attenuation[gi] += s.attenuation;
            grads.opacity[gi] += s.opacity;
            grads.center[gi].x += s.cx;
            grads.center[gi].y += s.cy;
            conic_grads[gi][0] += s.qa;
            conic_grads[gi][1] += s.qb;
            conic_grads[gi][2] += s.qc;
        }
    }
    for (gi, pg) in input.projected.iter().enumerate() {
        let [qa, qb, qc] = conic_grads[gi];
        let d_conic = Matrix2::new(qa, qb, qb, qc);
        let inv = pg.cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);
        grads.cov2d[gi] = -(inv.transpose() * d_conic * inv.transpose());
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    input: &SplatInput,
    conics: &[Conic],
    rows: &[RowEntry],
    col: f64,
    width: f64,
    g: Complex64,
    entries: &mut Vec<Entry>,
    local: &mut [SlotGrad],
) {
    entries.clear();
    match input.compositor {
        Compositor::ChainedAttenuation => {
            let mut through = ONE;
            for (k, r) in rows.iter().enumerate() {
                let Some((dx, m)) = r.mahalanobis(col, width) else { continue };
                let w = kernel_weight(m);
                entries.push(Entry { row: k, w, m, dx, carry: through });
                through *= ONE + r.att_minus_one * w;
            }
            let mut suffix = ZERO;
            for e in entries.iter().rev() {
                let r = &rows[e.row];
                let s = &mut local[r.slot as usize];
                s.signal += (e.carry * e.w).conj() * g;
                let d_eff = e.carry * suffix;
                s.attenuation += (d_eff * e.w).conj() * g;
                let d_w = e.carry * r.signal + r.att_minus_one * d_eff;
                let dw = (g.conj() * d_w).re;
                accumulate_kernel(s, &conics[r.gi as usize], e, r.dy, dw);
                suffix = r.signal * e.w + (ONE + r.att_minus_one * e.w) * suffix;
            }
        }
        Compositor::AlphaBlend => {
            let mut trans = 1.0;
            for (k, r) in rows.iter().enumerate() {
                let Some((dx, m)) = r.mahalanobis(col, width) else { continue };
                let w = kernel_weight(m);
                entries.push(Entry { row: k, w, m, dx, carry: Complex64::new(trans, 0.0) });
                trans *= 1.0 - r.opacity * w;
                if input.early_exit && trans < TRANSMITTANCE_EPS {
                    break;
                }
            }
            let mut behind = ZERO;
            for e in entries.iter().rev() {
                let r = &rows[e.row];
                let t = e.carry.re;
                let alpha = r.opacity * e.w;
                let s = &mut local[r.slot as usize];
                s.signal += g * (alpha * t);
                let d_alpha = (g.conj() * ((r.signal - behind) * t)).re;
                s.opacity += d_alpha * e.w;
                accumulate_kernel(s, &conics[r.gi as usize], e, r.dy, d_alpha * r.opacity);
                behind = r.signal * alpha + behind * (1.0 - alpha);
            }
        }
    }
}

#[inline]
fn accumulate_kernel(s: &mut SlotGrad, conic: &Conic, e: &Entry, dy: f64, dw: f64) {
    let dm = dw * kernel_weight_dm(e.m);
    s.cx -= dm * 2.0 * (conic.a * e.dx + conic.b * dy);
    s.cy -= dm * 2.0 * (conic.b * e.dx + conic.c * dy);
    s.qa += dm * e.dx * e.dx;
    s.qb += dm * e.dx * dy;
    s.qc += dm * dy * dy;
}

/// Chained composite of `(kernel weight, signal, attenuation)` triples given
/// front to back.
pub fn composite_chained(sorted: &[(f64, Complex64, Complex64)]) -> Complex64 {
    let mut acc = ZERO;
    let mut through = ONE;
    for &(w, signal, delta) in sorted {
        acc += through * signal * w;
        through *= ONE + (delta - ONE) * w;
    }
    acc
}

/// Alpha composite of `(alpha, signal)` pairs given front to back.
pub fn composite_alpha(sorted: &[(f64, Complex64)], early_exit: bool) -> Complex64 {
    let mut acc = ZERO;
    let mut trans = 1.0;
    for &(alpha, signal) in sorted {
        acc += signal * (alpha * trans);
        trans *= 1.0 - alpha;
        if early_exit && trans < TRANSMITTANCE_EPS {
            break;
        }
    }
    acc
}

/// Multi-channel alpha blend with no angular footprint: every Gaussian in
/// `order` contributes its `channels`-wide signal with `alpha = opacity`.
pub fn blend_channels(order: &[usize], opacity: &[f64], signals: &[Complex64], channels: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; channels];
    let mut trans = 1.0;
    for &i in order {
        let a = opacity[i] * trans;
        for (o, s) in out.iter_mut().zip(&signals[i * channels..(i + 1) * channels]) {
            *o += s * a;
        }
        trans *= 1.0 - opacity[i];
    }
    out
}

/// Reverse pass of [`blend_channels`]; returns `(d_signals, d_opacity)`.
pub fn blend_channels_backward(
    order: &[usize],
    opacity: &[f64],
    signals: &[Complex64],
    channels: usize,
    d_out: &[Complex64],
) -> (Vec<Complex64>, Vec<f64>) {
    let n = opacity.len();
    let mut d_sig = vec![ZERO; n * channels];
    let mut d_op = vec![0.0; n];
    let mut trans = Vec::with_capacity(order.len());
    let mut t = 1.0;
    for &i in order {
        trans.push(t);
        t *= 1.0 - opacity[i];
    }
    let mut behind = vec![ZERO; channels];
    for (k, &i) in order.iter().enumerate().rev() {
        let t = trans[k];
        let a = opacity[i];
        let sig = &signals[i * channels..(i + 1) * channels];
        let mut d_a = 0.0;
        for ch in 0..channels {
            d_sig[i * channels + ch] += d_out[ch] * (a * t);
            d_a += (d_out[ch].conj() * ((sig[ch] - behind[ch]) * t)).re;
            behind[ch] = sig[ch] * a + behind[ch] * (1.0 - a);
        }
        d_op[i] += d_a;
    }
    (d_sig, d_op)
}

/// Multi-channel chained attenuation with no angular footprint:
/// `R_c = sum_i (prod_{j<i} delta_j) S_ic`.
pub fn chain_channels(order: &[usize], attenuation: &[Complex64], signals: &[Complex64], channels: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; channels];
    let mut through = ONE;
    for &i in order {
        for (o, s) in out.iter_mut().zip(&signals[i * channels..(i + 1) * channels]) {
            *o += through * s;
        }
        through *= attenuation[i];
    }
    out
}

/// Reverse pass of [`chain_channels`]; returns `(d_signals, d_attenuation)`.
pub fn chain_channels_backward(
    order: &[usize],
    attenuation: &[Complex64],
    signals: &[Complex64],
    channels: usize,
    d_out: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = attenuation.len();
    let mut d_sig = vec![ZERO; n * channels];
    let mut d_att = vec![ZERO; n];
    let mut prefix = Vec::with_capacity(order.len());
    let mut p = ONE;
    for &i in order {
        prefix.push(p);
        p *= attenuation[i];
    }
    // suffix[c] = sum over later Gaussians of (product strictly between) * S
    let mut suffix = vec![ZERO; channels];
    for (k, &i) in order.iter().enumerate().rev() {
        let p = prefix[k];
        let sig = &signals[i * channels..(i + 1) * channels];
        let mut g = ZERO;
        for ch in 0..channels {
            d_sig[i * channels + ch] += p.conj() * d_out[ch];
            g += (p * suffix[ch]).conj() * d_out[ch];
            suffix[ch] = sig[ch] + attenuation[i] * suffix[ch];
        }
        d_att[i] += g;
    }
    (d_sig, d_att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn pg(px: f64, py: f64, cov: Matrix2<f64>, depth: f64, idx: usize) -> ProjectedGaussian {
        ProjectedGaussian { pixel_center: Vector2::new(px, py), cov2d: cov, depth, source_index: idx }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, canvas: Canvas, compositor: Compositor) -> SplatInput {
        let mut projected = Vec::new();
        let mut points = Vec::new();
        for i in 0..n {
            let l1: f64 = rng.gen_range(0.5..6.0);
            let l2: f64 = rng.gen_range(0.5..6.0);
            let th: f64 = rng.gen_range(0.0..3.14);
            let (s, co) = th.sin_cos();
            let r = Matrix2::new(co, -s, s, co);
            let cov = r * Matrix2::new(l1 * l1, 0.0, 0.0, l2 * l2) * r.transpose();
            projected.push(pg(
                rng.gen_range(0.0..canvas.w as f64),
                rng.gen_range(0.0..canvas.h as f64),
                cov,
                rng.gen_range(0.5..5.0),
                i,
            ));
            points.push(SplatPoint {
                signal: c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                attenuation: c(rng.gen_range(0.3..0.9), rng.gen_range(-0.3..0.3)),
                opacity: rng.gen_range(0.05..0.9),
            });
        }
        SplatInput { projected, points, compositor, canvas, early_exit: true }
    }

    #[test]
    fn kernel_is_continuous_at_cutoff() {
        assert_eq!(kernel_weight(0.0), 1.0);
        assert!(kernel_weight(9.0).abs() < 1e-15);
        assert_eq!(kernel_weight(9.0 + 1e-9), 0.0);
        assert_eq!(KERNEL_TAIL, (-0.5 * KERNEL_CUTOFF).exp());
    }

    #[test]
    fn chained_hand_example() {
        let (s1, s2, s3) = (c(1.0, 0.5), c(-0.3, 0.2), c(0.7, -0.9));
        let (d1, d2) = (c(0.6, 0.1), c(0.8, -0.2));
        assert_eq!(composite_chained(&[(1.0, s1, d1)]), s1);
        let r = composite_chained(&[(1.0, s1, d1), (1.0, s2, d2), (1.0, s3, c(0.5, 0.0))]);
        let expected = s1 + d1 * s2 + d1 * d2 * s3;
        assert!((r - expected).norm() < 1e-15);
    }

    #[test]
    fn alpha_hand_weights() {
        let (a1, a2, a3) = (0.3, 0.5, 0.2);
        let one = c(1.0, 0.0);
        assert!((composite_alpha(&[(a1, one)], false) - a1).norm() < 1e-15);
        let w2 = composite_alpha(&[(a1, ZERO), (a2, one)], false);
        assert!((w2.re - a2 * (1.0 - a1)).abs() < 1e-15);
        let w3 = composite_alpha(&[(a1, ZERO), (a2, ZERO), (a3, one)], false);
        assert!((w3.re - a3 * (1.0 - a1) * (1.0 - a2)).abs() < 1e-15);
        assert_eq!(composite_alpha(&[(0.0, one), (0.0, c(2.0, 1.0))], true), ZERO);
    }

    #[test]
    fn sort_orders_by_depth_then_index() {
        let canvas = Canvas::new(32, 32);
        let cov = Matrix2::identity() * 0.3;
        let plan = sort_per_tile(&[pg(5.0, 5.0, cov, 3.0, 0), pg(5.0, 5.0, cov, 1.0, 1)], canvas, 16).unwrap();
        assert_eq!(plan.lists[0], vec![1, 0]);
        let plan = sort_per_tile(&[pg(5.0, 5.0, cov, 2.0, 7), pg(5.0, 5.0, cov, 2.0, 3)], canvas, 16).unwrap();
        assert_eq!(plan.lists[0], vec![1, 0]);
        let plan = sort_per_tile(&[pg(16.0, 16.0, Matrix2::identity() * 4.0, 2.0, 0)], canvas, 16).unwrap();
        assert_eq!(plan.lists.iter().filter(|l| l == &&vec![0]).count(), 4);
    }

    #[test]
    fn tile_overflow_is_an_error() {
        let canvas = Canvas::new(16, 16);
        let cov = Matrix2::identity() * 0.3;
        let many: Vec<_> = (0..MAX_PER_TILE + 1).map(|i| pg(8.0, 8.0, cov, 1.0, i)).collect();
        assert!(matches!(sort_per_tile(&many, canvas, 16), Err(Error::TileOverflow { .. })));
    }

    #[test]
    fn empty_and_single() {
        let canvas = Canvas::SPECTRUM;
        for compositor in [Compositor::ChainedAttenuation, Compositor::AlphaBlend] {
            let input = SplatInput { projected: vec![], points: vec![], compositor, canvas, early_exit: true };
            let f = render(&input).unwrap();
            assert!(f.power.iter().all(|&p| p == 0.0));

            let cov = Matrix2::new(9.0, 2.0, 2.0, 4.0);
            let input = SplatInput {
                projected: vec![pg(100.0, 40.0, cov, 1.0, 0)],
                points: vec![SplatPoint { signal: c(0.6, -0.8), attenuation: c(0.5, 0.0), opacity: 0.7 }],
                compositor,
                canvas,
                early_exit: true,
            };
            let f = render(&input).unwrap();
            let best = (0..f.power.len()).max_by(|&a, &b| f.power[a].total_cmp(&f.power[b])).unwrap();
            assert_eq!(best, 40 * 360 + 100);
            let center = f.complex_field[best];
            match compositor {
                Compositor::ChainedAttenuation => assert!((center - c(0.6, -0.8)).norm() < 1e-15),
                Compositor::AlphaBlend => assert!((center - c(0.6, -0.8) * 0.7).norm() < 1e-15),
            }
        }
    }

    #[test]
    fn power_is_squared_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_input(&mut rng, 60, Canvas::SPECTRUM, Compositor::ChainedAttenuation);
        let f = render(&input).unwrap();
        for (z, p) in f.complex_field.iter().zip(&f.power) {
            assert_eq!(*p, z.re * z.re + z.im * z.im);
            assert!(*p >= 0.0);
        }
    }

    #[test]
    fn seam_footprint_renders_on_both_edges() {
        let canvas = Canvas::SPECTRUM;
        let input = SplatInput {
            projected: vec![pg(1.0, 40.0, Matrix2::identity() * 9.0, 1.0, 0)],
            points: vec![SplatPoint { signal: c(1.0, 0.0), attenuation: ONE, opacity: 0.5 }],
            compositor: Compositor::ChainedAttenuation,
            canvas,
            early_exit: true,
        };
        let f = render(&input).unwrap();
        let left = f.power[40 * 360 + 3];
        let right = f.power[40 * 360 + 359];
        assert!((left - right).abs() < 1e-15 && left > 0.0);
    }

    #[test]
    fn equal_depth_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = random_input(&mut rng, 40, Canvas::new(48, 96), Compositor::AlphaBlend);
        for p in input.projected.iter_mut() {
            p.depth = 1.0;
        }
        let a = render(&input).unwrap();
        let mut perm: Vec<usize> = (0..40).collect();
        perm.reverse();
        let shuffled = SplatInput {
            projected: perm.iter().map(|&i| input.projected[i]).collect(),
            points: perm.iter().map(|&i| input.points[i]).collect(),
            ..input.clone()
        };
        assert_eq!(render(&shuffled).unwrap(), a);
    }

    #[test]
    fn early_exit_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let mut input = random_input(&mut rng, 300, Canvas::SPECTRUM, Compositor::AlphaBlend);
            for p in input.points.iter_mut() {
                p.opacity = 0.95;
            }
            let with = render(&input).unwrap();
            input.early_exit = false;
            let without = render(&input).unwrap();
            for (a, b) in with.complex_field.iter().zip(&without.complex_field) {
                assert!((a - b).norm() <= 1e-3 * b.norm().max(1e-12) + 1e-3 * 1e-3);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for comp in [Compositor::ChainedAttenuation, Compositor::AlphaBlend] {
            let input = random_input(&mut rng, 30, Canvas::new(32, 64), comp);
            let plan = sort_per_tile(&input.projected, input.canvas, TILE_SIZE).unwrap();
            let f = render_with_plan(&input, &plan);
            let g = render_backward(&input, &plan, &f, &vec![0.0; f.power.len()]);
            assert!(g.signal.iter().all(|z| *z == ZERO));
            assert!(g.opacity.iter().all(|z| *z == 0.0));
            assert!(g.cov2d.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn single_gaussian_closed_form_gradient() {
        let canvas = Canvas::new(16, 16);
        let s = c(0.4, -0.3);
        let input = SplatInput {
            projected: vec![pg(8.0, 8.0, Matrix2::identity() * 2.0, 1.0, 0)],
            points: vec![SplatPoint { signal: s, attenuation: ONE, opacity: 0.6 }],
            compositor: Compositor::AlphaBlend,
            canvas,
            early_exit: false,
        };
        let plan = sort_per_tile(&input.projected, canvas, 16).unwrap();
        let f = render_with_plan(&input, &plan);
        let mut up = vec![0.0; 256];
        up[8 * 16 + 8] = 1.0;
        let g = render_backward(&input, &plan, &f, &up);
        assert!((g.signal[0].re - 2.0 * s.re * 0.36).abs() < 1e-15);
        assert!((g.signal[0].im - 2.0 * s.im * 0.36).abs() < 1e-15);
    }

    fn loss(input: &SplatInput, weights: &[f64]) -> f64 {
        let f = render(input).unwrap();
        f.power.iter().zip(weights).map(|(p, w)| p * w).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let canvas = Canvas::new(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for comp in [Compositor::ChainedAttenuation, Compositor::AlphaBlend] {
            let mut input = random_input(&mut rng, 5, canvas, comp);
            input.early_exit = false;
            for p in input.projected.iter_mut() {
                p.cov2d *= 0.5;
                p.pixel_center.x *= 0.5;
                p.pixel_center.x += 4.0;
                p.pixel_center.y = 2.0 + 4.0 * rng.gen::<f64>();
            }
            let weights: Vec<f64> = (0..canvas.pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plan = sort_per_tile(&input.projected, canvas, 16).unwrap();
            let f = render_with_plan(&input, &plan);
            let g = render_backward(&input, &plan, &f, &weights);
            let h = 1e-6;
            let check = |analytic: f64, plus: SplatInput, minus: SplatInput| {
                let fd = (loss(&plus, &weights) - loss(&minus, &weights)) / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                assert!(err < 1e-4, "{comp:?}: fd {fd} analytic {analytic}");
            };
            for i in 0..5 {
                let bump = |f: &dyn Fn(&mut SplatInput, f64)| {
                    let mut p = input.clone();
                    let mut m = input.clone();
                    f(&mut p, h);
                    f(&mut m, -h);
                    (p, m)
                };
                let (p, m) = bump(&|s, d| s.points[i].signal.re += d);
                check(g.signal[i].re, p, m);
                let (p, m) = bump(&|s, d| s.points[i].signal.im += d);
                check(g.signal[i].im, p, m);
                let (p, m) = bump(&|s, d| s.projected[i].pixel_center.x += d);
                check(g.center[i].x, p, m);
                let (p, m) = bump(&|s, d| s.projected[i].pixel_center.y += d);
                check(g.center[i].y, p, m);
                for (r, cc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (p, m) = bump(&|s, d| s.projected[i].cov2d[(r, cc)] += d);
                    check(g.cov2d[i][(r, cc)], p, m);
                }
                match comp {
                    Compositor::ChainedAttenuation => {
                        let (p, m) = bump(&|s, d| s.points[i].attenuation.re += d);
                        check(g.attenuation[i].re, p, m);
                        let (p, m) = bump(&|s, d| s.points[i].attenuation.im += d);
                        check(g.attenuation[i].im, p, m);
                    }
                    Compositor::AlphaBlend => {
                        let (p, m) = bump(&|s, d| s.points[i].opacity += d);
                        check(g.opacity[i], p, m);
                    }
                }
            }
        }
    }

    #[test]
    fn chain_channels_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, ch) = (5, 2);
        let att: Vec<Complex64> = (0..n).map(|_| c(rng.gen_range(0.2..0.9), rng.gen_range(-0.3..0.3))).collect();
        let sig: Vec<Complex64> = (0..n * ch).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let order = vec![2, 0, 4, 1, 3];
        let up = vec![c(0.3, -0.7), c(-0.2, 0.5)];
        let f = |att: &[Complex64], sig: &[Complex64]| {
            chain_channels(&order, att, sig, ch).iter().zip(&up).map(|(o, u)| (o.conj() * u).re).sum::<f64>()
        };
        let r = chain_channels(&[0, 1], &att, &sig, ch);
        assert!((r[0] - (sig[0] + att[0] * sig[2])).norm() < 1e-15);
        let (ds, da) = chain_channels_backward(&order, &att, &sig, ch, &up);
        let h = 1e-6;
        for i in 0..n {
            for part in 0..2 {
                let bump = |z: &mut Complex64, d: f64| if part == 0 { z.re += d } else { z.im += d };
                let (mut p, mut m) = (att.clone(), att.clone());
                bump(&mut p[i], h);
                bump(&mut m[i], -h);
                let fd = (f(&p, &sig) - f(&m, &sig)) / (2.0 * h);
                let an = if part == 0 { da[i].re } else { da[i].im };
                assert!((fd - an).abs() < 1e-8, "{fd} {an}");
                let (mut p, mut m) = (sig.clone(), sig.clone());
                bump(&mut p[i * ch + 1], h);
                bump(&mut m[i * ch + 1], -h);
                let fd = (f(&att, &p) - f(&att, &m)) / (2.0 * h);
                let an = if part == 0 { ds[i * ch + 1].re } else { ds[i * ch + 1].im };
                assert!((fd - an).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn blend_channels_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let ch = 3;
        let op: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        let sig: Vec<Complex64> = (0..n * ch).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let order = vec![3, 1, 0, 5, 2, 4];
        let up: Vec<Complex64> = (0..ch).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let f = |op: &[f64], sig: &[Complex64]| {
            blend_channels(&order, op, sig, ch).iter().zip(&up).map(|(o, u)| (o.conj() * u).re).sum::<f64>()
        };
        let (ds, dop) = blend_channels_backward(&order, &op, &sig, ch, &up);
        let h = 1e-6;
        for i in 0..n {
            let mut p = op.clone();
            let mut m = op.clone();
            p[i] += h;
            m[i] -= h;
            assert!(((f(&p, &sig) - f(&m, &sig)) / (2.0 * h) - dop[i]).abs() < 1e-8);
            let mut p = sig.clone();
            let mut m = sig.clone();
            p[i * ch].im += h;
            m[i * ch].im -= h;
            assert!(((f(&op, &p) - f(&op, &m)) / (2.0 * h) - ds[i * ch].im).abs() < 1e-8);
        }
    }
}
