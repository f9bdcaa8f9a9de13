//! Windowed SSIM over spectra with an analytic gradient.
//!
//! 11x11 Gaussian window (sigma 1.5), applied separably. Columns wrap
//! (azimuth is periodic) unless `wrap_columns` is off; rows clamp to the
//! edge. Constants follow `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with
//! `L = max(max a, max b, 1e-12)`.

use crate::error::{Error, Result};

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MIN_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsimOptions {
    pub wrap_columns: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { wrap_columns: true }
    }
}

fn window() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut g = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

struct Filter {
    h: usize,
    w: usize,
    g: [f64; 2 * WINDOW_RADIUS + 1],
    wrap: bool,
}

impl Filter {
    fn col_index(&self, c: isize) -> usize {
        let w = self.w as isize;
        if self.wrap {
            c.rem_euclid(w) as usize
        } else {
            c.clamp(0, w - 1) as usize
        }
    }

    fn row_index(&self, r: isize) -> usize {
        r.clamp(0, self.h as isize - 1) as usize
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let r = WINDOW_RADIUS as isize;
        let mut tmp = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (k, gk) in self.g.iter().enumerate() {
                    acc += gk * x[row * w + self.col_index(col as isize + k as isize - r)];
                }
                tmp[row * w + col] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            for (k, gk) in self.g.iter().enumerate() {
                let src = self.row_index(row as isize + k as isize - r);
                for col in 0..w {
                    out[row * w + col] += gk * tmp[src * w + col];
                }
            }
        }
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let r = WINDOW_RADIUS as isize;
        let mut tmp = vec![0.0; h * w];
        for row in 0..h {
            for (k, gk) in self.g.iter().enumerate() {
                let dst = self.row_index(row as isize + k as isize - r);
                for col in 0..w {
                    tmp[dst * w + col] += gk * y[row * w + col];
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let v = tmp[row * w + col];
                for (k, gk) in self.g.iter().enumerate() {
                    out[row * w + self.col_index(col as isize + k as isize - r)] += gk * v;
                }
            }
        }
        out
    }
}

fn check_shapes(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape { expected: (h, w), found: if a.len() != h * w { a.len() } else { b.len() } });
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

struct Stats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
    c1: f64,
    c2: f64,
    range: f64,
}

fn stats(filter: &Filter, a: &[f64], b: &[f64]) -> Stats {
    let max_a = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_b = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max_a.max(max_b).max(MIN_RANGE);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    Stats {
        mu_a: filter.apply(a),
        mu_b: filter.apply(b),
        e_aa: filter.apply(&aa),
        e_bb: filter.apply(&bb),
        e_ab: filter.apply(&ab),
        c1: (K1 * range) * (K1 * range),
        c2: (K2 * range) * (K2 * range),
        range,
    }
}

/// Mean SSIM of two `h x w` row-major images.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, opts: SsimOptions) -> Result<f64> {
    check_shapes(a, b, h, w)?;
    let filter = Filter { h, w, g: window(), wrap: opts.wrap_columns };
    let s = stats(&filter, a, b);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let va = s.e_aa[i] - ma * ma;
        let vb = s.e_bb[i] - mb * mb;
        let cov = s.e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + s.c1) * (2.0 * cov + s.c2)) / ((ma * ma + mb * mb + s.c1) * (va + vb + s.c2));
    }
    Ok(total / (h * w) as f64)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_with_grad(a: &[f64], b: &[f64], h: usize, w: usize, opts: SsimOptions) -> Result<(f64, Vec<f64>)> {
    grad_impl(a, b, h, w, opts, true)
}

/// Like [`ssim_with_grad`] but treats the dynamic range as a constant.
/// With the exact gradient, raising the single largest pixel of `b` above
/// the range of `a` inflates `C1` and `C2` and moves SSIM towards 1 for any
/// image pair, which an optimizer readily exploits.
pub fn ssim_with_grad_fixed_range(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    opts: SsimOptions,
) -> Result<(f64, Vec<f64>)> {
    grad_impl(a, b, h, w, opts, false)
}

fn grad_impl(a: &[f64], b: &[f64], h: usize, w: usize, opts: SsimOptions, through_range: bool) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b, h, w)?;
    let n = h * w;
    let filter = Filter { h, w, g: window(), wrap: opts.wrap_columns };
    let s = stats(&filter, a, b);
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_mu_b = vec![0.0; n];
    let mut d_e_bb = vec![0.0; n];
    let mut d_e_ab = vec![0.0; n];
    let mut d_range = 0.0;
    for i in 0..n {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let va = s.e_aa[i] - ma * ma;
        let vb = s.e_bb[i] - mb * mb;
        let cov = s.e_ab[i] - ma * mb;
        let n1 = 2.0 * ma * mb + s.c1;
        let n2 = 2.0 * cov + s.c2;
        let d1 = ma * ma + mb * mb + s.c1;
        let d2 = va + vb + s.c2;
        let map = (n1 * n2) / (d1 * d2);
        total += map;
        let m = map * inv_n;
        d_mu_b[i] = m * (2.0 * ma / n1 - 2.0 * mb / d1 - 2.0 * ma / n2 + 2.0 * mb / d2);
        d_e_ab[i] = m * 2.0 / n2;
        d_e_bb[i] = -m / d2;
        let d_c1 = m * (1.0 / n1 - 1.0 / d1);
        let d_c2 = m * (1.0 / n2 - 1.0 / d2);
        d_range += d_c1 * 2.0 * K1 * K1 * s.range + d_c2 * 2.0 * K2 * K2 * s.range;
    }
    let g_mu = filter.adjoint(&d_mu_b);
    let g_bb = filter.adjoint(&d_e_bb);
    let g_ab = filter.adjoint(&d_e_ab);
    let mut grad: Vec<f64> = (0..n).map(|i| g_mu[i] + 2.0 * b[i] * g_bb[i] + a[i] * g_ab[i]).collect();

    let (arg_b, max_b) = b
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let max_a = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if through_range && max_b > max_a && max_b > MIN_RANGE {
        grad[arg_b] += d_range;
    }
    Ok((total * inv_n, grad))
}
