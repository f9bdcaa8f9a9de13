//! Numeric building blocks shared by every stage of the pipeline: complex
//! samples, quaternion rotations, Gaussian covariance assembly, Gaussian
//! evaluation and sinusoidal positional encoding.
//!
//! Complex values are always kept in Cartesian form. Scales are stored as
//! natural logarithms and opacities as logits so that unconstrained gradient
//! steps never leave the valid domain.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

/// A complex signal sample in Cartesian form.
pub type ComplexSample = Complex64;

/// Diagonal regularizer added to a covariance before inversion.
pub const COVARIANCE_REGULARIZER: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalizes a quaternion; a zero quaternion maps to the identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n < 1e-300 {
        return QUAT_IDENTITY;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize() * (0.5 * angle).sin();
    [(0.5 * angle).cos(), a.x, a.y, a.z]
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to the rotation matrix of a unit quaternion
/// back onto the quaternion components.
fn rotation_matrix_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// `R diag(exp(log_scale))^2 R^T` for a unit quaternion `rot`.
pub fn covariance(rot: &Quat, log_scale: &[f64; 3]) -> Matrix3<f64> {
    let r = rotation_matrix(rot);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    m * m.transpose()
}

/// Covariance from a raw (not necessarily normalized) quaternion. The
/// quaternion is normalized internally, which is what makes unconstrained
/// optimizer steps on the raw components valid.
pub fn covariance_raw(raw_rot: &Quat, log_scale: &[f64; 3]) -> Matrix3<f64> {
    covariance(&quat_normalize(raw_rot), log_scale)
}

/// Backward pass of [`covariance_raw`]. `d_sigma` is the gradient of the loss
/// with respect to the full 3×3 covariance, entries treated independently.
/// Returns gradients for the raw quaternion and the log-scales.
pub fn covariance_raw_backward(
    raw_rot: &Quat,
    log_scale: &[f64; 3],
    d_sigma: &Matrix3<f64>,
) -> (Quat, [f64; 3]) {
    let norm = quat_norm(raw_rot).max(1e-300);
    let q = quat_normalize(raw_rot);
    let r = rotation_matrix(&q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    // Sigma = M M^T  =>  dL/dM = (G + G^T) M
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_r = Matrix3::zeros();
    let mut d_log_s = [0.0; 3];
    for k in 0..3 {
        for i in 0..3 {
            d_r[(i, k)] = d_m[(i, k)] * s[k];
            d_log_s[k] += d_m[(i, k)] * r[(i, k)] * s[k];
        }
    }
    let d_q = rotation_matrix_backward(&q, &d_r);
    // Through q = raw / |raw|.
    let dot = d_q.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>();
    let d_raw = [
        (d_q[0] - dot * q[0]) / norm,
        (d_q[1] - dot * q[1]) / norm,
        (d_q[2] - dot * q[2]) / norm,
        (d_q[3] - dot * q[3]) / norm,
    ];
    (d_raw, d_log_s)
}

/// Unnormalized Gaussian `exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))`.
pub fn eval_gaussian(x: &Vector3<f64>, mu: &Vector3<f64>, sigma: &Matrix3<f64>) -> f64 {
    let reg = sigma + Matrix3::identity() * COVARIANCE_REGULARIZER;
    let inv = reg.try_inverse().unwrap_or_else(Matrix3::zeros);
    let d = x - mu;
    (-0.5 * d.dot(&(inv * d))).exp()
}

/// Sinusoidal positional encoding with `order + 1` frequency bands
/// `pi * 2^0, ..., pi * 2^order`.
///
/// Output layout for a `k`-vector input, band-major:
/// `[sin(2^0 pi t_0..k), cos(2^0 pi t_0..k), sin(2^1 pi t_0..k), ...]`,
/// so the length is `2 * (order + 1) * k`.
pub fn positional_encode(t: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(t.len(), order)];
    positional_encode_into(t, order, &mut out);
    out
}

pub fn encoded_len(k: usize, order: usize) -> usize {
    2 * (order + 1) * k
}

pub fn positional_encode_into(t: &[f64], order: usize, out: &mut [f64]) {
    let k = t.len();
    debug_assert_eq!(out.len(), encoded_len(k, order));
    for band in 0..=order {
        let freq = std::f64::consts::PI * (1u64 << band) as f64;
        let base = 2 * band * k;
        for (c, &v) in t.iter().enumerate() {
            let (s, co) = (freq * v).sin_cos();
            out[base + c] = s;
            out[base + k + c] = co;
        }
    }
}

/// Accumulates the gradient of the encoding back onto its input.
pub fn positional_encode_backward(t: &[f64], order: usize, d_out: &[f64], d_t: &mut [f64]) {
    let k = t.len();
    for band in 0..=order {
        let freq = std::f64::consts::PI * (1u64 << band) as f64;
        let base = 2 * band * k;
        for (c, &v) in t.iter().enumerate() {
            let (s, co) = (freq * v).sin_cos();
            d_t[c] += freq * (co * d_out[base + c] - s * d_out[base + k + c]);
        }
    }
}

/// One virtual transmitter.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub rot: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub static_signal: Vec<ComplexSample>,
    /// Only populated by the chained-attenuation network.
    pub attenuation: Option<ComplexSample>,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_raw(&self.rot, &self.log_scale)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp()
    }
}
