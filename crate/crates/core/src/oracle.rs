//! Ground-truth radio physics for a rectangular room.
//!
//! A uniform planar array measures per-element phases; a phase-only
//! beamformer steers across an integer-degree azimuth/elevation grid to
//! produce the spatial spectrum. Multipath comes from an image-source model
//! of the six room walls with a complex reflection coefficient per wall and
//! free-space amplitude `lambda / (4 pi d)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::em::ComplexSample;
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// RSSI values below this floor are reported as the floor.
pub const RSSI_FLOOR_DB: f64 = -100.0;

pub const DEFAULT_SPECTRUM_ROWS: usize = 90;
pub const DEFAULT_SPECTRUM_COLS: usize = 360;

/// Square `k_side x k_side` planar array lying in the receiver's x-y plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrayGeometry {
    pub k_side: usize,
    pub spacing: f64,
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(k_side: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        let geom = Self { k_side, spacing, wavelength };
        geom.validate()?;
        Ok(geom)
    }

    /// Half-wavelength spaced array.
    pub fn half_wavelength(k_side: usize, wavelength: f64) -> Result<Self> {
        Self::new(k_side, 0.5 * wavelength, wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_side < 1 {
            return Err(Error::invalid("array must have at least one element per side"));
        }
        if !(self.wavelength > 0.0 && self.spacing > 0.0 && self.spacing < self.wavelength) {
            return Err(Error::invalid(format!(
                "array spacing {} must be positive and below the wavelength {}",
                self.spacing, self.wavelength
            )));
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.k_side * self.k_side
    }
}

/// Phase offset of element `(m, n)` relative to element `(0, 0)` for a plane
/// wave arriving from `(azimuth, elevation)`, wrapped into `[0, 2 pi)`.
pub fn steering_phase(geom: &ArrayGeometry, m: usize, n: usize, azimuth: f64, elevation: f64) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let r = geom.spacing * (mf * mf + nf * nf).sqrt();
    let phi = nf.atan2(mf);
    (-2.0 * PI * r * (azimuth - phi).cos() * elevation.cos() / geom.wavelength).rem_euclid(2.0 * PI)
}

/// Power versus direction, row = elevation bin, column = azimuth bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSpectrum {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl SpatialSpectrum {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![0.0; h * w] }
    }

    pub fn from_values(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape { expected: (h, w), found: values.len() });
        }
        Ok(Self { h, w, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    /// Azimuth of column `col` in radians (integer-degree bins at the default
    /// resolution).
    pub fn azimuth(&self, col: usize) -> f64 {
        col as f64 * 2.0 * PI / self.w as f64
    }

    /// Elevation of row `row` in radians.
    pub fn elevation(&self, row: usize) -> f64 {
        row as f64 * 0.5 * PI / self.h as f64
    }

    /// `(row, col)` of the largest value; the first one wins on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.values.len() == self.h * self.w && self.values.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Phase-only beamformer over the `h x w` direction grid.
///
/// `measured_phases` holds `k_side * k_side` phases indexed `m * k_side + n`.
pub fn beamform_spectrum(
    geom: &ArrayGeometry,
    measured_phases: &[f64],
    h: usize,
    w: usize,
) -> SpatialSpectrum {
    let k = geom.k_side;
    assert_eq!(measured_phases.len(), k * k, "one phase per array element");
    let reference = measured_phases[0];
    let measured: Vec<Complex64> = measured_phases
        .iter()
        .map(|&p| Complex64::from_polar(1.0, p - reference))
        .collect();
    let inv_k = 1.0 / (k * k) as f64;
    let mut spectrum = SpatialSpectrum::zeros(h, w);
    spectrum.values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let elevation = row as f64 * 0.5 * PI / h as f64;
        for (col, value) in out.iter_mut().enumerate() {
            let azimuth = col as f64 * 2.0 * PI / w as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..k {
                for n in 0..k {
                    let steer = steering_phase(geom, m, n, azimuth, elevation);
                    acc += measured[m * k + n] * Complex64::from_polar(1.0, -steer);
                }
            }
            *value = (acc * inv_k).norm_sqr();
        }
    });
    spectrum
}

/// Wall order used for reflection coefficients: `-x, +x, -y, +y, -z, +z`.
pub const WALL_NAMES: [&str; 6] = ["x0", "x1", "y0", "y1", "z0", "z1"];

/// Axis-aligned room spanning `[0, room_extent]` with a receiver inside.
#[derive(Clone, Debug, PartialEq)]
pub struct MultipathScene {
    pub room_extent: Vector3<f64>,
    pub reflection_coeff: [ComplexSample; 6],
    pub max_reflection_order: usize,
    pub rx_position: Vector3<f64>,
    /// Columns are the receiver frame axes expressed in room coordinates;
    /// the array boresight is the third column.
    pub rx_orientation: Matrix3<f64>,
    pub wavelength: f64,
}

impl MultipathScene {
    pub fn validate(&self) -> Result<()> {
        if self.room_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid("room extent must be positive"));
        }
        if !self.strictly_inside(&self.rx_position) {
            return Err(Error::invalid("receiver must lie strictly inside the room"));
        }
        if self.max_reflection_order > 3 {
            return Err(Error::invalid("reflection order must be in [0, 3]"));
        }
        if self.reflection_coeff.iter().any(|g| !(g.norm() <= 1.0)) {
            return Err(Error::invalid("reflection coefficients must satisfy |G| <= 1"));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::invalid("wavelength must be positive"));
        }
        let r = self.rx_orientation;
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::invalid("receiver orientation must be a rotation"));
        }
        Ok(())
    }

    pub fn strictly_inside(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > 0.0 && p[a] < self.room_extent[a])
    }

    /// Expresses a room-frame point in the receiver frame.
    pub fn to_rx_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rx_orientation.transpose() * (p - self.rx_position)
    }

    fn check_tx(&self, tx: &Vector3<f64>) -> Result<()> {
        if !self.strictly_inside(tx) {
            return Err(Error::invalid(format!("transmitter {tx:?} lies outside the room")));
        }
        if (tx - self.rx_position).norm() < 1e-9 {
            return Err(Error::invalid("transmitter coincides with the receiver"));
        }
        Ok(())
    }
}

/// One specular path from the transmitter (or one of its images).
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationPath {
    pub distance: f64,
    pub gain: ComplexSample,
    pub image_position: Vector3<f64>,
    /// Product of the wall coefficients met along the path.
    pub reflection_product: ComplexSample,
    pub order: usize,
}

/// Enumerates image sources up to the scene's reflection order, sorted by
/// path length.
pub fn simulate_paths(scene: &MultipathScene, tx: &Vector3<f64>) -> Result<Vec<PropagationPath>> {
    scene.validate()?;
    scene.check_tx(tx)?;
    let max_order = scene.max_reflection_order as i64;

    // Per axis: (image coordinate, hits on the lower wall, hits on the upper wall).
    let per_axis: Vec<Vec<(f64, i64, i64)>> = (0..3)
        .map(|a| {
            let len = scene.room_extent[a];
            let mut v = Vec::new();
            for n in -max_order..=max_order {
                for q in 0..2i64 {
                    let lower = (n - q).abs();
                    let upper = n.abs();
                    if lower + upper <= max_order {
                        v.push(((1 - 2 * q) as f64 * tx[a] + 2.0 * n as f64 * len, lower, upper));
                    }
                }
            }
            v
        })
        .collect();

    let lambda = scene.wavelength;
    let mut paths = Vec::new();
    for &(x, xl, xu) in &per_axis[0] {
        for &(y, yl, yu) in &per_axis[1] {
            for &(z, zl, zu) in &per_axis[2] {
                let order = xl + xu + yl + yu + zl + zu;
                if order > max_order {
                    continue;
                }
                let hits = [xl, xu, yl, yu, zl, zu];
                let mut product = Complex64::new(1.0, 0.0);
                for (g, &count) in scene.reflection_coeff.iter().zip(hits.iter()) {
                    for _ in 0..count {
                        product *= g;
                    }
                }
                let image = Vector3::new(x, y, z);
                let distance = (image - scene.rx_position).norm();
                let gain = product
                    * (lambda / (4.0 * PI * distance))
                    * Complex64::from_polar(1.0, -2.0 * PI * distance / lambda);
                paths.push(PropagationPath {
                    distance,
                    gain,
                    image_position: image,
                    reflection_product: product,
                    order: order as usize,
                });
            }
        }
    }
    paths.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(paths)
}

/// Element positions in the receiver frame, centered on the receiver.
fn element_offsets(geom: &ArrayGeometry) -> Vec<(f64, f64)> {
    let k = geom.k_side;
    let c = (k as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(k * k);
    for m in 0..k {
        for n in 0..k {
            out.push(((m as f64 - c) * geom.spacing, (n as f64 - c) * geom.spacing));
        }
    }
    out
}

/// Complex per-element signal `y_mn` for a set of paths. Each path is
/// treated as a plane wave across the aperture, with element offsets
/// following the same sign convention as [`steering_phase`].
pub fn element_signals(
    scene: &MultipathScene,
    geom: &ArrayGeometry,
    paths: &[PropagationPath],
) -> Vec<ComplexSample> {
    let offsets = element_offsets(geom);
    let wavenumber = 2.0 * PI / geom.wavelength;
    let dirs: Vec<Vector3<f64>> = paths
        .iter()
        .map(|p| scene.to_rx_frame(&p.image_position).normalize())
        .collect();
    offsets
        .iter()
        .map(|&(ox, oy)| {
            paths.iter().zip(&dirs).fold(Complex64::new(0.0, 0.0), |acc, (p, u)| {
                acc + p.gain * Complex64::from_polar(1.0, -wavenumber * (ox * u.x + oy * u.y))
            })
        })
        .collect()
}

/// Measured spatial spectrum for a transmitter at `tx`.
pub fn ground_truth_spectrum(
    scene: &MultipathScene,
    geom: &ArrayGeometry,
    tx: &Vector3<f64>,
) -> Result<SpatialSpectrum> {
    ground_truth_spectrum_sized(scene, geom, tx, DEFAULT_SPECTRUM_ROWS, DEFAULT_SPECTRUM_COLS)
}

pub fn ground_truth_spectrum_sized(
    scene: &MultipathScene,
    geom: &ArrayGeometry,
    tx: &Vector3<f64>,
    h: usize,
    w: usize,
) -> Result<SpatialSpectrum> {
    geom.validate()?;
    let paths = simulate_paths(scene, tx)?;
    let y = element_signals(scene, geom, &paths);
    let phases: Vec<f64> = y.iter().map(|v| v.arg()).collect();
    Ok(beamform_spectrum(geom, &phases, h, w))
}

/// `20 log10 |sum g|`, floored at [`RSSI_FLOOR_DB`].
pub fn rssi_from_gains(gains: impl IntoIterator<Item = ComplexSample>) -> f64 {
    let total: Complex64 = gains.into_iter().sum();
    let db = 20.0 * total.norm().log10();
    if db.is_nan() || db < RSSI_FLOOR_DB {
        RSSI_FLOOR_DB
    } else {
        db
    }
}

/// Single omnidirectional antenna at the receiver, coherent multipath sum.
pub fn ground_truth_rssi(scene: &MultipathScene, tx: &Vector3<f64>) -> Result<f64> {
    let paths = simulate_paths(scene, tx)?;
    Ok(rssi_from_gains(paths.iter().map(|p| p.gain)))
}

/// `count` subcarriers spaced `spacing` Hz, centered on `center` Hz.
pub fn subcarrier_grid(center: f64, spacing: f64, count: usize) -> Vec<f64> {
    let mid = (count as f64 - 1.0) / 2.0;
    (0..count).map(|i| center + (i as f64 - mid) * spacing).collect()
}

/// Frequency response of the multipath channel at each subcarrier.
pub fn ground_truth_csi(
    scene: &MultipathScene,
    tx: &Vector3<f64>,
    subcarriers: &[f64],
) -> Result<Vec<ComplexSample>> {
    if subcarriers.is_empty() || subcarriers.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("subcarrier frequencies must be non-empty and ascending"));
    }
    if subcarriers[0] <= 0.0 {
        return Err(Error::invalid("subcarrier frequencies must be positive"));
    }
    let paths = simulate_paths(scene, tx)?;
    Ok(subcarriers
        .iter()
        .map(|&f| {
            paths.iter().fold(Complex64::new(0.0, 0.0), |acc, p| {
                acc + p.reflection_product
                    * (SPEED_OF_LIGHT / (4.0 * PI * p.distance * f))
                    * Complex64::from_polar(1.0, -2.0 * PI * f * p.distance / SPEED_OF_LIGHT)
            })
        })
        .collect())
}
