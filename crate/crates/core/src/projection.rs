//! Mercator-style mapping of receiver-frame points onto the upper-hemisphere
//! canvas, plus EWA covariance projection and tile footprints.
//!
//! Pixel `(col, row)` samples longitude `(col * 2 / W - 1) * pi` and latitude
//! `row * pi / (2 H)`; column `W/2` faces the receiver's +x axis.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

/// Points closer than this to the receiver are culled.
pub const MIN_RANGE: f64 = 1e-4;
/// Added to both diagonal entries of every projected covariance.
pub const COV2D_FLOOR: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Footprint half-extent in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

const MIN_RHO: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
}

impl Canvas {
    pub const SPECTRUM: Canvas = Canvas { h: 90, w: 360 };

    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn tiles_x(&self, tile_size: usize) -> usize {
        self.w.div_ceil(tile_size)
    }

    pub fn tiles_y(&self, tile_size: usize) -> usize {
        self.h.div_ceil(tile_size)
    }
}

/// Receiver pose: the columns of `rotation` are the receiver axes in world
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RxPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl RxPose {
    pub fn identity_at(position: Vector3<f64>) -> Self {
        Self { position, rotation: Matrix3::identity() }
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub pixel_center: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub source_index: usize,
}

/// Pixel center and range of a receiver-frame point, or `None` when culled.
///
/// Points below the horizon (`t_z < 0`) and points within [`MIN_RANGE`] of
/// the receiver are culled; the horizon itself is kept. The exact zenith maps
/// to column `W/2`, row `H - 1`.
pub fn project_point(t: &Vector3<f64>, canvas: Canvas) -> Option<(Vector2<f64>, f64)> {
    let r = t.norm();
    if !(r >= MIN_RANGE) || t.z < 0.0 {
        return None;
    }
    let w = canvas.w as f64;
    let h = canvas.h as f64;
    let lon = t.y.atan2(t.x);
    // Same value as asin(t_z / r) with better rounding: (1, 0, 1) lands on
    // exactly pi / 4.
    let lat = t.z.atan2(t.x.hypot(t.y));
    let mut px = (lon / PI + 1.0) * w / 2.0;
    if px >= w {
        px -= w;
    }
    let mut py = 2.0 * lat / PI * h;
    if py >= h {
        py = h - 1.0;
    }
    Some((Vector2::new(px, py), r))
}

/// Inverse of [`project_point`] on the unit sphere.
pub fn unproject_pixel(p: &Vector2<f64>, canvas: Canvas) -> Vector3<f64> {
    let lon = (2.0 * p.x / canvas.w as f64 - 1.0) * PI;
    let lat = p.y / canvas.h as f64 * PI / 2.0;
    Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

/// Analytic Jacobian of the pixel center with respect to `t`.
pub fn point_jacobian(t: &Vector3<f64>, canvas: Canvas) -> Matrix2x3<f64> {
    let a = canvas.w as f64 / (2.0 * PI);
    let b = 2.0 * canvas.h as f64 / PI;
    let rho2 = (t.x * t.x + t.y * t.y).max(MIN_RHO * MIN_RHO);
    let rho = rho2.sqrt();
    let r2 = rho2 + t.z * t.z;
    let u = 1.0 / (rho * r2);
    Matrix2x3::new(
        -a * t.y / rho2,
        a * t.x / rho2,
        0.0,
        -b * t.z * t.x * u,
        -b * t.z * t.y * u,
        b * rho / r2,
    )
}

/// Derivatives of each Jacobian entry with respect to `t`:
/// `out[c][(i, j)] = d J_ij / d t_c`.
fn point_jacobian_derivative(t: &Vector3<f64>, canvas: Canvas) -> [Matrix2x3<f64>; 3] {
    let a = canvas.w as f64 / (2.0 * PI);
    let b = 2.0 * canvas.h as f64 / PI;
    let (x, y, z) = (t.x, t.y, t.z);
    let rho2 = (x * x + y * y).max(MIN_RHO * MIN_RHO);
    let rho = rho2.sqrt();
    let rho4 = rho2 * rho2;
    let r2 = rho2 + z * z;
    let r4 = r2 * r2;
    let u = 1.0 / (rho * r2);
    let k = r2 / rho + 2.0 * rho;
    let u_x = -u * u * x * k;
    let u_y = -u * u * y * k;
    let u_z = -u * u * rho * 2.0 * z;

    let dx = Matrix2x3::new(
        a * 2.0 * x * y / rho4,
        a * (y * y - x * x) / rho4,
        0.0,
        -b * z * (u + x * u_x),
        -b * z * y * u_x,
        b * (x / rho / r2 - 2.0 * rho * x / r4),
    );
    let dy = Matrix2x3::new(
        a * (y * y - x * x) / rho4,
        -a * 2.0 * x * y / rho4,
        0.0,
        -b * z * x * u_y,
        -b * z * (u + y * u_y),
        b * (y / rho / r2 - 2.0 * rho * y / r4),
    );
    let dz = Matrix2x3::new(
        0.0,
        0.0,
        0.0,
        -b * (x * u + z * x * u_z),
        -b * (y * u + z * y * u_z),
        -b * rho * 2.0 * z / r4,
    );
    [dx, dy, dz]
}

/// `J Sigma J^T + 0.3 I` for a receiver-frame center `t` and covariance.
pub fn project_covariance(t: &Vector3<f64>, sigma_local: &Matrix3<f64>, canvas: Canvas) -> Matrix2<f64> {
    let j = point_jacobian(t, canvas);
    j * sigma_local * j.transpose() + Matrix2::identity() * COV2D_FLOOR
}

/// Projects a world-space Gaussian through the receiver pose.
pub fn project_gaussian(
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    pose: &RxPose,
    canvas: Canvas,
    source_index: usize,
) -> Option<ProjectedGaussian> {
    let t = pose.to_local(mu);
    let (pixel_center, depth) = project_point(&t, canvas)?;
    let sigma_local = pose.rotation.transpose() * sigma * pose.rotation;
    Some(ProjectedGaussian {
        pixel_center,
        cov2d: project_covariance(&t, &sigma_local, canvas),
        depth,
        source_index,
    })
}

/// Reverse pass of [`project_gaussian`]: maps gradients with respect to the
/// pixel center and the 2x2 covariance back to the world-space center and
/// 3x3 covariance. Matrix gradients are full (non-symmetrized) gradients.
pub fn project_gaussian_backward(
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    pose: &RxPose,
    canvas: Canvas,
    d_pixel: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let rot = pose.rotation;
    let t = pose.to_local(mu);
    let sigma_local = rot.transpose() * sigma * rot;
    let j = point_jacobian(&t, canvas);

    let d_sigma_local = j.transpose() * d_cov2d * j;
    let d_j = (d_cov2d + d_cov2d.transpose()) * j * sigma_local;
    let dj_dt = point_jacobian_derivative(&t, canvas);
    let mut d_t = j.transpose() * d_pixel;
    for c in 0..3 {
        d_t[c] += d_j.component_mul(&dj_dt[c]).sum();
    }
    (rot * d_t, rot * d_sigma_local * rot.transpose())
}

/// Footprint radius in pixels: three standard deviations along the major axis.
pub fn footprint_radius(cov2d: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    FOOTPRINT_SIGMAS * lambda_max.max(0.0).sqrt()
}

/// Indices (`tile_y * tiles_x + tile_x`, ascending) of tiles touched by the
/// footprint box, wrapping across the azimuth seam.
pub fn footprint_tiles(pg: &ProjectedGaussian, tile_size: usize, canvas: Canvas) -> Vec<usize> {
    let radius = footprint_radius(&pg.cov2d);
    let (cx, cy) = (pg.pixel_center.x, pg.pixel_center.y);
    let ntx = canvas.tiles_x(tile_size);
    let w = canvas.w as i64;
    let h = canvas.h as i64;

    let row0 = ((cy - radius).floor() as i64).clamp(0, h - 1);
    let row1 = ((cy + radius).floor() as i64).clamp(0, h - 1);
    if (cy + radius) < 0.0 || (cy - radius) > (h - 1) as f64 {
        return Vec::new();
    }

    let mut col_tiles = vec![false; ntx];
    let x0 = (cx - radius).floor() as i64;
    let x1 = (cx + radius).floor() as i64;
    if x1 - x0 + 1 >= w {
        col_tiles.iter_mut().for_each(|c| *c = true);
    } else {
        let mut mark = |lo: i64, hi: i64| {
            for tx in (lo as usize / tile_size)..=(hi as usize / tile_size) {
                col_tiles[tx] = true;
            }
        };
        if x0 < 0 {
            mark(x0 + w, w - 1);
            mark(0, x1);
        } else if x1 >= w {
            mark(x0, w - 1);
            mark(0, x1 - w);
        } else {
            mark(x0, x1);
        }
    }

    let mut out = Vec::new();
    for ty in (row0 as usize / tile_size)..=(row1 as usize / tile_size) {
        for (tx, &hit) in col_tiles.iter().enumerate() {
            if hit {
                out.push(ty * ntx + tx);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: Canvas = Canvas::SPECTRUM;

    #[test]
    fn hand_examples() {
        let (p, d) = project_point(&Vector3::new(1.0, 0.0, 0.0), C).unwrap();
        assert_eq!((p.x, p.y, d), (180.0, 0.0, 1.0));
        let (p, _) = project_point(&Vector3::new(0.0, 1.0, 0.0), C).unwrap();
        assert_eq!((p.x, p.y), (270.0, 0.0));
        let (p, _) = project_point(&Vector3::new(1.0, 0.0, 1.0), C).unwrap();
        assert_eq!(p.y, 45.0);
        assert!(project_point(&Vector3::new(0.0, 0.0, -1.0), C).is_none());
        assert!(project_point(&Vector3::new(1e-5, 0.0, 0.0), C).is_none());
    }

    #[test]
    fn zenith_and_seam_conventions() {
        let (p, _) = project_point(&Vector3::new(0.0, 0.0, 2.0), C).unwrap();
        assert_eq!((p.x, p.y), (180.0, 89.0));
        let (p, _) = project_point(&Vector3::new(-1.0, 0.0, 0.2), C).unwrap();
        assert_eq!(p.x, 0.0);
    }

    #[test]
    fn depth_is_norm() {
        let t = Vector3::new(0.3, -1.2, 0.7);
        assert_eq!(project_point(&t, C).unwrap().1, t.norm());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..200 {
            let t = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.3..2.5));
            let (p0, _) = project_point(&t, C).unwrap();
            if p0.x < 20.0 || p0.x > 340.0 || p0.y > 80.0 {
                continue;
            }
            let j = point_jacobian(&t, C);
            for c in 0..3 {
                let mut tp = t;
                let mut tm = t;
                tp[c] += h;
                tm[c] -= h;
                let fd = (project_point(&tp, C).unwrap().0 - project_point(&tm, C).unwrap().0) / (2.0 * h);
                for r in 0..2 {
                    let err = (fd[r] - j[(r, c)]).abs() / j[(r, c)].abs().max(1.0);
                    assert!(err < 1e-6, "row {r} col {c}: {} vs {}", fd[r], j[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn jacobian_derivative_matches_differences() {
        let t = Vector3::new(0.8, -0.6, 0.9);
        let d = point_jacobian_derivative(&t, C);
        let h = 1e-6;
        for c in 0..3 {
            let mut tp = t;
            let mut tm = t;
            tp[c] += h;
            tm[c] -= h;
            let fd = (point_jacobian(&tp, C) - point_jacobian(&tm, C)) / (2.0 * h);
            assert!((fd - d[c]).abs().max() < 1e-5 * fd.abs().max().max(1.0));
        }
    }

    #[test]
    fn covariance_floor_and_symmetry() {
        let t = Vector3::new(1.0, 0.5, 0.4);
        assert_eq!(project_covariance(&t, &Matrix3::zeros(), C), Matrix2::identity() * 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let q = em::quat_normalize(&[rng.gen(), rng.gen(), rng.gen(), rng.gen::<f64>() - 0.5]);
            let s = [rng.gen_range(-3.0..0.5), rng.gen_range(-3.0..0.5), rng.gen_range(-3.0..0.5)];
            let cov = project_covariance(&t, &em::covariance(&q, &s), C);
            assert!((cov - cov.transpose()).abs().max() < 1e-9 * cov.abs().max());
            let eig = cov.symmetric_eigen().eigenvalues;
            assert!(eig.min() >= 0.3 - 1e-9);
        }
    }

    #[test]
    fn isotropic_covariance_is_longitude_invariant() {
        let sigma = Matrix3::identity() * 0.04;
        let t1 = Vector3::new(1.2, 0.3, 0.8);
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.9);
        let t2 = rz * t1;
        let a = project_covariance(&t1, &sigma, C);
        let b = project_covariance(&t2, &sigma, C);
        assert!((a - b).abs().max() < 1e-9);
    }

    #[test]
    fn hemisphere_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let lon: f64 = rng.gen_range(-PI..PI);
            let lat: f64 = rng.gen_range(0.0..PI / 2.0 - 1e-6);
            let t = Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin());
            let (p, _) = project_point(&t, C).unwrap();
            assert!((unproject_pixel(&p, C) - t).norm() <= 1e-9);
        }
    }

    #[test]
    fn elevation_monotone_in_height() {
        let mut last = -1.0;
        for i in 0..200 {
            let t = Vector3::new(0.7, -0.4, i as f64 * 0.05);
            let (p, _) = project_point(&t, C).unwrap();
            assert!(p.y > last);
            last = p.y;
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let pose = RxPose {
            position: Vector3::new(0.5, -0.2, 0.1),
            rotation: *nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.7).matrix(),
        };
        let mu = Vector3::new(1.5, 0.7, 1.2);
        let sigma = em::covariance(&em::quat_normalize(&[0.9, 0.2, -0.3, 0.1]), &[-1.0, -1.5, -0.7]);
        let gp = Vector2::new(0.3, -0.8);
        let gc = Matrix2::new(0.2, -0.1, 0.4, 0.05);
        let f = |mu: &Vector3<f64>, sigma: &Matrix3<f64>| {
            let pg = project_gaussian(mu, sigma, &pose, C, 0).unwrap();
            gp.dot(&pg.pixel_center) + gc.component_mul(&pg.cov2d).sum()
        };
        let (d_mu, d_sigma) = project_gaussian_backward(&mu, &sigma, &pose, C, &gp, &gc);
        let h = 1e-6;
        for c in 0..3 {
            let mut p = mu;
            let mut m = mu;
            p[c] += h;
            m[c] -= h;
            let fd = (f(&p, &sigma) - f(&m, &sigma)) / (2.0 * h);
            assert!((fd - d_mu[c]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} {}", d_mu[c]);
        }
        for r in 0..3 {
            for c in 0..3 {
                let mut p = sigma;
                let mut m = sigma;
                p[(r, c)] += h;
                m[(r, c)] -= h;
                let fd = (f(&mu, &p) - f(&mu, &m)) / (2.0 * h);
                assert!((fd - d_sigma[(r, c)]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    fn tiny(px: f64, py: f64, cov: f64) -> ProjectedGaussian {
        ProjectedGaussian {
            pixel_center: Vector2::new(px, py),
            cov2d: Matrix2::identity() * cov,
            depth: 1.0,
            source_index: 0,
        }
    }

    #[test]
    fn footprint_examples() {
        assert_eq!(footprint_tiles(&tiny(24.0, 40.0, 0.3), 16, C), vec![2 * 23 + 1]);
        let tiles = footprint_tiles(&tiny(1.0, 40.0, 100.0 / 9.0), 16, C);
        let ntx = 23;
        assert!(tiles.contains(&(2 * ntx)));
        assert!(tiles.contains(&(2 * ntx + 22)));
        let all = footprint_tiles(&tiny(180.0, 45.0, 1e6), 16, C);
        assert_eq!(all.len(), 23 * 6);
        assert_eq!(all, (0..23 * 6).collect::<Vec<_>>());
    }
}
