//! Rotations, projections and spherical direction handling.
//!
//! Conventions used throughout the crate:
//!
//! * rotations are right-handed (counter-clockwise when looking down the
//!   axis toward the origin);
//! * the world is y-up; the polar angle `phi` is measured from `+y` and the
//!   azimuth `theta` runs from `+x` toward `+z`, so a direction is
//!   `(sin phi cos theta, cos phi, sin phi sin theta)`;
//! * equirectangular pixel `(row, col)` of an `H x W` raster has its centre at
//!   `phi = pi (row + 0.5) / H`, `theta = 2 pi (col + 0.5) / W`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

const UNIT_TOL: f64 = 1e-6;

/// A unit vector in R^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Wraps `(x, y, z)`, rejecting vectors that are not unit length.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::try_from_vector(Vector3::new(x, y, z))
    }

    pub fn try_from_vector(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnit { norm });
        }
        Ok(Direction(v))
    }

    /// Normalizes `v`. Fails on the zero vector.
    pub fn normalize(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NotUnit { norm });
        }
        Ok(Direction(v / norm))
    }

    pub fn e_x() -> Self {
        Direction(Vector3::x())
    }

    pub fn e_y() -> Self {
        Direction(Vector3::y())
    }

    pub fn e_z() -> Self {
        Direction(Vector3::z())
    }

    /// Direction with polar angle `phi` (from +y) and azimuth `theta`.
    pub fn from_angles(phi: f64, theta: f64) -> Self {
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Direction(Vector3::new(sp * ct, cp, sp * st))
    }

    /// Returns `(phi, theta)` with `phi` in `[0, pi]` and `theta` in `[0, 2 pi)`.
    pub fn angles(&self) -> (f64, f64) {
        let phi = self.0.y.clamp(-1.0, 1.0).acos();
        let mut theta = self.0.z.atan2(self.0.x);
        if theta < 0.0 {
            theta += TAU;
        }
        if theta >= TAU {
            theta -= TAU;
        }
        (phi, theta)
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn rotated(&self, rotation: &Rotation) -> Direction {
        // Rotation preserves norm up to rounding; renormalize to keep the invariant tight.
        let v = rotation.matrix() * self.0;
        Direction(v / v.norm())
    }
}

/// A proper rotation matrix (orthogonal, det +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` as a member of SO(3) within 1e-6.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(ortho <= UNIT_TOL) {
            return Err(Error::NotRotation(format!(
                "R^T R deviates from identity by {ortho:e}"
            )));
        }
        if !((det - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::NotRotation(format!("determinant {det}")));
        }
        Ok(Rotation(m))
    }

    /// Right-handed rotation about `e_y`.
    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Row-major entries.
    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let cross = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() * c + cross * s + (k * k.transpose()) * (1.0 - c)
}

/// Right-handed rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn rotation_about_axis(axis: &Vector3<f64>, angle: f64) -> Result<Rotation> {
    let axis = Direction::try_from_vector(*axis)?;
    Ok(Rotation(rodrigues(axis.vector(), angle)))
}

/// Minimal-angle rotation taking `a` onto `e_x`.
///
/// `a = -e_x` has no unique minimal rotation; a half turn about `e_y` is used.
pub fn rotation_a_to_ex(a: &Direction) -> Rotation {
    let v = a.vector();
    let cos = v.x.clamp(-1.0, 1.0);
    let axis = v.cross(&Vector3::x());
    let sin = axis.norm();
    if sin < 1e-12 {
        return if cos > 0.0 {
            Rotation::identity()
        } else {
            Rotation(rodrigues(&Vector3::y(), PI))
        };
    }
    Rotation(rodrigues(&(axis / sin), sin.atan2(cos)))
}

/// Scalar projection of `b` onto `a`, i.e. `[1,0,0] R_{a->e_x} b`.
pub fn scalar_projection(b: &Vector3<f64>, a: &Direction) -> f64 {
    a.vector().dot(b)
}

/// In-plane coordinates of the rejection of `b` from `a`: rows 2-3 of `R_{a->e_x} b`.
pub fn vector_rejection_2d(b: &Vector3<f64>, a: &Direction) -> Vector2<f64> {
    let r = rotation_a_to_ex(a).apply(b);
    Vector2::new(r.y, r.z)
}

/// Polar angle for a uniform variate `u` under the density `sin(phi)/2`.
pub fn polar_from_uniform(u: f64) -> f64 {
    (1.0 - 2.0 * u).clamp(-1.0, 1.0).acos()
}

/// Directions distributed uniformly in solid angle, deterministic in `seed`.
///
/// Azimuth is uniform on `[0, 2 pi)`; the polar angle follows the inverse CDF
/// of `sin(phi)/2`.
pub fn sample_directions(count: usize, seed: u64) -> Result<Vec<Direction>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let mut rng = seeded(seed);
    Ok(sample_directions_with(&mut rng, count))
}

pub(crate) fn sample_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    let theta = rng.random::<f64>() * TAU;
    let phi = polar_from_uniform(rng.random::<f64>());
    Direction::from_angles(phi, theta)
}

pub(crate) fn sample_directions_with<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<Direction> {
    (0..count).map(|_| sample_direction(rng)).collect()
}

/// Centre direction of equirectangular pixel `(row, col)`.
pub fn pixel_to_direction(row: usize, col: usize, height: usize, width: usize) -> Direction {
    let phi = PI * (row as f64 + 0.5) / height as f64;
    let theta = TAU * (col as f64 + 0.5) / width as f64;
    Direction::from_angles(phi, theta)
}

/// Continuous raster coordinates of `d`; pixel centres sit at integer values.
pub fn direction_to_pixel_coords(d: &Direction, height: usize, width: usize) -> (f64, f64) {
    let (phi, theta) = d.angles();
    let row = phi / PI * height as f64 - 0.5;
    let col = theta / TAU * width as f64 - 0.5;
    (row, col)
}

/// Pixel containing `d`.
pub fn direction_to_pixel(d: &Direction, height: usize, width: usize) -> (usize, usize) {
    let (phi, theta) = d.angles();
    let row = ((phi / PI * height as f64).floor() as usize).min(height - 1);
    let col = ((theta / TAU * width as f64).floor() as usize) % width;
    (row, col)
}

/// Exact solid angle subtended by any pixel in `row`.
pub fn pixel_solid_angle(row: usize, height: usize, width: usize) -> f64 {
    let top = PI * row as f64 / height as f64;
    let bottom = PI * (row + 1) as f64 / height as f64;
    TAU / width as f64 * (top.cos() - bottom.cos())
}
