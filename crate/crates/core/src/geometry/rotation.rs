use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{OsopError, Result};

const ORTHO_TOL: f64 = 1e-9;

/// A proper rotation stored as a 3x3 orthonormal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and handedness within 1e-9 per entry.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > ORTHO_TOL {
            return Err(OsopError::InvalidRotation(format!(
                "R·Rᵀ deviates from identity by {err:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(OsopError::InvalidRotation(format!("det = {det}")));
        }
        Ok(Self(m))
    }

    /// Projects an arbitrary matrix onto SO(3) (closest rotation in Frobenius norm).
    pub fn orthonormalize(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn from_row_major(r: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(r))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// Rodrigues exponential of a rotation vector (radians).
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let k = w.cross_matrix();
        let (a, b) = if theta < 1e-8 {
            (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    /// Rotation vector (axis times angle in radians) with angle in [0, π].
    pub fn log(&self) -> Vector3<f64> {
        UnitQuaternion::from_matrix(&self.0).scaled_axis()
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Accepts a quaternion in (w, x, y, z) order; it is normalized first.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) {
            return Err(OsopError::InvalidRotation("zero quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Self(*uq.to_rotation_matrix().matrix()))
    }

    /// Uniformly distributed random rotation (Haar measure).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let uq = UnitQuaternion::from_quaternion(q);
        Self(*uq.to_rotation_matrix().matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle to `other`, in radians within [0, π].
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        // atan2 form of arccos((tr − 1)/2); keeps precision near 0 and π.
        let m = self.0 * other.0.transpose();
        let c = (m.trace() - 1.0) / 2.0;
        let s = 0.5
            * Vector3::new(
                m[(2, 1)] - m[(1, 2)],
                m[(0, 2)] - m[(2, 0)],
                m[(1, 0)] - m[(0, 1)],
            )
            .norm();
        s.atan2(c).clamp(0.0, std::f64::consts::PI)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Geodesic distance on SO(3) in degrees, clamped to [0, 180].
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    a.angle_to(b).to_degrees().clamp(0.0, 180.0)
}
