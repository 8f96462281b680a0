use nalgebra::{Matrix3, Vector3};

use crate::error::{OsopError, Result};
use crate::geometry::{Pose, Rotation};

/// Least-squares rigid transform with `dst ≈ R·src + t`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(OsopError::InvalidConfig(format!(
            "{} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(OsopError::NotEnoughMatches {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-9 * sv[0] {
        return Err(OsopError::DegenerateConfiguration);
    }
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    // Re-project to clean round-off before the validity check.
    let rotation = Rotation::orthonormalize(&r);
    let rotation = Rotation::from_matrix(*rotation.matrix())?;
    let t = cd - rotation.apply(&cs);
    Ok(Pose::new(rotation, t))
}

/// Σ‖dst − pose(src)‖².
pub fn sum_squared_residual(pose: &Pose, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (d - pose.apply(s)).norm_squared()).sum()
}
