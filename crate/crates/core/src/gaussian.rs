//! Anisotropic 3D Gaussian primitives.
//!
//! Covariance is never stored: it is derived as R * diag(exp(2*log_scale)) * R^T
//! from an unconstrained log-scale vector and a unit quaternion, which keeps it
//! symmetric positive-definite under optimization.

use crate::error::{Error, Result};
use crate::linalg::{mat3_diag, mat3_mul, mat3_transpose, quat_to_mat3, Mat3, Quat, Vec3};

/// Number of spherical-harmonic coefficients per primitive at degree 1:
/// (1 dc + 3 linear) per RGB channel.
pub const SH_COEFFS: usize = 12;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    /// Mean position in scene units.
    pub mean: Vec3,
    /// Opacity is sigmoid(opacity_logit), always in (0, 1).
    pub opacity_logit: f64,
    pub log_scale: Vec3,
    /// Unit quaternion [w, x, y, z].
    pub rotation: Quat,
    /// Layout: [r: dc, y, z, x][g: ...][b: ...].
    pub sh: [f64; SH_COEFFS],
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_from_params(self.log_scale, self.rotation).expect("stored params are finite")
    }
}

#[derive(Debug, Clone, Default)]
pub struct GaussianSet {
    pub primitives: Vec<GaussianPrimitive>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigma = R * diag(exp(2 * log_scale)) * R^T for a unit quaternion rotation.
///
/// Symmetric positive-definite by construction; rejects non-finite inputs.
pub fn covariance_from_params(log_scale: Vec3, rotation: Quat) -> Result<Mat3> {
    if !log_scale.iter().all(|v| v.is_finite()) || !rotation.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(
            "covariance_from_params: non-finite log_scale or rotation",
        ));
    }
    let r = quat_to_mat3(rotation);
    let d = mat3_diag([
        (2.0 * log_scale[0]).exp(),
        (2.0 * log_scale[1]).exp(),
        (2.0 * log_scale[2]).exp(),
    ]);
    let rd = mat3_mul(&r, &d);
    let mut sigma = mat3_mul(&rd, &mat3_transpose(&r));
    // symmetrize to kill last-ulp asymmetry from the two products
    for i in 0..3 {
        for j in (i + 1)..3 {
            let s = 0.5 * (sigma[i][j] + sigma[j][i]);
            sigma[i][j] = s;
            sigma[j][i] = s;
        }
    }
    Ok(sigma)
}

/// Cholesky factorization of a 3x3 symmetric matrix; `None` if not positive-definite.
pub fn cholesky3(m: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{quat_from_axis_angle, quat_normalize, QUAT_IDENTITY};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_scales_no_rotation_gives_identity() {
        let s = covariance_from_params([0.0; 3], QUAT_IDENTITY).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn anisotropic_scale_on_diagonal() {
        let s = covariance_from_params([2.0_f64.ln(), 0.0, 0.0], QUAT_IDENTITY).unwrap();
        assert!((s[0][0] - 4.0).abs() < 1e-12);
        assert!((s[1][1] - 1.0).abs() < 1e-12);
        assert!((s[2][2] - 1.0).abs() < 1e-12);
        assert!(s[0][1].abs() < 1e-15 && s[0][2].abs() < 1e-15 && s[1][2].abs() < 1e-15);
    }

    /// Cross-check against an independent matrix product computed with nalgebra.
    #[test]
    fn matches_external_matrix_product_oracle() {
        let log_scale = [0.3, -0.1, 0.2];
        let rot = quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let ours = covariance_from_params(log_scale, rot).unwrap();

        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rot[0], rot[1], rot[2], rot[3],
        ));
        let r = q.to_rotation_matrix();
        let d = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
            (2.0 * log_scale[0]).exp(),
            (2.0 * log_scale[1]).exp(),
            (2.0 * log_scale[2]).exp(),
        ));
        let sigma = r.matrix() * d * r.matrix().transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert!((ours[i][j] - sigma[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite_inputs() {
        assert!(covariance_from_params([f64::NAN, 0.0, 0.0], QUAT_IDENTITY).is_err());
        assert!(covariance_from_params([0.0; 3], [f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
    }

    /// SPD for random parameters: the Cholesky factorization must exist,
    /// and the result must be symmetric.
    #[test]
    fn random_params_yield_spd_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let ls = [
                rng.gen_range(-3.0..2.0),
                rng.gen_range(-3.0..2.0),
                rng.gen_range(-3.0..2.0),
            ];
            let q = quat_normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let s = covariance_from_params(ls, q).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((s[i][j] - s[j][i]).abs() < 1e-12);
                }
            }
            assert!(cholesky3(&s).is_some(), "covariance not SPD: {s:?}");
        }
    }
}
