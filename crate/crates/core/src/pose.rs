//! Camera poses and pinhole intrinsics.
//!
//! Convention: world-to-camera, right-handed, camera looks down +z.
//! A pose maps a world point p to camera coordinates R(q) * p + t.
//! Image u grows to the right (camera +x), v grows downward (camera +y).

use crate::linalg::{
    self, mat3_mul_vec3, mat3_to_quat, mat3_transpose, quat_conjugate, quat_mul, quat_normalize,
    quat_to_mat3, Mat3, Quat, Vec3,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Intrinsics { fx, fy, cx, cy }
    }

    /// Symmetric pinhole for a square image with the given vertical fov.
    pub fn from_fov(size: usize, fov_rad: f64) -> Self {
        let f = 0.5 * size as f64 / (0.5 * fov_rad).tan();
        Intrinsics::new(f, f, size as f64 / 2.0, size as f64 / 2.0)
    }

    /// Projects a camera-space point; caller checks z > 0.
    #[inline]
    pub fn project(&self, p: Vec3) -> [f64; 2] {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }
}

/// Rigid world-to-camera transform as unit quaternion + translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// [w, x, y, z], unit norm.
    pub rotation: Quat,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: linalg::QUAT_IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        let n = linalg::quat_norm(rotation);
        assert!(
            (n - 1.0).abs() < 1e-6,
            "pose quaternion must be unit norm, got {n}"
        );
        CameraPose {
            rotation: quat_normalize(rotation),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat3(self.rotation)
    }

    /// World point -> camera coordinates.
    pub fn transform(&self, p: Vec3) -> Vec3 {
        let r = self.rotation_matrix();
        linalg::add3(mat3_mul_vec3(&r, p), self.translation)
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn camera_center(&self) -> Vec3 {
        let rt = mat3_transpose(&self.rotation_matrix());
        linalg::scale3(mat3_mul_vec3(&rt, self.translation), -1.0)
    }

    /// Look-at pose: camera at `eye`, +z toward `target`, `up` roughly up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let fwd = linalg::normalize3(linalg::sub3(target, eye));
        let right = linalg::normalize3(linalg::cross3(fwd, up));
        let down = linalg::cross3(fwd, right); // completes RH triad, v grows downward
        let r: Mat3 = [right, down, fwd];
        let t = linalg::scale3(mat3_mul_vec3(&r, eye), -1.0);
        CameraPose {
            rotation: mat3_to_quat(&r),
            translation: t,
        }
    }
}

/// Composition: (a ∘ b)(p) = a(b(p)), i.e. apply b first.
pub fn pose_compose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    let q = quat_normalize(quat_mul(a.rotation, b.rotation));
    let ra = a.rotation_matrix();
    let t = linalg::add3(mat3_mul_vec3(&ra, b.translation), a.translation);
    CameraPose {
        rotation: q,
        translation: t,
    }
}

pub fn pose_inverse(a: &CameraPose) -> CameraPose {
    let qi = quat_conjugate(a.rotation);
    let ri = mat3_transpose(&a.rotation_matrix());
    let t = linalg::scale3(mat3_mul_vec3(&ri, a.translation), -1.0);
    CameraPose {
        rotation: quat_normalize(qi),
        translation: t,
    }
}
