//! SE(3) pose algebra, pinhole projection and reprojection residuals.
//!
//! Poses follow the world-to-camera convention: `p_cam = R * p_world + t`.
//! Twists are ordered rotation-first, `xi = [omega; v]`, and pose updates
//! are applied by left multiplication, `pose' = exp(xi) * pose`. Residuals
//! are whitened by the per-observation measurement deviation so downstream
//! kernels can run at unit scale.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3, Vector6};

use crate::{invalid, Result};

/// Points closer to the image plane than this (meters) count as behind
/// the camera.
pub const Z_MIN: f64 = 1e-6;

pub type PoseJacobian = SMatrix<f64, 2, 6>;
pub type PointJacobian = SMatrix<f64, 2, 3>;

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// True when the rotation block is orthonormal with determinant +1
    /// within `tol`.
    pub fn has_valid_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Relative pose `self^-1 * other`.
    pub fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation exponential map (Rodrigues).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-12 {
        // theta^4 terms fall below f64 resolution here.
        Matrix3::identity() + k * (1.0 - theta2 / 6.0) + k * k * (0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / theta2)
    }
}

/// Rotation logarithm; valid for angles below pi.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-6 {
        vee * (0.5 + theta * theta / 12.0)
    } else if theta > std::f64::consts::PI - 1e-6 {
        // Near pi the vee part vanishes; recover the axis from the
        // diagonal of R = I + sin(t) K + (1 - cos(t)) K^2, then take the
        // relative signs from the symmetric off-diagonal sums.
        let one_minus_cos = 1.0 - cos_theta;
        let mut axis = Vector3::new(
            ((r[(0, 0)] - cos_theta) / one_minus_cos).max(0.0).sqrt(),
            ((r[(1, 1)] - cos_theta) / one_minus_cos).max(0.0).sqrt(),
            ((r[(2, 2)] - cos_theta) / one_minus_cos).max(0.0).sqrt(),
        );
        let k = axis.iamax();
        let (i, j) = match k {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let denom = 2.0 * one_minus_cos * axis[k];
        axis[i] = (r[(i, k)] + r[(k, i)]) / denom;
        axis[j] = (r[(j, k)] + r[(k, j)]) / denom;
        let mut w = axis.normalize() * theta;
        if vee.dot(&w) < 0.0 {
            w = -w;
        }
        w
    } else {
        vee * (theta / (2.0 * theta.sin()))
    }
}

/// Left Jacobian of SO(3), mapping twist translations into group
/// translations inside the exponential.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-12 {
        Matrix3::identity() + k * (0.5 - theta2 / 24.0) + k * k * (1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity()
            + k * ((1.0 - theta.cos()) / theta2)
            + k * k * ((theta - theta.sin()) / (theta2 * theta))
    }
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-12 {
        Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0 + theta2 / 720.0)
    } else {
        let theta = theta2.sqrt();
        let half = theta / 2.0;
        let cot_term = 1.0 / theta2 - half.cos() / (2.0 * theta * half.sin());
        Matrix3::identity() - k * 0.5 + k * k * cot_term
    }
}

/// Exponential map from a twist `xi = [omega; v]` (rotation-first) to a
/// pose: `R = exp([omega]x)`, `t = J_l(omega) v`.
pub fn se3_exp(xi: &Vector6<f64>) -> SE3Pose {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    SE3Pose { rotation: so3_exp(&omega), translation: so3_left_jacobian(&omega) * v }
}

/// Inverse of [`se3_exp`]; valid for rotation angles below pi.
pub fn se3_log(pose: &SE3Pose) -> Vector6<f64> {
    let omega = so3_log(&pose.rotation);
    let v = so3_left_jacobian_inv(&omega) * pose.translation;
    Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Pinhole camera model without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        if cx <= 0.0 || cx >= width as f64 || cy <= 0.0 || cy >= height as f64 {
            return Err(invalid("principal point must lie inside the image"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width as f64 && pixel.y >= 0.0 && pixel.y < self.height as f64
    }
}

/// A landmark with a stable identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f64>,
}

impl MapPoint {
    pub fn new(id: u64, position: Vector3<f64>) -> Self {
        Self { id, position }
    }
}

/// A measured keypoint location for one landmark in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point_id: u64,
    pub frame_id: usize,
    pub pixel: Vector2<f64>,
    /// Measurement standard deviation in pixels; whitening divides by this.
    pub sigma: f64,
}

impl Observation {
    pub fn new(point_id: u64, frame_id: usize, pixel: Vector2<f64>, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid(format!("observation sigma must be > 0, got {sigma}")));
        }
        Ok(Self { point_id, frame_id, pixel, sigma })
    }
}

/// Projects a world point. `None` signals the point is behind the camera
/// (camera-frame depth at most [`Z_MIN`]).
pub fn project(pose: &SE3Pose, point: &Vector3<f64>, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    project_with_depth(pose, point, intr).map(|(px, _)| px)
}

/// As [`project`], also returning the camera-frame depth.
pub fn project_with_depth(
    pose: &SE3Pose,
    point: &Vector3<f64>,
    intr: &CameraIntrinsics,
) -> Option<(Vector2<f64>, f64)> {
    let pc = pose.transform(point);
    if pc.z <= Z_MIN {
        return None;
    }
    let px = Vector2::new(intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy);
    Some((px, pc.z))
}

/// Camera-frame point for a pixel at a given depth.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - intr.cx) * depth / intr.fx,
        (pixel.y - intr.cy) * depth / intr.fy,
        depth,
    )
}

/// Whitened reprojection residual `(u - pi(T x)) / sigma`, or `None` when
/// the point is behind the camera and the observation must be dropped for
/// this linearization.
pub fn reprojection_residual(
    obs: &Observation,
    pose: &SE3Pose,
    point: &Vector3<f64>,
    intr: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let proj = project(pose, point, intr)?;
    Some((obs.pixel - proj) / obs.sigma)
}

/// Analytic Jacobians of the whitened residual with respect to a
/// left-multiplied pose increment and to the world point.
pub fn residual_jacobians(
    obs: &Observation,
    pose: &SE3Pose,
    point: &Vector3<f64>,
    intr: &CameraIntrinsics,
) -> Option<(PoseJacobian, PointJacobian)> {
    let pc = pose.transform(point);
    if pc.z <= Z_MIN {
        return None;
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    // d(pi)/d(p_cam)
    let dpi = PointJacobian::new(
        intr.fx * iz,
        0.0,
        -intr.fx * pc.x * iz2,
        0.0,
        intr.fy * iz,
        -intr.fy * pc.y * iz2,
    );
    let scale = -1.0 / obs.sigma;
    // p_cam(xi) = exp(xi) p_cam, so dp/domega = -[p_cam]x and dp/dv = I.
    let mut dp_dxi = SMatrix::<f64, 3, 6>::zeros();
    dp_dxi.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&pc)));
    dp_dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let j_pose = scale * dpi * dp_dxi;
    let j_point = scale * dpi * pose.rotation;
    Some((j_pose, j_point))
}
