//! Rigid transforms, 6-DoF poses and the equidistant fisheye projection.
//!
//! Frames follow the usual robotics conventions: vehicle and lidar frames are
//! x-forward, y-left, z-up; camera frames are x-right, y-down, z-forward.
//! A transform named `a_from_b` (or `T_a^b`) maps coordinates expressed in
//! frame `b` into frame `a`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Tolerance used when validating rotation blocks.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// 4x4 homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// Builds a transform from a rotation block and a translation. The
    /// rotation is trusted; use [`RigidTransform::from_matrix`] for untrusted
    /// input.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { matrix: m }
    }

    /// Validates and wraps a homogeneous matrix.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self, GeometryError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite entry".into()));
        }
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GeometryError::InvalidTransform(
                "last row must be [0, 0, 0, 1]".into(),
            ));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation block is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self { matrix })
    }

    /// Parses a row-major 4x4 array.
    pub fn from_row_major(rows: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn to_row_major(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Closed-form rigid inverse.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        RigidTransform::from_parts(rt, t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let m = &self.matrix;
        Vector3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    pub fn apply(&self, p: &HomogeneousPoint) -> HomogeneousPoint {
        HomogeneousPoint::from(self.transform_point(&p.xyz()))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`rotation_from_euler`], returning `(roll, pitch, yaw)`.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

/// 6-DoF pose: position in meters, roll/pitch/yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6 {
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            roll: normalize_angle(roll),
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
        }
    }

    /// Reads the `[x, y, z, roll, pitch, yaw]` layout used by the state vectors.
    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn to_transform(&self) -> RigidTransform {
        pose_to_transform(self)
    }

    pub fn from_transform(t: &RigidTransform) -> Self {
        let (roll, pitch, yaw) = euler_from_rotation(&t.rotation());
        let p = t.translation_vector();
        Self::new(p.x, p.y, p.z, roll, pitch, yaw)
    }
}

pub fn pose_to_transform(p: &Pose6) -> RigidTransform {
    RigidTransform::from_parts(
        rotation_from_euler(p.roll, p.pitch, p.yaw),
        Vector3::new(p.x, p.y, p.z),
    )
}

pub fn transform_compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn transform_invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SE(3) exponential of a twist `(rotation, translation)` expressed in the
/// body frame. Exact for constant twists, and `exp(-xi) = exp(xi)^-1`.
pub fn exp_se3(rotation: &Vector3<f64>, translation: &Vector3<f64>) -> RigidTransform {
    let theta2 = rotation.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(rotation);
    let k2 = k * k;
    // Series expansions below ~1e-4 rad keep the coefficients accurate to f64.
    let (a, b, c) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        (
            s / theta,
            (1.0 - co) / theta2,
            (theta - s) / (theta2 * theta),
        )
    };
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    RigidTransform::from_parts(r, v * translation)
}

/// A lidar or camera-frame 3D point in homogeneous form; `w` is always 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl HomogeneousPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn w(&self) -> f64 {
        1.0
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

impl From<Vector3<f64>> for HomogeneousPoint {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Equidistant fisheye intrinsics (focal lengths and principal point in
/// pixels, dimensionless skew and distortion coefficients).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisheyeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub width: u32,
    pub height: u32,
}

impl FisheyeIntrinsics {
    /// Distortion-free intrinsics with the principal point at the image center.
    pub fn ideal(f: f64, width: u32, height: u32) -> Self {
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            skew: 0.0,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            k4: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let vals = [
            self.fx, self.fy, self.cx, self.cy, self.skew, self.k1, self.k2, self.k3, self.k4,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `theta_d / theta` for the polynomial distortion model.
    fn distortion_factor(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4)))
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project_fisheye(self, p_cam)
    }

    /// Unit ray in the camera frame through pixel `(u, v)`.
    ///
    /// Inverts the distortion polynomial with Newton iterations. Pixels whose
    /// undistorted angle reaches 90 degrees or more have no forward ray and
    /// return `None`.
    pub fn unproject(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        let yp = (v - self.cy) / self.fy;
        let xp = (u - self.cx) / self.fx - self.skew * yp;
        let theta_d = (xp * xp + yp * yp).sqrt();
        if theta_d < 1e-12 {
            return Some(Vector3::new(0.0, 0.0, 1.0));
        }
        let mut theta = theta_d;
        for _ in 0..20 {
            let t2 = theta * theta;
            let f = theta * self.distortion_factor(theta) - theta_d;
            let df = 1.0
                + t2 * (3.0 * self.k1
                    + t2 * (5.0 * self.k2 + t2 * (7.0 * self.k3 + t2 * 9.0 * self.k4)));
            let step = f / df;
            theta -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        if !(0.0..PI / 2.0).contains(&theta) {
            return None;
        }
        let r = theta.tan();
        let a = xp / theta_d * r;
        let b = yp / theta_d * r;
        Some(Vector3::new(a, b, 1.0).normalize())
    }
}

/// Projects a camera-frame point with the equidistant fisheye model:
/// `a = x/z, b = y/z, r = |(a, b)|, theta = atan(r)`,
/// `theta_d = theta (1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8)`,
/// `x' = (theta_d / r) a, y' = (theta_d / r) b`,
/// `u = fx (x' + skew y') + cx, v = fy y' + cy`.
pub fn project_fisheye(
    k: &FisheyeIntrinsics,
    p_cam: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    if p_cam.z.is_nan() || p_cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    let a = p_cam.x / p_cam.z;
    let b = p_cam.y / p_cam.z;
    let r2 = a * a + b * b;
    let r = r2.sqrt();
    // atan(r)/r -> 1 - r^2/3 + r^4/5 near the optical axis; theta ~ r there.
    let scale = if r < 1e-6 {
        (1.0 - r2 / 3.0 + r2 * r2 / 5.0) * k.distortion_factor(r)
    } else {
        let theta = r.atan();
        theta * k.distortion_factor(theta) / r
    };
    let xd = scale * a;
    let yd = scale * b;
    Ok(Vector2::new(
        k.fx * (xd + k.skew * yd) + k.cx,
        k.fy * yd + k.cy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_transform(v: [f64; 6]) -> RigidTransform {
        Pose6::new(v[0], v[1], v[2], v[3], v[4], v[5]).to_transform()
    }

    #[test]
    fn zero_pose_is_identity() {
        let t = pose_to_transform(&Pose6::default());
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn pure_translation_pose() {
        let t = pose_to_transform(&Pose6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert_eq!(t.rotation(), Matrix3::identity());
        assert_eq!(t.translation_vector(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = pose_to_transform(&Pose6::new(0.0, 0.0, 0.0, 0.0, 0.0, PI / 2.0));
        let p = t.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn euler_order_is_yaw_pitch_roll() {
        let (r, p, y) = (0.1, -0.2, 0.3);
        let expect = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), y)
            * nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), p)
            * nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), r);
        assert_abs_diff_eq!(
            rotation_from_euler(r, p, y),
            *expect.matrix(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn compose_examples() {
        let t = random_transform([0.3, -1.0, 2.0, 0.2, 0.1, -0.7]);
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let id = t.compose(&t.inverse());
        assert_abs_diff_eq!(*id.matrix(), Matrix4::identity(), epsilon = 1e-9);
        let c = RigidTransform::translation(1.0, 0.0, 0.0)
            .compose(&RigidTransform::translation(0.0, 1.0, 0.0));
        assert_eq!(c, RigidTransform::translation(1.0, 1.0, 0.0));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(
            RigidTransform::identity().inverse(),
            RigidTransform::identity()
        );
        assert_eq!(
            RigidTransform::translation(1.0, 2.0, 3.0).inverse(),
            RigidTransform::translation(-1.0, -2.0, -3.0)
        );
    }

    #[test]
    fn from_matrix_rejects_bad_input() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(RigidTransform::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(RigidTransform::from_matrix(m).is_err());
        // reflection
        let mut m = Matrix4::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::from_matrix(m).is_err());
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn exp_se3_straight_line_and_inverse() {
        let t = exp_se3(&Vector3::zeros(), &Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(t, RigidTransform::translation(0.1, 0.0, 0.0));
        let w = Vector3::new(0.01, -0.2, 0.3);
        let v = Vector3::new(1.0, 0.5, -0.2);
        let back = exp_se3(&w, &v).compose(&exp_se3(&-w, &-v));
        assert_abs_diff_eq!(*back.matrix(), Matrix4::identity(), epsilon = 1e-14);
    }

    #[test]
    fn exp_se3_constant_turn_matches_arc() {
        // Unit speed forward with yaw rate 1 rad/s for pi/2 s: quarter circle of radius 1.
        let t = exp_se3(
            &Vector3::new(0.0, 0.0, PI / 2.0),
            &Vector3::new(PI / 2.0, 0.0, 0.0),
        );
        assert_abs_diff_eq!(
            t.translation_vector(),
            Vector3::new(1.0, 1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn exp_se3_series_matches_closed_form() {
        let w = Vector3::new(0.3, -0.5, 0.8).normalize() * 0.99e-4;
        let v = Vector3::new(1.0, 2.0, 3.0);
        let t = exp_se3(&w, &v);
        let th = w.norm();
        let k = skew(&w);
        let r = Matrix3::identity() + k * (th.sin() / th) + k * k * ((1.0 - th.cos()) / (th * th));
        let vm = Matrix3::identity()
            + k * ((1.0 - th.cos()) / (th * th))
            + k * k * ((th - th.sin()) / (th * th * th));
        assert_abs_diff_eq!(t.rotation(), r, epsilon = 1e-15);
        assert_abs_diff_eq!(t.translation_vector(), vm * v, epsilon = 1e-12);
    }

    fn camera() -> FisheyeIntrinsics {
        FisheyeIntrinsics {
            fx: 800.0,
            fy: 780.0,
            cx: 640.5,
            cy: 360.25,
            skew: 0.001,
            k1: 0.05,
            k2: -0.01,
            k3: 0.002,
            k4: -0.0005,
            width: 1280,
            height: 720,
        }
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let k = camera();
        let uv = project_fisheye(&k, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(uv, Vector2::new(k.cx, k.cy));
    }

    #[test]
    fn undistorted_45_degrees() {
        // a = 1, b = 0: r = 1, theta = atan(1), x' = theta, u = fx * atan(1) + cx
        let k = FisheyeIntrinsics::ideal(500.0, 1000, 800);
        let uv = project_fisheye(&k, &Vector3::new(2.0, 0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(uv.x, 500.0 * 1f64.atan() + k.cx, epsilon = 1e-12);
        assert_abs_diff_eq!(uv.y, k.cy, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let k = camera();
        assert_eq!(
            project_fisheye(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera(-1.0))
        );
        assert!(project_fisheye(&k, &Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn projection_continuous_at_axis() {
        let k = camera();
        let center = project_fisheye(&k, &Vector3::new(0.0, 0.0, 3.0)).unwrap();
        let mut prev = f64::INFINITY;
        for e in [1e-3, 1e-5, 1e-7, 1e-9, 1e-12] {
            let uv = project_fisheye(&k, &Vector3::new(e, 0.0, 3.0)).unwrap();
            let d = (uv - center).norm();
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-8);
        // The series branch and the closed form agree where they meet.
        let a = project_fisheye(&k, &Vector3::new(0.99e-6 * 3.0, 0.0, 3.0)).unwrap();
        let b = project_fisheye(&k, &Vector3::new(1.01e-6 * 3.0, 0.0, 3.0)).unwrap();
        assert!((a - b).norm() < 1e-3);
    }

    #[test]
    fn unproject_inverts_project() {
        let k = camera();
        for p in [
            Vector3::new(0.3, -0.2, 1.0),
            Vector3::new(-2.0, 1.0, 1.5),
            Vector3::new(0.0, 0.0, 1.0),
        ] {
            let uv = project_fisheye(&k, &p).unwrap();
            let ray = k.unproject(uv.x, uv.y).unwrap();
            assert_abs_diff_eq!(ray, p.normalize(), epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn rigid_invariants(v in proptest::array::uniform6(-3.0f64..3.0)) {
            let t = random_transform(v);
            prop_assert!((t.rotation().determinant() - 1.0).abs() < 1e-9);
            let id = t.compose(&t.inverse());
            prop_assert!((id.matrix() - Matrix4::identity()).amax() < 1e-9);
            let back = t.inverse().inverse();
            prop_assert!((back.matrix() - t.matrix()).amax() < 1e-12);
            prop_assert!(RigidTransform::from_matrix(*t.matrix()).is_ok());
        }

        #[test]
        fn pose_round_trip(v in proptest::array::uniform6(-1.5f64..1.5)) {
            let p = Pose6::new(v[0], v[1], v[2], v[3], v[4], v[5]);
            let q = Pose6::from_transform(&p.to_transform());
            for (a, b) in p.to_array().iter().zip(q.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_distortion_matches_equidistant(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.1f64..5.0,
        ) {
            let k = FisheyeIntrinsics::ideal(600.0, 1200, 900);
            let a = x / z;
            let b = y / z;
            let r = (a * a + b * b).sqrt();
            prop_assume!(r > 1e-6);
            let uv = project_fisheye(&k, &Vector3::new(x, y, z)).unwrap();
            let theta = r.atan();
            prop_assert!((uv.x - (k.fx * theta * a / r + k.cx)).abs() < 1e-9);
            prop_assert!((uv.y - (k.fy * theta * b / r + k.cy)).abs() < 1e-9);
        }
    }
}
