//! Per-packet motion correction of lidar points through the sigma poses of
//! the packet's ego-pose, and projection of the corrected sigma points into
//! a camera with recovered pixel covariance.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use rayon::prelude::*;

use crate::ego_motion::EgoPoseSequence;
use crate::geometry::{pose_to_transform, project_fisheye, FisheyeIntrinsics, Pose6, RigidTransform};
use crate::unscented::{recover_fixed, utd, GaussianState, SigmaWeights, UtError, UtParams};

/// Sigma points of a 6-DoF pose.
pub const POSE_SIGMA: usize = 13;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("{poses} poses supplied for {packets} packets")]
    PoseCount { poses: usize, packets: usize },
    #[error("packet {packet}: {source}")]
    Ut { packet: usize, source: UtError },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Position in the lidar frame, meters.
    pub p: Vector3<f64>,
    pub ring: u8,
    /// Firing azimuth, radians.
    pub azimuth: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarPacket {
    pub t: f64,
    pub points: Vec<LidarPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub packets: Vec<LidarPacket>,
}

impl LidarScan {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.packets.is_empty() {
            return Err(MotionError::InvalidScan("scan has no packets".into()));
        }
        for (i, pk) in self.packets.iter().enumerate() {
            if pk.points.is_empty() {
                return Err(MotionError::InvalidScan(format!("packet {i} has no points")));
            }
            if !pk.t.is_finite() {
                return Err(MotionError::InvalidScan(format!("packet {i} time is not finite")));
            }
            if i > 0 && !(pk.t > self.packets[i - 1].t) {
                return Err(MotionError::InvalidScan(format!(
                    "packet {i} time {} does not follow {}",
                    pk.t,
                    self.packets[i - 1].t
                )));
            }
            if pk.points.iter().any(|p| !p.p.iter().all(|v| v.is_finite())) {
                return Err(MotionError::InvalidScan(format!("packet {i} has non-finite points")));
            }
        }
        Ok(())
    }

    pub fn packet_times(&self) -> Vec<f64> {
        self.packets.iter().map(|p| p.t).collect()
    }

    pub fn point_count(&self) -> usize {
        self.packets.iter().map(|p| p.points.len()).sum()
    }

    /// Iterates `(packet, index, point)` in storage order.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize, &LidarPoint)> {
        self.packets
            .iter()
            .enumerate()
            .flat_map(|(i, pk)| pk.points.iter().enumerate().map(move |(j, p)| (i, j, p)))
    }
}

/// Corrected sigma positions of one packet: `sigma[j * 13 + k]` is point
/// `j` moved by sigma pose `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedPacket {
    pub weights: SigmaWeights,
    pub sigma: Vec<Vector3<f64>>,
}

impl CorrectedPacket {
    pub fn len(&self) -> usize {
        self.sigma.len() / POSE_SIGMA
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn point_sigma(&self, j: usize) -> &[Vector3<f64>] {
        &self.sigma[j * POSE_SIGMA..(j + 1) * POSE_SIGMA]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectedSigmaCloud {
    pub packets: Vec<CorrectedPacket>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPointGaussian {
    pub packet: usize,
    pub index: usize,
    pub mean_uv: Vector2<f64>,
    pub cov_uv: Matrix2<f64>,
    pub mean_xyz: Vector3<f64>,
    pub cov_xyz: Matrix3<f64>,
    /// Distance from the camera origin to the corrected mean, meters.
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Projection {
    pub points: Vec<ProjectedPointGaussian>,
    /// Points with a sigma position at or behind the image plane.
    pub not_visible: usize,
}

#[inline]
fn apply(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
        m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
        m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
    )
}

/// `Z = (T_veh^ld)^-1 . T_k^veh . T_veh^ld . z` for each of the 13 sigma
/// poses `T_k^veh` of `pose`.
pub fn correct_packet(
    pk: &LidarPacket,
    pose: &GaussianState,
    veh_from_ld: &RigidTransform,
    params: &UtParams,
) -> Result<CorrectedPacket, UtError> {
    if pose.dim() != 6 {
        return Err(UtError::Dimension(format!("pose has dimension {}", pose.dim())));
    }
    let sigma = utd(pose, params)?;
    let ld_from_veh = veh_from_ld.inverse();
    let sandwich: Vec<Matrix4<f64>> = (0..sigma.len())
        .map(|k| {
            let p = Pose6::from_slice(sigma.points.column(k).as_slice());
            *ld_from_veh
                .compose(&pose_to_transform(&p))
                .compose(veh_from_ld)
                .matrix()
        })
        .collect();
    let mut out = Vec::with_capacity(pk.points.len() * POSE_SIGMA);
    for pt in &pk.points {
        out.extend(sandwich.iter().map(|m| apply(m, &pt.p)));
    }
    Ok(CorrectedPacket {
        weights: sigma.weights,
        sigma: out,
    })
}

/// Corrects every packet with its pose from `poses` (same order).
pub fn correct_scan(
    scan: &LidarScan,
    poses: &EgoPoseSequence,
    veh_from_ld: &RigidTransform,
    params: &UtParams,
) -> Result<CorrectedSigmaCloud, MotionError> {
    if poses.entries.len() != scan.packets.len() {
        return Err(MotionError::PoseCount {
            poses: poses.entries.len(),
            packets: scan.packets.len(),
        });
    }
    let packets = scan
        .packets
        .par_iter()
        .zip(poses.entries.par_iter())
        .enumerate()
        .map(|(i, (pk, est))| {
            correct_packet(pk, &est.pose, veh_from_ld, params)
                .map_err(|source| MotionError::Ut { packet: i, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorrectedSigmaCloud { packets })
}

/// Per-point Gaussian of the corrected position, in storage order.
pub fn recover_corrected_points(c: &CorrectedSigmaCloud) -> Vec<(Vector3<f64>, Matrix3<f64>)> {
    c.packets
        .iter()
        .flat_map(|pk| (0..pk.len()).map(move |j| recover_fixed(pk.point_sigma(j), &pk.weights)))
        .collect()
}

/// Projects every corrected point's sigma positions and recovers its pixel
/// Gaussian. Points with any sigma position at `z <= 0` in the camera frame
/// are left out and counted.
pub fn project_corrected(
    c: &CorrectedSigmaCloud,
    cam_from_ld: &RigidTransform,
    k: &FisheyeIntrinsics,
) -> Projection {
    let m = *cam_from_ld.matrix();
    let per_packet: Vec<(Vec<ProjectedPointGaussian>, usize)> = c
        .packets
        .par_iter()
        .enumerate()
        .map(|(i, pk)| {
            let mut pts = Vec::new();
            let mut hidden = 0;
            let mut uv = [Vector2::zeros(); POSE_SIGMA];
            'points: for j in 0..pk.len() {
                let sig = pk.point_sigma(j);
                for (slot, z) in uv.iter_mut().zip(sig) {
                    match project_fisheye(k, &apply(&m, z)) {
                        Ok(p) => *slot = p,
                        Err(_) => {
                            hidden += 1;
                            continue 'points;
                        }
                    }
                }
                let (mean_uv, cov_uv) = recover_fixed(&uv, &pk.weights);
                let (mean_xyz, cov_xyz) = recover_fixed(sig, &pk.weights);
                pts.push(ProjectedPointGaussian {
                    packet: i,
                    index: j,
                    mean_uv,
                    cov_uv,
                    mean_xyz,
                    cov_xyz,
                    range: apply(&m, &mean_xyz).norm(),
                });
            }
            (pts, hidden)
        })
        .collect();
    let mut out = Projection::default();
    for (pts, hidden) in per_packet {
        out.points.extend(pts);
        out.not_visible += hidden;
    }
    out
}

/// Projection of the raw, uncorrected points with no uncertainty; the label
/// transfer then reduces to a nearest-pixel lookup.
pub fn project_raw(scan: &LidarScan, cam_from_ld: &RigidTransform, k: &FisheyeIntrinsics) -> Projection {
    let m = *cam_from_ld.matrix();
    let mut out = Projection::default();
    for (i, j, pt) in scan.points() {
        let pc = apply(&m, &pt.p);
        match project_fisheye(k, &pc) {
            Ok(uv) => out.points.push(ProjectedPointGaussian {
                packet: i,
                index: j,
                mean_uv: uv,
                cov_uv: Matrix2::zeros(),
                mean_xyz: pt.p,
                cov_xyz: Matrix3::zeros(),
                range: pc.norm(),
            }),
            Err(_) => out.not_visible += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn packet(points: &[[f64; 3]]) -> LidarPacket {
        LidarPacket {
            t: 0.0,
            points: points
                .iter()
                .map(|p| LidarPoint {
                    p: Vector3::from(*p),
                    ring: 0,
                    azimuth: 0.0,
                })
                .collect(),
        }
    }

    fn pose(mean: [f64; 6], cov: DMatrix<f64>) -> GaussianState {
        GaussianState::new(DVector::from_row_slice(&mean), cov).unwrap()
    }

    #[test]
    fn zero_pose_leaves_points_unchanged() {
        let pk = packet(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]]);
        let t = Pose6::new(0.5, 0.1, 1.8, 0.01, -0.02, 0.3).to_transform();
        let c = correct_packet(&pk, &GaussianState::zeros(6), &t, &UtParams::default()).unwrap();
        for j in 0..2 {
            for z in c.point_sigma(j) {
                assert_abs_diff_eq!(*z, pk.points[j].p, epsilon = 1e-12);
            }
        }
        let cloud = CorrectedSigmaCloud { packets: vec![c] };
        for (j, (m, cov)) in recover_corrected_points(&cloud).iter().enumerate() {
            assert_abs_diff_eq!(*m, pk.points[j].p, epsilon = 1e-12);
            assert!(cov.amax() < 1e-24);
        }
    }

    #[test]
    fn pure_translation_shifts_points() {
        let pk = packet(&[[1.0, 2.0, 3.0], [5.0, -1.0, 0.2]]);
        let c = correct_packet(
            &pk,
            &pose([0.1, 0.0, 0.0, 0.0, 0.0, 0.0], DMatrix::zeros(6, 6)),
            &RigidTransform::identity(),
            &UtParams::default(),
        )
        .unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(
                c.point_sigma(j)[0],
                pk.points[j].p + Vector3::new(0.1, 0.0, 0.0),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn yaw_sandwich_matches_matrix_oracle() {
        let pk = packet(&[[3.0, -1.0, 0.5]]);
        let veh_from_ld = RigidTransform::translation(0.4, 0.0, 1.9);
        let c = correct_packet(
            &pk,
            &pose([0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2], DMatrix::zeros(6, 6)),
            &veh_from_ld,
            &UtParams::default(),
        )
        .unwrap();
        #[rustfmt::skip]
        let rz = nalgebra::Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let tl = veh_from_ld.matrix();
        let tl_inv = nalgebra::Matrix4::new_translation(&Vector3::new(-0.4, 0.0, -1.9));
        let z = tl_inv * rz * tl * nalgebra::Vector4::new(3.0, -1.0, 0.5, 1.0);
        assert_abs_diff_eq!(c.point_sigma(0)[0], z.xyz(), epsilon = 1e-12);
    }

    #[test]
    fn translation_uncertainty_passes_through() {
        let mut cov = DMatrix::zeros(6, 6);
        cov[(0, 0)] = 0.04;
        cov[(1, 1)] = 0.01;
        cov[(0, 1)] = 0.005;
        cov[(1, 0)] = 0.005;
        cov[(2, 2)] = 0.002;
        let pk = packet(&[[7.0, 1.0, -0.3]]);
        let c = correct_packet(&pk, &pose([0.2, 0.0, 0.0, 0.0, 0.0, 0.0], cov.clone()), &RigidTransform::identity(), &UtParams::default())
            .unwrap();
        let (_, cxyz) = recover_corrected_points(&CorrectedSigmaCloud { packets: vec![c] })[0];
        for r in 0..3 {
            for col in 0..3 {
                assert_abs_diff_eq!(cxyz[(r, col)], cov[(r, col)], epsilon = 1e-12);
            }
        }
    }

    fn camera() -> FisheyeIntrinsics {
        FisheyeIntrinsics {
            k1: 0.02,
            k2: -0.004,
            ..FisheyeIntrinsics::ideal(700.0, 800, 600)
        }
    }

    /// Camera looking along the lidar x axis.
    fn cam_from_ld() -> RigidTransform {
        RigidTransform::from_parts(
            nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            Vector3::new(0.0, -0.3, -0.1),
        )
    }

    #[test]
    fn optical_axis_point_projects_to_principal_point() {
        let k = camera();
        let t = RigidTransform::identity();
        let pk = packet(&[[0.0, 0.0, 6.0], [0.0, 0.0, -2.0]]);
        let c = correct_packet(&pk, &GaussianState::zeros(6), &t, &UtParams::default()).unwrap();
        let proj = project_corrected(&CorrectedSigmaCloud { packets: vec![c] }, &t, &k);
        assert_eq!(proj.points.len(), 1);
        assert_eq!(proj.not_visible, 1);
        let p = &proj.points[0];
        assert_abs_diff_eq!(p.mean_uv, Vector2::new(k.cx, k.cy), epsilon = 1e-12);
        assert!(p.cov_uv.amax() < 1e-20);
        assert_abs_diff_eq!(p.range, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_covariance_projection_is_consistent() {
        let k = camera();
        let pk = packet(&[[8.0, 1.5, -0.4], [12.0, -3.0, 1.0]]);
        let veh = Pose6::new(0.1, 0.2, 1.5, 0.0, 0.01, 0.2).to_transform();
        let c = correct_packet(&pk, &pose([0.3, 0.02, 0.0, 0.0, 0.0, 0.05], DMatrix::zeros(6, 6)), &veh, &UtParams::default())
            .unwrap();
        let proj = project_corrected(&CorrectedSigmaCloud { packets: vec![c] }, &cam_from_ld(), &k);
        for p in &proj.points {
            let direct = project_fisheye(&k, &cam_from_ld().transform_point(&p.mean_xyz)).unwrap();
            assert_abs_diff_eq!(p.mean_uv, direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn any_sigma_behind_camera_hides_point() {
        // A point just in front of the camera with a large lateral pose spread
        // has sigma positions behind the image plane.
        let k = camera();
        let mut cov = DMatrix::zeros(6, 6);
        cov[(0, 0)] = 1.0;
        let pk = packet(&[[0.5, 0.0, 0.0]]);
        let c = correct_packet(&pk, &pose([0.0; 6], cov), &RigidTransform::identity(), &UtParams::default()).unwrap();
        let proj = project_corrected(&CorrectedSigmaCloud { packets: vec![c] }, &cam_from_ld(), &k);
        assert!(proj.points.is_empty());
        assert_eq!(proj.not_visible, 1);
    }

    #[test]
    fn lateral_uncertainty_elongates_along_u() {
        // Pose noise along lidar y (camera -x): pixel covariance along u only.
        let k = FisheyeIntrinsics::ideal(700.0, 800, 600);
        let mut cov = DMatrix::zeros(6, 6);
        cov[(1, 1)] = 0.01;
        let pk = packet(&[[10.0, 0.0, -0.1]]);
        let cam = RigidTransform::from_parts(
            nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            Vector3::zeros(),
        );
        let c = correct_packet(&pk, &pose([0.0; 6], cov), &RigidTransform::identity(), &UtParams::default()).unwrap();
        let p = project_corrected(&CorrectedSigmaCloud { packets: vec![c] }, &cam, &k).points[0];
        assert!(p.cov_uv[(0, 0)] > 1.0);
        assert!(p.cov_uv[(1, 1)] < 1e-6 * p.cov_uv[(0, 0)]);
    }

    #[test]
    fn pixel_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = camera();
        let veh_from_ld = Pose6::new(0.0, 0.0, 1.9, 0.0, 0.0, 0.0).to_transform();
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let scale = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.05, 0.05, 0.02, 0.005, 0.005, 0.01]));
        let cov = &scale * (&a * a.transpose()) * &scale;
        let mean = [0.3, 0.05, 0.0, 0.0, 0.0, 0.04];
        let pk = packet(&[[9.0, 1.2, -0.8]]);
        let g = pose(mean, cov.clone());
        let c = correct_packet(&pk, &g, &veh_from_ld, &UtParams::default()).unwrap();
        let p = project_corrected(&CorrectedSigmaCloud { packets: vec![c] }, &cam_from_ld(), &k).points[0];

        let l = cov.cholesky().unwrap().l();
        let n = 100_000;
        let mut sum = Vector2::zeros();
        let mut sq = Matrix2::zeros();
        let normal = rand_distr::StandardNormal;
        for _ in 0..n {
            let e = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(normal));
            let x = DVector::from_row_slice(&mean) + &l * e;
            let t = veh_from_ld.inverse().compose(&Pose6::from_slice(x.as_slice()).to_transform()).compose(&veh_from_ld);
            let uv = project_fisheye(&k, &cam_from_ld().transform_point(&t.transform_point(&pk.points[0].p))).unwrap();
            sum += uv;
            sq += uv * uv.transpose();
        }
        let m = sum / n as f64;
        let mc = sq / n as f64 - m * m.transpose();
        assert!((mc - p.cov_uv).norm() / mc.norm() < 0.1);
    }

    #[test]
    fn raw_projection_has_no_uncertainty() {
        let scan = LidarScan { packets: vec![packet(&[[5.0, 0.0, 0.0], [-5.0, 0.0, 0.0]])] };
        let proj = project_raw(&scan, &cam_from_ld(), &camera());
        assert_eq!(proj.points.len(), 1);
        assert_eq!(proj.not_visible, 1);
        assert_eq!(proj.points[0].cov_uv, Matrix2::zeros());
    }

    #[test]
    fn scan_validation() {
        let mut scan = LidarScan { packets: vec![packet(&[[1.0, 0.0, 0.0]]), packet(&[[1.0, 0.0, 0.0]])] };
        assert!(scan.validate().is_err());
        scan.packets[1].t = 0.001;
        scan.validate().unwrap();
        scan.packets[1].points.clear();
        assert!(scan.validate().is_err());
    }
}
