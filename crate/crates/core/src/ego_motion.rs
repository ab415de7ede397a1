//! Gaussian vehicle pose at each lidar packet time, relative to the vehicle
//! frame at a reference time, propagated with the unscented transform.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{exp_se3, pose_to_transform, Pose6};
use crate::unscented::{recover_columns, utd, GaussianState, UtError, UtParams};

/// Dimension of the augmented state `[pose(6), v(3), w(3), t_a, t_b]`.
pub const AUGMENTED_DIM: usize = 14;

/// Initial pose covariance diagonal at the reference time. The unscented
/// mean of a corrected point shifts by about this times its range, so it is
/// kept small enough for zero motion to reproduce raw points to 1e-12.
pub const INIT_COV: f64 = 1e-16;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EgoMotionError {
    #[error("velocity stream is empty")]
    EmptyStream,
    #[error("packet timestamps are not strictly ascending at index {0}")]
    NotAscending(usize),
    #[error(transparent)]
    Ut(#[from] UtError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub t: f64,
    /// Linear velocity in the body frame, m/s.
    pub v: Vector3<f64>,
    /// Angular rates, rad/s; see [`AngularRates`] for the interpretation.
    pub w: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityNoise {
    pub sigma_v: Matrix3<f64>,
    pub sigma_w: Matrix3<f64>,
    /// Standard deviation of packet timestamp jitter, seconds.
    pub sigma_t: f64,
}

impl Default for VelocityNoise {
    fn default() -> Self {
        Self {
            sigma_v: Matrix3::identity() * 0.01,
            sigma_w: Matrix3::identity() * 1e-4,
            sigma_t: 1e-4,
        }
    }
}

impl VelocityNoise {
    pub fn noiseless() -> Self {
        Self {
            sigma_v: Matrix3::zeros(),
            sigma_w: Matrix3::zeros(),
            sigma_t: 0.0,
        }
    }
}

/// How the angular part of a velocity sample is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularRates {
    /// Body-frame rotation rates about x, y, z.
    #[default]
    Body,
    /// Roll, pitch and yaw angle rates; converted to body rates at the
    /// current attitude.
    EulerRates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub t: f64,
    /// Mean layout `[x, y, z, roll, pitch, yaw]`.
    pub pose: GaussianState,
}

impl PoseEstimate {
    pub fn mean_pose(&self) -> Pose6 {
        Pose6::from_slice(self.pose.mean.as_slice())
    }
}

/// One estimate per packet timestamp, in packet order.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPoseSequence {
    pub t_ref: f64,
    pub entries: Vec<PoseEstimate>,
}

/// Closest sample in time; ties go to the earlier sample and queries
/// outside the stream clamp to its ends.
pub fn nearest_velocity(stream: &[VelocitySample], t: f64) -> Result<VelocitySample, EgoMotionError> {
    if stream.is_empty() {
        return Err(EgoMotionError::EmptyStream);
    }
    let i = stream.partition_point(|s| s.t < t);
    if i == 0 {
        return Ok(stream[0]);
    }
    if i == stream.len() {
        return Ok(stream[i - 1]);
    }
    let before = &stream[i - 1];
    let after = &stream[i];
    if t - before.t <= after.t - t {
        Ok(*before)
    } else {
        Ok(*after)
    }
}

fn body_rates(pose: &Pose6, w: &Vector3<f64>, rates: AngularRates) -> Vector3<f64> {
    match rates {
        AngularRates::Body => *w,
        AngularRates::EulerRates => {
            let (sr, cr) = pose.roll.sin_cos();
            let (sp, cp) = pose.pitch.sin_cos();
            let (dr, dp, dy) = (w.x, w.y, w.z);
            Vector3::new(
                dr - dy * sp,
                dp * cr + dy * sr * cp,
                -dp * sr + dy * cr * cp,
            )
        }
    }
}

/// Integrates a constant body twist over `t_to - t_from` (which may be negative).
pub fn kinematic_step(
    pose: &Pose6,
    v: &Vector3<f64>,
    w: &Vector3<f64>,
    t_from: f64,
    t_to: f64,
    rates: AngularRates,
) -> Pose6 {
    let dt = t_to - t_from;
    if dt == 0.0 || (v.iter().all(|&x| x == 0.0) && w.iter().all(|&x| x == 0.0)) {
        return *pose;
    }
    let w = body_rates(pose, w, rates);
    let t = pose_to_transform(pose).compose(&exp_se3(&(w * dt), &(v * dt)));
    Pose6::from_transform(&t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Branch {
    Backward,
    Forward,
}

#[allow(clippy::too_many_arguments)]
fn predict_step(
    state: &GaussianState,
    t_star: f64,
    t_i: f64,
    sample: &VelocitySample,
    noise: &VelocityNoise,
    params: &UtParams,
    branch: Branch,
    rates: AngularRates,
) -> Result<GaussianState, EgoMotionError> {
    let mut mean = DVector::zeros(AUGMENTED_DIM);
    mean.rows_mut(0, 6).copy_from(&state.mean);
    mean.fixed_rows_mut::<3>(6).copy_from(&sample.v);
    mean.fixed_rows_mut::<3>(9).copy_from(&sample.w);
    let (ta, tb) = match branch {
        Branch::Backward => (t_i, t_star),
        Branch::Forward => (t_star, t_i),
    };
    mean[12] = ta;
    mean[13] = tb;
    let mut cov = DMatrix::zeros(AUGMENTED_DIM, AUGMENTED_DIM);
    cov.view_mut((0, 0), (6, 6)).copy_from(&state.cov);
    cov.fixed_view_mut::<3, 3>(6, 6).copy_from(&noise.sigma_v);
    cov.fixed_view_mut::<3, 3>(9, 9).copy_from(&noise.sigma_w);
    let var_t = noise.sigma_t * noise.sigma_t;
    cov[(12, 12)] = var_t;
    cov[(13, 13)] = var_t;

    let sigma = utd(&GaussianState { mean, cov }, params)?;
    let mut mapped = DMatrix::zeros(6, sigma.len());
    for j in 0..sigma.len() {
        let x = sigma.points.column(j);
        let pose = Pose6::from_slice(&x.as_slice()[0..6]);
        let v = Vector3::new(x[6], x[7], x[8]);
        let w = Vector3::new(x[9], x[10], x[11]);
        // Always predict from t_* to t_i; the slot order only differs by branch.
        let (from, to) = match branch {
            Branch::Backward => (x[13], x[12]),
            Branch::Forward => (x[12], x[13]),
        };
        let y = kinematic_step(&pose, &v, &w, from, to, rates);
        mapped.column_mut(j).copy_from_slice(&y.to_array());
    }
    Ok(recover_columns(&mapped, &sigma.weights))
}

/// Predicts the vehicle pose at every packet time relative to the vehicle
/// frame at `t_ref`. Packets before `t_ref` are chained backward from the
/// reference, the rest forward.
pub fn predict_ego_motion(
    t_ref: f64,
    packet_times: &[f64],
    stream: &[VelocitySample],
    noise: &VelocityNoise,
    params: &UtParams,
    rates: AngularRates,
) -> Result<EgoPoseSequence, EgoMotionError> {
    if stream.is_empty() {
        return Err(EgoMotionError::EmptyStream);
    }
    if let Some(i) = packet_times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(EgoMotionError::NotAscending(i + 1));
    }
    let init = GaussianState {
        mean: DVector::zeros(6),
        cov: DMatrix::identity(6, 6) * INIT_COV,
    };
    let mut out: Vec<Option<GaussianState>> = vec![None; packet_times.len()];
    let split = packet_times.partition_point(|&t| t < t_ref);

    // Times are handled relative to t_ref so the jitter variance is not
    // swamped by large absolute clock values.
    let mut state = init.clone();
    let mut t_star = 0.0;
    for i in (0..split).rev() {
        let t_i = packet_times[i] - t_ref;
        let sample = nearest_velocity(stream, packet_times[i])?;
        state = predict_step(&state, t_star, t_i, &sample, noise, params, Branch::Backward, rates)?;
        t_star = t_i;
        out[i] = Some(state.clone());
    }
    let mut state = init;
    let mut t_star = 0.0;
    for i in split..packet_times.len() {
        let t_i = packet_times[i] - t_ref;
        let sample = nearest_velocity(stream, packet_times[i])?;
        state = predict_step(&state, t_star, t_i, &sample, noise, params, Branch::Forward, rates)?;
        t_star = t_i;
        out[i] = Some(state.clone());
    }
    Ok(EgoPoseSequence {
        t_ref,
        entries: packet_times
            .iter()
            .zip(out)
            .map(|(&t, pose)| PoseEstimate {
                t,
                pose: pose.expect("every packet lies on one branch"),
            })
            .collect(),
    })
}

/// Dead-reckoned pose of the vehicle at each query time, relative to the
/// vehicle at `stream[0].t`. Integrates each sample's twist until the next
/// sample; queries must be ascending.
pub fn integrate_odometry(
    stream: &[VelocitySample],
    query_times: &[f64],
    rates: AngularRates,
) -> Result<Vec<Pose6>, EgoMotionError> {
    if stream.is_empty() {
        return Err(EgoMotionError::EmptyStream);
    }
    if let Some(i) = query_times.windows(2).position(|w| w[1] < w[0]) {
        return Err(EgoMotionError::NotAscending(i + 1));
    }
    let mut out = Vec::with_capacity(query_times.len());
    let mut pose = Pose6::default();
    let mut t = stream[0].t;
    let mut k = 0;
    for &q in query_times {
        // Advance through whole sample intervals ending before q.
        while k + 1 < stream.len() && stream[k + 1].t <= q {
            let s = &stream[k];
            pose = kinematic_step(&pose, &s.v, &s.w, t, stream[k + 1].t, rates);
            t = stream[k + 1].t;
            k += 1;
        }
        let s = &stream[k];
        out.push(kinematic_step(&pose, &s.v, &s.w, t, q, rates));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(t: f64, v: [f64; 3], w: [f64; 3]) -> VelocitySample {
        VelocitySample {
            t,
            v: Vector3::from(v),
            w: Vector3::from(w),
        }
    }

    fn constant_stream(v: [f64; 3], w: [f64; 3], t0: f64, t1: f64) -> Vec<VelocitySample> {
        let n = ((t1 - t0) / 0.01).round() as usize;
        (0..=n).map(|i| sample(t0 + i as f64 * 0.01, v, w)).collect()
    }

    #[test]
    fn nearest_velocity_examples() {
        let s = vec![sample(0.0, [1.0, 0.0, 0.0], [0.0; 3]), sample(0.01, [2.0, 0.0, 0.0], [0.0; 3])];
        assert_eq!(nearest_velocity(&s, 0.004).unwrap().t, 0.0);
        assert_eq!(nearest_velocity(&s, 0.01).unwrap().t, 0.01);
        assert_eq!(nearest_velocity(&s, 0.005).unwrap().t, 0.0);
        assert_eq!(nearest_velocity(&s, 5.0).unwrap().t, 0.01);
        assert_eq!(nearest_velocity(&s, -5.0).unwrap().t, 0.0);
        assert_eq!(nearest_velocity(&[], 0.0), Err(EgoMotionError::EmptyStream));
    }

    #[test]
    fn kinematic_step_examples() {
        let p = Pose6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        assert_eq!(
            kinematic_step(&p, &Vector3::zeros(), &Vector3::zeros(), 0.0, 5.0, AngularRates::Body),
            p
        );
        let q = kinematic_step(
            &Pose6::default(),
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::zeros(),
            0.0,
            0.1,
            AngularRates::Body,
        );
        assert_abs_diff_eq!(q.x, 0.1, epsilon = 1e-15);
        assert_eq!((q.y, q.z, q.roll, q.pitch, q.yaw), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn kinematic_step_is_reversible() {
        let p = Pose6::new(0.5, -0.2, 0.1, 0.05, -0.02, 0.7);
        let v = Vector3::new(8.0, 0.3, -0.1);
        let w = Vector3::new(0.02, -0.01, 0.4);
        let there = kinematic_step(&p, &v, &w, 0.0, 0.05, AngularRates::Body);
        let back = kinematic_step(&there, &v, &w, 0.05, 0.0, AngularRates::Body);
        for (a, b) in p.to_array().iter().zip(back.to_array()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn euler_rates_pure_yaw_match_body_rates_when_level() {
        let v = Vector3::new(1.0, 0.0, 0.0);
        let w = Vector3::new(0.0, 0.0, 0.5);
        let a = kinematic_step(&Pose6::default(), &v, &w, 0.0, 0.1, AngularRates::Body);
        let b = kinematic_step(&Pose6::default(), &v, &w, 0.0, 0.1, AngularRates::EulerRates);
        assert_eq!(a, b);
        // With a pitched attitude the yaw rate needs roll/pitch body components.
        let p = Pose6::new(0.0, 0.0, 0.0, 0.0, 0.3, 0.0);
        let c = kinematic_step(&p, &Vector3::zeros(), &w, 0.0, 0.01, AngularRates::EulerRates);
        assert_abs_diff_eq!(c.yaw, 0.005, epsilon = 1e-6);
        assert_abs_diff_eq!(c.pitch, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(c.roll, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_velocity_stays_at_origin() {
        let stream = constant_stream([0.0; 3], [0.0; 3], 0.0, 0.2);
        let times: Vec<f64> = (0..10).map(|i| 0.01 + i as f64 * 0.013).collect();
        let seq = predict_ego_motion(
            0.07,
            &times,
            &stream,
            &VelocityNoise { sigma_t: 1e-3, ..VelocityNoise::noiseless() },
            &UtParams::default(),
            AngularRates::Body,
        )
        .unwrap();
        for e in &seq.entries {
            assert!(e.pose.mean.amax() < 1e-15);
            assert!(e.pose.cov.amax() < 1e-11);
        }
    }

    #[test]
    fn straight_line_means() {
        let stream = constant_stream([1.0, 0.0, 0.0], [0.0; 3], 0.0, 1.0);
        let t_ref = 0.5;
        let seq = predict_ego_motion(
            t_ref,
            &[t_ref - 0.02, t_ref - 0.01, t_ref + 0.01, t_ref + 0.02],
            &stream,
            &VelocityNoise::noiseless(),
            &UtParams::default(),
            AngularRates::Body,
        )
        .unwrap();
        let xs: Vec<f64> = seq.entries.iter().map(|e| e.pose.mean[0]).collect();
        for (x, expect) in xs.iter().zip([-0.02, -0.01, 0.01, 0.02]) {
            assert_abs_diff_eq!(*x, expect, epsilon = 1e-12);
        }
        for e in &seq.entries {
            assert!(e.pose.mean.rows(1, 5).amax() < 1e-12);
        }
    }

    #[test]
    fn packet_at_reference_keeps_init_covariance() {
        let stream = constant_stream([3.0, 0.0, 0.0], [0.0, 0.0, 0.2], 0.0, 1.0);
        let noise = VelocityNoise { sigma_t: 0.0, ..Default::default() };
        let seq = predict_ego_motion(0.3, &[0.3, 0.31], &stream, &noise, &UtParams::default(), AngularRates::Body)
            .unwrap();
        // Only the Cholesky jitter on the zero-variance time slots leaks in.
        assert_abs_diff_eq!(seq.entries[0].pose.cov, DMatrix::identity(6, 6) * INIT_COV, epsilon = 1e-13);
        assert!(seq.entries[1].pose.cov.trace() > 1e-6);
    }

    #[test]
    fn rejects_unsorted_packets() {
        let stream = constant_stream([0.0; 3], [0.0; 3], 0.0, 1.0);
        let r = predict_ego_motion(0.0, &[0.1, 0.1], &stream, &VelocityNoise::default(), &UtParams::default(), AngularRates::Body);
        assert_eq!(r, Err(EgoMotionError::NotAscending(1)));
    }

    #[test]
    fn branch_symmetry() {
        // Reflect timestamps about t_ref and negate the linear velocity and yaw rate.
        let v = [4.0, 0.5, 0.0];
        let w = [0.0, 0.0, 0.3];
        let t_ref = 1.0;
        let times: Vec<f64> = (1..8).map(|i| t_ref + i as f64 * 0.0133).collect();
        let mirrored: Vec<f64> = times.iter().rev().map(|t| 2.0 * t_ref - t).collect();
        let fwd = predict_ego_motion(
            t_ref, &times, &constant_stream(v, w, 0.0, 2.0),
            &VelocityNoise::noiseless(), &UtParams::default(), AngularRates::Body,
        ).unwrap();
        let bwd = predict_ego_motion(
            t_ref, &mirrored, &constant_stream([-v[0], -v[1], -v[2]], [-w[0], -w[1], -w[2]], 0.0, 2.0),
            &VelocityNoise::noiseless(), &UtParams::default(), AngularRates::Body,
        ).unwrap();
        for (a, b) in fwd.entries.iter().zip(bwd.entries.iter().rev()) {
            assert_abs_diff_eq!(a.pose.mean, b.pose.mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn covariance_grows_away_from_reference() {
        let stream = constant_stream([6.0, 0.0, 0.0], [0.0, 0.0, 0.2], 0.0, 1.0);
        let noise = VelocityNoise { sigma_t: 0.0, ..Default::default() };
        let times: Vec<f64> = (0..12).map(|i| 0.4 + i as f64 * 0.0133).collect();
        let t_ref = 0.45;
        let seq = predict_ego_motion(t_ref, &times, &stream, &noise, &UtParams::default(), AngularRates::Body)
            .unwrap();
        let split = times.partition_point(|&t| t < t_ref);
        let tr: Vec<f64> = seq.entries.iter().map(|e| e.pose.cov.trace()).collect();
        for i in 0..split.saturating_sub(1) {
            assert!(tr[i] >= tr[i + 1]);
        }
        for i in split..tr.len() - 1 {
            assert!(tr[i + 1] >= tr[i]);
        }
    }

    /// Monte-Carlo oracle: chain the same per-step noise model with sampled
    /// velocities and timestamps.
    #[test]
    fn covariance_matches_monte_carlo() {
        let v = Vector3::new(5.0, 0.0, 0.0);
        let w = Vector3::new(0.0, 0.0, 0.3);
        let noise = VelocityNoise {
            sigma_v: Matrix3::from_diagonal(&Vector3::new(0.04, 0.01, 0.01)),
            sigma_w: Matrix3::from_diagonal(&Vector3::new(4e-4, 4e-4, 1e-3)),
            sigma_t: 2e-4,
        };
        let stream = constant_stream(v.into(), w.into(), 0.0, 1.0);
        let t_ref = 0.5;
        let times: Vec<f64> = (-3..=4).map(|i| t_ref + i as f64 * 0.0125 + 0.001).collect();
        let seq = predict_ego_motion(t_ref, &times, &stream, &noise, &UtParams::default(), AngularRates::Body)
            .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let std_n = Normal::new(0.0, 1.0).unwrap();
        let lv = noise.sigma_v.cholesky().unwrap().l();
        let lw = noise.sigma_w.cholesky().unwrap().l();
        let n = 100_000;
        let split = times.partition_point(|&t| t < t_ref);
        let mut sums = vec![(DVector::<f64>::zeros(6), DMatrix::<f64>::zeros(6, 6)); times.len()];
        let draw3 = |rng: &mut ChaCha8Rng| Vector3::from_fn(|_, _| std_n.sample(rng));
        for _ in 0..n {
            for order in [(0..split).rev().collect::<Vec<_>>(), (split..times.len()).collect()] {
                let mut pose = Pose6::default();
                let mut t_star = 0.0;
                for i in order {
                    let t_i = times[i] - t_ref;
                    let vs = v + lv * draw3(&mut rng);
                    let ws = w + lw * draw3(&mut rng);
                    let from = t_star + noise.sigma_t * std_n.sample(&mut rng);
                    let to = t_i + noise.sigma_t * std_n.sample(&mut rng);
                    pose = kinematic_step(&pose, &vs, &ws, from, to, AngularRates::Body);
                    t_star = t_i;
                    let x = DVector::from_row_slice(&pose.to_array());
                    sums[i].0 += &x;
                    sums[i].1 += &x * x.transpose();
                }
            }
        }
        for (i, (s, ss)) in sums.iter().enumerate() {
            let mean = s / n as f64;
            let cov = ss / n as f64 - &mean * mean.transpose();
            let ut = &seq.entries[i].pose;
            let rel = (&cov - &ut.cov).norm() / ut.cov.norm();
            assert!(rel < 0.1, "packet {i}: relative covariance error {rel}");
            for d in [0, 1, 5] {
                let r = (cov[(d, d)] - ut.cov[(d, d)]).abs() / ut.cov[(d, d)];
                assert!(r < 0.1, "packet {i} dim {d}: {r}");
            }
        }
    }

    #[test]
    fn odometry_integration() {
        let stream = constant_stream([2.0, 0.0, 0.0], [0.0; 3], 0.0, 1.0);
        let poses = integrate_odometry(&stream, &[0.0, 0.25, 0.5, 2.0], AngularRates::Body).unwrap();
        assert_abs_diff_eq!(poses[1].x, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(poses[2].x, 1.0, epsilon = 1e-12);
        // extrapolates with the last sample past the stream end
        assert_abs_diff_eq!(poses[3].x, 4.0, epsilon = 1e-12);
        // a circle: yaw rate 1 rad/s for 2 pi seconds returns to the start
        let stream: Vec<_> = (0..=700)
            .map(|i| sample(i as f64 * 0.01, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
            .collect();
        let p = integrate_odometry(&stream, &[2.0 * std::f64::consts::PI], AngularRates::Body).unwrap();
        assert!(p[0].x.abs() < 1e-9 && p[0].y.abs() < 1e-9);
    }
}
