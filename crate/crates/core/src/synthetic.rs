//! Synthetic street scenes with ground truth: ray-cast lidar scans from a
//! moving platform, rendered class-score maps, and a noisy velocity stream.

use image::RgbImage;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::ego_motion::{kinematic_step, AngularRates, VelocitySample};
use crate::geometry::{pose_to_transform, FisheyeIntrinsics, Pose6, RigidTransform};
use crate::io::{Calibration, Camera};
use crate::motion_correction::{LidarPacket, LidarPoint, LidarScan};
use crate::pipeline::{CameraImage, Frame};
use crate::semantic::{label_regions, LabelImage, ScoreMap};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid scene: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Box rotated by `yaw` about the vertical axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
    },
    /// Vertical capped cylinder standing on `base`.
    Cylinder {
        base: [f64; 3],
        radius: f64,
        height: f64,
    },
}

impl Shape {
    fn validate(&self) -> Result<(), String> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Plane { point, normal } => {
                if !finite(point) || !finite(normal) || Vector3::from(*normal).norm() < 1e-12 {
                    return Err("plane needs a finite point and nonzero normal".into());
                }
            }
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                if !finite(center) || !yaw.is_finite() || !half_extents.iter().all(|h| *h > 0.0) {
                    return Err("box needs positive half extents".into());
                }
            }
            Shape::Cylinder {
                base,
                radius,
                height,
            } => {
                if !finite(base) || !(*radius > 0.0) || !(*height > 0.0) {
                    return Err("cylinder needs positive radius and height".into());
                }
            }
        }
        Ok(())
    }

    fn bounding_sphere(&self) -> Option<(Vector3<f64>, f64)> {
        match self {
            Shape::Plane { .. } => None,
            Shape::Box {
                center,
                half_extents,
                ..
            } => Some((Vector3::from(*center), Vector3::from(*half_extents).norm())),
            Shape::Cylinder {
                base,
                radius,
                height,
            } => {
                let c = Vector3::from(*base) + Vector3::new(0.0, 0.0, height / 2.0);
                Some((c, (radius * radius + height * height / 4.0).sqrt()))
            }
        }
    }

    /// Smallest ray parameter `t >= t_min` at which `o + t d` meets the shape.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match self {
            Shape::Plane { point, normal } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(Vector3::from(*point) - o)) / denom;
                (t >= t_min).then_some(t)
            }
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let (s, c) = yaw.sin_cos();
                let rel = o - Vector3::from(*center);
                let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let h = half_extents[i];
                    if ld[i] == 0.0 {
                        if lo[i].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let a = (-h - lo[i]) / ld[i];
                    let b = (h - lo[i]) / ld[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 < t_min {
                    None
                } else if t0 >= t_min {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Shape::Cylinder {
                base,
                radius,
                height,
            } => {
                let lo = o - Vector3::from(*base);
                let r2 = radius * radius;
                let mut best = f64::INFINITY;
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = 2.0 * (lo.x * d.x + lo.y * d.y);
                    let c = lo.x * lo.x + lo.y * lo.y - r2;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = lo.z + t * d.z;
                            if t >= t_min && (0.0..=*height).contains(&z) && t < best {
                                best = t;
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for zc in [0.0, *height] {
                        let t = (zc - lo.z) / d.z;
                        let x = lo.x + t * d.x;
                        let y = lo.y + t * d.y;
                        if t >= t_min && x * x + y * y <= r2 && t < best {
                            best = t;
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    /// Source class id.
    pub class: u32,
}

/// Piece of the platform trajectory with a constant body twist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistSegment {
    pub duration: f64,
    pub v: [f64; 3],
    pub w: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarModel {
    pub rings: u32,
    pub ring_spacing_deg: f64,
    pub azimuth_step_deg: f64,
    pub packets: usize,
    pub rate_hz: f64,
    /// Azimuth of the first firing of a revolution, degrees (0 = forward,
    /// positive to the left).
    pub start_azimuth_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Standard deviation of additive range noise, meters.
    pub range_noise: f64,
    pub veh_from_ld: [[f64; 4]; 4],
}

impl LidarModel {
    pub fn columns(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round() as usize
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn elevation(&self, ring: u32) -> f64 {
        ((ring as f64 - (self.rings as f64 - 1.0) / 2.0) * self.ring_spacing_deg).to_radians()
    }

    /// 16 rings 2 degrees apart, 0.1 degree steps, 76 packets, 10 Hz,
    /// mounted 1.8 m above the vehicle origin.
    pub fn sixteen_ring() -> Self {
        Self {
            rings: 16,
            ring_spacing_deg: 2.0,
            azimuth_step_deg: 0.1,
            packets: 76,
            rate_hz: 10.0,
            start_azimuth_deg: -180.0,
            min_range: 0.5,
            max_range: 60.0,
            range_noise: 0.0,
            veh_from_ld: RigidTransform::translation(0.0, 0.0, 1.8).to_row_major(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub id: u32,
    pub intrinsics: FisheyeIntrinsics,
    pub cam_from_ld: [[f64; 4]; 4],
    /// Image time as a fraction of the scan period after the scan start.
    pub trigger_phase: f64,
}

/// Camera frame (x right, y down, z forward) looking along `yaw` with the
/// optical axis tilted down by `pitch_down`, placed at `position` in the
/// lidar frame. Returns `cam_from_ld`.
pub fn camera_mount(yaw: f64, pitch_down: f64, position: [f64; 3]) -> RigidTransform {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch_down.sin_cos();
    let forward = Vector3::new(cp * cy, cp * sy, -sp);
    let right = Vector3::new(sy, -cy, 0.0);
    let down = forward.cross(&right);
    let rot = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::from_parts(rot, Vector3::from(position)).inverse()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreModel {
    /// Score added to a pixel's own class.
    pub own: f64,
    /// Score spread over the classes of the `(2r+1)^2` neighbourhood.
    pub blur: f64,
    pub blur_radius: usize,
    /// Probability that a pixel's class is replaced by a random other class.
    pub label_noise: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self {
            own: 4.0,
            blur: 3.0,
            blur_radius: 1,
            label_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityModel {
    pub rate_hz: f64,
    /// Standard deviation of each linear velocity component, m/s.
    pub sigma_v: f64,
    /// Standard deviation of each angular rate component, rad/s.
    pub sigma_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// Score map channels; must cover every primitive class and `sky_class`.
    pub classes: usize,
    /// Class of pixels whose ray hits nothing.
    pub sky_class: u32,
    /// RGB color per class for the rendered images.
    pub palette: Vec<[u8; 3]>,
    pub primitives: Vec<Primitive>,
    /// Pose of the vehicle in the world frame at `t0`.
    pub start_pose: [f64; 6],
    pub trajectory: Vec<TwistSegment>,
    pub t0: f64,
    pub scans: usize,
    pub lidar: LidarModel,
    pub cameras: Vec<CameraModel>,
    pub scores: ScoreModel,
    pub velocity: VelocityModel,
    /// Superpixels from a grid of this cell size split along true class
    /// boundaries; 0 leaves superpixels to SLIC on the rendered image.
    pub superpixel_cell: usize,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Config(m.to_string()));
        if self.primitives.is_empty() {
            return bad("scene has no geometry");
        }
        if self.classes < 2 || self.sky_class as usize >= self.classes {
            return bad("need at least two classes and a valid sky class");
        }
        if self.palette.len() != self.classes {
            return bad("one palette color per class");
        }
        for p in &self.primitives {
            p.shape.validate().map_err(SyntheticError::Config)?;
            if p.class as usize >= self.classes {
                return bad("primitive class out of range");
            }
        }
        if self.trajectory.is_empty()
            || self
                .trajectory
                .iter()
                .any(|s| !(s.duration > 0.0) || !s.v.iter().chain(&s.w).all(|x| x.is_finite()))
        {
            return bad("trajectory needs segments with positive duration");
        }
        if !self.start_pose.iter().all(|x| x.is_finite()) || !self.t0.is_finite() {
            return bad("start pose and t0 must be finite");
        }
        if self.scans == 0 {
            return bad("scans must be positive");
        }
        let l = &self.lidar;
        if l.rings == 0
            || l.rings > 256
            || !(l.ring_spacing_deg > 0.0)
            || !(l.azimuth_step_deg > 0.0)
            || !(l.rate_hz > 0.0)
            || l.packets == 0
            || l.packets > l.columns()
            || !(l.max_range > l.min_range)
            || !(l.min_range >= 0.0)
            || !(l.range_noise >= 0.0)
        {
            return bad("invalid lidar model");
        }
        RigidTransform::from_row_major(&l.veh_from_ld)
            .map_err(|e| SyntheticError::Config(format!("lidar mount: {e}")))?;
        if self.cameras.is_empty() {
            return bad("need at least one camera");
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.intrinsics
                .validate()
                .map_err(|e| SyntheticError::Config(format!("camera {}: {e}", c.id)))?;
            RigidTransform::from_row_major(&c.cam_from_ld)
                .map_err(|e| SyntheticError::Config(format!("camera {}: {e}", c.id)))?;
            if !(0.0..1.0).contains(&c.trigger_phase) {
                return bad("trigger phase must be in [0, 1)");
            }
            if self.cameras[..i].iter().any(|o| o.id == c.id) {
                return bad("duplicate camera id");
            }
        }
        let s = &self.scores;
        if !(s.own > s.blur) || !(s.blur >= 0.0) || !(0.0..=1.0).contains(&s.label_noise) {
            return bad("score model needs own > blur >= 0 and noise in [0, 1]");
        }
        let v = &self.velocity;
        if !(v.rate_hz > 0.0) || !(v.sigma_v >= 0.0) || !(v.sigma_w >= 0.0) {
            return bad("invalid velocity model");
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.scans as f64 * self.lidar.period()
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            veh_from_ld: RigidTransform::from_row_major(&self.lidar.veh_from_ld)
                .expect("validated mount"),
            theta_h: self.lidar.azimuth_step_deg.to_radians(),
            theta_v: self.lidar.ring_spacing_deg.to_radians(),
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera {
                    id: c.id,
                    cam_from_ld: RigidTransform::from_row_major(&c.cam_from_ld)
                        .expect("validated mount"),
                    intrinsics: c.intrinsics,
                })
                .collect(),
        }
    }

    /// Side cameras at +-70 degrees yaw, 5 degrees down, 0.5 m below and
    /// 0.4 m ahead of the lidar, 800x500 px with 1250 px focal length.
    pub fn side_cameras() -> Vec<CameraModel> {
        [(0, 70f64), (1, -70f64)]
            .iter()
            .map(|&(id, yaw)| CameraModel {
                id,
                intrinsics: FisheyeIntrinsics::ideal(1250.0, 800, 500),
                cam_from_ld: camera_mount(
                    yaw.to_radians(),
                    5f64.to_radians(),
                    [0.4, 0.3 * yaw.signum(), -0.5],
                )
                .to_row_major(),
                trigger_phase: 0.5,
            })
            .collect()
    }

    fn base(primitives: Vec<Primitive>, scans: usize, speed: f64, cameras: Vec<CameraModel>) -> Self {
        let table = ClassTable::urban_default();
        Self {
            classes: table.source_count(),
            sky_class: table.source_index("sky").expect("sky class") as u32,
            palette: table.source_palette.clone(),
            primitives,
            start_pose: [0.0; 6],
            trajectory: vec![TwistSegment {
                duration: 1.0,
                v: [speed, 0.0, 0.0],
                w: [0.0; 3],
            }],
            t0: 0.0,
            scans,
            lidar: LidarModel::sixteen_ring(),
            cameras,
            scores: ScoreModel::default(),
            velocity: VelocityModel {
                rate_hz: 100.0,
                sigma_v: 0.0,
                sigma_w: 0.0,
            },
            superpixel_cell: 14,
        }
    }

    /// Flat ground and one building wall 10 m ahead, driving toward it.
    pub fn single_wall(scans: usize, speed: f64) -> Self {
        let t = ClassTable::urban_default();
        let c = |n: &str| t.source_index(n).expect("class") as u32;
        let prims = vec![
            Primitive {
                shape: Shape::Plane {
                    point: [0.0; 3],
                    normal: [0.0, 0.0, 1.0],
                },
                class: c("road"),
            },
            Primitive {
                shape: Shape::Box {
                    center: [-12.0, 0.0, 4.0],
                    half_extents: [0.5, 30.0, 4.0],
                    yaw: 0.0,
                },
                class: c("building"),
            },
        ];
        let mut s = Self::base(prims, scans, speed, Self::side_cameras());
        s.scores.label_noise = 0.0;
        s
    }

    /// Stationary platform facing a narrow vegetation wall 5 m ahead and a
    /// wide building wall 10 m ahead, seen by a forward camera 0.5 m below
    /// the lidar. The front wall top sits half a degree above a ring.
    pub fn two_walls() -> Self {
        let t = ClassTable::urban_default();
        let c = |n: &str| t.source_index(n).expect("class") as u32;
        let lidar_h = 1.8;
        let top = lidar_h + 5.0 * 1.5f64.to_radians().tan();
        let prims = vec![
            Primitive {
                shape: Shape::Box {
                    center: [5.1, 0.0, top / 2.0],
                    half_extents: [0.1, 1.5, top / 2.0],
                    yaw: 0.0,
                },
                class: c("vegetation"),
            },
            Primitive {
                shape: Shape::Box {
                    center: [10.1, 0.0, 4.0],
                    half_extents: [0.1, 8.0, 4.0],
                    yaw: 0.0,
                },
                class: c("building"),
            },
        ];
        let cam = CameraModel {
            id: 0,
            intrinsics: FisheyeIntrinsics::ideal(1250.0, 800, 500),
            cam_from_ld: camera_mount(0.0, 0.0, [0.0, 0.0, -0.5]).to_row_major(),
            trigger_phase: 0.5,
        };
        let mut s = Self::base(prims, 1, 0.0, vec![cam]);
        s.scores.label_noise = 0.0;
        s
    }

    /// Straight street with buildings, fences, hedges, trees, poles with
    /// signs, pedestrians, riders and parked cars on both sides. The layout
    /// is fixed; `speed` is the platform speed in m/s.
    pub fn urban(scans: usize, speed: f64) -> Self {
        let t = ClassTable::urban_default();
        let c = |n: &str| t.source_index(n).expect("class") as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ee_d0f5_7ee7);
        let period = LidarModel::sixteen_ring().period();
        let x_min = -30.0;
        let x_max = speed * period * scans as f64 + 40.0;
        let len = x_max - x_min;
        let mid = (x_min + x_max) / 2.0;
        let mut p = vec![Primitive {
            shape: Shape::Plane {
                point: [0.0; 3],
                normal: [0.0, 0.0, 1.0],
            },
            class: c("road"),
        }];
        let bx = |center: [f64; 3], half: [f64; 3], yaw: f64, class: u32| Primitive {
            shape: Shape::Box {
                center,
                half_extents: half,
                yaw,
            },
            class,
        };
        for s in [1.0, -1.0] {
            p.push(bx([mid, s * 6.5, 0.075], [len / 2.0, 1.5, 0.075], 0.0, c("undrivable_road")));
            // Building fronts with fences or hedges in the gaps.
            let mut x = x_min;
            while x < x_max {
                let l = rng.random_range(8.0..16.0);
                let depth = rng.random_range(5.0..8.0);
                let h = rng.random_range(6.0..16.0);
                p.push(bx([x + l / 2.0, s * (9.0 + depth / 2.0), h / 2.0], [l / 2.0, depth / 2.0, h / 2.0], 0.0, c("building")));
                x += l;
                let gap = rng.random_range(1.5..4.0);
                if rng.random_bool(0.5) {
                    p.push(bx([x + gap / 2.0, s * 9.2, 0.9], [gap / 2.0, 0.03, 0.9], 0.0, c("fence")));
                } else {
                    p.push(bx([x + gap / 2.0, s * 10.0, 1.2], [gap / 2.0, 0.8, 1.2], 0.0, c("vegetation")));
                }
                x += gap;
            }
            // Hedges between sidewalk and buildings.
            let mut x = x_min + rng.random_range(0.0..6.0);
            while x < x_max {
                let l = rng.random_range(4.0..10.0);
                let h = rng.random_range(1.0..1.4);
                p.push(bx([x + l / 2.0, s * 8.4, h / 2.0], [l / 2.0, 0.35, h / 2.0], 0.0, c("vegetation")));
                x += l + rng.random_range(6.0..14.0);
            }
            // Poles, some carrying a sign.
            let mut x = x_min + rng.random_range(0.0..5.0);
            while x < x_max {
                let r = rng.random_range(0.06..0.12);
                let h = rng.random_range(3.5..6.0);
                p.push(Primitive {
                    shape: Shape::Cylinder {
                        base: [x, s * 5.3, 0.0],
                        radius: r,
                        height: h,
                    },
                    class: c("pole"),
                });
                if rng.random_bool(0.4) {
                    p.push(bx([x, s * 5.3, h - 0.45], [0.03, 0.35, 0.35], 0.0, c("sign")));
                }
                x += rng.random_range(6.0..11.0);
            }
            // Trees.
            let mut x = x_min + rng.random_range(0.0..8.0);
            while x < x_max {
                p.push(Primitive {
                    shape: Shape::Cylinder {
                        base: [x, s * 7.3, 0.0],
                        radius: 0.15,
                        height: 2.6,
                    },
                    class: c("vegetation"),
                });
                p.push(bx([x, s * 7.3, 3.4], [1.1, 1.1, 0.9], 0.0, c("vegetation")));
                x += rng.random_range(10.0..18.0);
            }
            // Pedestrians and riders on the sidewalk.
            let mut x = x_min + rng.random_range(0.0..3.0);
            while x < x_max {
                let y = s * rng.random_range(5.7..7.8);
                let yaw = rng.random_range(-1.5..1.5);
                if rng.random_bool(0.8) {
                    let h = rng.random_range(1.6..1.9);
                    p.push(bx([x, y, h / 2.0], [0.25, 0.2, h / 2.0], yaw, c("pedestrian")));
                } else {
                    p.push(bx([x, y, 0.85], [0.85, 0.3, 0.85], yaw, c("rider")));
                }
                x += rng.random_range(2.0..7.0);
            }
            // Parked cars at the curb.
            let mut x = x_min + rng.random_range(0.0..10.0);
            while x < x_max {
                if rng.random_bool(0.5) {
                    p.push(bx([x, s * 4.0, 0.75], [2.15, 0.9, 0.75], 0.0, c("vehicle")));
                }
                x += rng.random_range(7.0..16.0);
            }
        }
        let mut spec = Self::base(p, scans, speed, Self::side_cameras());
        spec.trajectory = vec![
            TwistSegment {
                duration: 2.0,
                v: [speed, 0.0, 0.0],
                w: [0.0, 0.0, 0.0],
            },
            TwistSegment {
                duration: 2.5,
                v: [speed, 0.0, 0.0],
                w: [0.0, 0.0, 0.03],
            },
            TwistSegment {
                duration: 2.5,
                v: [speed, 0.0, 0.0],
                w: [0.0, 0.0, -0.03],
            },
            TwistSegment {
                duration: 1.0,
                v: [speed, 0.0, 0.0],
                w: [0.0, 0.0, 0.0],
            },
        ];
        spec.velocity.sigma_v = 0.02;
        spec.velocity.sigma_w = 0.002;
        spec
    }
}

/// Random stream for one purpose and index, derived from the run seed.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 40) | index);
    r
}

const PURPOSE_VELOCITY: u64 = 1;
const PURPOSE_RANGE: u64 = 2;
const PURPOSE_LABELS: u64 = 3;

struct Tile {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    axis: Vector3<f64>,
    half_angle: f64,
}

struct CameraRays {
    /// Unit ray per pixel in the camera frame, `None` past 90 degrees.
    dirs: Vec<Option<Vector3<f64>>>,
    tiles: Vec<Tile>,
}

const TILE: usize = 16;

fn cone_of(dirs: impl Iterator<Item = Vector3<f64>> + Clone) -> Option<(Vector3<f64>, f64)> {
    let sum: Vector3<f64> = dirs.clone().sum();
    let axis = sum.try_normalize(1e-12)?;
    let half = dirs
        .map(|d| axis.dot(&d).clamp(-1.0, 1.0).acos())
        .fold(0.0, f64::max);
    Some((axis, half))
}

impl CameraRays {
    fn new(k: &FisheyeIntrinsics) -> Self {
        let (w, h) = (k.width as usize, k.height as usize);
        let dirs: Vec<Option<Vector3<f64>>> = (0..w * h)
            .into_par_iter()
            .map(|p| k.unproject((p % w) as f64, (p / w) as f64))
            .collect();
        let mut tiles = Vec::new();
        for y0 in (0..h).step_by(TILE) {
            for x0 in (0..w).step_by(TILE) {
                let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
                let it = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y)));
                let ds = it.filter_map(|(x, y)| dirs[y * w + x]);
                if let Some((axis, half)) = cone_of(ds) {
                    tiles.push(Tile {
                        x0,
                        x1,
                        y0,
                        y1,
                        axis,
                        half_angle: half,
                    });
                }
            }
        }
        Self { dirs, tiles }
    }
}

/// Generated dataset; scans and images are produced on demand per index.
pub struct SyntheticDataset {
    pub spec: SyntheticSceneSpec,
    pub seed: u64,
    pub calibration: Calibration,
    pub class_table: ClassTable,
    /// Measured velocity samples (body frame).
    pub velocity: Vec<VelocitySample>,
    spheres: Vec<Option<(Vector3<f64>, f64)>>,
    knots: Vec<(f64, Pose6)>,
    rays: Vec<CameraRays>,
}

/// One rendered camera image with its ground truth.
pub struct RenderedImage {
    pub image: CameraImage,
    /// True class per pixel.
    pub truth: LabelImage,
    /// Range to the first hit per pixel, infinite for sky.
    pub depth: Vec<f64>,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticSceneSpec, seed: u64) -> Result<Self, SyntheticError> {
        spec.validate()?;
        let mut knots = Vec::with_capacity(spec.trajectory.len());
        let mut t = spec.t0;
        let mut pose = Pose6::from_slice(&spec.start_pose);
        for seg in &spec.trajectory {
            knots.push((t, pose));
            pose = kinematic_step(
                &pose,
                &Vector3::from(seg.v),
                &Vector3::from(seg.w),
                t,
                t + seg.duration,
                AngularRates::Body,
            );
            t += seg.duration;
        }
        let mut ds = Self {
            calibration: spec.calibration(),
            class_table: ClassTable::urban_default(),
            velocity: Vec::new(),
            spheres: spec.primitives.iter().map(|p| p.shape.bounding_sphere()).collect(),
            knots,
            rays: spec.cameras.iter().map(|c| CameraRays::new(&c.intrinsics)).collect(),
            seed,
            spec,
        };
        ds.velocity = ds.measure_velocity();
        Ok(ds)
    }

    fn segment_at(&self, t: f64) -> usize {
        self.knots.partition_point(|k| k.0 <= t).saturating_sub(1)
    }

    /// True vehicle pose in the world frame.
    pub fn true_pose(&self, t: f64) -> Pose6 {
        let k = self.segment_at(t);
        let seg = &self.spec.trajectory[k];
        let (t_k, p_k) = self.knots[k];
        kinematic_step(
            &p_k,
            &Vector3::from(seg.v),
            &Vector3::from(seg.w),
            t_k,
            t,
            AngularRates::Body,
        )
    }

    pub fn world_from_ld(&self, t: f64) -> RigidTransform {
        pose_to_transform(&self.true_pose(t)).compose(&self.calibration.veh_from_ld)
    }

    fn measure_velocity(&self) -> Vec<VelocitySample> {
        let m = &self.spec.velocity;
        let mut rng = stream_rng(self.seed, PURPOSE_VELOCITY, 0);
        let nv = Normal::new(0.0, m.sigma_v).expect("finite sigma");
        let nw = Normal::new(0.0, m.sigma_w).expect("finite sigma");
        let n = (self.spec.duration() * m.rate_hz).ceil() as usize + 2;
        (0..n)
            .map(|i| {
                let t = self.spec.t0 + i as f64 / m.rate_hz;
                let seg = &self.spec.trajectory[self.segment_at(t)];
                let mut draw = |x: f64, d: &Normal<f64>| x + d.sample(&mut rng);
                let v = Vector3::new(draw(seg.v[0], &nv), draw(seg.v[1], &nv), draw(seg.v[2], &nv));
                let w = Vector3::new(draw(seg.w[0], &nw), draw(seg.w[1], &nw), draw(seg.w[2], &nw));
                VelocitySample { t, v, w }
            })
            .collect()
    }

    pub fn scan_start(&self, index: usize) -> f64 {
        self.spec.t0 + index as f64 * self.spec.lidar.period()
    }

    pub fn image_time(&self, index: usize, camera: usize) -> f64 {
        self.scan_start(index) + self.spec.cameras[camera].trigger_phase * self.spec.lidar.period()
    }

    fn candidates(&self, apex: &Vector3<f64>, axis: &Vector3<f64>, half: f64) -> Vec<usize> {
        self.spheres
            .iter()
            .enumerate()
            .filter(|(_, s)| match s {
                None => true,
                Some((c, r)) => {
                    let v = c - apex;
                    let d = v.norm();
                    if d <= *r {
                        return true;
                    }
                    let ang = (axis.dot(&v) / d).clamp(-1.0, 1.0).acos();
                    ang <= half + (r / d).asin() + 1e-9
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Nearest hit along the ray among `cands`: `(t, class)`.
    fn cast(
        &self,
        o: &Vector3<f64>,
        d: &Vector3<f64>,
        t_min: f64,
        cands: &[usize],
    ) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for &i in cands {
            if let Some(t) = self.spec.primitives[i].shape.intersect(o, d, t_min) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, self.spec.primitives[i].class));
                }
            }
        }
        best
    }

    /// First hit of a world-frame ray against the whole scene.
    pub fn cast_world(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<(f64, u32)> {
        let all: Vec<usize> = (0..self.spec.primitives.len()).collect();
        self.cast(o, d, t_min, &all)
    }

    /// Lidar scan `index` and the true class of every point in storage order.
    pub fn scan(&self, index: usize) -> (LidarScan, Vec<u32>) {
        let l = &self.spec.lidar;
        let cols = l.columns();
        let step = l.azimuth_step_deg.to_radians();
        let start = self.scan_start(index);
        let col_dt = l.period() / cols as f64;
        let elev: Vec<(f64, f64)> = (0..l.rings).map(|r| l.elevation(r).sin_cos()).collect();
        let dir = |az: f64, r: usize| {
            let (se, ce) = elev[r];
            Vector3::new(ce * az.cos(), ce * az.sin(), se)
        };
        let azimuth = |a: usize| l.start_azimuth_deg.to_radians() + a as f64 * step;
        let packets: Vec<(LidarPacket, Vec<u32>, Vec<f64>)> = (0..l.packets)
            .into_par_iter()
            .map(|i| {
                let a0 = i * cols / l.packets;
                let a1 = (i + 1) * cols / l.packets;
                let t = start + a0 as f64 * col_dt;
                let wl = self.world_from_ld(t);
                let origin = wl.translation_vector();
                let dirs = (a0..a1).flat_map(|a| (0..l.rings as usize).map(move |r| (a, r)));
                let (axis, half) = cone_of(dirs.clone().map(|(a, r)| dir(azimuth(a), r)))
                    .expect("packet rays span less than a hemisphere");
                let cands = self.candidates(&origin, &wl.transform_vector(&axis), half);
                let mut points = Vec::new();
                let mut truth = Vec::new();
                let mut ranges = Vec::new();
                for (a, r) in dirs {
                    let az = azimuth(a);
                    let d = dir(az, r);
                    if let Some((range, class)) =
                        self.cast(&origin, &wl.transform_vector(&d), l.min_range, &cands)
                    {
                        if range <= l.max_range {
                            points.push(LidarPoint {
                                p: d,
                                ring: r as u8,
                                azimuth: crate::geometry::normalize_angle(az) as f32,
                            });
                            truth.push(class);
                            ranges.push(range);
                        }
                    }
                }
                (LidarPacket { t, points }, truth, ranges)
            })
            .collect();
        let mut rng = stream_rng(self.seed, PURPOSE_RANGE, index as u64);
        let noise = Normal::new(0.0, l.range_noise).expect("finite noise");
        let mut scan = LidarScan::default();
        let mut truth = Vec::new();
        for (mut pk, tr, ranges) in packets {
            if pk.points.is_empty() {
                continue;
            }
            for (pt, range) in pk.points.iter_mut().zip(ranges) {
                let r = if l.range_noise > 0.0 {
                    range + noise.sample(&mut rng)
                } else {
                    range
                };
                // Stored at file precision so in-memory and file runs agree.
                pt.p = (pt.p * r).map(|x| x as f32 as f64);
            }
            truth.extend(tr);
            scan.packets.push(pk);
        }
        (scan, truth)
    }

    /// Renders camera `camera` (position in `spec.cameras`) for scan `index`.
    pub fn render(&self, index: usize, camera: usize) -> RenderedImage {
        let cm = &self.spec.cameras[camera];
        let k = &cm.intrinsics;
        let (w, h) = (k.width as usize, k.height as usize);
        let t = self.image_time(index, camera);
        let ld_from_cam = self.calibration.cameras[camera].cam_from_ld.inverse();
        let world_from_cam = self.world_from_ld(t).compose(&ld_from_cam);
        let origin = world_from_cam.translation_vector();
        let rays = &self.rays[camera];
        let sky = self.spec.sky_class;

        let mut class = vec![sky; w * h];
        let mut depth = vec![f64::INFINITY; w * h];
        let tiles: Vec<(usize, Vec<(usize, u32, f64)>)> = rays
            .tiles
            .par_iter()
            .enumerate()
            .map(|(ti, tile)| {
                let cands =
                    self.candidates(&origin, &world_from_cam.transform_vector(&tile.axis), tile.half_angle);
                let mut hits = Vec::new();
                for y in tile.y0..tile.y1 {
                    for x in tile.x0..tile.x1 {
                        let p = y * w + x;
                        if let Some(d) = rays.dirs[p] {
                            let dw = world_from_cam.transform_vector(&d);
                            if let Some((range, c)) = self.cast(&origin, &dw, 1e-6, &cands) {
                                hits.push((p, c, range));
                            }
                        }
                    }
                }
                (ti, hits)
            })
            .collect();
        for (_, hits) in tiles {
            for (p, c, r) in hits {
                class[p] = c;
                depth[p] = r;
            }
        }

        let c_count = self.spec.classes;
        let s = &self.spec.scores;
        let mut rng = stream_rng(
            self.seed,
            PURPOSE_LABELS,
            (index as u64) << 8 | camera as u64,
        );
        let noisy: Vec<u32> = class
            .iter()
            .map(|&c| {
                if s.label_noise > 0.0 && rng.random::<f64>() < s.label_noise {
                    let o = rng.random_range(0..c_count as u32 - 1);
                    if o >= c {
                        o + 1
                    } else {
                        o
                    }
                } else {
                    c
                }
            })
            .collect();

        let n = w * h;
        let mut scores = vec![0f32; c_count * n];
        let r = s.blur_radius as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = y as usize * w + x as usize;
                scores[noisy[p] as usize * n + p] += s.own as f32;
                if s.blur > 0.0 {
                    let (ya, yb) = ((y - r).max(0), (y + r).min(h as isize - 1));
                    let (xa, xb) = ((x - r).max(0), (x + r).min(w as isize - 1));
                    let share = (s.blur / ((yb - ya + 1) * (xb - xa + 1)) as f64) as f32;
                    for yy in ya..=yb {
                        for xx in xa..=xb {
                            let q = yy as usize * w + xx as usize;
                            scores[noisy[q] as usize * n + p] += share;
                        }
                    }
                }
            }
        }
        let scores = ScoreMap::new(c_count, h, w, scores).expect("finite rendered scores");

        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            let base = self.spec.palette[class[p] as usize];
            let shade = if depth[p].is_finite() {
                1.0 - 0.4 * (depth[p] / 60.0).min(1.0)
            } else {
                1.0
            };
            image::Rgb(base.map(|v| (v as f64 * shade).round() as u8))
        });

        let superpixels = (self.spec.superpixel_cell > 0).then(|| {
            let cell = self.spec.superpixel_cell;
            let gx = w.div_ceil(cell);
            let keys: Vec<u32> = (0..n)
                .map(|p| (((p / w / cell) * gx + (p % w) / cell) * c_count) as u32 + class[p])
                .collect();
            label_regions(&keys, w, h)
        });

        RenderedImage {
            image: CameraImage {
                camera: cm.id,
                t,
                scores,
                rgb: Some(rgb),
                superpixels,
            },
            truth: LabelImage {
                height: h,
                width: w,
                labels: class,
            },
            depth,
        }
    }

    pub fn frame(&self, index: usize) -> Frame {
        let (scan, truth) = self.scan(index);
        let images = (0..self.spec.cameras.len())
            .map(|c| self.render(index, c).image)
            .collect();
        Frame {
            index,
            scan,
            truth: Some(truth),
            images,
        }
    }
}
