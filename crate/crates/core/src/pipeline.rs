//! End-to-end fusion: class probabilities, ego-motion, motion correction,
//! projection, occlusion masking, label transfer, class merge, map insertion
//! and evaluation, over a stream of frames.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{argmax, ClassTable, ClassTableConfig};
use crate::ego_motion::{integrate_odometry, predict_ego_motion, AngularRates, VelocityNoise, VelocitySample};
use crate::eval::{EvalAccumulator, EvalError, EvalReport, VoxelTruth};
use crate::geometry::pose_to_transform;
use crate::io::{self, Calibration, Camera, IoError, LabeledCloud, LabeledRecord};
use crate::motion_correction::{
    correct_scan, project_corrected, project_raw, recover_corrected_points, LidarScan, Projection,
};
use crate::occlusion::{compute_gaps, occlusion_filter, pixel_of, sort_by_range, transfer_labels};
use crate::octree::{OctreeParams, SemanticOctree};
use crate::semantic::{class_probabilities, slic_segment, ScoreMap, SlicParams, SuperpixelMap};
use crate::synthetic::SyntheticDataset;
use crate::unscented::UtParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Raw points projected with the extrinsics, nearest-pixel labels.
    Direct,
    /// Points moved to the image time with uncertainty, then labeled.
    MotionCorrected,
    /// Motion correction plus occlusion masking.
    MotionCorrectedMasked,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Direct,
        Strategy::MotionCorrected,
        Strategy::MotionCorrectedMasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::MotionCorrected => "motion_corrected",
            Strategy::MotionCorrectedMasked => "motion_corrected_masked",
        }
    }

    fn corrected(self) -> bool {
        self != Strategy::Direct
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("scan {scan}{}{}: {stage}: {message}",
        camera.map(|c| format!(" camera {c}")).unwrap_or_default(),
        packet.map(|p| format!(" packet {p}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        scan: usize,
        camera: Option<u32>,
        packet: Option<usize>,
        message: String,
    },
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Whether the error stems from configuration rather than input data.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Io(IoError::Config { .. }))
    }

    fn stage(stage: &'static str, scan: usize, camera: Option<u32>, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            scan,
            camera,
            packet: None,
            message: message.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Inputs

/// One camera image of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraImage {
    pub camera: u32,
    /// Capture time; the reference time of the motion correction.
    pub t: f64,
    pub scores: ScoreMap,
    pub rgb: Option<RgbImage>,
    pub superpixels: Option<SuperpixelMap>,
}

/// A lidar scan with the images taken during it.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub scan: LidarScan,
    /// Source class per point in storage order, when known.
    pub truth: Option<Vec<u32>>,
    pub images: Vec<CameraImage>,
}

pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn frame(&self, index: usize) -> Result<Frame, PipelineError>;
}

impl FrameSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.spec.scans
    }

    fn frame(&self, index: usize) -> Result<Frame, PipelineError> {
        Ok(SyntheticDataset::frame(self, index))
    }
}

impl FrameSource for Vec<Frame> {
    fn len(&self) -> usize {
        <[Frame]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<Frame, PipelineError> {
        Ok(self[index].clone())
    }
}

/// Index of a dataset on disk; paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub scan: Vec<ScanEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub lidar: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub image: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub camera: u32,
    pub t: f64,
    pub score_map: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpixels: Option<PathBuf>,
}

pub struct DatasetSource {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl DatasetSource {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let index: DatasetIndex = io::parse_toml(&io::read_text(path)?, path)?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            index,
        })
    }
}

impl FrameSource for DatasetSource {
    fn len(&self) -> usize {
        self.index.scan.len()
    }

    fn frame(&self, index: usize) -> Result<Frame, PipelineError> {
        let e = &self.index.scan[index];
        let p = |rel: &Path| self.root.join(rel);
        let lp = p(&e.lidar);
        let scan = io::decode_scan(&io::read_bytes(&lp)?, &lp)?;
        let truth = match &e.truth {
            Some(t) => {
                let tp = p(t);
                let truth = io::decode_truth(&io::read_bytes(&tp)?, &tp)?;
                if truth.len() != scan.point_count() {
                    return Err(PipelineError::stage(
                        "load",
                        index,
                        None,
                        format!("{} truth labels for {} points", truth.len(), scan.point_count()),
                    ));
                }
                Some(truth)
            }
            None => None,
        };
        let mut images = Vec::with_capacity(e.image.len());
        for im in &e.image {
            let sp = p(&im.score_map);
            let scores = io::decode_score_map(&io::read_bytes(&sp)?, &sp)?;
            let rgb = match &im.rgb {
                Some(r) => {
                    let rp = p(r);
                    Some(io::ppm_to_rgb(&io::read_bytes(&rp)?).map_err(|m| {
                        IoError::Format {
                            path: rp.clone(),
                            message: m,
                        }
                    })?)
                }
                None => None,
            };
            let superpixels = match &im.superpixels {
                Some(s) => {
                    let spp = p(s);
                    Some(io::decode_superpixels(&io::read_bytes(&spp)?, &spp)?)
                }
                None => None,
            };
            images.push(CameraImage {
                camera: im.camera,
                t: im.t,
                scores,
                rgb,
                superpixels,
            });
        }
        Ok(Frame {
            index,
            scan,
            truth,
            images,
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub calibration: PathBuf,
    pub velocity: PathBuf,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Linear velocity covariance, (m/s)^2.
    pub sigma_v: [[f64; 3]; 3],
    /// Angular rate covariance, (rad/s)^2.
    pub sigma_w: [[f64; 3]; 3],
    /// Timestamp standard deviation, seconds.
    pub sigma_t: f64,
}

impl NoiseConfig {
    pub fn to_noise(&self) -> Result<VelocityNoise, String> {
        let m = |a: &[[f64; 3]; 3], name: &str| {
            let m = Matrix3::from_fn(|i, j| a[i][j]);
            if !m.iter().all(|x| x.is_finite()) || (m - m.transpose()).amax() > 1e-12 {
                return Err(format!("noise.{name} must be finite and symmetric"));
            }
            if m.symmetric_eigenvalues().min() < -1e-12 {
                return Err(format!("noise.{name} must be positive semidefinite"));
            }
            Ok(m)
        };
        if !(self.sigma_t >= 0.0) || !self.sigma_t.is_finite() {
            return Err("noise.sigma_t must be non-negative".into());
        }
        Ok(VelocityNoise {
            sigma_v: m(&self.sigma_v, "sigma_v")?,
            sigma_w: m(&self.sigma_w, "sigma_w")?,
            sigma_t: self.sigma_t,
        })
    }

    pub fn from_noise(n: &VelocityNoise) -> Self {
        let a = |m: &Matrix3<f64>| [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]));
        Self {
            sigma_v: a(&n.sigma_v),
            sigma_w: a(&n.sigma_w),
            sigma_t: n.sigma_t,
        }
    }
}

/// Run configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub angular_rates: AngularRates,
    /// Build the semantic map (and evaluate it when truth is available).
    pub build_map: bool,
    pub paths: PathsConfig,
    pub ut: UtParams,
    pub noise: NoiseConfig,
    pub octree: OctreeParams,
    pub slic: SlicParams,
    pub classes: ClassTableConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = io::parse_toml(&io::read_text(path)?, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in [
            &mut cfg.paths.calibration,
            &mut cfg.paths.velocity,
            &mut cfg.paths.dataset,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        io::to_toml(self)
    }
}

/// Everything the per-frame stages need besides the frame itself.
#[derive(Debug, Clone)]
pub struct Context {
    pub calibration: Calibration,
    pub velocity: Vec<VelocitySample>,
    pub classes: ClassTable,
    pub ut: UtParams,
    pub noise: VelocityNoise,
    pub rates: AngularRates,
    pub octree: OctreeParams,
    pub slic: SlicParams,
}

impl Context {
    /// Validates parameters; calibration and velocity are loaded from the
    /// configured paths.
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let calibration = Calibration::load(&cfg.paths.calibration)?;
        let vp = &cfg.paths.velocity;
        let velocity = io::velocity_from_csv(&io::read_text(vp)?, vp)?;
        Self::new(cfg, calibration, velocity)
    }

    pub fn new(
        cfg: &RunConfig,
        calibration: Calibration,
        velocity: Vec<VelocitySample>,
    ) -> Result<Self, PipelineError> {
        let classes =
            ClassTable::from_config(&cfg.classes).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.ut
            .validate(crate::ego_motion::AUGMENTED_DIM)
            .map_err(|e| PipelineError::Config(format!("ut: {e}")))?;
        cfg.octree
            .validate()
            .map_err(|e| PipelineError::Config(format!("octree: {e}")))?;
        let noise = cfg.noise.to_noise().map_err(PipelineError::Config)?;
        if cfg.slic.k_target == 0 || !(cfg.slic.compactness > 0.0) {
            return Err(PipelineError::Config("slic: k_target and compactness must be positive".into()));
        }
        if velocity.is_empty() {
            return Err(PipelineError::Config("velocity stream is empty".into()));
        }
        Ok(Self {
            calibration,
            velocity,
            classes,
            ut: cfg.ut,
            noise,
            rates: cfg.angular_rates,
            octree: cfg.octree,
            slic: cfg.slic,
        })
    }
}

/// Default run configuration for the synthetic street fixture.
pub fn default_run_config(paths: PathsConfig, seed: u64) -> RunConfig {
    RunConfig {
        strategy: Strategy::MotionCorrectedMasked,
        seed,
        angular_rates: AngularRates::Body,
        build_map: true,
        paths,
        ut: UtParams::default(),
        noise: NoiseConfig::from_noise(&VelocityNoise::default()),
        octree: OctreeParams::default(),
        slic: SlicParams::default(),
        classes: ClassTable::urban_default().to_config(),
    }
}

// ---------------------------------------------------------------------------
// Per-frame processing

/// Labeled points of one camera image under one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraOutput {
    pub strategy: Strategy,
    pub cloud: LabeledCloud,
    pub stats: StageCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StageCounts {
    /// Lidar points considered.
    pub points: usize,
    /// Points with a projection whose rounded pixel lies in the image.
    pub in_image: usize,
    /// Points behind the camera for at least one sigma pose.
    pub not_visible: usize,
    /// Points removed by the occlusion mask.
    pub occluded: usize,
    /// Visible points whose label window held no mass.
    pub empty_window: usize,
    /// Points whose class mass lay entirely on discarded classes.
    pub discarded: usize,
    /// Points in the output cloud.
    pub labeled: usize,
}

impl std::ops::AddAssign for StageCounts {
    fn add_assign(&mut self, o: Self) {
        self.points += o.points;
        self.in_image += o.in_image;
        self.not_visible += o.not_visible;
        self.occluded += o.occluded;
        self.empty_window += o.empty_window;
        self.discarded += o.discarded;
        self.labeled += o.labeled;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub index: usize,
    pub scan: LidarScan,
    pub truth: Option<Vec<u32>>,
    /// `outputs[s]` holds one entry per camera for strategy `strategies[s]`.
    pub outputs: Vec<Vec<CameraOutput>>,
}

fn camera_of(ctx: &Context, id: u32, scan: usize) -> Result<&Camera, PipelineError> {
    ctx.calibration
        .camera(id)
        .ok_or_else(|| PipelineError::stage("load", scan, Some(id), "camera missing from calibration"))
}

fn superpixels_for(
    image: &CameraImage,
    ctx: &Context,
    scan: usize,
) -> Result<SuperpixelMap, PipelineError> {
    let err = |m: String| PipelineError::stage("superpixels", scan, Some(image.camera), m);
    let (w, h) = (image.scores.width(), image.scores.height());
    if let Some(sp) = &image.superpixels {
        if sp.width != w || sp.height != h {
            return Err(err("superpixel map size differs from score map".into()));
        }
        return Ok(sp.clone());
    }
    let Some(rgb) = &image.rgb else {
        return Err(err("neither superpixels nor an image to segment".into()));
    };
    if rgb.width() as usize != w || rgb.height() as usize != h {
        return Err(err("image size differs from score map".into()));
    }
    let mut params = ctx.slic;
    params.k_target = params.k_target.min(w * h);
    slic_segment(rgb, &params).map_err(|e| err(e.to_string()))
}

/// Per-camera projections shared by the strategies.
struct Projections {
    raw: Option<Projection>,
    corrected: Option<Projection>,
}

fn project_image(
    frame: &Frame,
    image: &CameraImage,
    cam: &Camera,
    ctx: &Context,
    strategies: &[Strategy],
) -> Result<Projections, PipelineError> {
    let scan = &frame.scan;
    let raw = strategies
        .contains(&Strategy::Direct)
        .then(|| project_raw(scan, &cam.cam_from_ld, &cam.intrinsics));
    let corrected = if strategies.iter().any(|s| s.corrected()) {
        let poses = predict_ego_motion(
            image.t,
            &scan.packet_times(),
            &ctx.velocity,
            &ctx.noise,
            &ctx.ut,
            ctx.rates,
        )
        .map_err(|e| PipelineError::stage("ego_motion", frame.index, Some(image.camera), e))?;
        let cloud = correct_scan(scan, &poses, &ctx.calibration.veh_from_ld, &ctx.ut).map_err(|e| {
            let packet = match &e {
                crate::motion_correction::MotionError::Ut { packet, .. } => Some(*packet),
                _ => None,
            };
            PipelineError::Stage {
                stage: "motion_correction",
                scan: frame.index,
                camera: Some(image.camera),
                packet,
                message: e.to_string(),
            }
        })?;
        Some(project_corrected(&cloud, &cam.cam_from_ld, &cam.intrinsics))
    } else {
        None
    };
    Ok(Projections { raw, corrected })
}

/// Runs every stage up to the class merge for one frame.
pub fn process_frame(
    frame: &Frame,
    ctx: &Context,
    strategies: &[Strategy],
) -> Result<FrameOutput, PipelineError> {
    frame
        .scan
        .validate()
        .map_err(|e| PipelineError::stage("load", frame.index, None, e))?;
    let offsets: Vec<usize> = frame
        .scan
        .packets
        .iter()
        .scan(0, |acc, pk| {
            let o = *acc;
            *acc += pk.points.len();
            Some(o)
        })
        .collect();
    let mut outputs: Vec<Vec<CameraOutput>> = vec![Vec::new(); strategies.len()];
    for image in &frame.images {
        let cam = camera_of(ctx, image.camera, frame.index)?;
        let k = &cam.intrinsics;
        let (w, h) = (k.width as usize, k.height as usize);
        let s = &image.scores;
        if s.width() != w || s.height() != h {
            return Err(PipelineError::stage(
                "semantic",
                frame.index,
                Some(image.camera),
                format!("score map is {}x{}, camera is {w}x{h}", s.width(), s.height()),
            ));
        }
        if s.classes() != ctx.classes.source_count() {
            return Err(PipelineError::stage(
                "semantic",
                frame.index,
                Some(image.camera),
                format!(
                    "score map has {} classes, class table has {}",
                    s.classes(),
                    ctx.classes.source_count()
                ),
            ));
        }
        let sp = superpixels_for(image, ctx, frame.index)?;
        let probs = class_probabilities(s, &sp)
            .map_err(|e| PipelineError::stage("semantic", frame.index, Some(image.camera), e))?;
        let proj = project_image(frame, image, cam, ctx, strategies)?;
        let gaps = compute_gaps(k, ctx.calibration.theta_h, ctx.calibration.theta_v);

        for (si, &strategy) in strategies.iter().enumerate() {
            let p = match strategy {
                Strategy::Direct => proj.raw.as_ref(),
                _ => proj.corrected.as_ref(),
            }
            .expect("projection computed for requested strategy");
            let mut stats = StageCounts {
                points: frame.scan.point_count(),
                not_visible: p.not_visible,
                ..Default::default()
            };
            let in_image: Vec<bool> = p
                .points
                .iter()
                .map(|q| pixel_of(&q.mean_uv, w, h).is_some())
                .collect();
            stats.in_image = in_image.iter().filter(|&&v| v).count();
            let visible = if strategy == Strategy::MotionCorrectedMasked {
                let order = sort_by_range(&p.points);
                let sorted: Vec<_> = order.iter().map(|&i| p.points[i]).collect();
                let flags = occlusion_filter(&sorted, &gaps, w, h);
                let mut vis = vec![false; p.points.len()];
                for (&i, f) in order.iter().zip(flags) {
                    vis[i] = f;
                }
                vis
            } else {
                in_image
            };
            stats.occluded = stats.in_image - visible.iter().filter(|&&v| v).count();
            let transfer = transfer_labels(&p.points, &visible, &probs);
            stats.empty_window = transfer.empty_window;
            let mut points = Vec::with_capacity(transfer.points.len());
            for lp in &transfer.points {
                match ctx.classes.merge_probs(&lp.class_probs) {
                    Some(m) => points.push(LabeledRecord::from_point(
                        lp,
                        (offsets[lp.packet] + lp.index) as u32,
                        m,
                    )),
                    None => stats.discarded += 1,
                }
            }
            stats.labeled = points.len();
            outputs[si].push(CameraOutput {
                strategy,
                cloud: LabeledCloud {
                    scan: frame.index as u32,
                    camera: image.camera,
                    t_ref: image.t,
                    classes: ctx.classes.target_count(),
                    points,
                },
                stats,
            });
        }
    }
    Ok(FrameOutput {
        index: frame.index,
        scan: frame.scan.clone(),
        truth: frame.truth.clone(),
        outputs,
    })
}

/// Motion-corrected point Gaussians of a frame per camera:
/// `(camera, t_ref, [(mean, cov)])` in the lidar frame at `t_ref`.
#[allow(clippy::type_complexity)]
pub fn correct_frame(
    frame: &Frame,
    ctx: &Context,
) -> Result<Vec<(u32, f64, Vec<(Vector3<f64>, Matrix3<f64>)>)>, PipelineError> {
    let mut out = Vec::new();
    for image in &frame.images {
        let poses = predict_ego_motion(
            image.t,
            &frame.scan.packet_times(),
            &ctx.velocity,
            &ctx.noise,
            &ctx.ut,
            ctx.rates,
        )
        .map_err(|e| PipelineError::stage("ego_motion", frame.index, Some(image.camera), e))?;
        let cloud = correct_scan(&frame.scan, &poses, &ctx.calibration.veh_from_ld, &ctx.ut)
            .map_err(|e| PipelineError::stage("motion_correction", frame.index, Some(image.camera), e))?;
        out.push((image.camera, image.t, recover_corrected_points(&cloud)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Accumulation over a run

/// Map-frame transform of the lidar at time `t` from integrated odometry.
pub fn map_from_ld(ctx: &Context, t: f64) -> Result<crate::geometry::RigidTransform, PipelineError> {
    let pose = integrate_odometry(&ctx.velocity, &[t], ctx.rates)
        .map_err(|e| PipelineError::Config(format!("odometry: {e}")))?[0];
    Ok(pose_to_transform(&pose).compose(&ctx.calibration.veh_from_ld))
}

/// Inserts one labeled cloud into `map`, registered with the odometry pose
/// at its reference time.
pub fn insert_cloud(map: &mut SemanticOctree, cloud: &LabeledCloud, ctx: &Context) -> Result<(), PipelineError> {
    let t = map_from_ld(ctx, cloud.t_ref)?;
    let origin = t.translation_vector();
    let pts: Vec<(Vector3<f64>, &[f64])> = cloud
        .points
        .iter()
        .map(|p| (t.transform_point(&p.xyz), p.probs.as_slice()))
        .collect();
    map.insert_scan(&origin, pts)
        .map_err(|e| PipelineError::stage("map", cloud.scan as usize, Some(cloud.camera), e))?;
    Ok(())
}

/// Adds every truth-labeled point of a scan, registered per packet with
/// odometry, to the voxel vote used as map ground truth.
pub fn add_voxel_truth(
    truth_map: &mut VoxelTruth,
    scan: &LidarScan,
    truth: &[u32],
    ctx: &Context,
) -> Result<(), PipelineError> {
    let times = scan.packet_times();
    let poses = integrate_odometry(&ctx.velocity, &times, ctx.rates)
        .map_err(|e| PipelineError::Config(format!("odometry: {e}")))?;
    let mut flat = 0;
    for (pk, pose) in scan.packets.iter().zip(poses) {
        let t = pose_to_transform(&pose).compose(&ctx.calibration.veh_from_ld);
        for pt in &pk.points {
            if let Some(c) = ctx.classes.merge_label(truth[flat]) {
                truth_map.add(&t.transform_point(&pt.p), c);
            }
            flat += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub strategies: Vec<Strategy>,
    pub build_map: bool,
    /// Frames processed concurrently before their results are folded in.
    pub batch: usize,
}

impl RunOptions {
    pub fn single(strategy: Strategy, build_map: bool) -> Self {
        Self {
            strategies: vec![strategy],
            build_map,
            batch: rayon::current_num_threads().max(1),
        }
    }
}

/// Results of one strategy over the whole run.
#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub counts: StageCounts,
    /// Point-level confusion counts, when truth is present.
    pub points: Option<EvalAccumulator>,
    pub map: Option<SemanticOctree>,
}

impl StrategyResult {
    pub fn point_report(&self, names: &[String]) -> Option<EvalReport> {
        self.points.as_ref().map(|a| a.report(names))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scans: usize,
    pub strategies: Vec<StrategyResult>,
    pub voxel_truth: Option<VoxelTruth>,
}

impl RunResult {
    pub fn get(&self, s: Strategy) -> Option<&StrategyResult> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    pub fn map_report(&self, s: Strategy, names: &[String]) -> Result<Option<EvalReport>, EvalError> {
        match (self.get(s).and_then(|r| r.map.as_ref()), &self.voxel_truth) {
            (Some(map), Some(truth)) => crate::eval::evaluate_map(map, truth, names).map(Some),
            _ => Ok(None),
        }
    }
}

/// Processes every frame of `source`. Frames are processed in parallel
/// batches; folding into the maps and evaluation, and the `sink` callback,
/// run in frame order, so results do not depend on the thread count.
pub fn run<S, F>(
    source: &S,
    ctx: &Context,
    opts: &RunOptions,
    mut sink: F,
) -> Result<RunResult, PipelineError>
where
    S: FrameSource + ?Sized,
    F: FnMut(&FrameOutput) -> Result<(), PipelineError>,
{
    if opts.strategies.is_empty() {
        return Err(PipelineError::Config("no strategy selected".into()));
    }
    let c = ctx.classes.target_count();
    let mut results: Vec<StrategyResult> = opts
        .strategies
        .iter()
        .map(|&strategy| -> Result<_, PipelineError> {
            Ok(StrategyResult {
                strategy,
                counts: StageCounts::default(),
                points: None,
                map: if opts.build_map {
                    Some(
                        SemanticOctree::new(ctx.octree, c)
                            .map_err(|e| PipelineError::Config(format!("octree: {e}")))?,
                    )
                } else {
                    None
                },
            })
        })
        .collect::<Result<_, _>>()?;
    let mut voxel_truth: Option<VoxelTruth> = None;
    let n = source.len();
    let batch = opts.batch.max(1);
    for start in (0..n).step_by(batch) {
        let outs: Vec<Result<FrameOutput, PipelineError>> = (start..(start + batch).min(n))
            .into_par_iter()
            .map(|i| {
                let frame = source.frame(i)?;
                process_frame(&frame, ctx, &opts.strategies)
            })
            .collect();
        for out in outs {
            let out = out?;
            sink(&out)?;
            if let Some(truth) = &out.truth {
                if truth.len() != out.scan.point_count() {
                    return Err(PipelineError::stage(
                        "eval",
                        out.index,
                        None,
                        "truth length differs from point count",
                    ));
                }
                if opts.build_map {
                    add_voxel_truth(
                        voxel_truth.get_or_insert_with(|| VoxelTruth::new(c, ctx.octree.resolution)),
                        &out.scan,
                        truth,
                        ctx,
                    )?;
                }
            }
            for (r, cams) in results.iter_mut().zip(&out.outputs) {
                for cam in cams {
                    r.counts += cam.stats;
                    if let Some(truth) = &out.truth {
                        let acc = r.points.get_or_insert_with(|| EvalAccumulator::new(c));
                        for p in &cam.cloud.points {
                            if let Some(t) = ctx.classes.merge_label(truth[p.index as usize]) {
                                acc.add(argmax(&p.probs) as u32, t)?;
                            }
                        }
                    }
                    if let Some(map) = r.map.as_mut() {
                        insert_cloud(map, &cam.cloud, ctx)?;
                    }
                }
            }
        }
    }
    Ok(RunResult {
        scans: n,
        strategies: results,
        voxel_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{Primitive, Shape, SyntheticSceneSpec};

    fn synthetic_ctx(ds: &SyntheticDataset) -> Context {
        let cfg = default_run_config(
            PathsConfig {
                calibration: "c".into(),
                velocity: "v".into(),
                dataset: "d".into(),
            },
            0,
        );
        Context::new(&cfg, ds.calibration.clone(), ds.velocity.clone()).unwrap()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fast".parse::<Strategy>().is_err());
    }

    #[test]
    fn stationary_direct_labels_fully_visible_class_perfectly() {
        // Walls only: every wall point sees its own class or sky.
        let mut spec = SyntheticSceneSpec::single_wall(1, 0.0);
        let building = spec.primitives[1].class;
        spec.primitives.remove(0);
        for y in [8.0, -8.0] {
            spec.primitives.push(Primitive {
                shape: Shape::Box {
                    center: [0.0, y, 4.0],
                    half_extents: [30.0, 0.5, 4.0],
                    yaw: 0.0,
                },
                class: building,
            });
        }
        let ds = SyntheticDataset::new(spec, 1).unwrap();
        let ctx = synthetic_ctx(&ds);
        let r = run(&ds, &ctx, &RunOptions::single(Strategy::Direct, false), |_| Ok(())).unwrap();
        let rep = r.strategies[0].point_report(&ctx.classes.target).unwrap();
        let b = ctx.classes.target_index("building").unwrap();
        assert!(rep.support[b] > 1000);
        assert_eq!(rep.f1[b], 1.0);
    }

    /// Back-wall points hidden from the camera by the front wall, according
    /// to a ray cast from the camera centre, that end up labeled with the
    /// front wall's class.
    fn occluded_mislabels(ds: &SyntheticDataset, ctx: &Context, out: &CameraOutput, truth: &[u32]) -> usize {
        let cam = ctx.calibration.camera(out.cloud.camera).unwrap();
        let world = ds.world_from_ld(out.cloud.t_ref);
        let eye = world.transform_point(&cam.cam_from_ld.inverse().translation_vector());
        let veg = ctx.classes.target_index("vegetation").unwrap();
        let b = ctx.classes.target_index("building").unwrap() as u32;
        out.cloud
            .points
            .iter()
            .filter(|p| ctx.classes.merge_label(truth[p.index as usize]) == Some(b))
            .filter(|p| argmax(&p.probs) == veg)
            .filter(|p| {
                let d = world.transform_point(&p.xyz) - eye;
                let range = d.norm();
                ds.cast_world(&eye, &(d / range), 1e-6)
                    .is_some_and(|(t, _)| t < range - 1e-3)
            })
            .count()
    }

    #[test]
    fn two_wall_scene_mask_removes_back_wall_mislabels() {
        let ds = SyntheticDataset::new(SyntheticSceneSpec::two_walls(), 1).unwrap();
        let ctx = synthetic_ctx(&ds);
        let f = ds.frame(0);
        let truth = f.truth.clone().unwrap();
        let strategies = [Strategy::Direct, Strategy::MotionCorrectedMasked];
        let out = process_frame(&f, &ctx, &strategies).unwrap();
        let direct = occluded_mislabels(&ds, &ctx, &out.outputs[0][0], &truth);
        let masked = occluded_mislabels(&ds, &ctx, &out.outputs[1][0], &truth);
        assert!(direct > 0);
        assert_eq!(masked, 0);
        assert!(out.outputs[1][0].stats.occluded > 0);
    }

    #[test]
    fn missing_superpixels_and_image_is_a_stage_error() {
        let ds = SyntheticDataset::new(SyntheticSceneSpec::two_walls(), 1).unwrap();
        let ctx = synthetic_ctx(&ds);
        let mut f = ds.frame(0);
        f.images[0].superpixels = None;
        f.images[0].rgb = None;
        let e = process_frame(&f, &ctx, &[Strategy::Direct]).unwrap_err();
        assert!(matches!(e, PipelineError::Stage { stage: "superpixels", .. }));
        assert!(!e.is_config());
    }
}
