//! Sparse voxel map with binary Bayes occupancy and discrete Bayes class
//! distributions, updated one scan at a time with ray casting.

use nalgebra::Vector3;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OctreeError {
    #[error("invalid map parameters: {0}")]
    InvalidParams(String),
    #[error("class vector has {got} entries, map expects {expected}")]
    ClassCount { expected: usize, got: usize },
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OctreeParams {
    /// Edge length of a leaf voxel, meters.
    pub resolution: f64,
    pub depth: u32,
    pub p_hit: f64,
    pub p_miss: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub occupancy_threshold: f64,
    /// Floor applied to class likelihoods in the semantic update.
    pub likelihood_floor: f64,
}

impl Default for OctreeParams {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            depth: 16,
            p_hit: 0.7,
            p_miss: 0.4,
            l_min: -3.5,
            l_max: 5.0,
            occupancy_threshold: 0.5,
            likelihood_floor: 1e-3,
        }
    }
}

impl OctreeParams {
    pub fn validate(&self) -> Result<(), OctreeError> {
        let bad = |m: &str| Err(OctreeError::InvalidParams(m.to_string()));
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return bad("resolution must be positive");
        }
        if !(1..=31).contains(&self.depth) {
            return bad("depth must be in 1..=31");
        }
        if !(self.p_hit > 0.5 && self.p_hit < 1.0) {
            return bad("p_hit must lie in (0.5, 1)");
        }
        if !(self.p_miss > 0.0 && self.p_miss < 0.5) {
            return bad("p_miss must lie in (0, 0.5)");
        }
        if !(self.l_min < 0.0 && self.l_max > 0.0) {
            return bad("clamping bounds must straddle zero");
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return bad("occupancy threshold must lie in (0, 1)");
        }
        if !(self.likelihood_floor > 0.0 && self.likelihood_floor < 1.0) {
            return bad("likelihood floor must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn l_hit(&self) -> f64 {
        logit(self.p_hit)
    }

    pub fn l_miss(&self) -> f64 {
        logit(self.p_miss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn from_point(p: &Vector3<f64>, resolution: f64) -> Self {
        Self {
            ix: (p.x / resolution).floor() as i32,
            iy: (p.y / resolution).floor() as i32,
            iz: (p.z / resolution).floor() as i32,
        }
    }

    pub fn center(&self, resolution: f64) -> Vector3<f64> {
        Vector3::new(
            (self.ix as f64 + 0.5) * resolution,
            (self.iy as f64 + 0.5) * resolution,
            (self.iz as f64 + 0.5) * resolution,
        )
    }

    fn get(&self, axis: usize) -> i32 {
        match axis {
            0 => self.ix,
            1 => self.iy,
            _ => self.iz,
        }
    }

    fn step(&mut self, axis: usize, s: i32) {
        match axis {
            0 => self.ix += s,
            1 => self.iy += s,
            _ => self.iz += s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Hit,
    Miss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxel {
    pub log_odds: f64,
    /// `None` until the first hit; reads as the uniform distribution.
    pub semantics: Option<Box<[f64]>>,
    pub observation_count: u32,
}

impl Default for SemanticVoxel {
    fn default() -> Self {
        Self {
            log_odds: 0.0,
            semantics: None,
            observation_count: 0,
        }
    }
}

impl SemanticVoxel {
    pub fn occupancy(&self) -> f64 {
        sigmoid(self.log_odds)
    }

    pub fn class_probs(&self, classes: usize) -> Vec<f64> {
        match &self.semantics {
            Some(s) => s.to_vec(),
            None => vec![1.0 / classes as f64; classes],
        }
    }
}

/// Binary Bayes update in log-odds form, clamped to `[l_min, l_max]`.
pub fn update_occupancy(v: &mut SemanticVoxel, obs: Observation, params: &OctreeParams) {
    let delta = match obs {
        Observation::Hit => params.l_hit(),
        Observation::Miss => params.l_miss(),
    };
    v.log_odds = (v.log_odds + delta).clamp(params.l_min, params.l_max);
    v.observation_count += 1;
}

/// Discrete Bayes update `posterior_c ∝ prior_c · max(l_c, floor)`.
pub fn update_semantics(prior: &mut [f64], likelihood: &[f64], floor: f64) {
    let mut sum = 0.0;
    for (p, l) in prior.iter_mut().zip(likelihood) {
        *p *= l.max(floor);
        sum += *p;
    }
    for p in prior.iter_mut() {
        *p /= sum;
    }
}

/// Voxels crossed by the segment `a -> b`, from the voxel of `a` to the voxel
/// of `b` inclusive. Steps one face at a time, so the list has exactly
/// `1 + sum |key(b) - key(a)|` entries.
pub fn traverse(a: &Vector3<f64>, b: &Vector3<f64>, resolution: f64) -> Vec<VoxelKey> {
    let start = VoxelKey::from_point(a, resolution);
    let end = VoxelKey::from_point(b, resolution);
    let d = b - a;
    let mut remaining = [0i32; 3];
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for axis in 0..3 {
        let diff = end.get(axis) - start.get(axis);
        remaining[axis] = diff.abs();
        step[axis] = diff.signum();
        if diff != 0 && d[axis] != 0.0 {
            let boundary = if diff > 0 {
                (start.get(axis) + 1) as f64 * resolution
            } else {
                start.get(axis) as f64 * resolution
            };
            t_max[axis] = (boundary - a[axis]) / d[axis];
            t_delta[axis] = resolution / d[axis].abs();
        }
    }
    let total: i32 = remaining.iter().sum();
    let mut out = Vec::with_capacity(total as usize + 1);
    let mut key = start;
    out.push(key);
    for _ in 0..total {
        // Only axes that still owe steps are eligible; this keeps the walk on
        // track when rounding puts the end point right on a voxel face.
        let axis = (0..3)
            .filter(|&ax| remaining[ax] > 0)
            .min_by(|&x, &y| t_max[x].total_cmp(&t_max[y]))
            .expect("steps remain");
        key.step(axis, step[axis]);
        t_max[axis] += t_delta[axis];
        remaining[axis] -= 1;
        out.push(key);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InsertSummary {
    pub points: usize,
    pub hit_voxels: usize,
    pub miss_voxels: usize,
}

/// Per-scan observation before deduplication is resolved.
enum ScanObs {
    Miss,
    /// Index into the accumulated hit likelihood sums.
    Hit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOctree {
    params: OctreeParams,
    classes: usize,
    voxels: FxHashMap<VoxelKey, SemanticVoxel>,
}

/// Exported occupied voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub key: VoxelKey,
    pub center: Vector3<f64>,
    pub class_probs: Vec<f64>,
    pub occupancy: f64,
}

impl SemanticOctree {
    pub fn new(params: OctreeParams, classes: usize) -> Result<Self, OctreeError> {
        params.validate()?;
        if classes == 0 {
            return Err(OctreeError::InvalidParams("need at least one class".into()));
        }
        Ok(Self {
            params,
            classes,
            voxels: FxHashMap::default(),
        })
    }

    pub fn params(&self) -> &OctreeParams {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn resolution(&self) -> f64 {
        self.params.resolution
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&SemanticVoxel> {
        self.voxels.get(key)
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::from_point(p, self.params.resolution)
    }

    /// Inserts or replaces a voxel; used when loading snapshots.
    pub fn set(&mut self, key: VoxelKey, voxel: SemanticVoxel) {
        self.voxels.insert(key, voxel);
    }

    /// All voxels in key order.
    pub fn sorted_voxels(&self) -> Vec<(VoxelKey, &SemanticVoxel)> {
        let mut v: Vec<_> = self.voxels.iter().map(|(k, v)| (*k, v)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn apply(&mut self, key: VoxelKey, obs: Observation, likelihood: Option<&[f64]>) {
        let floor = self.params.likelihood_floor;
        let classes = self.classes;
        let v = self.voxels.entry(key).or_default();
        update_occupancy(v, obs, &self.params);
        if let Some(l) = likelihood {
            let s = v
                .semantics
                .get_or_insert_with(|| vec![1.0 / classes as f64; classes].into_boxed_slice());
            update_semantics(s, l, floor);
        }
    }

    /// Integrates one scan. Every voxel strictly between the origin voxel and
    /// a return's voxel gets at most one miss; every return voxel gets one
    /// hit with the mean class vector of the returns inside it. A voxel hit
    /// in this scan is not also cleared by it.
    pub fn insert_scan<'a, I>(&mut self, origin: &Vector3<f64>, points: I) -> Result<InsertSummary, OctreeError>
    where
        I: IntoIterator<Item = (Vector3<f64>, &'a [f64])>,
    {
        let res = self.params.resolution;
        let c = self.classes;
        let mut scan: FxHashMap<VoxelKey, ScanObs> = FxHashMap::default();
        let mut sums: Vec<(Vec<f64>, u32)> = Vec::new();
        let mut n = 0;
        for (p, probs) in points {
            if probs.len() != c {
                return Err(OctreeError::ClassCount { expected: c, got: probs.len() });
            }
            n += 1;
            let ray = traverse(origin, &p, res);
            let end = *ray.last().expect("ray holds at least one voxel");
            if ray.len() > 2 {
                for key in &ray[1..ray.len() - 1] {
                    scan.entry(*key).or_insert(ScanObs::Miss);
                }
            }
            let slot = scan.entry(end).or_insert(ScanObs::Miss);
            match slot {
                ScanObs::Hit(i) => {
                    let acc = &mut sums[*i];
                    for (a, p) in acc.0.iter_mut().zip(probs) {
                        *a += p;
                    }
                    acc.1 += 1;
                }
                ScanObs::Miss => {
                    *slot = ScanObs::Hit(sums.len());
                    sums.push((probs.to_vec(), 1));
                }
            }
        }
        // Each voxel's update only depends on its own observation, so the
        // hash order does not affect the result.
        let mut summary = InsertSummary {
            points: n,
            ..Default::default()
        };
        for (key, obs) in scan {
            match obs {
                ScanObs::Miss => {
                    self.apply(key, Observation::Miss, None);
                    summary.miss_voxels += 1;
                }
                ScanObs::Hit(i) => {
                    let (sum, count) = &sums[i];
                    let mean: Vec<f64> = sum.iter().map(|s| s / *count as f64).collect();
                    self.apply(key, Observation::Hit, Some(&mean));
                    summary.hit_voxels += 1;
                }
            }
        }
        Ok(summary)
    }

    /// Voxels above the occupancy threshold, ordered by key.
    pub fn to_point_cloud(&self) -> Vec<MapPoint> {
        let threshold = logit(self.params.occupancy_threshold);
        let res = self.params.resolution;
        self.sorted_voxels()
            .into_iter()
            .filter(|(_, v)| v.log_odds > threshold)
            .map(|(key, v)| MapPoint {
                key,
                center: key.center(res),
                class_probs: v.class_probs(self.classes),
                occupancy: v.occupancy(),
            })
            .collect()
    }
}
