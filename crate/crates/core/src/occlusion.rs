//! Occlusion masking of projected points and transfer of per-pixel class
//! distributions onto the visible points.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::geometry::FisheyeIntrinsics;
use crate::motion_correction::ProjectedPointGaussian;
use crate::semantic::ClassProbabilityImage;

/// Chi-square quantile with 2 degrees of freedom at 90%.
pub const CHI2_90: f64 = 4.605;

/// Standard deviation below which a pixel axis is treated as exact.
pub const DEGENERATE_SIGMA: f64 = 0.5;

const RHO_LIMIT: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapSpec {
    pub u_gap: u32,
    pub v_gap: u32,
}

impl GapSpec {
    /// Half extents of the stamped rectangle.
    pub fn half_extents(&self) -> (i64, i64) {
        (self.u_gap.div_ceil(2) as i64, self.v_gap.div_ceil(2) as i64)
    }
}

/// Pixel spacing between neighbouring lidar returns on a fronto-parallel
/// surface: `u_gap = fx tan(theta_h)`, `v_gap = fy tan(theta_v)`, rounded and
/// floored at one pixel.
pub fn compute_gaps(k: &FisheyeIntrinsics, theta_h: f64, theta_v: f64) -> GapSpec {
    let g = |f: f64, th: f64| ((f * th.tan()).round() as i64).max(1) as u32;
    GapSpec {
        u_gap: g(k.fx, theta_h),
        v_gap: g(k.fy, theta_v),
    }
}

/// Stable ascending order by camera range.
pub fn sort_by_range(points: &[ProjectedPointGaussian]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].range.total_cmp(&points[b].range));
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    masked: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            masked: vec![false; width * height],
        }
    }

    pub fn is_masked(&self, u: usize, v: usize) -> bool {
        self.masked[v * self.width + u]
    }

    pub fn stamp(&mut self, u: i64, v: i64, hu: i64, hv: i64) {
        let u0 = (u - hu).max(0) as usize;
        let u1 = (u + hu).min(self.width as i64 - 1);
        let v0 = (v - hv).max(0) as usize;
        let v1 = (v + hv).min(self.height as i64 - 1);
        if u1 < 0 || v1 < 0 {
            return;
        }
        for row in v0..=v1 as usize {
            self.masked[row * self.width + u0..=row * self.width + u1 as usize].fill(true);
        }
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Nearest pixel of `uv`, if it lies inside a `width x height` image.
pub fn pixel_of(uv: &Vector2<f64>, width: usize, height: usize) -> Option<(usize, usize)> {
    let u = uv.x.round();
    let v = uv.y.round();
    if u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64 {
        Some((u as usize, v as usize))
    } else {
        None
    }
}

/// Visibility flags for `points`, which must already be sorted nearest
/// first. Each visible point masks a rectangle around its pixel; later
/// points landing on a masked pixel are occluded. Points outside the image
/// are not visible and mask nothing.
pub fn occlusion_filter(
    sorted: &[ProjectedPointGaussian],
    gaps: &GapSpec,
    width: usize,
    height: usize,
) -> Vec<bool> {
    let mut mask = MaskGrid::new(width, height);
    let (hu, hv) = gaps.half_extents();
    sorted
        .iter()
        .map(|p| match pixel_of(&p.mean_uv, width, height) {
            Some((u, v)) if !mask.is_masked(u, v) => {
                mask.stamp(u as i64, v as i64, hu, hv);
                true
            }
            _ => false,
        })
        .collect()
}

/// Bivariate normal density with standard deviations `su`, `sv` and
/// correlation `rho`.
pub fn bivariate_pdf(du: f64, dv: f64, su: f64, sv: f64, rho: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    let a = du / su;
    let b = dv / sv;
    let q = (a * a - 2.0 * rho * a * b + b * b) / one_m;
    (-0.5 * q).exp() / (2.0 * PI * su * sv * one_m.sqrt())
}

fn normal_pdf(d: f64, s: f64) -> f64 {
    (-0.5 * (d / s).powi(2)).exp() / ((2.0 * PI).sqrt() * s)
}

/// Three-point Gauss-Legendre nodes and weights on a unit pixel.
const GL3: [(f64, f64); 3] = [
    (-0.387_298_334_620_741_7, 5.0 / 18.0),
    (0.0, 8.0 / 18.0),
    (0.387_298_334_620_741_7, 5.0 / 18.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub packet: usize,
    pub index: usize,
    pub mean_xyz: Vector3<f64>,
    pub cov_xyz: Matrix3<f64>,
    pub class_probs: Vec<f64>,
    pub mean_uv: Vector2<f64>,
    pub cov_uv: Matrix2<f64>,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferResult {
    pub points: Vec<LabeledPoint>,
    /// Visible points whose window held no pixel mass.
    pub empty_window: usize,
}

fn inclusive_range(center: f64, half: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (center - half).ceil().max(0.0);
    let hi = (center + half).floor().min(len as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// Class distribution for one projected Gaussian: pixel probabilities
/// weighted by the probability mass the Gaussian puts on each pixel, over
/// the bounding box of its 90% ellipse, normalized to sum to one.
/// Returns `None` when the window holds no mass inside the image.
pub fn transfer_point(
    mean_uv: &Vector2<f64>,
    cov_uv: &Matrix2<f64>,
    probs: &ClassProbabilityImage,
) -> Option<Vec<f64>> {
    let c = probs.classes;
    let (w, h) = (probs.width, probs.height);
    let su = cov_uv[(0, 0)].max(0.0).sqrt();
    let sv = cov_uv[(1, 1)].max(0.0).sqrt();
    let nearest = || pixel_of(mean_uv, w, h).map(|(u, v)| probs.pixel(u, v).to_vec());
    let du_deg = su < DEGENERATE_SIGMA;
    let dv_deg = sv < DEGENERATE_SIGMA;
    if du_deg && dv_deg {
        return nearest();
    }
    let k = CHI2_90.sqrt();
    let (u0, u1) = if du_deg {
        let u = mean_uv.x.round();
        inclusive_range(u, 0.0, w)?
    } else {
        inclusive_range(mean_uv.x, (k * su).ceil(), w)?
    };
    let (v0, v1) = if dv_deg {
        let v = mean_uv.y.round();
        inclusive_range(v, 0.0, h)?
    } else {
        inclusive_range(mean_uv.y, (k * sv).ceil(), h)?
    };
    let rho = if du_deg || dv_deg {
        0.0
    } else {
        (cov_uv[(0, 1)] / (su * sv)).clamp(-RHO_LIMIT, RHO_LIMIT)
    };

    let mut acc = vec![0.0; c];
    let mut total = 0.0;
    for v in v0..=v1 {
        for u in u0..=u1 {
            let du = u as f64 - mean_uv.x;
            let dv = v as f64 - mean_uv.y;
            let weight = match (du_deg, dv_deg) {
                (false, false) => {
                    let mut m = 0.0;
                    for (a, wa) in GL3 {
                        for (b, wb) in GL3 {
                            m += wa * wb * bivariate_pdf(du + a, dv + b, su, sv, rho);
                        }
                    }
                    m
                }
                (true, false) => GL3.iter().map(|(b, wb)| wb * normal_pdf(dv + b, sv)).sum(),
                (false, true) => GL3.iter().map(|(a, wa)| wa * normal_pdf(du + a, su)).sum(),
                (true, true) => unreachable!(),
            };
            if weight == 0.0 {
                continue;
            }
            total += weight;
            for (a, p) in acc.iter_mut().zip(probs.pixel(u, v)) {
                *a += weight * p;
            }
        }
    }
    if !(total > 0.0) || !total.is_finite() {
        return nearest();
    }
    let eta = 1.0 / acc.iter().sum::<f64>();
    for a in acc.iter_mut() {
        *a *= eta;
    }
    debug_assert!((acc.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    Some(acc)
}

/// Labels every visible point; `visible[i]` refers to `points[i]`.
pub fn transfer_labels(
    points: &[ProjectedPointGaussian],
    visible: &[bool],
    probs: &ClassProbabilityImage,
) -> TransferResult {
    assert_eq!(points.len(), visible.len(), "one visibility flag per point");
    let labeled: Vec<Option<LabeledPoint>> = points
        .par_iter()
        .zip(visible.par_iter())
        .filter(|(_, &vis)| vis)
        .map(|(p, _)| {
            transfer_point(&p.mean_uv, &p.cov_uv, probs).map(|class_probs| LabeledPoint {
                packet: p.packet,
                index: p.index,
                mean_xyz: p.mean_xyz,
                cov_xyz: p.cov_xyz,
                class_probs,
                mean_uv: p.mean_uv,
                cov_uv: p.cov_uv,
                visible: true,
            })
        })
        .collect();
    let mut out = TransferResult::default();
    for l in labeled {
        match l {
            Some(p) => out.points.push(p),
            None => out.empty_window += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn projected(u: f64, v: f64, range: f64) -> ProjectedPointGaussian {
        ProjectedPointGaussian {
            packet: 0,
            index: 0,
            mean_uv: Vector2::new(u, v),
            cov_uv: Matrix2::zeros(),
            mean_xyz: Vector3::zeros(),
            cov_xyz: Matrix3::zeros(),
            range,
        }
    }

    #[test]
    fn gap_examples() {
        let k = FisheyeIntrinsics {
            fx: 1719.0,
            fy: 1174.2,
            ..FisheyeIntrinsics::ideal(1.0, 1920, 1208)
        };
        let g = compute_gaps(&k, 0.1f64.to_radians(), 2f64.to_radians());
        assert_eq!(g, GapSpec { u_gap: 3, v_gap: 41 });
        let g = compute_gaps(&k, 1e-9, 2f64.to_radians());
        assert_eq!(g.u_gap, 1);
        assert_eq!(g.half_extents(), (1, 21));
    }

    #[test]
    fn sort_examples() {
        let pts: Vec<_> = [5.0, 2.0, 9.0].iter().map(|&r| projected(0.0, 0.0, r)).collect();
        assert_eq!(sort_by_range(&pts), vec![1, 0, 2]);
        let pts: Vec<_> = [3.0, 3.0, 3.0].iter().map(|&r| projected(0.0, 0.0, r)).collect();
        assert_eq!(sort_by_range(&pts), vec![0, 1, 2]);
        let pts: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&r| projected(0.0, 0.0, r)).collect();
        assert_eq!(sort_by_range(&pts), vec![0, 1, 2]);
    }

    #[test]
    fn same_pixel_far_point_is_occluded() {
        let gaps = GapSpec { u_gap: 3, v_gap: 41 };
        let pts = [projected(50.2, 40.1, 2.0), projected(49.9, 39.8, 8.0)];
        assert_eq!(occlusion_filter(&pts, &gaps, 100, 100), vec![true, false]);
    }

    #[test]
    fn separated_points_are_both_visible() {
        let gaps = GapSpec { u_gap: 3, v_gap: 41 };
        let pts = [projected(10.0, 10.0, 2.0), projected(14.0, 52.0, 8.0)];
        assert_eq!(occlusion_filter(&pts, &gaps, 100, 100), vec![true, true]);
        // inside the stamped rectangle: |du| <= 2, |dv| <= 21
        let pts = [projected(10.0, 10.0, 2.0), projected(12.0, 31.0, 8.0)];
        assert_eq!(occlusion_filter(&pts, &gaps, 100, 100), vec![true, false]);
    }

    #[test]
    fn out_of_image_points_do_not_mask() {
        let gaps = GapSpec { u_gap: 3, v_gap: 41 };
        let pts = [projected(-1.0, 10.0, 1.0), projected(0.0, 10.0, 5.0)];
        assert_eq!(occlusion_filter(&pts, &gaps, 100, 100), vec![false, true]);
    }

    #[test]
    fn pdf_values() {
        assert_abs_diff_eq!(bivariate_pdf(0.0, 0.0, 1.0, 1.0, 0.0), 1.0 / (2.0 * PI), epsilon = 1e-15);
        for (du, dv, su, sv) in [(0.3, -1.2, 1.5, 0.7), (2.0, 2.0, 3.0, 1.0)] {
            assert_abs_diff_eq!(
                bivariate_pdf(du, dv, su, sv, 0.0),
                normal_pdf(du, su) * normal_pdf(dv, sv),
                epsilon = 1e-12
            );
        }
    }

    fn two_class_image(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> ClassProbabilityImage {
        let mut probs = Vec::with_capacity(w * h * 2);
        for v in 0..h {
            for u in 0..w {
                probs.extend_from_slice(&f(u, v));
            }
        }
        ClassProbabilityImage { classes: 2, height: h, width: w, probs }
    }

    #[test]
    fn degenerate_covariance_uses_nearest_pixel() {
        let img = two_class_image(10, 10, |u, v| if (u, v) == (4, 6) { [0.9, 0.1] } else { [0.2, 0.8] });
        let l = transfer_point(&Vector2::new(4.3, 5.6), &Matrix2::zeros(), &img).unwrap();
        assert_eq!(l, vec![0.9, 0.1]);
        assert!(transfer_point(&Vector2::new(-3.0, 5.0), &Matrix2::zeros(), &img).is_none());
    }

    #[test]
    fn uniform_image_gives_uniform_labels() {
        let img = two_class_image(40, 40, |_, _| [0.5, 0.5]);
        let cov = Matrix2::new(9.0, 2.0, 2.0, 4.0);
        let l = transfer_point(&Vector2::new(20.0, 18.5), &cov, &img).unwrap();
        assert_abs_diff_eq!(l[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_window_over_edge_splits_evenly() {
        // Edge halfway between columns 19 and 20, mean on the edge.
        let img = two_class_image(40, 40, |u, _| if u < 20 { [1.0, 0.0] } else { [0.0, 1.0] });
        let l = transfer_point(&Vector2::new(19.5, 20.0), &Matrix2::new(4.0, 0.0, 0.0, 4.0), &img).unwrap();
        assert_abs_diff_eq!(l[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn one_degenerate_axis() {
        let img = two_class_image(40, 40, |_, v| if v < 20 { [1.0, 0.0] } else { [0.0, 1.0] });
        let l = transfer_point(&Vector2::new(10.2, 19.5), &Matrix2::new(0.01, 0.0, 0.0, 9.0), &img).unwrap();
        assert_abs_diff_eq!(l[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn window_outside_image_is_empty() {
        let img = two_class_image(10, 10, |_, _| [0.5, 0.5]);
        let pts = [projected(-50.0, 5.0, 1.0)];
        let mut p = pts[0];
        p.cov_uv = Matrix2::new(4.0, 0.0, 0.0, 4.0);
        let r = transfer_labels(&[p], &[true], &img);
        assert_eq!(r.empty_window, 1);
        assert!(r.points.is_empty());
        let r = transfer_labels(&[p], &[false], &img);
        assert_eq!(r.empty_window, 0);
    }
}
