//! Unscented transform: sigma-point decomposition of a Gaussian (UTD) and
//! recovery of a Gaussian from weighted sigma points (UTR).

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum UtError {
    #[error("covariance is not positive semidefinite")]
    NotPsd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid UT parameters: {0}")]
    InvalidParams(String),
}

/// Gaussian with mean `mean` and covariance `cov`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, UtError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(UtError::Dimension(format!(
                "mean has {} entries, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Spread and weighting parameters; `lambda = alpha^2 (d + kappa) - d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtParams {
    pub alpha: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            kappa: 0.0,
            beta: 2.0,
        }
    }
}

impl UtParams {
    pub fn lambda(&self, d: usize) -> f64 {
        let d = d as f64;
        self.alpha * self.alpha * (d + self.kappa) - d
    }

    pub fn validate(&self, d: usize) -> Result<(), UtError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(UtError::InvalidParams(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.kappa >= 0.0) || !self.beta.is_finite() {
            return Err(UtError::InvalidParams(
                "kappa must be >= 0 and beta finite".into(),
            ));
        }
        if d == 0 || d as f64 + self.lambda(d) <= 0.0 {
            return Err(UtError::InvalidParams(format!(
                "d + lambda must be positive (d = {d})"
            )));
        }
        Ok(())
    }

    /// Mean and covariance weights for a `d`-dimensional state.
    pub fn weights(&self, d: usize) -> Result<SigmaWeights, UtError> {
        self.validate(d)?;
        let lambda = self.lambda(d);
        let s = d as f64 + lambda;
        let n = 2 * d + 1;
        let wi = 1.0 / (2.0 * s);
        let mut wm = vec![wi; n];
        let mut wc = vec![wi; n];
        wm[0] = lambda / s;
        wc[0] = lambda / s + (1.0 - self.alpha * self.alpha + self.beta);
        Ok(SigmaWeights { wm, wc })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
}

impl SigmaWeights {
    pub fn len(&self) -> usize {
        self.wm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wm.is_empty()
    }

    fn has_negative_wc(&self) -> bool {
        self.wc.iter().any(|&w| w < 0.0)
    }
}

/// `2d + 1` sigma points stored as the columns of `points` (d rows).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: DMatrix<f64>,
    pub weights: SigmaWeights,
}

impl SigmaPointSet {
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.column(i).into_owned()
    }
}

/// Lower-triangular `R` with `R R^T = scale * cov`, applying the jitter rule
/// on failure. An exactly-zero covariance yields a zero root.
fn scaled_root(cov: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>, UtError> {
    let d = cov.nrows();
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(UtError::NotPsd);
    }
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(ch) = (&sym * scale).cholesky() {
        return Ok(ch.l());
    }
    let trace = sym.trace();
    if trace <= 0.0 {
        return Err(UtError::NotPsd);
    }
    let jitter = 1e-12 * trace / d as f64;
    let mut jittered = sym;
    for i in 0..d {
        jittered[(i, i)] += jitter;
    }
    (jittered * scale)
        .cholesky()
        .map(|ch| ch.l())
        .ok_or(UtError::NotPsd)
}

/// State decomposition: `X_0 = mean`, `X_i = mean + R_i`, `X_{i+d} = mean - R_i`
/// with `R R^T = (d + lambda) cov`.
pub fn utd(g: &GaussianState, p: &UtParams) -> Result<SigmaPointSet, UtError> {
    let d = g.dim();
    if g.cov.nrows() != d || g.cov.ncols() != d {
        return Err(UtError::Dimension("covariance shape".into()));
    }
    let weights = p.weights(d)?;
    let root = scaled_root(&g.cov, d as f64 + p.lambda(d))?;
    let mut points = DMatrix::zeros(d, 2 * d + 1);
    points.column_mut(0).copy_from(&g.mean);
    for i in 0..d {
        let col = root.column(i);
        points.column_mut(1 + i).copy_from(&(&g.mean + col));
        points.column_mut(1 + d + i).copy_from(&(&g.mean - col));
    }
    Ok(SigmaPointSet { points, weights })
}

fn floor_eigenvalues(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// State recovery: weighted mean and symmetrized weighted covariance.
pub fn utr(s: &SigmaPointSet) -> GaussianState {
    recover_columns(&s.points, &s.weights)
}

/// Recovery from points stored column-wise with explicit weights; used when
/// the sigma points were produced by mapping another set through a function.
pub fn recover_columns(points: &DMatrix<f64>, w: &SigmaWeights) -> GaussianState {
    let e = points.nrows();
    let mut mean = DVector::zeros(e);
    for (i, &wm) in w.wm.iter().enumerate() {
        mean.axpy(wm, &points.column(i), 1.0);
    }
    let mut cov = DMatrix::zeros(e, e);
    for (i, &wc) in w.wc.iter().enumerate() {
        let dev = points.column(i) - &mean;
        cov.ger(wc, &dev, &dev, 1.0);
    }
    let mut cov = (&cov + cov.transpose()) * 0.5;
    if w.has_negative_wc() {
        cov = floor_eigenvalues(&cov);
    }
    GaussianState { mean, cov }
}

/// Fixed-size recovery for small per-point states in hot loops.
pub fn recover_fixed<const D: usize>(
    points: &[SVector<f64, D>],
    w: &SigmaWeights,
) -> (SVector<f64, D>, SMatrix<f64, D, D>) {
    debug_assert_eq!(points.len(), w.len());
    let mut mean = SVector::<f64, D>::zeros();
    for (p, &wm) in points.iter().zip(&w.wm) {
        mean += p * wm;
    }
    let mut cov = SMatrix::<f64, D, D>::zeros();
    for (p, &wc) in points.iter().zip(&w.wc) {
        let dev = p - mean;
        cov += dev * dev.transpose() * wc;
    }
    let mut cov = (cov + cov.transpose()) * 0.5;
    if w.has_negative_wc() {
        let floored = floor_eigenvalues(&DMatrix::from_column_slice(D, D, cov.as_slice()));
        cov = SMatrix::from_column_slice(floored.as_slice());
    }
    (mean, cov)
}

/// `utr . map(f) . utd` with the source weights.
pub fn ut_propagate<F>(g: &GaussianState, p: &UtParams, mut f: F) -> Result<GaussianState, UtError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    try_ut_propagate(g, p, |x| Ok::<_, UtError>(f(x)))
}

/// Fallible variant of [`ut_propagate`]; the first error from `f` aborts.
pub fn try_ut_propagate<F, E>(g: &GaussianState, p: &UtParams, mut f: F) -> Result<GaussianState, E>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: From<UtError>,
{
    let sigma = utd(g, p)?;
    let mut mapped: Option<DMatrix<f64>> = None;
    for i in 0..sigma.len() {
        let y = f(&sigma.point(i))?;
        let m = mapped.get_or_insert_with(|| DMatrix::zeros(y.len(), sigma.len()));
        if y.len() != m.nrows() {
            return Err(UtError::Dimension("f returned vectors of differing length".into()).into());
        }
        m.column_mut(i).copy_from(&y);
    }
    let mapped = mapped.expect("sigma set is never empty");
    Ok(recover_columns(&mapped, &sigma.weights))
}
