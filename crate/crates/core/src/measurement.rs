//! State-dependent measurement model: reference-point-relative measurement
//! functions, field-of-view detection probability, clutter intensity,
//! reference-point selection and the unscented measurement update.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{candidate_reference_points, corner_offset, CoveredArea, Point};
use crate::motion::{sigma_points, SigmaPoints, UnscentedParams, JITTER_LADDER};
use crate::types::{
    wrap_angle, Detection, Feature, ReferencePoint, StateGaussian, StateVec, EXTENT_CLAMP,
};

/// Observable subset of the measurement space: one finite interval per
/// feature. Clutter is uniform over the box spanned by the measured
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSubset {
    intervals: BTreeMap<Feature, (f64, f64)>,
}

impl ObservableSubset {
    pub fn new(intervals: impl IntoIterator<Item = (Feature, (f64, f64))>) -> Result<Self> {
        let intervals: BTreeMap<Feature, (f64, f64)> = intervals.into_iter().collect();
        for (f, (lo, hi)) in &intervals {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!(
                    "observable interval for {f} must be finite with positive width"
                )));
            }
        }
        Ok(ObservableSubset { intervals })
    }

    pub fn interval(&self, f: Feature) -> Option<(f64, f64)> {
        self.intervals.get(&f).copied()
    }

    /// Hyper-volume of the box over the given measured features.
    pub fn volume(&self, measured: &[Feature]) -> Result<f64> {
        let mut vol = 1.0;
        for f in measured {
            let (lo, hi) = self
                .interval(*f)
                .ok_or_else(|| Error::Config(format!("no observable interval for {f}")))?;
            vol *= hi - lo;
        }
        Ok(vol)
    }

    pub fn contains(&self, measured: &[Feature], values: &DVector<f64>) -> bool {
        measured.iter().zip(values.iter()).all(|(f, v)| {
            self.interval(*f)
                .map(|(lo, hi)| *v >= lo && *v <= hi)
                .unwrap_or(false)
        })
    }
}

/// In-field-of-view detection probability and boundary relaxation width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionModel {
    /// Detection probability inside the covered area; outside it is
    /// `1 - lambda_d`.
    pub lambda_d: f64,
    /// Half-width of the boundary zone over which the probability ramps
    /// between the two levels, meters.
    pub relax_r: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        DetectionModel { lambda_d: 0.95, relax_r: 2.0 }
    }
}

/// State-dependent detection probability driven by the signed distance of
/// the object to the covered-area boundary: `lambda_d` well inside,
/// `1 - lambda_d` well outside, linear in between.
pub fn detection_probability(state: &StateVec, area: &CoveredArea, dm: &DetectionModel) -> f64 {
    let d = area.signed_distance(Point::new(state[0], state[1]));
    if d < -dm.relax_r {
        dm.lambda_d
    } else if d > dm.relax_r {
        1.0 - dm.lambda_d
    } else {
        // Linear ramp through (-r, lambda_d) and (+r, 1 - lambda_d).
        dm.lambda_d + (1.0 - 2.0 * dm.lambda_d) * (d + dm.relax_r) / (2.0 * dm.relax_r)
    }
}

/// Clutter intensity per unit measurement-space volume: uniform over the
/// observable subset, zero outside.
pub fn clutter_intensity(
    z: &DVector<f64>,
    measured: &[Feature],
    subset: &ObservableSubset,
    lambda_c: f64,
) -> Result<f64> {
    if lambda_c == 0.0 {
        return Ok(0.0);
    }
    if subset.contains(measured, z) {
        Ok(lambda_c / subset.volume(measured)?)
    } else {
        Ok(0.0)
    }
}

/// Measurement function for one detection: projects the filter state onto
/// the measured features, shifting the position from the rectangle center to
/// the reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFunction {
    measured: Vec<Feature>,
    /// Row of each measured feature within the originating detection.
    det_rows: Vec<usize>,
    reference_point: ReferencePoint,
}

impl MeasurementFunction {
    pub fn new(measured: Vec<Feature>, reference_point: ReferencePoint) -> Result<Self> {
        for f in &measured {
            f.canonical_index()?;
        }
        let det_rows = (0..measured.len()).collect();
        Ok(MeasurementFunction { measured, det_rows, reference_point })
    }

    /// Builds the function for a detection, silently dropping features that
    /// have no slot in the filter state (the height attribute is handled
    /// outside the filter).
    pub fn for_detection(det: &Detection, reference_point: ReferencePoint) -> Self {
        let mut measured = Vec::new();
        let mut det_rows = Vec::new();
        for (row, f) in det.measured.iter().enumerate() {
            if f.canonical_index().is_ok() {
                measured.push(*f);
                det_rows.push(row);
            }
        }
        MeasurementFunction { measured, det_rows, reference_point }
    }

    pub fn dim(&self) -> usize {
        self.measured.len()
    }

    pub fn measured(&self) -> &[Feature] {
        &self.measured
    }

    pub fn reference_point(&self) -> ReferencePoint {
        self.reference_point
    }

    /// Predicted measurement for a state: feature projection with the
    /// position shifted by the corner offset when the reference point is a
    /// vertex.
    pub fn predict(&self, state: &StateVec) -> DVector<f64> {
        let offset = if self.reference_point.is_corner() {
            corner_offset(self.reference_point, state[2], state[6], state[7])
                .expect("corner reference point")
        } else {
            Point::zeros()
        };
        DVector::from_iterator(
            self.measured.len(),
            self.measured.iter().map(|f| {
                let idx = f.canonical_index().expect("filter feature");
                match f {
                    Feature::PosX => state[0] + offset.x,
                    Feature::PosY => state[1] + offset.y,
                    _ => state[idx],
                }
            }),
        )
    }

    /// Measurement vector and covariance restricted to the rows this
    /// function models.
    pub fn slice_detection(&self, det: &Detection) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.det_rows.len();
        let z = DVector::from_iterator(d, self.det_rows.iter().map(|&r| det.values[r]));
        let r = DMatrix::from_fn(d, d, |i, j| det.covariance[(self.det_rows[i], self.det_rows[j])]);
        (z, r)
    }

    /// Wraps the heading component of a measurement-space residual, if the
    /// heading is measured.
    pub fn wrap_residual(&self, residual: &mut DVector<f64>) {
        if let Some(row) = self.measured.iter().position(|&f| f == Feature::Heading) {
            residual[row] = wrap_angle(residual[row]);
        }
    }

    fn heading_row(&self) -> Option<usize> {
        self.measured.iter().position(|&f| f == Feature::Heading)
    }
}

/// Result of one unscented measurement update.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub posterior: StateGaussian,
    /// Log of the marginal measurement likelihood `N(z; z_hat, S)`.
    pub log_likelihood: f64,
    /// Squared Mahalanobis distance of the innovation under `S`.
    pub mahalanobis_sq: f64,
}

fn cholesky_dyn(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    for jitter in JITTER_LADDER {
        let mut bumped = m.clone();
        for i in 0..m.nrows() {
            bumped[(i, i)] += jitter;
        }
        if let Some(c) = bumped.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::Numerical(
        "innovation covariance not positive definite after jitter ladder".into(),
    ))
}

/// Unscented measurement statistics of a prior through a measurement
/// function: predicted measurement, innovation covariance and state-
/// measurement cross covariance.
pub(crate) struct MeasurementStats {
    pub z_hat: DVector<f64>,
    pub s: DMatrix<f64>,
    pub p_xz: DMatrix<f64>,
}

impl MeasurementStats {
    /// Squared Mahalanobis distance of a measurement under the innovation
    /// covariance.
    pub(crate) fn mahalanobis_sq(&self, z: &DVector<f64>, mf: &MeasurementFunction) -> Result<f64> {
        let chol = cholesky_dyn(&self.s)?;
        let mut innovation = z - &self.z_hat;
        mf.wrap_residual(&mut innovation);
        Ok(innovation.dot(&chol.solve(&innovation)))
    }
}

pub(crate) fn measurement_stats(
    sp: &SigmaPoints,
    prior_mean: &StateVec,
    mf: &MeasurementFunction,
    r: &DMatrix<f64>,
) -> MeasurementStats {
    let d = mf.dim();
    let z_points: Vec<DVector<f64>> = sp.points.iter().map(|x| mf.predict(x)).collect();

    let mut z_hat = DVector::zeros(d);
    for (z, w) in z_points.iter().zip(&sp.w_mean) {
        z_hat += *w * z;
    }
    if let Some(row) = mf.heading_row() {
        let (mut s, mut c) = (0.0, 0.0);
        for (z, w) in z_points.iter().zip(&sp.w_mean) {
            s += w * z[row].sin();
            c += w * z[row].cos();
        }
        z_hat[row] = s.atan2(c);
    }

    let mut s_mat = r.clone();
    let mut p_xz = DMatrix::zeros(crate::types::STATE_DIM, d);
    for ((x, z), w) in sp.points.iter().zip(&z_points).zip(&sp.w_cov) {
        let mut dz = z - &z_hat;
        mf.wrap_residual(&mut dz);
        let dx = crate::motion::state_residual(x, prior_mean);
        s_mat += *w * &dz * dz.transpose();
        for i in 0..crate::types::STATE_DIM {
            for j in 0..d {
                p_xz[(i, j)] += w * dx[i] * dz[j];
            }
        }
    }
    MeasurementStats { z_hat, s: s_mat, p_xz }
}

/// Completes the Kalman step given precomputed measurement statistics.
pub(crate) fn complete_update(
    prior: &StateGaussian,
    stats: &MeasurementStats,
    z: &DVector<f64>,
    mf: &MeasurementFunction,
) -> Result<UpdateOutcome> {
    let d = mf.dim();
    let chol = cholesky_dyn(&stats.s)?;

    let mut innovation = z - &stats.z_hat;
    mf.wrap_residual(&mut innovation);

    let s_inv_innov = chol.solve(&innovation);
    let mahalanobis_sq = innovation.dot(&s_inv_innov);
    let log_det = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let log_likelihood =
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + mahalanobis_sq);

    // Kalman gain K = P_xz S^-1, computed as solve over the transpose.
    let k = chol.solve(&stats.p_xz.transpose()).transpose();

    let delta = &k * &innovation;
    let mut mean = prior.mean;
    for i in 0..crate::types::STATE_DIM {
        mean[i] += delta[i];
    }
    mean[6] = mean[6].clamp(EXTENT_CLAMP.0, EXTENT_CLAMP.1);
    mean[7] = mean[7].clamp(EXTENT_CLAMP.0, EXTENT_CLAMP.1);

    let reduction = &k * &stats.s * k.transpose();
    let mut cov = prior.cov;
    for i in 0..crate::types::STATE_DIM {
        for j in 0..crate::types::STATE_DIM {
            cov[(i, j)] -= reduction[(i, j)];
        }
    }

    Ok(UpdateOutcome {
        posterior: StateGaussian::new(mean, crate::motion::ensure_psd(&cov, 0.0)),
        log_likelihood,
        mahalanobis_sq,
    })
}

/// Unscented measurement update of a state Gaussian with one detection.
///
/// Returns the posterior together with the log marginal likelihood of the
/// measurement under the predicted measurement distribution.
pub fn ukf_update(
    prior: &StateGaussian,
    det: &Detection,
    mf: &MeasurementFunction,
    p: &UnscentedParams,
) -> Result<(StateGaussian, f64)> {
    let sp = sigma_points(prior, p)?;
    let (z, r) = mf.slice_detection(det);
    let stats = measurement_stats(&sp, &prior.mean, mf, &r);
    let outcome = complete_update(prior, &stats, &z, mf)?;
    Ok((outcome.posterior, outcome.log_likelihood))
}

/// Picks the reference point for a track/detection pair.
///
/// A transmitted reference point is used directly. Otherwise the three
/// rectangle vertices closest to the sensor are tried and the one with the
/// smallest Mahalanobis distance between predicted and actual measurement
/// wins; ties keep the candidate order.
pub fn select_reference_point(
    prior: &StateGaussian,
    det: &Detection,
    sensor_pos: Point,
    p: &UnscentedParams,
) -> Result<ReferencePoint> {
    if let Some(zeta) = det.reference_point {
        return Ok(zeta);
    }
    let sp = sigma_points(prior, p)?;
    let mut best: Option<(f64, ReferencePoint)> = None;
    for zeta in candidate_reference_points(sensor_pos, &prior.mean) {
        let mf = MeasurementFunction::for_detection(det, zeta);
        let (z, r) = mf.slice_detection(det);
        let stats = measurement_stats(&sp, &prior.mean, &mf, &r);
        let chol = cholesky_dyn(&stats.s)?;
        let mut innovation = &z - &stats.z_hat;
        mf.wrap_residual(&mut innovation);
        let m2 = innovation.dot(&chol.solve(&innovation));
        if best.map_or(true, |(b, _)| m2 < b) {
            best = Some((m2, zeta));
        }
    }
    Ok(best.expect("three candidates").1)
}
