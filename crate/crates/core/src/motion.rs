//! Constant turn rate and acceleration process model plus the unscented
//! transform used for nonlinear prediction and measurement propagation.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::types::{wrap_angle, StateCov, StateGaussian, StateVec, STATE_DIM};

/// Yaw-rate magnitude below which the straight-line limit of the turning
/// solution is used.
pub const OMEGA_EPS: f64 = 1e-4;

/// Diagonal jitter ladder applied before giving up on a Cholesky factor.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-9, 1e-6];

/// Scaled unscented-transform spread parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnscentedParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UnscentedParams {
    fn default() -> Self {
        UnscentedParams { alpha: 0.1, beta: 2.0, kappa: 0.0 }
    }
}

impl UnscentedParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    /// Mean and covariance weights for `2n + 1` sigma points; the mean
    /// weights sum to one.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let lambda = self.lambda(n);
        let denom = n as f64 + lambda;
        let mut w_mean = vec![1.0 / (2.0 * denom); 2 * n + 1];
        let mut w_cov = w_mean.clone();
        w_mean[0] = lambda / denom;
        w_cov[0] = lambda / denom + 1.0 - self.alpha * self.alpha + self.beta;
        (w_mean, w_cov)
    }
}

/// Process noise parameterized by continuous-time densities; discretized per
/// prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    /// Yaw-acceleration density, rad/s^2/sqrt(Hz); drives the (heading,
    /// yaw-rate) block.
    pub yaw_accel_density: f64,
    /// Jerk density, m/s^3/sqrt(Hz); drives the (speed, acceleration) block.
    pub jerk_density: f64,
    /// Extent random-walk density, m/sqrt(s); keeps width/length adjustable
    /// by later evidence.
    pub extent_density: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise { yaw_accel_density: 1.0, jerk_density: 2.0, extent_density: 0.01 }
    }
}

impl ProcessNoise {
    pub fn zero() -> Self {
        ProcessNoise { yaw_accel_density: 0.0, jerk_density: 0.0, extent_density: 0.0 }
    }

    /// Discrete-time covariance contribution for a step of `dt` seconds.
    pub fn discretize(&self, dt: f64) -> StateCov {
        let mut q = StateCov::zeros();
        if dt <= 0.0 {
            return q;
        }
        // White-noise-on-derivative block for an integrator chain (value,
        // rate): [[dt^3/3, dt^2/2], [dt^2/2, dt]] * density^2.
        let fill = |q: &mut StateCov, i: usize, j: usize, density: f64| {
            let d2 = density * density;
            q[(i, i)] = d2 * dt * dt * dt / 3.0;
            q[(i, j)] = d2 * dt * dt / 2.0;
            q[(j, i)] = d2 * dt * dt / 2.0;
            q[(j, j)] = d2 * dt;
        };
        fill(&mut q, 2, 3, self.yaw_accel_density);
        fill(&mut q, 4, 5, self.jerk_density);
        let e2 = self.extent_density * self.extent_density * dt;
        q[(6, 6)] = e2;
        q[(7, 7)] = e2;
        q
    }
}

/// Propagates a state mean through the CTRA model for `dt` seconds.
///
/// Heading, yaw rate, speed and acceleration follow the exact turning
/// solution when the yaw rate exceeds [`OMEGA_EPS`]; otherwise the
/// straight-line limit is used. Width and length are unchanged.
pub fn ctra_transition(mean: &StateVec, dt: f64) -> StateVec {
    if dt == 0.0 {
        return *mean;
    }
    let (x, y, phi, omega, v, a) = (mean[0], mean[1], mean[2], mean[3], mean[4], mean[5]);
    let mut out = *mean;
    let phi_next = phi + omega * dt;
    let v_next = v + a * dt;
    if omega.abs() > OMEGA_EPS {
        let inv_w2 = 1.0 / (omega * omega);
        let (s0, c0) = phi.sin_cos();
        let (s1, c1) = phi_next.sin_cos();
        out[0] = x + inv_w2 * (v_next * omega * s1 + a * c1 - v * omega * s0 - a * c0);
        out[1] = y + inv_w2 * (-v_next * omega * c1 + a * s1 + v * omega * c0 - a * s0);
    } else {
        let dist = v * dt + 0.5 * a * dt * dt;
        let (s0, c0) = phi.sin_cos();
        out[0] = x + dist * c0;
        out[1] = y + dist * s0;
    }
    out[2] = wrap_angle(phi_next);
    out[4] = v_next;
    out
}

/// Weighted sigma-point set of a state Gaussian.
#[derive(Debug, Clone)]
pub struct SigmaPoints {
    pub points: Vec<StateVec>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
}

impl SigmaPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cholesky factor of a state covariance, escalating through the jitter
/// ladder for semidefinite inputs.
fn cholesky_with_jitter(cov: &StateCov) -> Result<Cholesky<f64, nalgebra::Const<STATE_DIM>>> {
    if let Some(chol) = Cholesky::new(*cov) {
        return Ok(chol);
    }
    for jitter in JITTER_LADDER {
        let mut bumped = *cov;
        for i in 0..STATE_DIM {
            bumped[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(bumped) {
            return Ok(chol);
        }
    }
    Err(Error::Numerical(
        "state covariance not positive definite after jitter ladder".into(),
    ))
}

/// Generates the `2n + 1 = 17` sigma points of a state Gaussian.
pub fn sigma_points(g: &StateGaussian, p: &UnscentedParams) -> Result<SigmaPoints> {
    let n = STATE_DIM;
    let lambda = p.lambda(n);
    let scale = (n as f64 + lambda).sqrt();
    let chol = cholesky_with_jitter(&g.cov)?;
    let l = chol.l();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(g.mean);
    for i in 0..n {
        let col = scale * l.column(i);
        points.push(g.mean + col);
        points.push(g.mean - col);
    }
    // Reorder so that points 1..=n are the plus branch and n+1..=2n the
    // minus branch.
    let mut ordered = Vec::with_capacity(2 * n + 1);
    ordered.push(points[0]);
    for i in 0..n {
        ordered.push(points[1 + 2 * i]);
    }
    for i in 0..n {
        ordered.push(points[2 + 2 * i]);
    }
    let (w_mean, w_cov) = p.weights(n);
    Ok(SigmaPoints { points: ordered, w_mean, w_cov })
}

/// Clamps the eigenvalues of a symmetric matrix to the given floor.
///
/// The scaled unscented transform carries a negative center weight, so
/// strongly nonlinear propagation can leave slightly indefinite covariances;
/// every covariance-producing step repairs them before use.
pub fn ensure_psd(cov: &StateCov, floor: f64) -> StateCov {
    let sym = 0.5 * (cov + cov.transpose());
    let eig = sym.symmetric_eigenvalues();
    if eig.iter().all(|&v| v >= floor) {
        return sym;
    }
    let se = sym.symmetric_eigen();
    let mut rebuilt = StateCov::zeros();
    for i in 0..STATE_DIM {
        let lambda = se.eigenvalues[i].max(floor);
        let v = se.eigenvectors.column(i);
        rebuilt += lambda * v * v.transpose();
    }
    0.5 * (rebuilt + rebuilt.transpose())
}

/// Weighted mean of transformed sigma points with a circular heading
/// component.
pub fn sigma_mean(points: &[StateVec], w_mean: &[f64]) -> StateVec {
    let mut mean = StateVec::zeros();
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    for (pt, w) in points.iter().zip(w_mean) {
        mean += *w * pt;
        sin_sum += w * pt[2].sin();
        cos_sum += w * pt[2].cos();
    }
    mean[2] = sin_sum.atan2(cos_sum);
    mean
}

/// Deviation of a sigma point from a mean with the heading residual wrapped.
pub fn state_residual(point: &StateVec, mean: &StateVec) -> StateVec {
    let mut r = point - mean;
    r[2] = wrap_angle(r[2]);
    r
}

/// Unscented CTRA prediction: sigma points propagated through the process
/// model, discrete process noise added afterwards.
pub fn unscented_predict(
    g: &StateGaussian,
    dt: f64,
    q: &ProcessNoise,
    p: &UnscentedParams,
) -> Result<StateGaussian> {
    let sp = sigma_points(g, p)?;
    let propagated: Vec<StateVec> = sp.points.iter().map(|x| ctra_transition(x, dt)).collect();
    let mean = sigma_mean(&propagated, &sp.w_mean);
    let mut cov = q.discretize(dt);
    for (pt, w) in propagated.iter().zip(&sp.w_cov) {
        let r = state_residual(pt, &mean);
        cov += *w * r * r.transpose();
    }
    Ok(StateGaussian::new(mean, ensure_psd(&cov, 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use std::f64::consts::PI;

    fn gaussian(mean: [f64; STATE_DIM], diag: [f64; STATE_DIM]) -> StateGaussian {
        StateGaussian::new(
            StateVec::from_row_slice(&mean),
            StateCov::from_diagonal(&StateVec::from_row_slice(&diag)),
        )
    }

    #[test]
    fn ctra_zero_dt_is_identity() {
        let x = StateVec::from_row_slice(&[1.0, 2.0, 0.3, 0.1, 10.0, 0.5, 1.8, 4.5]);
        assert_eq!(ctra_transition(&x, 0.0), x);
    }

    #[test]
    fn ctra_straight_line_limit() {
        let x = StateVec::from_row_slice(&[0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 1.8, 4.5]);
        let y = ctra_transition(&x, 1.0);
        assert_relative_eq!(y[0], 10.0, epsilon = 1e-12);
        for i in 1..STATE_DIM {
            assert_relative_eq!(y[i], x[i], epsilon = 1e-12);
        }
    }

    /// RK4 integration of the CTRA ODE as an independent oracle.
    fn rk4_oracle(x0: &StateVec, dt: f64, steps: usize) -> StateVec {
        let deriv = |x: &DVector<f64>| {
            DVector::from_vec(vec![
                x[4] * x[2].cos(),
                x[4] * x[2].sin(),
                x[3],
                0.0,
                x[5],
                0.0,
            ])
        };
        let mut s = DVector::from_vec(x0.iter().take(6).copied().collect());
        let h = dt / steps as f64;
        for _ in 0..steps {
            let k1 = deriv(&s);
            let k2 = deriv(&(&s + 0.5 * h * &k1));
            let k3 = deriv(&(&s + 0.5 * h * &k2));
            let k4 = deriv(&(&s + h * &k3));
            s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let mut out = *x0;
        for i in 0..6 {
            out[i] = s[i];
        }
        out[2] = wrap_angle(out[2]);
        out
    }

    #[test]
    fn ctra_turning_matches_rk4() {
        let x = StateVec::from_row_slice(&[0.0, 0.0, 0.0, 0.1, 10.0, 0.5, 1.8, 4.5]);
        let exact = ctra_transition(&x, 1.0);
        let numeric = rk4_oracle(&x, 1.0, 10_000);
        for i in 0..6 {
            assert_relative_eq!(exact[i], numeric[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn ctra_reversible_in_smooth_regime() {
        let x = StateVec::from_row_slice(&[3.0, -1.0, 0.7, 0.25, 12.0, -0.4, 1.8, 4.5]);
        let fwd = ctra_transition(&x, 0.8);
        let back = ctra_transition(&fwd, -0.8);
        for i in 0..STATE_DIM {
            assert_relative_eq!(back[i], x[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn sigma_points_symmetric_for_identity_cov() {
        let g = gaussian([0.0; 8], [1.0; 8]);
        let sp = sigma_points(&g, &UnscentedParams::default()).unwrap();
        assert_eq!(sp.len(), 17);
        assert_eq!(sp.points[0], StateVec::zeros());
        for i in 0..STATE_DIM {
            let plus = sp.points[1 + i];
            let minus = sp.points[1 + STATE_DIM + i];
            for k in 0..STATE_DIM {
                assert_relative_eq!(plus[k], -minus[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sigma_points_reconstruct_moments() {
        // A deliberately correlated PSD covariance.
        let mut a = StateCov::zeros();
        let vals = [
            1.2, 0.3, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, //
            0.3, 2.0, 0.2, 0.0, 0.4, 0.0, 0.0, 0.0, //
            0.0, 0.2, 0.5, 0.1, 0.0, 0.0, 0.0, 0.0, //
            0.1, 0.0, 0.1, 0.4, 0.0, 0.1, 0.0, 0.0, //
            0.0, 0.4, 0.0, 0.0, 3.0, 0.5, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.1, 0.5, 1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.8, 0.2, //
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 1.5,
        ];
        for i in 0..8 {
            for j in 0..8 {
                a[(i, j)] = vals[i * 8 + j];
            }
        }
        let mean = StateVec::from_row_slice(&[5.0, -2.0, 0.4, 0.05, 9.0, 0.2, 1.8, 4.6]);
        let g = StateGaussian::new(mean, a);
        let sp = sigma_points(&g, &UnscentedParams::default()).unwrap();

        let mut rec_mean = StateVec::zeros();
        for (pt, w) in sp.points.iter().zip(&sp.w_mean) {
            rec_mean += *w * pt;
        }
        for i in 0..STATE_DIM {
            assert_relative_eq!(rec_mean[i], mean[i], epsilon = 1e-9);
        }

        let mut rec_cov = StateCov::zeros();
        for (pt, w) in sp.points.iter().zip(&sp.w_cov) {
            let r = pt - rec_mean;
            rec_cov += *w * r * r.transpose();
        }
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                assert_relative_eq!(rec_cov[(i, j)], a[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sigma_points_survive_rank_deficiency() {
        let mut diag = [1.0; 8];
        diag[5] = 0.0; // exactly singular
        let g = gaussian([0.0; 8], diag);
        let sp = sigma_points(&g, &UnscentedParams::default()).unwrap();
        assert_eq!(sp.len(), 17);
    }

    #[test]
    fn unscented_predict_identity_for_zero_dt() {
        let g = gaussian(
            [1.0, 2.0, 0.3, 0.1, 10.0, 0.5, 1.8, 4.5],
            [0.5, 0.5, 0.01, 0.01, 1.0, 0.2, 0.05, 0.1],
        );
        let out = unscented_predict(&g, 0.0, &ProcessNoise::zero(), &UnscentedParams::default())
            .unwrap();
        for i in 0..STATE_DIM {
            assert_relative_eq!(out.mean[i], g.mean[i], epsilon = 1e-12);
            for j in 0..STATE_DIM {
                assert_relative_eq!(out.cov[(i, j)], g.cov[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn unscented_predict_matches_linear_kalman_in_linear_regime() {
        // With zero yaw rate, zero heading uncertainty and zero acceleration
        // coupling the transition is linear; compare against F P F^T.
        let dt = 0.5;
        let g = gaussian(
            [0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 1.8, 4.5],
            [0.2, 0.2, 0.0, 0.0, 0.5, 0.1, 0.05, 0.05],
        );
        let out = unscented_predict(&g, dt, &ProcessNoise::zero(), &UnscentedParams::default())
            .unwrap();

        // Linear model at phi = 0: x' = x + v dt + a dt^2 / 2, v' = v + a dt.
        let mut f = StateCov::identity();
        f[(0, 4)] = dt;
        f[(0, 5)] = 0.5 * dt * dt;
        f[(4, 5)] = dt;
        let expect_mean = {
            let mut m = f * g.mean;
            m[2] = wrap_angle(m[2]);
            m
        };
        let expect_cov = f * g.cov * f.transpose();
        for i in 0..STATE_DIM {
            assert_relative_eq!(out.mean[i], expect_mean[i], epsilon = 1e-6);
            for j in 0..STATE_DIM {
                assert_relative_eq!(out.cov[(i, j)], expect_cov[(i, j)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn unscented_predict_wraps_heading() {
        let dt = 1.0;
        let g = gaussian(
            [0.0, 0.0, PI - 0.01, 0.02, 5.0, 0.0, 1.8, 4.5],
            [0.1, 0.1, 1e-6, 1e-8, 0.1, 0.01, 0.01, 0.01],
        );
        let out = unscented_predict(&g, dt, &ProcessNoise::zero(), &UnscentedParams::default())
            .unwrap();
        assert_relative_eq!(out.mean[2], -PI + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn prediction_preserves_psd() {
        let g = gaussian(
            [0.0, 0.0, 1.0, 0.3, 8.0, 1.0, 1.8, 4.5],
            [2.0, 2.0, 0.5, 0.1, 4.0, 1.0, 0.3, 0.3],
        );
        let mut cur = g;
        for _ in 0..50 {
            cur = unscented_predict(&cur, 0.1, &ProcessNoise::default(), &UnscentedParams::default())
                .unwrap();
            let eig = cur.cov.symmetric_eigenvalues();
            assert!(eig.iter().all(|&v| v >= -1e-9));
        }
    }
}
