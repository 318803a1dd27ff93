//! Continuous-discrete extended Kalman filter with scalar glucose output.
//!
//! Between samples the state estimate and its covariance are propagated by
//! integrating `dx/dt = f(x, u)` and `dP/dt = A P + P A' + s s'` jointly with
//! fixed-step RK4, `A` being re-linearized at every stage. The measurement
//! matrix is `C = (0, 0, 0, 1)`.

use nalgebra::{Cholesky, Matrix4, SymmetricEigen, Vector4};

use crate::error::{Error, Result};
use crate::model::{self, ModelState, PredictionParams};

/// RK4 step used inside one sampling interval, min.
pub const RK4_SUBSTEP: f64 = 1.0;
/// Smallest eigenvalue tolerated in a propagated covariance.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Continuous-time drift and its state Jacobian.
pub trait Dynamics {
    fn drift(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64>;
    fn jacobian(&self, x: &Vector4<f64>, u: f64) -> Matrix4<f64>;
}

impl Dynamics for PredictionParams {
    fn drift(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
        model::rhs(&ModelState::from_vector(x), u, self).to_vector()
    }

    fn jacobian(&self, x: &Vector4<f64>, u: f64) -> Matrix4<f64> {
        model::jacobian(&ModelState::from_vector(x), u, self)
    }
}

/// `dx/dt = A x + b u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDynamics {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
}

impl Dynamics for LinearDynamics {
    fn drift(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
        self.a * x + self.b * u
    }

    fn jacobian(&self, _x: &Vector4<f64>, _u: f64) -> Matrix4<f64> {
        self.a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterStepRecord {
    /// `y - x4`, mmol/L.
    pub innovation: f64,
    /// Innovation variance, (mmol/L)^2.
    pub innovation_var: f64,
    pub gain: Vector4<f64>,
}

impl FilterStepRecord {
    pub fn normalized(&self) -> f64 {
        self.innovation / self.innovation_var.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterNoise {
    /// Process-noise sd on glucose, mmol/L per sqrt(min).
    pub sigma: f64,
    /// Measurement variance used by the update.
    pub r: f64,
}

/// Prior covariance diagonal; the prior mean is built from the first sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterInit {
    pub p0_diag: [f64; 4],
}

impl Default for FilterInit {
    fn default() -> Self {
        Self {
            p0_diag: [1e-4, 1e-4, 1e-4, 1.0],
        }
    }
}

impl FilterInit {
    /// `x0 = (u0, u0, u0 + p7 y0, y0)`.
    pub fn state_for(&self, p7: f64, y0: f64, u0: f64) -> FilterState {
        FilterState {
            x: Vector4::new(u0, u0, u0 + p7 * y0, y0),
            p: Matrix4::from_diagonal(&Vector4::from(self.p0_diag)),
        }
    }
}

fn symmetrize(p: &Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

pub fn min_eigenvalue(p: &Matrix4<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(p)).eigenvalues.min()
}

fn check_psd(p: &Matrix4<f64>) -> Result<()> {
    let shifted = p + Matrix4::identity() * PSD_TOLERANCE;
    if p.iter().all(|v| v.is_finite()) && Cholesky::new(shifted).is_some() {
        return Ok(());
    }
    Err(Error::CovarianceIndefinite(min_eigenvalue(p)))
}

/// Joseph-form update with the glucose measurement `y`.
pub fn measurement_update(
    fs: &FilterState,
    y: f64,
    r: f64,
) -> Result<(FilterState, FilterStepRecord)> {
    let p = &fs.p;
    let innovation = y - fs.x[3];
    let innovation_var = p[(3, 3)] + r;
    if !(innovation_var > 0.0) {
        return Err(Error::InnovationCovariance(innovation_var));
    }
    let gain: Vector4<f64> = p.column(3) / innovation_var;
    let x = fs.x + gain * innovation;
    let mut i_kc = Matrix4::identity();
    i_kc.set_column(3, &(i_kc.column(3) - gain));
    let p = i_kc * p * i_kc.transpose() + gain * gain.transpose() * r;
    Ok((
        FilterState {
            x,
            p: symmetrize(&p),
        },
        FilterStepRecord {
            innovation,
            innovation_var,
            gain,
        },
    ))
}

fn moments<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &Vector4<f64>,
    p: &Matrix4<f64>,
    u: f64,
    q: f64,
) -> (Vector4<f64>, Matrix4<f64>) {
    let a = dynamics.jacobian(x, u);
    let mut dp = a * p + p * a.transpose();
    dp[(3, 3)] += q;
    (dynamics.drift(x, u), dp)
}

/// Propagates the estimate over `dt` minutes with input `u` held.
pub fn time_update<D: Dynamics + ?Sized>(
    fs: &FilterState,
    dynamics: &D,
    u: f64,
    dt: f64,
    sigma: f64,
) -> Result<FilterState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "time update needs dt > 0, got {dt}"
        )));
    }
    let n = (dt / RK4_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    let q = sigma * sigma;
    let (mut x, mut p) = (fs.x, fs.p);
    for _ in 0..n {
        let (k1x, k1p) = moments(dynamics, &x, &p, u, q);
        let (k2x, k2p) = moments(
            dynamics,
            &(x + k1x * (h / 2.0)),
            &(p + k1p * (h / 2.0)),
            u,
            q,
        );
        let (k3x, k3p) = moments(
            dynamics,
            &(x + k2x * (h / 2.0)),
            &(p + k2p * (h / 2.0)),
            u,
            q,
        );
        let (k4x, k4p) = moments(dynamics, &(x + k3x * h), &(p + k3p * h), u, q);
        x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    }
    let p = symmetrize(&p);
    check_psd(&p)?;
    Ok(FilterState { x, p })
}

/// CGM samples with the pump rate held after each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    /// Sample spacing, min.
    pub interval: f64,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Runs measurement and time updates over every sample, calling `on_step`
/// with the record, the prior and the posterior of each measurement update.
pub fn filter_pass<D, F>(
    dynamics: &D,
    obs: &Observations,
    init: FilterState,
    noise: &FilterNoise,
    mut on_step: F,
) -> Result<FilterState>
where
    D: Dynamics + ?Sized,
    F: FnMut(&FilterStepRecord, &FilterState, &FilterState),
{
    let mut fs = init;
    let n = obs.len();
    for k in 0..n {
        let (updated, record) = measurement_update(&fs, obs.y[k], noise.r)?;
        on_step(&record, &fs, &updated);
        fs = updated;
        if k + 1 < n {
            fs = time_update(&fs, dynamics, obs.u[k], obs.interval, noise.sigma)?;
            if !fs.x.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    time: (k + 1) as f64 * obs.interval,
                });
            }
        }
    }
    Ok(fs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub records: Vec<FilterStepRecord>,
    /// Filtered estimates after each measurement update.
    pub states: Vec<FilterState>,
    pub min_eigenvalue: f64,
}

impl FilterRun {
    /// Lag-one autocorrelation of the normalized innovations.
    pub fn lag1_autocorrelation(&self) -> f64 {
        let z: Vec<f64> = self
            .records
            .iter()
            .map(FilterStepRecord::normalized)
            .collect();
        lag1_autocorrelation(&z)
    }
}

/// Full pass keeping every record and tracking the smallest covariance
/// eigenvalue seen before and after each measurement update.
pub fn run_filter<D: Dynamics + ?Sized>(
    dynamics: &D,
    obs: &Observations,
    init: FilterState,
    noise: &FilterNoise,
) -> Result<FilterRun> {
    let mut records = Vec::with_capacity(obs.len());
    let mut states = Vec::with_capacity(obs.len());
    let mut min_eig = min_eigenvalue(&init.p);
    filter_pass(dynamics, obs, init, noise, |rec, prior, post| {
        records.push(*rec);
        states.push(*post);
        min_eig = min_eig
            .min(min_eigenvalue(&prior.p))
            .min(min_eigenvalue(&post.p));
    })?;
    Ok(FilterRun {
        records,
        states,
        min_eigenvalue: min_eig,
    })
}

pub fn lag1_autocorrelation(z: &[f64]) -> f64 {
    let n = z.len();
    if n < 2 {
        return 0.0;
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let var: f64 = z.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = z.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: PredictionParams = PredictionParams::POPULATION;

    fn identity_state(x4: f64) -> FilterState {
        FilterState {
            x: Vector4::new(0.0, 0.0, 0.0, x4),
            p: Matrix4::identity(),
        }
    }

    #[test]
    fn measurement_update_by_hand() {
        let (fs, rec) = measurement_update(&identity_state(5.0), 6.0, 1.0).unwrap();
        assert_eq!(rec.innovation, 1.0);
        assert_eq!(rec.innovation_var, 2.0);
        assert_eq!(rec.gain, Vector4::new(0.0, 0.0, 0.0, 0.5));
        assert_eq!(fs.x[3], 5.5);
        assert!((fs.p[(3, 3)] - 0.5).abs() < 1e-15);
        assert_eq!(fs.p[(0, 0)], 1.0);
    }

    #[test]
    fn zero_innovation_still_shrinks_covariance() {
        let prior = identity_state(5.0);
        let (fs, rec) = measurement_update(&prior, 5.0, 1.0).unwrap();
        assert_eq!(rec.innovation, 0.0);
        assert_eq!(fs.x, prior.x);
        assert!(fs.p[(3, 3)] < prior.p[(3, 3)]);
    }

    #[test]
    fn uninformative_measurement() {
        let prior = identity_state(5.0);
        let (fs, rec) = measurement_update(&prior, 9.0, 1e12).unwrap();
        assert!(rec.gain.norm() < 1e-11);
        assert!((fs.x - prior.x).norm() < 1e-10);
        assert!((fs.p - prior.p).norm() < 1e-10);
    }

    #[test]
    fn nonpositive_innovation_variance_is_an_error() {
        let mut prior = identity_state(5.0);
        prior.p[(3, 3)] = -2.0;
        assert!(matches!(
            measurement_update(&prior, 5.0, 1.0),
            Err(Error::InnovationCovariance(_))
        ));
    }

    #[test]
    fn noiseless_certain_prior_stays_certain() {
        let fs = FilterState {
            x: Vector4::new(0.01, 0.0, 0.02, 9.0),
            p: Matrix4::zeros(),
        };
        let out = time_update(&fs, &P, 0.01, 5.0, 0.0).unwrap();
        assert_eq!(out.p, Matrix4::zeros());
        // Same trajectory as an independent RK4 on the model drift.
        let mut x = ModelState::from_vector(&fs.x);
        for _ in 0..5 {
            let k1 = model::rhs(&x, 0.01, &P);
            let k2 = model::rhs(&x.advanced(&k1, 0.5), 0.01, &P);
            let k3 = model::rhs(&x.advanced(&k2, 0.5), 0.01, &P);
            let k4 = model::rhs(&x.advanced(&k3, 1.0), 0.01, &P);
            let v = x.to_vector()
                + (k1.to_vector() + k2.to_vector() * 2.0 + k3.to_vector() * 2.0 + k4.to_vector())
                    / 6.0;
            x = ModelState::from_vector(&v);
        }
        assert!((out.x - x.to_vector()).norm() < 1e-14);
    }

    fn equilibrium() -> (Vector4<f64>, f64) {
        let u = model::dose_required(&P, 5.8);
        (model::steady_state(&P, u).unwrap().to_vector(), u)
    }

    fn spd_prior() -> Matrix4<f64> {
        let l = Matrix4::new(
            0.01, 0.0, 0.0, 0.0, //
            0.002, 0.01, 0.0, 0.0, //
            0.001, 0.003, 0.02, 0.0, //
            0.0, 0.01, -0.05, 0.8,
        );
        l * l.transpose()
    }

    #[test]
    fn frozen_jacobian_matches_lyapunov_solution() {
        let (x, u) = equilibrium();
        let a = model::jacobian(&ModelState::from_vector(&x), u, &P);
        let sigma = 0.05;
        let dt = 5.0;
        let p0 = spd_prior();
        let out = time_update(&FilterState { x, p: p0 }, &P, u, dt, sigma).unwrap();
        assert!((out.x - x).norm() < 1e-12);

        // Oracle: e^{A dt} P0 e^{A' dt} + int_0^dt e^{As} Q e^{A's} ds by
        // composite Simpson on a fine grid.
        let phi = (a * dt).exp();
        let mut q = Matrix4::zeros();
        q[(3, 3)] = sigma * sigma;
        let m = 2000;
        let h = dt / m as f64;
        let mut integral = Matrix4::zeros();
        for i in 0..=m {
            let e = (a * (i as f64 * h)).exp();
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            integral += e * q * e.transpose() * w;
        }
        integral *= h / 3.0;
        let expected = phi * p0 * phi.transpose() + integral;
        assert!((out.p - expected).abs().max() < 1e-6);
    }

    #[test]
    fn small_step_matches_first_order_taylor() {
        let (x, u) = equilibrium();
        let a = model::jacobian(&ModelState::from_vector(&x), u, &P);
        let p0 = spd_prior();
        let dt = 1e-3;
        let sigma = 0.05;
        let out = time_update(&FilterState { x, p: p0 }, &P, u, dt, sigma).unwrap();
        let mut deriv = a * p0 + p0 * a.transpose();
        deriv[(3, 3)] += sigma * sigma;
        let residual = (out.p - p0 - deriv * dt).abs().max();
        assert!(residual < 1e-3 * dt * deriv.abs().max(), "{residual}");
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let mut p = Matrix4::identity();
        p[(2, 2)] = -1e-3;
        let fs = FilterState {
            x: Vector4::new(0.0, 0.0, 0.01, 7.0),
            p,
        };
        assert!(matches!(
            time_update(&fs, &P, 0.0, 5.0, 0.0),
            Err(Error::CovarianceIndefinite(v)) if v < 0.0
        ));
    }

    #[test]
    fn lag1_of_alternating_sequence() {
        let z: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!((lag1_autocorrelation(&z) + 0.99).abs() < 1e-12);
        assert_eq!(lag1_autocorrelation(&[1.0]), 0.0);
    }
}
