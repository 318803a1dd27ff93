//! Maximum-likelihood identification of `(p4, p6, p7)` from closed-loop
//! CGM data, with the likelihood evaluated by the CDEKF in [`filter`].

pub mod filter;
pub mod nelder_mead;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use filter::{
    measurement_update, run_filter, time_update, Dynamics, FilterInit, FilterNoise, FilterRun,
    FilterState, FilterStepRecord, LinearDynamics, Observations,
};
pub use nelder_mead::NelderMeadOptions;

use crate::error::{Error, Result};
use crate::model::{self, DoseResult, FixedParams, PredictionParams, Theta, DEFAULT_Y_REF};
use crate::simulate::{GlucoseTrace, Phase};

/// Smallest measurement variance handed to the filter.
pub const R_FLOOR: f64 = 1e-6;
/// Default search box half-width as a multiplicative factor.
pub const DEFAULT_MAX_FOLD: f64 = 100.0;

/// Closed-loop CGM readings and pump rates of a trace.
pub fn observations(trace: &GlucoseTrace) -> Result<Observations> {
    let samples: Vec<_> = trace.phase(Phase::ClosedLoop).collect();
    if samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let interval = match samples.as_slice() {
        [a, b, ..] => b.time_min - a.time_min,
        _ => 0.0,
    };
    Ok(Observations {
        interval,
        y: samples.iter().map(|s| s.y_cgm).collect(),
        u: samples.iter().map(|s| s.u).collect(),
    })
}

/// Negative log-likelihood of `obs` for a filter started at `init`;
/// `+inf` if the filter fails.
pub fn likelihood_from_state<D: Dynamics + ?Sized>(
    dynamics: &D,
    obs: &Observations,
    noise: &FilterNoise,
    init: FilterState,
) -> f64 {
    if obs.is_empty() {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    let pass = filter::filter_pass(dynamics, obs, init, noise, |rec, _, _| {
        sum += rec.innovation_var.ln() + rec.innovation * rec.innovation / rec.innovation_var;
    });
    match pass {
        Ok(_) if sum.is_finite() => 0.5 * obs.len() as f64 * (2.0 * PI).ln() + 0.5 * sum,
        _ => f64::INFINITY,
    }
}

/// `V(theta)` with the filter initialized from the first sample.
pub fn neg_log_likelihood(
    theta: &Theta,
    obs: &Observations,
    fixed: &FixedParams,
    noise: &FilterNoise,
    init: &FilterInit,
) -> f64 {
    let positive = [theta.p4, theta.p6, theta.p7]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
    if !positive || obs.is_empty() {
        return f64::INFINITY;
    }
    let params = PredictionParams::from_parts(*fixed, *theta);
    let start = init.state_for(theta.p7, obs.y[0], obs.u[0]);
    likelihood_from_state(&params, obs, noise, start)
}

/// Optimizer and filter settings shared by every patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSettings {
    pub max_evals: usize,
    pub tolerance: f64,
    /// Initial simplex edge in log-parameter space.
    pub initial_step: f64,
    /// Prior covariance diagonal of the filter.
    pub p0_diag: [f64; 4],
    /// Search box: each parameter stays within this factor of its starting
    /// value.
    pub max_fold: f64,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        let nm = NelderMeadOptions::default();
        Self {
            max_evals: nm.max_evals,
            tolerance: nm.tolerance,
            initial_step: nm.initial_step,
            p0_diag: FilterInit::default().p0_diag,
            max_fold: DEFAULT_MAX_FOLD,
        }
    }
}

impl EstimationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals < 4 || !(self.tolerance > 0.0) || !(self.initial_step > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "estimation needs max_evals >= 4, tolerance > 0, initial_step > 0: {self:?}"
            )));
        }
        if !(self.max_fold > 1.0) {
            return Err(Error::InvalidConfig("max_fold must be > 1".into()));
        }
        if self.p0_diag.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("p0_diag entries must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationConfig {
    pub fixed: FixedParams,
    pub initial_theta: Theta,
    pub noise: FilterNoise,
    pub init: FilterInit,
    pub optimizer: NelderMeadOptions,
    /// Log-space half-width of the search box around `initial_theta`.
    pub log_bound: f64,
    pub y_ref: f64,
}

impl EstimationConfig {
    /// Population starting point with noise matched to the simulator. The
    /// measurement variance is floored at [`R_FLOOR`].
    pub fn matched(sigma: f64, r_cgm: f64, settings: &EstimationSettings) -> Self {
        Self {
            fixed: FixedParams::default(),
            initial_theta: Theta::default(),
            noise: FilterNoise {
                sigma,
                r: r_cgm.max(R_FLOOR),
            },
            init: FilterInit {
                p0_diag: settings.p0_diag,
            },
            optimizer: NelderMeadOptions {
                max_evals: settings.max_evals,
                tolerance: settings.tolerance,
                initial_step: settings.initial_step,
            },
            log_bound: settings.max_fold.ln(),
            y_ref: DEFAULT_Y_REF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    pub v_min: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub dose: DoseResult,
}

/// Minimizes `V` over log-parameters by Nelder-Mead inside the search box.
/// Running out of budget returns the best point with `converged = false`.
pub fn estimate_parameters(
    trace: &GlucoseTrace,
    cfg: &EstimationConfig,
) -> Result<EstimationResult> {
    let obs = observations(trace)?;
    estimate_from_observations(&obs, cfg)
}

pub fn estimate_from_observations(
    obs: &Observations,
    cfg: &EstimationConfig,
) -> Result<EstimationResult> {
    if obs.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let z0 = cfg.initial_theta.to_log();
    let objective = |z: &[f64; 3]| {
        if z.iter()
            .zip(&z0)
            .any(|(a, b)| (a - b).abs() > cfg.log_bound)
        {
            return f64::INFINITY;
        }
        neg_log_likelihood(&Theta::from_log(z), obs, &cfg.fixed, &cfg.noise, &cfg.init)
    };
    let nm = nelder_mead::minimize(objective, z0, &cfg.optimizer);
    let theta_hat = Theta::from_log(&nm.x);
    let params = PredictionParams::from_parts(cfg.fixed, theta_hat);
    Ok(EstimationResult {
        theta_hat,
        v_min: nm.f,
        iterations: nm.iterations,
        evaluations: nm.evaluations,
        converged: nm.converged,
        dose: model::target_dose(&params, cfg.y_ref),
    })
}

/// Filter health at a given parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub min_eigenvalue: f64,
    pub lag1_autocorrelation: f64,
    /// `3 / sqrt(N)`.
    pub whiteness_bound: f64,
}

impl FilterDiagnostics {
    pub fn white(&self) -> bool {
        self.lag1_autocorrelation.abs() <= self.whiteness_bound
    }
}

pub fn filter_diagnostics(
    params: &PredictionParams,
    obs: &Observations,
    noise: &FilterNoise,
    init: &FilterInit,
) -> Result<FilterDiagnostics> {
    let start = init.state_for(params.p7, obs.y[0], obs.u[0]);
    let run = run_filter(params, obs, start, noise)?;
    Ok(FilterDiagnostics {
        min_eigenvalue: run.min_eigenvalue,
        lag1_autocorrelation: run.lag1_autocorrelation(),
        whiteness_bound: 3.0 / (obs.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::VirtualPatient;
    use crate::simulate::{self, ControllerConfig, SimGrid};
    use nalgebra::{Matrix4, Vector4};

    fn single(y: f64) -> Observations {
        Observations {
            interval: 5.0,
            y: vec![y],
            u: vec![0.0],
        }
    }

    #[test]
    fn single_sample_zero_innovation() {
        let noise = FilterNoise { sigma: 0.0, r: 0.5 };
        let init = FilterInit {
            p0_diag: [0.0, 0.0, 0.0, 0.5],
        };
        let v = neg_log_likelihood(
            &Theta::default(),
            &single(7.0),
            &FixedParams::default(),
            &noise,
            &init,
        );
        assert!((v - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn single_sample_unit_innovation() {
        let noise = FilterNoise { sigma: 0.0, r: 1.0 };
        let start = FilterState {
            x: Vector4::new(0.0, 0.0, 0.0, 5.0),
            p: Matrix4::identity(),
        };
        let v = likelihood_from_state(&PredictionParams::POPULATION, &single(6.0), &noise, start);
        let expected = 0.5 * (2.0 * PI).ln() + 0.5 * (2.0_f64.ln() + 0.5);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let cfg = EstimationConfig::matched(0.0, 0.0, &EstimationSettings::default());
        assert!(matches!(
            estimate_parameters(&GlucoseTrace::default(), &cfg),
            Err(Error::EmptyTrace)
        ));
    }

    #[test]
    fn nonpositive_theta_is_rejected_point() {
        let theta = Theta {
            p4: -1.0,
            ..Theta::default()
        };
        let noise = FilterNoise { sigma: 0.0, r: 1.0 };
        let v = neg_log_likelihood(
            &theta,
            &single(7.0),
            &FixedParams::default(),
            &noise,
            &FilterInit::default(),
        );
        assert_eq!(v, f64::INFINITY);
    }

    #[test]
    fn estimates_stay_in_search_box() {
        let obs = observations(&noiseless_trace(24.0)).unwrap();
        let settings = EstimationSettings {
            max_fold: 1.5,
            max_evals: 200,
            ..Default::default()
        };
        let mut cfg = EstimationConfig::matched(0.0, 0.0, &settings);
        cfg.initial_theta = Theta {
            p4: 0.1,
            p6: 0.2,
            p7: 0.01,
        };
        let est = estimate_from_observations(&obs, &cfg).unwrap();
        let z0 = cfg.initial_theta.to_log();
        for (z, z0) in est.theta_hat.to_log().iter().zip(&z0) {
            assert!((z - z0).abs() <= 1.5_f64.ln() + 1e-12);
        }
        assert!(est.v_min.is_finite());
    }

    fn noiseless_trace(hours: f64) -> GlucoseTrace {
        let patient = VirtualPatient::population(0, 80.0, 1);
        let grid = SimGrid::default().with_horizon(hours * 60.0);
        simulate::run_closed_loop(&patient, &ControllerConfig::default(), &grid)
            .unwrap()
            .trace
    }

    #[test]
    fn likelihood_is_pure() {
        let obs = observations(&noiseless_trace(24.0)).unwrap();
        let noise = FilterNoise {
            sigma: 0.05,
            r: 0.16,
        };
        let f = || {
            neg_log_likelihood(
                &Theta::default(),
                &obs,
                &FixedParams::default(),
                &noise,
                &FilterInit::default(),
            )
        };
        assert_eq!(f().to_bits(), f().to_bits());
    }

    #[test]
    fn truth_minimizes_one_dimensional_scans() {
        let obs = observations(&noiseless_trace(48.0)).unwrap();
        let noise = FilterNoise {
            sigma: 0.0,
            r: 1e-6,
        };
        let v = |t: Theta| {
            neg_log_likelihood(
                &t,
                &obs,
                &FixedParams::default(),
                &noise,
                &FilterInit::default(),
            )
        };
        let truth = Theta::default();
        let v0 = v(truth);
        for factor in [0.5, 2.0] {
            assert!(
                v0 <= v(Theta {
                    p4: truth.p4 * factor,
                    ..truth
                })
            );
            assert!(
                v0 <= v(Theta {
                    p6: truth.p6 * factor,
                    ..truth
                })
            );
            assert!(
                v0 <= v(Theta {
                    p7: truth.p7 * factor,
                    ..truth
                })
            );
        }
    }
}
