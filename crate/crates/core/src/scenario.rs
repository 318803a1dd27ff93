//! End-to-end experiments over a cohort: closed-loop excitation,
//! identification, dose computation and the injection phase, scored on
//! injection-phase glucose only.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::VirtualPatient;
use crate::error::{Error, Result};
use crate::estimate::{
    self, EstimationConfig, EstimationResult, EstimationSettings, FilterDiagnostics,
};
use crate::model::{DEFAULT_Y_REF, MINUTES_PER_DAY};
use crate::simulate::{
    self, ClosedLoopRun, ControllerConfig, GlucoseTrace, InjectionConfig, Phase, SimGrid,
};

pub const DEFAULT_RANGE_LOW: f64 = 4.4;
pub const DEFAULT_RANGE_HIGH: f64 = 7.2;
pub const DEFAULT_HYPO_THRESHOLD: f64 = 3.9;
pub const DEFAULT_INJECTION_DAYS: usize = 5;
/// Closed-loop glucose decline below which a run counts as poorly excited.
pub const DEFAULT_LOW_EXCITATION_DROP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub closed_loop_hours: f64,
    #[serde(default = "one")]
    pub gain_multiplier: f64,
    #[serde(default = "default_days")]
    pub injection_days: usize,
    #[serde(default = "default_y_ref")]
    pub y_ref: f64,
}

fn one() -> f64 {
    1.0
}
fn default_days() -> usize {
    DEFAULT_INJECTION_DAYS
}
fn default_y_ref() -> f64 {
    DEFAULT_Y_REF
}

impl ScenarioSpec {
    pub fn new(name: &str, closed_loop_hours: f64, gain_multiplier: f64) -> Self {
        Self {
            name: name.to_string(),
            closed_loop_hours,
            gain_multiplier,
            injection_days: DEFAULT_INJECTION_DAYS,
            y_ref: DEFAULT_Y_REF,
        }
    }

    /// 48 h at nominal gain.
    pub fn long() -> Self {
        Self::new("48h", 48.0, 1.0)
    }

    /// 24 h at tripled gain.
    pub fn boosted() -> Self {
        Self::new("24h-x3", 24.0, 3.0)
    }

    /// 24 h at nominal gain.
    pub fn short() -> Self {
        Self::new("24h", 24.0, 1.0)
    }

    pub fn paper_set() -> Vec<Self> {
        vec![Self::long(), Self::short(), Self::boosted()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidConfig(
                "scenario name must not be empty".into(),
            ));
        }
        if !(self.closed_loop_hours > 0.0 && self.gain_multiplier >= 0.0 && self.y_ref > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scenario '{}' needs closed_loop_hours > 0, gain_multiplier >= 0, y_ref > 0",
                self.name
            )));
        }
        if self.injection_days == 0 {
            return Err(Error::InvalidConfig(format!(
                "scenario '{}' needs injection_days >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeThresholds {
    pub range_low: f64,
    pub range_high: f64,
    pub hypo: f64,
    pub low_excitation_drop: f64,
}

impl Default for OutcomeThresholds {
    fn default() -> Self {
        Self {
            range_low: DEFAULT_RANGE_LOW,
            range_high: DEFAULT_RANGE_HIGH,
            hypo: DEFAULT_HYPO_THRESHOLD,
            low_excitation_drop: DEFAULT_LOW_EXCITATION_DROP,
        }
    }
}

/// Everything about an experiment that is not the scenario or the patient.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Protocol {
    pub controller: ControllerConfig,
    /// Integration step and CGM cadence; the horizon comes from the scenario.
    pub grid: SimGrid,
    pub injection: InjectionConfig,
    pub estimation: EstimationSettings,
    pub thresholds: OutcomeThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub min_glucose: f64,
    pub time_in_range: f64,
    pub hypo: bool,
    /// Estimated daily dose, U/day.
    pub dose_est: f64,
    /// Daily dose from the true parameters, U/day.
    pub dose_true: f64,
    /// `(dose_est - dose_true) / dose_true`.
    pub dose_rel_error: f64,
    /// Latent glucose decline over the closed-loop phase, mmol/L.
    pub glucose_drop: f64,
    pub low_excitation: bool,
}

impl OutcomeMetrics {
    pub fn overestimated(&self) -> bool {
        self.dose_est > self.dose_true
    }
}

/// Scores the injection-phase samples of `trace`.
pub fn outcome_metrics(
    trace: &GlucoseTrace,
    dose_est: f64,
    dose_true: f64,
    glucose_drop: f64,
    thresholds: &OutcomeThresholds,
) -> OutcomeMetrics {
    let glucose: Vec<f64> = trace.phase(Phase::Injection).map(|s| s.x.x4).collect();
    let min_glucose = glucose.iter().copied().fold(f64::INFINITY, f64::min);
    let in_range = glucose
        .iter()
        .filter(|g| (thresholds.range_low..=thresholds.range_high).contains(*g))
        .count();
    let time_in_range = if glucose.is_empty() {
        0.0
    } else {
        in_range as f64 / glucose.len() as f64
    };
    OutcomeMetrics {
        min_glucose,
        time_in_range,
        hypo: min_glucose < thresholds.hypo,
        dose_est,
        dose_true,
        dose_rel_error: (dose_est - dose_true) / dose_true,
        glucose_drop,
        low_excitation: glucose_drop < thresholds.low_excitation_drop,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRun {
    pub patient: VirtualPatient,
    /// Closed-loop followed by injection-phase samples.
    pub trace: GlucoseTrace,
    pub estimation: EstimationResult,
    pub metrics: OutcomeMetrics,
    /// Filter at the true parameters.
    pub truth_health: FilterDiagnostics,
    /// Smallest covariance eigenvalue over the filter runs at the true and
    /// estimated parameters.
    pub min_eigenvalue: f64,
    /// Insulin infused during the first 24 h of closed loop, U.
    pub first_day_insulin: f64,
}

fn controller_for(spec: &ScenarioSpec, protocol: &Protocol) -> ControllerConfig {
    ControllerConfig {
        gain_multiplier: protocol.controller.gain_multiplier * spec.gain_multiplier,
        y_ref: spec.y_ref,
        ..protocol.controller
    }
}

pub fn closed_loop_phase(
    patient: &VirtualPatient,
    spec: &ScenarioSpec,
    protocol: &Protocol,
) -> Result<ClosedLoopRun> {
    let grid = protocol.grid.with_horizon(spec.closed_loop_hours * 60.0);
    simulate::run_closed_loop(patient, &controller_for(spec, protocol), &grid)
}

/// Injection phase with `dose` U/day following `closed_loop`, appended to
/// the closed-loop trace and scored.
pub fn administer(
    patient: &VirtualPatient,
    closed_loop: &ClosedLoopRun,
    dose: f64,
    spec: &ScenarioSpec,
    protocol: &Protocol,
) -> Result<(GlucoseTrace, OutcomeMetrics)> {
    let injection = simulate::run_injection_phase(
        patient,
        &closed_loop.end_state,
        closed_loop.end_time,
        dose,
        spec.injection_days,
        &protocol.grid,
        &protocol.injection,
    )?;
    let mut trace = closed_loop.trace.clone();
    trace.extend(injection);
    let start = closed_loop
        .trace
        .samples
        .first()
        .map_or(f64::NAN, |s| s.x.x4);
    let drop = start - closed_loop.end_state.x4;
    let dose_true = patient.true_dose(spec.y_ref).u_basal;
    let metrics = outcome_metrics(&trace, dose, dose_true, drop, &protocol.thresholds);
    Ok((trace, metrics))
}

fn run_patient_inner(
    patient: &VirtualPatient,
    spec: &ScenarioSpec,
    protocol: &Protocol,
) -> Result<PatientRun> {
    let closed_loop = closed_loop_phase(patient, spec, protocol)?;
    let mut cfg = EstimationConfig::matched(patient.sigma, patient.r_cgm, &protocol.estimation);
    cfg.y_ref = spec.y_ref;
    let obs = estimate::observations(&closed_loop.trace)?;
    let estimation = estimate::estimate_from_observations(&obs, &cfg)?;

    let truth_health = estimate::filter_diagnostics(&patient.truth, &obs, &cfg.noise, &cfg.init)?;
    let fitted = crate::model::PredictionParams::from_parts(cfg.fixed, estimation.theta_hat);
    let fitted_health = estimate::filter_diagnostics(&fitted, &obs, &cfg.noise, &cfg.init)?;

    let (trace, metrics) = administer(
        patient,
        &closed_loop,
        estimation.dose.u_basal,
        spec,
        protocol,
    )?;
    Ok(PatientRun {
        patient: *patient,
        trace,
        estimation,
        metrics,
        truth_health,
        min_eigenvalue: truth_health
            .min_eigenvalue
            .min(fitted_health.min_eigenvalue),
        first_day_insulin: closed_loop.infused_insulin(MINUTES_PER_DAY),
    })
}

/// Closed loop, estimation, dosing and injection phase for one patient.
pub fn run_patient(
    patient: &VirtualPatient,
    spec: &ScenarioSpec,
    protocol: &Protocol,
) -> Result<PatientRun> {
    spec.validate()?;
    run_patient_inner(patient, spec, protocol).map_err(|e| e.for_patient(patient.id))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatientOutcome {
    Completed(Box<PatientRun>),
    Failed { id: usize, message: String },
}

impl PatientOutcome {
    pub fn id(&self) -> usize {
        match self {
            PatientOutcome::Completed(run) => run.patient.id,
            PatientOutcome::Failed { id, .. } => *id,
        }
    }

    pub fn run(&self) -> Option<&PatientRun> {
        match self {
            PatientOutcome::Completed(run) => Some(run),
            PatientOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseErrorSummary {
    pub mean: f64,
    pub mean_abs: f64,
    pub median_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub patients: usize,
    pub failures: usize,
    pub hypo_count: usize,
    pub overestimated_count: usize,
    pub mean_time_in_range: f64,
    pub low_excitation_count: usize,
    pub converged_count: usize,
    pub dose_error: DoseErrorSummary,
}

impl ScenarioSummary {
    pub fn overestimated_fraction(&self) -> f64 {
        let done = self.patients - self.failures;
        if done == 0 {
            return 0.0;
        }
        self.overestimated_count as f64 / done as f64
    }

    pub fn from_outcomes(name: &str, outcomes: &[PatientOutcome]) -> Self {
        let mut runs: Vec<&PatientRun> = outcomes.iter().filter_map(PatientOutcome::run).collect();
        runs.sort_by_key(|r| r.patient.id);
        let n = runs.len();
        let count = |f: &dyn Fn(&PatientRun) -> bool| runs.iter().filter(|r| f(r)).count();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let errors: Vec<f64> = runs.iter().map(|r| r.metrics.dose_rel_error).collect();
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let median_abs = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => abs[n / 2],
            _ => 0.5 * (abs[n / 2 - 1] + abs[n / 2]),
        };
        let tir: Vec<f64> = runs.iter().map(|r| r.metrics.time_in_range).collect();
        Self {
            scenario: name.to_string(),
            patients: outcomes.len(),
            failures: outcomes.len() - n,
            hypo_count: count(&|r| r.metrics.hypo),
            overestimated_count: count(&|r| r.metrics.overestimated()),
            mean_time_in_range: mean(&tir),
            low_excitation_count: count(&|r| r.metrics.low_excitation),
            converged_count: count(&|r| r.estimation.converged),
            dose_error: DoseErrorSummary {
                mean: mean(&errors),
                mean_abs: mean(&abs),
                median_abs,
                max_abs: abs.last().copied().unwrap_or(f64::NAN),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    /// Ordered by patient id.
    pub outcomes: Vec<PatientOutcome>,
    pub summary: ScenarioSummary,
}

impl ScenarioResult {
    pub fn runs(&self) -> impl Iterator<Item = &PatientRun> {
        self.outcomes.iter().filter_map(PatientOutcome::run)
    }
}

/// Runs every patient (in parallel on the current rayon pool). Patient
/// failures are recorded and do not stop the scenario.
pub fn run_scenario(
    spec: &ScenarioSpec,
    cohort: &[VirtualPatient],
    protocol: &Protocol,
) -> Result<ScenarioResult> {
    if cohort.is_empty() {
        return Err(Error::InvalidConfig("no patients".into()));
    }
    spec.validate()?;
    let mut outcomes: Vec<PatientOutcome> = cohort
        .par_iter()
        .map(|p| match run_patient(p, spec, protocol) {
            Ok(run) => PatientOutcome::Completed(Box::new(run)),
            Err(e) => PatientOutcome::Failed {
                id: p.id,
                message: e.to_string(),
            },
        })
        .collect();
    outcomes.sort_by_key(PatientOutcome::id);
    let summary = ScenarioSummary::from_outcomes(&spec.name, &outcomes);
    Ok(ScenarioResult {
        spec: spec.clone(),
        outcomes,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    /// All counts equal.
    Tie,
    /// Non-increasing from the short run to the long run, not all equal.
    Holds,
    Violated,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Tie => "tie",
            Trend::Holds => "holds",
            Trend::Violated => "violated",
        })
    }
}

/// `long <= boosted <= short`.
pub fn ordinal_trend(long: usize, boosted: usize, short: usize) -> Trend {
    if long == boosted && boosted == short {
        Trend::Tie
    } else if long <= boosted && boosted <= short {
        Trend::Holds
    } else {
        Trend::Violated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    /// Summaries in the order long, boosted, short.
    pub summaries: Vec<ScenarioSummary>,
    pub hypo_trend: Trend,
    pub overestimation_trend: Trend,
}

impl TrendReport {
    pub fn verdict_line(&self) -> String {
        let s = &self.summaries;
        let hypo = format!(
            "hypo {} <= {} <= {}",
            s[0].hypo_count, s[1].hypo_count, s[2].hypo_count
        );
        let over = format!(
            "overestimated {}/{}/{}",
            s[0].overestimated_count, s[1].overestimated_count, s[2].overestimated_count
        );
        match self.hypo_trend {
            Trend::Holds => format!("trend: holds, {} best ({hypo}; {over})", s[0].scenario),
            t => format!("trend: {t} ({hypo}; {over})"),
        }
    }
}

/// Compares the long, boosted-gain and short scenarios run on one cohort.
/// A violated ordering is reported, not raised.
pub fn compare_scenarios(
    long: &ScenarioSummary,
    boosted: &ScenarioSummary,
    short: &ScenarioSummary,
) -> TrendReport {
    TrendReport {
        summaries: vec![long.clone(), boosted.clone(), short.clone()],
        hypo_trend: ordinal_trend(long.hypo_count, boosted.hypo_count, short.hypo_count),
        overestimation_trend: ordinal_trend(
            long.overestimated_count,
            boosted.overestimated_count,
            short.overestimated_count,
        ),
    }
}
