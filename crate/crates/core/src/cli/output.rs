//! CSV tables written by the command line, with matching readers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cohort::{PopulationConfig, VirtualPatient};
use crate::model::{self, PredictionParams};
use crate::scenario::{PatientOutcome, ScenarioResult, ScenarioSummary};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: usize,
    pub p4: f64,
    pub p6: f64,
    pub p7: f64,
    pub body_weight: f64,
    pub fasting_glucose: f64,
    /// True daily dose, U/day.
    pub u_basal_true: f64,
    pub seed: u64,
}

impl CohortRow {
    pub fn new(patient: &VirtualPatient, y_ref: f64) -> Self {
        let t = &patient.truth;
        Self {
            patient_id: patient.id,
            p4: t.p4,
            p6: t.p6,
            p7: t.p7,
            body_weight: patient.body_weight,
            fasting_glucose: model::fasting_glucose(t).unwrap_or(f64::NAN),
            u_basal_true: patient.true_dose(y_ref).u_basal,
            seed: patient.seed,
        }
    }

    /// Rebuilds the patient; fixed parameters and noise come from `population`.
    pub fn to_patient(&self, population: &PopulationConfig) -> VirtualPatient {
        VirtualPatient {
            id: self.patient_id,
            truth: PredictionParams {
                p4: self.p4,
                p6: self.p6,
                p7: self.p7,
                ..population.median
            },
            body_weight: self.body_weight,
            sigma: population.sigma,
            r_cgm: population.cgm_sd * population.cgm_sd,
            seed: self.seed,
        }
    }
}

/// One patient of one scenario. Estimation and outcome columns are empty
/// when the patient failed, and `error` holds the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub patient_id: usize,
    pub p4_true: Option<f64>,
    pub p6_true: Option<f64>,
    pub p7_true: Option<f64>,
    pub p4_est: Option<f64>,
    pub p6_est: Option<f64>,
    pub p7_est: Option<f64>,
    pub v_min: Option<f64>,
    pub converged: Option<bool>,
    pub u_basal_true: Option<f64>,
    pub u_basal_est: Option<f64>,
    pub dose_rel_error: Option<f64>,
    pub min_glucose: Option<f64>,
    pub time_in_range: Option<f64>,
    pub hypo: Option<bool>,
    pub glucose_drop: Option<f64>,
    pub low_excitation: Option<bool>,
    /// Closed-loop insulin over the first day, U/kg.
    pub first_day_insulin_per_kg: Option<f64>,
    pub error: String,
}

impl ResultRow {
    pub fn new(outcome: &PatientOutcome) -> Self {
        match outcome {
            PatientOutcome::Completed(run) => {
                let (t, e, m) = (&run.patient.truth, &run.estimation, &run.metrics);
                Self {
                    patient_id: run.patient.id,
                    p4_true: Some(t.p4),
                    p6_true: Some(t.p6),
                    p7_true: Some(t.p7),
                    p4_est: Some(e.theta_hat.p4),
                    p6_est: Some(e.theta_hat.p6),
                    p7_est: Some(e.theta_hat.p7),
                    v_min: Some(e.v_min),
                    converged: Some(e.converged),
                    u_basal_true: Some(m.dose_true),
                    u_basal_est: Some(m.dose_est),
                    dose_rel_error: Some(m.dose_rel_error),
                    min_glucose: Some(m.min_glucose),
                    time_in_range: Some(m.time_in_range),
                    hypo: Some(m.hypo),
                    glucose_drop: Some(m.glucose_drop),
                    low_excitation: Some(m.low_excitation),
                    first_day_insulin_per_kg: Some(run.first_day_insulin / run.patient.body_weight),
                    error: String::new(),
                }
            }
            PatientOutcome::Failed { id, message } => Self {
                patient_id: *id,
                p4_true: None,
                p6_true: None,
                p7_true: None,
                p4_est: None,
                p6_est: None,
                p7_est: None,
                v_min: None,
                converged: None,
                u_basal_true: None,
                u_basal_est: None,
                dose_rel_error: None,
                min_glucose: None,
                time_in_range: None,
                hypo: None,
                glucose_drop: None,
                low_excitation: None,
                first_day_insulin_per_kg: None,
                error: message.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub patients: usize,
    pub failures: usize,
    pub hypo_count: usize,
    pub overestimated_count: usize,
    pub overestimated_fraction: f64,
    pub mean_time_in_range: f64,
    pub low_excitation_count: usize,
    pub converged_count: usize,
    pub dose_error_mean: f64,
    pub dose_error_mean_abs: f64,
    pub dose_error_median_abs: f64,
    pub dose_error_max_abs: f64,
    /// Patients whose first-day closed-loop insulin exceeded the limit.
    pub first_day_over_limit: usize,
}

impl SummaryRow {
    pub fn new(result: &ScenarioResult, first_day_limit: f64) -> Self {
        let s: &ScenarioSummary = &result.summary;
        Self {
            scenario: s.scenario.clone(),
            patients: s.patients,
            failures: s.failures,
            hypo_count: s.hypo_count,
            overestimated_count: s.overestimated_count,
            overestimated_fraction: s.overestimated_fraction(),
            mean_time_in_range: s.mean_time_in_range,
            low_excitation_count: s.low_excitation_count,
            converged_count: s.converged_count,
            dose_error_mean: s.dose_error.mean,
            dose_error_mean_abs: s.dose_error.mean_abs,
            dose_error_median_abs: s.dose_error.median_abs,
            dose_error_max_abs: s.dose_error.max_abs,
            first_day_over_limit: result
                .runs()
                .filter(|r| r.first_day_insulin > first_day_limit * r.patient.body_weight)
                .count(),
        }
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err)
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortRow>, CliError> {
    read_rows(path)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    read_rows(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    read_rows(path)
}
