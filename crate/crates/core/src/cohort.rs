//! Virtual patient sampling and physiological screening.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, PredictionParams, DEFAULT_Y_REF};

pub const DEFAULT_CV: f64 = 0.4;
pub const DEFAULT_SIGMA: f64 = 0.05;
pub const DEFAULT_CGM_SD: f64 = 0.4;
pub const DEFAULT_FASTING_MIN: f64 = 7.5;
pub const DEFAULT_FASTING_MAX: f64 = 20.0;
pub const DEFAULT_DOSE_CAP: f64 = 150.0;
pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightDistribution {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for WeightDistribution {
    fn default() -> Self {
        Self {
            mean: 90.0,
            sd: 15.0,
            min: 50.0,
            max: 150.0,
        }
    }
}

/// Acceptance rules applied to every sampled candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningRules {
    /// Allowed fasting glucose window, mmol/L.
    pub fasting_min: f64,
    pub fasting_max: f64,
    /// Upper bound on the daily dose needed to reach `y_ref`, U/day.
    pub dose_cap: f64,
    pub y_ref: f64,
}

impl Default for ScreeningRules {
    fn default() -> Self {
        Self {
            fasting_min: DEFAULT_FASTING_MIN,
            fasting_max: DEFAULT_FASTING_MAX,
            dose_cap: DEFAULT_DOSE_CAP,
            y_ref: DEFAULT_Y_REF,
        }
    }
}

/// Surrogate population: log-normal `p4, p6, p7` with medians at the
/// population values, truncated normal body weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    /// Median parameters; `p1, p3, p5` are copied unchanged.
    pub median: PredictionParams,
    /// Coefficients of variation of `p4, p6, p7`.
    pub cv_p4: f64,
    pub cv_p6: f64,
    pub cv_p7: f64,
    pub weight: WeightDistribution,
    /// Process-noise sd on glucose, mmol/L per sqrt(min).
    pub sigma: f64,
    /// CGM measurement-noise sd, mmol/L.
    pub cgm_sd: f64,
    /// Master seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub screening: ScreeningRules,
    /// Per-slot cap on rejection-sampling attempts.
    pub max_attempts: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            median: PredictionParams::POPULATION,
            cv_p4: DEFAULT_CV,
            cv_p6: DEFAULT_CV,
            cv_p7: DEFAULT_CV,
            weight: WeightDistribution::default(),
            sigma: DEFAULT_SIGMA,
            cgm_sd: DEFAULT_CGM_SD,
            seed: 0,
            screening: ScreeningRules::default(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl PopulationConfig {
    /// Every parameter at its median and no noise.
    pub fn degenerate(seed: u64) -> Self {
        Self {
            cv_p4: 0.0,
            cv_p6: 0.0,
            cv_p7: 0.0,
            weight: WeightDistribution {
                sd: 0.0,
                ..WeightDistribution::default()
            },
            sigma: 0.0,
            cgm_sd: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.median.validate()?;
        let nonneg = [
            ("cv_p4", self.cv_p4),
            ("cv_p6", self.cv_p6),
            ("cv_p7", self.cv_p7),
            ("weight.sd", self.weight.sd),
            ("sigma", self.sigma),
            ("cgm_sd", self.cgm_sd),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        let w = &self.weight;
        if !(w.min > 0.0 && w.min < w.max && w.max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight bounds must satisfy 0 < min < max, got [{}, {}]",
                w.min, w.max
            )));
        }
        if !(w.mean.is_finite()) {
            return Err(Error::InvalidConfig("weight.mean must be finite".into()));
        }
        let s = &self.screening;
        if !(s.fasting_min < s.fasting_max && s.dose_cap > 0.0 && s.y_ref > 0.0) {
            return Err(Error::InvalidConfig(
                "screening requires fasting_min < fasting_max, dose_cap > 0, y_ref > 0".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub id: usize,
    pub truth: PredictionParams,
    /// Body weight, kg.
    pub body_weight: f64,
    /// Process-noise sd, mmol/L per sqrt(min).
    pub sigma: f64,
    /// CGM measurement-noise variance, (mmol/L)^2.
    pub r_cgm: f64,
    pub seed: u64,
}

impl VirtualPatient {
    /// Noise-free patient with population parameters.
    pub fn population(id: usize, body_weight: f64, seed: u64) -> Self {
        Self {
            id,
            truth: PredictionParams::POPULATION,
            body_weight,
            sigma: 0.0,
            r_cgm: 0.0,
            seed,
        }
    }

    /// Daily dose needed to reach `y_ref` under the true parameters.
    pub fn true_dose(&self, y_ref: f64) -> model::DoseResult {
        model::target_dose(&self.truth, y_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RejectReason {
    FastingOutOfRange { glucose: f64 },
    DoseCap { dose: f64 },
    Invalid,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::FastingOutOfRange { glucose } => {
                write!(f, "fasting out of range ({glucose:.3} mmol/L)")
            }
            RejectReason::DoseCap { dose } => write!(f, "dose cap ({dose:.2} U/day)"),
            RejectReason::Invalid => write!(f, "invalid parameters"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Screening {
    Accept,
    Reject(RejectReason),
}

impl Screening {
    pub fn is_accept(&self) -> bool {
        matches!(self, Screening::Accept)
    }
}

pub fn screen(patient: &VirtualPatient, rules: &ScreeningRules) -> Screening {
    if patient.truth.validate().is_err() || !patient.body_weight.is_finite() {
        return Screening::Reject(RejectReason::Invalid);
    }
    let glucose = match model::fasting_glucose(&patient.truth) {
        Ok(g) => g,
        Err(_) => return Screening::Reject(RejectReason::Invalid),
    };
    if !(rules.fasting_min..=rules.fasting_max).contains(&glucose) {
        return Screening::Reject(RejectReason::FastingOutOfRange { glucose });
    }
    let dose = patient.true_dose(rules.y_ref).u_basal;
    if dose > rules.dose_cap {
        return Screening::Reject(RejectReason::DoseCap { dose });
    }
    Screening::Accept
}

fn log_normal(median: f64, cv: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let s = (1.0 + cv * cv).ln().sqrt();
    median * (s * z).exp()
}

fn truncated_normal(w: &WeightDistribution, rng: &mut impl Rng) -> f64 {
    if w.sd == 0.0 {
        return w.mean.clamp(w.min, w.max);
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = w.mean + w.sd * z;
        if (w.min..=w.max).contains(&v) {
            return v;
        }
    }
}

/// Draws one unscreened candidate.
pub fn sample_patient(
    config: &PopulationConfig,
    id: usize,
    seed: u64,
    rng: &mut impl Rng,
) -> VirtualPatient {
    let m = &config.median;
    let truth = PredictionParams {
        p4: log_normal(m.p4, config.cv_p4, rng),
        p6: log_normal(m.p6, config.cv_p6, rng),
        p7: log_normal(m.p7, config.cv_p7, rng),
        ..*m
    };
    VirtualPatient {
        id,
        truth,
        body_weight: truncated_normal(&config.weight, rng),
        sigma: config.sigma,
        r_cgm: config.cgm_sd * config.cgm_sd,
        seed,
    }
}

/// Independent stream for slot `id` of a cohort drawn with `master`.
pub fn slot_rng(master: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(id as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<VirtualPatient>,
    pub attempts: usize,
}

impl Cohort {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            return 0.0;
        }
        self.patients.len() as f64 / self.attempts as f64
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Rejection-samples `n` screened patients. Each slot has its own stream,
/// so slot `i` does not depend on how many attempts earlier slots needed.
pub fn generate_cohort(n: usize, config: &PopulationConfig) -> Result<Cohort> {
    if n == 0 {
        return Err(Error::InvalidConfig("cohort size must be >= 1".into()));
    }
    config.validate()?;
    let mut patients = Vec::with_capacity(n);
    let mut attempts = 0;
    for id in 0..n {
        let mut rng = slot_rng(config.seed, id);
        let seed = rng.next_u64();
        let mut slot_attempts = 0;
        loop {
            if slot_attempts == config.max_attempts {
                return Err(Error::CohortStalled {
                    slot: id,
                    attempts: slot_attempts,
                    rate: patients.len() as f64 / attempts as f64,
                });
            }
            slot_attempts += 1;
            attempts += 1;
            let candidate = sample_patient(config, id, seed, &mut rng);
            if screen(&candidate, &config.screening).is_accept() {
                patients.push(candidate);
                break;
            }
        }
    }
    Ok(Cohort { patients, attempts })
}
