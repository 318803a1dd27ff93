//! Four-state fasting glucose dose-response model.
//!
//! States are two insulin absorption compartments `x1`, `x2` (U/min), the
//! insulin effect `x3` (U/min) and blood glucose `x4` (mmol/L). Time is in
//! minutes. Parameters keep their conventional names `p1, p3..p7`; there is
//! no `p2`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// Population values of the prediction model.
pub const POPULATION_P1: f64 = 60.0;
pub const POPULATION_P3: f64 = 0.011;
pub const POPULATION_P4: f64 = 0.44;
pub const POPULATION_P5: f64 = 0.0023;
pub const POPULATION_P6: f64 = 0.0672;
pub const POPULATION_P7: f64 = 0.0018;

/// Glucose target the dose is computed for, mmol/L.
pub const DEFAULT_Y_REF: f64 = 5.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionParams {
    /// Absorption time constant, min.
    pub p1: f64,
    /// Insulin action rate constant, 1/min.
    pub p3: f64,
    /// Insulin sensitivity, 1/U.
    pub p4: f64,
    /// Insulin-independent glucose clearance, 1/min.
    pub p5: f64,
    /// Endogenous glucose production, mmol/(L min).
    pub p6: f64,
    /// Endogenous insulin production, U L/(mmol min).
    pub p7: f64,
}

impl Default for PredictionParams {
    fn default() -> Self {
        Self::POPULATION
    }
}

impl PredictionParams {
    pub const POPULATION: Self = Self {
        p1: POPULATION_P1,
        p3: POPULATION_P3,
        p4: POPULATION_P4,
        p5: POPULATION_P5,
        p6: POPULATION_P6,
        p7: POPULATION_P7,
    };

    pub fn from_parts(fixed: FixedParams, theta: Theta) -> Self {
        Self {
            p1: fixed.p1,
            p3: fixed.p3,
            p4: theta.p4,
            p5: fixed.p5,
            p6: theta.p6,
            p7: theta.p7,
        }
    }

    pub fn fixed(&self) -> FixedParams {
        FixedParams {
            p1: self.p1,
            p3: self.p3,
            p5: self.p5,
        }
    }

    pub fn theta(&self) -> Theta {
        Theta {
            p4: self.p4,
            p6: self.p6,
            p7: self.p7,
        }
    }

    /// All parameters finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("p1", self.p1),
            ("p3", self.p3),
            ("p4", self.p4),
            ("p5", self.p5),
            ("p6", self.p6),
            ("p7", self.p7),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters held at population values during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub p1: f64,
    pub p3: f64,
    pub p5: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        PredictionParams::POPULATION.fixed()
    }
}

/// The estimable subset `(p4, p6, p7)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub p4: f64,
    pub p6: f64,
    pub p7: f64,
}

impl Default for Theta {
    fn default() -> Self {
        PredictionParams::POPULATION.theta()
    }
}

impl Theta {
    pub fn to_log(self) -> [f64; 3] {
        [self.p4.ln(), self.p6.ln(), self.p7.ln()]
    }

    pub fn from_log(z: &[f64; 3]) -> Self {
        Self {
            p4: z[0].exp(),
            p6: z[1].exp(),
            p7: z[2].exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
}

impl ModelState {
    pub const fn new(x1: f64, x2: f64, x3: f64, x4: f64) -> Self {
        Self { x1, x2, x3, x4 }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x1, self.x2, self.x3, self.x4)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite() && self.x4.is_finite()
    }

    /// `self + rate * dt`, componentwise.
    pub fn advanced(&self, rate: &ModelState, dt: f64) -> Self {
        Self::new(
            self.x1 + rate.x1 * dt,
            self.x2 + rate.x2 * dt,
            self.x3 + rate.x3 * dt,
            self.x4 + rate.x4 * dt,
        )
    }
}

/// Drift of the model: time derivative of every state, per minute.
pub fn rhs(state: &ModelState, u: f64, params: &PredictionParams) -> ModelState {
    let p = params;
    ModelState {
        x1: (u - state.x1) / p.p1,
        x2: (state.x1 - state.x2) / p.p1,
        x3: p.p3 * (state.x2 + p.p7 * state.x4) - p.p3 * state.x3,
        x4: -(p.p5 + p.p4 * state.x3) * state.x4 + p.p6,
    }
}

/// Analytic Jacobian of [`rhs`] with respect to the state.
pub fn jacobian(state: &ModelState, _u: f64, params: &PredictionParams) -> Matrix4<f64> {
    let p = params;
    let inv_p1 = 1.0 / p.p1;
    #[rustfmt::skip]
    let a = Matrix4::new(
        -inv_p1, 0.0,    0.0,                 0.0,
        inv_p1,  -inv_p1, 0.0,                0.0,
        0.0,     p.p3,   -p.p3,               p.p3 * p.p7,
        0.0,     0.0,    -p.p4 * state.x4,    -(p.p5 + p.p4 * state.x3),
    );
    a
}

/// Equilibrium of the model under a constant infusion `u`.
///
/// `x1 = x2 = u`, `x3 = u + p7 g` and `g` is the positive root of
/// `p4 p7 g^2 + (p5 + p4 u) g - p6 = 0`.
pub fn steady_state(params: &PredictionParams, u: f64) -> Result<ModelState> {
    let a = params.p4 * params.p7;
    let b = params.p5 + params.p4 * u;
    let c = params.p6;
    let disc = b * b + 4.0 * a * c;
    if !(disc >= 0.0) {
        return Err(Error::NoSteadyState(disc));
    }
    // Rationalized root: stable when a is small and exact when a = 0.
    let denom = b + disc.sqrt();
    let g = if c == 0.0 { 0.0 } else { 2.0 * c / denom };
    if !g.is_finite() {
        return Err(Error::NoSteadyState(disc));
    }
    Ok(ModelState::new(u, u, u + params.p7 * g, g))
}

/// Glucose at the no-insulin equilibrium, mmol/L.
pub fn fasting_glucose(params: &PredictionParams) -> Result<f64> {
    steady_state(params, 0.0).map(|s| s.x4)
}

/// The equilibrium without exogenous insulin.
pub fn fasting_state(params: &PredictionParams) -> Result<ModelState> {
    steady_state(params, 0.0)
}

/// Constant infusion rate (U/min) whose equilibrium glucose is `y_ref`.
/// Not clamped; negative when fasting glucose is already below `y_ref`.
pub fn dose_required(params: &PredictionParams, y_ref: f64) -> f64 {
    (params.p6 - y_ref * params.p5) / (y_ref * params.p4) - params.p7 * y_ref
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseResult {
    /// Infusion rate, U/min (raw, possibly negative).
    pub u_target: f64,
    /// Daily dose, U/day.
    pub u_basal: f64,
    pub clamped: bool,
}

pub fn daily_dose(u_target: f64) -> DoseResult {
    let clamped = u_target < 0.0;
    DoseResult {
        u_target,
        u_basal: u_target.max(0.0) * 60.0 * 24.0,
        clamped,
    }
}

/// [`daily_dose`] of [`dose_required`].
pub fn target_dose(params: &PredictionParams, y_ref: f64) -> DoseResult {
    daily_dose(dose_required(params, y_ref))
}
