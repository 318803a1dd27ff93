//! Ground-truth data generation: Euler-Maruyama integration of the
//! stochastic model, CGM sampling, the integrating pump controller and the
//! daily long-acting injection phase.

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::VirtualPatient;
use crate::error::{Error, Result};
use crate::model::{self, ModelState, PredictionParams, DEFAULT_Y_REF, MINUTES_PER_DAY};

/// Lower bound on simulated glucose, mmol/L.
pub const GLUCOSE_FLOOR: f64 = 0.1;

/// Integrator gain, (U/min) per (mmol/L) per CGM sample.
///
/// Keeps first-day insulin below 0.2 U/kg for any screened patient down to
/// 50 kg: with the error capped at `20 - 5.8` the cumulative infusion after
/// 288 samples is at most `5 * 14.2 * gain * 288 * 289 / 2` U.
pub const DEFAULT_GAIN: f64 = 3.0e-6;
pub const DEFAULT_U_MAX: f64 = 0.1;
pub const DEFAULT_DT: f64 = 1.0;
pub const DEFAULT_SAMPLE_EVERY: usize = 5;
pub const DEFAULT_P1_LONG: f64 = 600.0;
/// 7:00 AM, minutes after midnight.
pub const DEFAULT_INJECTION_CLOCK: f64 = 420.0;

// Stream ids within a patient's seed.
const STREAM_PROCESS_CLOSED_LOOP: u64 = 0;
const STREAM_CGM_CLOSED_LOOP: u64 = 1;
const STREAM_PROCESS_INJECTION: u64 = 2;
const STREAM_CGM_INJECTION: u64 = 3;

pub fn patient_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimGrid {
    /// Integration step, min.
    pub dt: f64,
    /// CGM period in integration steps.
    pub sample_every: usize,
    /// Length of the simulated phase, min. Set per phase, never configured.
    #[serde(skip)]
    pub horizon: f64,
}

impl Default for SimGrid {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            sample_every: DEFAULT_SAMPLE_EVERY,
            horizon: 2.0 * MINUTES_PER_DAY,
        }
    }
}

impl SimGrid {
    pub fn with_horizon(self, horizon: f64) -> Self {
        Self { horizon, ..self }
    }

    pub fn sample_interval(&self) -> f64 {
        self.dt * self.sample_every as f64
    }

    pub fn samples(&self) -> usize {
        (self.horizon / self.sample_interval()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidConfig("sample_every must be >= 1".into()));
        }
        let ratio = self.horizon / self.sample_interval();
        if !(self.horizon > 0.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} is not a positive multiple of the sample interval {}",
                self.horizon,
                self.sample_interval()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub gain: f64,
    pub y_ref: f64,
    /// Pump rate cap, U/min.
    pub u_max: f64,
    pub gain_multiplier: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gain: DEFAULT_GAIN,
            y_ref: DEFAULT_Y_REF,
            u_max: DEFAULT_U_MAX,
            gain_multiplier: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0
            && self.y_ref > 0.0
            && self.u_max > 0.0
            && self.gain_multiplier >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "controller requires gain >= 0, y_ref > 0, u_max > 0, multiplier >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Long-acting injection channel and clock alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    /// Absorption time constant of the long-acting chain, min.
    pub p1_long: f64,
    /// Clock time of each daily injection, minutes after midnight.
    pub clock: f64,
    /// Clock time at which the closed-loop phase starts.
    pub start_clock: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            p1_long: DEFAULT_P1_LONG,
            clock: DEFAULT_INJECTION_CLOCK,
            start_clock: DEFAULT_INJECTION_CLOCK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ClosedLoop,
    Injection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub time_min: f64,
    pub phase: Phase,
    /// CGM reading, mmol/L.
    pub y_cgm: f64,
    /// Pump rate held until the next sample, U/min.
    pub u: f64,
    /// Latent state at the sample time.
    pub x: ModelState,
    /// Long-acting chain `(s1, s2)` during the injection phase.
    pub long: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlucoseTrace {
    pub samples: Vec<TraceSample>,
}

impl GlucoseTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &TraceSample> {
        self.samples.iter().filter(move |s| s.phase == phase)
    }

    /// Spacing between samples; `None` for fewer than two samples.
    pub fn sample_interval(&self) -> Option<f64> {
        match self.samples.as_slice() {
            [a, b, ..] => Some(b.time_min - a.time_min),
            _ => None,
        }
    }

    pub fn extend(&mut self, other: GlucoseTrace) {
        self.samples.extend(other.samples);
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(TraceRow::from(s))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R) -> csv::Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let samples = r
            .deserialize::<TraceRow>()
            .map(|row| row.map(TraceSample::from))
            .collect::<csv::Result<Vec<_>>>()?;
        Ok(Self { samples })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    time_min: f64,
    phase: Phase,
    y_cgm: f64,
    u: f64,
    x1: f64,
    x2: f64,
    x3: f64,
    x4: f64,
    x1_long: Option<f64>,
    x2_long: Option<f64>,
}

impl From<&TraceSample> for TraceRow {
    fn from(s: &TraceSample) -> Self {
        Self {
            time_min: s.time_min,
            phase: s.phase,
            y_cgm: s.y_cgm,
            u: s.u,
            x1: s.x.x1,
            x2: s.x.x2,
            x3: s.x.x3,
            x4: s.x.x4,
            x1_long: s.long.map(|l| l[0]),
            x2_long: s.long.map(|l| l[1]),
        }
    }
}

impl From<TraceRow> for TraceSample {
    fn from(r: TraceRow) -> Self {
        Self {
            time_min: r.time_min,
            phase: r.phase,
            y_cgm: r.y_cgm,
            u: r.u,
            x: ModelState::new(r.x1, r.x2, r.x3, r.x4),
            long: match (r.x1_long, r.x2_long) {
                (Some(a), Some(b)) => Some([a, b]),
                _ => None,
            },
        }
    }
}

fn wiener_step(
    state: &ModelState,
    drift: &ModelState,
    dt: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> ModelState {
    let z: f64 = StandardNormal.sample(rng);
    let mut next = state.advanced(drift, dt);
    next.x4 += sigma * dt.sqrt() * z;
    next.x4 = next.x4.max(GLUCOSE_FLOOR);
    next
}

/// One Euler-Maruyama step with noise on glucose only. Always consumes one
/// normal draw, so runs with equal seeds share noise paths.
pub fn em_step(
    state: &ModelState,
    u: f64,
    dt: f64,
    params: &PredictionParams,
    sigma: f64,
    rng: &mut impl Rng,
) -> ModelState {
    let drift = model::rhs(state, u, params);
    wiener_step(state, &drift, dt, sigma, rng)
}

pub fn cgm_sample(state: &ModelState, r_cgm: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    state.x4 + r_cgm.sqrt() * z
}

/// Integrator with output clamping.
pub fn controller_step(cfg: &ControllerConfig, y: f64, u_prev: f64) -> f64 {
    let u = u_prev + cfg.gain * cfg.gain_multiplier * (y - cfg.y_ref);
    u.clamp(0.0, cfg.u_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trace: GlucoseTrace,
    /// Latent state at `end_time`.
    pub end_state: ModelState,
    pub end_time: f64,
}

impl ClosedLoopRun {
    /// Insulin delivered over `[0, minutes)`, U.
    pub fn infused_insulin(&self, minutes: f64) -> f64 {
        let interval = self.trace.sample_interval().unwrap_or(minutes);
        self.trace
            .samples
            .iter()
            .filter(|s| s.time_min < minutes)
            .map(|s| s.u * interval.min(minutes - s.time_min))
            .sum()
    }
}

/// Closed-loop pump treatment from the patient's fasting steady state.
pub fn run_closed_loop(
    patient: &VirtualPatient,
    cfg: &ControllerConfig,
    grid: &SimGrid,
) -> Result<ClosedLoopRun> {
    grid.validate()?;
    cfg.validate()?;
    let params = &patient.truth;
    let mut x = model::fasting_state(params)?;
    let mut process = patient_rng(patient.seed, STREAM_PROCESS_CLOSED_LOOP);
    let mut cgm = patient_rng(patient.seed, STREAM_CGM_CLOSED_LOOP);
    let interval = grid.sample_interval();
    let mut samples = Vec::with_capacity(grid.samples());
    let mut u = 0.0;
    for k in 0..grid.samples() {
        let t = k as f64 * interval;
        let y = cgm_sample(&x, patient.r_cgm, &mut cgm);
        u = controller_step(cfg, y, u);
        samples.push(TraceSample {
            time_min: t,
            phase: Phase::ClosedLoop,
            y_cgm: y,
            u,
            x,
            long: None,
        });
        for i in 0..grid.sample_every {
            x = em_step(&x, u, grid.dt, params, patient.sigma, &mut process);
            if !x.x4.is_finite() {
                return Err(Error::Diverged {
                    time: t + (i + 1) as f64 * grid.dt,
                });
            }
        }
    }
    Ok(ClosedLoopRun {
        trace: GlucoseTrace { samples },
        end_state: x,
        end_time: grid.samples() as f64 * interval,
    })
}

fn is_injection_time(clock_minute: f64, injection_clock: f64, dt: f64) -> bool {
    let m = (clock_minute - injection_clock).rem_euclid(MINUTES_PER_DAY);
    m < 0.5 * dt || MINUTES_PER_DAY - m < 0.5 * dt
}

/// Daily long-acting injections of `u_basal` U, continuing from `start`
/// at `start_time` minutes after the closed-loop start. The pump is off.
///
/// Each dose enters a two-compartment chain with time constant `p1_long`
/// (as a bolus into the first compartment); the second compartment feeds
/// the insulin effect alongside `x2`.
pub fn run_injection_phase(
    patient: &VirtualPatient,
    start: &ModelState,
    start_time: f64,
    u_basal: f64,
    days: usize,
    grid: &SimGrid,
    injection: &InjectionConfig,
) -> Result<GlucoseTrace> {
    if !(u_basal >= 0.0 && u_basal.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "u_basal must be >= 0, got {u_basal}"
        )));
    }
    if days == 0 {
        return Err(Error::InvalidConfig(
            "injection phase needs at least one day".into(),
        ));
    }
    if !(injection.p1_long > 0.0) {
        return Err(Error::InvalidConfig("p1_long must be > 0".into()));
    }
    let grid = grid.with_horizon(days as f64 * MINUTES_PER_DAY);
    grid.validate()?;
    let params = &patient.truth;
    let mut process = patient_rng(patient.seed, STREAM_PROCESS_INJECTION);
    let mut cgm = patient_rng(patient.seed, STREAM_CGM_INJECTION);
    let mut x = *start;
    let mut long = [0.0_f64; 2];
    let steps = grid.samples() * grid.sample_every;
    let mut samples = Vec::with_capacity(grid.samples());
    for i in 0..steps {
        let t = start_time + i as f64 * grid.dt;
        if i % grid.sample_every == 0 {
            samples.push(TraceSample {
                time_min: t,
                phase: Phase::Injection,
                y_cgm: cgm_sample(&x, patient.r_cgm, &mut cgm),
                u: 0.0,
                x,
                long: Some(long),
            });
        }
        if is_injection_time(injection.start_clock + t, injection.clock, grid.dt) {
            long[0] += u_basal / injection.p1_long;
        }
        let mut drift = model::rhs(&x, 0.0, params);
        drift.x3 += params.p3 * long[1];
        let d_long = [
            -long[0] / injection.p1_long,
            (long[0] - long[1]) / injection.p1_long,
        ];
        x = wiener_step(&x, &drift, grid.dt, patient.sigma, &mut process);
        long = [long[0] + d_long[0] * grid.dt, long[1] + d_long[1] * grid.dt];
        if !x.x4.is_finite() {
            return Err(Error::Diverged { time: t + grid.dt });
        }
    }
    Ok(GlucoseTrace { samples })
}

/// First sample time at which latent glucose lies in `[low, high]`.
pub fn time_to_band(trace: &GlucoseTrace, low: f64, high: f64) -> Option<f64> {
    trace
        .samples
        .iter()
        .find(|s| (low..=high).contains(&s.x.x4))
        .map(|s| s.time_min)
}
