//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use titration::cohort::{self, PopulationConfig, VirtualPatient};
use titration::estimate::{
    self, filter, EstimationConfig, EstimationSettings, FilterNoise, FilterState, LinearDynamics,
    Observations,
};
use titration::model::{self, ModelState, PredictionParams, Theta};
use titration::scenario::{self, Protocol, ScenarioResult, ScenarioSpec, Trend};
use titration::simulate::{self, SimGrid};

const COHORT_SEED: u64 = 2024;
const COHORT_SIZE: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

// 1 ------------------------------------------------------------------------

fn fd_jacobian(x: &ModelState, u: f64, p: &PredictionParams) -> Matrix4<f64> {
    let h = 1e-6;
    let v = x.to_vector();
    let mut j = Matrix4::zeros();
    for c in 0..4 {
        let (mut plus, mut minus) = (v, v);
        plus[c] += h;
        minus[c] -= h;
        let fp = model::rhs(&ModelState::from_vector(&plus), u, p).to_vector();
        let fm = model::rhs(&ModelState::from_vector(&minus), u, p).to_vector();
        j.set_column(c, &((fp - fm) / (2.0 * h)));
    }
    j
}

fn jacobian_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let p = PredictionParams {
            p1: rng.random_range(20.0..200.0),
            p3: rng.random_range(0.002..0.05),
            p4: rng.random_range(0.05..2.0),
            p5: rng.random_range(0.0005..0.01),
            p6: rng.random_range(0.01..0.3),
            p7: rng.random_range(0.0002..0.01),
        };
        let x = ModelState::new(
            rng.random_range(0.0..0.2),
            rng.random_range(0.0..0.2),
            rng.random_range(0.0..0.3),
            rng.random_range(1.0..25.0),
        );
        let u = rng.random_range(0.0..0.1);
        let a = model::jacobian(&x, u, &p);
        // Entrywise error relative to the largest Jacobian entry.
        let rel = (a - fd_jacobian(&x, u, &p)).abs().max() / a.abs().max();
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-5 && within(elapsed, Duration::from_secs(1)),
        format!("max relative error {worst:.2e} over 1000 draws in {elapsed:.2?}"),
    )
}

// 2 ------------------------------------------------------------------------

fn dose_fixed_point() -> Verdict {
    let start = Instant::now();
    let config = PopulationConfig {
        seed: 7,
        ..PopulationConfig::default()
    };
    let cohort = cohort::generate_cohort(50, &config).expect("cohort");
    let mut worst = 0.0_f64;
    for patient in &cohort.patients {
        let p = &patient.truth;
        let u = model::dose_required(p, 5.8);
        let mut x = model::fasting_state(p).expect("fasting state");
        let mut rng = simulate::patient_rng(patient.seed, 0);
        for _ in 0..7 * 1440 {
            x = simulate::em_step(&x, u, 1.0, p, 0.0, &mut rng);
        }
        worst = worst.max((x.x4 - 5.8).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 0.01 && within(elapsed, Duration::from_secs(10)),
        format!("max |x4 - 5.8| after 7 days {worst:.2e} over 50 patients in {elapsed:.2?}"),
    )
}

// 3 ------------------------------------------------------------------------

fn hand_computed_likelihood() -> Verdict {
    let single = |y: f64| Observations {
        interval: 5.0,
        y: vec![y],
        u: vec![0.0],
    };
    let zero = estimate::likelihood_from_state(
        &PredictionParams::POPULATION,
        &single(7.0),
        &FilterNoise { sigma: 0.0, r: 0.5 },
        FilterState {
            x: Vector4::new(0.0, 0.0, 0.0, 7.0),
            p: Matrix4::from_diagonal(&Vector4::new(0.0, 0.0, 0.0, 0.5)),
        },
    );
    let unit = estimate::likelihood_from_state(
        &PredictionParams::POPULATION,
        &single(6.0),
        &FilterNoise { sigma: 0.0, r: 1.0 },
        FilterState {
            x: Vector4::new(0.0, 0.0, 0.0, 5.0),
            p: Matrix4::identity(),
        },
    );
    // e = 0, R_e = 1 and e = 1, R_e = 2 respectively.
    let expect_zero = 0.5 * (2.0 * PI).ln();
    let expect_unit = 0.5 * (2.0 * PI).ln() + 0.5 * (2.0_f64.ln() + 0.5);
    verdict(
        (zero - expect_zero).abs() < 1e-4 && (unit - expect_unit).abs() < 1e-4,
        format!(
            "V = {zero:.6} (expected {expect_zero:.6}), V = {unit:.6} (expected {expect_unit:.6})"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

/// Exact zero-order-hold discretization of `dx = (A x + b u) dt + sigma dW4`
/// over `t`: `(Ad, bd, Qd)` by block matrix exponentials.
fn discretize(
    a: &Matrix4<f64>,
    b: &Vector4<f64>,
    sigma: f64,
    t: f64,
) -> (Matrix4<f64>, Vector4<f64>, Matrix4<f64>) {
    let mut aug = DMatrix::zeros(5, 5);
    aug.view_mut((0, 0), (4, 4)).copy_from(a);
    aug.view_mut((0, 4), (4, 1)).copy_from(b);
    let e = expm(&(aug * t));
    let ad: Matrix4<f64> = e
        .view((0, 0), (4, 4))
        .into_owned()
        .fixed_view::<4, 4>(0, 0)
        .into();
    let bd: Vector4<f64> = e
        .view((0, 4), (4, 1))
        .into_owned()
        .fixed_view::<4, 1>(0, 0)
        .into();

    // Van Loan: exp([[-A, Q], [0, A']] t) = [[., F12], [0, F22]], Qd = F22' F12.
    let mut q = Matrix4::zeros();
    q[(3, 3)] = sigma * sigma;
    let mut vl = DMatrix::zeros(8, 8);
    vl.view_mut((0, 0), (4, 4)).copy_from(&(-a));
    vl.view_mut((0, 4), (4, 4)).copy_from(&q);
    vl.view_mut((4, 4), (4, 4)).copy_from(&a.transpose());
    let f = expm(&(vl * t));
    let f12: Matrix4<f64> = f
        .view((0, 4), (4, 4))
        .into_owned()
        .fixed_view::<4, 4>(0, 0)
        .into();
    let f22: Matrix4<f64> = f
        .view((4, 4), (4, 4))
        .into_owned()
        .fixed_view::<4, 4>(0, 0)
        .into();
    (ad, bd, f22.transpose() * f12)
}

fn cdekf_matches_discrete_kf() -> Verdict {
    let p = PredictionParams::POPULATION;
    let u_eq = model::dose_required(&p, 5.8);
    let x_eq = ModelState::new(u_eq, u_eq, u_eq + p.p7 * 5.8, 5.8);
    let a = model::jacobian(&x_eq, u_eq, &p);
    let b = Vector4::new(1.0 / p.p1, 0.0, 0.0, 0.0);
    let dynamics = LinearDynamics { a, b };
    let noise = FilterNoise {
        sigma: 0.05,
        r: 0.16,
    };
    let n = 100;
    let obs = Observations {
        interval: 5.0,
        y: (0..n)
            .map(|k| 7.0 + (k as f64 / 11.0).sin() + 0.3 * (1.7 * k as f64).cos())
            .collect(),
        u: (0..n)
            .map(|k| 0.01 + 0.005 * (k as f64 / 7.0).sin())
            .collect(),
    };
    let init = FilterState {
        x: Vector4::new(0.01, 0.01, 0.02, 7.0),
        p: Matrix4::from_diagonal(&Vector4::new(1e-4, 1e-4, 1e-4, 1.0)),
    };

    let mut filtered = Vec::with_capacity(n);
    filter::filter_pass(&dynamics, &obs, init, &noise, |_, _, post| {
        filtered.push(*post)
    })
    .expect("filter pass");

    let (ad, bd, qd) = discretize(&a, &b, noise.sigma, obs.interval);
    let c = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let (mut x, mut pm) = (init.x, init.p);
    let (mut dx, mut dp) = (0.0_f64, 0.0_f64);
    for (k, post) in filtered.iter().enumerate() {
        let re = (c.transpose() * pm * c)[(0, 0)] + noise.r;
        let gain = pm * c / re;
        x += gain * (obs.y[k] - x[3]);
        pm = (Matrix4::identity() - gain * c.transpose()) * pm;
        dx = dx.max((post.x - x).abs().max());
        dp = dp.max((post.p - pm).abs().max());
        x = ad * x + bd * obs.u[k];
        pm = ad * pm * ad.transpose() + qd;
    }
    verdict(
        filtered.len() == n && dx < 1e-6 && dp < 1e-6,
        format!("max state difference {dx:.2e}, max covariance difference {dp:.2e} over {n} steps"),
    )
}

// 5 ------------------------------------------------------------------------

fn parameter_recovery() -> Verdict {
    let start = Instant::now();
    let patient = VirtualPatient::population(0, 80.0, 1);
    let grid = SimGrid::default().with_horizon(48.0 * 60.0);
    let run = simulate::run_closed_loop(&patient, &Default::default(), &grid).expect("closed loop");
    let cfg = EstimationConfig::matched(0.0, 1e-6, &EstimationSettings::default());
    let est = estimate::estimate_parameters(&run.trace, &cfg).expect("estimation");
    let elapsed = start.elapsed();
    let truth = Theta::default();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let errs = [
        rel(est.theta_hat.p4, truth.p4),
        rel(est.theta_hat.p6, truth.p6),
        rel(est.theta_hat.p7, truth.p7),
    ];
    let dose_err = rel(est.dose.u_basal, 15.36);
    verdict(
        errs.iter().all(|e| *e < 0.05) && dose_err < 0.05 && within(elapsed, Duration::from_secs(60)),
        format!(
            "relative errors p4 {:.2e}, p6 {:.2e}, p7 {:.2e}; dose {:.3} U/day ({dose_err:.2e}); {elapsed:.2?}",
            errs[0], errs[1], errs[2], est.dose.u_basal
        ),
    )
}

// 6, 7, 9 share one cohort run -------------------------------------------

struct CohortRuns {
    results: BTreeMap<&'static str, ScenarioResult>,
    elapsed: Duration,
    acceptance_rate: f64,
}

fn cohort_runs() -> CohortRuns {
    let start = Instant::now();
    let config = PopulationConfig {
        seed: COHORT_SEED,
        ..PopulationConfig::default()
    };
    let cohort = cohort::generate_cohort(COHORT_SIZE, &config).expect("cohort");
    let protocol = Protocol::default();
    let mut results = BTreeMap::new();
    for (key, spec) in [
        ("long", ScenarioSpec::long()),
        ("boosted", ScenarioSpec::boosted()),
        ("short", ScenarioSpec::short()),
    ] {
        let result = scenario::run_scenario(&spec, &cohort.patients, &protocol).expect("scenario");
        results.insert(key, result);
    }
    CohortRuns {
        results,
        elapsed: start.elapsed(),
        acceptance_rate: cohort.acceptance_rate(),
    }
}

fn excitation_trend(runs: &CohortRuns) -> Verdict {
    let [long, boosted, short] = ["long", "boosted", "short"].map(|k| &runs.results[k].summary);
    let report = scenario::compare_scenarios(long, boosted, short);
    let failures = long.failures + boosted.failures + short.failures;
    let ordered = report.hypo_trend != Trend::Violated;
    let over = short.overestimated_fraction() > long.overestimated_fraction();
    verdict(
        ordered && over && failures == 0 && within(runs.elapsed, Duration::from_secs(30 * 60)),
        format!(
            "hypo {}/{}/{} (48h/24h-x3/24h), overestimated fraction {:.2} (24h) vs {:.2} (48h), {failures} failed, cohort acceptance {:.2}, {:.1?}",
            long.hypo_count,
            boosted.hypo_count,
            short.hypo_count,
            short.overestimated_fraction(),
            long.overestimated_fraction(),
            runs.acceptance_rate,
            runs.elapsed
        ),
    )
}

fn gain_calibration(runs: &CohortRuns) -> Verdict {
    // Nominal-gain scenarios only; the boosted one triples the gain.
    let mut worst = 0.0_f64;
    let mut count = 0;
    for key in ["long", "short"] {
        for run in runs.results[key].runs() {
            worst = worst.max(run.first_day_insulin / run.patient.body_weight);
            count += 1;
        }
    }
    verdict(
        count == 2 * COHORT_SIZE && worst < 0.2,
        format!("max first-day insulin {worst:.4} U/kg over {count} patient runs (limit 0.2)"),
    )
}

fn filter_health(runs: &CohortRuns) -> Verdict {
    let mut min_eig = f64::INFINITY;
    let mut pass = true;
    let mut parts = Vec::new();
    for (key, result) in &runs.results {
        let all: Vec<_> = result.runs().collect();
        let white = all.iter().filter(|r| r.truth_health.white()).count();
        min_eig = all.iter().map(|r| r.min_eigenvalue).fold(min_eig, f64::min);
        let frac = white as f64 / all.len().max(1) as f64;
        pass &= frac >= 0.9;
        parts.push(format!("{key} {white}/{}", all.len()));
    }
    verdict(
        pass && min_eig >= -1e-8,
        format!(
            "min eigenvalue {min_eig:.2e}; white innovations {}",
            parts.join(", ")
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).expect("prefix").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("read"));
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "schema_version = 1\ncohort_size = 4\n").expect("write config");
    let commands: [&[&str]; 3] = [&["cohort"], &["run", "24h"], &["compare"]];
    let mut identical = true;
    let mut files = 0;
    for args in commands {
        let outs: Vec<PathBuf> = (0..2)
            .map(|i| dir.path().join(format!("{}-{i}", args[0])))
            .collect();
        for out in &outs {
            let status = Command::new(env!("CARGO_BIN_EXE_titrate"))
                .args([
                    "--config",
                    config.to_str().unwrap(),
                    "--seed",
                    "11",
                    "--out",
                    out.to_str().unwrap(),
                ])
                .args(args)
                .output()
                .expect("spawn");
            identical &= status.status.success();
        }
        let (a, b) = (csv_files(&outs[0]), csv_files(&outs[1]));
        identical &= !a.is_empty() && a == b;
        files += a.len();
    }
    verdict(
        identical,
        format!("cohort, run and compare re-run: {files} CSV files compared byte for byte"),
    )
}

// --------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "jacobian correctness", guarded(jacobian_correctness)),
        (2, "dose fixed point", guarded(dose_fixed_point)),
        (
            3,
            "hand-computed likelihood",
            guarded(hand_computed_likelihood),
        ),
        (
            4,
            "CDEKF vs exact discrete Kalman filter",
            guarded(cdekf_matches_discrete_kf),
        ),
        (5, "parameter recovery", guarded(parameter_recovery)),
    ];
    let runs = panic::catch_unwind(cohort_runs);
    let shared = |f: fn(&CohortRuns) -> Verdict| match &runs {
        Ok(r) => guarded(|| f(r)),
        Err(_) => verdict(false, "cohort run panicked".into()),
    };
    results.push((6, "excitation trend", shared(excitation_trend)));
    results.push((7, "gain calibration", shared(gain_calibration)));
    results.push((8, "determinism", guarded(determinism)));
    results.push((9, "filter health", shared(filter_health)));

    let mut failed = 0;
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
