//! Nelder-Mead simplex minimization over `[f64; N]`.
//!
//! Non-finite objective values are treated as `+inf`, so rejected points
//! simply lose every comparison.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Relative tolerance on simplex diameter and objective spread.
    pub tolerance: f64,
    /// Edge length of the initial axis-aligned simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 500,
            tolerance: 1e-6,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadResult<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn lerp<const N: usize>(from: &[f64; N], to: &[f64; N], t: f64) -> [f64; N] {
    std::array::from_fn(|i| from[i] + t * (to[i] - from[i]))
}

pub fn minimize<const N: usize, F>(
    mut objective: F,
    x0: [f64; N],
    opts: &NelderMeadOptions,
) -> NelderMeadResult<N>
where
    F: FnMut(&[f64; N]) -> f64,
{
    let evaluations = std::cell::Cell::new(0usize);
    let mut eval = |x: &[f64; N]| {
        evaluations.set(evaluations.get() + 1);
        let v = objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    let f0 = eval(&x0);
    simplex.push((x0, f0));
    for i in 0..N {
        let mut x = x0;
        x[i] += opts.initial_step;
        let f = eval(&x);
        simplex.push((x, f));
    }

    let mut iterations = 0;
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, f_best) = simplex[0];
        let f_worst = simplex[N].1;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(best.iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        let x_scale = best.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let f_scale = f_best.abs().max(1.0);
        if f_best.is_finite()
            && diameter <= opts.tolerance * x_scale
            && (f_worst - f_best).abs() <= opts.tolerance * f_scale
        {
            converged = true;
            break;
        }
        if evaluations.get() >= opts.max_evals {
            break;
        }
        iterations += 1;

        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for i in 0..N {
                centroid[i] += x[i] / N as f64;
            }
        }
        let worst = simplex[N].0;
        let f_second = simplex[N - 1].1;

        let reflected = lerp(&centroid, &worst, -REFLECT);
        let f_r = eval(&reflected);
        if f_r < f_best {
            let expanded = lerp(&centroid, &worst, -EXPAND);
            let f_e = eval(&expanded);
            simplex[N] = if f_e < f_r {
                (expanded, f_e)
            } else {
                (reflected, f_r)
            };
            continue;
        }
        if f_r < f_second {
            simplex[N] = (reflected, f_r);
            continue;
        }
        let (contracted, f_c) = if f_r < f_worst {
            let c = lerp(&centroid, &reflected, CONTRACT);
            let f = eval(&c);
            (c, f)
        } else {
            let c = lerp(&centroid, &worst, CONTRACT);
            let f = eval(&c);
            (c, f)
        };
        if f_c < f_worst.min(f_r) {
            simplex[N] = (contracted, f_c);
            continue;
        }
        for vertex in simplex.iter_mut().skip(1) {
            let x = lerp(&best, &vertex.0, SHRINK);
            *vertex = (x, eval(&x));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NelderMeadResult {
        x: simplex[0].0,
        f: simplex[0].1,
        iterations,
        evaluations: evaluations.get(),
        converged,
    }
}
