//! Three-panel SVG of a scenario: glucose over both phases, closed-loop
//! infusion, and estimated versus true daily doses.

use std::fmt::Write;

use crate::scenario::{OutcomeThresholds, PatientRun, ScenarioResult};
use crate::simulate::{Phase, TraceSample};

const WIDTH: f64 = 960.0;
const PANEL_HEIGHT: f64 = 240.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const PANEL_GAP: f64 = 70.0;
/// Polylines keep every `DECIMATE`-th sample plus the last one.
const DECIMATE: usize = 3;

/// Linear map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn map(&self, v: f64) -> f64 {
        let t = if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            0.0
        };
        self.px_lo + t.clamp(0.0, 1.0) * (self.px_hi - self.px_lo)
    }
}

struct Panel {
    x: Axis,
    y: Axis,
    top: f64,
}

impl Panel {
    fn new(index: usize, x: (f64, f64), y: (f64, f64)) -> Self {
        let top = MARGIN_TOP + index as f64 * (PANEL_HEIGHT + PANEL_GAP);
        Panel {
            x: Axis {
                lo: x.0,
                hi: x.1,
                px_lo: MARGIN_LEFT,
                px_hi: WIDTH - MARGIN_RIGHT,
            },
            y: Axis {
                lo: y.0,
                hi: y.1,
                px_lo: top + PANEL_HEIGHT,
                px_hi: top,
            },
            top,
        }
    }

    fn frame(&self, svg: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r, b) = (self.x.px_lo, self.x.px_hi, self.y.px_lo);
        let _ = writeln!(
            svg,
            r#"<rect class="frame" x="{l:.1}" y="{:.1}" width="{:.1}" height="{PANEL_HEIGHT:.1}" fill="none" stroke="black"/>"#,
            self.top,
            r - l
        );
        let _ = writeln!(
            svg,
            r#"<text x="{l:.1}" y="{:.1}" font-size="14">{title}</text>"#,
            self.top - 8.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{x_label}</text>"#,
            0.5 * (l + r),
            b + 34.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
            self.top + 0.5 * PANEL_HEIGHT,
            self.top + 0.5 * PANEL_HEIGHT
        );
        for (value, px) in ticks(self.y.lo, self.y.hi).map(|v| (v, self.y.map(v))) {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                l - 4.0,
                px + 3.0,
                fmt_tick(value)
            );
        }
        for (value, px) in ticks(self.x.lo, self.x.hi).map(|v| (v, self.x.map(v))) {
            let _ = writeln!(
                svg,
                r#"<text x="{px:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                b + 14.0,
                fmt_tick(value)
            );
        }
    }

    fn polyline(
        &self,
        svg: &mut String,
        class: &str,
        id: usize,
        points: impl Iterator<Item = (f64, f64)>,
    ) {
        let mut coords = String::new();
        for (x, y) in points {
            let _ = write!(coords, "{:.1},{:.1} ", self.x.map(x), self.y.map(y));
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="{class}" data-patient="{id}" fill="none" points="{}"/>"#,
            coords.trim_end()
        );
    }
}

/// About five round tick values spanning `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(move |k| k as f64 * step)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn decimated(samples: &[&TraceSample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).step_by(DECIMATE).collect();
    if let Some(last) = samples.len().checked_sub(1) {
        if idx.last() != Some(&last) {
            idx.push(last);
        }
    }
    idx
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn boxplot(svg: &mut String, panel: &Panel, center: f64, values: &[f64], class: &str, label: &str) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return;
    }
    v.sort_by(f64::total_cmp);
    let [q0, q1, q2, q3, q4] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| panel.y.map(quantile(&v, q)));
    let cx = panel.x.map(center);
    let half = 40.0;
    let _ = writeln!(svg, r#"<g class="box {class}">"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{cx:.1}" y1="{q0:.1}" x2="{cx:.1}" y2="{q4:.1}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="black"/>"#,
        cx - half,
        2.0 * half,
        (q1 - q3).max(0.0)
    );
    let _ = writeln!(
        svg,
        r#"<line class="median" x1="{:.1}" y1="{q2:.1}" x2="{:.1}" y2="{q2:.1}" stroke="black" stroke-width="2"/>"#,
        cx - half,
        cx + half
    );
    let _ = writeln!(
        svg,
        r#"<text x="{cx:.1}" y="{:.1}" font-size="12" text-anchor="middle">{label}</text>"#,
        panel.y.px_lo + 16.0
    );
    svg.push_str("</g>\n");
}

/// Renders the scenario figure. Latent glucose is plotted; patients with a
/// hypoglycemic injection phase get the `hypo` class.
pub fn render(result: &ScenarioResult, thresholds: &OutcomeThresholds) -> String {
    let runs: Vec<&PatientRun> = result.runs().collect();
    let t_end = runs
        .iter()
        .filter_map(|r| r.trace.samples.last())
        .map(|s| s.time_min / 60.0)
        .fold(1.0_f64, f64::max);
    let t_switch = result.spec.closed_loop_hours;
    let g_max = runs
        .iter()
        .flat_map(|r| r.trace.samples.iter().map(|s| s.x.x4))
        .filter(|g| g.is_finite())
        .fold(16.0_f64, f64::max)
        .ceil();
    let u_max = runs
        .iter()
        .flat_map(|r| r.trace.phase(Phase::ClosedLoop).map(|s| s.u * 60.0))
        .fold(0.0_f64, f64::max)
        .max(1e-3)
        * 1.05;

    let height = MARGIN_TOP + 3.0 * PANEL_HEIGHT + 2.0 * PANEL_GAP + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    svg.push_str("<style>.glucose{stroke:#3465a4;stroke-opacity:0.35}.glucose.hypo{stroke:#cc0000;stroke-opacity:0.8}.infusion{stroke:#4e9a06;stroke-opacity:0.35}</style>\n");
    let _ = writeln!(svg, r#"<title>{}</title>"#, result.spec.name);

    let glucose = Panel::new(0, (0.0, t_end), (0.0, g_max));
    let (band_top, band_bottom) = (
        glucose.y.map(thresholds.range_high),
        glucose.y.map(thresholds.range_low),
    );
    let _ = writeln!(
        svg,
        r##"<rect class="target-band" x="{:.1}" y="{band_top:.1}" width="{:.1}" height="{:.1}" fill="#8ae234" fill-opacity="0.3"/>"##,
        glucose.x.px_lo,
        glucose.x.px_hi - glucose.x.px_lo,
        band_bottom - band_top
    );
    let hypo_y = glucose.y.map(thresholds.hypo);
    let _ = writeln!(
        svg,
        r##"<line class="hypo-line" x1="{:.1}" y1="{hypo_y:.1}" x2="{:.1}" y2="{hypo_y:.1}" stroke="#cc0000" stroke-dasharray="6 4"/>"##,
        glucose.x.px_lo, glucose.x.px_hi
    );
    let sx = glucose.x.map(t_switch);
    let _ = writeln!(
        svg,
        r#"<line class="phase-switch" x1="{sx:.1}" y1="{:.1}" x2="{sx:.1}" y2="{:.1}" stroke="gray"/>"#,
        glucose.top, glucose.y.px_lo
    );
    for run in &runs {
        let samples: Vec<&TraceSample> = run.trace.samples.iter().collect();
        let class = if run.metrics.hypo {
            "glucose hypo"
        } else {
            "glucose"
        };
        let points = decimated(&samples)
            .into_iter()
            .map(|i| (samples[i].time_min / 60.0, samples[i].x.x4));
        glucose.polyline(&mut svg, class, run.patient.id, points);
    }
    glucose.frame(
        &mut svg,
        &format!("{}: glucose", result.spec.name),
        "time (h)",
        "glucose (mmol/L)",
    );

    let infusion = Panel::new(1, (0.0, t_switch), (0.0, u_max));
    for run in &runs {
        let samples: Vec<&TraceSample> = run.trace.phase(Phase::ClosedLoop).collect();
        let points = decimated(&samples)
            .into_iter()
            .map(|i| (samples[i].time_min / 60.0, samples[i].u * 60.0));
        infusion.polyline(&mut svg, "infusion", run.patient.id, points);
    }
    infusion.frame(
        &mut svg,
        "closed-loop infusion",
        "time (h)",
        "insulin (U/h)",
    );

    let est: Vec<f64> = runs.iter().map(|r| r.metrics.dose_est).collect();
    let truth: Vec<f64> = runs.iter().map(|r| r.metrics.dose_true).collect();
    let finite_max = |v: &[f64]| {
        v.iter()
            .copied()
            .filter(|d| d.is_finite())
            .fold(1.0_f64, f64::max)
    };
    // Runaway estimates would flatten the boxes; the axis stops at three
    // times the largest true dose and whiskers clip there.
    let true_max = finite_max(&truth);
    let d_max = finite_max(&est).clamp(true_max, 3.0 * true_max) * 1.05;
    let doses = Panel::new(2, (0.0, 3.0), (0.0, d_max));
    boxplot(&mut svg, &doses, 1.0, &est, "estimated", "estimated");
    boxplot(&mut svg, &doses, 2.0, &truth, "true", "true");
    doses.frame(&mut svg, "daily basal dose", "", "dose (U/day)");
    svg.push_str("</svg>\n");
    svg
}
