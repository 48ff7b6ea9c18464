//! Benchmark evaluation: runs a scenario and scores identification,
//! tracking, value decrease and model-error decay.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::controller::{value_monitor, write_solves_csv, SolveSource, ValuePoint};
use crate::error::{Error, Result};
use crate::estimator::max_approximation_error;
use crate::simulator::{run_closed_loop, write_trajectory_csv, RunOutput};

/// Relative tracking tolerance per output, as a fraction of the setpoint.
pub const TRACKING_TOL: f64 = 0.02;
/// Length of the trailing window per reference piece, seconds.
pub const TRACKING_WINDOW: f64 = 0.5;
pub const IDENT_MONOTONE_ITERS: usize = 10;
pub const IDENT_ITER: usize = 50;
pub const IDENT_ERROR_TOL: f64 = 1e-2;
pub const VALUE_TOL: f64 = 1e-6;
pub const APPROX_DECAY: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub iteration: usize,
    pub t: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingWindow {
    pub t_start: f64,
    pub t_end: f64,
    /// Whether `t_end` itself belongs to the window.
    pub closed: bool,
    pub setpoint: Vec<f64>,
    pub max_abs_error: Vec<f64>,
}

impl TrackingWindow {
    pub fn within_tolerance(&self) -> bool {
        self.setpoint
            .iter()
            .zip(&self.max_abs_error)
            .all(|(sp, e)| *e < TRACKING_TOL * if *sp == 0.0 { 1.0 } else { sp.abs() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub seed: u64,
    pub excitation: String,
    pub param_error_series: Vec<ParamPoint>,
    pub tracking_error: Vec<TrackingWindow>,
    pub constraint_violations: usize,
    pub optimized_solves: usize,
    pub clamped_solves: usize,
    pub fallback_count: usize,
    pub rank_passed_at: Option<f64>,
    /// Time at which the estimator reached the convergence iteration.
    pub converged_at: Option<f64>,
    pub cost_margins: Vec<ValuePoint>,
    /// `(iteration, max ‖w‖)` over the logged trajectory.
    pub approximation_error: Vec<(usize, f64)>,
    pub estimator_divergence: Option<String>,
    pub elapsed_seconds: f64,
    pub criteria: Vec<CriterionResult>,
}

impl AcceptanceReport {
    fn empty(scenario: &Scenario) -> Self {
        let ex = &scenario.excitation;
        Self {
            seed: scenario.seed,
            excitation: format!(
                "pre-learning dither: {} seeded sinusoids per channel in [{}, {}] Hz, peak {}% of the input bound",
                ex.components,
                ex.min_freq,
                ex.max_freq,
                ex.amplitude * 100.0
            ),
            param_error_series: Vec::new(),
            tracking_error: Vec::new(),
            constraint_violations: 0,
            optimized_solves: 0,
            clamped_solves: 0,
            fallback_count: 0,
            rank_passed_at: None,
            converged_at: None,
            cost_margins: Vec::new(),
            approximation_error: Vec::new(),
            estimator_divergence: None,
            elapsed_seconds: 0.0,
            criteria: Vec::new(),
        }
    }

    /// Pass flags derived from the stored series alone.
    pub fn evaluate(&self) -> Vec<CriterionResult> {
        let diverged = self.estimator_divergence.as_deref();
        let errs: Vec<f64> = self.param_error_series.iter().map(|p| p.error).collect();

        let ident = match diverged {
            Some(msg) => (false, format!("estimator diverged: {msg}")),
            None if errs.len() < IDENT_ITER => (false, format!("only {} iterations ran", errs.len())),
            None => {
                let monotone = errs[..IDENT_MONOTONE_ITERS].windows(2).all(|w| w[1] < w[0]);
                let last = errs[IDENT_ITER - 1];
                (
                    monotone && last < IDENT_ERROR_TOL,
                    format!(
                        "strictly decreasing over first {IDENT_MONOTONE_ITERS}: {monotone}; error at iteration {IDENT_ITER}: {last:.3e}"
                    ),
                )
            }
        };

        let tracking = match diverged {
            Some(msg) => (false, format!("estimator diverged: {msg}")),
            None => {
                let ok = !self.tracking_error.is_empty()
                    && self.tracking_error.iter().all(TrackingWindow::within_tolerance)
                    && self.constraint_violations == 0;
                let windows: Vec<String> = self
                    .tracking_error
                    .iter()
                    .map(|w| {
                        let errs: Vec<String> = w.max_abs_error.iter().map(|e| format!("{e:.3e}")).collect();
                        format!("[{}, {}{} max |e| = ({})", w.t_start, w.t_end, if w.closed { "]" } else { ")" }, errs.join(", "))
                    })
                    .collect();
                (ok, format!("{}; bound violations: {}", windows.join("; "), self.constraint_violations))
            }
        };

        let value = match (diverged, self.converged_at) {
            (Some(msg), _) => (false, format!("estimator diverged: {msg}")),
            (None, None) => (false, format!("estimator never reached iteration {IDENT_ITER}")),
            (None, Some(t_conv)) => {
                let pts: Vec<&ValuePoint> = self.cost_margins.iter().filter(|p| p.t >= t_conv - 1e-9 && p.margin.is_some()).collect();
                let v0 = pts.first().map_or(0.0, |p| p.value);
                let tol = VALUE_TOL * (1.0 + v0);
                let considered: Vec<&&ValuePoint> = pts.iter().filter(|p| !p.across_switch).collect();
                let worst = considered.iter().filter_map(|p| p.margin).fold(f64::INFINITY, f64::min);
                let ok = !considered.is_empty() && worst >= -tol;
                (ok, format!("{} solves checked, worst margin {worst:.3e} (tolerance {tol:.3e})", considered.len()))
            }
        };

        let approx = match (diverged, self.approximation_error.as_slice()) {
            (Some(msg), _) => (false, format!("estimator diverged: {msg}")),
            (None, [(_, first), (_, last)]) => {
                let ratio = first / last;
                (ratio >= APPROX_DECAY, format!("max ‖w‖ {first:.3e} → {last:.3e}, ratio {ratio:.1}"))
            }
            (None, _) => (false, format!("estimator never reached iteration {IDENT_ITER}")),
        };

        [
            (3, "closed-loop identification", ident),
            (4, "setpoint tracking within bounds", tracking),
            (5, "value decrease after convergence", value),
            (6, "approximation-error decay", approx),
        ]
        .into_iter()
        .map(|(id, name, (pass, detail))| CriterionResult {
            id,
            name: name.into(),
            pass,
            detail,
        })
        .collect()
    }

    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

/// A scored run together with its raw output.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: AcceptanceReport,
    pub run: Option<RunOutput>,
}

impl Evaluation {
    /// Writes `report.json` and, when the run completed, `trajectory.csv`,
    /// `solves.csv` and `estimator.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let report = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(report, &self.report).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(run) = &self.run {
            write_trajectory_csv(&run.trajectory, BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
            write_solves_csv(&run.solves, BufWriter::new(File::create(dir.join("solves.csv"))?))?;
            let est = BufWriter::new(File::create(dir.join("estimator.json"))?);
            serde_json::to_writer_pretty(est, &run.estimator_events).map_err(|e| Error::Parse(e.to_string()))?;
        }
        Ok(())
    }
}

fn tracking_windows(scenario: &Scenario, run: &RunOutput) -> Vec<TrackingWindow> {
    let pieces = scenario.reference.pieces();
    let samples = run.trajectory.samples();
    let tol = 1e-9 * scenario.sim_step;
    pieces
        .iter()
        .enumerate()
        .filter_map(|(i, piece)| {
            let (t_end, closed) = match pieces.get(i + 1) {
                Some(next) => (next.t_start.min(scenario.duration), false),
                None => (scenario.duration, true),
            };
            let t_start = (t_end - TRACKING_WINDOW).max(piece.t_start);
            if t_end <= piece.t_start {
                return None;
            }
            let mut max_abs_error = vec![0.0; piece.value.len()];
            for s in samples.iter().filter(|s| s.t >= t_start - tol && if closed { s.t <= t_end + tol } else { s.t < t_end - tol }) {
                for (j, e) in max_abs_error.iter_mut().enumerate() {
                    *e = f64::max(*e, (s.y[j] - s.y_d[j]).abs());
                }
            }
            Some(TrackingWindow {
                t_start,
                t_end,
                closed,
                setpoint: piece.value.clone(),
                max_abs_error,
            })
        })
        .collect()
}

/// Runs the scenario and scores it. Estimator divergence is recorded in the
/// report; other failures (plant divergence, invalid scenario) are returned.
pub fn run_acceptance(scenario: &Scenario) -> Result<Evaluation> {
    scenario.validate()?;
    let mut report = AcceptanceReport::empty(scenario);
    let started = Instant::now();
    let run = match run_closed_loop(scenario) {
        Ok(run) => run,
        Err(e @ Error::EstimatorDivergence { .. }) => {
            report.estimator_divergence = Some(e.to_string());
            report.elapsed_seconds = started.elapsed().as_secs_f64();
            report.criteria = report.evaluate();
            return Ok(Evaluation { report, run: None });
        }
        Err(e) => return Err(e),
    };
    report.elapsed_seconds = started.elapsed().as_secs_f64();

    report.param_error_series = run
        .updates()
        .map(|e| ParamPoint {
            iteration: e.iteration,
            t: e.t,
            error: e.parameter_error,
        })
        .collect();
    report.tracking_error = tracking_windows(scenario, &run);
    let bounds = &scenario.config.bounds;
    report.constraint_violations = run.trajectory.samples().iter().filter(|s| !bounds.contains(&s.u)).count();
    let optimized: Vec<_> = run.solves.iter().filter(|s| s.source == SolveSource::Optimized).collect();
    report.optimized_solves = optimized.len();
    report.clamped_solves = optimized.iter().filter(|s| s.saturated.iter().any(|b| *b)).count();
    report.fallback_count = run.fallback_count;
    report.rank_passed_at = run.rank_passed_at;
    report.converged_at = run.updates().find(|e| e.iteration == IDENT_ITER).map(|e| e.t);
    report.cost_margins = value_monitor(&run.trajectory, &run.solves, &scenario.reference);
    if let (Some(first), Some(last)) = (run.estimate_at(1), run.estimate_at(IDENT_ITER)) {
        let truth = &scenario.model;
        report.approximation_error = vec![
            (1, max_approximation_error(&run.trajectory, first, truth)?),
            (IDENT_ITER, max_approximation_error(&run.trajectory, last, truth)?),
        ];
    }
    report.criteria = report.evaluate();
    Ok(Evaluation { report, run: Some(run) })
}
