//! Forward simulation of the true plant and the trajectory log the
//! estimator learns from.

mod closed_loop;
mod csv;

pub use closed_loop::{run_closed_loop, EstimatorEvent, RunOutput};
pub use csv::{read_trajectory_csv, trajectory_csv_header, write_trajectory_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LtiModel, Vector};

/// Relative tolerance used when matching floating timestamps.
pub(crate) const TIME_TOL: f64 = 1e-9;

pub(crate) fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Number of `h` steps in `span`, if `span` is a positive integer multiple of `h`.
pub(crate) fn steps_in(span: f64, h: f64) -> Option<usize> {
    let k = (span / h).round();
    if k >= 1.0 && same_time(k * h, span) {
        Some(k as usize)
    } else {
        None
    }
}

/// One logged simulation instant. `u` is the input held over `[t, t + h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vector,
    pub u: Vector,
    pub y: Vector,
    pub y_d: Vector,
    pub stage_cost: f64,
}

/// Uniformly sampled closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    step: f64,
    samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidScenario(format!("simulation step must be positive, got {step}")));
        }
        Ok(Self {
            step,
            samples: Vec::new(),
        })
    }

    pub fn from_samples(step: f64, samples: Vec<Sample>) -> Result<Self> {
        let mut traj = Self::new(step)?;
        for s in samples {
            traj.push(s)?;
        }
        Ok(traj)
    }

    /// Appends a sample; its timestamp must continue the uniform grid.
    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(first) = self.samples.first() {
            let expected = first.t + self.samples.len() as f64 * self.step;
            if !same_time(sample.t, expected) {
                return Err(Error::InvalidScenario(format!(
                    "sample at t = {} breaks the uniform grid (expected {expected})",
                    sample.t
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Fills in the decision taken at the newest sample.
    pub(crate) fn set_last_input(&mut self, u: Vector, stage_cost: f64) {
        if let Some(s) = self.samples.last_mut() {
            s.u = u;
            s.stage_cost = stage_cost;
        }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.t)
    }

    /// Index of the sample logged at `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let t0 = self.start_time().ok_or(Error::UnalignedWindow { time: t })?;
        let k = ((t - t0) / self.step).round();
        if k < 0.0 || k as usize >= self.samples.len() {
            return Err(Error::UnalignedWindow { time: t });
        }
        let k = k as usize;
        if !same_time(self.samples[k].t, t) {
            return Err(Error::UnalignedWindow { time: t });
        }
        Ok(k)
    }

    /// Largest deviation of a logged `y` from `C x`.
    pub fn output_consistency(&self, model: &LtiModel) -> f64 {
        self.samples
            .iter()
            .map(|s| (model.c() * &s.x - &s.y).amax())
            .fold(0.0, f64::max)
    }
}

/// Piecewise-constant, right-continuous reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSignal {
    pieces: Vec<ReferencePiece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePiece {
    pub t_start: f64,
    pub value: Vec<f64>,
}

impl ReferenceSignal {
    pub fn new(pieces: Vec<ReferencePiece>) -> Result<Self> {
        let first = pieces
            .first()
            .ok_or_else(|| Error::InvalidScenario("reference needs at least one piece".into()))?;
        if first.t_start != 0.0 {
            return Err(Error::InvalidScenario("first reference piece must start at t = 0".into()));
        }
        let dim = first.value.len();
        for w in pieces.windows(2) {
            if !(w[1].t_start > w[0].t_start) {
                return Err(Error::InvalidScenario("reference switch times must be strictly increasing".into()));
            }
        }
        if pieces.iter().any(|p| p.value.len() != dim) {
            return Err(Error::InvalidScenario("reference pieces have differing dimensions".into()));
        }
        Ok(Self { pieces })
    }

    pub fn constant(value: &[f64]) -> Self {
        Self {
            pieces: vec![ReferencePiece {
                t_start: 0.0,
                value: value.to_vec(),
            }],
        }
    }

    pub fn pieces(&self) -> &[ReferencePiece] {
        &self.pieces
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].value.len()
    }

    /// Times at which the reference switches value (excluding `t = 0`).
    pub fn switch_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().skip(1).map(|p| p.t_start)
    }

    pub fn at(&self, t: f64) -> Vector {
        let piece = self
            .pieces
            .iter()
            .rev()
            .find(|p| p.t_start <= t || same_time(p.t_start, t))
            .unwrap_or(&self.pieces[0]);
        Vector::from_column_slice(&piece.value)
    }
}

/// Classical RK4 step of `ẋ = A x + B u` with `u` held over `[t, t + h]`.
pub fn step(model: &LtiModel, x: &Vector, u: &Vector, t: f64, h: f64) -> Result<Vector> {
    let a = model.a();
    let bu = model.b() * u;
    let f = |s: &Vector| a * s + &bu;
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::Divergence { time: t + h })
    }
}

pub fn output(model: &LtiModel, x: &Vector) -> Vector {
    model.c() * x
}

/// Window integrals `(∫x dτ, ∫u dτ)` over `[t − δt, t]`.
///
/// The state integral is the composite trapezoid over logged samples. The
/// input is zero-order held between samples, so its integral is the exact
/// left-endpoint sum. Returns zeros when `t < δt`.
pub fn window_integrals(traj: &Trajectory, t: f64, dt: f64) -> Result<(Vector, Vector)> {
    let h = traj.step();
    let p = steps_in(dt, h).ok_or(Error::UnalignedWindow { time: t })?;
    let k = traj.index_of(t)?;
    let s = traj.samples();
    let (n, m) = (s[k].x.len(), s[k].u.len());
    if t < dt && !same_time(t, dt) {
        return Ok((Vector::zeros(n), Vector::zeros(m)));
    }
    if k < p {
        return Err(Error::InsufficientData {
            required: t - dt,
            available: s[0].t,
        });
    }
    let mut ix = Vector::zeros(n);
    let mut iu = Vector::zeros(m);
    for i in (k - p)..k {
        ix += (&s[i].x + &s[i + 1].x) * (0.5 * h);
        iu += &s[i].u * h;
    }
    Ok((ix, iu))
}
