//! Closed-form receding-horizon solve, input extraction and constraint
//! handling.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorState, UpdateGain};
use crate::model::{dynamics_from_theta, list, relative_degree_of, rows, InputBounds, Matrix, Vector, MARKOV_ZERO_TOL};
use crate::predictor::{cost_integrals, lift_reference, prediction_matrices, CostIntegrals, LiftedReference, PredictionBundle};
use crate::simulator::{ReferenceSignal, Trajectory};

/// Largest accepted condition estimate of the reduced Hessian `𝓜`.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative tolerance of the per-solve stationarity check.
pub const STATIONARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    #[default]
    Saturate,
    Squash,
    None,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturate" => Ok(Self::Saturate),
            "squash" => Ok(Self::Squash),
            "none" => Ok(Self::None),
            other => Err(Error::Parse(format!("unknown constraint mode `{other}`"))),
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Saturate => "saturate",
            Self::Squash => "squash",
            Self::None => "none",
        })
    }
}

/// Either a fixed relative degree or `"auto"` (computed from the learned model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelativeDegree {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for RelativeDegree {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Fixed(v) => s.serialize_u64(*v as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RelativeDegree {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("relative degree must be at least 1")),
            Raw::Int(v) => Ok(Self::Fixed(v)),
            Raw::Text(t) if t == "auto" => Ok(Self::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected an integer or \"auto\", got `{t}`"))),
        }
    }
}

fn default_updates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Prediction horizon `T` in seconds.
    pub horizon: f64,
    /// Control order `r`; defaults to `ρ + 2`.
    #[serde(default)]
    pub control_order: Option<usize>,
    #[serde(default)]
    pub relative_degree: RelativeDegree,
    /// Output error weight, `q × q`.
    #[serde(with = "rows")]
    pub q: Matrix,
    /// Input weight, `m × m`.
    #[serde(with = "rows")]
    pub r: Matrix,
    pub resolve_interval: f64,
    pub learning_start: f64,
    pub bounds: InputBounds,
    #[serde(default)]
    pub constraint_mode: ConstraintMode,
    /// Initial stabilizing gain, `m × n`.
    #[serde(with = "rows")]
    pub k0: Matrix,
    pub eta_theta: f64,
    pub delta_t: f64,
    pub n_k: usize,
    pub d_lower: f64,
    #[serde(default)]
    pub update_gain: UpdateGain,
    #[serde(default = "default_updates")]
    pub updates_per_solve: usize,
    /// Drop regression rows closer than this to an earlier one.
    #[serde(default)]
    pub dedup_tol: Option<f64>,
    /// Optional `q × q` terminal weight on the predicted output error.
    #[serde(default, with = "rows::option")]
    pub terminal_weight: Option<Matrix>,
    /// Give up if the excitation condition still fails at this time.
    #[serde(default)]
    pub rank_deadline: Option<f64>,
}

impl ControllerConfig {
    pub fn validate(&self, n: usize, m: usize, q: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if !(self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.resolve_interval > 0.0) || self.resolve_interval > self.horizon * (1.0 + 1e-12) {
            return bad(format!(
                "resolve_interval must lie in (0, horizon], got {}",
                self.resolve_interval
            ));
        }
        if !(self.learning_start >= 0.0) {
            return bad(format!("learning_start must be non-negative, got {}", self.learning_start));
        }
        if !(self.eta_theta > 0.0) || !(self.delta_t > 0.0) || !(self.d_lower >= 0.0) {
            return bad("eta_theta and delta_t must be positive, d_lower non-negative".into());
        }
        if self.n_k == 0 || self.updates_per_solve == 0 {
            return bad("n_k and updates_per_solve must be at least 1".into());
        }
        if let (Some(r), RelativeDegree::Fixed(rho)) = (self.control_order, self.relative_degree) {
            if r < rho {
                return bad(format!("control_order {r} is below relative_degree {rho}"));
            }
        }
        if self.control_order == Some(0) {
            return bad("control_order must be at least 1".into());
        }
        for (name, mat, rows, cols) in [("q", &self.q, q, q), ("r", &self.r, m, m), ("k0", &self.k0, m, n)] {
            if mat.shape() != (rows, cols) {
                return Err(Error::dims("controller config", format!("{name}: {rows}×{cols}"), format!("{}×{}", mat.nrows(), mat.ncols())));
            }
        }
        if let Some(p) = &self.terminal_weight {
            if p.shape() != (q, q) {
                return Err(Error::dims("terminal_weight", format!("{q}×{q}"), format!("{}×{}", p.nrows(), p.ncols())));
            }
        }
        if self.bounds.dim() != m {
            return Err(Error::dims("bounds", m, self.bounds.dim()));
        }
        Ok(())
    }
}

/// Where the applied input of a decision point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveSource {
    /// `u = −K₀ x` before the estimator is available.
    Initial,
    Optimized,
    /// The solve failed and the previous input was held.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub t: f64,
    #[serde(with = "list")]
    pub u_bar_star: Vector,
    #[serde(with = "list")]
    pub u_applied: Vector,
    /// Optimal predicted cost `J(ū*)`; zero for non-optimized decisions.
    pub cost_value: f64,
    pub m_condition: f64,
    /// Channels whose unconstrained optimum lay outside the box.
    pub saturated: Vec<bool>,
    pub source: SolveSource,
    pub relative_degree: usize,
    pub control_order: usize,
}

impl SolveReport {
    pub fn fallback(&self) -> bool {
        self.source == SolveSource::Fallback
    }
}

/// `J(ū) = ūᵀ 𝓜 ū + 2 ūᵀ g + c`, the predicted cost as a function of the
/// input-derivative vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub hessian: Matrix,
    pub linear: Vector,
    pub constant: f64,
}

impl QuadraticCost {
    pub fn value(&self, u: &Vector) -> f64 {
        (u.transpose() * &self.hessian * u)[0] + 2.0 * self.linear.dot(u) + self.constant
    }

    pub fn gradient(&self, u: &Vector) -> Vector {
        2.0 * (&self.hessian * u + &self.linear)
    }
}

/// Assembles the predicted cost
/// `Ỹ₁ᵀ𝒯₁₁Ỹ₁ + 2Ỹ₁ᵀ𝒯₁₂Ỹ₂ + Ỹ₂ᵀ𝒯₂₂Ỹ₂ + ūᵀ𝒯ᵤū` with `Ỹ₂ = 𝒜₂x + ℬ₃ū − Y₂d`.
pub fn assemble_quadratic(
    x: &Vector,
    reference: &LiftedReference,
    bundle: &PredictionBundle,
    integrals: &CostIntegrals,
) -> Result<QuadraticCost> {
    if x.len() != bundle.n
        || reference.y1d.len() != bundle.a1.nrows()
        || reference.y2d.len() != bundle.a2.nrows()
        || integrals.rho != bundle.rho
        || integrals.r != bundle.r
    {
        return Err(Error::dims(
            "assemble_quadratic",
            format!("x: {}, ρ = {}, r = {}", bundle.n, bundle.rho, bundle.r),
            format!("x: {}, ρ = {}, r = {}", x.len(), integrals.rho, integrals.r),
        ));
    }
    let y1 = &bundle.a1 * x - &reference.y1d;
    let y2 = &bundle.a2 * x - &reference.y2d;
    let b3 = &bundle.b3;
    let hessian = b3.transpose() * &integrals.t22 * b3 + integrals.tu_decision(bundle.m);
    let linear = b3.transpose() * (&integrals.t22 * &y2 + integrals.t12.transpose() * &y1);
    let constant = (y1.transpose() * &integrals.t11 * &y1)[0]
        + 2.0 * (y1.transpose() * &integrals.t12 * &y2)[0]
        + (y2.transpose() * &integrals.t22 * &y2)[0];
    Ok(QuadraticCost {
        hessian: 0.5 * (&hessian + hessian.transpose()),
        linear,
        constant,
    })
}

fn condition_estimate(m: &Matrix) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if !hi.is_finite() || !lo.is_finite() {
        f64::INFINITY
    } else if lo <= 0.0 {
        if hi == 0.0 {
            f64::INFINITY
        } else {
            hi / f64::MIN_POSITIVE
        }
    } else {
        hi / lo
    }
}

/// Minimizer of the assembled quadratic, returned with the condition estimate of `𝓜`.
///
/// `𝓜` is first equilibrated to `D𝓜D` with `D = diag(𝓜)^{-1/2}`; the guard
/// and the factorization both act on the scaled matrix, so badly scaled
/// but otherwise well-posed problems (large `CÃᵏB̃` gains) are not rejected.
pub fn solve_quadratic(cost: &QuadraticCost) -> Result<(Vector, f64)> {
    let diag = cost.hessian.diagonal();
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::DegeneratePredictor { condition: f64::INFINITY });
    }
    let d = diag.map(|v| 1.0 / v.sqrt());
    let scaled = Matrix::from_fn(d.len(), d.len(), |i, j| d[i] * cost.hessian[(i, j)] * d[j]);
    let condition = condition_estimate(&scaled);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegeneratePredictor { condition });
    }
    let rhs = -cost.linear.component_mul(&d);
    let v = match scaled.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => scaled.lu().solve(&rhs).ok_or(Error::DegeneratePredictor { condition })?,
    };
    let u = v.component_mul(&d);
    let residual = (&cost.hessian * &u + &cost.linear).norm();
    let scale = cost.linear.norm() + cost.hessian.norm() * u.norm();
    if !u.iter().all(|v| v.is_finite()) || residual > STATIONARITY_TOL * scale.max(f64::MIN_POSITIVE) && residual > 0.0 {
        return Err(Error::DegeneratePredictor { condition });
    }
    Ok((u, condition))
}

/// `ū* = −𝓜⁻¹ ℬ₃ᵀ (𝒯₂₂(𝒜₂x − Y₂d) + 𝒯₁₂ᵀ Ỹ₁)` with `𝓜 = ℬ₃ᵀ𝒯₂₂ℬ₃ + 𝒯ᵤ`.
pub fn solve_unconstrained(
    x: &Vector,
    reference: &LiftedReference,
    bundle: &PredictionBundle,
    integrals: &CostIntegrals,
) -> Result<Vector> {
    let cost = assemble_quadratic(x, reference, bundle, integrals)?;
    solve_quadratic(&cost).map(|(u, _)| u)
}

/// First `m`-block of `ū*`.
pub fn extract_input(u_bar: &Vector, m: usize) -> Vector {
    u_bar.rows(0, m.min(u_bar.len())).into_owned()
}

pub fn saturate(u: &Vector, bounds: &InputBounds) -> Vector {
    Vector::from_fn(u.len(), |i, _| u[i].clamp(bounds.lower()[i], bounds.upper()[i]))
}

/// `s(v) = (ū − u̲)/2 · tanh(v) + (ū + u̲)/2`, elementwise.
pub fn squash(v: &Vector, bounds: &InputBounds) -> Vector {
    Vector::from_fn(v.len(), |i, _| {
        let (lo, hi) = (bounds.lower()[i], bounds.upper()[i]);
        0.5 * (hi - lo) * v[i].tanh() + 0.5 * (hi + lo)
    })
}

/// Passes `u` through the squashing map after normalizing it so that the map
/// has unit slope at the box centre; small inputs are left nearly unchanged.
fn squash_input(u: &Vector, bounds: &InputBounds) -> Vector {
    let v = Vector::from_fn(u.len(), |i, _| {
        let (lo, hi) = (bounds.lower()[i], bounds.upper()[i]);
        (u[i] - 0.5 * (hi + lo)) / (0.5 * (hi - lo))
    });
    squash(&v, bounds)
}

/// Applies the configured constraint mode and reports which channels had to move.
pub fn constrain(u: &Vector, bounds: &InputBounds, mode: ConstraintMode) -> (Vector, Vec<bool>) {
    let outside = (0..u.len())
        .map(|i| u[i] < bounds.lower()[i] || u[i] > bounds.upper()[i])
        .collect();
    let applied = match mode {
        ConstraintMode::Saturate => saturate(u, bounds),
        ConstraintMode::Squash => squash_input(u, bounds),
        ConstraintMode::None => u.clone(),
    };
    (applied, outside)
}

/// `‖e‖²_Q + ‖u‖²_R`.
pub fn stage_cost(e: &Vector, u: &Vector, q: &Matrix, r: &Matrix) -> f64 {
    (e.transpose() * q * e)[0] + (u.transpose() * r * u)[0]
}

/// The controller's per-decision inputs.
pub struct StepContext<'a> {
    pub config: &'a ControllerConfig,
    /// Output map, assumed known.
    pub c: &'a Matrix,
    pub reference: &'a ReferenceSignal,
    /// Input applied at the previous decision, held on solve failure.
    pub previous: Option<&'a Vector>,
}

/// One decision of the receding-horizon loop at time `t`.
///
/// `estimator` is `None` until the excitation condition has passed once; in
/// that case, and before `learning_start`, the initial gain is applied.
pub fn mpc_step(x: &Vector, t: f64, estimator: Option<&EstimatorState>, ctx: &StepContext<'_>) -> Result<SolveReport> {
    let config = ctx.config;
    let m = config.k0.nrows();
    let estimator = match estimator {
        Some(e) if t >= config.learning_start - 1e-9 * (1.0 + t.abs()) => e,
        _ => {
            let u = -&config.k0 * x;
            let (u_applied, saturated) = constrain(&u, &config.bounds, config.constraint_mode);
            return Ok(SolveReport {
                t,
                u_bar_star: u,
                u_applied,
                cost_value: 0.0,
                m_condition: 0.0,
                saturated,
                source: SolveSource::Initial,
                relative_degree: 0,
                control_order: 0,
            });
        }
    };

    let (a_hat, b_hat) = dynamics_from_theta(&estimator.theta_hat)?;
    let rho = match config.relative_degree {
        RelativeDegree::Fixed(v) => v,
        RelativeDegree::Auto => relative_degree_of(&a_hat, &b_hat, ctx.c, MARKOV_ZERO_TOL)?,
    };
    let r = config.control_order.unwrap_or(rho + 2).max(rho);
    let bundle = prediction_matrices(&a_hat, &b_hat, ctx.c, rho, r)?;
    let integrals = cost_integrals(&config.q, &config.r, config.horizon, rho, r, config.terminal_weight.as_ref())?;
    let lifted = lift_reference(ctx.reference, t, rho, r)?;
    let cost = assemble_quadratic(x, &lifted, &bundle, &integrals)?;

    match solve_quadratic(&cost) {
        Ok((u_bar, condition)) => {
            let u = extract_input(&u_bar, m);
            let (u_applied, saturated) = constrain(&u, &config.bounds, config.constraint_mode);
            Ok(SolveReport {
                t,
                cost_value: cost.value(&u_bar).max(0.0),
                u_bar_star: u_bar,
                u_applied,
                m_condition: condition,
                saturated,
                source: SolveSource::Optimized,
                relative_degree: rho,
                control_order: r,
            })
        }
        Err(Error::DegeneratePredictor { condition }) => {
            log::warn!("t = {t:.4}: degenerate predictor (cond {condition:.3e}), holding previous input");
            let u_applied = match ctx.previous {
                Some(p) => p.clone(),
                None => constrain(&(-&config.k0 * x), &config.bounds, config.constraint_mode).0,
            };
            Ok(SolveReport {
                t,
                u_bar_star: Vector::zeros(bundle.decision_len()),
                u_applied,
                cost_value: 0.0,
                m_condition: condition,
                saturated: vec![false; m],
                source: SolveSource::Fallback,
                relative_degree: rho,
                control_order: r,
            })
        }
        Err(e) => Err(e),
    }
}

/// One point of the value-function monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuePoint {
    pub t: f64,
    pub value: f64,
    /// `V(t_k) − V(t_{k+1})`, absent for the last point.
    pub margin: Option<f64>,
    /// Realized stage cost integrated over `[t_k, t_{k+1}]`; the decrease
    /// condition asks for `margin ≥` this quantity.
    pub stage_integral: Option<f64>,
    /// A reference switch lies in `(t_k, t_{k+1}]`.
    pub across_switch: bool,
}

/// Value series of the optimized solves along the realized trajectory.
pub fn value_monitor(traj: &Trajectory, solves: &[SolveReport], reference: &ReferenceSignal) -> Vec<ValuePoint> {
    let accepted: Vec<&SolveReport> = solves.iter().filter(|s| s.source == SolveSource::Optimized).collect();
    let switches: Vec<f64> = reference.switch_times().collect();
    let samples = traj.samples();
    let h = traj.step();
    let integral = |t0: f64, t1: f64| -> f64 {
        let inside: Vec<f64> = samples
            .iter()
            .filter(|s| s.t >= t0 - 1e-9 * h && s.t <= t1 + 1e-9 * h)
            .map(|s| s.stage_cost)
            .collect();
        if inside.len() < 2 {
            return 0.0;
        }
        let interior: f64 = inside[1..inside.len() - 1].iter().sum();
        h * (0.5 * (inside[0] + inside[inside.len() - 1]) + interior)
    };
    accepted
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let next = accepted.get(k + 1);
            ValuePoint {
                t: s.t,
                value: s.cost_value,
                margin: next.map(|n| s.cost_value - n.cost_value),
                stage_integral: next.map(|n| integral(s.t, n.t)),
                across_switch: next.is_some_and(|n| switches.iter().any(|&w| w > s.t + 1e-9 && w <= n.t + 1e-9)),
            }
        })
        .collect()
}

/// Writes solve reports as `t,cost,cond_M,sat_mask,u1..um`; the mask is a
/// string of `0`/`1` per channel.
pub fn write_solves_csv<W: Write>(solves: &[SolveReport], mut w: W) -> Result<()> {
    let m = solves.first().map_or(0, |s| s.u_applied.len());
    let mut header = String::from("t,cost,cond_M,sat_mask");
    for i in 1..=m {
        header.push_str(&format!(",u{i}"));
    }
    writeln!(w, "{header}")?;
    for s in solves {
        let mask: String = s.saturated.iter().map(|b| if *b { '1' } else { '0' }).collect();
        let mut line = format!("{:.16e},{:.16e},{:.16e},{mask}", s.t, s.cost_value, s.m_condition);
        for v in s.u_applied.iter() {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::estimator::UpdateGain;
    use crate::model::theta_of;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_setup(q: f64, r: f64) -> (PredictionBundle, CostIntegrals) {
        let bundle = prediction_matrices(&dmatrix![0.0], &dmatrix![1.0], &dmatrix![1.0], 1, 1).unwrap();
        let ci = cost_integrals(&dmatrix![q], &dmatrix![r], 1.0, 1, 1, None).unwrap();
        (bundle, ci)
    }

    fn lifted(y1d: &[f64], y2d_len: usize) -> LiftedReference {
        LiftedReference {
            y1d: Vector::from_column_slice(y1d),
            y2d: Vector::zeros(y2d_len),
        }
    }

    #[test]
    fn equilibrium_gives_zero_input() {
        let a = dmatrix![-1.0, 0.2; 0.0, -0.5];
        let b = dmatrix![1.0; 0.5];
        let c = dmatrix![1.0, 0.0];
        let bundle = prediction_matrices(&a, &b, &c, 1, 3).unwrap();
        let ci = cost_integrals(&dmatrix![1.0], &dmatrix![0.1], 1.0, 1, 3, None).unwrap();
        let x = Vector::zeros(2);
        let u = solve_unconstrained(&x, &lifted(&[0.0], 3), &bundle, &ci).unwrap();
        assert_eq!(u, Vector::zeros(3));
    }

    /// Plain gradient descent on the quadratic, stopped on a tiny gradient.
    fn descend(cost: &QuadraticCost) -> Vector {
        let lmax = cost.hessian.clone().symmetric_eigen().eigenvalues.max();
        let step = 0.5 / lmax;
        let mut u = Vector::zeros(cost.linear.len());
        for _ in 0..2_000_000 {
            let g = cost.gradient(&u);
            if g.norm() < 1e-13 {
                break;
            }
            u -= step * g;
        }
        u
    }

    #[test]
    fn scalar_integrator_matches_gradient_descent() {
        for r in [1.0, 1e-2, 1e-4] {
            let (bundle, ci) = scalar_setup(1.0, r);
            let x = Vector::from_element(1, 0.3);
            let refl = lifted(&[1.0], 1);
            let cost = assemble_quadratic(&x, &refl, &bundle, &ci).unwrap();
            let u = solve_unconstrained(&x, &refl, &bundle, &ci).unwrap();
            let oracle = descend(&cost);
            assert!((&u - &oracle).norm() < 1e-8 * (1.0 + oracle.norm()), "r = {r}");
        }
    }

    #[test]
    fn hand_worked_scalar_optimum() {
        // ẋ = u, y = x, x = 0, y_d = 1, T = 1, ū = [u]:
        // J(u) = ∫ (uτ − 1)² + ρ_R u² = u²/3 − u + 1 + ρ_R u², so u* = 1 / (2/3 + 2ρ_R).
        let (bundle, ci) = scalar_setup(1.0, 0.5);
        let u = solve_unconstrained(&Vector::zeros(1), &lifted(&[1.0], 1), &bundle, &ci).unwrap();
        assert!((u[0] - 1.0 / (2.0 / 3.0 + 1.0)).abs() < 1e-14);
    }

    fn random_instance(seed: u64) -> (Vector, LiftedReference, PredictionBundle, CostIntegrals) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |s: f64| rng.gen_range(-s..s);
        let a = Matrix::from_fn(2, 2, |_, _| g(2.0));
        let b = Matrix::from_fn(2, 1, |_, _| g(1.0) + 1.5);
        let c = dmatrix![1.0, 0.0];
        let bundle = prediction_matrices(&a, &b, &c, 1, 3).unwrap();
        let ci = cost_integrals(&dmatrix![1.0 + g(0.5).abs()], &dmatrix![0.1 + g(0.05).abs()], 1.0, 1, 3, None).unwrap();
        let x = Vector::from_fn(2, |_, _| g(1.0));
        (x, lifted(&[g(2.0)], 3), bundle, ci)
    }

    #[test]
    fn finite_difference_gradient_vanishes_at_optimum() {
        for seed in 0..50 {
            let (x, refl, bundle, ci) = random_instance(seed);
            let u = solve_unconstrained(&x, &refl, &bundle, &ci).unwrap();
            let cost = assemble_quadratic(&x, &refl, &bundle, &ci).unwrap();
            let fd = |at: &Vector| {
                // J is quadratic, so central differences carry no truncation error.
                let h = 1e-3;
                Vector::from_fn(at.len(), |i, _| {
                    let mut p = at.clone();
                    let mut m = at.clone();
                    p[i] += h;
                    m[i] -= h;
                    (cost.value(&p) - cost.value(&m)) / (2.0 * h)
                })
            };
            let g0 = fd(&Vector::zeros(u.len())).norm();
            assert!(fd(&u).norm() < 1e-8 * (1.0 + g0), "seed {seed}");
            assert!(cost.value(&u) <= cost.value(&Vector::zeros(u.len())) + 1e-12);
            assert!((&cost.hessian * &u + &cost.linear).norm() < 1e-8 * (1.0 + cost.linear.norm()));
        }
    }

    #[test]
    fn singular_hessian_is_degenerate() {
        let cost = QuadraticCost {
            hessian: dmatrix![1.0, 0.0; 0.0, 0.0],
            linear: Vector::from_column_slice(&[1.0, 1.0]),
            constant: 0.0,
        };
        assert!(matches!(solve_quadratic(&cost), Err(Error::DegeneratePredictor { .. })));

        let nearly = QuadraticCost {
            hessian: dmatrix![1.0, 1.0; 1.0, 1.0 + 1e-14],
            ..cost
        };
        assert!(matches!(solve_quadratic(&nearly), Err(Error::DegeneratePredictor { .. })));
    }

    #[test]
    fn badly_scaled_hessian_is_accepted() {
        let cost = QuadraticCost {
            hessian: dmatrix![1e10, 1e2; 1e2, 1e-4],
            linear: Vector::from_column_slice(&[2e10, -1e-4]),
            constant: 0.0,
        };
        let (u, cond) = solve_quadratic(&cost).unwrap();
        assert!(cond < 10.0, "{cond}");
        let oracle = cost.hessian.clone().full_piv_lu().solve(&(-&cost.linear)).unwrap();
        assert_relative_eq!(u, oracle, max_relative = 1e-10);
    }

    #[test]
    fn extract_examples() {
        let u = Vector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(extract_input(&u, 2).as_slice(), &[1.0, 2.0]);
        assert_eq!(extract_input(&u.rows(0, 2).into_owned(), 2).as_slice(), &[1.0, 2.0]);
        assert_eq!(extract_input(&Vector::zeros(4), 2), Vector::zeros(2));
    }

    #[test]
    fn saturate_and_squash_examples() {
        let bounds = InputBounds::symmetric(&[80.0, 70.0]).unwrap();
        let clipped = saturate(&Vector::from_column_slice(&[90.0, -75.0]), &bounds);
        assert_eq!(clipped.as_slice(), &[80.0, -70.0]);
        let inside = Vector::from_column_slice(&[10.0, 0.0]);
        assert_eq!(saturate(&inside, &bounds), inside);
        assert_eq!(squash(&Vector::zeros(2), &bounds), Vector::zeros(2));
        let big = squash(&Vector::from_column_slice(&[1e3, -1e3]), &bounds);
        assert_eq!(big.as_slice(), &[80.0, -70.0]);
        let unit = InputBounds::symmetric(&[1.0]).unwrap();
        assert!((squash(&Vector::from_element(1, 1.0), &unit)[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn stage_cost_examples() {
        let q = Matrix::from_diagonal(&Vector::from_column_slice(&[10.0, 100.0]));
        let r = Matrix::identity(2, 2);
        assert_eq!(stage_cost(&Vector::zeros(2), &Vector::zeros(2), &q, &r), 0.0);
        assert_eq!(stage_cost(&Vector::from_column_slice(&[1.0, 0.0]), &Vector::zeros(2), &q, &r), 10.0);
    }

    fn config() -> ControllerConfig {
        ControllerConfig {
            horizon: 1.0,
            control_order: None,
            relative_degree: RelativeDegree::Auto,
            q: dmatrix![1.0],
            r: dmatrix![0.1],
            resolve_interval: 0.1,
            learning_start: 1.0,
            bounds: InputBounds::symmetric(&[2.0]).unwrap(),
            constraint_mode: ConstraintMode::Saturate,
            k0: dmatrix![1.5, 0.5],
            eta_theta: 0.5,
            delta_t: 0.01,
            n_k: 10,
            d_lower: 1e-8,
            update_gain: UpdateGain::Normalized,
            updates_per_solve: 1,
            dedup_tol: None,
            terminal_weight: None,
            rank_deadline: None,
        }
    }

    fn learned(a: &Matrix, b: &Matrix) -> EstimatorState {
        let mut st = EstimatorState::new(2, 1, 0.5, UpdateGain::Normalized).unwrap();
        st.theta_hat = theta_of(a, b).unwrap();
        st
    }

    #[test]
    fn mpc_step_before_learning_uses_initial_gain() {
        let cfg = config();
        let c = dmatrix![1.0, 0.0];
        let reference = ReferenceSignal::constant(&[1.0]);
        let ctx = StepContext { config: &cfg, c: &c, reference: &reference, previous: None };
        let x = Vector::from_column_slice(&[0.4, -0.2]);
        let st = learned(&dmatrix![0.0, 1.0; -1.0, -1.0], &dmatrix![0.0; 1.0]);
        for est in [None, Some(&st)] {
            let rep = mpc_step(&x, 0.5, est, &ctx).unwrap();
            assert_eq!(rep.source, SolveSource::Initial);
            assert!((rep.u_applied[0] - (-(1.5 * 0.4 - 0.5 * 0.2))).abs() < 1e-15);
        }
    }

    #[test]
    fn mpc_step_at_equilibrium_is_zero_and_within_bounds_otherwise() {
        let cfg = config();
        let c = dmatrix![1.0, 0.0];
        let st = learned(&dmatrix![0.0, 1.0; -1.0, -1.0], &dmatrix![0.0; 1.0]);
        let zero_ref = ReferenceSignal::constant(&[0.0]);
        let ctx = StepContext { config: &cfg, c: &c, reference: &zero_ref, previous: None };
        let rep = mpc_step(&Vector::zeros(2), 2.0, Some(&st), &ctx).unwrap();
        assert_eq!(rep.u_applied, Vector::zeros(1));
        assert_eq!(rep.relative_degree, 2);
        assert_eq!(rep.control_order, 4);

        let far = ReferenceSignal::constant(&[100.0]);
        let ctx = StepContext { reference: &far, ..ctx };
        let rep = mpc_step(&Vector::zeros(2), 2.0, Some(&st), &ctx).unwrap();
        assert_eq!(rep.source, SolveSource::Optimized);
        assert!(cfg.bounds.contains(&rep.u_applied));
        assert_eq!(rep.saturated, vec![true]);
        assert!(rep.cost_value >= 0.0);
    }

    #[test]
    fn mpc_step_falls_back_on_degenerate_predictor() {
        let mut cfg = config();
        cfg.r = dmatrix![0.0];
        cfg.relative_degree = RelativeDegree::Fixed(1);
        let c = dmatrix![1.0, 0.0];
        let reference = ReferenceSignal::constant(&[1.0]);
        let prev = Vector::from_element(1, 0.7);
        let ctx = StepContext { config: &cfg, c: &c, reference: &reference, previous: Some(&prev) };
        // C B̃ = 0 with ρ forced to 1 makes 𝓜 = 0.
        let st = learned(&dmatrix![0.0, 1.0; -1.0, -1.0], &dmatrix![0.0; 1.0]);
        let rep = mpc_step(&Vector::zeros(2), 2.0, Some(&st), &ctx).unwrap();
        assert!(rep.fallback());
        assert_eq!(rep.u_applied, prev);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = config();
        let text = toml::to_string(&cfg).unwrap();
        let back: ControllerConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let fixed = text.replace("relative_degree = \"auto\"", "relative_degree = 2");
        let back: ControllerConfig = toml::from_str(&fixed).unwrap();
        assert_eq!(back.relative_degree, RelativeDegree::Fixed(2));
        assert!(toml::from_str::<ControllerConfig>(&text.replace("\"auto\"", "\"sometimes\"")).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = config();
        assert!(cfg.validate(2, 1, 1).is_ok());
        assert!(cfg.validate(3, 1, 1).is_err());
        let mut bad = cfg.clone();
        bad.resolve_interval = 2.0;
        assert!(bad.validate(2, 1, 1).is_err());
        let mut bad = cfg;
        bad.relative_degree = RelativeDegree::Fixed(3);
        bad.control_order = Some(2);
        assert!(bad.validate(2, 1, 1).is_err());
    }

    #[test]
    fn value_monitor_zero_cost_equilibrium() {
        let mut traj = Trajectory::new(0.1).unwrap();
        for k in 0..3 {
            traj.push(crate::simulator::Sample {
                t: k as f64 * 0.1,
                x: Vector::zeros(1),
                u: Vector::zeros(1),
                y: Vector::zeros(1),
                y_d: Vector::zeros(1),
                stage_cost: 0.0,
            })
            .unwrap();
        }
        let solves: Vec<SolveReport> = (0..3)
            .map(|k| SolveReport {
                t: k as f64 * 0.1,
                u_bar_star: Vector::zeros(1),
                u_applied: Vector::zeros(1),
                cost_value: 0.0,
                m_condition: 1.0,
                saturated: vec![false],
                source: SolveSource::Optimized,
                relative_degree: 1,
                control_order: 1,
            })
            .collect();
        let points = value_monitor(&traj, &solves, &ReferenceSignal::constant(&[0.0]));
        assert_eq!(points.len(), 3);
        assert!(points.iter().all(|p| p.value == 0.0 && p.margin.unwrap_or(0.0) == 0.0));
        assert!(points.iter().all(|p| !p.across_switch));

        let mut buf = Vec::new();
        write_solves_csv(&solves, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,cost,cond_M,sat_mask,u1\n"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn saturate_is_idempotent_and_squash_is_interior(vals in proptest::collection::vec(-1e3f64..1e3, 2)) {
            let bounds = InputBounds::symmetric(&[80.0, 70.0]).unwrap();
            let u = Vector::from_vec(vals);
            let once = saturate(&u, &bounds);
            prop_assert_eq!(saturate(&once, &bounds), once.clone());
            prop_assert!(bounds.contains(&once));
            let s = squash(&(u / 100.0), &bounds);
            for i in 0..2 {
                prop_assert!(s[i] > bounds.lower()[i] && s[i] < bounds.upper()[i]);
            }
        }
    }
}
