//! Integral-window regression stack and parameter learning.
//!
//! Each window `[t − δt, t]` gives one linear identity `F = G Θ` with
//! `F = x(t) − x(t − δt)` and `G = [(𝒜 ⊗ Iₙ)ᵀ (ℬ ⊗ Iₙ)ᵀ]`, where `𝒜`, `ℬ` are
//! the window integrals of state and input. Because `G = zᵀ ⊗ Iₙ` with
//! `z = [𝒜; ℬ]`, the gram matrix factors as `𝔄 = (Σ z zᵀ) ⊗ Iₙ` and every
//! solve below runs in the `(n + m)`-dimensional reduced space.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{regressor, LtiModel, Matrix, ThetaVector, Vector};
use crate::simulator::{steps_in, window_integrals, Trajectory};

/// Default lower bound on `λ_min(𝔄)` for the excitation test.
pub const DEFAULT_D_LOWER: f64 = 1e-8;

/// Pivot ratio below which the gram is treated as singular.
const SINGULAR_RATIO: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub f: Vector,
    pub g: Matrix,
    pub t: f64,
    /// `[𝒜; ℬ]`, the window integrals `G` is built from.
    pub z: Vector,
}

#[derive(Debug, Clone)]
pub struct DataStack {
    samples: Vec<RegressionSample>,
    n: usize,
    m: usize,
    /// `Σ z zᵀ`; the full gram is this ⊗ `Iₙ`.
    reduced_gram: Matrix,
    /// `Σ z Fᵀ`, so that `Σ GᵀF = vec(crossᵀ)`.
    cross: Matrix,
    min_eig: f64,
    max_eig: f64,
}

impl DataStack {
    pub fn from_samples(samples: Vec<RegressionSample>, n: usize, m: usize) -> Result<Self> {
        let d = n + m;
        let mut reduced_gram = Matrix::zeros(d, d);
        let mut cross = Matrix::zeros(d, n);
        for s in &samples {
            if s.z.len() != d || s.f.len() != n {
                return Err(Error::dims("DataStack sample", format!("z: {d}, F: {n}"), format!("z: {}, F: {}", s.z.len(), s.f.len())));
            }
            reduced_gram.ger(1.0, &s.z, &s.z, 1.0);
            cross.ger(1.0, &s.z, &s.f, 1.0);
        }
        let eig = reduced_gram.clone().symmetric_eigen().eigenvalues;
        let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_eig = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            samples,
            n,
            m,
            reduced_gram,
            cross,
            min_eig,
            max_eig,
        })
    }

    pub fn samples(&self) -> &[RegressionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Full `(n² + nm)`-square gram `𝔄 = Σ GᵢᵀGᵢ`.
    pub fn gram(&self) -> Matrix {
        self.reduced_gram.kronecker(&Matrix::identity(self.n, self.n))
    }

    pub fn reduced_gram(&self) -> &Matrix {
        &self.reduced_gram
    }

    /// `Σ GᵢᵀFᵢ`.
    pub fn moment(&self) -> Vector {
        Vector::from_column_slice(self.cross.transpose().as_slice())
    }

    pub fn min_eig(&self) -> f64 {
        self.min_eig
    }

    pub fn max_eig(&self) -> f64 {
        self.max_eig
    }

    /// `𝔄 Θ`, computed as `vec(P Z)` with `P = [Ã B̃]`.
    fn gram_apply(&self, theta: &Vector) -> Vector {
        let p = Matrix::from_column_slice(self.n, self.n + self.m, theta.as_slice());
        Vector::from_column_slice((p * &self.reduced_gram).as_slice())
    }

    /// `√(Σ ‖Fᵢ − GᵢΘ‖²)`.
    pub fn residual(&self, theta: &ThetaVector) -> f64 {
        let p = Matrix::from_column_slice(self.n, self.n + self.m, theta.values().as_slice());
        self.samples
            .iter()
            .map(|s| (&s.f - &p * &s.z).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    fn reduced_cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let singular = || Error::NonIdentifiable { min_eig: self.min_eig };
        if self.samples.is_empty() || !(self.min_eig > SINGULAR_RATIO * self.max_eig) {
            return Err(singular());
        }
        Cholesky::new(self.reduced_gram.clone()).ok_or_else(singular)
    }
}

/// Regression sample for the window ending at `t`.
pub fn build_sample(traj: &Trajectory, t: f64, dt: f64) -> Result<RegressionSample> {
    let k = traj.index_of(t)?;
    let p = steps_in(dt, traj.step()).ok_or(Error::UnalignedWindow { time: t })?;
    let (ix, iu) = window_integrals(traj, t, dt)?;
    let s = traj.samples();
    let f = if k >= p && !(t < dt && !crate::simulator::same_time(t, dt)) {
        &s[k].x - &s[k - p].x
    } else {
        Vector::zeros(s[k].x.len())
    };
    let g = regressor(&ix, &iu);
    let mut z = Vector::zeros(ix.len() + iu.len());
    z.rows_mut(0, ix.len()).copy_from(&ix);
    z.rows_mut(ix.len(), iu.len()).copy_from(&iu);
    Ok(RegressionSample { f, g, t: s[k].t, z })
}

/// Stack of the `N_k + 1` windows ending at `t_k − i·δt`, `i = 0..=N_k`.
pub fn build_stack(traj: &Trajectory, t_k: f64, dt: f64, n_k: usize) -> Result<DataStack> {
    let k = traj.index_of(t_k)?;
    let p = steps_in(dt, traj.step()).ok_or(Error::UnalignedWindow { time: t_k })?;
    let first = &traj.samples()[0];
    if n_k * p > k {
        return Err(Error::InsufficientData {
            required: t_k - n_k as f64 * dt,
            available: first.t,
        });
    }
    let (n, m) = (first.x.len(), first.u.len());
    let samples = (0..=n_k)
        .map(|i| build_sample(traj, traj.samples()[k - i * p].t, dt))
        .collect::<Result<Vec<_>>>()?;
    DataStack::from_samples(samples, n, m)
}

/// Excitation test `λ_min(𝔄) > d_lower`.
pub fn rank_check(stack: &DataStack, d_lower: f64) -> bool {
    stack.min_eig() > d_lower
}

/// Drops samples whose `(F, G)` lie within `tol` (max-abs) of an earlier kept one.
pub fn dedup_samples(stack: &DataStack, tol: f64) -> DataStack {
    let mut kept: Vec<RegressionSample> = Vec::with_capacity(stack.len());
    for s in stack.samples() {
        let duplicate = kept
            .iter()
            .any(|k| (&k.f - &s.f).amax() <= tol && (&k.g - &s.g).amax() <= tol);
        if !duplicate {
            kept.push(s.clone());
        }
    }
    DataStack::from_samples(kept, stack.n(), stack.m()).expect("samples already validated")
}

/// Direct least-squares solution of `𝔄 Θ = Σ GᵀF`.
pub fn solve_theta_ls(stack: &DataStack) -> Result<ThetaVector> {
    let chol = stack.reduced_cholesky()?;
    let pt = chol.solve(&stack.cross);
    ThetaVector::new(
        Vector::from_column_slice(pt.transpose().as_slice()),
        stack.n(),
        stack.m(),
    )
}

/// `w = H(x, u)(Θ̂ − Θ)`.
pub fn approximation_error(theta_hat: &ThetaVector, theta: &ThetaVector, x: &Vector, u: &Vector) -> Result<Vector> {
    if theta_hat.len() != theta.len() || theta.n() != x.len() || theta.m() != u.len() {
        return Err(Error::dims(
            "approximation_error",
            format!("Θ for n = {}, m = {}", x.len(), u.len()),
            format!("Θ̂ len {}, Θ len {}", theta_hat.len(), theta.len()),
        ));
    }
    Ok(regressor(x, u) * (theta_hat.values() - theta.values()))
}

/// Largest `‖w‖` over every logged `(x, u)` of a trajectory.
pub fn max_approximation_error(traj: &Trajectory, theta_hat: &ThetaVector, truth: &LtiModel) -> Result<f64> {
    let theta = truth.theta();
    let mut worst: f64 = 0.0;
    for s in traj.samples() {
        worst = worst.max(approximation_error(theta_hat, &theta, &s.x, &s.u)?.norm());
    }
    Ok(worst)
}

/// Metric the update law descends in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateGain {
    /// `Θ̂ ← Θ̂ + η Σ Gᵢᵀ(Fᵢ − GᵢΘ̂)`: forward Euler of the gradient flow.
    Gradient,
    /// `Θ̂ ← Θ̂ + η 𝔄⁻¹ Σ Gᵢᵀ(Fᵢ − GᵢΘ̂)`: least-squares gain, rate independent of data scaling.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub theta_hat: ThetaVector,
    pub iteration: usize,
    pub residual: f64,
    pub eta: f64,
    pub gain: UpdateGain,
    /// False once an update ran with `η` outside the contraction range.
    pub contraction_ok: bool,
}

impl EstimatorState {
    pub fn new(n: usize, m: usize, eta: f64, gain: UpdateGain) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidScenario(format!("learning rate must be positive, got {eta}")));
        }
        Ok(Self {
            theta_hat: ThetaVector::zeros(n, m),
            iteration: 0,
            residual: f64::NAN,
            eta,
            gain,
            contraction_ok: true,
        })
    }

    /// `η · λ_max` of the iteration matrix; the update contracts iff this is `< 2`.
    pub fn contraction_factor(&self, stack: &DataStack) -> f64 {
        match self.gain {
            UpdateGain::Gradient => self.eta * stack.max_eig(),
            UpdateGain::Normalized => self.eta,
        }
    }
}

/// Runs `steps` discrete iterations of the update law on a fixed stack.
pub fn update_theta(state: &EstimatorState, stack: &DataStack, steps: usize) -> Result<EstimatorState> {
    if steps == 0 || stack.is_empty() {
        return Err(Error::InvalidScenario("update_theta needs steps ≥ 1 and a nonempty stack".into()));
    }
    if stack.n() != state.theta_hat.n() || stack.m() != state.theta_hat.m() {
        return Err(Error::dims(
            "update_theta",
            format!("n = {}, m = {}", state.theta_hat.n(), state.theta_hat.m()),
            format!("n = {}, m = {}", stack.n(), stack.m()),
        ));
    }
    let mut next = state.clone();
    let factor = state.contraction_factor(stack);
    if factor >= 2.0 {
        log::warn!("update law is not contractive (η·λ_max = {factor:.3} ≥ 2); lower η_θ");
        next.contraction_ok = false;
    }
    let moment = stack.moment();
    let chol = match state.gain {
        UpdateGain::Normalized => Some(stack.reduced_cholesky()?),
        UpdateGain::Gradient => None,
    };
    let (n, d) = (stack.n(), stack.n() + stack.m());
    for _ in 0..steps {
        let theta = next.theta_hat.values_mut();
        let grad = &moment - stack.gram_apply(theta);
        let direction = match &chol {
            None => grad,
            Some(chol) => {
                // 𝔄⁻¹ = Z⁻¹ ⊗ Iₙ acts as vec(R Z⁻¹) = vec((Z⁻¹ Rᵀ)ᵀ).
                let r = Matrix::from_column_slice(n, d, grad.as_slice());
                Vector::from_column_slice(chol.solve(&r.transpose()).transpose().as_slice())
            }
        };
        theta.axpy(state.eta, &direction, 1.0);
        next.iteration += 1;
        if !next.theta_hat.is_finite() {
            return Err(Error::EstimatorDivergence {
                iteration: next.iteration,
                eta: state.eta,
            });
        }
    }
    next.residual = stack.residual(&next.theta_hat);
    Ok(next)
}

/// One entry of the convergence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub iteration: usize,
    pub residual: f64,
    pub parameter_error: Option<f64>,
}
