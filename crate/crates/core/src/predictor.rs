//! Taylor-series output prediction over the horizon.
//!
//! With relative degree `ρ` and control order `r`, the output is expanded as
//! `ŷ(t + τ) = T₁(τ) Y₁ + T₂(τ) Y₂` where `Y₁` stacks the derivatives
//! `y, …, y^[ρ−1]` (input-free) and `Y₂` stacks `y^[ρ], …, y^[r]`, which are
//! affine in the input-derivative vector `ū = [u; u^[1]; …; u^[r−ρ]]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Matrix, Vector};
use crate::simulator::ReferenceSignal;

/// Lifted prediction matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// Rows `C Ãⁱ`, `i = 0..ρ−1`.
    pub a1: Matrix,
    /// Disturbance chain into `Y₁`; columns are the first `ρ` blocks of `w̄`.
    pub b1: Matrix,
    /// Rows `C Ãʲ`, `j = ρ..r`.
    pub a2: Matrix,
    /// Disturbance chain into `Y₂`; columns are the `r + 1` blocks of `w̄`.
    pub b2: Matrix,
    /// Block lower-triangular, block `(i, j) = C Ã^(ρ−1+i−j) B̃` for `i ≥ j`.
    pub b3: Matrix,
    pub rho: usize,
    pub r: usize,
    pub n: usize,
    pub m: usize,
    pub q: usize,
}

impl PredictionBundle {
    /// Number of input-derivative blocks in `ū`.
    pub fn input_blocks(&self) -> usize {
        self.r - self.rho + 1
    }

    pub fn decision_len(&self) -> usize {
        self.input_blocks() * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostIntegrals {
    pub t11: Matrix,
    pub t12: Matrix,
    pub t22: Matrix,
    /// Input-basis gram over the full basis `k = 0..r`; the leading
    /// `(r − ρ + 1)m` block is the part `ū` actually spans.
    pub tu: Matrix,
    pub horizon: f64,
    pub rho: usize,
    pub r: usize,
}

impl CostIntegrals {
    /// `𝒯ᵤ` restricted to the decision variable.
    pub fn tu_decision(&self, m: usize) -> Matrix {
        let len = (self.r - self.rho + 1) * m;
        self.tu.view((0, 0), (len, len)).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedReference {
    pub y1d: Vector,
    pub y2d: Vector,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

fn monomials(tau: f64, from: usize, to: usize) -> Matrix {
    Matrix::from_fn(1, to + 1 - from, |_, j| {
        let k = from + j;
        tau.powi(k as i32) / factorial(k)
    })
}

fn check_orders(rho: usize, r: usize) -> Result<()> {
    if rho == 0 || r < rho {
        return Err(Error::InvalidScenario(format!(
            "need control order r ≥ relative degree ρ ≥ 1, got ρ = {rho}, r = {r}"
        )));
    }
    Ok(())
}

/// `T₁(τ) = [1, τ, …, τ^(ρ−1)/(ρ−1)!] ⊗ I` and `T₂(τ) = [τ^ρ/ρ!, …, τ^r/r!] ⊗ I`.
pub fn taylor_basis(tau: f64, rho: usize, r: usize, block_dim: usize) -> Result<(Matrix, Matrix)> {
    check_orders(rho, r)?;
    let eye = Matrix::identity(block_dim, block_dim);
    Ok((
        monomials(tau, 0, rho - 1).kronecker(&eye),
        monomials(tau, rho, r).kronecker(&eye),
    ))
}

/// Input reconstruction basis `[1, τ, …, τ^(L−1)/(L−1)!] ⊗ I_m` for `L` blocks.
pub fn input_basis(tau: f64, blocks: usize, m: usize) -> Matrix {
    monomials(tau, 0, blocks - 1).kronecker(&Matrix::identity(m, m))
}

fn powers(a: &Matrix, max: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(max + 1);
    out.push(Matrix::identity(a.nrows(), a.nrows()));
    for k in 1..=max {
        let next = &out[k - 1] * a;
        out.push(next);
    }
    out
}

pub fn prediction_matrices(a: &Matrix, b: &Matrix, c: &Matrix, rho: usize, r: usize) -> Result<PredictionBundle> {
    check_orders(rho, r)?;
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::dims(
            "prediction_matrices",
            "A n×n, B n×m, C q×n",
            format!("A {}×{}, B {}×{}, C {}×{}", a.nrows(), a.ncols(), b.nrows(), b.ncols(), c.nrows(), c.ncols()),
        ));
    }
    let (m, q) = (b.ncols(), c.nrows());
    let ca: Vec<Matrix> = powers(a, r).iter().map(|p| c * p).collect();
    let blocks = r - rho + 1;

    let mut a1 = Matrix::zeros(rho * q, n);
    let mut b1 = Matrix::zeros(rho * q, rho * n);
    for i in 0..rho {
        a1.view_mut((i * q, 0), (q, n)).copy_from(&ca[i]);
        for k in 0..i {
            b1.view_mut((i * q, k * n), (q, n)).copy_from(&ca[i - 1 - k]);
        }
    }

    let mut a2 = Matrix::zeros(blocks * q, n);
    let mut b2 = Matrix::zeros(blocks * q, (r + 1) * n);
    let mut b3 = Matrix::zeros(blocks * q, blocks * m);
    for i in 0..blocks {
        let j = rho + i;
        a2.view_mut((i * q, 0), (q, n)).copy_from(&ca[j]);
        for k in 0..j {
            b2.view_mut((i * q, k * n), (q, n)).copy_from(&ca[j - 1 - k]);
        }
        for k in 0..=i {
            let block = &ca[rho - 1 + i - k] * b;
            b3.view_mut((i * q, k * m), (q, m)).copy_from(&block);
        }
    }

    Ok(PredictionBundle {
        a1,
        b1,
        a2,
        b2,
        b3,
        rho,
        r,
        n,
        m,
        q,
    })
}

fn ensure_symmetric(w: &Matrix, what: &'static str, kind: &'static str) -> Result<()> {
    let scale = 1.0 + w.amax();
    if !w.is_square() || (w - w.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotDefinite { what, kind });
    }
    Ok(())
}

/// Gram of the scalar monomial basis: `∫₀ᵀ τ^(a+b) / (a! b!) dτ`.
fn monomial_gram(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, horizon: f64) -> Matrix {
    let (r0, c0) = (*rows.start(), *cols.start());
    Matrix::from_fn(rows.count(), cols.count(), |i, j| {
        let (a, b) = (r0 + i, c0 + j);
        let p = (a + b + 1) as f64;
        horizon.powi((a + b + 1) as i32) / (factorial(a) * factorial(b) * p)
    })
}

/// Closed-form cost integrals. `terminal`, when given, is a `q × q` weight on
/// `ŷ(T) − y_d` added to the output blocks.
pub fn cost_integrals(
    q_weight: &Matrix,
    r_weight: &Matrix,
    horizon: f64,
    rho: usize,
    r: usize,
    terminal: Option<&Matrix>,
) -> Result<CostIntegrals> {
    check_orders(rho, r)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidScenario(format!("horizon must be positive, got {horizon}")));
    }
    ensure_symmetric(q_weight, "Q", "definite")?;
    if q_weight.clone().cholesky().is_none() {
        return Err(Error::NotDefinite { what: "Q", kind: "definite" });
    }
    ensure_symmetric(r_weight, "R", "semidefinite")?;
    let r_min = r_weight.clone().symmetric_eigen().eigenvalues.min();
    if r_min < -1e-12 * (1.0 + r_weight.amax()) {
        return Err(Error::NotDefinite { what: "R", kind: "semidefinite" });
    }

    let mut t11 = monomial_gram(0..=rho - 1, 0..=rho - 1, horizon).kronecker(q_weight);
    let mut t12 = monomial_gram(0..=rho - 1, rho..=r, horizon).kronecker(q_weight);
    let mut t22 = monomial_gram(rho..=r, rho..=r, horizon).kronecker(q_weight);
    let tu = monomial_gram(0..=r, 0..=r, horizon).kronecker(r_weight);

    if let Some(p) = terminal {
        ensure_symmetric(p, "terminal weight", "semidefinite")?;
        if p.nrows() != q_weight.nrows() {
            return Err(Error::dims("terminal weight", q_weight.nrows(), p.nrows()));
        }
        let (e1, e2) = taylor_basis(horizon, rho, r, p.nrows())?;
        t11 += e1.transpose() * p * &e1;
        t12 += e1.transpose() * p * &e2;
        t22 += e2.transpose() * p * &e2;
    }

    Ok(CostIntegrals {
        t11,
        t12,
        t22,
        tu,
        horizon,
        rho,
        r,
    })
}

/// `𝒯₂₁ = ∫ Ξ₂ᵀ Ξ₁ dτ`, computed independently of `𝒯₁₂`.
pub fn cost_integral_21(q_weight: &Matrix, horizon: f64, rho: usize, r: usize) -> Result<Matrix> {
    check_orders(rho, r)?;
    Ok(monomial_gram(rho..=r, 0..=rho - 1, horizon).kronecker(q_weight))
}

/// Piecewise-constant references have every derivative block equal to zero.
pub fn lift_reference(reference: &ReferenceSignal, t: f64, rho: usize, r: usize) -> Result<LiftedReference> {
    check_orders(rho, r)?;
    let yd = reference.at(t);
    let q = yd.len();
    let mut y1d = Vector::zeros(rho * q);
    y1d.rows_mut(0, q).copy_from(&yd);
    Ok(LiftedReference {
        y1d,
        y2d: Vector::zeros((r - rho + 1) * q),
    })
}

/// Nominal prediction `ŷ(t + τ)` with `w ≡ 0`.
pub fn predict_output(bundle: &PredictionBundle, x: &Vector, u_bar: &Vector, tau: f64) -> Result<Vector> {
    if x.len() != bundle.n || u_bar.len() != bundle.decision_len() {
        return Err(Error::dims(
            "predict_output",
            format!("x: {}, ū: {}", bundle.n, bundle.decision_len()),
            format!("x: {}, ū: {}", x.len(), u_bar.len()),
        ));
    }
    let (t1, t2) = taylor_basis(tau, bundle.rho, bundle.r, bundle.q)?;
    let y1 = &bundle.a1 * x;
    let y2 = &bundle.a2 * x + &bundle.b3 * u_bar;
    Ok(t1 * y1 + t2 * y2)
}
