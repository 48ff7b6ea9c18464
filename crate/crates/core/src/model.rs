//! Plant representation, parameter vectorization and the linear regressor
//! that rewrites `ẋ = A x + B u` as `ẋ = H(x, u) Θ`.
//!
//! The vectorization is column-major: `vec(P) = [p11, p21, …, pn1, p12, …]`.
//! Everything downstream (data stack, parameter unstacking) relies on this
//! ordering, which is also nalgebra's native storage order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative tolerance for deciding that a Markov parameter is nonzero.
pub const MARKOV_ZERO_TOL: f64 = 1e-9;

/// Continuous-time LTI plant `ẋ = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LtiModelRepr", into = "LtiModelRepr")]
pub struct LtiModel {
    a: Matrix,
    b: Matrix,
    c: Matrix,
}

#[derive(Serialize, Deserialize)]
struct LtiModelRepr {
    #[serde(with = "rows")]
    a: Matrix,
    #[serde(with = "rows")]
    b: Matrix,
    #[serde(with = "rows")]
    c: Matrix,
}

impl TryFrom<LtiModelRepr> for LtiModel {
    type Error = Error;

    fn try_from(r: LtiModelRepr) -> Result<Self> {
        Self::new(r.a, r.b, r.c)
    }
}

impl From<LtiModel> for LtiModelRepr {
    fn from(m: LtiModel) -> Self {
        Self { a: m.a, b: m.b, c: m.c }
    }
}

impl LtiModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dims("LtiModel A", "square n×n, n ≥ 1", shape(&a)));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dims("LtiModel B", format!("{n}×m"), shape(&b)));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dims("LtiModel C", format!("q×{n}"), shape(&c)));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn theta(&self) -> ThetaVector {
        theta_of(&self.a, &self.b).expect("dimensions validated at construction")
    }

    /// Same plant with the dynamics replaced by those encoded in `theta`.
    pub fn with_theta(&self, theta: &ThetaVector) -> Result<Self> {
        let (a, b) = dynamics_from_theta(theta)?;
        Self::new(a, b, self.c.clone())
    }

    pub fn controllability_matrix(&self) -> Matrix {
        let (n, m) = (self.n(), self.m());
        let mut out = Matrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        out
    }

    pub fn observability_matrix(&self) -> Matrix {
        let (n, q) = (self.n(), self.q());
        let mut out = Matrix::zeros(n * q, n);
        let mut block = self.c.clone();
        for k in 0..n {
            out.view_mut((k * q, 0), (q, n)).copy_from(&block);
            block *= &self.a;
        }
        out
    }

    pub fn is_controllable(&self) -> bool {
        numerical_rank(&self.controllability_matrix()) == self.n()
    }

    pub fn is_observable(&self) -> bool {
        numerical_rank(&self.observability_matrix()) == self.n()
    }

    /// True when `A − B K` has every eigenvalue in the open left half plane.
    pub fn is_stabilized_by(&self, k: &Matrix) -> bool {
        if k.nrows() != self.m() || k.ncols() != self.n() {
            return false;
        }
        is_hurwitz(&(&self.a - &self.b * k))
    }

    /// Checks the optional entry bounds `|A| ≤ a_max`, `|B| ≤ b_max`.
    pub fn within_entry_bounds(&self, a_max: f64, b_max: f64) -> bool {
        self.a.amax() <= a_max && self.b.amax() <= b_max
    }
}

/// Stacked parameter vector `Θ = [vec(A); vec(B)]` of length `n² + nm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    values: Vector,
    n: usize,
    m: usize,
}

impl ThetaVector {
    pub fn new(values: Vector, n: usize, m: usize) -> Result<Self> {
        let expected = n * n + n * m;
        if values.len() != expected {
            return Err(Error::dims("ThetaVector", expected, values.len()));
        }
        Ok(Self { values, n, m })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            values: Vector::zeros(n * n + n * m),
            n,
            m,
        }
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Vector {
        &mut self.values
    }

    pub fn into_values(self) -> Vector {
        self.values
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `‖Θ̂ − Θ‖ / ‖Θ‖` (Euclidean, i.e. the Frobenius error of `(Ã, B̃)`).
    pub fn relative_error(&self, truth: &ThetaVector) -> f64 {
        (&self.values - &truth.values).norm() / truth.values.norm()
    }
}

/// Box constraint `lower ≤ u ≤ upper` with the origin strictly inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundsRepr", into = "BoundsRepr")]
pub struct InputBounds {
    lower: Vector,
    upper: Vector,
}

#[derive(Serialize, Deserialize)]
struct BoundsRepr {
    #[serde(with = "list")]
    lower: Vector,
    #[serde(with = "list")]
    upper: Vector,
}

impl TryFrom<BoundsRepr> for InputBounds {
    type Error = Error;

    fn try_from(r: BoundsRepr) -> Result<Self> {
        Self::new(r.lower, r.upper)
    }
}

impl From<InputBounds> for BoundsRepr {
    fn from(b: InputBounds) -> Self {
        Self { lower: b.lower, upper: b.upper }
    }
}

impl InputBounds {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidBounds(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            let (lo, hi) = (lower[i], upper[i]);
            if !(lo < hi) || lo > 0.0 || hi < 0.0 {
                return Err(Error::InvalidBounds(format!(
                    "channel {i}: need lower ≤ 0 ≤ upper and lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric bounds `|u_i| ≤ limit_i`.
    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        let upper = Vector::from_column_slice(limits);
        Self::new(-&upper, upper)
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &Vector) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

/// Serde adapter writing a matrix as a list of rows.
pub mod rows {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    use super::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have unequal lengths"));
        }
        Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    /// Same as the parent module for an optional matrix.
    pub mod option {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        use super::super::Matrix;

        #[derive(Serialize, Deserialize)]
        struct Wrap(#[serde(with = "super")] Matrix);

        pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
            m.clone().map(Wrap).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// Serde adapter writing a vector as a flat list.
pub mod list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Column-major vectorization.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, n: usize, l: usize) -> Result<Matrix> {
    if v.len() != n * l {
        return Err(Error::dims("unvec", format!("{n}·{l} = {}", n * l), v.len()));
    }
    Ok(Matrix::from_column_slice(n, l, v.as_slice()))
}

/// `H(x, u) = [(x ⊗ Iₙ)ᵀ (u ⊗ Iₙ)ᵀ]`, an `n × (n² + nm)` matrix.
pub fn regressor(x: &Vector, u: &Vector) -> Matrix {
    let (n, m) = (x.len(), u.len());
    let mut h = Matrix::zeros(n, n * n + n * m);
    for i in 0..n {
        for j in 0..n {
            h[(i, j * n + i)] = x[j];
        }
        for j in 0..m {
            h[(i, n * n + j * n + i)] = u[j];
        }
    }
    h
}

pub fn theta_of(a: &Matrix, b: &Matrix) -> Result<ThetaVector> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims("theta_of A", "square", shape(a)));
    }
    if b.nrows() != n {
        return Err(Error::dims("theta_of B rows", n, b.nrows()));
    }
    let m = b.ncols();
    let mut values = Vector::zeros(n * n + n * m);
    values.rows_mut(0, n * n).copy_from_slice(a.as_slice());
    values.rows_mut(n * n, n * m).copy_from_slice(b.as_slice());
    Ok(ThetaVector { values, n, m })
}

pub fn dynamics_from_theta(theta: &ThetaVector) -> Result<(Matrix, Matrix)> {
    let (n, m) = (theta.n, theta.m);
    if theta.values.len() != n * n + n * m {
        return Err(Error::dims("dynamics_from_theta", n * n + n * m, theta.values.len()));
    }
    let a = Matrix::from_column_slice(n, n, &theta.values.as_slice()[..n * n]);
    let b = Matrix::from_column_slice(n, m, &theta.values.as_slice()[n * n..]);
    Ok((a, b))
}

/// Smallest `ρ ≥ 1` with `C A^(ρ−1) B ≠ 0`.
pub fn relative_degree(model: &LtiModel) -> Result<usize> {
    relative_degree_of(model.a(), model.b(), model.c(), MARKOV_ZERO_TOL)
}

/// Relative degree of an arbitrary triple; a Markov parameter counts as nonzero
/// when its max-abs entry exceeds `rel_tol · (1 + ‖C‖·‖B‖)`.
pub fn relative_degree_of(a: &Matrix, b: &Matrix, c: &Matrix, rel_tol: f64) -> Result<usize> {
    let n = a.nrows();
    let threshold = rel_tol * (1.0 + c.norm() * b.norm());
    let mut ak_b = b.clone();
    for k in 1..=n {
        let markov = c * &ak_b;
        if markov.amax() > threshold {
            return Ok(k);
        }
        ak_b = a * ak_b;
    }
    Err(Error::UndefinedRelativeDegree { max_order: n })
}

pub fn is_hurwitz(a: &Matrix) -> bool {
    a.complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

pub(crate) fn numerical_rank(m: &Matrix) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|s| **s > tol).count()
}

pub(crate) fn shape(m: &Matrix) -> String {
    format!("{}×{}", m.nrows(), m.ncols())
}
