//! Radial-basis-function interpolant with a polynomial tail.
//!
//! The coefficients solve the saddle-point system
//!
//! ```text
//!   [ 0   P^T ] [ c ]   [ 0  ]
//!   [ P   Phi ] [ l ] = [ fX ]
//! ```
//!
//! where `Phi_ij = phi(|x_i - x_j|) + eta*delta_ij` and `P_ij = pi_j(x_i)`.
//! The bordered matrix is LU-factorized with partial pivoting once the tail
//! matrix reaches full column rank; adding k points afterwards costs two
//! triangular solves plus a k x k trailing Cholesky update, O(k n^2) instead
//! of a fresh O(n^3) factorization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::matrix_rank;
use crate::error::{Error, Result};
use crate::problem::{Point, ProblemSpec};

/// Duplicate-point rejection threshold in unit coordinates.
pub const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// phi(r) = r, order 1
    Linear,
    /// phi(r) = r^3, order 2
    Cubic,
    /// phi(r) = r^2 log r, order 2, with phi(0) = 0
    ThinPlate,
}

impl KernelKind {
    pub fn phi(self, r: f64) -> f64 {
        match self {
            KernelKind::Linear => r,
            KernelKind::Cubic => r * r * r,
            KernelKind::ThinPlate => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * r.ln()
                }
            }
        }
    }

    pub fn order(self) -> usize {
        match self {
            KernelKind::Linear => 1,
            KernelKind::Cubic | KernelKind::ThinPlate => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Some(KernelKind::Linear),
            "cubic" => Some(KernelKind::Cubic),
            "tps" | "thin-plate" | "thinplate" => Some(KernelKind::ThinPlate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailKind {
    /// m = 1, degree 0
    Constant,
    /// m = d + 1, degree 1
    Linear,
}

impl TailKind {
    pub fn dim(self, d: usize) -> usize {
        match self {
            TailKind::Constant => 1,
            TailKind::Linear => d + 1,
        }
    }

    /// Degree of the tail polynomials.
    fn degree(self) -> usize {
        match self {
            TailKind::Constant => 0,
            TailKind::Linear => 1,
        }
    }

    fn basis(self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        if self == TailKind::Linear {
            out.extend_from_slice(x);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Factorization {
    /// Unit lower-triangular factor.
    lower: DMatrix<f64>,
    /// Upper-triangular factor.
    upper: DMatrix<f64>,
    /// Row permutation: position i holds original row `perm[i]`. Identity
    /// beyond the initial block (no pivoting on incremental adds).
    perm: Vec<usize>,
}

/// RBF interpolant over points stored in unit-hypercube coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbfSurrogate {
    kernel: KernelKind,
    tail: TailKind,
    dim: usize,
    eta: f64,
    x: Vec<Vec<f64>>,
    fx: Vec<f64>,
    fact: Option<Factorization>,
    lambda: Vec<f64>,
    c: Vec<f64>,
    /// Number of from-scratch factorizations performed (structural cost check).
    pub full_factorizations: usize,
}

impl RbfSurrogate {
    pub fn new(dim: usize, kernel: KernelKind, tail: TailKind) -> Result<Self> {
        if tail.degree() + 1 < kernel.order() {
            return Err(Error::Config(format!(
                "tail degree {} too low for kernel order {}",
                tail.degree(),
                kernel.order()
            )));
        }
        Ok(RbfSurrogate {
            kernel,
            tail,
            dim,
            eta: 0.0,
            x: Vec::new(),
            fx: Vec::new(),
            fact: None,
            lambda: Vec::new(),
            c: Vec::new(),
            full_factorizations: 0,
        })
    }

    /// Default configuration: cubic kernel with a linear tail.
    pub fn cubic_linear(dim: usize) -> Self {
        Self::new(dim, KernelKind::Cubic, TailKind::Linear).expect("valid combination")
    }

    /// Shift the kernel diagonal by `eta`. Must be set before the first
    /// factorization.
    pub fn regularize(&mut self, eta: f64) -> Result<()> {
        if self.fact.is_some() {
            return Err(Error::RegularizationFrozen);
        }
        if !(eta >= 0.0) {
            return Err(Error::Config("eta must be >= 0".into()));
        }
        self.eta = eta;
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn tail_dim(&self) -> usize {
        self.tail.dim(self.dim)
    }

    pub fn num_points(&self) -> usize {
        self.x.len()
    }

    pub fn is_ready(&self) -> bool {
        self.fact.is_some()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.fx
    }

    pub fn coefficients(&self) -> (&[f64], &[f64]) {
        (&self.lambda, &self.c)
    }

    fn phi_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.kernel.phi(r2.sqrt())
    }

    /// Add `k` new points with their values. Points are buffered until the
    /// tail matrix has full column rank; afterwards the factorization is
    /// updated incrementally.
    pub fn add_points(&mut self, new_x: &[Vec<f64>], new_f: &[f64]) -> Result<()> {
        if new_x.len() != new_f.len() {
            return Err(Error::Config("point/value count mismatch".into()));
        }
        for (p, &f) in new_x.iter().zip(new_f) {
            if p.len() != self.dim {
                return Err(Error::Config("point dimension mismatch".into()));
            }
            if !f.is_finite() {
                return Err(Error::NonFiniteValue);
            }
            if p.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
                return Err(Error::OutOfBounds("point outside the unit hypercube".into()));
            }
        }
        // reject duplicates against stored points and within the batch
        for (i, p) in new_x.iter().enumerate() {
            let dup_stored = self.x.iter().any(|q| max_coord_dist(p, q) < DUPLICATE_TOL);
            let dup_batch = new_x[..i]
                .iter()
                .any(|q| max_coord_dist(p, q) < DUPLICATE_TOL);
            if dup_stored || dup_batch {
                return Err(Error::DuplicatePoint(DUPLICATE_TOL));
            }
        }

        let k = new_x.len();
        if k == 0 {
            return Ok(());
        }

        if self.fact.is_some() {
            self.update_factorization(new_x)?;
            self.x.extend(new_x.iter().cloned());
            self.fx.extend_from_slice(new_f);
        } else {
            self.x.extend(new_x.iter().cloned());
            self.fx.extend_from_slice(new_f);
            let m = self.tail_dim();
            if self.x.len() >= m && matrix_rank(&self.p_matrix()) == m {
                self.initial_factorization()?;
            }
        }
        if self.fact.is_some() {
            self.refresh_coefficients();
        }
        Ok(())
    }

    /// Replace the stored values (points unchanged) and re-solve the
    /// coefficients against the existing factorization. Used to fit against
    /// transformed values, e.g. a median cap.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.x.len() {
            return Err(Error::Config("value count does not match stored points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue);
        }
        self.fx = values.to_vec();
        if self.fact.is_some() {
            self.refresh_coefficients();
        }
        Ok(())
    }

    /// Predicted value at `x` (unit coordinates).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if self.fact.is_none() {
            return Err(Error::NotReady);
        }
        let mut basis = Vec::with_capacity(self.tail_dim());
        self.tail.basis(x, &mut basis);
        let tail: f64 = basis.iter().zip(&self.c).map(|(b, c)| b * c).sum();
        let kernel: f64 = self
            .x
            .iter()
            .zip(&self.lambda)
            .map(|(xi, l)| l * self.phi_dist(x, xi))
            .sum();
        Ok(kernel + tail)
    }

    /// Drop all points and start over (used on restarts).
    pub fn reset(&mut self) {
        self.x.clear();
        self.fx.clear();
        self.fact = None;
        self.lambda.clear();
        self.c.clear();
    }

    fn p_matrix(&self) -> DMatrix<f64> {
        let m = self.tail_dim();
        let mut basis = Vec::with_capacity(m);
        DMatrix::from_fn(self.x.len(), m, |i, j| {
            self.tail.basis(&self.x[i], &mut basis);
            basis[j]
        })
    }

    /// Entry (i, j) of the bordered matrix at the current point set.
    fn bordered_entry(&self, i: usize, j: usize) -> f64 {
        let m = self.tail_dim();
        let mut basis = Vec::new();
        match (i < m, j < m) {
            (true, true) => 0.0,
            (true, false) => {
                self.tail.basis(&self.x[j - m], &mut basis);
                basis[i]
            }
            (false, true) => {
                self.tail.basis(&self.x[i - m], &mut basis);
                basis[j]
            }
            (false, false) => {
                let mut v = self.phi_dist(&self.x[i - m], &self.x[j - m]);
                if i == j {
                    v += self.eta;
                }
                v
            }
        }
    }

    fn initial_factorization(&mut self) -> Result<()> {
        let m = self.tail_dim();
        let s = m + self.x.len();
        let mut a = DMatrix::from_fn(s, s, |i, j| self.bordered_entry(i, j));
        let mut lower = DMatrix::identity(s, s);
        let mut perm: Vec<usize> = (0..s).collect();

        for col in 0..s {
            // partial pivoting
            let (pivot_row, pivot_abs) = (col..s)
                .map(|r| (r, a[(r, col)].abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            if pivot_abs == 0.0 {
                return Err(Error::Factorization("zero pivot in initial LU".into()));
            }
            if pivot_row != col {
                a.swap_rows(pivot_row, col);
                perm.swap(pivot_row, col);
                for j in 0..col {
                    let t = lower[(pivot_row, j)];
                    lower[(pivot_row, j)] = lower[(col, j)];
                    lower[(col, j)] = t;
                }
            }
            let pivot = a[(col, col)];
            for r in col + 1..s {
                let factor = a[(r, col)] / pivot;
                lower[(r, col)] = factor;
                if factor != 0.0 {
                    for j in col..s {
                        a[(r, j)] -= factor * a[(col, j)];
                    }
                }
            }
        }
        // a now holds U in its upper triangle
        for i in 0..s {
            for j in 0..i {
                a[(i, j)] = 0.0;
            }
        }
        self.fact = Some(Factorization { lower, upper: a, perm });
        self.full_factorizations += 1;
        Ok(())
    }

    fn update_factorization(&mut self, new_x: &[Vec<f64>]) -> Result<()> {
        let m = self.tail_dim();
        let n_old = self.x.len();
        let s_old = m + n_old;
        let k = new_x.len();
        let fact = self.fact.as_ref().expect("factorization exists");

        // border block B (s_old x k): tail rows then kernel rows
        let mut basis = Vec::new();
        let b = DMatrix::from_fn(s_old, k, |i, j| {
            if i < m {
                self.tail.basis(&new_x[j], &mut basis);
                basis[i]
            } else {
                self.phi_dist(&self.x[i - m], &new_x[j])
            }
        });

        // U12 = L11^{-1} (Pi^T B): forward solve with row-permuted B
        let mut u12 = DMatrix::from_fn(s_old, k, |i, j| b[(fact.perm[i], j)]);
        for col in 0..k {
            for i in 0..s_old {
                let mut v = u12[(i, col)];
                for j in 0..i {
                    v -= fact.lower[(i, j)] * u12[(j, col)];
                }
                u12[(i, col)] = v; // lower is unit triangular
            }
        }

        // L21 U11 = B^T  <=>  U11^T L21^T = B (forward solve, non-unit)
        let mut l21t = b.clone();
        for col in 0..k {
            for i in 0..s_old {
                let mut v = l21t[(i, col)];
                for j in 0..i {
                    v -= fact.upper[(j, i)] * l21t[(j, col)];
                }
                l21t[(i, col)] = v / fact.upper[(i, i)];
            }
        }

        // trailing Schur complement S = C - L21 U12, then its Cholesky
        let mut schur = DMatrix::from_fn(k, k, |i, j| {
            let mut v = self.phi_dist(&new_x[i], &new_x[j]);
            if i == j {
                v += self.eta;
            }
            v
        });
        for i in 0..k {
            for j in 0..k {
                let mut dot = 0.0;
                for t in 0..s_old {
                    dot += l21t[(t, i)] * u12[(t, j)];
                }
                schur[(i, j)] -= dot;
            }
        }
        let l22 = cholesky_in_place(schur).map_err(|d| {
            Error::Factorization(format!("trailing Cholesky breakdown (pivot {d:e})"))
        })?;

        // grow the stored factors
        let s_new = s_old + k;
        let fact = self.fact.as_mut().expect("factorization exists");
        let mut lower = DMatrix::identity(s_new, s_new);
        let mut upper = DMatrix::zeros(s_new, s_new);
        lower.view_mut((0, 0), (s_old, s_old)).copy_from(&fact.lower);
        upper.view_mut((0, 0), (s_old, s_old)).copy_from(&fact.upper);
        for i in 0..k {
            for j in 0..s_old {
                lower[(s_old + i, j)] = l21t[(j, i)];
                upper[(j, s_old + i)] = u12[(j, i)];
            }
            // keep the global lower factor unit-triangular:
            // L22 L22^T = (L22 D^-1)(D L22^T) with D = diag(L22)
            for j in 0..=i {
                lower[(s_old + i, s_old + j)] = l22[(i, j)] / l22[(j, j)];
                upper[(s_old + j, s_old + i)] = l22[(j, j)] * l22[(i, j)];
            }
        }
        fact.lower = lower;
        fact.upper = upper;
        fact.perm.extend(s_old..s_new);
        Ok(())
    }

    fn refresh_coefficients(&mut self) {
        let fact = self.fact.as_ref().expect("factorization exists");
        let m = self.tail_dim();
        let n = self.x.len();
        let s = m + n;
        // rhs = [0_m; fX], permuted
        let mut y = vec![0.0; s];
        for i in 0..s {
            let orig = fact.perm[i];
            y[i] = if orig < m { 0.0 } else { self.fx[orig - m] };
        }
        // forward: L z = y (unit lower)
        for i in 0..s {
            let mut v = y[i];
            for j in 0..i {
                v -= fact.lower[(i, j)] * y[j];
            }
            y[i] = v;
        }
        // backward: U sol = z
        for i in (0..s).rev() {
            let mut v = y[i];
            for j in i + 1..s {
                v -= fact.upper[(i, j)] * y[j];
            }
            y[i] = v / fact.upper[(i, i)];
        }
        self.c = y[..m].to_vec();
        self.lambda = y[m..].to_vec();
    }
}

fn max_coord_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Plain Cholesky (lower factor) of a small symmetric matrix; errors on a
/// non-positive pivot.
fn cholesky_in_place(mut a: DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    let k = a.nrows();
    for j in 0..k {
        let mut d = a[(j, j)];
        for t in 0..j {
            d -= a[(j, t)] * a[(j, t)];
        }
        if d <= 0.0 {
            return Err(d);
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..k {
            let mut v = a[(i, j)];
            for t in 0..j {
                v -= a[(i, t)] * a[(j, t)];
            }
            a[(i, j)] = v / d;
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            a[(i, j)] = 0.0;
        }
    }
    Ok(a)
}

/// Surrogate view that rescales between a problem domain and the unit
/// hypercube: callers work in original coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescaledSurrogate {
    pub inner: RbfSurrogate,
    problem: ProblemSpec,
}

impl RescaledSurrogate {
    pub fn new(inner: RbfSurrogate, problem: ProblemSpec) -> Self {
        RescaledSurrogate { inner, problem }
    }

    pub fn add_points(&mut self, points: &[Point], values: &[f64]) -> Result<()> {
        let unit: Vec<Vec<f64>> = points
            .iter()
            .map(|p| self.problem.to_unit(&p.coords))
            .collect();
        self.inner.add_points(&unit, values)
    }

    pub fn predict(&self, x: &Point) -> Result<f64> {
        self.inner.predict(&self.problem.to_unit(&x.coords))
    }
}

/// Cap every value above the median at the median. The median of an even
/// count is the midpoint of the two central order statistics.
pub fn median_cap(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    values.iter().map(|&v| v.min(median)).collect()
}
