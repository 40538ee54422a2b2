//! Optimization-problem abstraction and analytic test problems.
//!
//! A problem is a box-bounded domain, an optional set of integer-valued
//! coordinates, and a deterministic objective. The shipped catalog holds
//! standard multimodal test functions with known global minima, optionally
//! translated by a seeded random shift so the optimum is not always at a
//! special point of the domain.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the original (problem) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Self {
        Point { coords }
    }
}

/// Analytic objective functions shipped with the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Sphere,
    Ackley,
    Rastrigin,
    Griewank,
    Levy,
    Schaffer,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Sphere => "sphere",
            ObjectiveKind::Ackley => "ackley",
            ObjectiveKind::Rastrigin => "rastrigin",
            ObjectiveKind::Griewank => "griewank",
            ObjectiveKind::Levy => "levy",
            ObjectiveKind::Schaffer => "schaffer",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sphere" => Some(ObjectiveKind::Sphere),
            "ackley" => Some(ObjectiveKind::Ackley),
            "rastrigin" => Some(ObjectiveKind::Rastrigin),
            "griewank" => Some(ObjectiveKind::Griewank),
            "levy" => Some(ObjectiveKind::Levy),
            "schaffer" => Some(ObjectiveKind::Schaffer),
            _ => None,
        }
    }

    /// Location of the global minimum of the unshifted function.
    fn base_optimum(self, dim: usize) -> Vec<f64> {
        match self {
            ObjectiveKind::Levy => vec![1.0; dim],
            _ => vec![0.0; dim],
        }
    }

    fn eval(self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match self {
            ObjectiveKind::Sphere => x.iter().map(|v| v * v).sum(),
            ObjectiveKind::Ackley => {
                let sum_sq: f64 = x.iter().map(|v| v * v).sum();
                let sum_cos: f64 = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum();
                -20.0 * (-0.2 * (sum_sq / d).sqrt()).exp() - (sum_cos / d).exp()
                    + 20.0
                    + std::f64::consts::E
            }
            ObjectiveKind::Rastrigin => {
                10.0 * d
                    + x.iter()
                        .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
                        .sum::<f64>()
            }
            ObjectiveKind::Griewank => {
                let sum: f64 = x.iter().map(|v| v * v / 4000.0).sum();
                let prod: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v / ((i as f64 + 1.0).sqrt())).cos())
                    .product();
                1.0 + sum - prod
            }
            ObjectiveKind::Levy => {
                let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
                let n = w.len();
                let pi = std::f64::consts::PI;
                let mut f = (pi * w[0]).sin().powi(2);
                for i in 0..n - 1 {
                    f += (w[i] - 1.0).powi(2) * (1.0 + 10.0 * (pi * w[i] + 1.0).sin().powi(2));
                }
                f += (w[n - 1] - 1.0).powi(2) * (1.0 + (2.0 * pi * w[n - 1]).sin().powi(2));
                f
            }
            ObjectiveKind::Schaffer => {
                fn g(a: f64, b: f64) -> f64 {
                    let ss = a * a + b * b;
                    0.5 + (ss.sqrt().sin().powi(2) - 0.5) / (1.0 + 0.001 * ss).powi(2)
                }
                if x.len() == 1 {
                    g(x[0], 0.0)
                } else {
                    x.windows(2).map(|w| g(w[0], w[1])).sum()
                }
            }
        }
    }
}

/// Dimension, box bounds, integer variables, and the objective of one problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Sorted coordinate indices that are integer-valued.
    pub int_indices: Vec<usize>,
    pub objective: ObjectiveKind,
    /// Offset applied before evaluating the base function; the global
    /// optimum sits at `base_optimum + offset`.
    offset: Vec<f64>,
    pub optimum_value: f64,
    pub optimum: Vec<f64>,
}

impl ProblemSpec {
    /// Construct a problem with explicit bounds and integer variables.
    pub fn new(
        name: impl Into<String>,
        objective: ObjectiveKind,
        lower: Vec<f64>,
        upper: Vec<f64>,
        int_indices: Vec<usize>,
    ) -> Result<Self> {
        let dim = lower.len();
        if dim == 0 || upper.len() != dim {
            return Err(Error::Config("bounds must be non-empty and of equal length".into()));
        }
        for i in 0..dim {
            if !(lower[i] < upper[i]) {
                return Err(Error::Config(format!(
                    "degenerate bounds at coordinate {i}: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        let mut int_indices = int_indices;
        int_indices.sort_unstable();
        int_indices.dedup();
        for &i in &int_indices {
            if i >= dim {
                return Err(Error::Config(format!("integer index {i} out of range for dim {dim}")));
            }
            if lower[i].fract() != 0.0 || upper[i].fract() != 0.0 {
                return Err(Error::Config(format!(
                    "integer coordinate {i} must have integer bounds"
                )));
            }
        }
        let optimum = objective.base_optimum(dim);
        Ok(ProblemSpec {
            name: name.into(),
            dim,
            lower,
            upper,
            int_indices,
            objective,
            offset: vec![0.0; dim],
            optimum_value: 0.0,
            optimum,
        })
    }

    /// Translate the optimum to a seeded random location in the interior of
    /// the domain (10% margin from each bound).
    pub fn with_shift_seed(mut self, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5073_4f54);
        let base = self.objective.base_optimum(self.dim);
        let mut target = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let range = self.upper[i] - self.lower[i];
            let lo = self.lower[i] + 0.1 * range;
            let hi = self.upper[i] - 0.1 * range;
            let mut t = rng.gen_range(lo..hi);
            if self.int_indices.binary_search(&i).is_ok() {
                t = round_half_away(t).clamp(self.lower[i], self.upper[i]);
            }
            target.push(t);
        }
        self.offset = target.iter().zip(&base).map(|(t, b)| t - b).collect();
        self.optimum = target;
        self
    }

    /// Check the `Point` invariants against this problem.
    pub fn validate(&self, x: &Point) -> Result<()> {
        if x.coords.len() != self.dim {
            return Err(Error::OutOfBounds(format!(
                "dimension mismatch: point has {} coords, problem dim is {}",
                x.coords.len(),
                self.dim
            )));
        }
        for i in 0..self.dim {
            let v = x.coords[i];
            if !(self.lower[i] <= v && v <= self.upper[i]) {
                return Err(Error::OutOfBounds(format!(
                    "coordinate {i} = {v} outside [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
            if self.int_indices.binary_search(&i).is_ok() && v.fract() != 0.0 {
                return Err(Error::OutOfBounds(format!("coordinate {i} = {v} is not integral")));
            }
        }
        Ok(())
    }

    /// Evaluate the objective. Out-of-bounds points are an error, never
    /// silently clamped.
    pub fn evaluate(&self, x: &Point) -> Result<f64> {
        self.validate(x)?;
        Ok(self.evaluate_unchecked(&x.coords))
    }

    pub(crate) fn evaluate_unchecked(&self, coords: &[f64]) -> f64 {
        let shifted: Vec<f64> =
            coords.iter().zip(&self.offset).map(|(x, o)| x - o).collect();
        self.objective.eval(&shifted)
    }

    /// Map original coordinates to the unit hypercube.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (x[i] - self.lower[i]) / (self.upper[i] - self.lower[i]))
            .collect()
    }

    /// Map unit-hypercube coordinates back to the original domain, rounding
    /// integer coordinates half-away-from-zero.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let v = self.lower[i] + u[i] * (self.upper[i] - self.lower[i]);
                if self.int_indices.binary_search(&i).is_ok() {
                    round_half_away(v).clamp(self.lower[i], self.upper[i])
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn is_integer(&self, i: usize) -> bool {
        self.int_indices.binary_search(&i).is_ok()
    }
}

/// Round half-away-from-zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Names of the shipped test problems.
pub fn catalog_names() -> &'static [&'static str] {
    &["sphere", "ackley", "rastrigin", "griewank", "levy", "schaffer"]
}

/// Look up a catalog problem by name at dimension `d` on `[-5, 5]^d`.
pub fn lookup(name: &str, dim: usize) -> Result<ProblemSpec> {
    let kind = ObjectiveKind::from_name(name)
        .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
    ProblemSpec::new(kind.name(), kind, vec![-5.0; dim], vec![5.0; dim], vec![])
}

/// The full catalog instantiated at dimension `d`.
pub fn problem_catalog(dim: usize) -> Vec<ProblemSpec> {
    catalog_names()
        .iter()
        .map(|n| lookup(n, dim).expect("catalog problems are well-formed"))
        .collect()
}
