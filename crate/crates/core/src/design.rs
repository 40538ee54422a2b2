//! Initial experimental designs: symmetric Latin hypercube, Latin hypercube,
//! and 2-factorial, with integer rounding and rank-deficiency regeneration.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Point, ProblemSpec};

/// How many fresh designs `realize` tries before giving up.
pub const REALIZE_RETRY_CAP: usize = 100;

/// Relative tolerance for the rank test (times the max column norm).
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignKind {
    Slhd,
    Lhd,
    Factorial2,
}

impl DesignKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slhd" => Some(DesignKind::Slhd),
            "lhd" => Some(DesignKind::Lhd),
            "factorial2" | "2-factorial" | "factorial" => Some(DesignKind::Factorial2),
            _ => None,
        }
    }
}

/// An n x d design in the unit hypercube.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Design {
    pub points: Vec<Vec<f64>>,
    pub kind: DesignKind,
}

/// Generate a design of `n` points in `[0,1]^d`.
///
/// For `Factorial2` the point count is fixed at `2^d` and `n` is ignored.
pub fn generate<R: Rng>(kind: DesignKind, n: usize, d: usize, rng: &mut R) -> Result<Design> {
    if d == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    let points = match kind {
        DesignKind::Factorial2 => {
            if d > 20 {
                return Err(Error::Config(format!(
                    "2-factorial design refused for d = {d} > 20 (2^d points)"
                )));
            }
            (0..1usize << d)
                .map(|mask| (0..d).map(|j| ((mask >> j) & 1) as f64).collect())
                .collect()
        }
        DesignKind::Lhd => {
            if n < 1 {
                return Err(Error::Config("LHD needs at least one point".into()));
            }
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
            for _ in 0..d {
                let mut levels: Vec<f64> = (1..=n).map(|i| (i as f64 - 0.5) / n as f64).collect();
                levels.shuffle(rng);
                cols.push(levels);
            }
            (0..n).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect()
        }
        DesignKind::Slhd => {
            if n < 1 {
                return Err(Error::Config("SLHD needs at least one point".into()));
            }
            slhd_levels(n, d, rng)
                .into_iter()
                .map(|row| row.into_iter().map(|l| (l as f64 - 0.5) / n as f64).collect())
                .collect()
        }
    };
    Ok(Design { points, kind })
}

/// Symmetric Latin hypercube on integer levels 1..=n. Row `i` pairs with row
/// `n-1-i`: their levels sum to `n+1` in every column, and each column is a
/// permutation of 1..=n.
fn slhd_levels<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut rows = vec![vec![0usize; d]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        row[0] = i + 1;
    }
    let half = n / 2;
    if n % 2 == 1 {
        for j in 0..d {
            rows[half][j] = half + 1; // center point is self-paired
        }
    }
    for j in 1..d {
        // pick one member of each symmetric level pair for the top half
        let mut top: Vec<usize> = (0..half)
            .map(|i| if rng.gen_bool(0.5) { i + 1 } else { n - i })
            .collect();
        top.shuffle(rng);
        for i in 0..half {
            rows[i][j] = top[i];
            rows[n - 1 - i][j] = n + 1 - top[i];
        }
    }
    rows
}

/// Rank of a matrix by column-pivoted QR with tolerance `RANK_TOL` times the
/// largest column norm.
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    let max_norm = (0..m.ncols())
        .map(|j| m.column(j).norm())
        .fold(0.0_f64, f64::max);
    if max_norm == 0.0 {
        return 0;
    }
    let tol = RANK_TOL * max_norm;
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    (0..k).filter(|&i| r[(i, i)].abs() > tol).count()
}

/// The linear-tail matrix `[1 | X]` of a set of unit-cube points.
pub fn tail_matrix(points: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            points[i][j - 1]
        }
    })
}

/// Check that `[1 | X]` has full column rank `d+1`. Only meaningful when
/// `n >= d+1`; smaller sets are vacuously accepted.
pub fn tail_full_rank(points: &[Vec<f64>], d: usize) -> bool {
    if points.len() < d + 1 {
        return true;
    }
    matrix_rank(&tail_matrix(points, d)) == d + 1
}

/// Scale a design to the problem domain, rounding integer coordinates. If the
/// rounded design has coinciding points or a rank-deficient linear tail, a
/// fresh design of the same kind is generated and re-checked.
pub fn realize<R: Rng>(
    design: &Design,
    problem: &ProblemSpec,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let d = problem.dim;
    if design.points.is_empty() || design.points[0].len() != d {
        return Err(Error::Config("design dimension does not match the problem".into()));
    }
    let n = design.points.len();
    let mut current = design.clone();
    for _ in 0..REALIZE_RETRY_CAP {
        let realized: Vec<Vec<f64>> =
            current.points.iter().map(|u| problem.from_unit(u)).collect();
        // work in unit coordinates of the rounded points for the checks
        let unit: Vec<Vec<f64>> = realized.iter().map(|x| problem.to_unit(x)).collect();
        let has_dup = (0..n).any(|i| {
            (i + 1..n).any(|k| {
                unit[i]
                    .iter()
                    .zip(&unit[k])
                    .all(|(a, b)| (a - b).abs() < 1e-12)
            })
        });
        if !has_dup && tail_full_rank(&unit, d) {
            return Ok(realized.into_iter().map(Point::new).collect());
        }
        current = generate(current.kind, n, d, rng)?;
    }
    Err(Error::DegenerateDesign(REALIZE_RETRY_CAP))
}
