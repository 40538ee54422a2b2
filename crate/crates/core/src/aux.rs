//! The auxiliary problem: candidate-point generation (SRBF, DYCORS,
//! uniform), weighted-distance merit selection, and the PI/EI/LCB
//! acquisition functions.
//!
//! All candidate machinery works in unit-hypercube coordinates; integer
//! coordinates are snapped onto their integer grid.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::problem::{round_half_away, ProblemSpec};

/// Candidate points per proposal, as a multiple of the dimension.
pub const CANDIDATES_PER_DIM: usize = 100;

/// Cyclic exploitation weight pattern.
pub const WEIGHT_PATTERN: [f64; 4] = [0.3, 0.5, 0.8, 0.95];

/// Minimum allowed distance between a proposal and the evaluated/pending
/// set, in unit-hypercube coordinates.
pub const RADIUS_TOL: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    Srbf,
    Dycors,
    Uniform,
}

/// A set of candidate points in the unit hypercube.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub omega: Vec<Vec<f64>>,
    pub generator: GeneratorKind,
}

/// Snap a unit-cube coordinate onto the problem grid: integer coordinates
/// are rounded in original units, continuous ones pass through.
fn snap_coord(problem: &ProblemSpec, i: usize, v: f64) -> f64 {
    if problem.is_integer(i) {
        let range = problem.upper[i] - problem.lower[i];
        let orig = problem.lower[i] + v * range;
        let rounded = round_half_away(orig).clamp(problem.lower[i], problem.upper[i]);
        (rounded - problem.lower[i]) / range
    } else {
        v
    }
}

/// Reflect a coordinate into [0, 1].
fn reflect_unit(mut v: f64) -> f64 {
    while !(0.0..=1.0).contains(&v) {
        if v < 0.0 {
            v = -v;
        } else {
            v = 2.0 - v;
        }
    }
    v
}

/// Per-coordinate perturbation standard deviation in unit coordinates.
/// Integer coordinates are perturbed by at least one grid unit.
fn coord_sigma(problem: &ProblemSpec, i: usize, sigma: f64) -> f64 {
    if problem.is_integer(i) {
        let range = problem.upper[i] - problem.lower[i];
        sigma.max(1.0 / range)
    } else {
        sigma
    }
}

fn normal_draw<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps rng consumption predictable
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normal perturbations of every coordinate around the best point.
pub fn gen_srbf<R: Rng>(
    x_best: &[f64],
    sigma: f64,
    problem: &ProblemSpec,
    rng: &mut R,
    count: usize,
) -> CandidateSet {
    let d = problem.dim;
    let omega = (0..count)
        .map(|_| {
            (0..d)
                .map(|i| {
                    let s = coord_sigma(problem, i, sigma);
                    let v = reflect_unit(x_best[i] + s * normal_draw(rng));
                    snap_coord(problem, i, v)
                })
                .collect()
        })
        .collect();
    CandidateSet { omega, generator: GeneratorKind::Srbf }
}

/// DYCORS coordinate-perturbation probability after `n` of `n_max`
/// evaluations with an `n0`-point initial design. The formula value is
/// clamped to `min(20/d, 1)` at `n = n0` and floored at `1/d` so some
/// perturbation always remains possible.
pub fn dycors_perturb_prob(n: usize, n0: usize, n_max: usize, d: usize) -> Result<f64> {
    if n_max <= n0 {
        return Err(Error::Config(format!(
            "DYCORS needs n_max > n0 (got n0 = {n0}, n_max = {n_max})"
        )));
    }
    let p_max = (20.0 / d as f64).min(1.0);
    if n <= n0 {
        return Ok(p_max);
    }
    let num = ((n - n0) as f64).ln();
    let den = ((n_max - n0) as f64).ln();
    let p = if den > 0.0 { p_max * (1.0 - num / den) } else { p_max };
    Ok(p.clamp(1.0 / d as f64, p_max))
}

/// DYCORS candidates: perturb each coordinate with a probability that decays
/// over the run; at least one coordinate is always perturbed.
#[allow(clippy::too_many_arguments)]
pub fn gen_dycors<R: Rng>(
    x_best: &[f64],
    sigma: f64,
    n: usize,
    n0: usize,
    n_max: usize,
    problem: &ProblemSpec,
    rng: &mut R,
    count: usize,
) -> Result<CandidateSet> {
    let d = problem.dim;
    let p = dycors_perturb_prob(n, n0, n_max, d)?;
    let omega = (0..count)
        .map(|_| {
            let mut mask: Vec<bool> = (0..d).map(|_| rng.gen::<f64>() < p).collect();
            if !mask.iter().any(|&b| b) {
                mask[rng.gen_range(0..d)] = true;
            }
            (0..d)
                .map(|i| {
                    if mask[i] {
                        let s = coord_sigma(problem, i, sigma);
                        let v = reflect_unit(x_best[i] + s * normal_draw(rng));
                        snap_coord(problem, i, v)
                    } else {
                        x_best[i]
                    }
                })
                .collect()
        })
        .collect();
    Ok(CandidateSet { omega, generator: GeneratorKind::Dycors })
}

/// Uniform candidates over the domain; integer coordinates uniform over
/// their integer range.
pub fn gen_uniform<R: Rng>(
    problem: &ProblemSpec,
    rng: &mut R,
    count: usize,
) -> CandidateSet {
    let d = problem.dim;
    let omega = (0..count)
        .map(|_| {
            (0..d)
                .map(|i| {
                    if problem.is_integer(i) {
                        let lo = problem.lower[i] as i64;
                        let hi = problem.upper[i] as i64;
                        let v = rng.gen_range(lo..=hi) as f64;
                        (v - problem.lower[i]) / (problem.upper[i] - problem.lower[i])
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect()
        })
        .collect();
    CandidateSet { omega, generator: GeneratorKind::Uniform }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn min_dist_to(x: &[f64], set: &[Vec<f64>]) -> f64 {
    set.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min)
}

/// Pick `num` candidates by the weighted-distance merit
/// `w*V^S + (1-w)*V^D`, one weight per pick. Already-picked candidates join
/// the evaluated set so later picks stay distance-aware. Candidates closer
/// than `dtol` to the evaluated set are excluded; if that excludes
/// everything, the candidate with maximal distance is taken instead.
///
/// Returns indices into `omega`. Ties break toward the lowest index.
pub fn select_candidates(
    omega: &[Vec<f64>],
    surrogate_values: &[f64],
    evaluated: &[Vec<f64>],
    weights: &[f64],
    num: usize,
    dtol: f64,
) -> Result<Vec<usize>> {
    if omega.is_empty() {
        return Err(Error::Config("empty candidate set".into()));
    }
    if omega.len() != surrogate_values.len() {
        return Err(Error::Config("candidate/value count mismatch".into()));
    }
    if evaluated.is_empty() {
        return Err(Error::Config("merit selection needs a nonempty evaluated set".into()));
    }
    let mut a: Vec<Vec<f64>> = evaluated.to_vec();
    let mut picked: Vec<usize> = Vec::with_capacity(num);
    for pick in 0..num.min(omega.len()) {
        let w = weights[pick % weights.len()];
        let delta: Vec<f64> = omega.iter().map(|x| min_dist_to(x, &a)).collect();
        let mut eligible: Vec<usize> = (0..omega.len())
            .filter(|i| !picked.contains(i) && delta[*i] >= dtol)
            .collect();
        if eligible.is_empty() {
            // fallback: most isolated unpicked candidate
            let best = (0..omega.len())
                .filter(|i| !picked.contains(i))
                .max_by(|&i, &j| delta[i].total_cmp(&delta[j]));
            match best {
                Some(i) => {
                    picked.push(i);
                    a.push(omega[i].clone());
                    continue;
                }
                None => break,
            }
        }
        let s_min = eligible.iter().map(|&i| surrogate_values[i]).fold(f64::INFINITY, f64::min);
        let s_max = eligible
            .iter()
            .map(|&i| surrogate_values[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let d_min = eligible.iter().map(|&i| delta[i]).fold(f64::INFINITY, f64::min);
        let d_max = eligible.iter().map(|&i| delta[i]).fold(f64::NEG_INFINITY, f64::max);
        eligible.sort_unstable();
        let mut best_idx = eligible[0];
        let mut best_merit = f64::INFINITY;
        for &i in &eligible {
            let vs = if s_max > s_min {
                (surrogate_values[i] - s_min) / (s_max - s_min)
            } else {
                1.0
            };
            let vd = if d_max > d_min {
                (d_max - delta[i]) / (d_max - d_min)
            } else {
                1.0
            };
            let merit = w * vs + (1.0 - w) * vd;
            if merit < best_merit {
                best_merit = merit;
                best_idx = i;
            }
        }
        picked.push(best_idx);
        a.push(omega[best_idx].clone());
    }
    Ok(picked)
}

/// Probability of improvement.
pub fn acq_pi(mean: f64, sd: f64, f_plus: f64, xi: f64) -> f64 {
    let gap = f_plus - mean - xi;
    if sd <= 0.0 {
        return if gap > 0.0 { 1.0 } else { 0.0 };
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.cdf(gap / sd)
}

/// Expected improvement; exactly 0 when the predictive deviation vanishes.
pub fn acq_ei(mean: f64, sd: f64, f_plus: f64, xi: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let gap = f_plus - mean - xi;
    let z = gap / sd;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (gap * normal.cdf(z) + sd * normal.pdf(z)).max(0.0)
}

/// Lower confidence bound (minimized by acquisition strategies).
pub fn acq_lcb(mean: f64, sd: f64, kappa: f64) -> f64 {
    mean - kappa * sd
}
