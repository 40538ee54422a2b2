//! Gaussian-process regression with a squared-exponential kernel and a
//! constant mean, fit by maximizing the log marginal likelihood over a
//! log-space box with multi-start projected gradient ascent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of random restarts for the hyper-parameter search.
pub const FIT_MULTISTARTS: usize = 10;

/// Gradient-ascent iterations per start.
const FIT_ITERS: usize = 60;

/// Conditioning floor on the noise variance.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Hyper-parameters of the squared-exponential kernel plus noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpParams {
    /// Isotropic length-scale.
    pub ell: f64,
    /// Signal variance s_f^2.
    pub sf2: f64,
    /// Noise variance sigma^2.
    pub sn2: f64,
}

/// A fitted GP posterior: cached Cholesky of `K + sn2*I` and
/// `alpha = (K + sn2*I)^{-1} (y - mu)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    pub mu: f64,
    pub params: GpParams,
    chol_lower: DMatrix<f64>,
    alpha: DVector<f64>,
    /// Factorizations performed while building this model (structural check:
    /// prediction never adds to it).
    pub factorizations: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_matrix(x: &[Vec<f64>], p: &GpParams) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = p.sf2 * (-0.5 * sq_dist(&x[i], &x[j]) / (p.ell * p.ell)).exp();
        if i == j {
            k + p.sn2
        } else {
            k
        }
    })
}

/// Log marginal likelihood and its gradient with respect to
/// `(log ell, log sf2, log sn2)` at fixed constant mean `mu`.
/// Returns `None` when the Cholesky factorization fails.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y: &[f64],
    mu: f64,
    p: &GpParams,
) -> Option<(f64, [f64; 3])> {
    let n = x.len();
    let kt = kernel_matrix(x, p);
    let chol = kt.clone().cholesky()?;
    let resid = DVector::from_fn(n, |i, _| y[i] - mu);
    let alpha = chol.solve(&resid);
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
    let ll = -0.5
        * (resid.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln());

    // gradient: dL/dt = 0.5 * tr((alpha alpha^T - K^-1) dK/dt)
    let kinv = chol.inverse();
    let mut grad = [0.0; 3];
    for (g, idx) in grad.iter_mut().zip(0..3) {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r2 = sq_dist(&x[i], &x[j]);
                let ks = p.sf2 * (-0.5 * r2 / (p.ell * p.ell)).exp();
                let dk = match idx {
                    0 => ks * r2 / (p.ell * p.ell), // d/d log ell
                    1 => ks,                        // d/d log sf2
                    _ => {
                        if i == j {
                            p.sn2
                        } else {
                            0.0
                        }
                    } // d/d log sn2
                };
                acc += (alpha[i] * alpha[j] - kinv[(i, j)]) * dk;
            }
        }
        *g = 0.5 * acc;
    }
    Some((ll, grad))
}

/// Hyper-parameter search box in log space.
#[derive(Debug, Clone, Copy)]
struct FitBox {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl FitBox {
    fn for_data(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(1e-6);
        FitBox {
            lo: [1e-2_f64.ln(), (1e-3 * var).ln(), NOISE_FLOOR.ln()],
            hi: [2.0_f64.ln(), (10.0 * var).ln(), (1e-2 * var).max(10.0 * NOISE_FLOOR).ln()],
        }
    }

    fn clamp(&self, t: &mut [f64; 3]) {
        for i in 0..3 {
            t[i] = t[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn params(t: &[f64; 3]) -> GpParams {
        GpParams { ell: t[0].exp(), sf2: t[1].exp(), sn2: t[2].exp() }
    }
}

impl GpModel {
    /// Build a posterior at fixed hyper-parameters.
    pub fn with_params(x: Vec<Vec<f64>>, y: Vec<f64>, params: GpParams) -> Result<Self> {
        if x.len() < 1 || x.len() != y.len() {
            return Err(Error::Config("GP needs matching non-empty data".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue);
        }
        let n = x.len();
        let mu = y.iter().sum::<f64>() / n as f64;
        let mut p = params;
        let mut factorizations = 0u64;
        // raise the noise floor until the factorization succeeds
        for _ in 0..20 {
            factorizations += 1;
            if let Some(chol) = kernel_matrix(&x, &p).cholesky() {
                let resid = DVector::from_fn(n, |i, _| y[i] - mu);
                let alpha = chol.solve(&resid);
                return Ok(GpModel {
                    x,
                    y,
                    mu,
                    params: p,
                    chol_lower: chol.l(),
                    alpha,
                    factorizations,
                });
            }
            p.sn2 = (p.sn2 * 10.0).max(NOISE_FLOOR);
        }
        Err(Error::Factorization("GP kernel matrix is not positive definite".into()))
    }

    /// Fit hyper-parameters by multi-start projected gradient ascent on the
    /// log marginal likelihood.
    pub fn fit<R: Rng>(x: Vec<Vec<f64>>, y: Vec<f64>, rng: &mut R) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::Config("GP fit needs at least 2 points".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue);
        }
        let n = x.len();
        let mu = y.iter().sum::<f64>() / n as f64;
        let bx = FitBox::for_data(&y);
        let mut best: Option<([f64; 3], f64)> = None;

        for _ in 0..FIT_MULTISTARTS {
            let mut t = [0.0; 3];
            for i in 0..3 {
                t[i] = rng.gen_range(bx.lo[i]..=bx.hi[i]);
            }
            let mut cur = match log_marginal_likelihood(&x, &y, mu, &FitBox::params(&t)) {
                Some((ll, g)) => (ll, g),
                None => continue, // candidate discarded
            };
            let mut step = 0.1;
            for _ in 0..FIT_ITERS {
                let mut trial = t;
                for i in 0..3 {
                    trial[i] += step * cur.1[i];
                }
                bx.clamp(&mut trial);
                match log_marginal_likelihood(&x, &y, mu, &FitBox::params(&trial)) {
                    Some((ll, g)) if ll > cur.0 => {
                        t = trial;
                        cur = (ll, g);
                        step *= 1.3;
                    }
                    _ => {
                        step *= 0.5;
                        if step < 1e-6 {
                            break;
                        }
                    }
                }
            }
            if best.map_or(true, |(_, ll)| cur.0 > ll) {
                best = Some((t, cur.0));
            }
        }

        let (t, _) = best.ok_or_else(|| {
            Error::Factorization("no hyper-parameter candidate factorized".into())
        })?;
        Self::with_params(x, y, FitBox::params(&t))
    }

    pub fn num_points(&self) -> usize {
        self.x.len()
    }

    /// Posterior mean and variance at `x`; variance is clamped at 0.
    pub fn predict_mv(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let p = &self.params;
        let k = DVector::from_fn(n, |i, _| {
            p.sf2 * (-0.5 * sq_dist(&self.x[i], x) / (p.ell * p.ell)).exp()
        });
        let mean = self.mu + k.dot(&self.alpha);
        // v = L^{-1} k by forward substitution
        let mut v = k;
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.chol_lower[(i, j)] * v[j];
            }
            v[i] = s / self.chol_lower[(i, i)];
        }
        let var = (p.sf2 - v.norm_squared()).max(0.0);
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|p| (4.0 * p[0]).sin() + p.iter().sum::<f64>())
            .collect();
        (x, y)
    }

    /// Direct dense evaluation of the log marginal likelihood, independent of
    /// the Cholesky-based implementation (LU determinant and explicit solve).
    fn dense_lml(x: &[Vec<f64>], y: &[f64], mu: f64, p: &GpParams) -> f64 {
        let n = x.len();
        let kt = kernel_matrix(x, p);
        let resid = DVector::from_fn(n, |i, _| y[i] - mu);
        let lu = kt.clone().lu();
        let alpha = lu.solve(&resid).unwrap();
        let det: f64 = lu.determinant();
        -0.5 * (resid.dot(&alpha) + det.ln() + n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    #[test]
    fn constant_data_predicts_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 8.0]).collect();
        let y = vec![2.5; 8];
        let m = GpModel::fit(x, y, &mut rng).unwrap();
        for t in [0.0, 0.123, 0.9, 2.0] {
            let (mean, _) = m.predict_mv(&[t]);
            assert!((mean - 2.5).abs() < 1e-6, "mean at {t} = {mean}");
        }
    }

    #[test]
    fn lml_matches_dense_formula() {
        let (x, y) = random_data(3, 2, 7);
        let mu = y.iter().sum::<f64>() / 3.0;
        let p = GpParams { ell: 0.4, sf2: 1.3, sn2: 1e-4 };
        let (ll, _) = log_marginal_likelihood(&x, &y, mu, &p).unwrap();
        let reference = dense_lml(&x, &y, mu, &p);
        assert!((ll - reference).abs() < 1e-10, "{ll} vs {reference}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_data(10, 2, 11);
        let mu = y.iter().sum::<f64>() / 10.0;
        let p = GpParams { ell: 0.5, sf2: 0.9, sn2: 1e-3 };
        let (_, grad) = log_marginal_likelihood(&x, &y, mu, &p).unwrap();
        let h = 1e-6;
        let t0 = [p.ell.ln(), p.sf2.ln(), p.sn2.ln()];
        for i in 0..3 {
            let mut tp = t0;
            tp[i] += h;
            let mut tm = t0;
            tm[i] -= h;
            let pp = GpParams { ell: tp[0].exp(), sf2: tp[1].exp(), sn2: tp[2].exp() };
            let pm = GpParams { ell: tm[0].exp(), sf2: tm[1].exp(), sn2: tm[2].exp() };
            let (lp, _) = log_marginal_likelihood(&x, &y, mu, &pp).unwrap();
            let (lm, _) = log_marginal_likelihood(&x, &y, mu, &pm).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "component {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn near_interpolation_at_training_points() {
        let (x, y) = random_data(12, 1, 3);
        let p = GpParams { ell: 0.08, sf2: 1.0, sn2: 1e-10 };
        let m = GpModel::with_params(x.clone(), y.clone(), p).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mean, var) = m.predict_mv(xi);
            assert!((mean - yi).abs() < 1e-6, "mean {mean} vs {yi}");
            assert!(var <= 1e-8 * m.params.sf2 + 1e-12, "var {var}");
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let (x, y) = random_data(10, 2, 5);
        let p = GpParams { ell: 0.1, sf2: 2.0, sn2: 1e-6 };
        let m = GpModel::with_params(x, y.clone(), p).unwrap();
        let (mean, var) = m.predict_mv(&[50.0, -50.0]);
        let mu = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - mu).abs() < 0.01 * mu.abs().max(1.0));
        assert!((var - 2.0).abs() < 0.02);
    }

    #[test]
    fn permutation_invariant_predictions() {
        let (x, y) = random_data(9, 2, 13);
        let p = GpParams { ell: 0.3, sf2: 1.0, sn2: 1e-6 };
        let m1 = GpModel::with_params(x.clone(), y.clone(), p).unwrap();
        let mut xr = x.clone();
        xr.reverse();
        let mut yr = y.clone();
        yr.reverse();
        let m2 = GpModel::with_params(xr, yr, p).unwrap();
        let t = [0.4, 0.6];
        let (a, va) = m1.predict_mv(&t);
        let (b, vb) = m2.predict_mv(&t);
        assert!((a - b).abs() < 1e-8);
        assert!((va - vb).abs() < 1e-8);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        let (x, y) = random_data(15, 2, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let m = GpModel::fit(x, y, &mut rng).unwrap();
        for t in [[0.1, 0.1], [0.5, 0.5], [0.95, 0.2], [3.0, 3.0]] {
            let (_, var) = m.predict_mv(&t);
            assert!(var <= m.params.sf2 + 1e-10);
        }
    }

    #[test]
    fn prediction_does_not_refactorize() {
        let (x, y) = random_data(10, 1, 2);
        let p = GpParams { ell: 0.4, sf2: 1.0, sn2: 1e-6 };
        let m = GpModel::with_params(x, y, p).unwrap();
        let before = m.factorizations;
        for t in 0..50 {
            let _ = m.predict_mv(&[t as f64 / 50.0]);
        }
        assert_eq!(m.factorizations, before);
    }
}
