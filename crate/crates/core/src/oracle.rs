//! Isotropic Gaussian mixtures with closed-form smoothed densities, scores,
//! Jacobians and exact samplers.
//!
//! Under the variance-exploding process `Z_t = Z_0 + sqrt(t) W`, component
//! `i` of the mixture stays Gaussian with variance `sigma_i^2 + t`, so every
//! quantity the estimator approximates is available exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::schedule::Schedule;

/// Mixture spec. JSON keys: `weights`, `means` (list of d-vectors),
/// `variances` (isotropic, one per component), `sigma_sub`, `beta_nominal`,
/// and optionally `holder_l`, which is carried along but never used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub sigma_sub: f64,
    pub beta_nominal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleEval {
    pub p: f64,
    pub s: DVector<f64>,
    pub j: DMatrix<f64>,
    /// `p (J + I/t + s s^T)`; undefined at `t = 0`.
    pub h: Option<DMatrix<f64>>,
    /// `sum_i w_i N_i(x) s_i(x)`, computed without dividing by `p`.
    pub g: DVector<f64>,
    pub log_p: f64,
}

impl OracleMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
        sigma_sub: f64,
        beta_nominal: f64,
    ) -> Result<Self> {
        let m = OracleMixture {
            weights,
            means,
            variances,
            sigma_sub,
            beta_nominal,
            holder_l: None,
        };
        m.check()?;
        Ok(m)
    }

    /// `N(mean, variance I)` in `mean.len()` dimensions.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Self {
        let sigma = variance.sqrt().max(1.0);
        OracleMixture {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
            sigma_sub: sigma,
            beta_nominal: 2.0,
            holder_l: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: OracleMixture = serde_json::from_slice(&std::fs::read(path)?)?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        let c = self.weights.len();
        if c == 0 || self.means.len() != c || self.variances.len() != c {
            return Err(Error::invalid(
                "weights, means and variances must be nonempty and of equal length",
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::invalid("means must have at least one coordinate"));
        }
        for mu in &self.means {
            if mu.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: mu.len(),
                });
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("means must be finite"));
            }
        }
        if self.variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("variances must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Second moment `E |Z_0|^2`.
    pub fn second_moment(&self) -> f64 {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * (mu.iter().map(|a| a * a).sum::<f64>() + d * v))
            .sum()
    }

    /// Default grid range on `axis` for `Z_t`: six standard deviations of
    /// the widest component beyond the outermost means.
    pub fn axis_range(&self, axis: usize, t: f64) -> (f64, f64) {
        let lo = self.means.iter().map(|m| m[axis]).fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().map(|m| m[axis]).fold(f64::NEG_INFINITY, f64::max);
        let var = self.variances.iter().fold(0.0f64, |a, &b| a.max(b));
        let half = 6.0 * (var + t).sqrt();
        (lo - half, hi + half)
    }

    /// Marginal density of coordinate `axis` of `Z_t` at `x`.
    pub fn marginal_density(&self, axis: usize, x: f64, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| {
                let var = v + t;
                w * (-(x - mu[axis]).powi(2) / (2.0 * var)).exp()
                    / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .sum()
    }

    /// Joint density of `Z_t`, without derivatives.
    pub fn density(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| {
                let var = v + t;
                let dist: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w * (-dist / (2.0 * var)).exp()
                    / (2.0 * std::f64::consts::PI * var).powf(d as f64 / 2.0)
            })
            .sum()
    }
}

/// Closed-form `p_t`, `s_t`, `J_t` and `H_t` at `x`.
pub fn oracle_eval(m: &OracleMixture, x: &[f64], t: f64) -> Result<OracleEval> {
    let d = m.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("t = {t} must be nonnegative")));
    }
    let c = m.weights.len();
    let mut log_terms = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for i in 0..c {
        let var = m.variances[i] + t;
        if !(var > 0.0) {
            return Err(Error::invalid(format!(
                "component {i} is degenerate at t = {t}: variance + t = 0"
            )));
        }
        vars.push(var);
        if m.weights[i] == 0.0 {
            log_terms.push(f64::NEG_INFINITY);
            continue;
        }
        let dist: f64 = x
            .iter()
            .zip(&m.means[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        log_terms.push(
            m.weights[i].ln()
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln()
                - dist / (2.0 * var),
        );
    }
    let top = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|l| (l - top).exp()).sum();
    let log_p = top + sum.ln();
    let p = log_p.exp();

    let mut s = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    let mut g = DVector::zeros(d);
    for i in 0..c {
        let r = (log_terms[i] - log_p).exp();
        if r == 0.0 {
            continue;
        }
        let si = DVector::from_iterator(
            d,
            x.iter().zip(&m.means[i]).map(|(a, b)| (b - a) / vars[i]),
        );
        s.axpy(r, &si, 1.0);
        g.axpy(log_terms[i].exp(), &si, 1.0);
        second += (&si * si.transpose()) * r;
        for a in 0..d {
            second[(a, a)] -= r / vars[i];
        }
    }
    let j = second - &s * s.transpose();
    let h = (t > 0.0).then(|| {
        let mut inner = &j + &s * s.transpose();
        for a in 0..d {
            inner[(a, a)] += 1.0 / t;
        }
        inner * p
    });
    Ok(OracleEval {
        p,
        s,
        j,
        h,
        g,
        log_p,
    })
}

/// VP-chain oracle score at step `k`: `s_{t_k}(x / sqrt(cum)) / sqrt(cum)`.
pub fn oracle_vp(m: &OracleMixture, x: &[f64], k: usize, schedule: &Schedule) -> Result<OracleEval> {
    let t = schedule.t_of_k(k, schedule.tau())?;
    let cum = schedule.cum_alpha(k);
    let root = cum.sqrt();
    let z: Vec<f64> = x.iter().map(|v| v / root).collect();
    let mut e = oracle_eval(m, &z, t)?;
    e.s /= root;
    e.j /= cum;
    Ok(e)
}

fn draw_row(m: &OracleMixture, t: f64, rng: &mut impl Rng, out: &mut [f64]) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut comp = m.weights.len() - 1;
    for (i, w) in m.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = i;
            break;
        }
    }
    let sd = (m.variances[comp] + t).sqrt();
    for (o, mu) in out.iter_mut().zip(&m.means[comp]) {
        let z: f64 = rng.sample(StandardNormal);
        *o = mu + sd * z;
    }
}

/// `count` i.i.d. draws of `Z_0 + sqrt(t) W`, row-major. Row `i` uses its own
/// stream, so the output does not depend on the thread count.
pub fn oracle_sample(m: &OracleMixture, t: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("t = {t} must be nonnegative")));
    }
    let d = m.dim();
    let mut out = vec![0.0; count * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let mut rng = stream_rng(seed, i as u64);
        draw_row(m, t, &mut rng, row);
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TweedieEstimate {
    pub estimate: DVector<f64>,
    pub std_err: DVector<f64>,
    pub ess: f64,
    /// False when the effective sample size is below 10.
    pub reliable: bool,
}

/// Self-normalized importance estimate of `(1/t) E[Z_0 - x | Z_t = x]` from
/// `mc` draws of `Z_0`, weighted by `phi_t(Z_0 - x)`.
pub fn tweedie_mc_check(
    m: &OracleMixture,
    x: &[f64],
    t: f64,
    mc: usize,
    seed: u64,
) -> Result<TweedieEstimate> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("t = {t} must be positive")));
    }
    let d = m.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    let z0 = oracle_sample(m, 0.0, mc, seed)?;
    let logw: Vec<f64> = z0
        .chunks_exact(d)
        .map(|z| -z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * t))
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();

    let mut est: DVector<f64> = DVector::zeros(d);
    for (z, wi) in z0.chunks_exact(d).zip(&w) {
        for a in 0..d {
            est[a] += wi * (z[a] - x[a]) / t;
        }
    }
    est /= sw;
    // delta-method variance of a ratio estimator
    let mut var: DVector<f64> = DVector::zeros(d);
    for (z, wi) in z0.chunks_exact(d).zip(&w) {
        for a in 0..d {
            let dev = (z[a] - x[a]) / t - est[a];
            var[a] += wi * wi * dev * dev;
        }
    }
    let std_err = var.map(|v| v.sqrt() / sw);
    let ess = sw * sw / sw2;
    Ok(TweedieEstimate {
        estimate: est,
        std_err,
        ess,
        reliable: ess >= 10.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bumps() -> OracleMixture {
        OracleMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![0.25, 0.25],
            2.5,
            2.0,
        )
        .unwrap()
    }

    fn mixture_2d() -> OracleMixture {
        OracleMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
            vec![0.4, 0.9],
            2.0,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn single_gaussian_values() {
        let m = OracleMixture::gaussian(vec![0.0], 1.0);
        let e = oracle_eval(&m, &[1.0], 1.0).unwrap();
        let expected = (-0.25f64).exp() / (4.0 * std::f64::consts::PI).sqrt();
        assert!((e.p - expected).abs() < 1e-15);
        assert!((e.s[0] + 0.5).abs() < 1e-15);
        assert!((e.j[(0, 0)] + 0.5).abs() < 1e-15);
        let c = OracleMixture::gaussian(vec![0.0, 0.0], 3.0);
        for t in [0.0, 0.5, 7.0] {
            let e = oracle_eval(&c, &[0.3, -2.0], t).unwrap();
            assert_eq!(e.j[(0, 0)], -1.0 / (3.0 + t));
            assert_eq!(e.j[(1, 1)], -1.0 / (3.0 + t));
            assert_eq!(e.j[(0, 1)], 0.0);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_score_at_center() {
        let e = oracle_eval(&two_bumps(), &[0.0], 0.0).unwrap();
        assert_eq!(e.s[0], 0.0);
        assert!(e.h.is_none());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(OracleMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0], 1.0, 2.0).is_err());
        assert!(OracleMixture::new(vec![1.0], vec![vec![0.0]], vec![-1.0], 1.0, 2.0).is_err());
        let point = OracleMixture::gaussian(vec![0.0], 0.0);
        assert!(oracle_eval(&point, &[0.0], 0.0).is_err());
        assert!(oracle_eval(&point, &[0.0], 0.1).is_ok());
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let m = mixture_2d();
        let t = 0.3;
        for x in [[0.1, 0.2], [-2.0, 1.0], [3.0, -1.5]] {
            let e = oracle_eval(&m, &x, t).unwrap();
            for a in 0..2 {
                let h = 1e-5;
                let mut xp = x;
                let mut xm = x;
                xp[a] += h;
                xm[a] -= h;
                let fd = (oracle_eval(&m, &xp, t).unwrap().log_p
                    - oracle_eval(&m, &xm, t).unwrap().log_p)
                    / (2.0 * h);
                assert!((fd - e.s[a]).abs() <= 1e-7 * e.s.norm().max(1.0));
                let fd_s = (oracle_eval(&m, &xp, t).unwrap().s - oracle_eval(&m, &xm, t).unwrap().s)
                    / (2.0 * h);
                for b in 0..2 {
                    assert!((fd_s[b] - e.j[(b, a)]).abs() <= 1e-5 * e.j.norm().max(1.0));
                }
            }
            assert!((&e.g / e.p - &e.s).norm() <= 1e-12 * e.s.norm().max(1.0));
            let h = e.h.unwrap();
            assert!((&h - h.transpose()).norm() <= 1e-15 * h.norm());
            assert!(h.symmetric_eigenvalues().min() >= -1e-12 * h.norm());
        }
    }

    #[test]
    fn point_mass_samples() {
        let m = OracleMixture::gaussian(vec![1.5, -2.0], 0.0);
        let rows = oracle_sample(&m, 0.0, 10, 3).unwrap();
        for r in rows.chunks(2) {
            assert_eq!(r, &[1.5, -2.0]);
        }
        assert!(oracle_sample(&m, 0.0, 0, 3).is_err());
    }

    #[test]
    fn sample_moments() {
        let m = OracleMixture::gaussian(vec![0.0], 1.0);
        let n = 1_000_000;
        let rows = oracle_sample(&m, 1.0, n, 11).unwrap();
        let mean = rows.iter().sum::<f64>() / n as f64;
        let var = rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 3.0 * (2.0 / n as f64).sqrt());
        // Var of the sample variance of N(0, 2) is 2 * 2^2 / n.
        assert!((var - 2.0).abs() <= 3.0 * (8.0 / n as f64).sqrt());
        assert_eq!(rows, oracle_sample(&m, 1.0, n, 11).unwrap());
    }

    #[test]
    fn tweedie_matches_closed_form() {
        let g = OracleMixture::gaussian(vec![0.0], 1.0);
        let est = tweedie_mc_check(&g, &[1.0], 1.0, 1_000_000, 5).unwrap();
        assert!(est.reliable);
        assert!((est.estimate[0] + 0.5).abs() <= 3.0 * est.std_err[0]);
        let at_zero = tweedie_mc_check(&g, &[0.0], 1.0, 100_000, 6).unwrap();
        assert!(at_zero.estimate[0].abs() <= 3.0 * at_zero.std_err[0]);

        let m = two_bumps();
        let est = tweedie_mc_check(&m, &[0.7], 0.5, 400_000, 7).unwrap();
        let exact = oracle_eval(&m, &[0.7], 0.5).unwrap();
        assert!((est.estimate[0] - exact.s[0]).abs() <= 3.0 * est.std_err[0]);
    }

    #[test]
    fn tweedie_flags_low_ess() {
        let g = OracleMixture::gaussian(vec![0.0], 1.0);
        let est = tweedie_mc_check(&g, &[30.0], 1e-4, 1000, 8).unwrap();
        assert!(!est.reliable);
    }

    #[test]
    fn json_round_trip() {
        let m = mixture_2d();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"sigma_sub\""));
        let back: OracleMixture = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
