//! Error metrics and experiment building blocks: score and Jacobian errors
//! along the forward chain, histogram total variation, log-log rate fits, the
//! PSD audit and the smoothing-bias table.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::oracle::{oracle_eval, oracle_sample, OracleMixture};
use crate::rng::{derive_seed, stream_rng};
use crate::schedule::Schedule;
use crate::score::{Regime, ScoreEstimator, Threshold};

/// A score `s` and Jacobian `J` evaluated at one fixed step.
pub type StepEval<'a> = Box<dyn Fn(&[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> + Sync + 'a>;

/// Anything that provides forward-chain scores and Jacobians.
pub trait VpModel: Sync {
    fn dim(&self) -> usize;
    fn at_step<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<StepEval<'a>>;
}

impl VpModel for ScoreEstimator {
    fn dim(&self) -> usize {
        ScoreEstimator::dim(self)
    }

    fn at_step<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<StepEval<'a>> {
        let scorer = self.at_time(schedule.t_of_k(k, schedule.tau())?)?;
        let cum = schedule.cum_alpha(k);
        Ok(Box::new(move |x| {
            let e = scorer.vp(x, cum)?;
            Ok((e.s, e.j))
        }))
    }
}

impl VpModel for OracleMixture {
    fn dim(&self) -> usize {
        OracleMixture::dim(self)
    }

    fn at_step<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<StepEval<'a>> {
        let t = schedule.t_of_k(k, schedule.tau())?;
        let cum = schedule.cum_alpha(k);
        let root = cum.sqrt();
        Ok(Box::new(move |x| {
            let z: Vec<f64> = x.iter().map(|v| v / root).collect();
            let e = oracle_eval(self, &z, t)?;
            Ok((e.s / root, e.j / cum))
        }))
    }
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub k: usize,
    pub t: f64,
    pub cum_alpha: f64,
    pub eps_sc_sq: f64,
    pub eps_sc_sq_se: f64,
    pub eps_jcb: f64,
    pub eps_jcb_se: f64,
    pub mc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorReport {
    pub per_k: Vec<StepError>,
    pub eps_sc: f64,
    pub eps_jcb: f64,
}

impl ScoreErrorReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k",
            "t_k",
            "cum_alpha_k",
            "eps_sc_sq",
            "eps_sc_sq_se",
            "eps_jcb",
            "eps_jcb_se",
            "mc",
        ])?;
        for e in &self.per_k {
            w.write_record([
                e.k.to_string(),
                format!("{:e}", e.t),
                format!("{:e}", e.cum_alpha),
                format!("{:e}", e.eps_sc_sq),
                format!("{:e}", e.eps_sc_sq_se),
                format!("{:e}", e.eps_jcb),
                format!("{:e}", e.eps_jcb_se),
                e.mc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `eps_sc = sqrt(mean_k (1 - cum_k) eps_sc_k^2)` and
/// `eps_jcb = mean_k (1 - cum_k) eps_jcb_k` over the listed steps. With every
/// step listed the mean is the plain `1/K` sum.
pub fn aggregate_errors(per_k: &[StepError]) -> (f64, f64) {
    let m = per_k.len() as f64;
    let sc: f64 = per_k
        .iter()
        .map(|e| (1.0 - e.cum_alpha) * e.eps_sc_sq)
        .sum::<f64>()
        / m;
    let jcb: f64 = per_k
        .iter()
        .map(|e| (1.0 - e.cum_alpha) * e.eps_jcb)
        .sum::<f64>()
        / m;
    (sc.sqrt(), jcb)
}

/// Monte-Carlo score and Jacobian errors of `model` against the oracle at
/// each step in `ks`, on `mc` draws of `X_k = sqrt(cum_k) (Z_0 + sqrt(t_k) W)`.
pub fn score_errors<M: VpModel>(
    model: &M,
    m: &OracleMixture,
    s: &Schedule,
    ks: &[usize],
    mc: usize,
    seed: u64,
) -> Result<ScoreErrorReport> {
    let d = m.dim();
    if model.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: model.dim(),
        });
    }
    if mc < 100 {
        return Err(Error::invalid(format!("mc = {mc} must be at least 100")));
    }
    if ks.is_empty() {
        return Err(Error::invalid("no steps requested"));
    }
    let mut per_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let t = s.t_of_k(k, s.tau())?;
        let cum = s.cum_alpha(k);
        let root = cum.sqrt();
        let mut xs = oracle_sample(m, t, mc, derive_seed(seed, k as u64))?;
        xs.iter_mut().for_each(|v| *v *= root);
        let est = model.at_step(k, s)?;
        let truth = m.at_step(k, s)?;
        let pairs: Vec<(f64, f64)> = xs
            .par_chunks(d)
            .map(|x| -> Result<(f64, f64)> {
                let (s_hat, j_hat) = est(x)?;
                let (s_true, j_true) = truth(x)?;
                Ok(((s_hat - s_true).norm_squared(), spectral_norm(&(j_hat - j_true))))
            })
            .collect::<Result<_>>()?;
        let (sc, jc): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (eps_sc_sq, eps_sc_sq_se) = mean_and_se(&sc);
        let (eps_jcb, eps_jcb_se) = mean_and_se(&jc);
        per_k.push(StepError {
            k,
            t,
            cum_alpha: cum,
            eps_sc_sq,
            eps_sc_sq_se,
            eps_jcb,
            eps_jcb_se,
            mc,
        });
    }
    let (eps_sc, eps_jcb) = aggregate_errors(&per_k);
    Ok(ScoreErrorReport {
        per_k,
        eps_sc,
        eps_jcb,
    })
}

/// Mean squared score error `E |s_hat_t(Z_t) - s_t(Z_t)|^2` at one
/// variance-exploding time, with its standard error.
pub fn score_error_at_time(
    est: &ScoreEstimator,
    m: &OracleMixture,
    t: f64,
    mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = m.dim();
    if est.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: est.dim(),
        });
    }
    let xs = oracle_sample(m, t, mc, seed)?;
    let scorer = est.at_time(t)?;
    let errs: Vec<f64> = xs
        .par_chunks(d)
        .map(|x| -> Result<f64> {
            let e = scorer.ve(x)?;
            let o = oracle_eval(m, x, t)?;
            Ok((e.s - o.s).norm_squared())
        })
        .collect::<Result<_>>()?;
    Ok(mean_and_se(&errs))
}

/// Axis-aligned histogram grid for `d <= 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

/// Midpoint-rule subdivisions per axis when integrating a density over a cell.
pub const MIDPOINT_SUBDIVISIONS: usize = 8;

/// Analytic mass that must fall inside the grid.
pub const COVERAGE_THRESHOLD: f64 = 0.999;

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > 2 || hi.len() != d || bins.len() != d {
            return Err(Error::invalid("histogram grids need 1 or 2 matching axes"));
        }
        for a in 0..d {
            if !(hi[a] > lo[a]) || bins[a] == 0 {
                return Err(Error::invalid(format!("axis {a} is empty")));
            }
        }
        Ok(Grid { lo, hi, bins })
    }

    /// `+-6 sqrt(var + t)` beyond the outermost means, 512 bins in one
    /// dimension and 128 per axis in two.
    pub fn default_for(m: &OracleMixture, t: f64) -> Result<Self> {
        let d = m.dim();
        let bins = match d {
            1 => 512,
            2 => 128,
            _ => return Err(Error::invalid("histogram TV is only defined for d <= 2")),
        };
        let (lo, hi): (Vec<f64>, Vec<f64>) = (0..d).map(|a| m.axis_range(a, t)).unzip();
        Grid::new(lo, hi, vec![bins; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cells(&self) -> usize {
        self.bins.iter().product()
    }

    fn width(&self, a: usize) -> f64 {
        (self.hi[a] - self.lo[a]) / self.bins[a] as f64
    }

    /// Flat cell index, or `None` outside the grid.
    fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for a in 0..self.dim() {
            if !(x[a] >= self.lo[a] && x[a] < self.hi[a]) {
                return None;
            }
            let b = (((x[a] - self.lo[a]) / self.width(a)) as usize).min(self.bins[a] - 1);
            idx = idx * self.bins[a] + b;
        }
        Some(idx)
    }

    /// Cell masses of a sample, with the mass outside the grid appended.
    fn sample_masses(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if xs.is_empty() || xs.len() % d != 0 {
            return Err(Error::invalid("samples must be a nonempty n x d matrix"));
        }
        let n = xs.len() / d;
        let mut counts = vec![0usize; self.cells() + 1];
        for x in xs.chunks_exact(d) {
            match self.locate(x) {
                Some(i) => counts[i] += 1,
                None => counts[self.cells()] += 1,
            }
        }
        Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
    }

    /// Cell masses of a density by the midpoint rule, with the uncovered
    /// remainder appended. Fails when coverage is below the threshold.
    fn density_masses(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Result<Vec<f64>> {
        let d = self.dim();
        let sub = MIDPOINT_SUBDIVISIONS;
        let w: Vec<f64> = (0..d).map(|a| self.width(a)).collect();
        let vol: f64 = w.iter().product::<f64>() / (sub.pow(d as u32)) as f64;
        let cells = self.cells();
        let mut masses: Vec<f64> = (0..cells)
            .into_par_iter()
            .map(|c| {
                let mut idx = vec![0; d];
                let mut rest = c;
                for a in (0..d).rev() {
                    idx[a] = rest % self.bins[a];
                    rest /= self.bins[a];
                }
                let mut acc = 0.0;
                let mut point = vec![0.0; d];
                for s in 0..sub.pow(d as u32) {
                    let mut r = s;
                    for a in (0..d).rev() {
                        let j = r % sub;
                        r /= sub;
                        point[a] = self.lo[a] + w[a] * (idx[a] as f64 + (j as f64 + 0.5) / sub as f64);
                    }
                    acc += f(&point);
                }
                acc * vol
            })
            .collect();
        let coverage: f64 = masses.iter().sum();
        if coverage < COVERAGE_THRESHOLD {
            return Err(Error::Coverage {
                coverage,
                threshold: COVERAGE_THRESHOLD,
            });
        }
        masses.push((1.0 - coverage).max(0.0));
        Ok(masses)
    }
}

/// The second argument of [`tv_histogram`].
pub enum Reference<'a> {
    Samples(&'a [f64]),
    Density(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TvMethod {
    Histogram,
    AnalyticVsHistogram,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub grid: Grid,
    pub tv: f64,
    pub method: TvMethod,
    /// Fraction of the first argument that fell outside the grid.
    pub outside: f64,
}

fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    let tv = 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    tv.clamp(0.0, 1.0)
}

/// `1/2 sum_cells |mass_a - mass_b|`, with everything outside the grid
/// pooled into one extra cell.
pub fn tv_histogram(a: &[f64], b: Reference<'_>, grid: &Grid) -> Result<TvReport> {
    let ma = grid.sample_masses(a)?;
    let (mb, method) = match b {
        Reference::Samples(xs) => (grid.sample_masses(xs)?, TvMethod::Histogram),
        Reference::Density(f) => (grid.density_masses(f)?, TvMethod::AnalyticVsHistogram),
    };
    Ok(TvReport {
        grid: grid.clone(),
        tv: half_l1(&ma, &mb),
        outside: ma[grid.cells()],
        method,
    })
}

/// TV between two densities, both integrated on the grid.
pub fn tv_analytic(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    grid: &Grid,
) -> Result<TvReport> {
    let ma = grid.density_masses(f)?;
    let mb = grid.density_masses(g)?;
    Ok(TvReport {
        grid: grid.clone(),
        tv: half_l1(&ma, &mb),
        outside: ma[grid.cells()],
        method: TvMethod::Analytic,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `ln y` on `ln x`.
pub fn rate_fit(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(Error::invalid("rate fits need at least 4 (x, y) pairs"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("rate fits need strictly positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate fits need at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        slope,
        intercept,
        r2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdPoint {
    pub k: usize,
    pub x: Vec<f64>,
    pub regime: Regime,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdAuditReport {
    pub min_eigenvalue: f64,
    pub worst: Option<PsdPoint>,
    pub points: usize,
    pub above: usize,
    pub band: usize,
    pub below: usize,
    pub passed: bool,
}

/// Tolerance on the smallest eigenvalue of `J + I / (1 - cum_k)`.
pub const PSD_TOLERANCE: f64 = -1e-8;

/// Checks `J(x) + I / (1 - cum_k) >= 0` for the estimator's forward-chain
/// Jacobian at `points` sampled `(x, k)` pairs. A third of the points follow
/// the forward chain of the data, a third sit in the far tail and a third are
/// placed inside the soft-threshold band by bisection along rays.
pub fn psd_audit(est: &ScoreEstimator, s: &Schedule, points: usize, seed: u64) -> Result<PsdAuditReport> {
    if points == 0 {
        return Err(Error::invalid("points must be at least 1"));
    }
    let data = est.engine().data();
    let d = data.dim();
    let kmax = s.steps();
    let evals: Vec<PsdPoint> = (0..points)
        .into_par_iter()
        .map(|i| -> Result<PsdPoint> {
            let mut rng = stream_rng(seed, i as u64);
            let k = rng.gen_range(1..=kmax);
            let t = s.t_of_k(k, s.tau())?;
            let cum = s.cum_alpha(k);
            let root = cum.sqrt();
            let anchor = data.row(rng.gen_range(0..data.len()));
            let dir = random_direction(&mut rng, d);
            // variance-exploding coordinates
            let z: Vec<f64> = match i % 3 {
                0 => anchor
                    .iter()
                    .map(|a| a + t.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                1 => far_point(data, &dir, t),
                _ => band_point(est, data, anchor, &dir, t)?,
            };
            let x: Vec<f64> = z.iter().map(|v| v * root).collect();
            let e = est.vp(&x, k, s)?;
            let mut m = e.j.clone();
            let shift = 1.0 / s.cum_noise(k);
            for a in 0..d {
                m[(a, a)] += shift;
            }
            let min = SymmetricEigen::new(m).eigenvalues.min();
            Ok(PsdPoint {
                k,
                x,
                regime: e.regime,
                min_eigenvalue: min,
            })
        })
        .collect::<Result<_>>()?;
    let mut worst: Option<PsdPoint> = None;
    let (mut above, mut band, mut below) = (0, 0, 0);
    for p in &evals {
        match p.regime {
            Regime::Above => above += 1,
            Regime::Band => band += 1,
            Regime::Below => below += 1,
        }
        if worst.as_ref().map_or(true, |w| p.min_eigenvalue < w.min_eigenvalue) {
            worst = Some(p.clone());
        }
    }
    let min_eigenvalue = worst.as_ref().map_or(f64::INFINITY, |w| w.min_eigenvalue);
    Ok(PsdAuditReport {
        min_eigenvalue,
        worst,
        points,
        above,
        band,
        below,
        passed: min_eigenvalue >= PSD_TOLERANCE,
    })
}

fn random_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn data_extent(data: &Dataset) -> f64 {
    data.rows()
        .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn far_point(data: &Dataset, dir: &[f64], t: f64) -> Vec<f64> {
    let r = data_extent(data) + 60.0 * t.sqrt() + 1.0;
    dir.iter().map(|a| a * r).collect()
}

/// Bisects along `anchor + s * dir` for a point whose density estimate lies
/// strictly inside `(eta/2, eta)`.
fn band_point(
    est: &ScoreEstimator,
    data: &Dataset,
    anchor: &[f64],
    dir: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let scorer = est.at_time(t)?;
    let eta = Threshold::new(data.len(), t, data.dim())?.eta;
    let target = 0.75 * eta;
    let at = |s: f64| -> Vec<f64> { anchor.iter().zip(dir).map(|(a, u)| a + s * u).collect() };
    let mut lo = 0.0;
    let mut hi = data_extent(data) + 60.0 * t.sqrt() + 1.0;
    let mut x = at(hi);
    if scorer.kernel(&at(lo))?.p < target {
        return Ok(at(lo));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        x = at(mid);
        let p = scorer.kernel(&x)?.p;
        if p > 0.5 * eta && p < eta {
            break;
        }
        if p >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub tau: f64,
    pub t: f64,
    pub tv: f64,
}

/// `TV(p*, p_t)` with `t = (1 - alpha_1)/alpha_1 + tau` for each `tau`,
/// both densities integrated on `grid`.
pub fn bias_vs_tau(
    m: &OracleMixture,
    taus: &[f64],
    one_minus_alpha1: f64,
    grid: &Grid,
) -> Result<Vec<BiasRow>> {
    if m.variances.iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("the target needs a density: all variances must be positive"));
    }
    let target = |x: &[f64]| m.density(x, 0.0);
    taus.iter()
        .map(|&tau| {
            let total = one_minus_alpha1 + tau;
            if !(total > 0.0 && total < 1.0) {
                return Err(Error::invalid(format!(
                    "tau + (1 - alpha_1) = {total} must lie in (0, 1)"
                )));
            }
            let t = one_minus_alpha1 / (1.0 - one_minus_alpha1) + tau;
            let smoothed = move |x: &[f64]| m.density(x, t);
            let tv = tv_analytic(&target, &smoothed, grid)?.tv;
            Ok(BiasRow { tau, t, tv })
        })
        .collect()
}
