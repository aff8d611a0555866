//! Soft-thresholded kernel score estimator and its Jacobian.
//!
//! In variance-exploding coordinates the estimate is
//! `s(x) = g(x)/p(x) * psi(p(x); eta_t)` with the kernel statistics from
//! [`crate::kernel`] and `eta_t = ln n / (n (2 pi t)^{d/2})`. The Jacobian
//! has a closed form in each of the three regimes `p >= eta`,
//! `eta/2 < p < eta` and `p <= eta/2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{self, EvalMode, KernelEngine, KernelEval, ScaleEvaluator};
use crate::schedule::Schedule;

/// Exponent magnitude beyond which `psi` is taken at its limit.
const EXPONENT_CLAMP: f64 = 700.0;

/// Exponent of the logistic in the band, `(3 - 2u) / ((u - 1)(2 - u))` with
/// `u = 2x/eta`, written in `x` and `eta` so that `x = 3 eta / 4` gives an
/// exact zero.
fn band_exponent(x: f64, eta: f64) -> f64 {
    (3.0 * eta - 4.0 * x) * eta / ((2.0 * x - eta) * (2.0 * eta - 2.0 * x))
}

/// Smooth step from 0 (at `x <= eta/2`) to 1 (at `x >= eta`).
pub fn soft_threshold(x: f64, eta: f64) -> f64 {
    if x >= eta {
        return 1.0;
    }
    if x <= 0.5 * eta {
        return 0.0;
    }
    let e = band_exponent(x, eta);
    if e >= EXPONENT_CLAMP {
        0.0
    } else if e <= -EXPONENT_CLAMP {
        1.0
    } else {
        1.0 / (1.0 + e.exp())
    }
}

/// Derivative of [`soft_threshold`] in `x`; zero outside `(eta/2, eta)`.
///
/// Inside the band it is
/// `psi (1 - psi) (2u^2 - 6u + 5) / ((u-1)^2 (2-u)^2) * 2/eta` with
/// `u = 2x/eta`, evaluated in log space so the endpoint limits come out as 0.
pub fn soft_threshold_deriv(x: f64, eta: f64) -> f64 {
    if x >= eta || x <= 0.5 * eta {
        return 0.0;
    }
    let u = 2.0 * x / eta;
    let e = band_exponent(x, eta).abs();
    // ln(psi (1 - psi)) = -|E| - 2 ln(1 + e^{-|E|})
    let log_logistic = -e - 2.0 * (-e).exp().ln_1p();
    let poly = 2.0 * u * u - 6.0 * u + 5.0;
    let gap = (u - 1.0) * (2.0 - u);
    (log_logistic + poly.ln() - 2.0 * gap.ln()).exp() * 2.0 / eta
}

/// The density threshold `eta_t = ln n / (n (2 pi t)^{d/2})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub eta: f64,
}

impl Threshold {
    pub fn new(n: usize, t: f64, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("threshold needs n >= 2, got {n}")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("t = {t} must be positive")));
        }
        let nf = n as f64;
        Ok(Threshold {
            eta: nf.ln() / (nf * (2.0 * std::f64::consts::PI * t).powf(d as f64 / 2.0)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `p >= eta`
    Above,
    /// `eta/2 < p < eta`
    Band,
    /// `p <= eta/2`
    Below,
}

impl Regime {
    pub fn classify(p: f64, eta: f64) -> Self {
        if p >= eta {
            Regime::Above
        } else if p <= 0.5 * eta {
            Regime::Below
        } else {
            Regime::Band
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEval {
    pub s: DVector<f64>,
    pub j: DMatrix<f64>,
    pub regime: Regime,
    pub psi: f64,
    pub psi_prime: f64,
    /// Density estimate the regime was decided on.
    pub p: f64,
    pub eta: f64,
    pub t: f64,
}

/// Score and Jacobian from precomputed kernel statistics.
pub fn score_from_kernel(k: &KernelEval, eta: f64) -> ScoreEval {
    let d = k.g.len();
    let t = k.t;
    let regime = Regime::classify(k.p, eta);
    if regime == Regime::Below {
        return ScoreEval {
            s: DVector::zeros(d),
            j: DMatrix::zeros(d, d),
            regime,
            psi: 0.0,
            psi_prime: 0.0,
            p: k.p,
            eta,
            t,
        };
    }
    let p = k.p;
    let psi = soft_threshold(p, eta);
    let psi_prime = soft_threshold_deriv(p, eta);
    let ratio = &k.g / p;
    let outer = &ratio * ratio.transpose();
    // -I/t + H/p - g g^T / p^2
    let mut plain = &k.h / p - &outer;
    for a in 0..d {
        plain[(a, a)] -= 1.0 / t;
    }
    let (s, j) = match regime {
        Regime::Above => (ratio, plain),
        Regime::Band => {
            let gg_over_p = &k.g * k.g.transpose() / p;
            (ratio * psi, plain * psi + gg_over_p * psi_prime)
        }
        Regime::Below => unreachable!(),
    };
    ScoreEval {
        s,
        j,
        regime,
        psi,
        psi_prime,
        p,
        eta,
        t,
    }
}

/// Variance-exploding score estimate at `(x, t)` using exact kernel sums.
/// `n_override` replaces the dataset size inside the threshold only.
pub fn score_ve(data: &Dataset, x: &[f64], t: f64, n_override: Option<usize>) -> Result<ScoreEval> {
    let threshold = Threshold::new(n_override.unwrap_or(data.len()), t, data.dim())?;
    let k = kernel::eval_exact(data, x, t)?;
    Ok(score_from_kernel(&k, threshold.eta))
}

/// Rescales a VE evaluation at `x / sqrt(cum)` into the VP score for a step
/// with cumulative alpha `cum`: `s / sqrt(cum)` and `J / cum`.
pub fn to_vp(mut ve: ScoreEval, cum: f64) -> ScoreEval {
    let root = cum.sqrt();
    ve.s /= root;
    ve.j /= cum;
    ve
}

/// Forward-chain score estimate at step `k` with exact kernel sums.
pub fn score_vp(data: &Dataset, x: &[f64], k: usize, schedule: &Schedule) -> Result<ScoreEval> {
    let t = schedule.t_of_k(k, schedule.tau())?;
    let cum = schedule.cum_alpha(k);
    let root = cum.sqrt();
    let z: Vec<f64> = x.iter().map(|v| v / root).collect();
    Ok(to_vp(score_ve(data, &z, t, None)?, cum))
}

/// Score estimator over a frozen dataset.
///
/// In truncated mode `eps` is relative: the kernel sums at time `t` are
/// certified to within `eps * eta_t`, so errors stay small next to the
/// densities that decide the regime.
#[derive(Clone, Debug)]
pub struct ScoreEstimator {
    engine: KernelEngine,
    mode: EvalMode,
    n_threshold: usize,
}

impl ScoreEstimator {
    pub fn new(data: Dataset, mode: EvalMode) -> Result<Self> {
        Self::from_engine(KernelEngine::new(data), mode)
    }

    pub fn from_engine(engine: KernelEngine, mode: EvalMode) -> Result<Self> {
        if engine.len() < 2 {
            return Err(Error::invalid("score estimator needs at least two points"));
        }
        if let EvalMode::Truncated { eps, .. } = mode {
            if !(eps > 0.0) {
                return Err(Error::invalid(format!("eps = {eps} must be positive")));
            }
        }
        let n_threshold = engine.len();
        Ok(ScoreEstimator {
            engine,
            mode,
            n_threshold,
        })
    }

    /// Uses `n` instead of the dataset size inside `eta_t`.
    pub fn with_threshold_n(mut self, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("threshold n must be at least 2"));
        }
        self.n_threshold = n;
        Ok(self)
    }

    pub fn engine(&self) -> &KernelEngine {
        &self.engine
    }

    pub fn dim(&self) -> usize {
        self.engine.dim()
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    pub fn at_time(&self, t: f64) -> Result<TimeScorer<'_>> {
        let threshold = Threshold::new(self.n_threshold, t, self.dim())?;
        let mode = match self.mode {
            EvalMode::Exact => EvalMode::Exact,
            EvalMode::Truncated { eps, expansions } => EvalMode::Truncated {
                eps: eps * threshold.eta,
                expansions,
            },
        };
        Ok(TimeScorer {
            scale: self.engine.at_scale(t, mode)?,
            eta: threshold.eta,
        })
    }

    pub fn ve(&self, x: &[f64], t: f64) -> Result<ScoreEval> {
        self.at_time(t)?.ve(x)
    }

    pub fn vp(&self, x: &[f64], k: usize, schedule: &Schedule) -> Result<ScoreEval> {
        let t = schedule.t_of_k(k, schedule.tau())?;
        self.at_time(t)?.vp(x, schedule.cum_alpha(k))
    }
}

/// An estimator prepared at one time `t`.
pub struct TimeScorer<'a> {
    scale: ScaleEvaluator<'a>,
    eta: f64,
}

impl TimeScorer<'_> {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn kernel(&self, x: &[f64]) -> Result<KernelEval> {
        self.scale.eval(x)
    }

    pub fn ve(&self, x: &[f64]) -> Result<ScoreEval> {
        Ok(score_from_kernel(&self.scale.eval(x)?, self.eta))
    }

    /// VP score at `x` for a step with cumulative alpha `cum`; the scorer must
    /// have been prepared at that step's `t_k`.
    pub fn vp(&self, x: &[f64], cum: f64) -> Result<ScoreEval> {
        let root = cum.sqrt();
        let z: Vec<f64> = x.iter().map(|v| v / root).collect();
        Ok(to_vp(self.ve(&z)?, cum))
    }
}
