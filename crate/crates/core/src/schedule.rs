//! Learning-rate schedule for the forward chain and its variance-exploding
//! time map.
//!
//! The cumulative noise levels follow
//!
//! ```text
//! cum_1 = 1 - K^{-c0}
//! cum_k = cum_{k-1} - (c1 ln K / K) * cum_{k-1} * (1 - cum_{k-1}),   k >= 2
//! ```
//!
//! with `alpha_k = cum_k / cum_{k-1}` and `t_k = (1 - cum_k) / cum_k + tau`.
//! Steps are indexed from 1 in the public API.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest cumulative alpha accepted before construction fails.
pub const CUM_ALPHA_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Number of steps `K`.
    pub steps: usize,
    pub c0: f64,
    pub c1: f64,
    /// Initial smoothing added to every `t_k`.
    #[serde(default)]
    pub tau: f64,
}

impl ScheduleParams {
    pub fn new(steps: usize, c0: f64, c1: f64, tau: f64) -> Self {
        ScheduleParams { steps, c0, c1, tau }
    }

    /// `c1 ln K / K`.
    pub fn rate(&self) -> f64 {
        let k = self.steps as f64;
        self.c1 * k.ln() / k
    }

    pub fn check(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid(format!("K = {} must be at least 2", self.steps)));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) || !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::invalid("c0 and c1 must be positive and finite"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be nonnegative and finite"));
        }
        let rate = self.rate();
        if rate >= 1.0 {
            return Err(Error::invalid(format!(
                "c1 ln K / K = {rate:.6} must be < 1 (K = {}, c1 = {})",
                self.steps, self.c1
            )));
        }
        Ok(())
    }

    /// Non-fatal departures from the regime the step-size bounds assume.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.c1 < 5.0 * self.c0 {
            out.push(format!("c1 = {} < 5 c0 = {}", self.c1, 5.0 * self.c0));
        }
        if self.rate() > 0.5 {
            out.push(format!("c1 ln K / K = {:.4} exceeds 1/2", self.rate()));
        }
        out
    }
}

/// A built schedule. Immutable once constructed.
#[derive(Clone, Debug)]
pub struct Schedule {
    params: ScheduleParams,
    cum_alpha: Vec<f64>,
    // 1 - cum_alpha, carried separately so it keeps full relative precision
    // while cum_alpha is near one.
    cum_noise: Vec<f64>,
    alpha: Vec<f64>,
    one_minus_alpha: Vec<f64>,
    t: Vec<f64>,
}

impl Schedule {
    pub fn build(params: ScheduleParams) -> Result<Self> {
        params.check()?;
        let k_total = params.steps;
        let rate = params.rate();

        let mut cum_alpha = Vec::with_capacity(k_total);
        let mut cum_noise = Vec::with_capacity(k_total);
        let mut alpha = Vec::with_capacity(k_total);
        let mut one_minus_alpha = Vec::with_capacity(k_total);

        let noise_1 = (k_total as f64).powf(-params.c0);
        let cum_1 = 1.0 - noise_1;
        check_open_unit(1, cum_1)?;
        cum_alpha.push(cum_1);
        cum_noise.push(noise_1);
        alpha.push(cum_1);
        one_minus_alpha.push(noise_1);

        for k in 2..=k_total {
            let prev = cum_alpha[k - 2];
            let prev_noise = cum_noise[k - 2];
            let step = rate * prev_noise;
            let factor = 1.0 - step;
            let cum = prev * factor;
            check_open_unit(k, cum)?;
            cum_alpha.push(cum);
            cum_noise.push(prev_noise * (1.0 + rate * prev));
            alpha.push(factor);
            one_minus_alpha.push(step);
        }

        let t = time_map(&cum_alpha, &cum_noise, params.tau);
        Ok(Schedule {
            params,
            cum_alpha,
            cum_noise,
            alpha,
            one_minus_alpha,
            t,
        })
    }

    /// Builds a schedule directly from cumulative alphas, without checking
    /// monotonicity. Used to audit arbitrary sequences with [`validate`].
    ///
    /// [`validate`]: Schedule::validate
    pub fn from_cum_alpha(params: ScheduleParams, cum_alpha: Vec<f64>) -> Result<Self> {
        if cum_alpha.len() != params.steps {
            return Err(Error::DimensionMismatch {
                expected: params.steps,
                found: cum_alpha.len(),
            });
        }
        for (i, &c) in cum_alpha.iter().enumerate() {
            check_open_unit(i + 1, c)?;
        }
        let cum_noise: Vec<f64> = cum_alpha.iter().map(|c| 1.0 - c).collect();
        let mut alpha = Vec::with_capacity(cum_alpha.len());
        let mut prev = 1.0;
        for &c in &cum_alpha {
            alpha.push(c / prev);
            prev = c;
        }
        let one_minus_alpha = alpha.iter().map(|a| 1.0 - a).collect();
        let t = time_map(&cum_alpha, &cum_noise, params.tau);
        Ok(Schedule {
            params,
            cum_alpha,
            cum_noise,
            alpha,
            one_minus_alpha,
            t,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn steps(&self) -> usize {
        self.cum_alpha.len()
    }

    pub fn tau(&self) -> f64 {
        self.params.tau
    }

    fn slot(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            Err(Error::IndexOutOfRange {
                index: k,
                len: self.steps(),
            })
        } else {
            Ok(k - 1)
        }
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn one_minus_alpha(&self, k: usize) -> f64 {
        self.one_minus_alpha[k - 1]
    }

    pub fn cum_alpha(&self, k: usize) -> f64 {
        self.cum_alpha[k - 1]
    }

    /// `1 - cum_alpha(k)`, accurate when `cum_alpha(k)` is close to one.
    pub fn cum_noise(&self, k: usize) -> f64 {
        self.cum_noise[k - 1]
    }

    /// Variance-exploding time for step `k` with the schedule's own `tau`.
    pub fn t(&self, k: usize) -> f64 {
        self.t[k - 1]
    }

    /// `(1 - cum_k) / cum_k + tau` for an arbitrary `tau`.
    pub fn t_of_k(&self, k: usize, tau: f64) -> Result<f64> {
        let i = self.slot(k)?;
        if !(tau >= 0.0) {
            return Err(Error::invalid("tau must be nonnegative"));
        }
        Ok(ve_time(self.cum_alpha[i], self.cum_noise[i], tau))
    }

    pub fn cum_alphas(&self) -> &[f64] {
        &self.cum_alpha
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    /// Audits every inequality of the step-size bounds.
    pub fn validate(&self) -> ValidationReport {
        validate_schedule(self, &self.params)
    }

    /// Writes `k,alpha_k,cum_alpha_k,t_k` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "alpha_k", "cum_alpha_k", "t_k"])?;
        for k in 1..=self.steps() {
            w.write_record([
                k.to_string(),
                format!("{:e}", self.alpha(k)),
                format!("{:e}", self.cum_alpha(k)),
                format!("{:e}", self.t(k)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1 - cum) / cum + tau`, with `noise = 1 - cum` supplied separately.
pub fn ve_time(cum: f64, noise: f64, tau: f64) -> f64 {
    noise / cum + tau
}

fn time_map(cum_alpha: &[f64], cum_noise: &[f64], tau: f64) -> Vec<f64> {
    cum_alpha
        .iter()
        .zip(cum_noise)
        .map(|(&c, &n)| ve_time(c, n, tau))
        .collect()
}

/// Runs the cumulative recursion without the rate guard, stopping at the
/// first level that leaves (0,1). Construction rejects such parameters; this
/// exists to inspect the early levels anyway.
pub fn raw_cum_alpha(params: &ScheduleParams) -> Vec<f64> {
    let rate = params.rate();
    let mut out = Vec::with_capacity(params.steps);
    let mut cum = 1.0 - (params.steps as f64).powf(-params.c0);
    for _ in 0..params.steps {
        if !(cum > 0.0 && cum < 1.0) {
            break;
        }
        out.push(cum);
        cum -= rate * cum * (1.0 - cum);
    }
    out
}

fn check_open_unit(step: usize, value: f64) -> Result<()> {
    if value > CUM_ALPHA_FLOOR && value < 1.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::ScheduleDegenerate { step, value })
    }
}

/// Outcome of one inequality family over all steps `k >= 2`.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Steps at which the inequality failed.
    pub failing_steps: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks, for every `k >= 2`,
///
/// * (a) `1 - a_k < (1 - a_k)/(1 - cum_k) <= r`
/// * (b) `1 < (1 - cum_k)/(1 - cum_{k-1}) <= 1 + r`
/// * (c) `r < (1 - a_k)/(a_k - cum_k) <= 2 r`
/// * (d) `cum_K <= K^{-c1/4}`
///
/// where `r = c1 ln K / K`. The strict lower bounds of (a) and (b) are
/// evaluated through the equivalent differences `(1 - a_k) cum_k / (1 - cum_k) > 0`
/// and `cum_{k-1} - cum_k > 0`; the ratios themselves round to exactly 1 once
/// `cum_k` drops below machine epsilon.
pub fn validate_schedule(s: &Schedule, params: &ScheduleParams) -> ValidationReport {
    let rate = params.rate();
    let mut fail_a = Vec::new();
    let mut fail_b = Vec::new();
    let mut fail_c = Vec::new();

    for k in 2..=s.steps() {
        let oma = s.one_minus_alpha(k);
        let a = s.alpha(k);
        let cum = s.cum_alpha(k);
        let cum_prev = s.cum_alpha(k - 1);
        let noise = s.cum_noise(k);
        let noise_prev = s.cum_noise(k - 1);

        let ratio_a = oma / noise;
        let gap_a = oma * cum / noise;
        if !(gap_a > 0.0 && ratio_a <= rate) {
            fail_a.push(k);
        }

        let ratio_b = noise / noise_prev;
        if !(cum_prev - cum > 0.0 && ratio_b <= 1.0 + rate) {
            fail_b.push(k);
        }

        // a_k - cum_k = a_k (1 - cum_{k-1})
        let ratio_c = oma / (a * noise_prev);
        if !(ratio_c > rate && ratio_c <= 2.0 * rate) {
            fail_c.push(k);
        }
    }

    let k = params.steps as f64;
    let last = s.cum_alpha(s.steps());
    let d_ok = last <= k.powf(-params.c1 / 4.0);

    let mk = |name, fails: Vec<usize>| CheckOutcome {
        name,
        passed: fails.is_empty(),
        failing_steps: fails,
    };
    ValidationReport {
        checks: vec![
            mk("a", fail_a),
            mk("b", fail_b),
            mk("c", fail_c),
            CheckOutcome {
                name: "d",
                passed: d_ok,
                failing_steps: if d_ok { vec![] } else { vec![s.steps()] },
            },
        ],
        warnings: params.warnings(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(k: usize, c0: f64, c1: f64, tau: f64) -> Schedule {
        Schedule::build(ScheduleParams::new(k, c0, c1, tau)).unwrap()
    }

    #[test]
    fn first_two_levels_match_hand_recursion() {
        // K = 10 has c1 ln K / K = 2.76, so only the raw recursion runs.
        let params = ScheduleParams::new(10, 2.0, 12.0, 0.0);
        let levels = raw_cum_alpha(&params);
        assert!((levels[0] - 0.99).abs() < 1e-15);
        // 0.99 - (12 ln 10 / 10) * 0.99 * 0.01
        let expected = 0.99 - (12.0 * 10f64.ln() / 10.0) * 0.99 * 0.01;
        assert!((levels[1] - expected).abs() < 1e-15);
        assert!((levels[1] - 0.962_645_3).abs() < 1e-7);
        assert!(Schedule::build(params).is_err());
    }

    #[test]
    fn final_level_is_tiny() {
        let s = build(1000, 2.0, 12.0, 0.0);
        assert!(s.cum_alpha(1000) <= 1e-9);
    }

    #[test]
    fn rejects_large_rate() {
        let err = Schedule::build(ScheduleParams::new(10, 2.0, 12.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
        assert!(Schedule::build(ScheduleParams::new(1, 2.0, 12.0, 0.0)).is_err());
    }

    #[test]
    fn warns_when_c1_small() {
        let p = ScheduleParams::new(1000, 3.0, 12.0, 0.0);
        assert!(p.warnings().iter().any(|w| w.contains("5 c0")));
        assert!(ScheduleParams::new(1000, 2.0, 12.0, 0.0).warnings().is_empty());
    }

    #[test]
    fn products_reconstruct_cumulative() {
        let s = build(1000, 2.0, 12.0, 0.1);
        let mut prod = 1.0;
        for k in 1..=s.steps() {
            prod *= s.alpha(k);
            let rel = (prod - s.cum_alpha(k)).abs() / s.cum_alpha(k);
            assert!(rel < 1e-12, "k={k} rel={rel}");
            assert!(s.alpha(k) > 0.0 && s.alpha(k) <= 1.0);
            if k > 1 {
                assert!(s.cum_alpha(k) < s.cum_alpha(k - 1));
                assert!(s.t(k) > s.t(k - 1));
            }
            assert_eq!(s.t(k), s.cum_noise(k) / s.cum_alpha(k) + 0.1);
        }
    }

    #[test]
    fn lemma_checks_pass_for_large_k() {
        for (k, c0, c1) in [(1000, 2.0, 12.0), (1000, 3.0, 15.0), (500, 2.0, 12.0)] {
            let s = build(k, c0, c1, 0.0);
            let report = s.validate();
            assert!(report.passed(), "{k} {c0} {c1}: {report:?}");
        }
    }

    #[test]
    fn lemma_check_c_fails_when_rate_exceeds_half() {
        // c1 ln K / K = 0.5526 for K = 100, so a_k drops below 1/2 late in
        // the chain and (1 - a_k)/(a_k - cum_k) = r / a_k exceeds 2r.
        let s = build(100, 2.0, 12.0, 0.0);
        let report = s.validate();
        assert!(report.check("a").unwrap().passed);
        assert!(report.check("b").unwrap().passed);
        assert!(report.check("d").unwrap().passed);
        assert!(!report.check("c").unwrap().passed);
    }

    #[test]
    fn non_monotone_schedule_fails_b() {
        let params = ScheduleParams::new(4, 2.0, 1.0, 0.0);
        let s = Schedule::from_cum_alpha(params, vec![0.9, 0.95, 0.5, 0.1]).unwrap();
        let report = validate_schedule(&s, &params);
        let b = report.check("b").unwrap();
        assert!(!b.passed);
        assert!(b.failing_steps.contains(&2));
    }

    #[test]
    fn time_map_examples() {
        let params = ScheduleParams::new(2, 1.0, 0.1, 0.0);
        let s = Schedule::from_cum_alpha(params, vec![0.99, 0.5]).unwrap();
        assert_eq!(s.t_of_k(2, 0.0).unwrap(), 1.0);
        assert!((s.t_of_k(1, 0.01).unwrap() - (0.01 / 0.99 + 0.01)).abs() < 1e-15);
        assert!((s.t_of_k(1, 0.01).unwrap() - 0.020_101_0).abs() < 1e-7);
        assert!(s.t_of_k(0, 0.0).is_err());
        assert!(s.t_of_k(3, 0.0).is_err());
        // cum -> 1 limit leaves only tau
        assert!((ve_time(1.0 - 1e-17, 1e-17, 0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = build(100, 2.0, 12.0, 0.0);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,alpha_k,cum_alpha_k,t_k"));
        assert_eq!(lines.count(), 100);
    }
}
