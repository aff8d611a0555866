//! Deterministic reverse sampler for the probability-flow ODE.
//!
//! Starting from `Y_K ~ N(0, I)`, each step applies
//! `Y_{k-1} = (Y_k + (1 - alpha_k)/2 * s(Y_k, k)) / sqrt(alpha_k)` for
//! `k = K..2`, and the output is `Y_1 / sqrt(alpha_1)`.
//!
//! Work is step-major: a score source is prepared once per step (kernel
//! grids, thresholds) and then evaluated for every live trajectory in
//! parallel. Trajectory `i` draws its starting point from its own counter
//! stream, so results do not depend on the thread count.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::oracle::{oracle_eval, OracleMixture};
use crate::rng::stream_rng;
use crate::schedule::{Schedule, ScheduleParams};
use crate::score::{ScoreEstimator, TimeScorer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Estimated,
    OracleVp,
    Custom,
}

/// A score `s(x, k)` for the VP chain, prepared one step at a time.
pub trait ScoreSource: Sync {
    type Step<'a>: StepScore
    where
        Self: 'a;

    fn tag(&self) -> SourceTag;
    fn dim(&self) -> usize;
    fn prepare<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<Self::Step<'a>>;
}

/// The score at one fixed step.
pub trait StepScore: Sync {
    /// Writes `s(x)` into `out`.
    fn score(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Kernel estimator scores.
pub struct EstimatedSource {
    pub estimator: ScoreEstimator,
}

pub struct EstimatedStep<'a> {
    scorer: TimeScorer<'a>,
    cum: f64,
}

impl ScoreSource for EstimatedSource {
    type Step<'a> = EstimatedStep<'a>;

    fn tag(&self) -> SourceTag {
        SourceTag::Estimated
    }

    fn dim(&self) -> usize {
        self.estimator.dim()
    }

    fn prepare<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<EstimatedStep<'a>> {
        let t = schedule.t_of_k(k, schedule.tau())?;
        Ok(EstimatedStep {
            scorer: self.estimator.at_time(t)?,
            cum: schedule.cum_alpha(k),
        })
    }
}

impl StepScore for EstimatedStep<'_> {
    fn score(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let e = self.scorer.vp(x, self.cum)?;
        out.copy_from_slice(e.s.as_slice());
        Ok(())
    }
}

/// Exact scores of the forward chain started from a mixture.
pub struct OracleVpSource {
    pub mixture: OracleMixture,
}

pub struct OracleStep<'a> {
    mixture: &'a OracleMixture,
    t: f64,
    root: f64,
}

impl ScoreSource for OracleVpSource {
    type Step<'a> = OracleStep<'a>;

    fn tag(&self) -> SourceTag {
        SourceTag::OracleVp
    }

    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn prepare<'a>(&'a self, k: usize, schedule: &Schedule) -> Result<OracleStep<'a>> {
        Ok(OracleStep {
            mixture: &self.mixture,
            t: schedule.t_of_k(k, schedule.tau())?,
            root: schedule.cum_alpha(k).sqrt(),
        })
    }
}

impl StepScore for OracleStep<'_> {
    fn score(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let z: Vec<f64> = x.iter().map(|v| v / self.root).collect();
        let e = oracle_eval(self.mixture, &z, self.t)?;
        for (o, s) in out.iter_mut().zip(e.s.iter()) {
            *o = s / self.root;
        }
        Ok(())
    }
}

/// Any closure `(x, k) -> s`.
pub struct FnSource<F> {
    pub d: usize,
    pub f: F,
}

pub struct FnStep<'a, F> {
    f: &'a F,
    k: usize,
}

impl<F> ScoreSource for FnSource<F>
where
    F: Fn(&[f64], usize, &mut [f64]) + Sync,
{
    type Step<'a> = FnStep<'a, F> where F: 'a;

    fn tag(&self) -> SourceTag {
        SourceTag::Custom
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn prepare<'a>(&'a self, k: usize, _schedule: &Schedule) -> Result<FnStep<'a, F>> {
        Ok(FnStep { f: &self.f, k })
    }
}

impl<F> StepScore for FnStep<'_, F>
where
    F: Fn(&[f64], usize, &mut [f64]) + Sync,
{
    fn score(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(x, self.k, out);
        Ok(())
    }
}

/// How the starting points `Y_K` are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitNoise {
    /// Independent standard normals.
    #[default]
    Gaussian,
    /// One-dimensional stratified normals: trajectory `i` of `m` starts at
    /// `Phi^{-1}((i + U_i) / m)` with `U_i` uniform. Each draw is still
    /// marginally N(0, 1) over a random trajectory index.
    Stratified,
}

/// Reverse step for one trajectory, in place.
#[inline]
pub fn reverse_step(y: &mut [f64], score: &[f64], alpha: f64, one_minus_alpha: f64) {
    let half = 0.5 * one_minus_alpha;
    let inv_root = 1.0 / alpha.sqrt();
    for (yi, si) in y.iter_mut().zip(score) {
        *yi = (*yi + half * si) * inv_root;
    }
}

/// Trajectory stopped because its score was not finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub trajectory: usize,
    pub step: usize,
    pub norm: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Row-major final samples of the trajectories that finished, in
    /// trajectory order.
    pub samples: Vec<f64>,
    pub d: usize,
    pub aborted: Vec<Abort>,
}

impl SampleOutput {
    pub fn count(&self) -> usize {
        self.samples.len() / self.d
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub count: usize,
    pub seed: u64,
    pub init: InitNoise,
}

/// Starting points `Y_K`, row-major.
pub fn initial_noise(count: usize, d: usize, seed: u64, init: InitNoise) -> Result<Vec<f64>> {
    let mut y = vec![0.0; count * d];
    match init {
        InitNoise::Gaussian => {
            y.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
                let mut rng = stream_rng(seed, i as u64);
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            });
        }
        InitNoise::Stratified => {
            if d != 1 {
                return Err(Error::invalid("stratified initial noise needs d = 1"));
            }
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            let m = count as f64;
            y.par_iter_mut().enumerate().for_each(|(i, v)| {
                let mut rng = stream_rng(seed, i as u64);
                // open interval (0, 1) so the quantile stays finite
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                *v = normal.inverse_cdf((i as f64 + u) / m);
            });
        }
    }
    Ok(y)
}

/// Runs the reverse chain. When `capture` is given, every live trajectory's
/// state is streamed to it after each update as CSV rows `k,trajectory,x...`,
/// where `k` is the index of the state just produced (`k = 0` for the output).
pub fn sample<S: ScoreSource>(
    schedule: &Schedule,
    src: &S,
    opts: SampleOptions,
    mut capture: Option<&mut dyn Write>,
) -> Result<SampleOutput> {
    let d = src.dim();
    if opts.count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let steps = schedule.steps();
    let mut y = initial_noise(opts.count, d, opts.seed, opts.init)?;
    let mut failed: Vec<Option<Abort>> = vec![None; opts.count];
    if let Some(w) = capture.as_deref_mut() {
        write_states(w, steps, &y, d, &failed)?;
    }

    let mut scratch = vec![0.0; opts.count * d];
    for k in (2..=steps).rev() {
        let step = src.prepare(k, schedule)?;
        let alpha = schedule.alpha(k);
        let one_minus = schedule.one_minus_alpha(k);
        y.par_chunks_mut(d)
            .zip(scratch.par_chunks_mut(d))
            .zip(failed.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, ((row, s), fail))| -> Result<()> {
                if fail.is_some() {
                    return Ok(());
                }
                step.score(row, s)?;
                if s.iter().any(|v| !v.is_finite()) {
                    *fail = Some(Abort {
                        trajectory: i,
                        step: k,
                        norm: row.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    });
                    return Ok(());
                }
                reverse_step(row, s, alpha, one_minus);
                Ok(())
            })?;
        if let Some(w) = capture.as_deref_mut() {
            write_states(w, k - 1, &y, d, &failed)?;
        }
    }
    let inv_root = 1.0 / schedule.alpha(1).sqrt();
    y.par_iter_mut().for_each(|v| *v *= inv_root);
    if let Some(w) = capture.as_deref_mut() {
        write_states(w, 0, &y, d, &failed)?;
        w.flush()?;
    }

    let mut samples = Vec::with_capacity(y.len());
    let mut aborted = Vec::new();
    for (row, fail) in y.chunks_exact(d).zip(failed) {
        match fail {
            Some(a) => aborted.push(a),
            None => samples.extend_from_slice(row),
        }
    }
    Ok(SampleOutput {
        samples,
        d,
        aborted,
    })
}

fn write_states(
    w: &mut dyn Write,
    k: usize,
    y: &[f64],
    d: usize,
    failed: &[Option<Abort>],
) -> Result<()> {
    for (i, row) in y.chunks_exact(d).enumerate() {
        if failed[i].is_some() {
            continue;
        }
        write!(w, "{k},{i}")?;
        for v in row {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Everything needed to rerun a sampling job bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: usize,
    pub count: usize,
    pub schedule: ScheduleParams,
    pub source: SourceTag,
    pub init: InitNoise,
    pub wall_time_secs: f64,
    pub output: String,
    pub capture: Option<String>,
    /// Paths of the inputs and their SHA-256 hashes at run time.
    pub inputs: Vec<InputHash>,
    pub config_hash: String,
    pub output_hash: String,
    pub aborted: Vec<Abort>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}
