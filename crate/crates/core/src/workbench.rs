//! Experiment drivers: configuration, default step counts and smoothing,
//! and the commands behind the `flowode` binary. Every command writes its
//! outputs atomically into the output directory together with a
//! `manifest.json` that carries the config hash and the SHA-256 of each file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{hash_file, sha256_hex, write_atomic, write_matrix_bytes, Dataset, FileFormat};
use crate::error::{Error, Result};
use crate::evaluation::{
    bias_vs_tau, psd_audit, rate_fit, score_error_at_time, score_errors, tv_histogram, BiasRow, Grid,
    PsdAuditReport, RateFit, Reference, ScoreErrorReport, TvReport,
};
use crate::kernel::EvalMode;
use crate::oracle::{oracle_sample, OracleMixture};
use crate::rng::derive_seed;
use crate::sampler::{
    sample, EstimatedSource, InitNoise, InputHash, OracleVpSource, RunRecord, SampleOptions, SampleOutput,
    SourceTag,
};
use crate::schedule::{validate_schedule, Schedule, ScheduleParams, ValidationReport};
use crate::score::ScoreEstimator;

/// Cap on fixed-point iterations for the default step count.
pub const STEP_ITERATIONS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Estimated,
    Oracle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Exact,
    #[default]
    Truncated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Histogram TV between sampler output and the target (d <= 2).
    Tv,
    /// Squared score error at the fixed time `eval_t`.
    EpsScT,
    /// Aggregate score error along the chain.
    EpsSc,
    /// Aggregate Jacobian error along the chain.
    EpsJcb,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Tv => "tv",
            Metric::EpsScT => "eps_sc_t",
            Metric::EpsSc => "eps_sc",
            Metric::EpsJcb => "eps_jcb",
        }
    }
}

fn default_c0() -> f64 {
    2.0
}
fn default_c1() -> f64 {
    12.0
}
fn default_count() -> usize {
    1000
}
fn default_eps() -> f64 {
    1e-6
}
fn default_mc() -> usize {
    1000
}
fn default_eval_steps() -> usize {
    32
}
fn default_eval_t() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::Tv, Metric::EpsScT, Metric::EpsSc, Metric::EpsJcb]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. Relative paths are resolved against the directory of
/// the config file when it is loaded with [`ExperimentConfig::load`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixture spec (JSON).
    pub target: PathBuf,
    /// Training data for the estimator; required by `sample` with the
    /// estimated source, `fit-eval` and `psd-audit`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Training-set sizes for the rate study.
    #[serde(default)]
    pub n: Vec<usize>,
    /// Seeds for independent training sets; rate-study metrics are averaged
    /// over them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for sampling and Monte Carlo.
    #[serde(default)]
    pub seed: u64,
    /// `K`; defaults to the fixed point of `K = n^(beta/(d+2 beta)) (ln K)^3`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Defaults to `n^(-2/(d+2 beta))`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    /// Number of sampler trajectories.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub source: SourceKind,
    #[serde(default)]
    pub kernel: KernelKind,
    /// Truncation tolerance, relative to the density threshold.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub init: InitNoise,
    /// Monte Carlo draws per evaluated step.
    #[serde(default = "default_mc")]
    pub mc: usize,
    /// Number of evenly spaced steps at which chain errors are measured.
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    /// Time of the fixed-time score error.
    #[serde(default = "default_eval_t")]
    pub eval_t: f64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub capture: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(target: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            target: target.into(),
            dataset: None,
            n: Vec::new(),
            seeds: default_seeds(),
            seed: 0,
            steps: None,
            tau: None,
            c0: default_c0(),
            c1: default_c1(),
            count: default_count(),
            source: SourceKind::default(),
            kernel: KernelKind::default(),
            eps: default_eps(),
            init: InitNoise::default(),
            mc: default_mc(),
            eval_steps: default_eval_steps(),
            eval_t: default_eval_t(),
            metrics: default_metrics(),
            capture: false,
            output_dir: default_output_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c: ExperimentConfig = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.target);
        if let Some(d) = c.dataset.as_mut() {
            resolve(d);
        }
        resolve(&mut c.output_dir);
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.kernel {
            KernelKind::Exact => EvalMode::Exact,
            KernelKind::Truncated => EvalMode::truncated(self.eps),
        }
    }

    fn mixture(&self) -> Result<OracleMixture> {
        OracleMixture::load(&self.target)
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::invalid("this command needs a dataset path"))?;
        Dataset::load(path)
    }

    /// Schedule for a training set of size `n` in dimension `d`.
    pub fn schedule_for(&self, n: usize, d: usize, beta: f64) -> Result<Schedule> {
        let steps = match self.steps {
            Some(k) => k,
            None => default_steps(n, d, beta)?,
        };
        let tau = match self.tau {
            Some(t) => t,
            None => default_tau(n, d, beta)?,
        };
        Schedule::build(ScheduleParams::new(steps, self.c0, self.c1, tau))
    }
}

fn check_rate_inputs(n: usize, beta: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("n = {n} must be at least 2")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta = {beta} must be positive")));
    }
    Ok(())
}

/// `tau = n^(-2/(d+2 beta))`.
pub fn default_tau(n: usize, d: usize, beta: f64) -> Result<f64> {
    check_rate_inputs(n, beta)?;
    Ok((n as f64).powf(-2.0 / (d as f64 + 2.0 * beta)))
}

/// `K = ceil(n^(beta/(d+2 beta)) (ln K)^3)` by fixed-point iteration from
/// `K = ceil(n^(beta/(d+2 beta)))`, stopped after [`STEP_ITERATIONS`] rounds.
pub fn default_steps(n: usize, d: usize, beta: f64) -> Result<usize> {
    check_rate_inputs(n, beta)?;
    let a = (n as f64).powf(beta / (d as f64 + 2.0 * beta));
    let mut k = a.ceil().max(3.0);
    for _ in 0..STEP_ITERATIONS {
        let next = (a * k.ln().powi(3)).ceil().max(3.0);
        if next == k {
            break;
        }
        k = next;
    }
    Ok(k as usize)
}

/// One file written by a command.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<ManifestEntry>,
}

/// Collects outputs in memory and commits them to disk only once the
/// command has succeeded, so a failure leaves no partial files behind.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn commit(self, command: &str, config_hash: &str) -> Result<Manifest> {
        fs::create_dir_all(&self.dir)?;
        let mut files = Vec::new();
        for (name, bytes) in &self.files {
            write_atomic(&self.dir.join(name), bytes)?;
            files.push(ManifestEntry {
                path: name.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(format!("{command}.manifest.json")), &bytes)?;
        Ok(manifest)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    f(&mut out)?;
    Ok(out)
}

/// Builds and validates a schedule, writing its CSV to `out` when given.
/// Fails with a validation error when any inequality family fails.
pub fn cmd_schedule(params: ScheduleParams, out: Option<&Path>) -> Result<(Schedule, ValidationReport)> {
    let s = Schedule::build(params)?;
    let report = validate_schedule(&s, &params);
    if let Some(path) = out {
        let bytes = csv_bytes(|b| s.write_csv(b))?;
        write_atomic(path, &bytes)?;
    }
    if !report.passed() {
        let failing: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({} steps)", c.name, c.failing_steps.len()))
            .collect();
        return Err(Error::Validation(format!("schedule checks failed: {}", failing.join(", "))));
    }
    Ok((s, report))
}

/// The `eval_steps` evenly spaced steps in `1..=K`, always including both ends.
pub fn eval_steps(total: usize, wanted: usize) -> Vec<usize> {
    if wanted >= total {
        return (1..=total).collect();
    }
    let wanted = wanted.max(2);
    let mut ks: Vec<usize> = (0..wanted)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (wanted - 1) as f64).round() as usize)
        .collect();
    ks.dedup();
    ks
}

/// Score and Jacobian errors of the estimator fitted to the configured
/// dataset.
pub fn cmd_fit_eval(cfg: &ExperimentConfig) -> Result<ScoreErrorReport> {
    let m = cfg.mixture()?;
    let data = cfg.dataset()?;
    let s = cfg.schedule_for(data.len(), data.dim(), m.beta_nominal)?;
    let est = ScoreEstimator::new(data, cfg.eval_mode())?;
    let ks = eval_steps(s.steps(), cfg.eval_steps);
    let report = score_errors(&est, &m, &s, &ks, cfg.mc, cfg.seed)?;
    let mut out = Outputs::new(&cfg.output_dir);
    out.add("score_errors.csv", csv_bytes(|b| report.write_csv(b))?);
    out.add_json(
        "score_errors.json",
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "steps": s.steps(),
            "tau": s.tau(),
            "eps_sc": report.eps_sc,
            "eps_jcb": report.eps_jcb,
        }),
    )?;
    out.commit("fit-eval", &cfg.hash())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub output: SampleOutput,
    pub record: RunRecord,
    pub samples_path: PathBuf,
    pub record_path: PathBuf,
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const RECORD_FILE: &str = "samples.run.json";
pub const CAPTURE_FILE: &str = "trajectories.csv";

/// Runs the sampler and persists the samples with a [`RunRecord`] sidecar.
/// `config_path`, when given, is hashed into the record so replay can
/// detect edits to it.
pub fn cmd_sample(cfg: &ExperimentConfig, config_path: Option<&Path>) -> Result<SampleResult> {
    let started = Instant::now();
    let m = cfg.mixture()?;
    let mut inputs = Vec::new();
    if let Some(p) = config_path {
        inputs.push(input_hash(p)?);
    }
    inputs.push(input_hash(&cfg.target)?);

    let (data, d) = match cfg.source {
        SourceKind::Estimated => {
            let path = cfg
                .dataset
                .as_ref()
                .ok_or_else(|| Error::invalid("the estimated source needs a dataset path"))?;
            inputs.push(input_hash(path)?);
            let data = Dataset::load(path)?;
            if data.dim() != m.dim() {
                return Err(Error::DimensionMismatch {
                    expected: m.dim(),
                    found: data.dim(),
                });
            }
            let d = data.dim();
            (Some(data), d)
        }
        SourceKind::Oracle => (None, m.dim()),
    };
    let n = match (&data, cfg.n.first()) {
        (Some(data), _) => data.len(),
        (None, Some(&n)) => n,
        (None, None) if cfg.steps.is_some() && cfg.tau.is_some() => 2,
        (None, None) => {
            return Err(Error::invalid(
                "the oracle source needs steps and tau, or an n to derive them from",
            ))
        }
    };
    let s = cfg.schedule_for(n, d, m.beta_nominal)?;
    let opts = SampleOptions {
        count: cfg.count,
        seed: cfg.seed,
        init: cfg.init,
    };

    fs::create_dir_all(&cfg.output_dir)?;
    let capture_path = cfg.output_dir.join(CAPTURE_FILE);
    let capture_tmp = cfg.output_dir.join(format!(".{CAPTURE_FILE}.partial"));
    let mut capture_file = if cfg.capture {
        Some(std::io::BufWriter::new(fs::File::create(&capture_tmp)?))
    } else {
        None
    };
    let capture = capture_file.as_mut().map(|f| f as &mut dyn std::io::Write);
    let run = match data {
        Some(data) => {
            let src = EstimatedSource {
                estimator: ScoreEstimator::new(data, cfg.eval_mode())?,
            };
            sample(&s, &src, opts, capture)
        }
        None => sample(&s, &OracleVpSource { mixture: m }, opts, capture),
    };
    drop(capture_file);
    let output = match run {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::remove_file(&capture_tmp);
            return Err(e);
        }
    };

    let bytes = write_matrix_bytes(&output.samples, d, FileFormat::Csv);
    let samples_path = cfg.output_dir.join(SAMPLES_FILE);
    write_atomic(&samples_path, &bytes)?;
    if cfg.capture {
        fs::rename(&capture_tmp, &capture_path)?;
    }
    let record = RunRecord {
        seed: cfg.seed,
        steps: s.steps(),
        count: cfg.count,
        schedule: *s.params(),
        source: match cfg.source {
            SourceKind::Estimated => SourceTag::Estimated,
            SourceKind::Oracle => SourceTag::OracleVp,
        },
        init: cfg.init,
        wall_time_secs: started.elapsed().as_secs_f64(),
        output: SAMPLES_FILE.to_string(),
        capture: cfg.capture.then(|| CAPTURE_FILE.to_string()),
        inputs,
        config_hash: cfg.hash(),
        output_hash: sha256_hex(&bytes),
        aborted: output.aborted.clone(),
    };
    let record_path = cfg.output_dir.join(RECORD_FILE);
    let mut rec_bytes = serde_json::to_vec_pretty(&serde_json::json!({
        "record": &record,
        "config": cfg,
    }))?;
    rec_bytes.push(b'\n');
    write_atomic(&record_path, &rec_bytes)?;
    Ok(SampleResult {
        output,
        record,
        samples_path,
        record_path,
    })
}

fn input_hash(path: &Path) -> Result<InputHash> {
    Ok(InputHash {
        path: path.to_string_lossy().into_owned(),
        sha256: hash_file(path)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub output_hash: String,
    pub recorded_hash: String,
    /// The seed differed from the record, so this is a new run rather than a
    /// reproduction.
    pub new_run: bool,
    pub identical: bool,
    pub output_dir: PathBuf,
}

#[derive(Deserialize)]
struct StoredRun {
    record: RunRecord,
    config: ExperimentConfig,
}

/// Re-runs a recorded sampling job into `output_dir` after checking that
/// every recorded input still has its recorded hash. With `seed` set to a
/// different value the run is flagged as new.
pub fn replay(record_path: &Path, output_dir: &Path, seed: Option<u64>) -> Result<ReplayOutcome> {
    let stored: StoredRun = serde_json::from_slice(&fs::read(record_path)?)?;
    for input in &stored.record.inputs {
        let found = hash_file(Path::new(&input.path))?;
        if found != input.sha256 {
            return Err(Error::HashMismatch {
                path: PathBuf::from(&input.path),
                expected: input.sha256.clone(),
                found,
            });
        }
    }
    let mut cfg = stored.config;
    if cfg.hash() != stored.record.config_hash {
        return Err(Error::HashMismatch {
            path: record_path.to_path_buf(),
            expected: stored.record.config_hash.clone(),
            found: cfg.hash(),
        });
    }
    let new_run = seed.is_some_and(|s| s != cfg.seed);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.output_dir = output_dir.to_path_buf();
    let r = cmd_sample(&cfg, None)?;
    let identical = r.record.output_hash == stored.record.output_hash;
    Ok(ReplayOutcome {
        output_hash: r.record.output_hash,
        recorded_hash: stored.record.output_hash,
        new_run,
        identical,
        output_dir: cfg.output_dir,
    })
}

/// TV between a sample file and either a second sample file or the
/// target's density at time `t`.
pub fn cmd_tv(
    samples: &Path,
    other: Option<&Path>,
    target: Option<&Path>,
    t: f64,
    grid: Option<Grid>,
    out: Option<&Path>,
) -> Result<TvReport> {
    let a = Dataset::load(samples)?;
    if a.dim() > 2 {
        return Err(Error::invalid("histogram TV is only defined for d <= 2"));
    }
    let m = target.map(OracleMixture::load).transpose()?;
    let grid = match (grid, &m) {
        (Some(g), _) => g,
        (None, Some(m)) => Grid::default_for(m, t)?,
        (None, None) => return Err(Error::invalid("a grid or a target is needed")),
    };
    if grid.dim() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            found: a.dim(),
        });
    }
    let report = match (other, &m) {
        (Some(path), _) => {
            let b = Dataset::load(path)?;
            tv_histogram(a.as_slice(), Reference::Samples(b.as_slice()), &grid)?
        }
        (None, Some(m)) => {
            let f = |x: &[f64]| m.density(x, t);
            tv_histogram(a.as_slice(), Reference::Density(&f), &grid)?
        }
        (None, None) => return Err(Error::invalid("compare against a sample file or a target")),
    };
    if let Some(path) = out {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
    }
    Ok(report)
}

/// Metric values for one training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub data_seed: u64,
    pub values: BTreeMap<Metric, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummaryRow {
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Spread across training sets; zero with a single seed.
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub points: Vec<RatePoint>,
    pub summary: Vec<RateSummaryRow>,
    pub fits: BTreeMap<Metric, RateFit>,
}

/// Runs the full pipeline for one training set: draw `n` points from the
/// target, fit, and measure the configured metrics.
pub fn pipeline_point(cfg: &ExperimentConfig, m: &OracleMixture, n: usize, data_seed: u64) -> Result<RatePoint> {
    let d = m.dim();
    let data = Dataset::new(oracle_sample(m, 0.0, n, derive_seed(data_seed, n as u64))?, d)?;
    let s = cfg.schedule_for(n, d, m.beta_nominal)?;
    let est = ScoreEstimator::new(data, cfg.eval_mode())?;
    let mut values = BTreeMap::new();
    let mut chain: Option<ScoreErrorReport> = None;
    for &metric in &cfg.metrics {
        let v = match metric {
            Metric::Tv => {
                if d > 2 {
                    continue;
                }
                let src = EstimatedSource { estimator: est.clone() };
                let opts = SampleOptions {
                    count: cfg.count,
                    seed: cfg.seed,
                    init: cfg.init,
                };
                let out = sample(&s, &src, opts, None)?;
                let f = |x: &[f64]| m.density(x, 0.0);
                let grid = Grid::default_for(m, 0.0)?;
                // aborted trajectories count as mass outside the grid
                let mut samples = out.samples;
                let far = vec![f64::INFINITY; d * out.aborted.len()];
                samples.extend_from_slice(&far);
                tv_histogram(&samples, Reference::Density(&f), &grid)?.tv
            }
            Metric::EpsScT => score_error_at_time(&est, m, cfg.eval_t, cfg.mc, derive_seed(cfg.seed, 1))?.0,
            Metric::EpsSc | Metric::EpsJcb => {
                if chain.is_none() {
                    let ks = eval_steps(s.steps(), cfg.eval_steps);
                    chain = Some(score_errors(&est, m, &s, &ks, cfg.mc, derive_seed(cfg.seed, 2))?);
                }
                let r = chain.as_ref().expect("computed above");
                if metric == Metric::EpsSc {
                    r.eps_sc
                } else {
                    r.eps_jcb
                }
            }
        };
        values.insert(metric, v);
    }
    Ok(RatePoint { n, data_seed, values })
}

/// Loops over the `n` grid and seeds with `measure`, averages over seeds
/// and fits a log-log slope per metric.
pub fn rate_study_with(
    cfg: &ExperimentConfig,
    mut measure: impl FnMut(usize, u64) -> Result<RatePoint>,
) -> Result<RateStudy> {
    if cfg.n.len() < 4 {
        return Err(Error::invalid(format!(
            "a rate study needs at least 4 values of n, got {}",
            cfg.n.len()
        )));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("at least one data seed is needed"));
    }
    let mut points = Vec::new();
    for &n in &cfg.n {
        for &seed in &cfg.seeds {
            points.push(measure(n, seed)?);
        }
    }
    let metrics: Vec<Metric> = {
        let mut m: Vec<Metric> = points.iter().flat_map(|p| p.values.keys().copied()).collect();
        m.sort();
        m.dedup();
        m
    };
    let mut summary = Vec::new();
    let mut fits = BTreeMap::new();
    for metric in metrics {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in &cfg.n {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.n == n)
                .filter_map(|p| p.values.get(&metric).copied())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let se = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            summary.push(RateSummaryRow { metric, n, mean, se });
            xs.push(n as f64);
            ys.push(mean);
        }
        fits.insert(metric, rate_fit(&xs, &ys)?);
    }
    Ok(RateStudy { points, summary, fits })
}

/// The rate study with the full pipeline, persisted as long-format CSVs
/// plus the fitted slopes.
pub fn cmd_rate_study(cfg: &ExperimentConfig) -> Result<RateStudy> {
    let m = cfg.mixture()?;
    let study = rate_study_with(cfg, |n, seed| pipeline_point(cfg, &m, n, seed))?;
    write_rate_study(cfg, &study)?;
    Ok(study)
}

pub fn write_rate_study(cfg: &ExperimentConfig, study: &RateStudy) -> Result<Manifest> {
    let hash = cfg.hash();
    let mut out = Outputs::new(&cfg.output_dir);
    out.add(
        "rate_points.csv",
        csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["metric", "n", "data_seed", "value", "config_hash"])?;
            for p in &study.points {
                for (metric, v) in &p.values {
                    w.write_record([
                        metric.name().to_string(),
                        p.n.to_string(),
                        p.data_seed.to_string(),
                        format!("{v:e}"),
                        hash.clone(),
                    ])?;
                }
            }
            w.flush()?;
            Ok(())
        })?,
    );
    out.add(
        "rate_summary.csv",
        csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["metric", "n", "mean", "se", "config_hash"])?;
            for r in &study.summary {
                w.write_record([
                    r.metric.name().to_string(),
                    r.n.to_string(),
                    format!("{:e}", r.mean),
                    format!("{:e}", r.se),
                    hash.clone(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?,
    );
    let fits: BTreeMap<&str, &RateFit> = study.fits.iter().map(|(m, f)| (m.name(), f)).collect();
    out.add_json("rate_fits.json", &serde_json::json!({ "config_hash": hash, "fits": fits }))?;
    out.commit("rate-study", &hash)
}

/// PSD audit of the estimator fitted to the configured dataset. Fails with
/// a validation error when the audit does not pass.
pub fn cmd_psd_audit(cfg: &ExperimentConfig, points: usize) -> Result<PsdAuditReport> {
    let m = cfg.mixture()?;
    let data = cfg.dataset()?;
    let s = cfg.schedule_for(data.len(), data.dim(), m.beta_nominal)?;
    let est = ScoreEstimator::new(data, cfg.eval_mode())?;
    let report = psd_audit(&est, &s, points, cfg.seed)?;
    let mut out = Outputs::new(&cfg.output_dir);
    out.add_json(
        "psd_audit.json",
        &serde_json::json!({ "config_hash": cfg.hash(), "report": &report }),
    )?;
    out.commit("psd-audit", &cfg.hash())?;
    if !report.passed {
        return Err(Error::Validation(format!(
            "smallest eigenvalue {:e} is below the tolerance",
            report.min_eigenvalue
        )));
    }
    Ok(report)
}

/// Smoothing bias `TV(p*, p_t)` against `tau`, with `1 - alpha_1 = K^(-c0)`
/// taken from the configured step count.
pub fn cmd_bias_tau(cfg: &ExperimentConfig, taus: &[f64]) -> Result<Vec<BiasRow>> {
    let m = cfg.mixture()?;
    let steps = cfg
        .steps
        .ok_or_else(|| Error::invalid("bias-tau needs the step count K"))?;
    let one_minus_alpha1 = (steps as f64).powf(-cfg.c0);
    let t_max = taus.iter().copied().fold(0.0, f64::max) + one_minus_alpha1;
    let grid = Grid::default_for(&m, t_max)?;
    let rows = bias_vs_tau(&m, taus, one_minus_alpha1, &grid)?;
    let hash = cfg.hash();
    let mut out = Outputs::new(&cfg.output_dir);
    out.add(
        "bias_tau.csv",
        csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["tau", "t", "tv", "config_hash"])?;
            for r in &rows {
                w.write_record([format!("{:e}", r.tau), format!("{:e}", r.t), format!("{:e}", r.tv), hash.clone()])?;
            }
            w.flush()?;
            Ok(())
        })?,
    );
    out.commit("bias-tau", &hash)?;
    Ok(rows)
}

/// Draws `count` points from the target at time `t` and saves them.
pub fn cmd_draw(target: &Path, t: f64, count: usize, seed: u64, out: &Path) -> Result<Dataset> {
    let m = OracleMixture::load(target)?;
    let data = Dataset::new(oracle_sample(&m, t, count, seed)?, m.dim())?;
    data.save(out)?;
    Ok(data)
}
