use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowode_core::evaluation::Grid;
use flowode_core::workbench::{self, ExperimentConfig, KernelKind, SourceKind};
use flowode_core::{Error, InitNoise, Result, ScheduleParams};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "flowode", version, about = "Kernel-score probability-flow sampler workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a schedule, validate it and dump it as CSV.
    Schedule {
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        c0: f64,
        #[arg(long, default_value_t = 12.0)]
        c1: f64,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a dataset from a mixture target.
    Draw {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smoothing time of the draw.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// `.bin` writes the binary format, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score and Jacobian errors of the estimator along the chain.
    FitEval(ConfigArgs),
    /// Run the sampler and write samples plus a run record.
    Sample(ConfigArgs),
    /// Histogram TV between samples and a second sample or a target density.
    Tv {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, conflicts_with = "target")]
        other: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Time at which the target density is smoothed.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// Grid lower corner, one value per axis.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, requires_all = ["hi", "bins"])]
        lo: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        hi: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline over a grid of training-set sizes with slope fits.
    RateStudy(ConfigArgs),
    /// Check J + I/(1 - cum_k) >= 0 at sampled points.
    PsdAudit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 10_000)]
        points: usize,
    },
    /// Smoothing bias TV(p*, p_t) for a list of tau values.
    BiasTau {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.04,0.08")]
        taus: Vec<f64>,
    },
    /// Re-run a recorded sampling job and compare checksums.
    Replay {
        /// The `samples.run.json` sidecar.
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use a different seed; the result is reported as a new run.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Estimated,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Exact,
    Truncated,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Gaussian,
    Stratified,
}

/// A config file, a bare target, and per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    capture: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, &self.target) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(target)) => ExperimentConfig::new(target.clone()),
            (None, None) => {
                return Err(Error::InvalidParameter("pass --config or --target".into()));
            }
        };
        if self.config.is_some() {
            if let Some(t) = &self.target {
                c.target = t.clone();
            }
        }
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        if let Some(n) = &self.n {
            c.n = n.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.steps.is_some() {
            c.steps = self.steps;
        }
        if self.tau.is_some() {
            c.tau = self.tau;
        }
        if let Some(v) = self.count {
            c.count = v;
        }
        if let Some(s) = self.source {
            c.source = match s {
                SourceArg::Estimated => SourceKind::Estimated,
                SourceArg::Oracle => SourceKind::Oracle,
            };
        }
        if let Some(k) = self.kernel {
            c.kernel = match k {
                KernelArg::Exact => KernelKind::Exact,
                KernelArg::Truncated => KernelKind::Truncated,
            };
        }
        if let Some(i) = self.init {
            c.init = match i {
                InitArg::Gaussian => InitNoise::Gaussian,
                InitArg::Stratified => InitNoise::Stratified,
            };
        }
        if let Some(mc) = self.mc {
            c.mc = mc;
        }
        if self.capture {
            c.capture = true;
        }
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        Ok(c)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Schedule {
            steps,
            c0,
            c1,
            tau,
            out,
        } => {
            let params = ScheduleParams::new(steps, c0, c1, tau);
            for w in params.warnings() {
                eprintln!("warning: {w}");
            }
            let result = workbench::cmd_schedule(params, out.as_deref());
            if let Ok((s, _)) = &result {
                if out.is_none() {
                    s.write_csv(std::io::stdout().lock())?;
                }
                eprintln!("validation PASS");
            }
            result.map(|_| ())
        }
        Command::Draw {
            target,
            count,
            seed,
            t,
            out,
        } => {
            let data = workbench::cmd_draw(&target, t, count, seed, &out)?;
            eprintln!("wrote {} points (d = {}) to {}", data.len(), data.dim(), out.display());
            Ok(())
        }
        Command::FitEval(args) => {
            let r = workbench::cmd_fit_eval(&args.resolve()?)?;
            print_json(&serde_json::json!({ "eps_sc": r.eps_sc, "eps_jcb": r.eps_jcb }))
        }
        Command::Sample(args) => {
            let cfg = args.resolve()?;
            let config_path = args.config.as_deref();
            let r = workbench::cmd_sample(&cfg, config_path)?;
            if !r.record.aborted.is_empty() {
                eprintln!(
                    "{} trajectories aborted on non-finite scores (first at step {})",
                    r.record.aborted.len(),
                    r.record.aborted[0].step
                );
            }
            print_json(&serde_json::json!({
                "samples": r.samples_path,
                "record": r.record_path,
                "output_hash": r.record.output_hash,
                "aborted": r.record.aborted.len(),
            }))
        }
        Command::Tv {
            samples,
            other,
            target,
            t,
            lo,
            hi,
            bins,
            out,
        } => {
            let grid = match (lo, hi, bins) {
                (Some(lo), Some(hi), Some(bins)) => Some(Grid::new(lo, hi, bins)?),
                _ => None,
            };
            let r = workbench::cmd_tv(&samples, other.as_deref(), target.as_deref(), t, grid, out.as_deref())?;
            print_json(&serde_json::json!({ "tv": r.tv, "outside": r.outside, "method": r.method }))
        }
        Command::RateStudy(args) => {
            let study = workbench::cmd_rate_study(&args.resolve()?)?;
            let fits: Vec<_> = study
                .fits
                .iter()
                .map(|(m, f)| serde_json::json!({ "metric": m.name(), "slope": f.slope, "r2": f.r2 }))
                .collect();
            print_json(&fits)
        }
        Command::PsdAudit { config, points } => {
            let r = workbench::cmd_psd_audit(&config.resolve()?, points)?;
            print_json(&r)
        }
        Command::BiasTau { config, taus } => {
            let rows = workbench::cmd_bias_tau(&config.resolve()?, &taus)?;
            print_json(&rows)
        }
        Command::Replay { record, out, seed } => {
            let r = workbench::replay(&record, &out, seed)?;
            print_json(&r)?;
            if !r.new_run && !r.identical {
                return Err(Error::Validation("replayed output differs from the record".into()));
            }
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLOWODE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("FLOWODE_THREADS = {v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
