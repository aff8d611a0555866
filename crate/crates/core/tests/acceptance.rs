//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 1 3 10`.

use std::f64::consts::PI;
use std::fs;
use std::time::{Duration, Instant};

use flowode_core::dataset::sha256_hex;
use flowode_core::evaluation::{bias_vs_tau, psd_audit, rate_fit, score_error_at_time, Grid, Reference};
use flowode_core::evaluation::tv_histogram;
use flowode_core::kernel::eval_exact;
use flowode_core::oracle::{oracle_eval, oracle_sample, tweedie_mc_check};
use flowode_core::rng::{derive_seed, stream_rng};
use flowode_core::sampler::{EstimatedSource, OracleVpSource};
use flowode_core::schedule::validate_schedule;
use flowode_core::score::{soft_threshold, soft_threshold_deriv};
use flowode_core::workbench::{
    cmd_sample, default_steps, default_tau, pipeline_point, rate_study_with, ExperimentConfig, Metric, SourceKind,
};
use flowode_core::{
    sample, Dataset, EvalMode, InitNoise, KernelEngine, OracleMixture, Regime, Result, SampleOptions, Schedule,
    ScheduleParams, ScoreEstimator,
};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, u64, Check); 12] = [
        (1, "soft threshold", 1, c1_soft_threshold),
        (2, "schedule step-size inequalities", 1, c2_schedule),
        (3, "kernel identities", 10, c3_kernel_identities),
        (4, "PSD audit", 30, c4_psd_audit),
        (5, "Jacobian vs finite differences", 10, c5_jacobian_fd),
        (6, "oracle consistency", 60, c6_oracle),
        (7, "end-to-end Gaussian", 300, c7_gaussian),
        (8, "score-error rate at fixed t", 600, c8_score_rate),
        (9, "sampling TV rate", 1800, c9_tv_rate),
        (10, "smoothing bias vs tau", 10, c10_bias),
        (11, "truncated-kernel contract", 120, c11_truncation),
        (12, "determinism across thread counts", 120, c12_determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let within = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && within, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let timing = format!("{:.1}s of {budget}s", elapsed.as_secs_f64());
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id:>2} ({name}): {detail} [{timing}]");
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gaussian_1d() -> OracleMixture {
    OracleMixture::gaussian(vec![0.0], 1.0)
}

fn two_bumps() -> OracleMixture {
    OracleMixture::new(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], vec![0.25, 0.25], 1.0, 2.0).unwrap()
}

fn planar_mixture() -> OracleMixture {
    OracleMixture::new(
        vec![0.3, 0.5, 0.2],
        vec![vec![-1.5, 0.0], vec![1.0, 1.0], vec![0.5, -2.0]],
        vec![0.2, 0.5, 0.1],
        1.0,
        2.0,
    )
    .unwrap()
}

fn draw(m: &OracleMixture, n: usize, seed: u64) -> Dataset {
    Dataset::new(oracle_sample(m, 0.0, n, seed).unwrap(), m.dim()).unwrap()
}

fn c1_soft_threshold() -> Result<Outcome> {
    let mut ok = true;
    let mut worst_fd: f64 = 0.0;
    let mut worst_peak: f64 = 0.0;
    for eta in [1e-12, 3e-4, 0.37, 1.0, 42.0] {
        ok &= soft_threshold(eta, eta) == 1.0;
        ok &= soft_threshold(0.5 * eta, eta) == 0.0;
        ok &= soft_threshold(0.75 * eta, eta) == 0.5;
        worst_peak = worst_peak.max((soft_threshold_deriv(0.75 * eta, eta) - 4.0 / eta).abs() / (4.0 / eta));
        for i in 0..100 {
            let x = eta * (0.5 + 0.5 * (i as f64 + 0.5) / 100.0);
            // fourth-order central difference
            let h = 1e-4 * eta;
            let f = |v: f64| soft_threshold(v, eta);
            let fd = (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h);
            let exact = soft_threshold_deriv(x, eta);
            let scale = exact.max(1e-3 / eta);
            worst_fd = worst_fd.max((fd - exact).abs() / scale);
        }
    }
    let pass = ok && worst_fd <= 1e-6 && worst_peak <= 1e-10;
    outcome(
        pass,
        format!("landmarks exact: {ok}; max FD rel err {worst_fd:.2e}; peak rel err {worst_peak:.2e}"),
    )
}

fn c2_schedule() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, c0, c1) in [(100, 2.0, 12.0), (1000, 2.0, 12.0), (1000, 3.0, 15.0)] {
        let params = ScheduleParams::new(k, c0, c1, 0.0);
        let s = Schedule::build(params)?;
        let report = validate_schedule(&s, &params);
        let failing: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} at {} steps", c.name, c.failing_steps.len()))
            .collect();
        pass &= report.passed();
        if failing.is_empty() {
            parts.push(format!("({k},{c0},{c1}) ok"));
        } else {
            parts.push(format!("({k},{c0},{c1}) fails {}", failing.join(", ")));
        }
    }
    outcome(pass, parts.join("; "))
}

fn c3_kernel_identities() -> Result<Outcome> {
    let m = planar_mixture();
    let data = draw(&m, 500, 31);
    let mut rng = stream_rng(32, 0);
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    for _ in 0..100 {
        let t = 10f64.powf(rng.gen_range(-2.0..1.0));
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let e = eval_exact(&data, &x, t)?;
        let h = 1e-4 * t.sqrt();
        for a in 0..2 {
            let at = |s: f64| {
                let mut y = x;
                y[a] += s;
                eval_exact(&data, &y, t).unwrap()
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            let fd_g = (m2.p - 8.0 * m1.p + 8.0 * p1.p - p2.p) / (12.0 * h);
            worst_g = worst_g.max((fd_g - e.g[a]).abs() / (e.g.norm() + e.p / t.sqrt()));
            for b in 0..2 {
                let fd = (m2.g[b] - 8.0 * m1.g[b] + 8.0 * p1.g[b] - p2.g[b]) / (12.0 * h);
                let expected = fd + if a == b { e.p / t } else { 0.0 };
                worst_h = worst_h.max((expected - e.h[(a, b)]).abs() / (e.h.norm() + e.p / t));
            }
        }
    }
    let mut worst_sup: f64 = 0.0;
    let engine = KernelEngine::new(data.clone());
    for i in 0..10_000 {
        let t = 10f64.powf(rng.gen_range(-3.0..2.0));
        // half the points sit right next to a data point, where |g| peaks
        let x: Vec<f64> = if i % 2 == 0 {
            let r = data.row(rng.gen_range(0..data.len()));
            r.iter().map(|v| v + t.sqrt() * rng.gen_range(-1.5..1.5)).collect()
        } else {
            vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]
        };
        let e = engine.eval(&x, t, EvalMode::Exact)?;
        let bound = 1.0 / ((1f64).exp().sqrt() * (2.0 * PI * t) * t.sqrt());
        worst_sup = worst_sup.max(e.g.norm() / bound);
    }
    let pass = worst_g <= 1e-6 && worst_h <= 1e-4 && worst_sup <= 1.0;
    outcome(
        pass,
        format!("g rel err {worst_g:.2e}, H rel err {worst_h:.2e}, max |g|/sup bound {worst_sup:.3}"),
    )
}

fn c4_psd_audit() -> Result<Outcome> {
    let m = planar_mixture();
    let est = ScoreEstimator::new(draw(&m, 2000, 41), EvalMode::truncated(1e-6))?;
    let s = Schedule::build(ScheduleParams::new(1000, 2.0, 12.0, 0.01))?;
    let r = psd_audit(&est, &s, 10_000, 42)?;
    let pass = r.passed && r.above > 0 && r.band > 0 && r.below > 0;
    outcome(
        pass,
        format!(
            "min eigenvalue {:.3e} over {} points (above {}, band {}, below {})",
            r.min_eigenvalue, r.points, r.above, r.band, r.below
        ),
    )
}

fn c5_jacobian_fd() -> Result<Outcome> {
    let mut worst = [0.0f64; 3];
    let mut seen = [0usize; 3];
    let idx = |r: Regime| match r {
        Regime::Above => 0,
        Regime::Band => 1,
        Regime::Below => 2,
    };
    for (m, n) in [(two_bumps(), 400), (planar_mixture(), 600)] {
        let d = m.dim();
        let data = draw(&m, n, 51 + d as u64);
        let est = ScoreEstimator::new(data.clone(), EvalMode::Exact)?;
        let mut rng = stream_rng(52, d as u64);
        for t in [0.01, 0.1, 1.0] {
            let sc = est.at_time(t)?;
            let eta = sc.eta();
            let mut points: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            // band points by bisection on rays leaving data points
            for _ in 0..30 {
                let anchor = data.row(rng.gen_range(0..n)).to_vec();
                let dir: Vec<f64> = {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.iter().map(|a| a / norm).collect()
                };
                let at = |s: f64| -> Vec<f64> { anchor.iter().zip(&dir).map(|(a, u)| a + s * u).collect() };
                if sc.kernel(&anchor)?.p < 0.75 * eta {
                    continue;
                }
                let (mut lo, mut hi) = (0.0, 20.0);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if sc.kernel(&at(mid))?.p >= 0.75 * eta {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                points.push(at(0.5 * (lo + hi)));
            }
            for x in points {
                let e = sc.ve(&x)?;
                let h = 1e-5 * t.sqrt();
                let mut err: f64 = 0.0;
                for b in 0..d {
                    let shifted = |s: f64| {
                        let mut y = x.clone();
                        y[b] += s;
                        sc.ve(&y).unwrap().s
                    };
                    let (p2, p1, m1, m2) = (shifted(2.0 * h), shifted(h), shifted(-h), shifted(-2.0 * h));
                    for a in 0..d {
                        let fd = (m2[a] - 8.0 * m1[a] + 8.0 * p1[a] - p2[a]) / (12.0 * h);
                        err = err.max((fd - e.j[(a, b)]).abs());
                    }
                }
                let rel = err / (e.j.norm() + 1.0 / t);
                let i = idx(e.regime);
                seen[i] += 1;
                worst[i] = worst[i].max(rel);
            }
        }
    }
    let pass = seen.iter().all(|&c| c > 0) && worst.iter().all(|&w| w <= 1e-4);
    outcome(
        pass,
        format!(
            "max rel err above {:.2e} ({} pts), band {:.2e} ({} pts), below {:.2e} ({} pts)",
            worst[0], seen[0], worst[1], seen[1], worst[2], seen[2]
        ),
    )
}

fn c6_oracle() -> Result<Outcome> {
    let mut worst_fd: f64 = 0.0;
    for m in [two_bumps(), planar_mixture()] {
        let d = m.dim();
        let mut rng = stream_rng(61, d as u64);
        for t in [0.0, 0.05, 1.0, 10.0] {
            for _ in 0..50 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let e = oracle_eval(&m, &x, t)?;
                let min_var = m.variances.iter().copied().fold(f64::INFINITY, f64::min) + t;
                let h = 1e-4 * min_var.sqrt();
                for a in 0..d {
                    let lp = |s: f64| {
                        let mut y = x.clone();
                        y[a] += s;
                        oracle_eval(&m, &y, t).unwrap().log_p
                    };
                    let fd = (lp(-2.0 * h) - 8.0 * lp(-h) + 8.0 * lp(h) - lp(2.0 * h)) / (12.0 * h);
                    worst_fd = worst_fd.max((fd - e.s[a]).abs() / (e.s.norm() + 1.0 / min_var.sqrt()));
                }
            }
        }
    }

    let m = two_bumps();
    let mut rng = stream_rng(62, 0);
    let mut worst_z: f64 = 0.0;
    let mut reliable = true;
    for i in 0..20 {
        let t = [0.1, 0.5, 1.0, 2.0][i % 4];
        let x = [rng.gen_range(-3.0..3.0)];
        let est = tweedie_mc_check(&m, &x, t, 200_000, derive_seed(63, i as u64))?;
        reliable &= est.reliable;
        let exact = oracle_eval(&m, &x, t)?.s;
        worst_z = worst_z.max((est.estimate[0] - exact[0]).abs() / est.std_err[0]);
    }

    let mut moments_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for d in [1usize, 2, 3] {
        for (var, t) in [(1.0, 0.01), (0.1, 0.1), (2.0, 1.0)] {
            let g = OracleMixture::gaussian(vec![0.0; d], var);
            let xs = oracle_sample(&g, t, 100_000, derive_seed(64, d as u64))?;
            let mean_sq: f64 = xs
                .chunks_exact(d)
                .map(|x| oracle_eval(&g, x, t).unwrap().s.norm_squared())
                .sum::<f64>()
                / 100_000.0;
            let bound = 2.0 * d as f64 / t;
            worst_ratio = worst_ratio.max(mean_sq / bound);
            moments_ok &= mean_sq <= bound;
        }
    }
    let pass = worst_fd <= 1e-7 && worst_z <= 3.0 && reliable && moments_ok;
    outcome(
        pass,
        format!(
            "score vs FD log p rel err {worst_fd:.2e}; Tweedie max |z| {worst_z:.2} (reliable {reliable}); max E|s|^2 / (2d/t) {worst_ratio:.3}"
        ),
    )
}

fn c7_gaussian() -> Result<Outcome> {
    let m = gaussian_1d();
    let s = Schedule::build(ScheduleParams::new(500, 2.0, 12.0, 0.0))?;
    let opts = SampleOptions {
        count: 100_000,
        seed: 71,
        init: InitNoise::Gaussian,
    };
    let out = sample(&s, &OracleVpSource { mixture: m.clone() }, opts, None)?;
    let n = out.samples.len() as f64;
    let mean = out.samples.iter().sum::<f64>() / n;
    let var = out.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let oracle_ok = mean.abs() <= 0.02 && (var - 1.0).abs() <= 0.03;

    let n_train = 4096;
    let est = ScoreEstimator::new(draw(&m, n_train, 72), EvalMode::truncated(1e-6))?;
    let steps = default_steps(n_train, 1, 2.0)?;
    let tau = default_tau(n_train, 1, 2.0)?;
    let s = Schedule::build(ScheduleParams::new(steps, 2.0, 12.0, tau))?;
    let opts = SampleOptions {
        count: 4000,
        seed: 73,
        init: InitNoise::Stratified,
    };
    let out = sample(&s, &EstimatedSource { estimator: est }, opts, None)?;
    let mut samples = out.samples;
    samples.extend(std::iter::repeat(f64::INFINITY).take(out.aborted.len()));
    let f = |x: &[f64]| m.density(x, 0.0);
    let tv = tv_histogram(&samples, Reference::Density(&f), &Grid::default_for(&m, 0.0)?)?;
    let estimated_ok = tv.tv <= 0.10;
    outcome(
        oracle_ok && estimated_ok,
        format!(
            "oracle K=500: mean {mean:.4}, variance {var:.4} ({}); estimated n={n_train} K={steps} tau={tau:.4}: TV {:.4} ({})",
            if oracle_ok { "ok" } else { "outside +-0.02 / +-3%" },
            tv.tv,
            if estimated_ok { "ok" } else { "above 0.10" }
        ),
    )
}

const N_GRID: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

fn c8_score_rate() -> Result<Outcome> {
    let m = gaussian_1d();
    let mut ys = Vec::new();
    for &n in &N_GRID {
        let mut total = 0.0;
        let reps = 16;
        for rep in 0..reps {
            let data = draw(&m, n, derive_seed(81, (n * 100 + rep) as u64));
            let est = ScoreEstimator::new(data, EvalMode::truncated(1e-6))?;
            total += score_error_at_time(&est, &m, 1.0, 20_000, derive_seed(82, rep as u64))?.0;
        }
        ys.push(total / reps as f64);
    }
    let xs: Vec<f64> = N_GRID.iter().map(|&n| n as f64).collect();
    let fit = rate_fit(&xs, &ys)?;
    let pass = (-1.25..=-0.75).contains(&fit.slope);
    let values: Vec<String> = ys.iter().map(|v| format!("{v:.2e}")).collect();
    outcome(
        pass,
        format!("slope {:.3} (r2 {:.3}); eps_sc^2 = [{}]", fit.slope, fit.r2, values.join(", ")),
    )
}

fn c9_tv_rate() -> Result<Outcome> {
    let m = two_bumps();
    let mut cfg = ExperimentConfig::new("unused.json");
    cfg.n = N_GRID.to_vec();
    cfg.seeds = vec![0, 1];
    cfg.seed = 91;
    cfg.count = 3000;
    cfg.init = InitNoise::Stratified;
    cfg.metrics = vec![Metric::Tv];
    let study = rate_study_with(&cfg, |n, seed| pipeline_point(&cfg, &m, n, seed))?;
    let fit = &study.fits[&Metric::Tv];
    let means: Vec<f64> = study.summary.iter().map(|r| r.mean).collect();
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    let pass = (-0.65..=-0.15).contains(&fit.slope) && monotone;
    let values: Vec<String> = means.iter().map(|v| format!("{v:.4}")).collect();
    outcome(
        pass,
        format!("slope {:.3} (r2 {:.3}); TV = [{}]; strictly decreasing {monotone}", fit.slope, fit.r2, values.join(", ")),
    )
}

fn c10_bias() -> Result<Outcome> {
    let taus = [0.01, 0.02, 0.04, 0.08];
    let one_minus_alpha1 = 1000f64.powf(-2.0);
    let mut monotone = true;
    let mut tables = Vec::new();
    for m in [gaussian_1d(), two_bumps()] {
        let grid = Grid::default_for(&m, 0.1)?;
        let rows = bias_vs_tau(&m, &taus, one_minus_alpha1, &grid)?;
        monotone &= rows.windows(2).all(|w| w[0].tv <= w[1].tv);
        let tvs: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.tv)).collect();
        tables.push(format!("[{}]", tvs.join(", ")));
    }
    let m = gaussian_1d();
    let grid = Grid::default_for(&m, 0.04)?;
    let numeric = bias_vs_tau(&m, &[0.04], 0.0, &grid)?[0].tv;
    // independent reference: the two densities cross at x0^2 = v ln v / (v - 1)
    let v: f64 = 1.04;
    let x0 = (v * v.ln() / (v - 1.0)).sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let closed = 2.0 * (std.cdf(x0) - std.cdf(x0 / v.sqrt()));
    let close = (numeric - closed).abs() <= 1e-3;
    outcome(
        monotone && close,
        format!(
            "tables {} monotone {monotone}; TV(N(0,1), N(0,1.04)) grid {numeric:.6} vs closed form {closed:.6}",
            tables.join(" ")
        ),
    )
}

fn c11_truncation() -> Result<Outcome> {
    // adversarial queries: on data points, at cell edges, between clusters,
    // on duplicated points and far away, at small and large bandwidths
    let mut worst: f64 = 0.0;
    let mut queries = 0;
    let mut clustered = oracle_sample(&planar_mixture(), 0.0, 3000, 111)?;
    let dup = clustered[..200].to_vec();
    clustered.extend_from_slice(&dup);
    let datasets = [
        Dataset::new(clustered, 2)?,
        draw(&two_bumps(), 5000, 112),
        Dataset::new((0..4000).map(|i| (i % 2000) as f64 * 1e-3).collect(), 1)?,
    ];
    let mut rng = stream_rng(113, 0);
    for data in &datasets {
        let engine = KernelEngine::new(data.clone());
        let d = data.dim();
        for qi in 0..334 {
            let t: f64 = [1e-4, 1e-2, 0.3, 5.0, 1e3][qi % 5];
            let mode = match qi % 3 {
                0 => EvalMode::truncated(1e-6),
                1 => EvalMode::truncated(1e-12),
                _ => EvalMode::cutoff_only(1e-9),
            };
            let base = data.row(rng.gen_range(0..data.len()));
            let x: Vec<f64> = match qi % 4 {
                0 => base.to_vec(),
                1 => base.iter().map(|v| (v / t.sqrt()).round() * t.sqrt()).collect(),
                2 => base.iter().map(|v| v + rng.gen_range(-3.0..3.0) * t.sqrt()).collect(),
                _ => (0..d).map(|_| rng.gen_range(-30.0..30.0)).collect(),
            };
            let exact = engine.eval_exact(&x, t)?;
            let tr = engine.eval(&x, t, mode)?;
            let b = tr.truncation_error_bound;
            // the exact path carries its own summation rounding
            let slack = 4.0 * f64::EPSILON;
            let mut ratio = (tr.p - exact.p).abs() / (b + slack * exact.p).max(f64::MIN_POSITIVE);
            for a in 0..d {
                let dg = (tr.g[a] - exact.g[a]).abs();
                ratio = ratio.max(dg / (b / t.sqrt() + slack * exact.g.norm()).max(f64::MIN_POSITIVE));
                for c in 0..d {
                    let dh = (tr.h[(a, c)] - exact.h[(a, c)]).abs();
                    ratio = ratio.max(dh / (b / t + slack * exact.h.norm()).max(f64::MIN_POSITIVE));
                }
            }
            worst = worst.max(ratio);
            queries += 1;
        }
    }

    // uniform points on [0, 10]^2 at t = 0.01
    let n = 100_000;
    let mut r = stream_rng(114, 0);
    let pts: Vec<f64> = (0..2 * n).map(|_| r.gen_range(0.0..10.0)).collect();
    let engine = KernelEngine::new(Dataset::new(pts, 2)?);
    let t = 0.01;
    let scale = engine.at_scale(t, EvalMode::cutoff_only(1e-8))?;
    let mut evals = 0usize;
    let q = 1000;
    for _ in 0..q {
        let x = [r.gen_range(0.0..10.0), r.gen_range(0.0..10.0)];
        evals += scale.eval(&x)?.kernel_evaluations;
    }
    let reduction = (n * q) as f64 / evals as f64;
    let pass = worst <= 1.0 && queries >= 1000 && reduction >= 10.0;
    outcome(
        pass,
        format!("{queries} queries, max deviation / bound {worst:.3}; evaluation reduction {reduction:.1}x"),
    )
}

fn c12_determinism() -> Result<Outcome> {
    let dir = tempfile::TempDir::new()?;
    let target = dir.path().join("target.json");
    fs::write(&target, serde_json::to_vec(&two_bumps())?)?;
    let data_path = dir.path().join("train.csv");
    draw(&two_bumps(), 1000, 121).save(&data_path)?;
    let mut hashes = Vec::new();
    for threads in [1, 4, 8, 1] {
        let mut cfg = ExperimentConfig::new(&target);
        cfg.dataset = Some(data_path.clone());
        cfg.source = SourceKind::Estimated;
        cfg.steps = Some(400);
        cfg.tau = Some(0.05);
        cfg.count = 2000;
        cfg.seed = 122;
        cfg.output_dir = dir.path().join(format!("run{}", hashes.len()));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        let r = pool.install(|| cmd_sample(&cfg, None))?;
        let file_hash = sha256_hex(&fs::read(&r.samples_path)?);
        hashes.push((threads, file_hash, r.record.output_hash));
    }
    let first = &hashes[0].1;
    let same = hashes.iter().all(|(_, f, r)| f == first && r == first);
    outcome(
        same,
        format!("threads 1, 4, 8, 1: checksums {}", if same { &first[..16] } else { "differ" }),
    )
}
