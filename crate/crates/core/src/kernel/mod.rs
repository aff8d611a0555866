//! Gaussian kernel sums over a frozen dataset.
//!
//! For training points `X_i`, a query `x` and bandwidth `t > 0`:
//!
//! ```text
//! p(x) = 1/n       sum_i phi_t(X_i - x)
//! g(x) = 1/(n t)   sum_i (X_i - x) phi_t(X_i - x)          (= grad p)
//! H(x) = 1/(n t^2) sum_i (X_i - x)(X_i - x)^T phi_t(X_i - x)
//! ```
//!
//! The exact path sums every point in dataset order. The truncated path
//! skips points beyond a cutoff radius and may replace dense cells by
//! Taylor expansions; whatever it does, the deviation from the exact path is
//! at most the returned `truncation_error_bound` `B`, in the sense
//! `|dp| <= B`, `|dg_a| <= B/sqrt(t)`, `|dH_ab| <= B/t`.

mod expansion;
mod grid;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

use expansion::{CellMoments, MultiIndexTable};
use grid::{GridIndex, GridLevel};

/// Kernel terms below this are dropped on every path.
pub const UNDERFLOW: f64 = 1e-300;

struct Scratch {
    direct: Vec<u32>,
    powers: Vec<f64>,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = const {
        std::cell::RefCell::new(Scratch {
            direct: Vec::new(),
            powers: Vec::new(),
        })
    };
}

/// Cells with fewer points than this are always summed directly.
const MIN_EXPANSION_POINTS: usize = 8;

/// `(2 pi t)^{-d/2} exp(-|x|^2 / (2t))`.
pub fn gaussian_kernel(x: &[f64], t: f64) -> Result<f64> {
    check_t(t)?;
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(kernel_norm(x.len(), t) * (-0.5 * norm_sq / t).exp())
}

pub(crate) fn kernel_norm(d: usize, t: f64) -> f64 {
    (2.0 * PI * t).powf(-(d as f64) / 2.0)
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth t = {t} must be positive and finite")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelEval {
    pub p: f64,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub t: f64,
    pub truncation_error_bound: f64,
    /// Individual kernel terms computed (expansion work is not counted).
    pub kernel_evaluations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    Truncated {
        eps: f64,
        /// Allow per-cell Taylor expansions in addition to the cutoff.
        #[serde(default = "default_true")]
        expansions: bool,
    },
}

fn default_true() -> bool {
    true
}

impl EvalMode {
    pub fn truncated(eps: f64) -> Self {
        EvalMode::Truncated {
            eps,
            expansions: true,
        }
    }

    pub fn cutoff_only(eps: f64) -> Self {
        EvalMode::Truncated {
            eps,
            expansions: false,
        }
    }
}

/// Squared cutoff radius and the bound it certifies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    /// `None` means every point is skipped.
    pub radius_sq: Option<f64>,
    pub bound: f64,
}

/// Smallest radius `r = sqrt(2 t q)` such that skipping all points farther
/// than `r` perturbs `p` by at most `eps`, each component of `g` by at most
/// `eps/sqrt(t)` and each entry of `H` by at most `eps/t`.
///
/// A skipped point contributes at most `norm e^{-q}` to `p`,
/// `(r/t) norm e^{-q}` to `|g_a|` (for `r >= sqrt t`) and
/// `(r^2/t^2) norm e^{-q}` to `|H_ab|` (for `r^2 >= 2t`), with
/// `norm = (2 pi t)^{-d/2}`. Averaging over `n` points cannot increase these,
/// so with `q >= 1` everything is covered by `norm * 2q * e^{-q} <= eps`.
pub fn cutoff_for(d: usize, t: f64, eps: f64) -> Cutoff {
    let norm = kernel_norm(d, t);
    // sup_q max(1, sqrt(2q), 2q) e^{-q} = 1, so nothing needs summing.
    if norm <= eps {
        return Cutoff {
            radius_sq: None,
            bound: norm,
        };
    }
    let f = |q: f64| norm.ln() + (2.0 * q).ln() - q - eps.ln();
    let mut q: f64 = 1.0;
    if f(q) > 0.0 {
        // f is decreasing for q > 1; Newton from the right of the root.
        q = (norm / eps).ln().max(1.0) + 2.0 * (norm / eps).ln().max(1.0).ln() + 2.0;
        while f(q) > 0.0 {
            q *= 2.0;
        }
        for _ in 0..60 {
            let step = f(q) / (1.0 / q - 1.0);
            let next = q - step;
            if !(next > 1.0) || (next - q).abs() <= 1e-14 * q {
                break;
            }
            q = next;
        }
        while f(q) > 0.0 {
            q *= 1.0 + 1e-12;
        }
    }
    let bound = norm * 2.0 * q * (-q).exp();
    Cutoff {
        radius_sq: Some(2.0 * t * q),
        bound,
    }
}

/// Running sums of `phi`, `(X-x) phi` and `(X-x)(X-x)^T phi` (upper
/// triangle), before normalization by `n`, `t`.
struct Sums {
    d: usize,
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
    diff: Vec<f64>,
    evaluations: usize,
}

impl Sums {
    fn new(d: usize) -> Self {
        Sums {
            d,
            s0: 0.0,
            s1: vec![0.0; d],
            s2: vec![0.0; d * d],
            diff: vec![0.0; d],
            evaluations: 0,
        }
    }

    #[inline]
    fn add_point(&mut self, row: &[f64], x: &[f64], norm: f64, inv_two_t: f64) {
        let d = self.d;
        let mut dist_sq = 0.0;
        for a in 0..d {
            let v = row[a] - x[a];
            self.diff[a] = v;
            dist_sq += v * v;
        }
        self.evaluations += 1;
        let phi = norm * (-dist_sq * inv_two_t).exp();
        if phi < UNDERFLOW {
            return;
        }
        self.s0 += phi;
        for a in 0..d {
            let wa = self.diff[a] * phi;
            self.s1[a] += wa;
            for b in a..d {
                self.s2[a * d + b] += wa * self.diff[b];
            }
        }
    }

    /// Adds `other` after the terms already held, so that a pure direct sum
    /// keeps the exact path's rounding.
    fn merge(&mut self, other: &Sums) {
        self.s0 += other.s0;
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
    }

    fn finish(self, n: usize, t: f64, bound: f64) -> KernelEval {
        let d = self.d;
        let nf = n as f64;
        let p = self.s0 / nf;
        let g = DVector::from_iterator(d, self.s1.iter().map(|v| v / (nf * t)));
        let scale = 1.0 / (nf * t * t);
        let mut h = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = self.s2[a * d + b] * scale;
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        KernelEval {
            p,
            g,
            h,
            t,
            truncation_error_bound: bound,
            kernel_evaluations: self.evaluations,
        }
    }
}

/// Exact kernel statistics, summed in dataset order.
pub fn eval_exact(data: &Dataset, x: &[f64], t: f64) -> Result<KernelEval> {
    check_t(t)?;
    check_dim(data.dim(), x.len())?;
    let norm = kernel_norm(data.dim(), t);
    let inv_two_t = 0.5 / t;
    let mut sums = Sums::new(data.dim());
    for row in data.rows() {
        sums.add_point(row, x, norm, inv_two_t);
    }
    Ok(sums.finish(data.len(), t, 0.0))
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// A dataset plus the spatial index and expansion tables used by the
/// truncated path. Cheap to clone.
#[derive(Clone)]
pub struct KernelEngine {
    inner: Arc<EngineInner>,
}

struct EngineInner {
    data: Dataset,
    index: GridIndex,
    table: Option<MultiIndexTable>,
}

impl std::fmt::Debug for KernelEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelEngine")
            .field("n", &self.inner.data.len())
            .field("d", &self.inner.data.dim())
            .finish()
    }
}

/// Highest series degree kept per dimension; zero disables expansions.
fn expansion_degree(d: usize) -> usize {
    match d {
        1 => 42,
        2 => 22,
        3 => 14,
        _ => 0,
    }
}

impl KernelEngine {
    pub fn new(data: Dataset) -> Self {
        let index = GridIndex::new(&data);
        let degree = expansion_degree(data.dim());
        let table = (degree > 0).then(|| MultiIndexTable::new(data.dim(), degree));
        KernelEngine {
            inner: Arc::new(EngineInner { data, index, table }),
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.inner.data
    }

    pub fn dim(&self) -> usize {
        self.inner.data.dim()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    /// Prepares evaluation at one bandwidth. Reuse the result for every
    /// query at that `t`.
    pub fn at_scale(&self, t: f64, mode: EvalMode) -> Result<ScaleEvaluator<'_>> {
        check_t(t)?;
        let d = self.dim();
        let norm = kernel_norm(d, t);
        let plan = match mode {
            EvalMode::Exact => Plan::Exact,
            EvalMode::Truncated { eps, expansions } => {
                if !(eps > 0.0) || eps.is_nan() {
                    return Err(Error::invalid(format!("eps = {eps} must be positive")));
                }
                let use_expansions = expansions && self.inner.table.is_some();
                let trunc_budget = if use_expansions { 0.5 * eps } else { eps };
                let cutoff = cutoff_for(d, t, trunc_budget);
                let level = self.inner.index.level_for_edge(&self.inner.data, t.sqrt());
                let moments = if use_expansions && cutoff.radius_sq.is_some() {
                    Some(self.cell_moments(level, t))
                } else {
                    None
                };
                Plan::Truncated {
                    cutoff,
                    level,
                    moments,
                    expansion_budget: 0.5 * eps,
                }
            }
        };
        Ok(ScaleEvaluator {
            engine: self,
            t,
            norm,
            plan,
        })
    }

    fn cell_moments(&self, level: &GridLevel, t: f64) -> Vec<Option<CellMoments>> {
        let table = self.inner.table.as_ref().expect("expansion table");
        let data = &self.inner.data;
        let sqrt_t = t.sqrt();
        let mut scratch = Vec::new();
        level
            .cells
            .iter()
            .map(|cell| {
                if cell.len() < MIN_EXPANSION_POINTS {
                    return None;
                }
                let rows = level.order[cell.start..cell.end]
                    .iter()
                    .map(|&i| data.row(i as usize));
                Some(CellMoments::compute(
                    table,
                    rows,
                    &cell.center,
                    sqrt_t,
                    cell.radius,
                    &mut scratch,
                ))
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64], t: f64, mode: EvalMode) -> Result<KernelEval> {
        self.at_scale(t, mode)?.eval(x)
    }

    pub fn eval_exact(&self, x: &[f64], t: f64) -> Result<KernelEval> {
        eval_exact(&self.inner.data, x, t)
    }

    pub fn eval_truncated(&self, x: &[f64], t: f64, eps: f64) -> Result<KernelEval> {
        self.eval(x, t, EvalMode::truncated(eps))
    }
}

enum Plan<'a> {
    Exact,
    Truncated {
        cutoff: Cutoff,
        level: &'a GridLevel,
        moments: Option<Vec<Option<CellMoments>>>,
        expansion_budget: f64,
    },
}

/// Evaluation state for one bandwidth.
pub struct ScaleEvaluator<'a> {
    engine: &'a KernelEngine,
    t: f64,
    norm: f64,
    plan: Plan<'a>,
}

impl ScaleEvaluator<'_> {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn eval(&self, x: &[f64]) -> Result<KernelEval> {
        let data = &self.engine.inner.data;
        check_dim(data.dim(), x.len())?;
        match &self.plan {
            Plan::Exact => eval_exact(data, x, self.t),
            Plan::Truncated {
                cutoff,
                level,
                moments,
                expansion_budget,
            } => Ok(self.eval_truncated(x, cutoff, level, moments.as_deref(), *expansion_budget)),
        }
    }

    fn eval_truncated(
        &self,
        x: &[f64],
        cutoff: &Cutoff,
        level: &GridLevel,
        moments: Option<&[Option<CellMoments>]>,
        expansion_budget: f64,
    ) -> KernelEval {
        let data = &self.engine.inner.data;
        let d = data.dim();
        let n = data.len();
        let t = self.t;
        let Some(radius_sq) = cutoff.radius_sq else {
            return Sums::new(d).finish(n, t, cutoff.bound);
        };
        let sqrt_t = t.sqrt();
        let inv_two_t = 0.5 / t;

        let mut bound = cutoff.bound;
        let mut sums = Sums::new(d);
        let table = self.engine.inner.table.as_ref();
        SCRATCH.with(|cell_scratch| {
            let mut guard = cell_scratch.borrow_mut();
            let Scratch { direct, powers } = &mut *guard;
            direct.clear();
            let mut v = [0.0; expansion::MAX_DIM];
            let per_term = 1 + d + d * (d + 1) / 2;

            level.for_each_cell_near(x, radius_sq, |ci| {
                let cell = &level.cells[ci];
                if let (Some(all), Some(table)) = (moments, table) {
                    if let Some(cm) = &all[ci] {
                        let mut v_sq = 0.0;
                        for a in 0..d {
                            v[a] = (x[a] - cell.center[a]) / sqrt_t;
                            v_sq += v[a] * v[a];
                        }
                        // Per-cell share of the budget, in units of the
                        // unnormalized sum of exp(-|u - v|^2 / 2).
                        let share = expansion_budget * (cell.len() as f64) / self.norm;
                        if let Some((degree, b)) = expansion::plan(table, cm, v_sq.sqrt(), share) {
                            if table.count_upto(degree) * per_term < cell.len() * (3 * d + 20) {
                                let e = expansion::evaluate(table, cm, &v[..d], degree, b, powers);
                                sums.s0 += self.norm * e.s0;
                                for a in 0..d {
                                    sums.s1[a] += self.norm * sqrt_t * e.s1[a];
                                    for b in a..d {
                                        sums.s2[a * d + b] += self.norm * t * e.s2[a * d + b];
                                    }
                                }
                                bound += self.norm * e.bound / n as f64;
                                return;
                            }
                        }
                    }
                }
                for &i in &level.order[cell.start..cell.end] {
                    let row = data.row(i as usize);
                    let mut dist_sq = 0.0;
                    for a in 0..d {
                        let z = row[a] - x[a];
                        dist_sq += z * z;
                    }
                    if dist_sq <= radius_sq {
                        direct.push(i);
                    }
                }
            });

            // Dataset order keeps the result independent of the grid layout.
            direct.sort_unstable();
            let mut direct_sums = Sums::new(d);
            for &i in direct.iter() {
                direct_sums.add_point(data.row(i as usize), x, self.norm, inv_two_t);
            }
            direct_sums.merge(&sums);
            sums = direct_sums;
        });
        sums.finish(n, t, bound)
    }
}

/// Evaluates every row of `xs` (row-major, `m x d`). Element `i` equals the
/// single-point evaluation at row `i`, whatever the thread split.
pub fn batch_eval(
    engine: &KernelEngine,
    xs: &[f64],
    t: f64,
    mode: EvalMode,
) -> Result<Vec<KernelEval>> {
    let d = engine.dim();
    if xs.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: xs.len() % d,
        });
    }
    let scale = engine.at_scale(t, mode)?;
    xs.par_chunks(d).map(|x| scale.eval(x)).collect()
}
