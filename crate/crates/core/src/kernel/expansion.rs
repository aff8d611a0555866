//! Truncated Taylor expansions of Gaussian sums over one grid cell.
//!
//! With `u_i = (X_i - c)/sqrt(t)`, `v = (x - c)/sqrt(t)` and
//! `w_i = exp(-|u_i|^2 / 2)`,
//!
//! ```text
//! exp(-|u_i - v|^2 / 2) = exp(-|v|^2 / 2) * w_i * exp(<u_i, v>)
//! exp(<u, v>)           = sum_alpha u^alpha v^alpha / alpha!
//! ```
//!
//! so the cell's contribution to the kernel sums only needs the moments
//! `M_beta = sum_i w_i u_i^beta`. Cutting the series at total degree `J`
//! leaves a remainder of at most `rho^(J+1) e^rho / (J+1)!` per point, where
//! `rho = max_i |u_i| * |v|`.

const EPS_MACH: f64 = f64::EPSILON;

/// Relative size below which one-dimensional moment terms are dropped.
const TINY: f64 = 1e-40;

/// Expansions are only built up to this dimension.
pub(crate) const MAX_DIM: usize = 3;

/// Multi-indices of total degree `<= max_degree`, in graded order.
pub(crate) struct MultiIndexTable {
    d: usize,
    pub max_degree: usize,
    /// `(parent, axis)` with `alpha = parent + e_axis`; unused for index 0.
    parent: Vec<(usize, usize)>,
    inv_factorial: Vec<f64>,
    /// `up[i * d + a]` is the index of `alpha_i + e_a`, or `usize::MAX`.
    up: Vec<usize>,
    /// `degree_end[j]` = number of indices with degree `<= j`.
    degree_end: Vec<usize>,
}

impl MultiIndexTable {
    pub fn new(d: usize, max_degree: usize) -> Self {
        let mut exps: Vec<Vec<u16>> = vec![vec![0; d]];
        let mut degree_end = vec![1];
        let mut start = 0;
        for _deg in 1..=max_degree {
            let end = exps.len();
            let mut next: Vec<Vec<u16>> = Vec::new();
            for e in &exps[start..end] {
                // extend only along axes >= the last nonzero axis, which
                // enumerates each multi-index once
                let last = e.iter().rposition(|&v| v > 0).unwrap_or(0);
                for a in last..d {
                    let mut f = e.clone();
                    f[a] += 1;
                    next.push(f);
                }
            }
            start = end;
            exps.extend(next);
            degree_end.push(exps.len());
        }

        let lookup: std::collections::HashMap<Vec<u16>, usize> =
            exps.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let mut parent = vec![(0, 0); exps.len()];
        let mut inv_factorial = vec![1.0; exps.len()];
        let mut up = vec![usize::MAX; exps.len() * d];
        for (i, e) in exps.iter().enumerate() {
            if let Some(a) = e.iter().position(|&v| v > 0) {
                let mut p = e.clone();
                p[a] -= 1;
                parent[i] = (lookup[&p], a);
            }
            inv_factorial[i] = e
                .iter()
                .map(|&k| (1..=k).map(|j| 1.0 / j as f64).product::<f64>())
                .product();
            for a in 0..d {
                let mut f = e.clone();
                f[a] += 1;
                if let Some(&j) = lookup.get(&f) {
                    up[i * d + a] = j;
                }
            }
        }
        MultiIndexTable {
            d,
            max_degree,
            parent,
            inv_factorial,
            up,
            degree_end,
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn count_upto(&self, degree: usize) -> usize {
        self.degree_end[degree]
    }

    /// Fills `out[i] = z^alpha_i` for the first `count` indices.
    fn powers(&self, z: &[f64], count: usize, out: &mut [f64]) {
        out[0] = 1.0;
        for i in 1..count {
            let (p, a) = self.parent[i];
            out[i] = out[p] * z[a];
        }
    }
}

/// Moments of one cell at one scale.
pub(crate) struct CellMoments {
    pub moments: Vec<f64>,
    /// `max_i |u_i|`.
    pub u_radius: f64,
    pub count: usize,
}

impl CellMoments {
    pub fn compute<'a>(
        table: &MultiIndexTable,
        points: impl Iterator<Item = &'a [f64]>,
        center: &[f64],
        sqrt_t: f64,
        radius: f64,
        scratch: &mut Vec<f64>,
    ) -> Self {
        let len = table.len();
        let mut moments = vec![0.0; len];
        if scratch.len() < len {
            scratch.resize(len, 0.0);
        }
        let mut u = vec![0.0; table.d];
        let mut count = 0;
        if table.d == 1 {
            for row in points {
                let u = (row[0] - center[0]) / sqrt_t;
                let w = (-0.5 * u * u).exp();
                // once |u| < 1 the powers only shrink, and terms below
                // TINY * w sit far under the rounding allowance in `plan`
                let floor = TINY * w;
                let mut p = w;
                for m in moments.iter_mut() {
                    *m += p;
                    p *= u;
                    if u.abs() < 1.0 && p.abs() < floor {
                        break;
                    }
                }
                count += 1;
            }
            return CellMoments {
                moments,
                u_radius: radius / sqrt_t,
                count,
            };
        }
        for row in points {
            let mut norm_sq = 0.0;
            for a in 0..table.d {
                u[a] = (row[a] - center[a]) / sqrt_t;
                norm_sq += u[a] * u[a];
            }
            let w = (-0.5 * norm_sq).exp();
            table.powers(&u, len, scratch);
            for (m, p) in moments.iter_mut().zip(scratch.iter()) {
                *m += w * p;
            }
            count += 1;
        }
        CellMoments {
            moments,
            u_radius: radius / sqrt_t,
            count,
        }
    }
}

/// Unnormalized sums `sum phi`, `sum (X-x) phi`, `sum (X-x)(X-x)^T phi`
/// (without the `(2 pi t)^{-d/2}` factor) produced by one expansion, with
/// their certified error in p-units.
pub(crate) struct ExpansionTerms {
    pub s0: f64,
    pub s1: [f64; MAX_DIM],
    /// Row-major `d x d`.
    pub s2: [f64; MAX_DIM * MAX_DIM],
    /// Bound in units of `sum phi / norm`; see [`plan`].
    pub bound: f64,
}

/// Picks the smallest truncation degree whose certified error, in units of
/// the unnormalized kernel sum, stays within `budget`. The error covers the
/// series remainder and floating-point rounding, scaled by the polynomial
/// prefactors of the gradient and second-moment sums.
pub(crate) fn plan(
    table: &MultiIndexTable,
    cell: &CellMoments,
    v_norm: f64,
    budget: f64,
) -> Option<(usize, f64)> {
    let mass = cell.moments[0];
    if mass <= 0.0 {
        return Some((0, 0.0));
    }
    let rho = cell.u_radius * v_norm;
    let spread = cell.u_radius + v_norm;
    let prefactor = 1.0f64.max(spread).max(spread * spread);
    let base = (-0.5 * v_norm * v_norm).exp() * mass * prefactor;
    let e_rho = rho.exp();
    let max_j = table.max_degree.saturating_sub(2);
    // rounding allowance, sized for the largest series so it holds for all j
    let gamma = 2.0 * (cell.count + 2 * table.max_degree + table.len() + 16) as f64 * EPS_MACH;
    let scale = base * e_rho;
    // term_j = rho^(j+1) / (j+1)!
    let mut term = rho;
    for j in 0..=max_j {
        let bound = scale * (term + gamma);
        if bound <= budget {
            return Some((j, bound));
        }
        term *= rho / (j + 2) as f64;
    }
    None
}

pub(crate) fn evaluate(
    table: &MultiIndexTable,
    cell: &CellMoments,
    v: &[f64],
    degree: usize,
    bound: f64,
    scratch: &mut Vec<f64>,
) -> ExpansionTerms {
    let d = table.d;
    debug_assert!(d <= MAX_DIM);
    let count = table.count_upto(degree);
    let m = &cell.moments;
    let mut s0 = 0.0;
    let mut s1 = [0.0; MAX_DIM];
    let mut s2 = [0.0; MAX_DIM * MAX_DIM];
    if d == 1 {
        // graded order in one dimension is just the power, so the moment
        // one degree up is the next entry
        let mut c = 1.0;
        for i in 0..count {
            s0 += c * m[i];
            s1[0] += c * m[i + 1];
            s2[0] += c * m[i + 2];
            c *= v[0] / (i + 1) as f64;
        }
    } else {
        if scratch.len() < table.len() {
            scratch.resize(table.len(), 0.0);
        }
        table.powers(v, count, scratch);
        for i in 0..count {
            let c = scratch[i] * table.inv_factorial[i];
            s0 += c * m[i];
            for a in 0..d {
                let ia = table.up[i * d + a];
                s1[a] += c * m[ia];
                for b in a..d {
                    let iab = table.up[ia * d + b];
                    s2[a * d + b] += c * m[iab];
                }
            }
        }
    }

    // Re-center on the query: sum (u - v) e and sum (u - v)(u - v)^T e,
    // then apply the common factor exp(-|v|^2 / 2).
    let v_sq: f64 = v.iter().map(|x| x * x).sum();
    let damp = (-0.5 * v_sq).exp();
    let mut g = [0.0; MAX_DIM];
    for a in 0..d {
        g[a] = damp * (s1[a] - v[a] * s0);
    }
    let mut h = [0.0; MAX_DIM * MAX_DIM];
    for a in 0..d {
        for b in a..d {
            let val = damp * (s2[a * d + b] - s1[a] * v[b] - v[a] * s1[b] + v[a] * v[b] * s0);
            h[a * d + b] = val;
            h[b * d + a] = val;
        }
    }
    ExpansionTerms {
        s0: damp * s0,
        s1: g,
        s2: h,
        bound,
    }
}
