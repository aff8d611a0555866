//! Uniform-grid bucketing of a dataset, built lazily at power-of-two edges.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::OnceLock;

use crate::dataset::Dataset;

const LEVEL_MIN: i32 = -60;
const LEVEL_MAX: i32 = 60;
/// Cell coordinates beyond this go to the linear scan to keep key arithmetic exact.
const KEY_LIMIT: f64 = (1u64 << 52) as f64;

/// Multiplicative hash for small integer keys; SipHash dominated lookups.
#[derive(Default)]
struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }

    fn write_i64(&mut self, v: i64) {
        self.write_u64(v as u64);
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
}

type KeyMap = HashMap<Box<[i64]>, usize, BuildHasherDefault<KeyHasher>>;

pub(crate) struct Cell {
    pub start: usize,
    pub end: usize,
    pub center: Vec<f64>,
    /// Largest distance from `center` to a point of the cell.
    pub radius: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Cell {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    fn box_dist_sq(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &lo), &hi) in x.iter().zip(&self.lo).zip(&self.hi) {
            let gap = if xi < lo {
                lo - xi
            } else if xi > hi {
                xi - hi
            } else {
                0.0
            };
            acc += gap * gap;
        }
        acc
    }
}

pub(crate) struct GridLevel {
    pub edge: f64,
    d: usize,
    origin: Vec<f64>,
    pub cells: Vec<Cell>,
    lookup: KeyMap,
    /// Point indices grouped by cell, ascending inside each cell.
    pub order: Vec<u32>,
}

impl GridLevel {
    fn build(data: &Dataset, origin: &[f64], edge: f64) -> Self {
        let d = data.dim();
        let key_of = |row: &[f64]| -> Box<[i64]> {
            row.iter()
                .zip(origin)
                .map(|(v, o)| ((v - o) / edge).floor() as i64)
                .collect()
        };
        let mut keyed: Vec<(Box<[i64]>, u32)> = data
            .rows()
            .enumerate()
            .map(|(i, r)| (key_of(r), i as u32))
            .collect();
        keyed.sort();

        let mut cells = Vec::new();
        let mut lookup = KeyMap::default();
        let mut order = Vec::with_capacity(keyed.len());
        let mut i = 0;
        while i < keyed.len() {
            let mut j = i;
            while j < keyed.len() && keyed[j].0 == keyed[i].0 {
                order.push(keyed[j].1);
                j += 1;
            }
            let key = &keyed[i].0;
            let lo: Vec<f64> = key
                .iter()
                .zip(origin)
                .map(|(&k, o)| o + k as f64 * edge)
                .collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + edge).collect();
            let center: Vec<f64> = lo.iter().map(|l| l + 0.5 * edge).collect();
            let radius = order[i..j]
                .iter()
                .map(|&p| {
                    data.row(p as usize)
                        .iter()
                        .zip(&center)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(0.0f64, f64::max)
                .sqrt();
            lookup.insert(key.clone(), cells.len());
            cells.push(Cell {
                start: i,
                end: j,
                center,
                radius,
                lo,
                hi,
            });
            i = j;
        }
        GridLevel {
            edge,
            d,
            origin: origin.to_vec(),
            cells,
            lookup,
            order,
        }
    }

    /// Calls `f` with the index of every nonempty cell whose box meets the
    /// closed ball of squared radius `radius_sq` around `x`.
    pub fn for_each_cell_near(&self, x: &[f64], radius_sq: f64, mut f: impl FnMut(usize)) {
        let r = radius_sq.sqrt();
        let mut lo = Vec::with_capacity(self.d);
        let mut span = Vec::with_capacity(self.d);
        let mut boxed: f64 = 1.0;
        for (v, o) in x.iter().zip(&self.origin) {
            let a = ((v - r - o) / self.edge).floor();
            let b = ((v + r - o) / self.edge).floor();
            if a.abs() > KEY_LIMIT || b.abs() > KEY_LIMIT {
                boxed = f64::INFINITY;
            }
            lo.push(a as i64);
            let width = b - a + 1.0;
            span.push(width as i64);
            boxed *= width;
        }
        if !boxed.is_finite() || boxed > self.cells.len() as f64 {
            for (ci, cell) in self.cells.iter().enumerate() {
                if cell.box_dist_sq(x) <= radius_sq {
                    f(ci);
                }
            }
            return;
        }
        let mut key = lo.clone();
        'outer: loop {
            if let Some(&ci) = self.lookup.get(&key[..]) {
                if self.cells[ci].box_dist_sq(x) <= radius_sq {
                    f(ci);
                }
            }
            for a in 0..self.d {
                key[a] += 1;
                if key[a] < lo[a] + span[a] {
                    continue 'outer;
                }
                key[a] = lo[a];
            }
            break;
        }
    }
}

/// Lazily built grids over one dataset, one per power-of-two cell edge.
pub(crate) struct GridIndex {
    origin: Vec<f64>,
    top_level: i32,
    levels: Vec<OnceLock<GridLevel>>,
}

impl GridIndex {
    pub fn new(data: &Dataset) -> Self {
        let d = data.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in data.rows() {
            for a in 0..d {
                lo[a] = lo[a].min(row[a]);
                hi[a] = hi[a].max(row[a]);
            }
        }
        let extent = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| h - l)
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let top_level = (extent.log2().ceil() as i32 + 1).clamp(LEVEL_MIN, LEVEL_MAX);
        let levels = (LEVEL_MIN..=LEVEL_MAX).map(|_| OnceLock::new()).collect();
        GridIndex {
            origin: lo,
            top_level,
            levels,
        }
    }

    /// The grid whose edge is the largest power of two not above `edge`,
    /// coarsened to a single-cell-per-axis grid once it exceeds the data.
    pub fn level_for_edge(&self, data: &Dataset, edge: f64) -> &GridLevel {
        let level = (edge.log2().floor() as i32).clamp(LEVEL_MIN, self.top_level);
        let slot = (level - LEVEL_MIN) as usize;
        self.levels[slot].get_or_init(|| GridLevel::build(data, &self.origin, 2f64.powi(level)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cell_query_finds_every_point_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<f64> = (0..600).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let data = Dataset::new(pts, 2).unwrap();
        let index = GridIndex::new(&data);
        for edge in [0.05, 0.3, 2.0, 100.0] {
            let level = index.level_for_edge(&data, edge);
            assert_eq!(level.order.len(), data.len());
            for _ in 0..50 {
                let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
                let r2: f64 = rng.gen_range(0.0..2.0);
                let mut found = Vec::new();
                level.for_each_cell_near(&x, r2, |ci| {
                    let c = &level.cells[ci];
                    found.extend_from_slice(&level.order[c.start..c.end]);
                });
                for (i, row) in data.rows().enumerate() {
                    let dist: f64 = row.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist <= r2 {
                        assert!(found.contains(&(i as u32)), "edge {edge}: missed {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn cell_radius_bounds_members() {
        let data = Dataset::new((0..100).map(|i| (i as f64 * 0.37).sin() * 5.0).collect(), 1).unwrap();
        let index = GridIndex::new(&data);
        let level = index.level_for_edge(&data, 0.5);
        for c in &level.cells {
            assert!(c.radius <= 0.5 * level.edge + 1e-12);
            for &p in &level.order[c.start..c.end] {
                assert!((data.row(p as usize)[0] - c.center[0]).abs() <= c.radius + 1e-15);
            }
            let members = &level.order[c.start..c.end];
            assert!(members.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn far_queries_do_not_overflow_keys() {
        let data = Dataset::new((0..64).map(|i| i as f64 * 0.01).collect(), 1).unwrap();
        let index = GridIndex::new(&data);
        let level = index.level_for_edge(&data, 1e-3);
        for x in [1e30, -1e300, f64::MAX] {
            let mut hits = 0;
            level.for_each_cell_near(&[x], 1.0, |_| hits += 1);
            assert_eq!(hits, 0);
        }
    }
}
