//! Sliced Latin hypercube designs.
//!
//! Runs are split equally across the combinations of categorical levels.
//! For each continuous column the `n` fine strata are grouped into `n / s`
//! consecutive blocks of `s` (the slice count) and each block hands one
//! stratum to every slice, so every slice is a Latin hypercube on the coarse
//! grid and the union is one on the fine grid. The maximin variant swaps
//! values between two runs of the same slice, which preserves both
//! properties.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::schema::{Point, VariableSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    RandomLhs,
    MaximinLhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n: usize,
    pub criterion: Criterion,
    /// Swap proposals per continuous column; `None` means `10 n`.
    pub budget: Option<usize>,
    pub seed: Seed,
}

/// Every combination of categorical levels, in mixed-radix order.
pub fn slices(vars: &VariableSchema) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = (vars.p1()..vars.p())
        .map(|i| vars.variable(i).level_count().unwrap_or(1))
        .collect();
    let total: usize = counts.iter().product();
    (0..total)
        .map(|mut s| {
            let mut combo = vec![0.0; counts.len()];
            for (c, &l) in combo.iter_mut().zip(&counts).rev() {
                *c = (s % l) as f64;
                s /= l;
            }
            combo
        })
        .collect()
}

/// Smallest squared Euclidean distance between runs over the continuous
/// coordinates, with the number of pairs attaining it.
pub fn min_distance(points: &[Point], p1: usize) -> (f64, usize) {
    let d = distance_matrix(points, p1);
    scan_min(&d)
}

fn distance_matrix(points: &[Point], p1: usize) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| a[..p1].iter().zip(&b[..p1]).map(|(x, y)| (x - y).powi(2)).sum())
                .collect()
        })
        .collect()
}

fn scan_min(d: &[Vec<f64>]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for i in 0..d.len() {
        for &v in &d[i][i + 1..] {
            if v < best.0 {
                best = (v, 1);
            } else if v == best.0 {
                best.1 += 1;
            }
        }
    }
    best
}

pub fn generate(vars: &VariableSchema, spec: &DesignSpec) -> Result<Vec<Point>> {
    let combos = slices(vars);
    let s = combos.len();
    let n = spec.n;
    if n == 0 || n % s != 0 {
        return Err(Error::Design(format!("{n} runs cannot be split equally across {s} slices")));
    }
    let m = n / s;
    let p1 = vars.p1();
    let mut rng = spec.seed.named("design", 0).stream();
    let mut points: Vec<Point> = (0..n)
        .map(|r| {
            let mut x = vec![0.0; vars.p()];
            x[p1..].copy_from_slice(&combos[r / m]);
            x
        })
        .collect();
    for c in 0..p1 {
        // strata[slice] collects one fine stratum from every block
        let mut strata: Vec<Vec<usize>> = vec![Vec::with_capacity(m); s];
        for block in 0..m {
            let mut owners: Vec<usize> = (0..s).collect();
            owners.shuffle(&mut rng);
            for (offset, &slice) in owners.iter().enumerate() {
                strata[slice].push(block * s + offset);
            }
        }
        for (slice, mut st) in strata.into_iter().enumerate() {
            st.shuffle(&mut rng);
            for (j, stratum) in st.into_iter().enumerate() {
                points[slice * m + j][c] = (stratum as f64 + rng.random::<f64>()) / n as f64;
            }
        }
    }
    if spec.criterion == Criterion::MaximinLhs && p1 > 0 && m > 1 {
        maximin(&mut points, p1, m, spec.budget.unwrap_or(10 * n), &mut rng);
    }
    Ok(points)
}

fn maximin(points: &mut [Point], p1: usize, m: usize, budget: usize, rng: &mut impl Rng) {
    let n = points.len();
    let mut d = distance_matrix(points, p1);
    let mut best = scan_min(&d);
    let row = |pts: &[Point], r: usize| -> Vec<f64> {
        pts.iter()
            .map(|b| pts[r][..p1].iter().zip(&b[..p1]).map(|(x, y)| (x - y).powi(2)).sum())
            .collect()
    };
    for c in 0..p1 {
        for _ in 0..budget {
            let slice = rng.random_range(0..n / m);
            let a = slice * m + rng.random_range(0..m);
            let b = slice * m + rng.random_range(0..m);
            if a == b {
                continue;
            }
            let (va, vb) = (points[a][c], points[b][c]);
            points[a][c] = vb;
            points[b][c] = va;
            let (old_a, old_b) = (d[a].clone(), d[b].clone());
            for r in [a, b] {
                let new = row(points, r);
                for (j, v) in new.into_iter().enumerate() {
                    d[r][j] = v;
                    d[j][r] = v;
                }
            }
            let cand = scan_min(&d);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            } else {
                points[a][c] = va;
                points[b][c] = vb;
                for (r, old) in [(a, old_a), (b, old_b)] {
                    for (j, v) in old.into_iter().enumerate() {
                        d[r][j] = v;
                        d[j][r] = v;
                    }
                }
            }
        }
    }
}
