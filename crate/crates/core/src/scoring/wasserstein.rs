//! Wasserstein-1 distances between empirical distributions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::substream;

/// W1 between two sorted, equally weighted samples on the real line, via
/// quantile matching. Counts may differ; the quantile functions are then
/// integrated over their merged breakpoints.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::precondition("W1 needs non-empty inputs"));
    }
    debug_assert!(a.windows(2).all(|w| w[0] <= w[1]), "first input not sorted");
    debug_assert!(b.windows(2).all(|w| w[0] <= w[1]), "second input not sorted");
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // positions on [0, 1] measured in units of 1 / (n m)
    let (mut i, mut j, mut at) = (0usize, 0usize, 0usize);
    let mut acc = 0.0;
    while i < n && j < m {
        let end_a = (i + 1) * m;
        let end_b = (j + 1) * n;
        let end = end_a.min(end_b);
        acc += (end - at) as f64 * (a[i] - b[j]).abs();
        at = end;
        if end_a == end {
            i += 1;
        }
        if end_b == end {
            j += 1;
        }
    }
    Ok(acc / (n * m) as f64)
}

/// Sorts copies of the inputs, then calls [`wasserstein_1d`].
pub fn wasserstein_1d_unsorted(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    wasserstein_1d(&a, &b)
}

pub const SLICE_DIRECTIONS: usize = 32;
const SLICE_SEED: u64 = 0x51_1CED;

/// Fixed unit directions in `R^d` shared by every sliced-W1 evaluation.
pub fn slice_directions(d: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(SLICE_SEED, d as u64);
    (0..SLICE_DIRECTIONS)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Sorted 1-D views of a point cloud: the single coordinate when `d == 1`,
/// otherwise one projection per fixed slicing direction.
pub fn sorted_slices(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points.first().map_or(1, Vec::len);
    let mut views: Vec<Vec<f64>> = if d == 1 {
        vec![points.iter().map(|p| p[0]).collect()]
    } else {
        slice_directions(d)
            .iter()
            .map(|u| {
                points
                    .iter()
                    .map(|p| p.iter().zip(u).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    };
    views.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
    views
}

/// W1 between two point clouds given their [`sorted_slices`]: exact for
/// `d == 1`, the mean sliced W1 otherwise.
pub fn sliced_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("slice sets differ in size"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += wasserstein_1d(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// Largest point set the LP oracle accepts per side.
pub const LP_ORACLE_MAX_POINTS: usize = 16;

/// Exact optimal-transport cost with Euclidean ground cost, solved as a
/// transportation linear program. Each point is `(coordinates, weight)`;
/// weights on each side must sum to 1.
pub fn wasserstein_lp_oracle(a: &[(Vec<f64>, f64)], b: &[(Vec<f64>, f64)]) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::precondition("OT needs non-empty point sets"));
    }
    if n > LP_ORACLE_MAX_POINTS || m > LP_ORACLE_MAX_POINTS {
        return Err(Error::config(format!(
            "LP oracle is limited to {LP_ORACLE_MAX_POINTS} points per side"
        )));
    }
    for side in [a, b] {
        let total: f64 = side.iter().map(|p| p.1).sum();
        if side.iter().any(|p| !(p.1 >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("weights must be non-negative and sum to 1"));
        }
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    };
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|(x, _)| b.iter().map(move |(y, _)| dist(x, y)))
        .collect();
    // rows: supply of each source point, then demand of each target point
    let mut rows = Vec::with_capacity(n + m);
    let mut rhs = Vec::with_capacity(n + m);
    for i in 0..n {
        let mut r = vec![0.0; n * m];
        r[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        rows.push(r);
        rhs.push(a[i].1);
    }
    for j in 0..m {
        let mut r = vec![0.0; n * m];
        (0..n).for_each(|i| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(b[j].1);
    }
    simplex::minimize(&cost, &rows, &rhs)
}

/// Dense two-phase tableau simplex with Bland's rule, for small problems of
/// the form `min c.x  s.t.  A x = b, x >= 0`.
mod simplex {
    use crate::error::{Error, Result};

    const EPS: f64 = 1e-12;

    struct Tableau {
        /// `rows x (cols + 1)`, last column is the right-hand side.
        t: Vec<Vec<f64>>,
        basis: Vec<usize>,
        cols: usize,
    }

    impl Tableau {
        fn pivot(&mut self, r: usize, c: usize) {
            let w = self.cols + 1;
            let p = self.t[r][c];
            for k in 0..w {
                self.t[r][k] /= p;
            }
            let pivot_row = self.t[r].clone();
            for (i, row) in self.t.iter_mut().enumerate() {
                if i != r {
                    let f = row[c];
                    if f != 0.0 {
                        for k in 0..w {
                            row[k] -= f * pivot_row[k];
                        }
                    }
                }
            }
            self.basis[r] = c;
        }

        /// Minimizes `cost` over the columns where `allowed` is true.
        fn optimize(&mut self, cost: &[f64], allowed: &dyn Fn(usize) -> bool) -> Result<()> {
            for _ in 0..10_000 {
                // reduced costs
                let entering = (0..self.cols).filter(|&j| allowed(j)).find(|&j| {
                    let z: f64 = self
                        .basis
                        .iter()
                        .zip(&self.t)
                        .map(|(&b, row)| cost[b] * row[j])
                        .sum();
                    cost[j] - z < -EPS
                });
                let Some(c) = entering else {
                    return Ok(());
                };
                let mut leave: Option<(usize, f64)> = None;
                for (i, row) in self.t.iter().enumerate() {
                    if row[c] > EPS {
                        let ratio = row[self.cols] / row[c];
                        leave = match leave {
                            Some((li, lr))
                                if lr < ratio - EPS
                                    || ((lr - ratio).abs() <= EPS && self.basis[li] < self.basis[i]) =>
                            {
                                Some((li, lr))
                            }
                            _ => Some((i, ratio)),
                        };
                    }
                }
                let Some((r, _)) = leave else {
                    return Err(Error::InvalidValue("linear program is unbounded".into()));
                };
                self.pivot(r, c);
            }
            Err(Error::InvalidValue("simplex iteration limit reached".into()))
        }
    }

    pub fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<f64> {
        let (rows, n) = (a.len(), c.len());
        let cols = n + rows;
        let mut t = Vec::with_capacity(rows);
        for (i, (row, &rhs)) in a.iter().zip(b).enumerate() {
            let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
            let mut r: Vec<f64> = row.iter().map(|v| v * sign).collect();
            r.extend((0..rows).map(|k| if k == i { 1.0 } else { 0.0 }));
            r.push(rhs * sign);
            t.push(r);
        }
        let mut tab = Tableau {
            t,
            basis: (n..cols).collect(),
            cols,
        };

        // phase 1: drive the artificial variables out
        let phase1: Vec<f64> = (0..cols).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
        tab.optimize(&phase1, &|_| true)?;
        let infeasibility: f64 = tab
            .basis
            .iter()
            .zip(&tab.t)
            .filter(|(&b, _)| b >= n)
            .map(|(_, row)| row[cols])
            .sum();
        if infeasibility > 1e-9 {
            return Err(Error::InvalidValue("linear program is infeasible".into()));
        }
        // pivot remaining zero-level artificials onto real columns; rows
        // where that is impossible are redundant and dropped
        let mut r = 0;
        while r < tab.basis.len() {
            if tab.basis[r] >= n {
                if let Some(c) = (0..n).find(|&j| tab.t[r][j].abs() > 1e-9) {
                    tab.pivot(r, c);
                } else {
                    tab.t.remove(r);
                    tab.basis.remove(r);
                    continue;
                }
            }
            r += 1;
        }

        // phase 2 on the original columns only
        let mut cost = c.to_vec();
        cost.resize(cols, 0.0);
        tab.optimize(&cost, &|j| j < n)?;
        Ok(tab
            .basis
            .iter()
            .zip(&tab.t)
            .map(|(&bj, row)| cost[bj] * row[cols])
            .sum())
    }

}
