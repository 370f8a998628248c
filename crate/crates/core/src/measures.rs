//! Uniform-weight empirical measures, exact Wasserstein distances between
//! them, and moment estimators.
//!
//! Every measure carries implicit weights `1/N`. In one dimension the optimal
//! coupling between two equal-size empirical measures is the monotone one,
//! so `W_k` reduces to matching order statistics. In higher dimension the
//! exact value comes from an optimal assignment on the cost matrix
//! `|x_i - y_j|^k`, which is cubic in `N` and therefore capped.

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest sample size accepted by [`wasserstein_assignment`].
pub const MAX_ASSIGNMENT_SIZE: usize = 512;

/// Point cloud with uniform weights `1/N`.
///
/// Points are stored row-major in one flat buffer: point `i` occupies
/// `points[i * dim .. (i + 1) * dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<f64>,
    dim: usize,
    #[serde(skip)]
    stats: StatCache,
}

/// Summary statistics computed from the points, keyed by name. A frozen-law
/// node is read by many replications per step; the cache lets the
/// statistics a model needs be computed once. Mutation clears it.
#[derive(Default)]
struct StatCache(Mutex<Vec<StatEntry>>);

type StatEntry = (&'static str, Arc<[f64]>);

impl Clone for StatCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for StatCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Debug for StatCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("..")
    }
}

impl EmpiricalMeasure {
    /// Builds a measure from a flat row-major buffer.
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("measure dimension must be positive"));
        }
        if points.is_empty() {
            return Err(Error::param("empirical measure needs at least one point"));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "buffer of length {} is not a whole number of {dim}-vectors",
                points.len()
            )));
        }
        Ok(Self {
            points,
            dim,
            stats: StatCache::default(),
        })
    }

    pub fn from_points<V: AsRef<[f64]>>(points: &[V]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::param("empirical measure needs at least one point"))?;
        let dim = first.as_ref().len();
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::dim(format!(
                    "point {i} has dimension {} but point 0 has {dim}",
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Self::new(flat, dim)
    }

    /// One-dimensional measure from scalars.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 1)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.to_vec(), x.len())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        self.stats.0.get_mut().expect("stat cache poisoned").clear();
        &mut self.points
    }

    /// Statistic `key` of the points, computed by `compute` on first use and
    /// cached until the points change. `compute` must be a pure function of
    /// the points.
    pub fn cached_stat(&self, key: &'static str, compute: impl FnOnce(&Self) -> Vec<f64>) -> Arc<[f64]> {
        if let Some((_, v)) = self.stats.0.lock().expect("stat cache poisoned").iter().find(|(k, _)| *k == key) {
            return v.clone();
        }
        let value: Arc<[f64]> = compute(self).into();
        let mut cache = self.stats.0.lock().expect("stat cache poisoned");
        if !cache.iter().any(|(k, _)| *k == key) {
            cache.push((key, value.clone()));
        }
        value
    }

    /// Mean of the points, reduced in index order.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, x) in m.iter_mut().zip(p) {
                *acc += x;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Equal-size subsample drawn without replacement at the given indices.
    pub fn subsample(&self, indices: &[usize]) -> Result<Self> {
        let mut flat = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(format!(
                    "subsample index {i} out of range for {} points",
                    self.len()
                )));
            }
            flat.extend_from_slice(self.point(i));
        }
        Self::new(flat, self.dim)
    }
}

/// Monte Carlo estimate of `E|Y|^k` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub order: f64,
    pub value: f64,
    pub replication_count: usize,
    pub std_error: f64,
}

fn check_order(k: f64) -> Result<()> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::param(format!("Wasserstein/moment order must be >= 1, got {k}")));
    }
    Ok(())
}

/// Exact `W_k` between two equal-size one-dimensional empirical measures.
pub fn wasserstein_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, k: f64) -> Result<f64> {
    check_order(k)?;
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::dim(format!(
            "wasserstein_1d needs d = 1, got {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "sample counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut xs = a.as_flat().to_vec();
    let mut ys = b.as_flat().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(coupling_cost(&xs, &ys, 1, k))
}

/// Exact `W_k` between one-dimensional empirical measures of any sizes,
/// `(∫_0^1 |F^{-1}(u) - G^{-1}(u)|^k du)^{1/k}`.
pub fn wasserstein_1d_quantile(a: &EmpiricalMeasure, b: &EmpiricalMeasure, k: f64) -> Result<f64> {
    check_order(k)?;
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::dim(format!(
            "wasserstein_1d_quantile needs d = 1, got {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut xs = a.as_flat().to_vec();
    let mut ys = b.as_flat().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    // Quantile breakpoints i/N and j/M in units of 1/(NM).
    let (n, m) = (xs.len() as u64, ys.len() as u64);
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0u64);
    let mut total = 0.0;
    while pos < n * m {
        let next_x = (i as u64 + 1) * m;
        let next_y = (j as u64 + 1) * n;
        let next = next_x.min(next_y);
        total += (next - pos) as f64 * (xs[i] - ys[j]).abs().powf(k);
        pos = next;
        i += usize::from(next == next_x);
        j += usize::from(next == next_y);
    }
    Ok((total / (n * m) as f64).powf(1.0 / k))
}

/// `((1/N) Σ |x_i - y_i|^k)^{1/k}` for the coupling that pairs point `i`
/// with point `i`. Any such pairing bounds `W_k` from above.
pub fn paired_cost(a: &EmpiricalMeasure, b: &EmpiricalMeasure, k: f64) -> Result<f64> {
    check_order(k)?;
    if a.dim() != b.dim() || a.len() != b.len() {
        return Err(Error::dim("paired_cost needs equal size and dimension"));
    }
    Ok(coupling_cost(a.as_flat(), b.as_flat(), a.dim(), k))
}

fn coupling_cost(xs: &[f64], ys: &[f64], dim: usize, k: f64) -> f64 {
    let n = xs.len() / dim;
    let total: f64 = xs
        .chunks_exact(dim)
        .zip(ys.chunks_exact(dim))
        .map(|(x, y)| distance(x, y).powf(k))
        .sum();
    (total / n as f64).powf(1.0 / k)
}

pub(crate) fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Exact `W_k` in any dimension by optimal assignment.
///
/// Refuses inputs larger than [`MAX_ASSIGNMENT_SIZE`] points.
pub fn wasserstein_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure, k: f64) -> Result<f64> {
    check_order(k)?;
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "sample counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::param(format!(
            "exact assignment is O(N^3); N = {n} exceeds the cap of {MAX_ASSIGNMENT_SIZE}, subsample or use a 1-d model"
        )));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = distance(a.point(i), b.point(j)).powf(k);
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((total / n as f64).powf(1.0 / k))
}

/// Hungarian algorithm with row/column potentials on a dense `n x n` cost
/// matrix. Returns `assignment[row] = column`.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based bookkeeping; index 0 is the virtual column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[col0] = true;
            let i0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Mean of `|x|^k` over the samples, with the standard error of the mean.
pub fn empirical_moment<V: AsRef<[f64]>>(samples: &[V], k: f64) -> Result<MomentEstimate> {
    check_order(k)?;
    if samples.is_empty() {
        return Err(Error::param("empirical_moment needs at least one sample"));
    }
    let powered: Vec<f64> = samples
        .iter()
        .map(|s| norm(s.as_ref()).powf(k))
        .collect();
    Ok(mean_with_error(&powered, k))
}

/// Moment estimate from already-computed non-negative magnitudes `|Y_r|`.
pub fn moment_of_magnitudes(magnitudes: &[f64], k: f64) -> Result<MomentEstimate> {
    check_order(k)?;
    if magnitudes.is_empty() {
        return Err(Error::param("moment estimate needs at least one sample"));
    }
    let powered: Vec<f64> = magnitudes.iter().map(|m| m.abs().powf(k)).collect();
    Ok(mean_with_error(&powered, k))
}

fn mean_with_error(values: &[f64], k: f64) -> MomentEstimate {
    let (value, std_error) = mean_and_std_error(values);
    MomentEstimate {
        order: k,
        value,
        replication_count: values.len(),
        std_error,
    }
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let a = m1(&[0.3, -1.2, 5.0]);
        assert_eq!(wasserstein_1d(&a, &a, 2.0).unwrap(), 0.0);
        assert_eq!(wasserstein_assignment(&a, &a, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn singletons_and_two_point_example() {
        assert_eq!(wasserstein_1d(&m1(&[0.0]), &m1(&[1.0]), 2.0).unwrap(), 1.0);
        // Sorted matching 0->1, 2->3 costs 1; the crossing pairing costs 5.
        let a = m1(&[0.0, 2.0]);
        let b = m1(&[1.0, 3.0]);
        assert_abs_diff_eq!(wasserstein_1d(&a, &b, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        let crossed = m1(&[3.0, 1.0]);
        assert_abs_diff_eq!(paired_cost(&a, &crossed, 2.0).unwrap(), 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn assignment_examples_in_two_dimensions() {
        let a = EmpiricalMeasure::from_points(&[[0.0, 0.0]]).unwrap();
        let b = EmpiricalMeasure::from_points(&[[3.0, 4.0]]).unwrap();
        assert_abs_diff_eq!(wasserstein_assignment(&a, &b, 2.0).unwrap(), 5.0, epsilon = 1e-14);

        let a = EmpiricalMeasure::from_points(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = EmpiricalMeasure::from_points(&[[0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(wasserstein_assignment(&a, &b, 2.0).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn quantile_coupling_handles_unequal_sizes() {
        let a = m1(&[0.3, -1.0, 2.0]);
        let b = m1(&[2.0, 0.3, -1.0]);
        assert_abs_diff_eq!(
            wasserstein_1d_quantile(&a, &b, 2.0).unwrap(),
            wasserstein_1d(&a, &b, 2.0).unwrap(),
            epsilon = 1e-15
        );
        // Dirac at 0 against uniform mass on {0, 1}: W_1 = 1/2.
        assert_abs_diff_eq!(wasserstein_1d_quantile(&m1(&[0.0]), &m1(&[0.0, 1.0]), 1.0).unwrap(), 0.5);
        // {0, 1} against {0, 1/2, 1}: |F^-1 - G^-1| = 1/2 on (1/3, 1/2) and (1/2, 2/3).
        let w = wasserstein_1d_quantile(&m1(&[0.0, 1.0]), &m1(&[0.0, 0.5, 1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(w, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            wasserstein_1d(&m1(&[0.0]), &m1(&[0.0, 1.0]), 2.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            wasserstein_1d(&m1(&[0.0]), &m1(&[1.0]), 0.5),
            Err(Error::Parameter(_))
        ));
        let big = m1(&vec![0.0; MAX_ASSIGNMENT_SIZE + 1]);
        let err = wasserstein_assignment(&big, &big, 2.0).unwrap_err();
        assert!(err.to_string().contains("exceeds the cap"));
        assert!(EmpiricalMeasure::new(vec![], 1).is_err());
        assert!(EmpiricalMeasure::from_points(&[vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn moment_examples() {
        let z = empirical_moment(&[[0.0, 0.0], [0.0, 0.0]], 2.0).unwrap();
        assert_eq!(z.value, 0.0);
        let sym = empirical_moment(&[[1.0], [-1.0]], 2.0).unwrap();
        assert_eq!(sym.value, 1.0);
        assert_eq!(sym.std_error, 0.0);
        let e = empirical_moment(&[[1.0], [2.0], [3.0]], 2.0).unwrap();
        assert_abs_diff_eq!(e.value, 14.0 / 3.0, epsilon = 1e-14);
        let empty: [[f64; 1]; 0] = [];
        assert!(empirical_moment(&empty, 2.0).is_err());
    }

    #[test]
    fn duplicate_points_are_fine() {
        let a = m1(&[1.0, 1.0, 1.0, 2.0]);
        let b = m1(&[1.0, 2.0, 2.0, 2.0]);
        let w = wasserstein_1d(&a, &b, 1.0).unwrap();
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(wasserstein_assignment(&a, &b, 1.0).unwrap(), w, epsilon = 1e-14);
    }
}
