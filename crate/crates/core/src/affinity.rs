//! Input-space joint probabilities.
//!
//! Each point gets a Gaussian conditional distribution over its neighbours
//! whose bandwidth `tau_i` is tuned until the row's perplexity matches the
//! requested value; the conditionals are then symmetrized into `P_X`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floor applied to off-diagonal entries of `P_X`.
pub const P_FLOOR: f64 = 1e-12;
pub const TAU_MIN: f64 = 1e-6;
pub const TAU_MAX: f64 = 1e6;
pub const DEFAULT_ENTROPY_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_SEARCH_ITER: usize = 64;

/// `N x D` matrix of input samples, `N >= 2`, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::config(format!(
                "need at least 2 samples, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::config("samples have zero features"));
        }
        check_finite(values.view())?;
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Array2::zeros((rows.len(), d));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidData {
                    row: i,
                    message: format!("expected {d} columns, found {}", row.len()),
                });
            }
            values.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::new(values)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.values.select(Axis(0), indices))
    }

    /// Per-feature zero mean and unit variance. Constant features are only
    /// centered.
    pub fn standardized(&self) -> Self {
        let mut values = self.values.clone();
        for mut col in values.columns_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) * scale);
        }
        Self { values }
    }
}

fn check_finite(x: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData {
                row: i,
                message: format!("non-finite value {} in column {c}", row[c]),
            });
        }
    }
    Ok(())
}

/// Squared Euclidean distances between all rows of `x`.
pub fn pairwise_sq_dists(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_finite(x)?;
    Ok(sq_dists_unchecked(x))
}

pub(crate) fn sq_dists_unchecked(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((n, n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let xi = x.row(i);
            for j in (i + 1)..n {
                row[j] = sq_dist(xi, x.row(j));
            }
        });
    for i in 0..n {
        for j in 0..i {
            out[[i, j]] = out[[j, i]];
        }
    }
    out
}

#[inline]
pub(crate) fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a
            .iter()
            .zip(b)
            .map(|(u, v)| {
                let d = u - v;
                d * d
            })
            .sum(),
        _ => a
            .iter()
            .zip(b.iter())
            .map(|(u, v)| {
                let d = u - v;
                d * d
            })
            .sum(),
    }
}

/// Calibrated conditional distribution `p(.|i)` for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalAffinityRow {
    pub index: usize,
    /// Gaussian bandwidth `tau_i`. `NaN` for a degenerate row.
    pub tau: f64,
    pub probabilities: Array1<f64>,
    pub achieved_perplexity: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Every off-diagonal distance was zero; the row was set to uniform.
    pub degenerate: bool,
}

/// Entropy (bits) and normalized row for bandwidth `tau`.
fn row_at(dist_row: ArrayView1<'_, f64>, i: usize, shift: f64, tau: f64) -> (f64, Array1<f64>) {
    let beta = 1.0 / (2.0 * tau * tau);
    let mut p = Array1::zeros(dist_row.len());
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, pj)) in dist_row.iter().zip(p.iter_mut()).enumerate() {
        if j == i {
            continue;
        }
        let e = (d - shift) * beta;
        let w = (-e).exp();
        *pj = w;
        z += w;
        weighted += w * e;
    }
    p.mapv_inplace(|w| w / z);
    let entropy_nats = z.ln() + weighted / z;
    (entropy_nats / std::f64::consts::LN_2, p)
}

/// Bandwidth search for row `i` of a squared-distance matrix.
///
/// The search starts from the root-mean-square distance of the row and
/// brackets by doubling or halving before bisecting geometrically, so the
/// sequence of trial bandwidths scales exactly with the data.
pub fn calibrate_row(
    dist_row: ArrayView1<'_, f64>,
    i: usize,
    perplexity: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ConditionalAffinityRow> {
    let n = dist_row.len();
    if i >= n {
        return Err(Error::config(format!("row index {i} out of range for {n} points")));
    }
    check_perplexity(perplexity, n)?;
    if dist_row[i] != 0.0 {
        return Err(Error::InvalidData {
            row: i,
            message: format!("self-distance is {} instead of 0", dist_row[i]),
        });
    }

    let off_diag = || dist_row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d);
    if let Some(d) = off_diag().find(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidData {
            row: i,
            message: format!("invalid squared distance {d}"),
        });
    }
    let shift = off_diag().fold(f64::INFINITY, f64::min);
    let mean = off_diag().sum::<f64>() / (n - 1) as f64;

    if mean == 0.0 {
        log::warn!("row {i}: all distances are zero, using a uniform row");
        let mut p = Array1::from_elem(n, 1.0 / (n - 1) as f64);
        p[i] = 0.0;
        return Ok(ConditionalAffinityRow {
            index: i,
            tau: f64::NAN,
            probabilities: p,
            achieved_perplexity: (n - 1) as f64,
            iterations: 0,
            converged: false,
            degenerate: true,
        });
    }

    let target = perplexity.log2();
    let mut tau = mean.sqrt().clamp(TAU_MIN, TAU_MAX);
    let mut lo: Option<f64> = None;
    let mut hi: Option<f64> = None;
    let (mut entropy, mut p) = row_at(dist_row, i, shift, tau);
    let mut iterations = 1;
    let mut converged = (entropy - target).abs() <= tol;

    while !converged && iterations < max_iter {
        if entropy > target {
            hi = Some(tau);
        } else {
            lo = Some(tau);
        }
        let next = match (lo, hi) {
            (Some(l), Some(h)) => (l * h).sqrt(),
            (None, Some(h)) => (h * 0.5).max(TAU_MIN),
            (Some(l), None) => (l * 2.0).min(TAU_MAX),
            (None, None) => unreachable!(),
        };
        if next == tau {
            break;
        }
        tau = next;
        (entropy, p) = row_at(dist_row, i, shift, tau);
        iterations += 1;
        converged = (entropy - target).abs() <= tol;
    }

    Ok(ConditionalAffinityRow {
        index: i,
        tau,
        probabilities: p,
        achieved_perplexity: entropy.exp2(),
        iterations,
        converged,
        degenerate: false,
    })
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    // The upper end is attainable: a uniform row over N-1 neighbours.
    if !(perplexity > 1.0 && perplexity <= (n - 1) as f64) {
        return Err(Error::config(format!(
            "perplexity {perplexity} must lie in (1, {}] for {n} points",
            n - 1
        )));
    }
    Ok(())
}

/// Symmetrize calibrated conditionals: `p_ij = (p(j|i) + p(i|j)) / 2N`.
pub fn symmetrize(rows: &[ConditionalAffinityRow]) -> Result<JointAffinity> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::config("need at least 2 conditional rows"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.probabilities.len() != n {
            return Err(Error::dims(
                format!("row of length {n}"),
                format!("row {i} of length {}", r.probabilities.len()),
            ));
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ((rows[i].probabilities[j] + rows[j].probabilities[i]) * scale).max(P_FLOOR);
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    Ok(JointAffinity {
        p,
        bandwidths: rows.iter().map(|r| r.tau).collect(),
    })
}

/// Symmetric joint probability matrix `P_X` with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAffinity {
    p: Array2<f64>,
    bandwidths: Vec<f64>,
}

impl JointAffinity {
    /// Wrap an existing matrix after checking shape, symmetry and sign.
    /// Off-diagonal entries are floored at [`P_FLOOR`].
    pub fn from_matrix(mut p: Array2<f64>) -> Result<Self> {
        let n = p.nrows();
        if n != p.ncols() || n < 2 {
            return Err(Error::dims("square matrix with N >= 2", format!("{:?}", p.dim())));
        }
        for i in 0..n {
            for j in 0..n {
                let v = p[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidData {
                        row: i,
                        message: format!("invalid probability {v} at column {j}"),
                    });
                }
                if i != j && v != p[[j, i]] {
                    return Err(Error::InvalidData {
                        row: i,
                        message: format!("matrix is not symmetric at column {j}"),
                    });
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                p[[i, j]] = if i == j { 0.0 } else { p[[i, j]].max(P_FLOOR) };
            }
        }
        Ok(Self {
            p,
            bandwidths: vec![f64::NAN; n],
        })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Restriction to `indices`, renormalized to unit mass.
    pub fn submatrix(&self, indices: &[usize]) -> Result<Self> {
        let mut p = self.p.select(Axis(0), indices).select(Axis(1), indices);
        let total = p.sum();
        p.mapv_inplace(|v| v / total);
        Self::from_matrix(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityOptions {
    pub perplexity: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub standardize: bool,
}

impl Default for AffinityOptions {
    fn default() -> Self {
        Self {
            perplexity: 25.0,
            tol: DEFAULT_ENTROPY_TOL,
            max_iter: DEFAULT_MAX_SEARCH_ITER,
            standardize: false,
        }
    }
}

/// Calibrate every row of a squared-distance matrix.
pub fn calibrate_all(
    dists: ArrayView2<'_, f64>,
    perplexity: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<ConditionalAffinityRow>> {
    let n = dists.nrows();
    if dists.ncols() != n {
        return Err(Error::dims("square distance matrix", format!("{:?}", dists.dim())));
    }
    check_perplexity(perplexity, n)?;
    (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(dists.row(i), i, perplexity, tol, max_iter))
        .collect()
}

/// `P_X` for a data matrix.
pub fn joint_affinities(x: &DataMatrix, opts: &AffinityOptions) -> Result<JointAffinity> {
    let standardized;
    let x = if opts.standardize {
        standardized = x.standardized();
        &standardized
    } else {
        x
    };
    let dists = sq_dists_unchecked(x.view());
    let rows = calibrate_all(dists.view(), opts.perplexity, opts.tol, opts.max_iter)?;
    let unconverged = rows.iter().filter(|r| !r.converged && !r.degenerate).count();
    if unconverged > 0 {
        log::warn!("{unconverged} rows did not reach the target perplexity");
    }
    symmetrize(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive_sq_dists(x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..x.ncols() {
                    s += (x[[i, c]] - x[[j, c]]).powi(2);
                }
                d[[i, j]] = s;
            }
        }
        d
    }

    #[test]
    fn sq_dists_hand_examples() {
        let d = pairwise_sq_dists(array![[0.0], [3.0]].view()).unwrap();
        assert_eq!(d, array![[0.0, 9.0], [9.0, 0.0]]);
        let d = pairwise_sq_dists(array![[1.5, -2.0], [1.5, -2.0]].view()).unwrap();
        assert_eq!(d, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn sq_dists_match_double_loop() {
        let x = array![
            [0.3, -1.2, 2.0, 0.1],
            [1.1, 0.4, -0.7, 0.9],
            [-2.0, 0.0, 0.5, 1.5],
            [0.0, 3.3, 1.0, -0.2],
            [0.8, 0.8, 0.8, 0.8]
        ];
        let fast = pairwise_sq_dists(x.view()).unwrap();
        let slow = naive_sq_dists(&x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_names_row() {
        let x = array![[0.0, 1.0], [2.0, f64::NAN], [1.0, 1.0]];
        match pairwise_sq_dists(x.view()) {
            Err(Error::InvalidData { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            DataMatrix::new(array![[1.0], [f64::INFINITY]]),
            Err(Error::InvalidData { row: 1, .. })
        ));
    }

    #[test]
    fn equidistant_row_is_uniform() {
        let row = calibrate_row(array![0.0, 2.0, 2.0].view(), 0, 2.0, 1e-5, 64).unwrap();
        assert_eq!(row.probabilities[0], 0.0);
        assert!((row.probabilities[1] - 0.5).abs() < 1e-15);
        assert!((row.probabilities[2] - 0.5).abs() < 1e-15);
        assert!((row.achieved_perplexity - 2.0).abs() < 1e-12);
        assert!(row.converged);
    }

    /// Dense log-grid scan over tau in [1e-4, 1e4], refined by linear
    /// interpolation of the entropy between the bracketing grid points.
    fn grid_scan_tau(dist: &[f64], i: usize, perplexity: f64) -> f64 {
        let entropy = |tau: f64| {
            let w: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(j, d)| if j == i { 0.0 } else { (-d / (2.0 * tau * tau)).exp() })
                .collect();
            let z: f64 = w.iter().sum();
            -w.iter()
                .filter(|&&v| v > 0.0)
                .map(|v| (v / z) * (v / z).log2())
                .sum::<f64>()
        };
        let target = perplexity.log2();
        let steps = 400_000;
        let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
        let mut prev_tau = lo.exp();
        let mut prev_h = entropy(prev_tau);
        for s in 1..=steps {
            let tau = (lo + (hi - lo) * s as f64 / steps as f64).exp();
            let h = entropy(tau);
            if (prev_h - target) * (h - target) <= 0.0 {
                let frac = (target - prev_h) / (h - prev_h);
                return prev_tau + frac * (tau - prev_tau);
            }
            prev_tau = tau;
            prev_h = h;
        }
        panic!("no crossing");
    }

    #[test]
    fn calibration_matches_grid_scan() {
        let dist = [0.0, 1.0, 4.0, 9.0];
        let row = calibrate_row(ArrayView1::from(&dist[..]), 0, 2.0, 1e-5, 64).unwrap();
        let tau_ref = grid_scan_tau(&dist, 0, 2.0);
        assert!((row.tau - tau_ref).abs() < 1e-4, "{} vs {}", row.tau, tau_ref);
        let beta = 1.0 / (2.0 * tau_ref * tau_ref);
        let w: Vec<f64> = dist[1..].iter().map(|d| (-d * beta).exp()).collect();
        let z: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            assert!((row.probabilities[j + 1] - wj / z).abs() < 1e-4);
        }
        assert!((row.achieved_perplexity.log2() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn perplexity_out_of_range() {
        let d = array![0.0, 1.0, 4.0];
        assert!(matches!(
            calibrate_row(d.view(), 0, 1.0, 1e-5, 64),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            calibrate_row(d.view(), 0, 2.5, 1e-5, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_zero_distances_flag_degenerate_row() {
        let row = calibrate_row(array![0.0, 0.0, 0.0, 0.0].view(), 2, 2.0, 1e-5, 64).unwrap();
        assert!(row.degenerate);
        assert_eq!(row.probabilities[2], 0.0);
        assert!((row.probabilities.sum() - 1.0).abs() < 1e-15);
    }

    fn manual_row(index: usize, probabilities: Array1<f64>) -> ConditionalAffinityRow {
        ConditionalAffinityRow {
            index,
            tau: 1.0,
            probabilities,
            achieved_perplexity: f64::NAN,
            iterations: 0,
            converged: true,
            degenerate: false,
        }
    }

    #[test]
    fn symmetrize_two_points() {
        let rows = vec![manual_row(0, array![0.0, 1.0]), manual_row(1, array![1.0, 0.0])];
        let p = symmetrize(&rows).unwrap();
        assert_eq!(p.matrix(), &array![[0.0, 0.5], [0.5, 0.0]]);
    }

    #[test]
    fn symmetrize_asymmetric_rows_follow_formula() {
        let c = [array![0.0, 0.9, 0.1], array![0.7, 0.0, 0.3], array![0.2, 0.8, 0.0]];
        let rows: Vec<_> = c.iter().enumerate().map(|(i, r)| manual_row(i, r.clone())).collect();
        let p = symmetrize(&rows).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { (c[i][j] + c[j][i]) / 6.0 };
                assert!((p.matrix()[[i, j]] - expect).abs() < 1e-15);
            }
        }
        assert!((p.matrix().sum() - 1.0).abs() < 1e-12);
    }
}
