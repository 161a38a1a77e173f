//! Symmetric normalized Laplacians, their low end of the spectrum, eigengap
//! based cluster-count estimation and spectral initialization.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::eigen::{self, KrylovOptions};
use crate::error::{Error, Result};

/// Degree floor used when [`LaplacianOptions::degree_floor`] is set.
pub const DEGREE_FLOOR: f64 = 1e-10;
/// Standard deviation of each coordinate of the spectral initialization.
pub const INIT_SCALE: f64 = 1e-2;
/// Largest size handled by the dense eigensolver for one-shot calls.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LaplacianOptions {
    /// Clamp degrees below [`DEGREE_FLOOR`] instead of failing.
    pub degree_floor: bool,
}

/// `L = I - D^{-1/2} A D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    matrix: Array2<f64>,
    degrees: Array1<f64>,
}

impl Laplacian {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn degrees(&self) -> &Array1<f64> {
        &self.degrees
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn build_laplacian(a: ArrayView2<'_, f64>, opts: LaplacianOptions) -> Result<Laplacian> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(Error::dims("non-empty square adjacency", format!("{:?}", a.dim())));
    }
    let max_abs = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..n {
            let v = a[[i, j]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidData {
                    row: i,
                    message: format!("adjacency entry {v} at column {j} is not a finite non-negative number"),
                });
            }
            if (v - a[[j, i]]).abs() > 1e-12 * max_abs {
                return Err(Error::InvalidData {
                    row: i,
                    message: format!("adjacency is not symmetric at column {j}"),
                });
            }
        }
    }
    let mut degrees = a.sum_axis(Axis(1));
    for (i, d) in degrees.iter_mut().enumerate() {
        if *d < DEGREE_FLOOR {
            if opts.degree_floor {
                *d = DEGREE_FLOOR;
            } else {
                return Err(Error::DegenerateDegree { vertex: i, degree: *d });
            }
        }
    }
    let s = degrees.mapv(|d| 1.0 / d.sqrt());
    let mut matrix = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let off = 0.5 * (a[[i, j]] + a[[j, i]]) * s[i] * s[j];
            matrix[[i, j]] = if i == j { 1.0 - off } else { -off };
        }
    }
    Ok(Laplacian { matrix, degrees })
}

/// The smallest eigenvalues of a Laplacian with orthonormal eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSpectrum {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

impl LaplacianSpectrum {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Flip each column so its first non-negligible entry is positive.
pub(crate) fn fix_signs(v: &mut Array2<f64>) {
    for mut col in v.columns_mut() {
        let peak = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(&first) = col.iter().find(|x| x.abs() > 1e-8 * peak) {
            if first < 0.0 {
                col.mapv_inplace(|x| -x);
            }
        }
    }
}

pub fn smallest_eigenpairs(l: &Laplacian, k: usize) -> Result<LaplacianSpectrum> {
    let n = l.n();
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "requested {k} eigenpairs of a {n}-vertex Laplacian"
        )));
    }
    let (values, mut vectors) = if n <= DENSE_LIMIT {
        let e = eigen::dense_symmetric(l.matrix.view())?;
        let idx: Vec<usize> = (0..k).collect();
        (e.values[..k].to_vec(), e.vectors.select(Axis(1), &idx))
    } else {
        // Largest pairs of 2I - L are the smallest of L.
        let m = &l.matrix;
        let out = eigen::top_eigenpairs(
            n,
            k,
            |x| {
                let mut y = m.dot(&x);
                y.zip_mut_with(&x, |yv, xv| *yv = 2.0 * xv - *yv);
                y
            },
            None,
            KrylovOptions::for_count(n, k),
            0x1a9_1ace,
        )?;
        if !out.converged {
            return Err(Error::Spectral(format!(
                "block Krylov solver did not converge for {k} eigenpairs after {} iterations",
                out.iterations
            )));
        }
        let values = out.pairs.values.iter().map(|t| 2.0 - t).collect();
        (values, out.pairs.vectors)
    };
    fix_signs(&mut vectors);
    Ok(LaplacianSpectrum { values, vectors })
}

/// Eigenvalues scanned for the eigengap heuristic and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EigengapReport {
    pub eigenvalues: Vec<f64>,
    /// `gaps[j-1] = sigma_{j+1} - sigma_j` for `j = 1..K-1`.
    pub gaps: Vec<f64>,
    /// 1-based index of the largest gap; ties go to the larger index.
    pub khat: usize,
}

impl EigengapReport {
    pub fn from_eigenvalues(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::config("eigengap scan needs at least 2 eigenvalues"));
        }
        let gaps: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        let mut khat = 1;
        for (j, &g) in gaps.iter().enumerate() {
            if g >= gaps[khat - 1] {
                khat = j + 1;
            }
        }
        Ok(Self {
            eigenvalues: values.to_vec(),
            gaps,
            khat,
        })
    }

    pub fn gap(&self, j: usize) -> f64 {
        self.gaps[j - 1]
    }
}

pub fn estimate_khat(l: &Laplacian, scan_limit: usize) -> Result<EigengapReport> {
    if scan_limit < 2 || scan_limit > l.n() {
        return Err(Error::config(format!(
            "scan limit {scan_limit} must lie in [2, {}]",
            l.n()
        )));
    }
    let spectrum = smallest_eigenpairs(l, scan_limit)?;
    EigengapReport::from_eigenvalues(&spectrum.values)
}

/// Default number of eigenvalues scanned for automatic `khat`.
pub fn default_scan_limit(n: usize) -> usize {
    50.min(n - 1)
}

/// Initial embedding from the `d` smallest eigenvectors of `L_X`, each
/// column rescaled to standard deviation [`INIT_SCALE`].
pub fn spectral_init(l: &Laplacian, d: usize, skip_trivial: bool) -> Result<Array2<f64>> {
    let offset = usize::from(skip_trivial);
    if d == 0 || d + offset > l.n() {
        return Err(Error::config(format!(
            "cannot take {d} eigenvectors from a {}-vertex Laplacian",
            l.n()
        )));
    }
    let spectrum = smallest_eigenpairs(l, d + offset)?;
    let idx: Vec<usize> = (offset..offset + d).collect();
    let mut y = spectrum.vectors.select(Axis(1), &idx);
    rescale_columns(&mut y, INIT_SCALE);
    Ok(y)
}

pub(crate) fn rescale_columns(y: &mut Array2<f64>, target_sd: f64) {
    let n = y.nrows() as f64;
    for mut col in y.columns_mut() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| v * (target_sd / sd));
        }
    }
}

/// One eigenvalue per line.
pub fn write_eigenvalues_csv(values: &[f64], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 24);
    for v in values {
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blocks(sizes: &[usize]) -> Array2<f64> {
        let n: usize = sizes.iter().sum();
        let mut a = Array2::zeros((n, n));
        let mut start = 0;
        for &s in sizes {
            for i in start..start + s {
                for j in start..start + s {
                    if i != j {
                        a[[i, j]] = 1.0;
                    }
                }
            }
            start += s;
        }
        a
    }

    #[test]
    fn two_node_graph() {
        let l = build_laplacian(array![[0.0, 1.0], [1.0, 0.0]].view(), Default::default()).unwrap();
        assert_eq!(l.matrix(), &array![[1.0, -1.0], [-1.0, 1.0]]);
        let s = smallest_eigenpairs(&l, 2).unwrap();
        assert!(s.values[0].abs() < 1e-14 && (s.values[1] - 2.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.vectors[[0, 0]] - h).abs() < 1e-14 && (s.vectors[[1, 0]] - h).abs() < 1e-14);
        assert!((s.vectors[[0, 1]] - h).abs() < 1e-14 && (s.vectors[[1, 1]] + h).abs() < 1e-14);
    }

    #[test]
    fn two_blocks_double_zero() {
        let l = build_laplacian(blocks(&[2, 2]).view(), Default::default()).unwrap();
        let s = smallest_eigenpairs(&l, 4).unwrap();
        assert!(s.values[0].abs() < 1e-12 && s.values[1].abs() < 1e-12);
        assert!(s.values[2] > 0.5);
    }

    #[test]
    fn isolated_vertex_is_rejected_unless_floored() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(
            build_laplacian(a.view(), Default::default()),
            Err(Error::DegenerateDegree { vertex: 2, .. })
        ));
        let l = build_laplacian(a.view(), LaplacianOptions { degree_floor: true }).unwrap();
        assert_eq!(l.matrix()[[2, 2]], 1.0);
    }

    /// Independent Jacobi rotation eigenvalue oracle.
    fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[[i, j]].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut v: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn random_adjacency(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.gen::<f64>() + 0.01;
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    }

    #[test]
    fn random_spectrum_matches_jacobi_oracle() {
        let l = build_laplacian(random_adjacency(6, 3).view(), Default::default()).unwrap();
        let s = smallest_eigenpairs(&l, 6).unwrap();
        let oracle = jacobi_eigenvalues(l.matrix());
        for (a, b) in s.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let l = build_laplacian(random_adjacency(20, 4).view(), Default::default()).unwrap();
        let s = smallest_eigenpairs(&l, 5).unwrap();
        let oracle = jacobi_eigenvalues(l.matrix());
        for (a, b) in s.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
        let fro = l.frobenius_norm();
        for j in 0..5 {
            let v = s.vectors.column(j);
            let r = l.matrix().dot(&v) - &v * s.values[j];
            assert!(r.dot(&r).sqrt() <= 1e-6 * fro);
        }
    }

    #[test]
    fn eigengap_picks_zero_block_and_ties_go_up() {
        let r = EigengapReport::from_eigenvalues(&[0.0, 0.0, 0.0, 0.5, 0.6, 0.7]).unwrap();
        assert_eq!(r.khat, 3);
        let r = EigengapReport::from_eigenvalues(&[0.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(r.khat, 3);
    }

    #[test]
    fn estimate_khat_on_cliques() {
        for c in [2usize, 3, 5] {
            let sizes: Vec<usize> = (0..c).map(|i| 6 + i).collect();
            let l = build_laplacian(blocks(&sizes).view(), Default::default()).unwrap();
            assert_eq!(estimate_khat(&l, 10).unwrap().khat, c);
        }
    }

    #[test]
    fn path_graph_init_is_kernel_direction() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let l = build_laplacian(a.view(), Default::default()).unwrap();
        let s = smallest_eigenpairs(&l, 2).unwrap();
        let dsqrt = l.degrees().mapv(f64::sqrt);
        let dn = dsqrt.dot(&dsqrt).sqrt();
        for i in 0..3 {
            assert!((s.vectors[[i, 0]] - dsqrt[i] / dn).abs() < 1e-12);
        }
        let y = spectral_init(&l, 2, false).unwrap();
        let ratio = y[[0, 0]] / s.vectors[[0, 0]];
        for i in 0..3 {
            assert!((y[[i, 0]] - ratio * s.vectors[[i, 0]]).abs() < 1e-14);
        }
    }

    #[test]
    fn init_columns_have_target_spread() {
        let l = build_laplacian(random_adjacency(15, 8).view(), Default::default()).unwrap();
        let y = spectral_init(&l, 2, true).unwrap();
        for col in y.columns() {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 15.0).sqrt();
            assert!((sd - INIT_SCALE).abs() < 1e-15);
        }
    }
}
