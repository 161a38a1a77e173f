//! Symmetric eigensolvers: a dense path backed by nalgebra and a block
//! Krylov (Davidson-style, unpreconditioned) solver for the few largest
//! eigenpairs of an operator that is only available through products.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Eigenpairs sorted by eigenvalue; direction given by the producer.
#[derive(Debug, Clone)]
pub(crate) struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

/// All eigenpairs of a symmetric matrix, ascending.
pub(crate) fn dense_symmetric(m: ArrayView2<'_, f64>) -> Result<EigenPairs> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims("square matrix", format!("{:?}", m.dim())));
    }
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 0)
        .ok_or_else(|| Error::Spectral("dense eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (c, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, c]] = eig.eigenvectors[(r, src)];
        }
    }
    Ok(EigenPairs { values, vectors })
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct KrylovOptions {
    pub block: usize,
    pub max_basis: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl KrylovOptions {
    pub fn for_count(n: usize, k: usize) -> Self {
        let block = (k + (k / 2).max(4)).min(n);
        Self {
            block,
            max_basis: (6 * block).min(n),
            tol: 1e-7,
            max_iter: 2000,
        }
    }
}

/// Result of [`top_eigenpairs`]; `values` descending.
#[derive(Debug, Clone)]
pub(crate) struct KrylovOutcome {
    pub pairs: EigenPairs,
    /// All Ritz vectors of the final block, a warm start for the next call.
    pub block: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub products: usize,
}

/// Make the columns of `w` orthonormal and orthogonal to `basis` with two
/// passes of classical Gram-Schmidt. Columns that vanish are dropped.
pub(crate) fn orthonormalize(basis: Option<ArrayView2<'_, f64>>, w: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = w.nrows();
    let orig: Vec<f64> = w.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut w = w.to_owned();
    if let Some(b) = basis {
        for _ in 0..2 {
            let coef = b.t().dot(&w);
            w -= &b.dot(&coef);
        }
    }
    let mut kept: Vec<Array1<f64>> = Vec::with_capacity(w.ncols());
    for (j, col) in w.columns().into_iter().enumerate() {
        if orig[j] == 0.0 || !orig[j].is_finite() {
            continue;
        }
        let mut v = col.to_owned();
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-10 * orig[j] {
            v /= norm;
            kept.push(v);
        }
    }
    let mut out = Array2::zeros((n, kept.len()));
    for (j, q) in kept.into_iter().enumerate() {
        out.column_mut(j).assign(&q);
    }
    out
}

fn hcat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

/// The `k` largest eigenpairs of a symmetric operator `apply` on `R^n`.
///
/// `start` seeds the search space (warm start); missing columns are filled
/// with seeded random vectors. Convergence requires every wanted residual
/// norm to fall below `tol * max(1, |theta_1|)`.
pub(crate) fn top_eigenpairs<F>(
    n: usize,
    k: usize,
    mut apply: F,
    start: Option<ArrayView2<'_, f64>>,
    opts: KrylovOptions,
    seed: u64,
) -> Result<KrylovOutcome>
where
    F: FnMut(ArrayView2<'_, f64>) -> Array2<f64>,
{
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "cannot extract {k} eigenpairs of a size-{n} operator"
        )));
    }
    let block = opts.block.clamp(k, n);
    let max_basis = opts.max_basis.clamp(block, n);

    let mut init = Array2::zeros((n, block));
    let mut filled = 0;
    if let Some(s0) = start {
        let take = s0.ncols().min(block);
        init.slice_mut(s![.., ..take]).assign(&s0.slice(s![.., ..take]));
        filled = take;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in filled..block {
        for i in 0..n {
            init[[i, j]] = rng.gen::<f64>() - 0.5;
        }
    }
    let mut v = orthonormalize(None, init.view());
    while v.ncols() < block {
        let extra = Array2::from_shape_fn((n, block - v.ncols()), |_| rng.gen::<f64>() - 0.5);
        let add = orthonormalize(Some(v.view()), extra.view());
        v = hcat(&v, &add);
    }
    let mut av = apply(v.view());
    let mut products = v.ncols();
    let mut h = symmetric_part(v.t().dot(&av));

    let mut iterations = 0;
    loop {
        iterations += 1;
        let eig = dense_symmetric(h.view())?;
        let m = v.ncols();
        let top: Vec<usize> = (0..block).map(|j| m - 1 - j).collect();
        let theta: Vec<f64> = top.iter().map(|&j| eig.values[j]).collect();
        let z = eig.vectors.select(Axis(1), &top);
        let zk = z.slice(s![.., ..k]);
        let xk = v.dot(&zk);
        let mut r = av.dot(&zk);
        for (j, mut col) in r.columns_mut().into_iter().enumerate() {
            col.scaled_add(-theta[j], &xk.column(j));
        }
        let thresh = opts.tol * theta[0].abs().max(1.0);
        let norms: Vec<f64> = r.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
        let done = norms.iter().all(|&nr| nr <= thresh);
        if done || iterations >= opts.max_iter {
            return Ok(KrylovOutcome {
                pairs: EigenPairs {
                    values: theta[..k].to_vec(),
                    vectors: xk,
                },
                block: v.dot(&z),
                converged: done,
                iterations,
                products,
            });
        }

        let active: Vec<usize> = (0..k).filter(|&j| norms[j] > thresh).collect();
        let residuals = r.select(Axis(1), &active);
        if m + active.len() > max_basis {
            // Restart from the Ritz block.
            v = v.dot(&z);
            av = av.dot(&z);
            h = symmetric_part(v.t().dot(&av));
        }
        let mut w = orthonormalize(Some(v.view()), residuals.view());
        if w.ncols() == 0 {
            // Residuals already lie in the search space: add a fresh
            // random direction.
            let extra = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() - 0.5);
            w = orthonormalize(Some(v.view()), extra.view());
        }
        let aw = apply(w.view());
        products += w.ncols();
        let cross = v.t().dot(&aw);
        let corner = symmetric_part(w.t().dot(&aw));
        let (m, p) = (v.ncols(), w.ncols());
        let mut grown = Array2::zeros((m + p, m + p));
        grown.slice_mut(s![..m, ..m]).assign(&h);
        grown.slice_mut(s![..m, m..]).assign(&cross);
        grown.slice_mut(s![m.., ..m]).assign(&cross.t());
        grown.slice_mut(s![m.., m..]).assign(&corner);
        h = grown;
        v = hcat(&v, &w);
        av = hcat(&av, &aw);
    }
}

fn symmetric_part(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (m + t) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_sym(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>() - 0.5);
        &a + &a.t()
    }

    #[test]
    fn dense_reconstructs_matrix() {
        let a = random_sym(7, 1);
        let e = dense_symmetric(a.view()).unwrap();
        let lam = Array2::from_diag(&Array1::from(e.values.clone()));
        let back = e.vectors.dot(&lam).dot(&e.vectors.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn orthonormalize_drops_dependent_columns() {
        let w = ndarray::array![[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 0.0]];
        let q = orthonormalize(None, w.view());
        assert_eq!(q.ncols(), 2);
        let g = q.t().dot(&q);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn krylov_matches_dense_top_values() {
        let n = 120;
        let a = random_sym(n, 5);
        let dense = dense_symmetric(a.view()).unwrap();
        let out = top_eigenpairs(
            n,
            4,
            |x| a.dot(&x),
            None,
            KrylovOptions {
                tol: 1e-11,
                ..KrylovOptions::for_count(n, 4)
            },
            3,
        )
        .unwrap();
        assert!(out.converged);
        for j in 0..4 {
            assert!((out.pairs.values[j] - dense.values[n - 1 - j]).abs() < 1e-9);
            let v = out.pairs.vectors.column(j);
            let r = a.dot(&v) - &v * out.pairs.values[j];
            assert!(r.dot(&r).sqrt() < 1e-8);
        }
    }

    #[test]
    fn warm_start_at_solution_exits_immediately() {
        let n = 60;
        let a = random_sym(n, 9);
        let dense = dense_symmetric(a.view()).unwrap();
        let idx: Vec<usize> = (0..8).map(|j| n - 1 - j).collect();
        let start = dense.vectors.select(Axis(1), &idx);
        let opts = KrylovOptions {
            block: 8,
            max_basis: 48,
            tol: 1e-9,
            max_iter: 50,
        };
        let out = top_eigenpairs(n, 3, |x| a.dot(&x), Some(start.view()), opts, 0).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }
}
