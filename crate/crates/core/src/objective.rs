//! The embedding objective: KL divergence between the input and embedding
//! similarities plus a Laplacian trace penalty, and their gradients.
//!
//! The trace penalty `Tr(V^T L_Y V)` is built on the unnormalized embedding
//! kernel `W` (t-Student `T` or Gaussian `K`). With row sums `r` and column
//! sums `c` of `W` and `G = V V^T`, its derivative with respect to `w_mn` is
//! `U0 + U1 + U2` where
//!
//! ```text
//! U1_mn = 1/2 r_m^{-3/2} sum_j G_mj w_mj c_j^{-1/2}     (constant along rows)
//! U0_mn = 1/2 c_n^{-3/2} sum_i G_in w_in r_i^{-1/2}     (constant down columns)
//! U2_mn = -G_mn r_m^{-1/2} c_n^{-1/2}
//! ```
//!
//! Chaining through the kernel gives `U~ = (U0 + U1 + U2) .* phi` with
//! `phi = T .* T` (t-Student) or `phi = K` (Gaussian), and
//!
//! ```text
//! dTr/dY = s ((U~ + U~^T) Y - Y .* (C + C'))
//! ```
//!
//! with `C = U~ 1`, `C' = U~^T 1`, `s = 2` for t-Student and `s = 1/sigma^2`
//! for Gaussian.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::affinity::{sq_dist, JointAffinity};
use crate::error::{Error, Result};

/// Floor applied to `q_ij` inside the KL divergence.
pub const Q_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    #[serde(rename = "tstudent")]
    TStudent,
    Gaussian {
        sigma: f64,
    },
}

impl KernelKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelKind::TStudent => Ok(()),
            KernelKind::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            KernelKind::Gaussian { sigma } => Err(Error::config(format!(
                "Gaussian kernel width must be positive, got {sigma}"
            ))),
        }
    }

    #[inline]
    pub(crate) fn eval(&self, d2: f64) -> f64 {
        match *self {
            KernelKind::TStudent => 1.0 / (1.0 + d2),
            KernelKind::Gaussian { sigma } => (-d2 / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// `phi` such that `dw/d(d2) = -phi / (2 s)`, i.e. the factor applied to
    /// `U0 + U1 + U2` entrywise.
    #[inline]
    pub(crate) fn phi(&self, w: f64) -> f64 {
        match self {
            KernelKind::TStudent => w * w,
            KernelKind::Gaussian { .. } => w,
        }
    }

    /// Outer scale `s` of the assembled gradient.
    pub(crate) fn outer_scale(&self) -> f64 {
        match *self {
            KernelKind::TStudent => 2.0,
            KernelKind::Gaussian { sigma } => 1.0 / (sigma * sigma),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::TStudent => write!(f, "tstudent"),
            KernelKind::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
        }
    }
}

fn check_embedding(y: ArrayView2<'_, f64>) -> Result<()> {
    if y.ncols() == 0 || y.nrows() < 2 {
        return Err(Error::dims(
            "embedding with N >= 2 rows and d >= 1",
            format!("{:?}", y.dim()),
        ));
    }
    for (i, row) in y.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData {
                row: i,
                message: "non-finite embedding coordinate".into(),
            });
        }
    }
    Ok(())
}

/// Pairwise kernel values with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingKernel {
    pub kind: KernelKind,
    pub values: Array2<f64>,
}

pub(crate) fn kernel_matrix(y: ArrayView2<'_, f64>, kind: KernelKind) -> Array2<f64> {
    let n = y.nrows();
    let mut w = Array2::zeros((n, n));
    w.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let yi = y.row(i);
            for j in 0..n {
                if j != i {
                    row[j] = kind.eval(sq_dist(yi, y.row(j)));
                }
            }
        });
    w
}

pub fn embedding_kernel(y: ArrayView2<'_, f64>, kind: KernelKind) -> Result<EmbeddingKernel> {
    kind.validate()?;
    check_embedding(y)?;
    Ok(EmbeddingKernel {
        kind,
        values: kernel_matrix(y, kind),
    })
}

/// Normalized t-Student similarities `q_ij = t_ij / Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub q: Array2<f64>,
    /// Normalizer `Z = sum_{l != s} t_ls`.
    pub z: f64,
}

pub fn low_dim_q(y: ArrayView2<'_, f64>) -> Result<QMatrix> {
    check_embedding(y)?;
    let t = kernel_matrix(y, KernelKind::TStudent);
    let z = t.sum();
    Ok(QMatrix { q: t / z, z })
}

fn check_pair(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::dims(format!("{:?}", p.dim()), format!("{:?}", q.dim())));
    }
    Ok(())
}

/// `sum_{i != j} p_ij log(p_ij / q_ij)`.
pub fn kl_loss(p: &JointAffinity, q: &QMatrix) -> Result<f64> {
    check_pair(p.view(), q.q.view())?;
    Ok(kl_raw(p.view(), q.q.view()))
}

pub(crate) fn kl_raw(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> f64 {
    let n = p.nrows();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| kl_row(p.row(i).as_slice(), q.row(i).as_slice(), i, 1.0))
        .collect();
    rows.iter().sum()
}

/// One row of the KL sum with `q = t / z`. `t` may be `q` itself with `z = 1`.
pub(crate) fn kl_row(p: Option<&[f64]>, t: Option<&[f64]>, i: usize, z: f64) -> f64 {
    let (p, t) = (p.expect("contiguous row"), t.expect("contiguous row"));
    let mut acc = 0.0;
    for (j, (&pj, &tj)) in p.iter().zip(t).enumerate() {
        if j != i && pj > 0.0 {
            acc += pj * (pj / (tj / z).max(Q_FLOOR)).ln();
        }
    }
    acc
}

/// Row `i`: `4 sum_j (p_ij - q_ij) t_ij (y_i - y_j)`.
pub fn kl_gradient(p: &JointAffinity, q: &QMatrix, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_pair(p.view(), q.q.view())?;
    if y.nrows() != p.n() {
        return Err(Error::dims(format!("{} embedding rows", p.n()), y.nrows().to_string()));
    }
    let n = y.nrows();
    let mut g = Array2::zeros(y.dim());
    g.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut gi)| {
            for j in 0..n {
                if j == i {
                    continue;
                }
                let qij = q.q[[i, j]];
                let coef = 4.0 * (p.matrix()[[i, j]] - qij) * (qij * q.z);
                Zip::from(&mut gi)
                    .and(y.row(i))
                    .and(y.row(j))
                    .for_each(|g, &a, &b| *g += coef * (a - b));
            }
        });
    Ok(g)
}

/// Trace derivative pieces for a kernel adjacency `W` and basis `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct UDecomposition {
    /// `U0_mn = u0[n]`.
    pub u0: Array1<f64>,
    /// `U1_mn = u1[m]`.
    pub u1: Array1<f64>,
    pub u2: Array2<f64>,
    /// `U~ = (U0 + U1 + U2) .* phi`.
    pub combined: Array2<f64>,
    /// Row sums of `U~`.
    pub c: Array1<f64>,
    /// Column sums of `U~`.
    pub c_prime: Array1<f64>,
}

impl UDecomposition {
    pub fn u0_matrix(&self) -> Array2<f64> {
        let n = self.u0.len();
        Array2::from_shape_fn((n, n), |(_, j)| self.u0[j])
    }

    pub fn u1_matrix(&self) -> Array2<f64> {
        let n = self.u1.len();
        Array2::from_shape_fn((n, n), |(i, _)| self.u1[i])
    }

    /// `U0 + U1 + U2` before the kernel factor.
    pub fn raw_sum(&self) -> Array2<f64> {
        let mut s = self.u2.clone();
        for ((i, j), v) in s.indexed_iter_mut() {
            *v += self.u0[j] + self.u1[i];
        }
        s
    }
}

fn degree_vector(sums: Array1<f64>) -> Result<Array1<f64>> {
    if let Some((vertex, &degree)) = sums.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(Error::DegenerateDegree { vertex, degree });
    }
    Ok(sums)
}

fn check_basis(n: usize, v: ArrayView2<'_, f64>) -> Result<()> {
    if v.nrows() != n || v.ncols() == 0 {
        return Err(Error::dims(
            format!("{n} x k basis with k >= 1"),
            format!("{:?}", v.dim()),
        ));
    }
    Ok(())
}

pub fn build_u_decomposition(w: &EmbeddingKernel, v: ArrayView2<'_, f64>) -> Result<UDecomposition> {
    let wm = &w.values;
    let n = wm.nrows();
    check_basis(n, v)?;
    let r = degree_vector(wm.sum_axis(Axis(1)))?;
    let c = degree_vector(wm.sum_axis(Axis(0)))?;
    let r_isqrt = r.mapv(|x| 1.0 / x.sqrt());
    let c_isqrt = c.mapv(|x| 1.0 / x.sqrt());

    let v_r = &v * &r_isqrt.view().insert_axis(Axis(1));
    let v_c = &v * &c_isqrt.view().insert_axis(Axis(1));
    // sum_j G_mj w_mj c_j^{-1/2} = sum_k V_mk (W diag(c^{-1/2}) V)_mk
    let m1 = wm.dot(&v_c);
    let m0 = wm.t().dot(&v_r);
    let u1 = Array1::from_shape_fn(n, |m| 0.5 * r[m].powf(-1.5) * v.row(m).dot(&m1.row(m)));
    let u0 = Array1::from_shape_fn(n, |j| 0.5 * c[j].powf(-1.5) * v.row(j).dot(&m0.row(j)));
    let u2 = -v_r.dot(&v_c.t());

    let mut combined = Array2::zeros((n, n));
    Zip::indexed(&mut combined)
        .and(&u2)
        .and(wm)
        .par_for_each(|(i, j), out, &u2v, &wv| {
            if i != j {
                *out = (u0[j] + u1[i] + u2v) * w.kind.phi(wv);
            }
        });
    let c_rows = combined.sum_axis(Axis(1));
    let c_cols = combined.sum_axis(Axis(0));
    Ok(UDecomposition {
        u0,
        u1,
        u2,
        combined,
        c: c_rows,
        c_prime: c_cols,
    })
}

/// `Tr(V^T L_W V)` with `L_W` the normalized Laplacian of `W`.
pub fn reg_value(w: &EmbeddingKernel, v: ArrayView2<'_, f64>) -> Result<f64> {
    let n = w.values.nrows();
    check_basis(n, v)?;
    let r = degree_vector(w.values.sum_axis(Axis(1)))?;
    Ok(trace_from_degrees(w.values.view(), v, &r))
}

pub(crate) fn trace_from_degrees(w: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, r: &Array1<f64>) -> f64 {
    let s = r.mapv(|x| 1.0 / x.sqrt());
    let vs = &v * &s.view().insert_axis(Axis(1));
    let wvs = w.dot(&vs);
    let quad: f64 = Zip::from(&vs).and(&wvs).fold(0.0, |acc, a, b| acc + a * b);
    // Diagonal of L is 1 because the kernel diagonal is zero.
    let vv: f64 = v.iter().map(|x| x * x).sum();
    vv - quad
}

/// `dTr(V^T L_Y V)/dY` with `V` held fixed, general (symmetrized) form.
pub fn reg_gradient(y: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, kind: KernelKind) -> Result<Array2<f64>> {
    let w = embedding_kernel(y, kind)?;
    let u = build_u_decomposition(&w, v)?;
    Ok(assemble_general(&u, y, kind))
}

fn assemble_general(u: &UDecomposition, y: ArrayView2<'_, f64>, kind: KernelKind) -> Array2<f64> {
    let sym = &u.combined + &u.combined.t();
    let cc = &u.c + &u.c_prime;
    let mut g = sym.dot(&y);
    g -= &(&y * &cc.view().insert_axis(Axis(1)));
    g *= kind.outer_scale();
    g
}

/// Compact form `2 s (U~ Y - C .* Y)`, valid when `U~` is symmetric.
pub fn reg_gradient_compact(y: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, kind: KernelKind) -> Result<Array2<f64>> {
    let w = embedding_kernel(y, kind)?;
    let u = build_u_decomposition(&w, v)?;
    let mut g = u.combined.dot(&y);
    g -= &(&y * &u.c.view().insert_axis(Axis(1)));
    g *= 2.0 * kind.outer_scale();
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub reg: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn loss(
    p: &JointAffinity,
    y: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    lambda: f64,
    kind: KernelKind,
) -> Result<LossBreakdown> {
    let q = low_dim_q(y)?;
    let kl = kl_loss(p, &q)?;
    let w = embedding_kernel(y, kind)?;
    let reg = reg_value(&w, v)?;
    Ok(LossBreakdown {
        kl,
        reg,
        lambda,
        total: if lambda == 0.0 { kl } else { kl + lambda * reg },
    })
}
