//! Majorization-minimization gradient descent for the embedding objective.
//!
//! Each outer iteration freezes the eigenbasis `V` of the embedding-kernel
//! Laplacian at the previous iterate, takes one momentum gradient step on
//! `KL + lambda Tr(V^T L_Y V)`, and recomputes `V`. The mini-batch variant
//! updates only a sampled row set and its input-space neighbours.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::affinity::{joint_affinities, sq_dist, AffinityOptions, DataMatrix, JointAffinity};
use crate::eigen::{self, KrylovOptions};
use crate::error::{Error, Result};
use crate::objective::KernelKind;
use crate::spectral::{
    build_laplacian, default_scan_limit, rescale_columns, smallest_eigenpairs, EigengapReport, Laplacian,
    LaplacianOptions, INIT_SCALE,
};

/// Embeddings up to this size use the dense eigensolver every iteration.
pub const DENSE_ITERATION_LIMIT: usize = 300;
/// Loss growth beyond this factor of the initial loss aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Minibatch,
    Landmark,
}

/// `beta(t) = early` for `t < switch_iter`, `late` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MomentumSchedule {
    pub early: f64,
    pub late: f64,
    pub switch_iter: usize,
}

impl MomentumSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            early: beta,
            late: beta,
            switch_iter: 0,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        if t < self.switch_iter {
            self.early
        } else {
            self.late
        }
    }
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self {
            early: 0.5,
            late: 0.8,
            switch_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub perplexity: f64,
    pub d: usize,
    /// `None` picks the largest eigengap of `L_X`.
    pub k_hat: Option<usize>,
    pub lambda: f64,
    /// `None` uses [`default_step_size`].
    pub step_size: Option<f64>,
    pub momentum: MomentumSchedule,
    pub max_iter: usize,
    pub kernel: KernelKind,
    pub mode: Mode,
    /// `None` uses [`default_batch_size`].
    pub batch_size: Option<usize>,
    pub knn_expand: usize,
    pub seed: u64,
    pub standardize: bool,
    pub skip_trivial_eigvec: bool,
    pub eig_refresh_every: usize,
    pub degree_floor: bool,
    /// Keep the `k_hat` Laplacian eigenvalues of every iteration in the trace.
    pub record_eigenvalues: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            perplexity: 25.0,
            d: 2,
            k_hat: None,
            lambda: 1e-4,
            step_size: None,
            momentum: MomentumSchedule::default(),
            max_iter: 500,
            kernel: KernelKind::TStudent,
            mode: Mode::Full,
            batch_size: None,
            knn_expand: 5,
            seed: 0,
            standardize: false,
            skip_trivial_eigvec: false,
            eig_refresh_every: 1,
            degree_floor: false,
            record_eigenvalues: false,
        }
    }
}

/// Step size used when none is configured: `max(100, 2N)`.
pub fn default_step_size(n: usize) -> f64 {
    (2.0 * n as f64).max(100.0)
}

/// Batch size used when none is configured: a tenth of the points.
pub fn default_batch_size(n: usize) -> usize {
    n.div_ceil(10).max(2)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.d == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        if !finite_nonneg(self.lambda) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("step size must be > 0, got {a}")));
            }
        }
        for beta in [self.momentum.early, self.momentum.late] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("momentum must lie in [0, 1), got {beta}")));
            }
        }
        if self.eig_refresh_every == 0 {
            return Err(Error::config("eigenbasis refresh cadence must be at least 1"));
        }
        if self.k_hat == Some(0) {
            return Err(Error::config("k_hat must be at least 1"));
        }
        Ok(())
    }

    pub fn step_for(&self, n: usize) -> f64 {
        self.step_size.unwrap_or_else(|| default_step_size(n))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Losses at the iterate the step starts from.
    pub kl: f64,
    pub reg: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub eigenvalues: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iter == b.iter
                    && a.kl == b.kl
                    && a.reg == b.reg
                    && a.total == b.total
                    && a.grad_norm == b.grad_norm
                    && a.eigenvalues == b.eigenvalues
            })
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.records.iter().map(|r| r.wall_ms).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,kl,reg,total,grad_norm,wall_ms\n");
        for r in &self.records {
            let reg = r.reg.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.kl, reg, r.total, r.grad_norm, r.wall_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Coordinates under optimization with the previous iterate for momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub y: Array2<f64>,
    pub previous: Array2<f64>,
    pub iteration: usize,
}

impl Embedding {
    pub fn velocity(&self) -> Array2<f64> {
        &self.y - &self.previous
    }
}

/// `Y_t = Y_{t-1} - alpha grad + beta (Y_{t-1} - Y_{t-2})`.
pub fn step(
    y_prev: ArrayView2<'_, f64>,
    y_prev2: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
    alpha: f64,
    beta: f64,
) -> Result<Array2<f64>> {
    if y_prev.dim() != y_prev2.dim() || y_prev.dim() != grad.dim() {
        return Err(Error::dims(
            format!("{:?}", y_prev.dim()),
            format!("{:?} / {:?}", y_prev2.dim(), grad.dim()),
        ));
    }
    let mut out = y_prev.to_owned();
    Zip::from(&mut out)
        .and(y_prev2)
        .and(grad)
        .for_each(|y, &y2, &g| *y = *y - alpha * g + beta * (*y - y2));
    Ok(out)
}

/// Input-side quantities shared by every run on the same data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub p: JointAffinity,
    pub laplacian_x: Laplacian,
    /// Eigengap scan of `L_X` (absent when `k_hat` was given and the scan
    /// was not needed).
    pub eigengap: Option<EigengapReport>,
    pub k_hat: usize,
    pub y0: Array2<f64>,
}

pub fn prepare(x: &DataMatrix, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let opts = AffinityOptions {
        perplexity: cfg.perplexity,
        standardize: cfg.standardize,
        ..Default::default()
    };
    let p = joint_affinities(x, &opts)?;
    prepare_from_affinity(p, cfg)
}

pub fn prepare_from_affinity(p: JointAffinity, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = p.n();
    let laplacian_x = build_laplacian(
        p.view(),
        LaplacianOptions {
            degree_floor: cfg.degree_floor,
        },
    )?;
    let offset = usize::from(cfg.skip_trivial_eigvec);
    let scan = if cfg.k_hat.is_none() { default_scan_limit(n) } else { 0 };
    let want = scan.max(cfg.d + offset);
    if want > n {
        return Err(Error::config(format!("{n} points cannot supply {want} eigenvectors")));
    }
    let spectrum = smallest_eigenpairs(&laplacian_x, want)?;
    let eigengap = if scan >= 2 {
        Some(EigengapReport::from_eigenvalues(&spectrum.values[..scan])?)
    } else {
        None
    };
    let k_hat = match (cfg.k_hat, &eigengap) {
        (Some(k), _) => k,
        (None, Some(r)) => r.khat,
        (None, None) => 1,
    };
    if n < 4.max(k_hat + 1) {
        return Err(Error::config(format!(
            "need at least max(4, k_hat + 1) points, got {n}"
        )));
    }
    let idx: Vec<usize> = (offset..offset + cfg.d).collect();
    let mut y0 = spectrum.vectors.select(Axis(1), &idx);
    rescale_columns(&mut y0, INIT_SCALE);
    Ok(Prepared {
        p,
        laplacian_x,
        eigengap,
        k_hat,
        y0,
    })
}

/// Kernel matrix with zero diagonal and cached row sums. For the t-Student
/// kernel used in the KL term it also caches `sum_ij p_ij ln t_ij`.
struct KernelState {
    kind: KernelKind,
    values: Array2<f64>,
    sums: Array1<f64>,
    plog: Option<f64>,
}

fn kernel_row(kind: KernelKind, y: ArrayView2<'_, f64>, i: usize, row: &mut [f64]) {
    let yi = y.row(i);
    for (j, v) in row.iter_mut().enumerate() {
        *v = if j == i { 0.0 } else { kind.eval(sq_dist(yi, y.row(j))) };
    }
}

impl KernelState {
    fn new(kind: KernelKind, y: ArrayView2<'_, f64>, p: Option<ArrayView2<'_, f64>>) -> Self {
        let n = y.nrows();
        let mut s = Self {
            kind,
            values: Array2::zeros((n, n)),
            sums: Array1::zeros(n),
            plog: p.map(|_| 0.0),
        };
        s.refresh_all(y, p);
        s
    }

    fn refresh_all(&mut self, y: ArrayView2<'_, f64>, p: Option<ArrayView2<'_, f64>>) {
        let kind = self.kind;
        let stats: Vec<(f64, f64)> = self
            .values
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(i, mut row)| {
                let row = row.as_slice_mut().expect("contiguous");
                kernel_row(kind, y, i, row);
                let sum = row.iter().sum();
                let plog = p.map_or(0.0, |p| {
                    let prow = p.row(i);
                    row.iter()
                        .zip(prow.iter())
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, (&t, &pij))| pij * t.ln())
                        .sum()
                });
                (sum, plog)
            })
            .collect();
        for (i, &(sum, _)) in stats.iter().enumerate() {
            self.sums[i] = sum;
        }
        if let Some(total) = self.plog.as_mut() {
            *total = stats.iter().map(|s| s.1).sum();
        }
    }

    /// Recompute rows and columns listed in `rows`; other row sums and the
    /// `p ln t` total are updated incrementally.
    fn refresh_rows(
        &mut self,
        y: ArrayView2<'_, f64>,
        p: Option<ArrayView2<'_, f64>>,
        rows: &[usize],
        member: &[bool],
    ) {
        let kind = self.kind;
        let n = y.nrows();
        let fresh: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|&i| {
                let mut row = vec![0.0; n];
                kernel_row(kind, y, i, &mut row);
                row
            })
            .collect();
        if let (Some(total), Some(p)) = (self.plog.as_mut(), p) {
            // Pairs with one end outside `rows` appear twice in the full sum.
            let values = &self.values;
            let delta: f64 = rows
                .par_iter()
                .zip(fresh.par_iter())
                .map(|(&a, new)| {
                    let old = values.row(a);
                    let prow = p.row(a);
                    let mut acc = 0.0;
                    for j in 0..n {
                        if j == a {
                            continue;
                        }
                        let w = if member[j] { 1.0 } else { 2.0 };
                        acc += w * prow[j] * (new[j] / old[j]).ln();
                    }
                    acc
                })
                .sum();
            *total += delta;
        }
        let mut slot = vec![usize::MAX; n];
        for (s, &i) in rows.iter().enumerate() {
            slot[i] = s;
        }
        self.values
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(self.sums.as_slice_mut().expect("contiguous").par_iter_mut())
            .enumerate()
            .for_each(|(i, (mut row, sum))| {
                if member[i] {
                    let new = &fresh[slot[i]];
                    row.as_slice_mut().expect("contiguous").copy_from_slice(new);
                    *sum = new.iter().sum();
                    return;
                }
                for &j in rows {
                    let new = fresh[slot[j]][i];
                    *sum += new - row[j];
                    row[j] = new;
                }
            });
    }
}

/// Spectral quantities of the regularizer at the current iterate.
struct SpectralState {
    v: Array2<f64>,
    /// `D^{-1/2} V`.
    vs: Array2<f64>,
    /// `U1` row values (equal to the `U0` column values for symmetric `W`).
    u: Array1<f64>,
    reg: f64,
    values: Vec<f64>,
    warm: Option<Array2<f64>>,
}

/// Objective state shared by the full and mini-batch loops.
struct Engine<'a> {
    p: ArrayView2<'a, f64>,
    plogp: f64,
    p_total: f64,
    lambda: f64,
    k: usize,
    kind: KernelKind,
    y: Array2<f64>,
    t: KernelState,
    /// Separate regularizer kernel when it is not the t-Student one.
    w: Option<KernelState>,
    spec: Option<SpectralState>,
    seed: u64,
}

impl<'a> Engine<'a> {
    fn new(p: &'a JointAffinity, y0: Array2<f64>, lambda: f64, k: usize, kind: KernelKind, seed: u64) -> Self {
        let pv = p.view();
        let plogp = pv.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
        let p_total = pv.sum();
        let t = KernelState::new(KernelKind::TStudent, y0.view(), Some(pv));
        let w = match kind {
            KernelKind::TStudent => None,
            _ if lambda == 0.0 => None,
            other => Some(KernelState::new(other, y0.view(), None)),
        };
        Self {
            p: pv,
            plogp,
            p_total,
            lambda,
            k,
            kind,
            y: y0,
            t,
            w,
            spec: None,
            seed,
        }
    }

    fn n(&self) -> usize {
        self.y.nrows()
    }

    fn reg_kernel(&self) -> &KernelState {
        self.w.as_ref().unwrap_or(&self.t)
    }

    fn set_all(&mut self, y: Array2<f64>) {
        self.y = y;
        self.t.refresh_all(self.y.view(), Some(self.p));
        if let Some(w) = self.w.as_mut() {
            w.refresh_all(self.y.view(), None);
        }
    }

    fn set_rows(&mut self, y: Array2<f64>, rows: &[usize], member: &[bool]) {
        self.y = y;
        self.t.refresh_rows(self.y.view(), Some(self.p), rows, member);
        if let Some(w) = self.w.as_mut() {
            w.refresh_rows(self.y.view(), None, rows, member);
        }
    }

    fn z(&self) -> f64 {
        self.t.sums.sum()
    }

    fn kl(&self) -> f64 {
        let plogt = self.t.plog.expect("KL kernel tracks p ln t");
        self.plogp - plogt + self.p_total * self.z().ln()
    }

    fn update_spectral(&mut self) -> Result<()> {
        let n = self.n();
        let k = self.k;
        let wk = self.reg_kernel();
        let degrees = &wk.sums;
        if let Some((vertex, &degree)) = degrees.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
            return Err(Error::DegenerateDegree { vertex, degree });
        }
        let s = degrees.mapv(|d| 1.0 / d.sqrt());
        let wm = &wk.values;
        let apply = |x: ArrayView2<'_, f64>| {
            let sx = &x * &s.view().insert_axis(Axis(1));
            let mut out = wm.dot(&sx);
            out *= &s.view().insert_axis(Axis(1));
            out += &x;
            out
        };

        let warm = self.spec.as_ref().and_then(|sp| sp.warm.clone());
        let (values, v, warm) = if n <= DENSE_ITERATION_LIMIT {
            let mut l = Array2::from_shape_fn((n, n), |(i, j)| -wm[[i, j]] * s[i] * s[j]);
            l.diag_mut().fill(1.0);
            let e = eigen::dense_symmetric(l.view())?;
            let take = (k + 1).min(n);
            let idx: Vec<usize> = (0..k).collect();
            (e.values[..take].to_vec(), e.vectors.select(Axis(1), &idx), None)
        } else {
            let out = eigen::top_eigenpairs(
                n,
                k,
                apply,
                warm.as_ref().map(|w| w.view()),
                KrylovOptions::for_count(n, k),
                self.seed,
            )?;
            if out.converged {
                log::trace!("eigensolve: {} iterations, {} products", out.iterations, out.products);
                let values = out.pairs.values.iter().map(|t| 2.0 - t).collect();
                (values, out.pairs.vectors, Some(out.block))
            } else {
                log::warn!(
                    "block Krylov solver stalled after {} iterations, using dense fallback",
                    out.iterations
                );
                let mut l = Array2::from_shape_fn((n, n), |(i, j)| -wm[[i, j]] * s[i] * s[j]);
                l.diag_mut().fill(1.0);
                let e = eigen::dense_symmetric(l.view())?;
                let idx: Vec<usize> = (0..k).collect();
                (e.values[..k].to_vec(), e.vectors.select(Axis(1), &idx), None)
            }
        };

        let vs = &v * &s.view().insert_axis(Axis(1));
        let m = wm.dot(&vs);
        let u = Array1::from_shape_fn(n, |i| 0.5 * s[i] * s[i] * s[i] * v.row(i).dot(&m.row(i)));
        let quad: f64 = Zip::from(&vs).and(&m).fold(0.0, |acc, a, b| acc + a * b);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        self.spec = Some(SpectralState {
            v,
            vs,
            u,
            reg: vv - quad,
            values,
            warm,
        });
        Ok(())
    }

    /// Recompute `U1`, `D^{-1/2} V` and the trace for the current kernel and
    /// a frozen basis.
    fn rebind_basis(&mut self) {
        let Some(spec) = self.spec.as_mut() else { return };
        let wk = self.w.as_ref().unwrap_or(&self.t);
        let s = wk.sums.mapv(|d| 1.0 / d.sqrt());
        spec.vs = &spec.v * &s.view().insert_axis(Axis(1));
        let m = wk.values.dot(&spec.vs);
        let n = s.len();
        spec.u = Array1::from_shape_fn(n, |i| 0.5 * s[i] * s[i] * s[i] * spec.v.row(i).dot(&m.row(i)));
        let quad: f64 = Zip::from(&spec.vs).and(&m).fold(0.0, |acc, a, b| acc + a * b);
        spec.reg = spec.v.iter().map(|x| x * x).sum::<f64>() - quad;
    }

    /// Gradient rows of `KL + lambda Tr(V^T L_Y V)` with `V` frozen.
    fn gradient_rows(&self, rows: &[usize]) -> Array2<f64> {
        const CHUNK: usize = 64;
        let n = self.n();
        let d = self.y.ncols();
        let zi = 1.0 / self.z();
        let reg = if self.lambda > 0.0 { self.spec.as_ref() } else { None };
        let scale = -2.0 * self.kind.outer_scale() * self.lambda;
        let kind = self.kind;
        let wvals = &self.reg_kernel().values;
        let parts: Vec<Array2<f64>> = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                // Pairwise coefficients, seeded with vs_a . vs_n when the
                // regularizer is active.
                let mut coef = match reg {
                    Some(sp) => sp.vs.select(Axis(0), chunk).dot(&sp.vs.t()),
                    None => Array2::zeros((chunk.len(), n)),
                };
                // `dot` may hand back a column-major product.
                if !coef.is_standard_layout() {
                    coef = coef.as_standard_layout().into_owned();
                }
                let mut sums = vec![0.0; chunk.len()];
                for (r, &a) in chunk.iter().enumerate() {
                    let mut crow = coef.row_mut(r);
                    let crow = crow.as_slice_mut().expect("contiguous");
                    let trow = self.t.values.row(a);
                    let trow = trow.as_slice().expect("contiguous");
                    let prow = self.p.row(a);
                    let mut total = 0.0;
                    match reg {
                        Some(sp) => {
                            let wrow = wvals.row(a);
                            let ua = sp.u[a];
                            for j in 0..n {
                                let t = trow[j];
                                let c =
                                    4.0 * (prow[j] - t * zi) * t + scale * (ua + sp.u[j] - crow[j]) * kind.phi(wrow[j]);
                                crow[j] = c;
                                total += c;
                            }
                        }
                        None => {
                            for j in 0..n {
                                let t = trow[j];
                                let c = 4.0 * (prow[j] - t * zi) * t;
                                crow[j] = c;
                                total += c;
                            }
                        }
                    }
                    total -= crow[a];
                    crow[a] = 0.0;
                    sums[r] = total;
                }
                let mut g = coef.dot(&self.y);
                g.mapv_inplace(|v| -v);
                for (r, &a) in chunk.iter().enumerate() {
                    for c in 0..d {
                        g[[r, c]] += sums[r] * self.y[[a, c]];
                    }
                }
                g
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Array2::zeros((0, d));
        }
        ndarray::concatenate(Axis(0), &views).expect("column counts agree")
    }

    fn total(&self) -> (f64, Option<f64>, f64) {
        let kl = self.kl();
        match (self.lambda > 0.0, self.spec.as_ref()) {
            (true, Some(sp)) => (kl, Some(sp.reg), kl + self.lambda * sp.reg),
            _ => (kl, None, kl),
        }
    }
}

fn check_run(prep: &Prepared, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let n = prep.p.n();
    if prep.k_hat >= n {
        return Err(Error::config(format!("k_hat {} must be below N = {n}", prep.k_hat)));
    }
    if prep.y0.dim() != (n, cfg.d) {
        return Err(Error::dims(format!("({n}, {})", cfg.d), format!("{:?}", prep.y0.dim())));
    }
    Ok(())
}

fn divergence_check(t: usize, total: f64, initial: f64) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration: t,
            message: format!("loss became {total}"),
        });
    }
    if t > 1 && total.abs() > DIVERGENCE_FACTOR * initial.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Divergence {
            iteration: t,
            message: format!("loss {total} exceeds {DIVERGENCE_FACTOR}x the initial {initial}"),
        });
    }
    Ok(())
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn needs_refresh(cfg: &RunConfig, t: usize) -> bool {
    cfg.lambda > 0.0 && (t - 1).is_multiple_of(cfg.eig_refresh_every)
}

/// Full-batch loop from a prepared input.
pub fn optimize_full(prep: &Prepared, cfg: &RunConfig) -> Result<(Embedding, IterationTrace)> {
    check_run(prep, cfg)?;
    let n = prep.p.n();
    let alpha = cfg.step_for(n);
    let mut eng = Engine::new(&prep.p, prep.y0.clone(), cfg.lambda, prep.k_hat, cfg.kernel, cfg.seed);
    let mut y_prev = prep.y0.clone();
    let all: Vec<usize> = (0..n).collect();
    let mut trace = IterationTrace::default();
    let mut initial = f64::NAN;

    for t in 1..=cfg.max_iter {
        let clock = Instant::now();
        if needs_refresh(cfg, t) {
            eng.update_spectral()?;
        } else if cfg.lambda > 0.0 {
            eng.rebind_basis();
        }
        let (kl, reg, total) = eng.total();
        if t == 1 {
            initial = total;
        }
        divergence_check(t, total, initial)?;
        let grad = eng.gradient_rows(&all);
        let next = step(eng.y.view(), y_prev.view(), grad.view(), alpha, cfg.momentum.at(t))?;
        y_prev = eng.y.clone();
        eng.set_all(next);
        trace.records.push(IterationRecord {
            iter: t,
            kl,
            reg,
            total,
            grad_norm: frob(&grad),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            eigenvalues: snapshot(cfg, &eng),
        });
    }
    Ok((
        Embedding {
            y: eng.y,
            previous: y_prev,
            iteration: cfg.max_iter,
        },
        trace,
    ))
}

fn snapshot(cfg: &RunConfig, eng: &Engine<'_>) -> Option<Vec<f64>> {
    if cfg.record_eigenvalues {
        eng.spec.as_ref().map(|s| s.values.clone())
    } else {
        None
    }
}

/// Input-space neighbours of every point, by decreasing `p_ij`.
#[derive(Debug, Clone)]
pub struct NeighbourLists {
    lists: Vec<Vec<usize>>,
}

impl NeighbourLists {
    pub fn from_affinity(p: &JointAffinity, len: usize) -> Self {
        let n = p.n();
        let len = len.min(n - 1);
        let lists = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = p.matrix().row(i);
                let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx.truncate(len);
                idx
            })
            .collect();
        Self { lists }
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }
}

/// `batch` plus, for each member, its `kappa` strongest neighbours outside
/// the batch. Returned sorted.
pub fn expand_batch(batch: &[usize], kappa: usize, nbrs: &NeighbourLists, n: usize) -> Vec<usize> {
    let mut in_batch = vec![false; n];
    for &i in batch {
        in_batch[i] = true;
    }
    let mut member = in_batch.clone();
    let mut out = batch.to_vec();
    if kappa > 0 {
        for &i in batch {
            for &j in nbrs.of(i).iter().filter(|&&j| !in_batch[j]).take(kappa) {
                if !member[j] {
                    member[j] = true;
                    out.push(j);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Epoch-style sampler: uniform without replacement, reshuffled per epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    m: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            m,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.m).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Mini-batch loop from a prepared input.
pub fn optimize_minibatch(prep: &Prepared, cfg: &RunConfig) -> Result<(Embedding, IterationTrace)> {
    check_run(prep, cfg)?;
    let n = prep.p.n();
    let m = cfg.batch_size.unwrap_or_else(|| default_batch_size(n));
    if m < 2 || m > n {
        return Err(Error::config(format!("batch size {m} must lie in [2, {n}]")));
    }
    let alpha = cfg.step_for(n);
    let kappa = cfg.knn_expand;
    let nbrs = (kappa > 0 && m < n).then(|| NeighbourLists::from_affinity(&prep.p, 3 * kappa + 16));
    let mut sampler = BatchSampler::new(n, m, cfg.seed ^ 0xba7c);
    let mut eng = Engine::new(&prep.p, prep.y0.clone(), cfg.lambda, prep.k_hat, cfg.kernel, cfg.seed);
    let mut y_prev = prep.y0.clone();
    let mut trace = IterationTrace::default();
    let mut initial = f64::NAN;

    for t in 1..=cfg.max_iter {
        let clock = Instant::now();
        if needs_refresh(cfg, t) {
            eng.update_spectral()?;
        } else if cfg.lambda > 0.0 {
            eng.rebind_basis();
        }
        let (kl, reg, total) = eng.total();
        if t == 1 {
            initial = total;
        }
        divergence_check(t, total, initial)?;

        let batch = sampler.next_batch();
        let rows = match &nbrs {
            Some(nb) => expand_batch(&batch, kappa, nb, n),
            None => {
                let mut b = batch;
                b.sort_unstable();
                b
            }
        };
        let grad = eng.gradient_rows(&rows);
        let beta = cfg.momentum.at(t);
        let mut next = eng.y.clone();
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..cfg.d {
                let y = eng.y[[i, c]];
                next[[i, c]] = y - alpha * grad[[r, c]] + beta * (y - y_prev[[i, c]]);
            }
        }
        y_prev = eng.y.clone();
        if rows.len() == n {
            eng.set_all(next);
        } else {
            let mut member = vec![false; n];
            for &i in &rows {
                member[i] = true;
            }
            eng.set_rows(next, &rows, &member);
        }
        trace.records.push(IterationRecord {
            iter: t,
            kl,
            reg,
            total,
            grad_norm: frob(&grad),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            eigenvalues: snapshot(cfg, &eng),
        });
    }
    Ok((
        Embedding {
            y: eng.y,
            previous: y_prev,
            iteration: cfg.max_iter,
        },
        trace,
    ))
}

pub fn run_full(x: &DataMatrix, cfg: &RunConfig) -> Result<(Embedding, IterationTrace)> {
    let prep = prepare(x, cfg)?;
    optimize_full(&prep, cfg)
}

pub fn run_minibatch(x: &DataMatrix, cfg: &RunConfig) -> Result<(Embedding, IterationTrace)> {
    let prep = prepare(x, cfg)?;
    optimize_minibatch(&prep, cfg)
}

/// Gradient of the surrogate objective at `y` with the basis frozen at
/// `prep.y0`, as used by the Lipschitz estimate.
pub struct SurrogateGradient<'a> {
    eng: Engine<'a>,
}

impl<'a> SurrogateGradient<'a> {
    pub fn new(prep: &'a Prepared, cfg: &RunConfig) -> Result<Self> {
        check_run(prep, cfg)?;
        let mut eng = Engine::new(&prep.p, prep.y0.clone(), cfg.lambda, prep.k_hat, cfg.kernel, cfg.seed);
        if cfg.lambda > 0.0 {
            eng.update_spectral()?;
        }
        Ok(Self { eng })
    }

    pub fn gradient(&mut self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if y.dim() != self.eng.y.dim() {
            return Err(Error::dims(format!("{:?}", self.eng.y.dim()), format!("{:?}", y.dim())));
        }
        self.eng.set_all(y.to_owned());
        self.eng.rebind_basis();
        let all: Vec<usize> = (0..self.eng.n()).collect();
        Ok(self.eng.gradient_rows(&all))
    }

    /// Surrogate loss `KL + lambda Tr(V0^T L_Y V0)` at the last point passed
    /// to [`Self::gradient`].
    pub fn loss(&self) -> f64 {
        self.eng.total().2
    }
}

/// Running maximum of `|grad(Y) - grad(Y')| / |Y - Y'|` over `trials` random
/// pairs drawn around `y0` with per-entry standard deviation `radius`.
pub fn estimate_lipschitz_with<F>(
    mut grad: F,
    y0: ArrayView2<'_, f64>,
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    if trials < 2 {
        return Err(Error::config(format!(
            "Lipschitz estimate needs at least 2 trials, got {trials}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturb = |rng: &mut ChaCha8Rng| {
        let mut y = y0.to_owned();
        y.mapv_inplace(|v| v + radius * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
        y
    };
    let mut best = 0.0f64;
    let mut history = Vec::with_capacity(trials);
    for _ in 0..trials {
        let a = perturb(&mut rng);
        let b = perturb(&mut rng);
        let ga = grad(a.view())?;
        let gb = grad(b.view())?;
        let ratio = frob(&(&ga - &gb)) / frob(&(&a - &b));
        best = best.max(ratio);
        history.push(best);
    }
    Ok(history)
}

/// Empirical Lipschitz constant of the surrogate gradient near the
/// spectral initialization.
pub fn estimate_lipschitz(x: &DataMatrix, cfg: &RunConfig, trials: usize) -> Result<f64> {
    let prep = prepare(x, cfg)?;
    lipschitz_prepared(&prep, cfg, trials)
}

pub fn lipschitz_prepared(prep: &Prepared, cfg: &RunConfig, trials: usize) -> Result<f64> {
    let mut sg = SurrogateGradient::new(prep, cfg)?;
    let radius = (prep.y0.iter().map(|v| v * v).sum::<f64>() / prep.y0.len() as f64).sqrt();
    let history = estimate_lipschitz_with(|y| sg.gradient(y), prep.y0.view(), trials, radius, cfg.seed)?;
    Ok(*history.last().expect("trials >= 2"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{kl_gradient, low_dim_q, reg_gradient};
    use ndarray::array;
    use rand::Rng;

    fn blobs(per: usize, k: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((per * k, 3));
        for c in 0..k {
            let center = [10.0 * c as f64, 5.0 * (c % 2) as f64, -3.0 * c as f64];
            for i in 0..per {
                for f in 0..3 {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    x[[c * per + i, f]] = center[f] + noise;
                }
            }
        }
        DataMatrix::new(x).unwrap()
    }

    #[test]
    fn step_formula() {
        let y = array![[1.0, 2.0], [3.0, 4.0]];
        let y2 = array![[0.5, 2.5], [3.0, 3.0]];
        let g = array![[0.1, -0.2], [0.0, 1.0]];
        let zero = Array2::zeros((2, 2));
        assert_eq!(step(y.view(), y.view(), zero.view(), 5.0, 0.0).unwrap(), y);
        let plain = step(y.view(), y2.view(), g.view(), 2.0, 0.0).unwrap();
        assert_eq!(plain, &y - &(&g * 2.0));
        let out = step(y.view(), y2.view(), g.view(), 2.0, 0.5).unwrap();
        for ((o, (&a, &b)), &gv) in out.iter().zip(y.iter().zip(y2.iter())).zip(g.iter()) {
            assert!((o - (a - 2.0 * gv + 0.5 * (a - b))).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_schedule() {
        let m = MomentumSchedule::default();
        assert_eq!(m.at(99), 0.5);
        assert_eq!(m.at(100), 0.8);
    }

    #[test]
    fn row_engine_matches_matrix_gradients() {
        let x = blobs(10, 3, 1);
        for kind in [KernelKind::TStudent, KernelKind::Gaussian { sigma: 0.01 }] {
            let cfg = RunConfig {
                k_hat: Some(3),
                kernel: kind,
                perplexity: 8.0,
                lambda: 0.3,
                ..Default::default()
            };
            let prep = prepare(&x, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = prep.y0.mapv(|v| v + 0.01 * rng.gen::<f64>());
            let mut eng = Engine::new(&prep.p, y.clone(), cfg.lambda, 3, kind, 0);
            eng.update_spectral().unwrap();
            let all: Vec<usize> = (0..30).collect();
            let g = eng.gradient_rows(&all);
            let q = low_dim_q(y.view()).unwrap();
            let v = eng.spec.as_ref().unwrap().v.clone();
            let expect = kl_gradient(&prep.p, &q, y.view()).unwrap()
                + reg_gradient(y.view(), v.view(), kind).unwrap() * cfg.lambda;
            let err = frob(&(&g - &expect)) / frob(&expect);
            assert!(err < 1e-10, "{kind}: {err}");
        }
    }

    #[test]
    fn incremental_kernel_refresh_matches_full() {
        let x = blobs(10, 2, 2);
        let cfg = RunConfig {
            k_hat: Some(2),
            perplexity: 5.0,
            ..Default::default()
        };
        let prep = prepare(&x, &cfg).unwrap();
        let mut state = KernelState::new(KernelKind::TStudent, prep.y0.view(), Some(prep.p.view()));
        let mut y = prep.y0.clone();
        let rows = vec![1usize, 4, 9];
        let mut member = vec![false; 20];
        for &r in &rows {
            member[r] = true;
            y[[r, 0]] += 0.05;
        }
        state.refresh_rows(y.view(), Some(prep.p.view()), &rows, &member);
        let fresh = KernelState::new(KernelKind::TStudent, y.view(), Some(prep.p.view()));
        assert_eq!(state.values, fresh.values);
        for i in 0..20 {
            assert!((state.sums[i] - fresh.sums[i]).abs() < 1e-12);
        }
        assert!((state.plog.unwrap() - fresh.plog.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_cache_matches_direct_loss() {
        let x = blobs(8, 2, 3);
        let cfg = RunConfig {
            k_hat: Some(2),
            perplexity: 4.0,
            ..Default::default()
        };
        let prep = prepare(&x, &cfg).unwrap();
        let eng = Engine::new(&prep.p, prep.y0.clone(), 0.0, 2, KernelKind::TStudent, 0);
        let q = low_dim_q(prep.y0.view()).unwrap();
        let direct = crate::objective::kl_loss(&prep.p, &q).unwrap();
        assert!((eng.kl() - direct).abs() < 1e-10);
    }

    #[test]
    fn expansion_adds_outside_neighbours() {
        let p = array![
            [0.0, 0.3, 0.1, 0.05],
            [0.3, 0.0, 0.02, 0.01],
            [0.1, 0.02, 0.0, 0.04],
            [0.05, 0.01, 0.04, 0.0]
        ];
        let s = p.sum();
        let p = JointAffinity::from_matrix(p / s).unwrap();
        let nb = NeighbourLists::from_affinity(&p, 3);
        assert_eq!(nb.of(0), &[1, 2, 3]);
        assert_eq!(expand_batch(&[0, 1], 1, &nb, 4), vec![0, 1, 2]);
        assert_eq!(expand_batch(&[3], 0, &nb, 4), vec![3]);
    }

    #[test]
    fn sampler_covers_epoch() {
        let mut s = BatchSampler::new(10, 4, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_lipschitz_is_one() {
        let y0 = Array2::zeros((5, 2));
        let h = estimate_lipschitz_with(|y| Ok(y.to_owned()), y0.view(), 6, 1.0, 3).unwrap();
        assert!(h.iter().all(|v| (v - 1.0).abs() < 0.05));
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn untouched_rows_stay_put() {
        let x = blobs(10, 3, 4);
        let cfg = RunConfig {
            k_hat: Some(3),
            perplexity: 8.0,
            max_iter: 1,
            batch_size: Some(3),
            knn_expand: 1,
            mode: Mode::Minibatch,
            ..Default::default()
        };
        let prep = prepare(&x, &cfg).unwrap();
        let (emb, _) = optimize_minibatch(&prep, &cfg).unwrap();
        let moved = (0..30).filter(|&i| emb.y.row(i) != prep.y0.row(i)).count();
        assert!(moved > 0 && moved <= 6, "{moved}");
    }

    #[test]
    fn runs_are_deterministic() {
        let x = blobs(10, 3, 6);
        let cfg = RunConfig {
            k_hat: Some(3),
            perplexity: 8.0,
            max_iter: 20,
            ..Default::default()
        };
        let (a, ta) = run_full(&x, &cfg).unwrap();
        let (b, tb) = run_full(&x, &cfg).unwrap();
        assert_eq!(a.y, b.y);
        assert!(ta.same_trajectory(&tb));
        let csv = ta.to_csv();
        assert!(csv.starts_with("iter,kl,reg,total,grad_norm,wall_ms\n"));
        assert_eq!(csv.lines().count(), 21);
    }

    #[test]
    fn config_rejections() {
        let bad = RunConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let x = blobs(3, 2, 7);
        let cfg = RunConfig {
            batch_size: Some(50),
            k_hat: Some(2),
            perplexity: 3.0,
            ..Default::default()
        };
        assert!(matches!(run_minibatch(&x, &cfg), Err(Error::Config(_))));
    }
}
