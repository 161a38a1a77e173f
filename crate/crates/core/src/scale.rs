//! Landmark embedding and out-of-sample mapping: k-means landmarks, an
//! embedding of the landmarks, and a feed-forward regressor that maps input
//! space to the embedding.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::affinity::{sq_dist, DataMatrix};
use crate::error::{Error, Result};
use crate::optimizer::{self, IterationTrace, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn plus_plus_seeds(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 {
                    if target < b {
                        pick = i;
                        break;
                    }
                    target -= b;
                }
            }
            if best[pick] == 0.0 {
                pick = best.iter().rposition(|&b| b > 0.0).expect("positive mass");
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            *free.choose(rng).expect("k <= n")
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen
}

fn nearest_center(point: ArrayView1<'_, f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::config(format!("k-means needs 1 <= k <= {n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus_seeds(x, k, &mut rng);
    let mut centers = x.select(Axis(0), &seeds);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let nearest: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_center(x.row(i), &centers))
            .collect();
        let changed = nearest.iter().zip(&assignments).any(|(a, &b)| a.0 != b);
        let mut dist: Vec<f64> = nearest.iter().map(|a| a.1).collect();
        for (slot, a) in assignments.iter_mut().zip(&nearest) {
            *slot = a.0;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("another cluster holds at least two points");
                log::debug!("k-means: re-seeding empty cluster {c} at point {far}");
                counts[assignments[far]] -= 1;
                counts[c] = 1;
                assignments[far] = c;
                dist[far] = 0.0;
                centers.row_mut(c).assign(&x.row(far));
            }
        }
        let inertia: f64 = dist.iter().sum();
        history.push(inertia);

        if !changed || iterations >= max_iter {
            return Ok(KMeansResult {
                centers,
                assignments,
                inertia,
                inertia_history: history,
                iterations,
            });
        }

        let mut sums = Array2::<f64>::zeros((k, x.ncols()));
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &x.row(i);
        }
        for c in 0..k {
            let row = sums.row(c).mapv(|v| v / counts[c] as f64);
            centers.row_mut(c).assign(&row);
        }
    }
}

/// Best-inertia result over `restarts` seeded runs.
pub fn kmeans_restarts(
    x: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(x, k, seed.wrapping_add(r as u64 * 0x9e37_79b9), max_iter)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    /// Sorted row indices into the dataset.
    pub indices: Vec<usize>,
    pub points: Array2<f64>,
}

/// One data point per k-means center: the nearest one not already taken.
pub fn select_landmarks(x: &DataMatrix, s: usize, seed: u64) -> Result<LandmarkSet> {
    let km = kmeans(x.view(), s, seed, KMEANS_MAX_ITER)?;
    Ok(landmarks_for_centers(x.view(), &km.centers))
}

pub(crate) fn landmarks_for_centers(x: ArrayView2<'_, f64>, centers: &Array2<f64>) -> LandmarkSet {
    let n = x.nrows();
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(centers.nrows());
    for center in centers.rows() {
        let mut order: Vec<(f64, usize)> = (0..n).map(|i| (sq_dist(x.row(i), center), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pick = order.iter().find(|(_, i)| !taken[*i]).expect("S <= N").1;
        taken[pick] = true;
        indices.push(pick);
    }
    indices.sort_unstable();
    LandmarkSet {
        points: x.select(Axis(0), &indices),
        indices,
    }
}

const MODEL_MAGIC: &[u8; 4] = b"LTSN";
const MODEL_VERSION: u32 = 1;

/// Fully connected network, ReLU on hidden layers, identity output.
/// Weights are stored `in x out` so a batch maps as `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Mean squared error on the training set after fitting.
    pub final_loss: f64,
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

pub fn architecture(d_in: usize, d_out: usize) -> Result<Vec<usize>> {
    if d_in < 5 {
        return Err(Error::config(format!(
            "regressor needs at least 5 input features, got {d_in}"
        )));
    }
    Ok(vec![d_in, 2 * d_in / 3, d_in / 2, d_in / 3, d_in / 5, d_out])
}

impl RegressorModel {
    /// He-initialized weights for hidden layers, Glorot for the output one.
    pub fn init(sizes: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let sd = if l + 1 == layers {
                (2.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                sd * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Self {
            sizes,
            weights,
            biases,
            final_loss: f64::NAN,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty architecture")
    }

    /// Activations of every layer, input first.
    fn activations(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let layers = self.weights.len();
        let mut acts = vec![x.to_owned()];
        for l in 0..layers {
            let mut z = acts[l].dot(&self.weights[l]);
            z += &self.biases[l];
            if l + 1 < layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims(
                format!("{} input columns", self.input_dim()),
                x.ncols().to_string(),
            ));
        }
        Ok(self.activations(x).pop().expect("output layer"))
    }

    /// Mean squared error over all outputs and its parameter gradients.
    pub fn loss_and_gradients(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Gradients) {
        let acts = self.activations(x);
        let out = acts.last().expect("output layer");
        let scale = 1.0 / (y.len() as f64);
        let diff = out - &y;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
        let layers = self.weights.len();
        let mut delta = diff * (2.0 * scale);
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            gw[l] = acts[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                back.zip_mut_with(&acts[l], |b, &a| {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                });
                delta = back;
            }
        }
        (
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            line: 0,
            column: None,
            message: format!("{}: {msg}", path.display()),
        };
        let mut cursor = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let end = cursor + len;
            if end > bytes.len() {
                return Err(bad("truncated model file"));
            }
            let out = &bytes[cursor..end];
            cursor = end;
            Ok(out)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(bad("missing LTSN magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported model version {version}")));
        }
        let layers = u32_at(take(4)?) as usize;
        if layers == 0 || layers > 1024 {
            return Err(bad("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            sizes.push(u32_at(take(4)?) as usize);
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let mut read = |count: usize| -> Result<Vec<f64>> {
                let raw = take(count * 8)?;
                Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let w = read(fi * fo)?;
            let b = read(fo)?;
            weights.push(Array2::from_shape_vec((fi, fo), w).expect("sized buffer"));
            biases.push(Array1::from(b));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after model parameters"));
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            final_loss: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

fn column_stats(m: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = m.mean_axis(Axis(0)).expect("non-empty");
    let sd = m.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (mean, sd)
}

/// Train a regressor from `x_s` to `y_s` by mini-batch gradient descent on
/// the mean squared error. Inputs and targets are standardized during
/// training; the scaling is folded into the first and last layer.
pub fn fit_regressor(x_s: ArrayView2<'_, f64>, y_s: ArrayView2<'_, f64>, opts: &FitOptions) -> Result<RegressorModel> {
    if x_s.nrows() != y_s.nrows() || x_s.nrows() == 0 {
        return Err(Error::dims(
            format!("{} target rows", x_s.nrows()),
            y_s.nrows().to_string(),
        ));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    let sizes = architecture(x_s.ncols(), y_s.ncols())?;
    let (mx, sx) = column_stats(x_s);
    let (my, sy) = column_stats(y_s);
    let xn = (&x_s - &mx) / &sx;
    let yn = (&y_s - &my) / &sy;

    let mut model = RegressorModel::init(sizes, opts.seed);
    // Start from the mean prediction.
    let last = model.weights.len() - 1;
    model.weights[last].fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let n = x_s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let xb = xn.select(Axis(0), chunk);
            let yb = yn.select(Axis(0), chunk);
            let (loss, g) = model.loss_and_gradients(xb.view(), yb.view());
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    iteration: epoch,
                    message: "regressor training loss is not finite".into(),
                });
            }
            for l in 0..model.weights.len() {
                model.weights[l].scaled_add(-opts.learning_rate, &g.weights[l]);
                model.biases[l].scaled_add(-opts.learning_rate, &g.biases[l]);
            }
        }
    }

    // Fold x' = (x - mx) / sx into layer 0 and y = y' sy + my into the output.
    let w0 = &model.weights[0] / &sx.view().insert_axis(Axis(1));
    let shift = mx.dot(&w0);
    model.biases[0] = &model.biases[0] - &shift;
    model.weights[0] = w0;
    model.weights[last] = &model.weights[last] * &sy;
    model.biases[last] = &model.biases[last] * &sy + &my;

    let pred = model.forward(x_s)?;
    model.final_loss = (&pred - &y_s).iter().map(|v| v * v).sum::<f64>() / y_s.len() as f64;
    if !model.final_loss.is_finite() {
        return Err(Error::Divergence {
            iteration: opts.epochs,
            message: "regressor training loss is not finite".into(),
        });
    }
    Ok(model)
}

pub fn embed_out_of_sample(model: &RegressorModel, x_new: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    model.forward(x_new)
}

#[derive(Debug, Clone)]
pub struct LandmarkOutcome {
    pub embedding: Array2<f64>,
    pub landmarks: LandmarkSet,
    pub landmark_embedding: Array2<f64>,
    pub model: RegressorModel,
    pub trace: IterationTrace,
}

/// Embed `S` landmarks, fit the regressor on them and map every point.
pub fn run_landmark(x: &DataMatrix, cfg: &RunConfig, s: usize, fit: &FitOptions) -> Result<LandmarkOutcome> {
    if s < 2 || s > x.nrows() {
        return Err(Error::config(format!(
            "landmark count {s} must lie in [2, {}]",
            x.nrows()
        )));
    }
    let landmarks = select_landmarks(x, s, cfg.seed)?;
    let xs = x.select_rows(&landmarks.indices)?;
    let (emb, trace) = optimizer::run_full(&xs, cfg)?;
    let model = fit_regressor(xs.view(), emb.y.view(), fit)?;
    let embedding = embed_out_of_sample(&model, x.view())?;
    log::info!(
        "landmark regressor: {} layers, training MSE {:.4e}",
        model.weights.len(),
        model.final_loss
    );
    Ok(LandmarkOutcome {
        embedding,
        landmarks,
        landmark_embedding: emb.y,
        model,
        trace,
    })
}
