//! Embedding quality scores: leave-one-out k-NN accuracy, NMI of a k-means
//! clustering against labels, silhouette coefficient and Davies-Bouldin
//! index.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::affinity::sq_dist;
use crate::error::{Error, Result};
use crate::scale::{kmeans_restarts, KMEANS_MAX_ITER};

/// Restarts of the k-means run inside [`evaluate`].
pub const EVAL_RESTARTS: usize = 10;
/// Floor for centroid distances in the Davies-Bouldin ratio.
pub const CENTROID_FLOOR: f64 = 1e-12;

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dims(format!("{n} labels"), labels.len().to_string()));
    }
    Ok(())
}

fn dist(y: ArrayView2<'_, f64>, i: usize, j: usize) -> f64 {
    sq_dist(y.row(i), y.row(j)).sqrt()
}

/// Leave-one-out majority vote among the `k` nearest embedded neighbours.
/// Vote ties go to the label with the smallest summed distance.
pub fn knn_accuracy(y: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<f64> {
    let n = y.nrows();
    check_labels(n, labels)?;
    if k == 0 || k >= n {
        return Err(Error::config(format!("k-NN needs 1 <= k < N = {n}, got {k}")));
    }
    let correct: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(y.row(i), y.row(j)), j))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(d2, j) in &d[..k] {
                let e = votes.entry(labels[j]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += d2.sqrt();
            }
            let winner = votes
                .iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.total_cmp(&a.1 .1)).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .expect("k >= 1");
            usize::from(winner == labels[i])
        })
        .sum();
    Ok(correct as f64 / n as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("{} labels", a.len()), b.len().to_string()));
    }
    if a.is_empty() {
        return Err(Error::config("NMI of empty labelings"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    if ca.len() < 2 || cb.len() < 2 {
        log::warn!("NMI of a single-class labeling is reported as 0");
        return Ok(0.0);
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (c as f64 * n / (ca[&x] as f64 * cb[&y] as f64)).ln();
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// Mean of `(b - a) / max(a, b)`; singleton clusters and `a = b = 0`
/// score 0.
pub fn silhouette(y: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let n = y.nrows();
    check_labels(n, labels)?;
    let g = groups(labels);
    if g.len() < 2 {
        return Err(Error::config("silhouette needs at least 2 clusters"));
    }
    let members: Vec<(usize, &Vec<usize>)> = g.iter().map(|(&l, m)| (l, m)).collect();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            let mut a = 0.0;
            let mut b = f64::INFINITY;
            for &(l, m) in &members {
                let total: f64 = m.iter().filter(|&&j| j != i).map(|&j| dist(y, i, j)).sum();
                if l == own {
                    if m.len() == 1 {
                        return 0.0;
                    }
                    a = total / (m.len() - 1) as f64;
                } else {
                    b = b.min(total / m.len() as f64);
                }
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Mean over clusters of the worst `(s_i + s_j) / d_ij` ratio.
pub fn davies_bouldin(y: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let n = y.nrows();
    check_labels(n, labels)?;
    let g = groups(labels);
    if g.len() < 2 {
        return Err(Error::config("Davies-Bouldin index needs at least 2 clusters"));
    }
    let k = g.len();
    let mut centroids = Array2::zeros((k, y.ncols()));
    let mut spread = vec![0.0; k];
    for (c, m) in g.values().enumerate() {
        let centroid = y.select(Axis(0), m).mean_axis(Axis(0)).expect("non-empty cluster");
        spread[c] = m
            .iter()
            .map(|&i| sq_dist(y.row(i), centroid.view()).sqrt())
            .sum::<f64>()
            / m.len() as f64;
        centroids.row_mut(c).assign(&centroid);
    }
    let mut total = 0.0;
    let mut floored = false;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let mut d = sq_dist(centroids.row(i), centroids.row(j)).sqrt();
            if d < CENTROID_FLOOR {
                d = CENTROID_FLOOR;
                floored = true;
            }
            worst = worst.max((spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    if floored {
        log::warn!("coincident cluster centroids: distance floored at {CENTROID_FLOOR}");
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    /// Accuracy per neighbour count.
    pub knn: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub kmeans_k: usize,
}

/// k-NN accuracies on `y`, then NMI, silhouette and Davies-Bouldin of a
/// best-of-10 k-means clustering of `y`.
pub fn evaluate(
    y: ArrayView2<'_, f64>,
    labels: &[usize],
    knn_ks: &[usize],
    kmeans_k: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_labels(y.nrows(), labels)?;
    if kmeans_k < 2 {
        return Err(Error::config(format!(
            "k-means inside evaluation needs k >= 2, got {kmeans_k}"
        )));
    }
    let mut knn = BTreeMap::new();
    for &k in knn_ks {
        knn.insert(k, knn_accuracy(y, labels, k)?);
    }
    let km = kmeans_restarts(y, kmeans_k, seed, KMEANS_MAX_ITER, EVAL_RESTARTS)?;
    Ok(MetricReport {
        knn,
        nmi: nmi(labels, &km.assignments)?,
        silhouette: silhouette(y, &km.assignments)?,
        davies_bouldin: davies_bouldin(y, &km.assignments)?,
        kmeans_k,
    })
}

/// Number of distinct labels.
pub fn class_count(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_clusters(per: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut y = Array2::zeros((2 * per, 2));
        let mut labels = vec![0; 2 * per];
        for i in 0..2 * per {
            let off = if i < per { 0.0 } else { 100.0 };
            y[[i, 0]] = off + rng.gen::<f64>() * 0.1;
            y[[i, 1]] = rng.gen::<f64>() * 0.1;
            labels[i] = usize::from(i >= per);
        }
        (y, labels)
    }

    #[test]
    fn separated_clusters_score_perfectly() {
        let (y, labels) = two_clusters(10);
        assert_eq!(knn_accuracy(y.view(), &labels, 5).unwrap(), 1.0);
        assert!(silhouette(y.view(), &labels).unwrap() > 0.9);
        assert!(davies_bouldin(y.view(), &labels).unwrap() < 0.1);
        let r = evaluate(y.view(), &labels, &[5], 2, 0).unwrap();
        assert_eq!(r.nmi, 1.0);
        assert_eq!(r.knn[&5], 1.0);
        assert!(matches!(evaluate(y.view(), &labels, &[5], 1, 0), Err(Error::Config(_))));
        assert!(matches!(knn_accuracy(y.view(), &labels, 20), Err(Error::Config(_))));
    }

    #[test]
    fn knn_null_is_near_half() {
        let mut acc = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Array2::from_shape_fn((200, 2), |_| rng.gen::<f64>());
            let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
            acc += knn_accuracy(y.view(), &labels, 10).unwrap();
        }
        assert!((acc / 20.0 - 0.5).abs() < 0.1);
    }

    #[test]
    fn knn_tie_prefers_closer_label() {
        let y = ndarray::array![[0.0], [1.0], [-1.5], [10.0]];
        let labels = [0, 1, 2, 1];
        // Every point sees one vote for each of two labels; only point 3
        // gets its own label back, as the closer of the two.
        let acc = knn_accuracy(y.view(), &labels, 2).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn nmi_cases() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = [5, 5, 3, 3, 9, 9];
        assert!((nmi(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[1, 1, 1], &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn identical_points_silhouette_zero() {
        let y = Array2::zeros((6, 2));
        assert_eq!(silhouette(y.view(), &[0, 0, 0, 1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn singleton_scores_zero() {
        let y = ndarray::array![[0.0], [0.1], [5.0]];
        let s = silhouette(y.view(), &[0, 0, 1]).unwrap();
        let a = 0.1;
        let b0 = 5.0;
        let b1 = 4.9;
        let expect = ((b0 - a) / b0 + (b1 - a) / b1 + 0.0) / 3.0;
        assert!((s - expect).abs() < 1e-12);
    }
}
