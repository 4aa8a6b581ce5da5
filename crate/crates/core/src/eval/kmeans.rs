use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until no centroid moves
/// more than [`KMEANS_TOL`] or [`KMEANS_MAX_ITER`] rounds pass. An empty
/// cluster is re-seeded at the point farthest from its current centroid.
pub fn kmeans(features: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means with k = {k} on {n} points")));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| features.row(i)).collect();
    let mut rng = stream_rng(seed, streams::KMEANS);

    let mut centroids: Vec<Vec<f64>> = vec![rows[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(rows[pick].to_vec());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.last().expect("pushed")));
        }
    }

    let dim = features.cols();
    let mut labels = vec![0; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sse = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(r, &centroids);
            labels[i] = c;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(*r) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let next: Vec<f64> = if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(rows[a], &centroids[c]).total_cmp(&sq_dist(rows[b], &centroids[c]))
                    })
                    .expect("n >= k > 0");
                rows[far].to_vec()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            moved = moved.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    for (i, r) in rows.iter().enumerate() {
        labels[i] = nearest(r, &centroids).0;
    }
    Ok(KMeans {
        labels,
        centroids,
        sse_history,
        iterations,
    })
}
