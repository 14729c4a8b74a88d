//! k-means++ seeding and a fixed number of Lloyd iterations, used to
//! initialize EM.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::parallel::{self, Parallelism};

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
pub(crate) fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub(crate) fn kmeans_plus_plus(samples: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = samples.rows();
    let mut centers = Matrix::zeros(k, samples.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(samples.row(first));
    let mut d2: Vec<f64> = samples.iter_rows().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(samples.row(pick));
        for (i, x) in samples.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.row(c)));
        }
    }
    centers
}

pub(crate) const CHUNK_ROWS: usize = 1024;

/// Lloyd iterations; empty clusters keep their previous center. Returns
/// the final centers and assignment.
pub(crate) fn lloyd(samples: &Matrix, mut centers: Matrix, iters: usize, policy: Parallelism) -> (Matrix, Vec<usize>) {
    let dim = samples.cols();
    let k = centers.rows();
    let mut assign = vec![0; samples.rows()];
    for it in 0..=iters {
        let parts = parallel::map_chunks(policy, samples.as_slice(), CHUNK_ROWS * dim, |_, chunk| {
            chunk.chunks_exact(dim).map(|x| nearest(x, &centers).0).collect::<Vec<_>>()
        });
        assign = parts.concat();
        if it == iters {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (x, &a) in samples.iter_rows().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    (centers, assign)
}
