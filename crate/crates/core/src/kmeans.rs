//! Lloyd's k-means with explicit initial centres.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Tensor,
    pub iterations: usize,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &Tensor, centers: &Tensor) -> (Vec<usize>, Vec<f64>) {
    points
        .iter_rows()
        .map(|p| {
            let neg: Vec<f64> = centers.iter_rows().map(|c| -sq_dist(p, c)).collect();
            let k = argmax(&neg);
            (k, -neg[k])
        })
        .unzip()
}

/// Runs k-means from `init` (one centre per row) until assignments stop
/// changing or `max_iter` rounds have run.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// centre.
pub fn kmeans(points: &Tensor, init: &Tensor, max_iter: usize) -> Result<KMeansResult> {
    let (n, d) = points.dims2()?;
    let (k, d2) = init.dims2()?;
    if d != d2 {
        return Err(Error::dim("kmeans", format!("points have {d} columns, centres {d2}")));
    }
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans needs 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut centers = init.clone();
    let (mut assignments, mut dists) = assign(points, &centers);
    let mut reseeded = 0;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = argmax(&dists);
                log::warn!("kmeans: cluster {c} is empty, re-seeding from point {far}");
                centers.row_mut(c).copy_from_slice(points.row(far));
                dists[far] = 0.0;
                reseeded += 1;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let (next, next_d) = assign(points, &centers);
        let stable = next == assignments;
        assignments = next;
        dists = next_d;
        if stable {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centers,
        iterations,
        reseeded,
    })
}
