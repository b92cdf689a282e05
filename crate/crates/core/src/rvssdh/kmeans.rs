//! Lloyd's k-means with k-means++ seeding, used to place NetVLAD anchors.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the rows of an `n x D` tensor into `k` centers.
pub fn kmeans<T: Real>(points: &Tensor<T>, k: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let (n, d) = match points.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape(format!("k-means input must be n x D, got {s:?}"))),
    };
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means with k = {k} needs at least {k} points, got {n}")));
    }
    let pts: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().map(|v| v.as_f64()).collect()).collect();

    // k-means++ seeding
    let mut centers = vec![pts[rng.below(n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
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
            // All points coincide with existing centers.
            rng.below(n)
        };
        centers.push(pts[pick].clone());
        for (dist, p) in d2.iter_mut().zip(&pts) {
            *dist = dist.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    for _ in 0..MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in &pts {
            let (c, _) = nearest(p, &centers);
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if shift < SHIFT_TOL {
            break;
        }
    }

    Ok(Tensor::from_fn(&[k, d], |i| T::from_f64_lossy(centers[i / d][i % d])))
}

/// Within-cluster sum of squared distances of `points` to their nearest
/// center.
pub fn within_cluster_sse<T: Real>(points: &Tensor<T>, centers: &Tensor<T>) -> f64 {
    let k = centers.shape()[0];
    let cs: Vec<Vec<f64>> = (0..k).map(|c| centers.row(c).iter().map(|v| v.as_f64()).collect()).collect();
    (0..points.shape()[0])
        .map(|i| {
            let p: Vec<f64> = points.row(i).iter().map(|v| v.as_f64()).collect();
            nearest(&p, &cs).1
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = Tensor::<f64>::new(&[3, 2], vec![0.0, 0.0, 2.0, 4.0, 4.0, 2.0]).unwrap();
        let c = kmeans(&pts, 1, &mut Rng::seed_from_u64(0)).unwrap();
        assert!((c.data()[0] - 2.0).abs() < 1e-12);
        assert!((c.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_two_clusters() {
        let pts = Tensor::<f64>::new(&[2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        let c = kmeans(&pts, 2, &mut Rng::seed_from_u64(9)).unwrap();
        let mut rows = vec![c.row(0).to_vec(), c.row(1).to_vec()];
        rows.sort_by(|a, b| a[1].total_cmp(&b[1]));
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 2.0]]);
    }

    #[test]
    fn too_few_points() {
        let pts = Tensor::<f64>::zeros(&[2, 3]);
        assert!(kmeans(&pts, 3, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut r = Rng::seed_from_u64(4);
        let pts = Tensor::from_fn(&[50, 3], |_| r.normal());
        let a = kmeans(&pts, 4, &mut Rng::seed_from_u64(1)).unwrap();
        let b = kmeans(&pts, 4, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
