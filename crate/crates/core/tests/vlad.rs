//! VLAD pooling and k-means against hard-assignment and restart oracles.

use rvssdh::rvssdh::kmeans::{kmeans, within_cluster_sse};
use rvssdh::rvssdh::vlad::{self, VladKind, VladParams};
use rvssdh::rvssdh::{Model, ModelConfig, Variant};
use rvssdh::{Rng, Tensor};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Points scattered tightly around `centers`, cycling through them.
fn blobs(centers: &[Vec<f64>], n: usize, spread: f64, rng: &mut Rng) -> Tensor<f64> {
    let d = centers[0].len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for &c in &centers[i % centers.len()] {
            data.push(c + spread * rng.normal());
        }
    }
    Tensor::new(&[n, d], data).unwrap()
}

/// Hard-assignment VLAD: every descriptor adds its residual to the nearest
/// anchor's block only.
fn hard_vlad(x: &Tensor<f64>, anchors: &Tensor<f64>) -> Vec<f64> {
    let (k, d) = (anchors.shape()[0], anchors.shape()[1]);
    let mut y = vec![0.0; k * d];
    for i in 0..x.shape()[0] {
        let xi = x.row(i);
        let q = (0..k).min_by(|&a, &b| sq_dist(xi, anchors.row(a)).total_cmp(&sq_dist(xi, anchors.row(b)))).unwrap();
        for j in 0..d {
            y[q * d + j] += xi[j] - anchors.row(q)[j];
        }
    }
    y
}

#[test]
fn sharpened_random_vlad_matches_hard_assignment() {
    let mut rng = Rng::seed_from_u64(21);
    let mut checked = 0;
    for trial in 0..20 {
        let (k, d, n) = (2 + trial % 5, 3 + trial % 4, 30 + trial);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 3.0 * rng.normal()).collect()).collect();
        let anchors = Tensor::new(&[k, d], centers.concat()).unwrap();
        if (0..k).any(|a| (0..a).any(|b| sq_dist(anchors.row(a), anchors.row(b)) < 4.0)) {
            continue;
        }
        let x = blobs(&centers, n, 0.1, &mut rng);
        // Sharpening by 50 scales w_k and b_k jointly.
        let p = VladParams::from_anchors(anchors.clone(), 50.0, VladKind::Random).unwrap();
        let a = vlad::soft_assign(&x, &p).unwrap();
        let y = vlad::aggregate(&x, &a, &p).unwrap();
        let want = hard_vlad(&x, &anchors);
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = y.data().iter().zip(&want).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        assert!(err <= 1e-6 * scale, "trial {trial}: {err} vs {scale}");
        // The full layer on an h x w map equals the same pooling.
        let maps = x.clone().reshape(&[1, n, 1, d]).unwrap();
        let (y2, _) = vlad::forward(&p, &maps).unwrap();
        assert_eq!(y2.data(), y.data());
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} separated instances");
}

#[test]
fn unsharpened_assignment_is_soft() {
    let mut rng = Rng::seed_from_u64(22);
    let centers = vec![vec![0.0, 0.0], vec![0.5, 0.0]];
    let x = blobs(&centers, 20, 0.3, &mut rng);
    let p = VladParams::from_anchors(Tensor::new(&[2, 2], centers.concat()).unwrap(), 1.0, VladKind::Random).unwrap();
    let a = vlad::soft_assign(&x, &p).unwrap();
    assert!(a.data().iter().all(|&v| v > 0.2 && v < 0.8));
}

/// Lloyd's algorithm from `k` distinct random points, run to convergence.
fn lloyd_from_random_start(x: &Tensor<f64>, k: usize, rng: &mut Rng) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut c: Vec<Vec<f64>> = idx[..k].iter().map(|&i| x.row(i).to_vec()).collect();
    for _ in 0..200 {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let q = (0..k).min_by(|&a, &b| sq_dist(x.row(i), &c[a]).total_cmp(&sq_dist(x.row(i), &c[b]))).unwrap();
            counts[q] += 1;
            sums[q].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let next: Vec<Vec<f64>> = (0..k)
            .map(|q| if counts[q] == 0 { c[q].clone() } else { sums[q].iter().map(|s| s / counts[q] as f64).collect() })
            .collect();
        if next == c {
            break;
        }
        c = next;
    }
    (0..n).map(|i| c.iter().map(|ci| sq_dist(x.row(i), ci)).fold(f64::INFINITY, f64::min)).sum()
}

#[test]
fn kmeans_matches_best_of_many_restarts_on_blobs() {
    let mut rng = Rng::seed_from_u64(23);
    for trial in 0..5 {
        let centers = vec![vec![0.0, 0.0, 0.0], vec![8.0, 1.0, -2.0], vec![-3.0, 9.0, 4.0]];
        let x = blobs(&centers, 200, 1.0, &mut rng);
        let best = (0..50).map(|_| lloyd_from_random_start(&x, 3, &mut rng)).fold(f64::INFINITY, f64::min);
        let c = kmeans(&x, 3, &mut Rng::seed_from_u64(trial)).unwrap();
        let sse = within_cluster_sse(&x, &c);
        assert!(sse <= 1.01 * best, "trial {trial}: {sse} vs {best}");
    }
}

#[test]
fn netvlad_init_takes_anchors_from_kmeans() {
    let mut rng = Rng::seed_from_u64(24);
    let centers: Vec<Vec<f64>> = (0..4).map(|i| vec![5.0 * i as f64, -(i as f64), 2.0]).collect();
    let desc = blobs(&centers, 80, 0.2, &mut rng);
    // No backbone: the model pools its 4 x 4 x 3 input directly.
    let mut cfg = ModelConfig::new(Variant::NetVlad, [4, 4, 3], 2);
    cfg.backbone = None;
    cfg.clusters = 4;
    cfg.alpha0 = 1.5;
    let m = Model::<f64>::init(cfg, &mut Rng::seed_from_u64(8), Some(&desc)).unwrap();
    let want = kmeans(&desc, 4, &mut Rng::seed_from_u64(8).fork()).unwrap();
    let p = m.params.vlad.as_ref().unwrap();
    assert_eq!(p.anchors, want);
    assert_eq!(p.kind, VladKind::Net);
    for k in 0..4 {
        let c = want.row(k);
        for j in 0..3 {
            assert_eq!(p.assign_weight.row(k)[j], 2.0 * 1.5 * c[j]);
        }
        assert!((p.assign_bias.data()[k] + 1.5 * c.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);
    }
    let mut cfg2 = m.config.clone();
    cfg2.variant = Variant::NetVlad;
    assert!(Model::<f64>::init(cfg2, &mut Rng::seed_from_u64(8), None).is_err());
}
