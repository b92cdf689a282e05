//! Trainable VLAD pooling.
//!
//! Each descriptor `x_i` of a feature map is softly assigned to `K`
//! clusters through `softmax_k(w_k . x_i + b_k)` and the layer emits the
//! assignment-weighted residual sums `y_k = sum_i a_ik (x_i - c_k)`.
//! Anchors `c_k`, assignment weights `w_k` and biases `b_k` are three
//! independent parameter sets.
//!
//! [`VladKind::Random`] leaves everything unnormalized. [`VladKind::Net`]
//! adds the NetVLAD stages: descriptors are L2-normalized first, each
//! `y_k` is L2-normalized (intra), and the flattened vector is
//! L2-normalized again (post).

use crate::error::{Error, Result};
use crate::params::impl_params;
use crate::real::Real;
use crate::tensor::{softmax_backward_row, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VladKind {
    Random,
    Net,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VladParams<T = f64> {
    /// `K x D`
    pub anchors: Tensor<T>,
    /// `K x D`
    pub assign_weight: Tensor<T>,
    /// `K`
    pub assign_bias: Tensor<T>,
    pub kind: VladKind,
}

impl_params!(VladParams {
    anchors: "vlad.anchors",
    assign_weight: "vlad.assign_weight",
    assign_bias: "vlad.assign_bias",
});

/// Added to squared norms before the square root in every L2
/// normalization, so all-zero vectors stay finite and differentiable.
pub const NORM_EPS: f64 = 1e-12;

impl<T: Real> VladParams<T> {
    pub fn zeros(clusters: usize, dim: usize, kind: VladKind) -> Self {
        VladParams {
            anchors: Tensor::zeros(&[clusters, dim]),
            assign_weight: Tensor::zeros(&[clusters, dim]),
            assign_bias: Tensor::zeros(&[clusters]),
            kind,
        }
    }

    /// Builds the parameters from anchors using the squared-distance
    /// relation `w_k = 2 alpha c_k`, `b_k = -alpha |c_k|^2`.
    pub fn from_anchors(anchors: Tensor<T>, alpha: f64, kind: VladKind) -> Result<Self> {
        let (k, d) = match anchors.shape() {
            &[k, d] if k >= 1 && d >= 1 => (k, d),
            s => return Err(Error::shape(format!("anchors must be K x D with K, D >= 1, got {s:?}"))),
        };
        let a = T::from_f64_lossy(alpha);
        let two = T::from_f64_lossy(2.0);
        let assign_weight = anchors.map(|c| two * a * c);
        let assign_bias = Tensor::from_fn(&[k], |i| {
            let norm: T = anchors.row(i).iter().map(|&c| c * c).sum();
            -a * norm
        });
        debug_assert_eq!(assign_weight.shape(), &[k, d]);
        Ok(VladParams { anchors, assign_weight, assign_bias, kind })
    }

    pub fn clusters(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.anchors.shape()[1]
    }

    pub fn output_len(&self) -> usize {
        self.clusters() * self.dim()
    }

    fn check_descriptors(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            &[n, d] if d == self.dim() => Ok(n),
            s => Err(Error::shape(format!(
                "descriptors {s:?} do not match VLAD dimension {}",
                self.dim()
            ))),
        }
    }
}

/// `v / sqrt(|v|^2 + eps)`, returning the divisor.
pub(crate) fn l2_normalize<T: Real>(v: &mut [T]) -> T {
    let sq: T = v.iter().map(|&x| x * x).sum();
    let n = (sq + T::from_f64_lossy(NORM_EPS)).sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
    n
}

/// Backward of [`l2_normalize`] in place: `dv <- (dv - v <v, dv>) / n`,
/// where `v` is the normalized output.
fn l2_normalize_backward<T: Real>(v: &[T], n: T, dv: &mut [T]) {
    let inner: T = v.iter().zip(dv.iter()).map(|(&a, &b)| a * b).sum();
    for (g, &vi) in dv.iter_mut().zip(v) {
        *g = (*g - vi * inner) / n;
    }
}

fn prepare_descriptors<T: Real>(x: &Tensor<T>, kind: VladKind) -> (Tensor<T>, Vec<T>) {
    let mut xs = x.clone();
    let mut norms = Vec::new();
    if kind == VladKind::Net {
        let d = x.shape()[1];
        for row in xs.data_mut().chunks_mut(d) {
            norms.push(l2_normalize(row));
        }
    }
    (xs, norms)
}

fn assign_prepared<T: Real>(x: &Tensor<T>, p: &VladParams<T>) -> Tensor<T> {
    let (n, d, k) = (x.shape()[0], p.dim(), p.clusters());
    let mut scores = Tensor::zeros(&[n, k]);
    for row in scores.data_mut().chunks_mut(k) {
        row.copy_from_slice(p.assign_bias.data());
    }
    T::gemm(n, d, k, T::one(), x.data(), false, p.assign_weight.data(), true, T::one(), scores.data_mut());
    for row in scores.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    scores
}

fn residual_sums<T: Real>(x: &Tensor<T>, a: &Tensor<T>, p: &VladParams<T>) -> Tensor<T> {
    let (n, d, k) = (x.shape()[0], p.dim(), p.clusters());
    // y = A^T X - diag(colsum A) C
    let mut y = Tensor::zeros(&[k, d]);
    T::gemm(k, n, d, T::one(), a.data(), true, x.data(), false, T::zero(), y.data_mut());
    for c in 0..k {
        let mass: T = (0..n).map(|i| a.data()[i * k + c]).sum();
        for (yv, &cv) in y.row_mut(c).iter_mut().zip(p.anchors.row(c)) {
            *yv -= mass * cv;
        }
    }
    y
}

/// Soft assignment of the `N x D` descriptors to the `K` clusters.
pub fn soft_assign<T: Real>(x: &Tensor<T>, p: &VladParams<T>) -> Result<Tensor<T>> {
    p.check_descriptors(x)?;
    let (xs, _) = prepare_descriptors(x, p.kind);
    Ok(assign_prepared(&xs, p))
}

/// Aggregates `N x D` descriptors with a given `N x K` assignment into the
/// `K x D` VLAD matrix, applying the normalization stages of `p.kind`.
pub fn aggregate<T: Real>(x: &Tensor<T>, assign: &Tensor<T>, p: &VladParams<T>) -> Result<Tensor<T>> {
    let n = p.check_descriptors(x)?;
    assign.expect_shape(&[n, p.clusters()], "VLAD assignment")?;
    let (xs, _) = prepare_descriptors(x, p.kind);
    let mut y = residual_sums(&xs, assign, p);
    if p.kind == VladKind::Net {
        let d = p.dim();
        for row in y.data_mut().chunks_mut(d) {
            l2_normalize(row);
        }
        l2_normalize(y.data_mut());
    }
    Ok(y)
}

/// Per-sample state needed by [`backward`].
#[derive(Clone, Debug)]
pub struct VladCache<T> {
    descriptors: Vec<Tensor<T>>,
    x_norms: Vec<Vec<T>>,
    assign: Vec<Tensor<T>>,
    intra: Vec<(Tensor<T>, Vec<T>)>,
    post: Vec<(Tensor<T>, T)>,
    map_shape: Vec<usize>,
}

/// Batch forward over feature maps `B x H x W x D` to `B x (K*D)`.
pub fn forward<T: Real>(p: &VladParams<T>, maps: &Tensor<T>) -> Result<(Tensor<T>, VladCache<T>)> {
    let (b, n, d) = match maps.shape() {
        &[b, h, w, d] if d == p.dim() => (b, h * w, d),
        s => return Err(Error::shape(format!(
            "VLAD input must be B x H x W x {}, got {s:?}",
            p.dim()
        ))),
    };
    let k = p.clusters();
    let mut out = Tensor::zeros(&[b, k * d]);
    let mut cache = VladCache {
        descriptors: Vec::with_capacity(b),
        x_norms: Vec::with_capacity(b),
        assign: Vec::with_capacity(b),
        intra: Vec::new(),
        post: Vec::new(),
        map_shape: maps.shape().to_vec(),
    };
    for s in 0..b {
        let x = Tensor::new(&[n, d], maps.row(s).to_vec())?;
        let (xs, norms) = prepare_descriptors(&x, p.kind);
        let a = assign_prepared(&xs, p);
        let mut y = residual_sums(&xs, &a, p);
        if p.kind == VladKind::Net {
            let mut intra_norms = Vec::with_capacity(k);
            for row in y.data_mut().chunks_mut(d) {
                intra_norms.push(l2_normalize(row));
            }
            cache.intra.push((y.clone(), intra_norms));
            let post_norm = l2_normalize(y.data_mut());
            cache.post.push((y.clone(), post_norm));
        }
        out.row_mut(s).copy_from_slice(y.data());
        cache.descriptors.push(xs);
        cache.x_norms.push(norms);
        cache.assign.push(a);
    }
    Ok((out, cache))
}

/// Reverse pass: returns the feature-map gradient and parameter gradients.
pub fn backward<T: Real>(
    p: &VladParams<T>,
    cache: &VladCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, VladParams<T>)> {
    let (k, d) = (p.clusters(), p.dim());
    let b = cache.descriptors.len();
    d_out.expect_shape(&[b, k * d], "VLAD cotangent")?;
    let mut grads = VladParams::zeros(k, d, p.kind);
    let mut d_maps = Tensor::zeros(&cache.map_shape);

    for s in 0..b {
        let x = &cache.descriptors[s];
        let a = &cache.assign[s];
        let n = x.shape()[0];
        let mut dy = Tensor::new(&[k, d], d_out.row(s).to_vec())?;

        if p.kind == VladKind::Net {
            let (post_out, post_norm) = &cache.post[s];
            l2_normalize_backward(post_out.data(), *post_norm, dy.data_mut());
            let (intra_out, intra_norms) = &cache.intra[s];
            for c in 0..k {
                let range = c * d..(c + 1) * d;
                l2_normalize_backward(&intra_out.data()[range.clone()], intra_norms[c], &mut dy.data_mut()[range]);
            }
        }

        // Residual path: dX = A dY, dC_k = -(sum_i a_ik) dy_k.
        let mut dx = Tensor::zeros(&[n, d]);
        T::gemm(n, k, d, T::one(), a.data(), false, dy.data(), false, T::zero(), dx.data_mut());
        for c in 0..k {
            let mass: T = (0..n).map(|i| a.data()[i * k + c]).sum();
            for (g, &v) in grads.anchors.row_mut(c).iter_mut().zip(dy.row(c)) {
                *g -= mass * v;
            }
        }

        // Assignment path: dA_ik = dy_k . (x_i - c_k).
        let mut da = Tensor::zeros(&[n, k]);
        T::gemm(n, d, k, T::one(), x.data(), false, dy.data(), true, T::zero(), da.data_mut());
        let anchor_dots: Vec<T> = (0..k)
            .map(|c| dy.row(c).iter().zip(p.anchors.row(c)).map(|(&u, &v)| u * v).sum())
            .collect();
        let mut ds = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for (v, &cd) in da.row_mut(i).iter_mut().zip(&anchor_dots) {
                *v -= cd;
            }
            softmax_backward_row(a.row(i), da.row(i), ds.row_mut(i));
        }
        T::gemm(k, n, d, T::one(), ds.data(), true, x.data(), false, T::one(), grads.assign_weight.data_mut());
        for i in 0..n {
            for (g, &v) in grads.assign_bias.data_mut().iter_mut().zip(ds.row(i)) {
                *g += v;
            }
        }
        T::gemm(n, k, d, T::one(), ds.data(), false, p.assign_weight.data(), false, T::one(), dx.data_mut());

        if p.kind == VladKind::Net {
            let norms = &cache.x_norms[s];
            for i in 0..n {
                l2_normalize_backward(x.row(i), norms[i], dx.row_mut(i));
            }
        }
        d_maps.row_mut(s).copy_from_slice(dx.data());
    }
    Ok((d_maps, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn params(k: usize, d: usize, kind: VladKind, rng: &mut Rng) -> VladParams<f64> {
        VladParams {
            anchors: random(&[k, d], rng),
            assign_weight: random(&[k, d], rng),
            assign_bias: random(&[k], rng),
            kind,
        }
    }

    #[test]
    fn single_cluster_assignment_is_one() {
        let mut rng = Rng::seed_from_u64(1);
        let p = params(1, 3, VladKind::Random, &mut rng);
        let x = random(&[5, 3], &mut rng);
        let a = soft_assign(&x, &p).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // y_1 = sum_i (x_i - c_1)
        let y = aggregate(&x, &a, &p).unwrap();
        for j in 0..3 {
            let want: f64 = (0..5).map(|i| x.data()[i * 3 + j] - p.anchors.data()[j]).sum();
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_weights_give_uniform_rows() {
        let mut rng = Rng::seed_from_u64(2);
        let mut p = params(4, 3, VladKind::Random, &mut rng);
        p.assign_weight = Tensor::full(&[4, 3], 0.7);
        p.assign_bias = Tensor::full(&[4], -0.2);
        let a = soft_assign(&random(&[6, 3], &mut rng), &p).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn analytic_two_cluster_case() {
        let p = VladParams {
            anchors: Tensor::zeros(&[2, 1]),
            assign_weight: Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            assign_bias: Tensor::zeros(&[2]),
            kind: VladKind::Random,
        };
        let a = soft_assign(&Tensor::new(&[1, 1], vec![2.0]).unwrap(), &p).unwrap();
        let e2 = 2f64.exp();
        assert!((a.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((a.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_for_descriptors_on_anchor() {
        let mut rng = Rng::seed_from_u64(3);
        let p = params(3, 2, VladKind::Random, &mut rng);
        let q = 1;
        let x = Tensor::from_fn(&[4, 2], |i| p.anchors.data()[q * 2 + i % 2]);
        let mut onehot = Tensor::zeros(&[4, 3]);
        for i in 0..4 {
            onehot.data_mut()[i * 3 + q] = 1.0;
        }
        let y = aggregate(&x, &onehot, &p).unwrap();
        assert!(y.row(q).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn aggregate_matches_double_loop() {
        let mut rng = Rng::seed_from_u64(4);
        let p = params(2, 2, VladKind::Random, &mut rng);
        let x = random(&[3, 2], &mut rng);
        let a = soft_assign(&x, &p).unwrap();
        let y = aggregate(&x, &a, &p).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                let mut want = 0.0;
                for i in 0..3 {
                    want += a.data()[i * 2 + c] * (x.data()[i * 2 + j] - p.anchors.data()[c * 2 + j]);
                }
                assert!((y.data()[c * 2 + j] - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn random_vlad_is_unnormalized_and_netvlad_is_unit() {
        let mut rng = Rng::seed_from_u64(5);
        let mut p = params(3, 4, VladKind::Random, &mut rng);
        p.anchors = Tensor::zeros(&[3, 4]);
        let maps = random(&[2, 2, 3, 4], &mut rng);
        let (y1, _) = forward(&p, &maps).unwrap();
        // Scaling x also scales the assignment logits, so hold the
        // assignment fixed and compare residual sums.
        let x = Tensor::new(&[6, 4], maps.row(0).to_vec()).unwrap();
        let a = soft_assign(&x, &p).unwrap();
        let mut x2 = x.clone();
        x2.scale(2.0);
        let ya = aggregate(&x, &a, &p).unwrap();
        let yb = aggregate(&x2, &a, &p).unwrap();
        for (u, v) in ya.data().iter().zip(yb.data()) {
            assert_eq!(2.0 * u, *v);
        }
        assert_eq!(y1.row(0), ya.data());

        p.kind = VladKind::Net;
        let (y, _) = forward(&p, &maps).unwrap();
        for s in 0..2 {
            let norm: f64 = y.row(s).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = Rng::seed_from_u64(6);
        let p = params(2, 3, VladKind::Random, &mut rng);
        assert!(soft_assign(&Tensor::zeros(&[4, 2]), &p).is_err());
        assert!(forward(&p, &Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn anchor_gradient_with_frozen_assignment() {
        // Anchors only enter through the residual: dC_k = -(sum_i a_ik) dy_k.
        let mut rng = Rng::seed_from_u64(7);
        let mut p = params(2, 3, VladKind::Random, &mut rng);
        p.assign_weight = Tensor::zeros(&[2, 3]);
        p.assign_bias = Tensor::zeros(&[2]);
        let maps = random(&[1, 2, 2, 3], &mut rng);
        let (_, cache) = forward(&p, &maps).unwrap();
        let dy = random(&[1, 6], &mut rng);
        let (_, g) = backward(&p, &cache, &dy).unwrap();
        // Uniform assignment: mass per cluster = N / K = 2.
        for (gv, dv) in g.anchors.data().iter().zip(dy.data()) {
            assert!((gv + 2.0 * dv).abs() < 1e-12);
        }
    }
}
