//! Fully connected stages of the hash component: the two-layer transform,
//! the sigmoid hash layer, and the bias-free prediction layer.
//!
//! All layers act on row batches `B x in`; weights are stored `in x out`
//! so a layer computes `x W + b`.

use crate::error::{Error, Result};
use crate::params::{he_normal, impl_params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{relu_backward_in_place, relu_in_place, sigmoid, softmax_backward_row, softmax_in_place, Tensor};

fn batch_dims<T: Real>(x: &Tensor<T>, width: usize, what: &str) -> Result<usize> {
    match x.shape() {
        &[b, w] if w == width => Ok(b),
        s => Err(Error::shape(format!("{what} expects B x {width} input, got {s:?}"))),
    }
}

/// `x W + b` for `x: B x in`, `W: in x out`.
pub(crate) fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (rows, inp, out) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut y = Tensor::zeros(&[rows, out]);
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(rows, inp, out, T::one(), x.data(), false, w.data(), false, T::one(), y.data_mut());
    y
}

/// Gradients of [`affine`]: `(dx, dW, db)`.
fn affine_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, inp, out) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(inp, rows, out, T::one(), x.data(), true, dy.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[out]);
    for row in dy.data().chunks(out) {
        for (g, &v) in db.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(rows, out, inp, T::one(), dy.data(), false, w.data(), true, T::zero(), dx.data_mut());
    (dx, dw, db)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams<T = f64> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl_params!(TransformParams {
    fc1_weight: "transform.fc1.weight",
    fc1_bias: "transform.fc1.bias",
    fc2_weight: "transform.fc2.weight",
    fc2_bias: "transform.fc2.bias",
});

impl<T: Real> TransformParams<T> {
    pub fn zeros(input: usize, d1: usize, d2: usize) -> Self {
        TransformParams {
            fc1_weight: Tensor::zeros(&[input, d1]),
            fc1_bias: Tensor::zeros(&[d1]),
            fc2_weight: Tensor::zeros(&[d1, d2]),
            fc2_bias: Tensor::zeros(&[d2]),
        }
    }

    pub fn init(input: usize, d1: usize, d2: usize, rng: &mut Rng) -> Self {
        TransformParams {
            fc1_weight: he_normal(&[input, d1], input, rng),
            fc1_bias: Tensor::zeros(&[d1]),
            fc2_weight: he_normal(&[d1, d2], d1, rng),
            fc2_bias: Tensor::zeros(&[d2]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.fc1_weight.shape()[0]
    }

    pub fn output_len(&self) -> usize {
        self.fc2_weight.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct TransformCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    output: Tensor<T>,
}

/// `ReLU(fc2(ReLU(fc1(x))))`.
pub fn transform_forward<T: Real>(p: &TransformParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, TransformCache<T>)> {
    batch_dims(x, p.input_len(), "transform layer")?;
    let mut hidden = affine(x, &p.fc1_weight, Some(&p.fc1_bias));
    relu_in_place(&mut hidden);
    let mut output = affine(&hidden, &p.fc2_weight, Some(&p.fc2_bias));
    relu_in_place(&mut output);
    let cache = TransformCache { input: x.clone(), hidden, output: output.clone() };
    Ok((output, cache))
}

pub fn transform_backward<T: Real>(
    p: &TransformParams<T>,
    cache: &TransformCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, TransformParams<T>)> {
    d_out.expect_shape(cache.output.shape(), "transform cotangent")?;
    let mut d2 = d_out.clone();
    relu_backward_in_place(&cache.output, &mut d2);
    let (mut d_hidden, fc2_weight, fc2_bias) = affine_backward(&cache.hidden, &p.fc2_weight, &d2);
    relu_backward_in_place(&cache.hidden, &mut d_hidden);
    let (dx, fc1_weight, fc1_bias) = affine_backward(&cache.input, &p.fc1_weight, &d_hidden);
    Ok((dx, TransformParams { fc1_weight, fc1_bias, fc2_weight, fc2_bias }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashParams<T = f64> {
    /// `D2 x L`
    pub weight: Tensor<T>,
    /// `L`
    pub bias: Tensor<T>,
}

impl_params!(HashParams {
    weight: "hash.weight",
    bias: "hash.bias",
});

impl<T: Real> HashParams<T> {
    pub fn zeros(input: usize, bits: usize) -> Self {
        HashParams { weight: Tensor::zeros(&[input, bits]), bias: Tensor::zeros(&[bits]) }
    }

    /// Glorot-style init: sigmoid units start near their linear regime.
    pub fn init(input: usize, bits: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (input + bits) as f64).sqrt();
        HashParams {
            weight: Tensor::from_fn(&[input, bits], |_| T::from_f64_lossy(rng.normal() * std)),
            bias: Tensor::zeros(&[bits]),
        }
    }

    pub fn bits(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `sigmoid(x W_h + b_h)`, values in `(0, 1)`.
pub fn hash_forward<T: Real>(p: &HashParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    batch_dims(x, p.weight.shape()[0], "hash layer")?;
    Ok(affine(x, &p.weight, Some(&p.bias)).map(sigmoid))
}

/// Backward from the hash output `h` (the cached forward result).
pub fn hash_backward<T: Real>(
    p: &HashParams<T>,
    x: &Tensor<T>,
    h: &Tensor<T>,
    d_h: &Tensor<T>,
) -> Result<(Tensor<T>, HashParams<T>)> {
    d_h.expect_shape(h.shape(), "hash cotangent")?;
    let mut dz = d_h.clone();
    for (g, &v) in dz.data_mut().iter_mut().zip(h.data()) {
        *g *= v * (T::one() - v);
    }
    let (dx, weight, bias) = affine_backward(x, &p.weight, &dz);
    Ok((dx, HashParams { weight, bias }))
}

/// Output nonlinearity of the prediction layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Class probabilities sum to one.
    Softmax,
    /// Independent per-class sigmoid.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictParams<T = f64> {
    /// `in x M`, no bias.
    pub weight: Tensor<T>,
    pub activation: Activation,
}

impl_params!(PredictParams {
    weight: "predict.weight",
});

impl<T: Real> PredictParams<T> {
    pub fn zeros(input: usize, classes: usize, activation: Activation) -> Self {
        PredictParams { weight: Tensor::zeros(&[input, classes]), activation }
    }

    pub fn init(input: usize, classes: usize, activation: Activation, rng: &mut Rng) -> Self {
        let std = (2.0 / (input + classes) as f64).sqrt();
        PredictParams {
            weight: Tensor::from_fn(&[input, classes], |_| T::from_f64_lossy(rng.normal() * std)),
            activation,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Returns `(logits, probabilities)`.
pub fn predict_forward<T: Real>(p: &PredictParams<T>, h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    batch_dims(h, p.weight.shape()[0], "prediction layer")?;
    let logits = affine(h, &p.weight, None);
    let probs = match p.activation {
        Activation::Sigmoid => logits.map(sigmoid),
        Activation::Softmax => {
            let mut out = logits.clone();
            for row in out.data_mut().chunks_mut(p.classes()) {
                softmax_in_place(row);
            }
            out
        }
    };
    Ok((logits, probs))
}

/// Backward from the probability cotangent to the layer input and `W_c`.
pub fn predict_backward<T: Real>(
    p: &PredictParams<T>,
    h: &Tensor<T>,
    probs: &Tensor<T>,
    d_probs: &Tensor<T>,
) -> Result<(Tensor<T>, PredictParams<T>)> {
    d_probs.expect_shape(probs.shape(), "prediction cotangent")?;
    let m = p.classes();
    let mut d_logits = Tensor::zeros(probs.shape());
    match p.activation {
        Activation::Sigmoid => {
            for ((g, &dp), &v) in d_logits.data_mut().iter_mut().zip(d_probs.data()).zip(probs.data()) {
                *g = dp * v * (T::one() - v);
            }
        }
        Activation::Softmax => {
            for i in 0..probs.shape()[0] {
                let r = i * m..(i + 1) * m;
                softmax_backward_row(&probs.data()[r.clone()], &d_probs.data()[r.clone()], &mut d_logits.data_mut()[r]);
            }
        }
    }
    let (dh, weight, _) = affine_backward(h, &p.weight, &d_logits);
    Ok((dh, PredictParams { weight, activation: p.activation }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn transform_zero_in_zero_out() {
        let mut rng = Rng::seed_from_u64(0);
        let p = TransformParams::<f64>::init(6, 4, 3, &mut rng);
        let (y, _) = transform_forward(&p, &Tensor::zeros(&[2, 6])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transform_identity_composition() {
        // fc1 = I, fc2 = [[1, 1]]^T sums both units; ReLU clips the negative one.
        let p = TransformParams {
            fc1_weight: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            fc1_bias: Tensor::zeros(&[2]),
            fc2_weight: Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(),
            fc2_bias: Tensor::new(&[1], vec![0.5]).unwrap(),
        };
        let (y, _) = transform_forward(&p, &row(&[3.0, -2.0])).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn transform_shape_mismatch() {
        let p = TransformParams::<f64>::zeros(4, 3, 2);
        assert!(transform_forward(&p, &Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn hash_examples() {
        let mut p = HashParams::<f64>::zeros(3, 4);
        let h = hash_forward(&p, &row(&[1.0, -2.0, 3.0])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.5));
        p.bias.data_mut()[2] = 3f64.ln();
        let h = hash_forward(&p, &row(&[1.0, -2.0, 3.0])).unwrap();
        assert!((h.data()[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let p = PredictParams::<f64>::zeros(3, 5, Activation::Sigmoid);
        let (_, t) = predict_forward(&p, &row(&[0.1, 0.9, 0.4])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5));
        let p = PredictParams::<f64>::zeros(3, 5, Activation::Softmax);
        let (_, t) = predict_forward(&p, &row(&[0.1, 0.9, 0.4])).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(predict_forward(&p, &row(&[0.1, 0.9])).is_err());
    }
}
