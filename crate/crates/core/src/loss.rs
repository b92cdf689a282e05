//! Training objective: classification loss `E1`, quantization reward `E2`
//! and the optional bit-balance term `E3`, combined as
//! `alpha*E1 - beta*E2 (+ e3_weight*E3)` and minimized.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Predictions are clamped here before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// L2 weight on the prediction matrix `W_c`.
    pub lambda: f64,
    /// Norm exponent, 1 or 2.
    pub p: u32,
    pub e3_enabled: bool,
    pub e3_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, beta: 1.0, lambda: 5e-4, p: 2, e3_enabled: false, e3_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("loss_alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("loss_beta must be >= 0, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.p != 1 && self.p != 2 {
            return bad(format!("p must be 1 or 2, got {}", self.p));
        }
        if !self.e3_weight.is_finite() {
            return bad("e3_weight must be finite".into());
        }
        Ok(())
    }
}

/// How per-sample terms are combined over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sums over the batch.
    Sum,
    /// Per-sample terms averaged over the batch; the `W_c` penalty is
    /// still counted once.
    Mean,
}

/// Builds a `B x M` one-hot matrix.
pub fn one_hot<T: Real>(labels: &[u32], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::invalid(format!("label {l} of sample {i} is outside [0, {classes})")));
        }
        t.row_mut(i)[l as usize] = T::one();
    }
    Ok(t)
}

/// Index of the single 1 in each row, rejecting anything that is not
/// one-hot.
pub fn labels_from_one_hot<T: Real>(t_true: &Tensor<T>) -> Result<Vec<usize>> {
    if t_true.ndim() != 2 {
        return Err(Error::shape(format!("targets must be B x M, got {:?}", t_true.shape())));
    }
    (0..t_true.shape()[0])
        .map(|i| {
            let row = t_true.row(i);
            let ones: Vec<usize> = (0..row.len()).filter(|&j| row[j] == T::one()).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() == 1 && zeros + 1 == row.len() {
                Ok(ones[0])
            } else {
                Err(Error::invalid(format!("target row {i} is not one-hot")))
            }
        })
        .collect()
}

fn check_pred<T: Real>(t_true: &Tensor<T>, t_pred: &Tensor<T>) -> Result<Vec<usize>> {
    t_pred.check_same_shape(t_true, "predictions vs targets")?;
    labels_from_one_hot(t_true)
}

/// `sum_i -ln max(t_pred[i, true_i], 1e-12) + lambda * |W_c|^2`.
pub fn e1_classification<T: Real>(
    t_true: &Tensor<T>,
    t_pred: &Tensor<T>,
    w_c: &Tensor<T>,
    lambda: f64,
) -> Result<f64> {
    let labels = check_pred(t_true, t_pred)?;
    let data: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -t_pred.row(i)[c].as_f64().max(LOG_CLAMP).ln())
        .sum();
    Ok(data + lambda * w_c.sq_norm().as_f64())
}

fn check_unit_interval_batch<T: Real>(h_hat: &Tensor<T>) -> Result<(usize, usize)> {
    match *h_hat.shape() {
        [b, l] if l > 0 => Ok((b, l)),
        _ => Err(Error::shape(format!("hash batch must be B x L with L >= 1, got {:?}", h_hat.shape()))),
    }
}

fn pow_abs(x: f64, p: u32) -> f64 {
    if p == 1 {
        x.abs()
    } else {
        x * x
    }
}

/// Derivative of `|x|^p`.
fn pow_abs_grad(x: f64, p: u32) -> f64 {
    if p == 1 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        2.0 * x
    }
}

/// `(1/L) sum_i |h_i - 0.5|_p^p`.
pub fn e2_quantization<T: Real>(h_hat: &Tensor<T>, p: u32) -> Result<f64> {
    let (_, l) = check_unit_interval_batch(h_hat)?;
    let s: f64 = h_hat.data().iter().map(|v| pow_abs(v.as_f64() - 0.5, p)).sum();
    Ok(s / l as f64)
}

/// `sum_i |mean(h_i) - 0.5|^p`.
pub fn e3_bit_balance<T: Real>(h_hat: &Tensor<T>, p: u32) -> Result<f64> {
    let (b, _) = check_unit_interval_batch(h_hat)?;
    Ok((0..b).map(|i| pow_abs(row_mean(h_hat.row(i)) - 0.5, p)).sum())
}

fn row_mean<T: Real>(row: &[T]) -> f64 {
    row.iter().map(|v| v.as_f64()).sum::<f64>() / row.len() as f64
}

/// Value and gradients of the combined objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub value: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub d_t_pred: Tensor<T>,
    pub d_h_hat: Option<Tensor<T>>,
    /// Gradient of the `W_c` penalty only; the data path reaches `W_c`
    /// through the prediction layer backward.
    pub d_w_c: Tensor<T>,
}

/// `alpha*E1 - beta*E2 + e3_weight*E3` and its gradients with respect to
/// the predictions, the hash outputs and (penalty part) `W_c`.
///
/// `h_hat` is `None` for variants without a hash layer, in which case only
/// `E1` contributes. With [`Reduction::Mean`] the reported `e1`, `e2`, `e3`
/// are batch means (the `W_c` penalty included in `e1` once).
pub fn total_objective<T: Real>(
    t_true: &Tensor<T>,
    t_pred: &Tensor<T>,
    h_hat: Option<&Tensor<T>>,
    w_c: &Tensor<T>,
    cfg: &LossConfig,
    reduction: Reduction,
) -> Result<Objective<T>> {
    let labels = check_pred(t_true, t_pred)?;
    let b = labels.len();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b.max(1) as f64,
    };

    let mut d_t_pred = Tensor::zeros(t_pred.shape());
    let mut ce = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let t = t_pred.row(i)[c].as_f64();
        ce -= t.max(LOG_CLAMP).ln();
        if t > LOG_CLAMP {
            d_t_pred.row_mut(i)[c] = T::from_f64_lossy(-cfg.alpha * scale / t);
        }
    }
    let penalty = cfg.lambda * w_c.sq_norm().as_f64();
    let e1 = ce * scale + penalty;
    let d_w_c = w_c.map(|w| T::from_f64_lossy(2.0 * cfg.alpha * cfg.lambda) * w);

    let (mut e2, mut e3, mut d_h_hat) = (0.0, 0.0, None);
    if let Some(h) = h_hat {
        let (hb, l) = check_unit_interval_batch(h)?;
        if hb != b {
            return Err(Error::shape(format!("hash batch has {hb} rows, predictions have {b}")));
        }
        let lf = l as f64;
        e2 = e2_quantization(h, cfg.p)? * scale;
        let mut d = h.map(|v| T::from_f64_lossy(-cfg.beta * scale / lf * pow_abs_grad(v.as_f64() - 0.5, cfg.p)));
        if cfg.e3_enabled {
            e3 = e3_bit_balance(h, cfg.p)? * scale;
            for i in 0..hb {
                let g = cfg.e3_weight * scale * pow_abs_grad(row_mean(h.row(i)) - 0.5, cfg.p) / lf;
                let gt = T::from_f64_lossy(g);
                for v in d.row_mut(i) {
                    *v += gt;
                }
            }
        }
        d_h_hat = Some(d);
    }

    let mut value = cfg.alpha * e1 - cfg.beta * e2;
    if cfg.e3_enabled {
        value += cfg.e3_weight * e3;
    }
    Ok(Objective { value, e1, e2, e3, d_t_pred, d_h_hat, d_w_c })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn e1_cases() {
        let onehot = t(&[1, 2], vec![1.0, 0.0]);
        let w0 = Tensor::zeros(&[2, 2]);
        assert_eq!(e1_classification(&onehot, &t(&[1, 2], vec![1.0, 0.0]), &w0, 0.0).unwrap(), 0.0);
        let inv_e = (-1f64).exp();
        let v = e1_classification(&onehot, &t(&[1, 2], vec![inv_e, 1.0 - inv_e]), &w0, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let ones = Tensor::full(&[2, 2], 1.0);
        assert_eq!(e1_classification(&onehot, &t(&[1, 2], vec![1.0, 0.0]), &ones, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn e1_rejects_soft_targets() {
        let soft = t(&[1, 2], vec![0.5, 0.5]);
        let err = e1_classification(&soft, &soft, &Tensor::zeros(&[2, 2]), 0.0).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn e1_clamps_zero_prediction() {
        let v = e1_classification(&t(&[1, 2], vec![0.0, 1.0]), &t(&[1, 2], vec![0.5, 0.0]), &Tensor::zeros(&[1]), 0.0)
            .unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn e2_cases() {
        assert_eq!(e2_quantization(&Tensor::full(&[3, 4], 0.5), 2).unwrap(), 0.0);
        let near = Tensor::from_fn(&[5, 8], |i| if i % 3 == 0 { 1.0 - 1e-9 } else { 1e-9 });
        assert!((e2_quantization(&near, 2).unwrap() - 0.25 * 5.0).abs() < 1e-8);
        assert!((e2_quantization(&t(&[1, 2], vec![0.9, 0.1]), 1).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn e3_cases() {
        assert_eq!(e3_bit_balance(&t(&[2, 2], vec![0.2, 0.8, 0.5, 0.5]), 1).unwrap(), 0.0);
        let all9 = Tensor::full(&[1, 7], 0.9);
        assert!((e3_bit_balance(&all9, 1).unwrap() - 0.4).abs() < 1e-15);
        assert!((e3_bit_balance(&all9, 2).unwrap() - 0.16).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_zero_lambda_is_cross_entropy() {
        let cfg = LossConfig { beta: 0.0, lambda: 0.0, ..Default::default() };
        let tt = t(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let tp = t(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.3, 0.1]);
        let h = Tensor::full(&[2, 4], 0.7);
        let o = total_objective(&tt, &tp, Some(&h), &Tensor::full(&[4, 3], 1.0), &cfg, Reduction::Sum).unwrap();
        let ce = -(0.5f64.ln() + 0.6f64.ln());
        assert!((o.value - ce).abs() < 1e-15);
        assert!(o.d_h_hat.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn e2_gradient_is_analytic() {
        let cfg = LossConfig { beta: 0.7, ..Default::default() };
        let h = t(&[1, 4], vec![0.1, 0.4, 0.5, 0.95]);
        let o = total_objective(
            &t(&[1, 2], vec![1.0, 0.0]),
            &t(&[1, 2], vec![0.6, 0.4]),
            Some(&h),
            &Tensor::zeros(&[4, 2]),
            &cfg,
            Reduction::Sum,
        )
        .unwrap();
        for (g, &v) in o.d_h_hat.unwrap().data().iter().zip(h.data()) {
            assert!((g - (-(2.0 * 0.7 / 4.0) * (v - 0.5))).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_reduction_divides_data_terms_only() {
        let cfg = LossConfig::default();
        let tt = one_hot::<f64>(&[0, 1], 2).unwrap();
        let tp = t(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]);
        let h = t(&[2, 3], vec![0.1, 0.9, 0.3, 0.6, 0.2, 0.8]);
        let w = Tensor::full(&[3, 2], 0.5);
        let s = total_objective(&tt, &tp, Some(&h), &w, &cfg, Reduction::Sum).unwrap();
        let m = total_objective(&tt, &tp, Some(&h), &w, &cfg, Reduction::Mean).unwrap();
        let pen = cfg.lambda * 1.5;
        assert!(((s.e1 - pen) / 2.0 - (m.e1 - pen)).abs() < 1e-15);
        assert!((s.e2 / 2.0 - m.e2).abs() < 1e-15);
        assert_eq!(s.d_w_c, m.d_w_c);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(one_hot::<f64>(&[0, 3], 3).is_err());
        assert_eq!(labels_from_one_hot(&one_hot::<f64>(&[2, 0], 3).unwrap()).unwrap(), vec![2, 0]);
    }
}
