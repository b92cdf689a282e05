//! "ToyNet-lite": two 3x3 conv blocks (ReLU, 2x2 max pool) that turn an
//! image into an `H/4 x W/4 x D` feature map.

use crate::error::{Error, Result};
use crate::params::{he_normal, impl_params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{self, Padding, Pooled, Tensor};

pub const MIN_SPATIAL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl BackboneConfig {
    pub fn toynet_lite(in_channels: usize) -> Self {
        BackboneConfig { in_channels, conv1_channels: 32, conv2_channels: 64 }
    }

    /// Feature-map shape produced for an `h x w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> [usize; 3] {
        [h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2), self.conv2_channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T = f64> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
}

impl_params!(BackboneParams {
    conv1_weight: "backbone.conv1.weight",
    conv1_bias: "backbone.conv1.bias",
    conv2_weight: "backbone.conv2.weight",
    conv2_bias: "backbone.conv2.bias",
});

impl<T: Real> BackboneParams<T> {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        BackboneParams {
            conv1_weight: Tensor::zeros(&[3, 3, cfg.in_channels, cfg.conv1_channels]),
            conv1_bias: Tensor::zeros(&[cfg.conv1_channels]),
            conv2_weight: Tensor::zeros(&[3, 3, cfg.conv1_channels, cfg.conv2_channels]),
            conv2_bias: Tensor::zeros(&[cfg.conv2_channels]),
        }
    }

    /// He-initialized kernels, zero biases.
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cfg);
        p.conv1_weight = he_normal(p.conv1_weight.shape(), 9 * cfg.in_channels, rng);
        p.conv2_weight = he_normal(p.conv2_weight.shape(), 9 * cfg.conv1_channels, rng);
        p
    }
}

/// Activations kept from [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    input: Tensor<T>,
    act1: Tensor<T>,
    pool1: Pooled<T>,
    act2: Tensor<T>,
    pool2_argmax: Vec<usize>,
}

/// Runs a batch `B x H x W x Cin` through the backbone.
pub fn forward<T: Real>(p: &BackboneParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
    match input.shape() {
        &[_, h, w, _] if h >= MIN_SPATIAL && w >= MIN_SPATIAL => {}
        &[_, _, _, _] => {
            return Err(Error::shape(format!(
                "backbone needs spatial dims >= {MIN_SPATIAL}, got {:?}",
                input.shape()
            )))
        }
        s => return Err(Error::shape(format!("backbone input must be B x H x W x C, got {s:?}"))),
    }
    let pad = Padding::same(1);
    let mut act1 = tensor::conv2d_batch(input, &p.conv1_weight, &p.conv1_bias, pad, 1)?;
    tensor::relu_in_place(&mut act1);
    let pool1 = tensor::maxpool2_batch(&act1)?;
    let mut act2 = tensor::conv2d_batch(&pool1.output, &p.conv2_weight, &p.conv2_bias, pad, 1)?;
    tensor::relu_in_place(&mut act2);
    let pool2 = tensor::maxpool2_batch(&act2)?;
    let cache = BackboneCache { input: input.clone(), act1, pool1, act2, pool2_argmax: pool2.argmax };
    Ok((pool2.output, cache))
}

/// Reverse pass. Returns the input gradient only when asked for it.
pub fn backward<T: Real>(
    p: &BackboneParams<T>,
    cache: &BackboneCache<T>,
    d_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, BackboneParams<T>)> {
    if d_out.len() != cache.pool2_argmax.len() {
        return Err(Error::shape(format!(
            "backbone cotangent {:?} does not match cached forward output ({} values)",
            d_out.shape(),
            cache.pool2_argmax.len()
        )));
    }
    let pad = Padding::same(1);
    let mut d_act2 = tensor::maxpool2_backward(cache.act2.shape(), &cache.pool2_argmax, d_out)?;
    tensor::relu_backward_in_place(&cache.act2, &mut d_act2);
    let (d_pool1, conv2_weight, conv2_bias) =
        tensor::conv2d_backward(&cache.pool1.output, &p.conv2_weight, &d_act2, pad, 1, true)?;
    let d_pool1 = d_pool1.expect("input gradient requested");
    let mut d_act1 = tensor::maxpool2_backward(cache.act1.shape(), &cache.pool1.argmax, &d_pool1)?;
    tensor::relu_backward_in_place(&cache.act1, &mut d_act1);
    let (d_input, conv1_weight, conv1_bias) =
        tensor::conv2d_backward(&cache.input, &p.conv1_weight, &d_act1, pad, 1, want_input_grad)?;
    Ok((d_input, BackboneParams { conv1_weight, conv1_bias, conv2_weight, conv2_bias }))
}
