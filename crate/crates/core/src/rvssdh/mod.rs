//! The hash component and the full networks built around it.
//!
//! A network is an optional convolutional backbone followed by a head
//! chosen by [`Variant`]:
//!
//! | variant          | head                                                   | retrieval space |
//! |------------------|--------------------------------------------------------|-----------------|
//! | `random_vlad`    | random VLAD -> transform -> hash -> prediction         | Hamming         |
//! | `netvlad_ssdh`   | NetVLAD -> transform -> hash -> prediction             | Hamming         |
//! | `ssdh_only`      | flatten -> transform -> hash -> prediction             | Hamming         |
//! | `netvlad`        | NetVLAD -> prediction                                  | cosine          |
//! | `backbone_only`  | flatten -> prediction                                  | Euclidean       |
//!
//! During training the prediction layer sits on top of the continuous hash
//! output; at retrieval time it is dropped and the hash output is
//! binarized.

pub mod dense;
pub mod kmeans;
pub mod vlad;

use std::fmt;
use std::str::FromStr;

use crate::backbone::{self, BackboneCache, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use dense::{Activation, HashParams, PredictParams, TransformParams};
pub use vlad::{VladKind, VladParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    RandomVlad,
    NetVladSsdh,
    SsdhOnly,
    NetVlad,
    BackboneOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::RandomVlad, Variant::NetVladSsdh, Variant::SsdhOnly, Variant::NetVlad, Variant::BackboneOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RandomVlad => "random_vlad",
            Variant::NetVladSsdh => "netvlad_ssdh",
            Variant::SsdhOnly => "ssdh_only",
            Variant::NetVlad => "netvlad",
            Variant::BackboneOnly => "backbone_only",
        }
    }

    pub fn vlad_kind(self) -> Option<VladKind> {
        match self {
            Variant::RandomVlad => Some(VladKind::Random),
            Variant::NetVladSsdh | Variant::NetVlad => Some(VladKind::Net),
            Variant::SsdhOnly | Variant::BackboneOnly => None,
        }
    }

    /// Whether the variant carries a hash layer and produces binary codes.
    pub fn hashes(self) -> bool {
        matches!(self, Variant::RandomVlad | Variant::NetVladSsdh | Variant::SsdhOnly)
    }

    pub fn metric(self) -> Metric {
        match self {
            Variant::NetVlad => Metric::Cosine,
            Variant::BackboneOnly => Metric::Euclidean,
            _ => Metric::Hamming,
        }
    }

    fn code(self) -> u32 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u32
    }

    fn from_code(c: u32) -> Option<Self> {
        Variant::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Distance used to rank database items for a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Hamming,
    Cosine,
    Euclidean,
}

pub const DEFAULT_FC_WIDTH: usize = 1024;

const MAX_RECORD_DIM: f64 = 1_048_576.0;

/// Architecture of a network. Everything needed to rebuild parameter
/// shapes lives here.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `H x W x C` of one input sample (image or feature map).
    pub input_shape: [usize; 3],
    /// `None` when inputs are already feature maps.
    pub backbone: Option<BackboneConfig>,
    /// `K`
    pub clusters: usize,
    /// `L`
    pub bits: usize,
    /// `D1`; `None` picks `min(1024, transform input)`.
    pub d1: Option<usize>,
    /// `D2`; `None` picks `D1`.
    pub d2: Option<usize>,
    /// `M`
    pub classes: usize,
    pub transform: bool,
    /// Sharpness used to derive assignment weights from anchors at init.
    pub alpha0: f64,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_shape: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            variant,
            input_shape,
            backbone: None,
            clusters: 8,
            bits: 32,
            d1: None,
            d2: None,
            classes,
            transform: true,
            alpha0: 1.0,
            activation: Activation::Softmax,
        }
    }

    /// Shape `h x w x D` of the feature map fed to the head.
    pub fn feature_shape(&self) -> [usize; 3] {
        let [h, w, c] = self.input_shape;
        match &self.backbone {
            Some(b) => b.output_shape(h, w),
            None => [h, w, c],
        }
    }

    /// Length of the pooled (VLAD or flattened) vector.
    pub fn pooled_len(&self) -> usize {
        let [h, w, d] = self.feature_shape();
        match self.variant.vlad_kind() {
            Some(_) => self.clusters * d,
            None => h * w * d,
        }
    }

    fn has_transform(&self) -> bool {
        self.variant.hashes() && self.transform
    }

    /// `(D1, D2)` after defaults, when the transform layer is present.
    pub fn transform_dims(&self) -> Option<(usize, usize)> {
        if !self.has_transform() {
            return None;
        }
        let d1 = self.d1.unwrap_or_else(|| DEFAULT_FC_WIDTH.min(self.pooled_len()));
        let d2 = self.d2.unwrap_or(d1);
        Some((d1, d2))
    }

    /// Width of the hash layer input.
    pub fn hash_input_len(&self) -> usize {
        self.transform_dims().map(|(_, d2)| d2).unwrap_or_else(|| self.pooled_len())
    }

    /// Width of the prediction layer input.
    pub fn predict_input_len(&self) -> usize {
        if self.variant.hashes() {
            self.bits
        } else {
            self.pooled_len()
        }
    }

    /// Dimensionality of retrieval embeddings.
    pub fn embedding_len(&self) -> usize {
        self.predict_input_len()
    }

    /// Number of trainable scalars, computed from the shapes alone.
    pub fn param_count(&self) -> usize {
        let [_, _, d] = self.feature_shape();
        let mut n = 0;
        if let Some(b) = &self.backbone {
            n += 9 * b.in_channels * b.conv1_channels + b.conv1_channels;
            n += 9 * b.conv1_channels * b.conv2_channels + b.conv2_channels;
        }
        if self.variant.vlad_kind().is_some() {
            n += 2 * self.clusters * d + self.clusters;
        }
        if let Some((d1, d2)) = self.transform_dims() {
            n += self.pooled_len() * d1 + d1 + d1 * d2 + d2;
        }
        if self.variant.hashes() {
            n += self.hash_input_len() * self.bits + self.bits;
        }
        n + self.predict_input_len() * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_shape.iter().any(|&d| d == 0) {
            return bad(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if let Some(b) = &self.backbone {
            if b.conv1_channels == 0 || b.conv2_channels == 0 {
                return bad("backbone channel counts must be >= 1".into());
            }
            if b.in_channels != self.input_shape[2] {
                return bad(format!(
                    "backbone expects {} input channels, samples have {}",
                    b.in_channels, self.input_shape[2]
                ));
            }
            if self.input_shape[0] < backbone::MIN_SPATIAL || self.input_shape[1] < backbone::MIN_SPATIAL {
                return bad(format!("backbone needs inputs of at least {0}x{0}", backbone::MIN_SPATIAL));
            }
        }
        if self.classes < 1 {
            return bad("class count M must be >= 1".into());
        }
        if self.variant.vlad_kind().is_some() && self.clusters < 1 {
            return bad("cluster count K must be >= 1".into());
        }
        if self.variant.hashes() && self.bits < 1 {
            return bad("hash length L must be >= 1".into());
        }
        if let Some((d1, d2)) = self.transform_dims() {
            let kd = self.pooled_len();
            if !(d2 >= 1 && d2 <= d1 && d1 <= kd) {
                return bad(format!("transform widths must satisfy 1 <= D2 <= D1 <= {kd}, got D1 = {d1}, D2 = {d2}"));
            }
        }
        if !self.alpha0.is_finite() || self.alpha0 < 0.0 {
            return bad(format!("alpha0 must be finite and >= 0, got {}", self.alpha0));
        }
        Ok(())
    }

    /// Numeric encoding stored alongside checkpoints.
    pub fn to_record(&self) -> Vec<f64> {
        let [h, w, c] = self.input_shape;
        let (b_in, b1, b2) = match &self.backbone {
            Some(b) => (b.in_channels as f64, b.conv1_channels as f64, b.conv2_channels as f64),
            None => (0.0, 0.0, 0.0),
        };
        vec![
            self.variant.code() as f64,
            h as f64,
            w as f64,
            c as f64,
            if self.backbone.is_some() { 1.0 } else { 0.0 },
            b_in,
            b1,
            b2,
            self.clusters as f64,
            self.bits as f64,
            self.d1.map_or(-1.0, |v| v as f64),
            self.d2.map_or(-1.0, |v| v as f64),
            self.classes as f64,
            if self.transform { 1.0 } else { 0.0 },
            self.alpha0,
            match self.activation {
                Activation::Softmax => 0.0,
                Activation::Sigmoid => 1.0,
            },
        ]
    }

    /// Inverse of [`ModelConfig::to_record`]. Rejects non-integral or
    /// implausibly large sizes and invalid architectures.
    pub fn from_record(r: &[f64]) -> Result<Self> {
        let bad = |d: String| Error::format("model record", d);
        if r.len() != 16 {
            return Err(bad(format!("expected 16 fields, got {}", r.len())));
        }
        for (i, &v) in r.iter().enumerate() {
            let size_field = i != 14;
            if !v.is_finite() || (size_field && (v.fract() != 0.0 || !(-1.0..=MAX_RECORD_DIM).contains(&v))) {
                return Err(bad(format!("field {i} has invalid value {v}")));
            }
        }
        let u = |v: f64| v.max(0.0) as usize;
        let opt = |v: f64| if v < 0.0 { None } else { Some(v as usize) };
        let variant = Variant::from_code(r[0] as u32)
            .ok_or_else(|| Error::format("model record", format!("unknown variant code {}", r[0])))?;
        let backbone = (r[4] != 0.0).then(|| BackboneConfig {
            in_channels: u(r[5]),
            conv1_channels: u(r[6]),
            conv2_channels: u(r[7]),
        });
        ModelConfig {
            variant,
            input_shape: [u(r[1]), u(r[2]), u(r[3])],
            backbone,
            clusters: u(r[8]),
            bits: u(r[9]),
            d1: opt(r[10]),
            d2: opt(r[11]),
            classes: u(r[12]),
            transform: r[13] != 0.0,
            alpha0: r[14],
            activation: if r[15] == 0.0 { Activation::Softmax } else { Activation::Sigmoid },
        }
        .validated()
        .map_err(|e| bad(e.to_string()))
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

/// All trainable tensors of a network. Also used for gradients and
/// momentum buffers, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f64> {
    pub backbone: Option<BackboneParams<T>>,
    pub vlad: Option<VladParams<T>>,
    pub transform: Option<TransformParams<T>>,
    pub hash: Option<HashParams<T>>,
    pub predict: PredictParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Zero-filled parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.feature_shape()[2];
        ModelParams {
            backbone: cfg.backbone.as_ref().map(BackboneParams::zeros),
            vlad: cfg.variant.vlad_kind().map(|k| VladParams::zeros(cfg.clusters, d, k)),
            transform: cfg.transform_dims().map(|(d1, d2)| TransformParams::zeros(cfg.pooled_len(), d1, d2)),
            hash: cfg.variant.hashes().then(|| HashParams::zeros(cfg.hash_input_len(), cfg.bits)),
            predict: PredictParams::zeros(cfg.predict_input_len(), cfg.classes, cfg.activation),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            *t = t.zeros_like();
        }
        z
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.backbone {
            out.extend(p.named());
        }
        if let Some(p) = &self.vlad {
            out.extend(p.named());
        }
        if let Some(p) = &self.transform {
            out.extend(p.named());
        }
        if let Some(p) = &self.hash {
            out.extend(p.named());
        }
        out.extend(self.predict.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.backbone {
            out.extend(p.named_mut());
        }
        if let Some(p) = &mut self.vlad {
            out.extend(p.named_mut());
        }
        if let Some(p) = &mut self.transform {
            out.extend(p.named_mut());
        }
        if let Some(p) = &mut self.hash {
            out.extend(p.named_mut());
        }
        out.extend(self.predict.named_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.as_ref().map(|p| BackboneParams {
                conv1_weight: p.conv1_weight.cast(),
                conv1_bias: p.conv1_bias.cast(),
                conv2_weight: p.conv2_weight.cast(),
                conv2_bias: p.conv2_bias.cast(),
            }),
            vlad: self.vlad.as_ref().map(|p| VladParams {
                anchors: p.anchors.cast(),
                assign_weight: p.assign_weight.cast(),
                assign_bias: p.assign_bias.cast(),
                kind: p.kind,
            }),
            transform: self.transform.as_ref().map(|p| TransformParams {
                fc1_weight: p.fc1_weight.cast(),
                fc1_bias: p.fc1_bias.cast(),
                fc2_weight: p.fc2_weight.cast(),
                fc2_bias: p.fc2_bias.cast(),
            }),
            hash: self.hash.as_ref().map(|p| HashParams { weight: p.weight.cast(), bias: p.bias.cast() }),
            predict: PredictParams { weight: self.predict.weight.cast(), activation: self.predict.activation },
        }
    }
}

/// Outputs of a training-mode forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// Continuous hash values `B x L` for hashing variants.
    pub h_hat: Option<Tensor<T>>,
    pub logits: Tensor<T>,
    /// Class probabilities `B x M`.
    pub probs: Tensor<T>,
}

/// Activations retained for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    batch: usize,
    backbone: Option<BackboneCache<T>>,
    feature_shape: Vec<usize>,
    vlad: Option<vlad::VladCache<T>>,
    transform: Option<dense::TransformCache<T>>,
    hash_input: Tensor<T>,
    predict_input: Tensor<T>,
    probs: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f64> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `rng`.
    ///
    /// Random-VLAD anchors are i.i.d. `N(0, 1/D)` (std `1/sqrt(D)`);
    /// NetVLAD anchors are k-means centers of `sample_descriptors`, which
    /// must then be provided. Assignment weights follow from the anchors
    /// via `w_k = 2 alpha0 c_k`, `b_k = -alpha0 |c_k|^2`.
    pub fn init(config: ModelConfig, rng: &mut Rng, sample_descriptors: Option<&Tensor<T>>) -> Result<Self> {
        Model::init_with(config, rng, |_| {
            sample_descriptors
                .cloned()
                .ok_or_else(|| Error::invalid("NetVLAD initialization needs sample descriptors for k-means"))
        })
    }

    /// Like [`Model::init`], but NetVLAD descriptors are produced on demand
    /// from the freshly drawn backbone (`None` when there is no backbone).
    /// `descriptors` is only called for NetVLAD variants.
    pub fn init_with(
        config: ModelConfig,
        rng: &mut Rng,
        descriptors: impl FnOnce(Option<&BackboneParams<T>>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.feature_shape()[2];
        let backbone = config.backbone.as_ref().map(|b| BackboneParams::init(b, rng));
        let vlad = match config.variant.vlad_kind() {
            None => None,
            Some(kind) => {
                let anchors = match kind {
                    VladKind::Random => {
                        let std = 1.0 / (d as f64).sqrt();
                        Tensor::from_fn(&[config.clusters, d], |_| T::from_f64_lossy(rng.normal() * std))
                    }
                    VladKind::Net => {
                        let desc = descriptors(backbone.as_ref())?;
                        let mut km_rng = rng.fork();
                        kmeans::kmeans(&desc, config.clusters, &mut km_rng)?
                    }
                };
                Some(VladParams::from_anchors(anchors, config.alpha0, kind)?)
            }
        };
        let transform = config.transform_dims().map(|(d1, d2)| TransformParams::init(config.pooled_len(), d1, d2, rng));
        let hash = config.variant.hashes().then(|| HashParams::init(config.hash_input_len(), config.bits, rng));
        let predict = PredictParams::init(config.predict_input_len(), config.classes, config.activation, rng);
        Ok(Model { config, params: ModelParams { backbone, vlad, transform, hash, predict } })
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let [h, w, c] = self.config.input_shape;
        match input.shape() {
            &[b, ih, iw, ic] if (ih, iw, ic) == (h, w, c) => Ok(b),
            s => Err(Error::shape(format!("model expects B x {h} x {w} x {c} input, got {s:?}"))),
        }
    }

    /// Backbone features of a batch (identity when there is no backbone).
    pub fn features(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        match &self.params.backbone {
            Some(bp) => Ok(backbone::forward(bp, input)?.0),
            None => Ok(input.clone()),
        }
    }

    fn pool(&self, features: &Tensor<T>, b: usize) -> Result<(Tensor<T>, Option<vlad::VladCache<T>>)> {
        match &self.params.vlad {
            Some(vp) => {
                let (y, c) = vlad::forward(vp, features)?;
                Ok((y, Some(c)))
            }
            None => {
                let len = features.len() / b.max(1);
                Ok((features.clone().reshape(&[b, len])?, None))
            }
        }
    }

    /// Training-mode forward pass.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Forward<T>, ForwardCache<T>)> {
        let b = self.check_input(input)?;
        let (features, bb_cache) = match &self.params.backbone {
            Some(bp) => {
                let (f, c) = backbone::forward(bp, input)?;
                (f, Some(c))
            }
            None => (input.clone(), None),
        };
        let (pooled, vlad_cache) = self.pool(&features, b)?;
        let (hash_input, tr_cache) = match &self.params.transform {
            Some(tp) => {
                let (y, c) = dense::transform_forward(tp, &pooled)?;
                (y, Some(c))
            }
            None => (pooled, None),
        };
        let (h_hat, predict_input) = match &self.params.hash {
            Some(hp) => {
                let h = dense::hash_forward(hp, &hash_input)?;
                (Some(h.clone()), h)
            }
            None => (None, hash_input.clone()),
        };
        let (logits, probs) = dense::predict_forward(&self.params.predict, &predict_input)?;
        let cache = ForwardCache {
            batch: b,
            backbone: bb_cache,
            feature_shape: features.shape().to_vec(),
            vlad: vlad_cache,
            transform: tr_cache,
            hash_input,
            predict_input,
            probs: probs.clone(),
        };
        Ok((Forward { h_hat, logits, probs }, cache))
    }

    /// Reverse pass from cotangents of the class probabilities and (for
    /// hashing variants) of the continuous hash values.
    ///
    /// With `train_backbone` unset the backbone is treated as frozen and
    /// its gradient entries are zero.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_probs: &Tensor<T>,
        d_h_hat: Option<&Tensor<T>>,
        train_backbone: bool,
        want_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, ModelParams<T>)> {
        if d_probs.shape() != cache.probs.shape() {
            return Err(Error::shape(format!(
                "probability cotangent {:?} does not match cached batch {:?}",
                d_probs.shape(),
                cache.probs.shape()
            )));
        }
        let mut grads = self.params.zeros_like();
        let (d_pred_in, g_pred) =
            dense::predict_backward(&self.params.predict, &cache.predict_input, &cache.probs, d_probs)?;
        grads.predict = g_pred;

        let d_hash_in = match &self.params.hash {
            Some(hp) => {
                let mut d_h = d_pred_in;
                if let Some(extra) = d_h_hat {
                    d_h.add_assign(extra)?;
                }
                let (dx, g) = dense::hash_backward(hp, &cache.hash_input, &cache.predict_input, &d_h)?;
                grads.hash = Some(g);
                dx
            }
            None => {
                if d_h_hat.is_some() {
                    return Err(Error::invalid(format!(
                        "variant {} has no hash layer",
                        self.config.variant
                    )));
                }
                d_pred_in
            }
        };

        let d_pooled = match (&self.params.transform, &cache.transform) {
            (Some(tp), Some(tc)) => {
                let (dx, g) = dense::transform_backward(tp, tc, &d_hash_in)?;
                grads.transform = Some(g);
                dx
            }
            (None, None) => d_hash_in,
            _ => return Err(Error::invalid("forward cache does not match model layout")),
        };

        let d_features = match (&self.params.vlad, &cache.vlad) {
            (Some(vp), Some(vc)) => {
                let (dm, g) = vlad::backward(vp, vc, &d_pooled)?;
                grads.vlad = Some(g);
                dm
            }
            (None, None) => d_pooled.reshape(&cache.feature_shape)?,
            _ => return Err(Error::invalid("forward cache does not match model layout")),
        };

        let d_input = match (&self.params.backbone, &cache.backbone) {
            (Some(bp), Some(bc)) => {
                if train_backbone || want_input_grad {
                    let (dx, g) = backbone::backward(bp, bc, &d_features, want_input_grad)?;
                    if train_backbone {
                        grads.backbone = Some(g);
                    }
                    dx
                } else {
                    None
                }
            }
            (None, None) => want_input_grad.then_some(d_features),
            _ => return Err(Error::invalid("forward cache does not match model layout")),
        };
        debug_assert_eq!(cache.batch, d_probs.shape()[0]);
        Ok((d_input, grads))
    }

    /// Retrieval embedding of a batch with the prediction layer removed:
    /// continuous hash values for hashing variants, the pooled vector
    /// otherwise.
    pub fn embed(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(input)?;
        let features = self.features(input)?;
        let (pooled, _) = self.pool(&features, b)?;
        let hash_input = match &self.params.transform {
            Some(tp) => dense::transform_forward(tp, &pooled)?.0,
            None => pooled,
        };
        match &self.params.hash {
            Some(hp) => dense::hash_forward(hp, &hash_input),
            None => Ok(hash_input),
        }
    }

    /// Data-dependent rescaling of the first transform layer and the hash
    /// layer so that their pre-activations have unit root-mean-square over
    /// `input`. Returns the divisors applied (`1` where nothing changed).
    ///
    /// Unnormalized VLAD sums grow with the number of descriptors, which
    /// otherwise saturates the hash sigmoid at step 0.
    pub fn calibrate(&mut self, input: &Tensor<T>) -> Result<Vec<f64>> {
        let b = self.check_input(input)?;
        let features = self.features(input)?;
        let (pooled, _) = self.pool(&features, b)?;
        let mut divisors = Vec::new();
        let mut hash_input = pooled;
        if let Some(tp) = &mut self.params.transform {
            let s = rms(&dense::affine(&hash_input, &tp.fc1_weight, Some(&tp.fc1_bias)));
            divisors.push(rescale(&mut tp.fc1_weight, &mut tp.fc1_bias, s));
            hash_input = dense::transform_forward(tp, &hash_input)?.0;
        }
        if let Some(hp) = &mut self.params.hash {
            let s = rms(&dense::affine(&hash_input, &hp.weight, Some(&hp.bias)));
            divisors.push(rescale(&mut hp.weight, &mut hp.bias, s));
        }
        Ok(divisors)
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

fn rms<T: Real>(t: &Tensor<T>) -> f64 {
    (t.sq_norm().as_f64() / t.len().max(1) as f64).sqrt()
}

fn rescale<T: Real>(w: &mut Tensor<T>, b: &mut Tensor<T>, s: f64) -> f64 {
    if !(s > 0.0 && s.is_finite()) {
        return 1.0;
    }
    let inv = T::from_f64_lossy(1.0 / s);
    w.scale(inv);
    b.scale(inv);
    s
}
