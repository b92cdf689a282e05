//! Finite-difference verification of every backward pass.
//!
//! Each layer is scalarized as `sum(output * cotangent)` with a random
//! cotangent and compared, parameter group by parameter group, against
//! central differences in `f64`. The reported figure is the norm-wise
//! relative error, maximized over seeds.
//!
//! ReLU and max-pooling are piecewise linear, so a probe can straddle a
//! kink. Coordinates whose one-sided slopes disagree are left out of the
//! comparison and counted in the report.

use std::io::Write;

use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::error::Result;
use crate::loss::{self, LossConfig, Reduction};
use crate::params::Params;
use crate::rng::Rng;
use crate::rvssdh::{dense, vlad, Activation, Model, ModelConfig, ModelParams, Variant, VladKind, VladParams};
use crate::tensor::{self, relative_error, Padding, Tensor};

/// Gradient norms below this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-7;

/// One-sided slopes further apart than this (relative) mark a kink.
pub const KINK_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub base_seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient of every group whose name
    /// contains this string.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { seeds: 10, base_seed: 0, eps: 1e-5, tolerance: 1e-4, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    /// Coordinates skipped at kinks, summed over seeds.
    pub kinks: usize,
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerResult {
    pub layer: &'static str,
    pub groups: Vec<GroupResult>,
}

impl LayerResult {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub seeds: u64,
    pub layers: Vec<LayerResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel_error() < self.tolerance)
    }

    /// One line per parameter group, then a verdict per layer.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "layer\tgroup\tmax_rel_error\tkinks\tstatus")?;
        for l in &self.layers {
            for g in &l.groups {
                let ok = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
                writeln!(w, "{}\t{}\t{:.3e}\t{}/{}\t{ok}", l.layer, g.group, g.max_rel_error, g.kinks, g.coordinates)?;
            }
        }
        for l in &self.layers {
            let ok = if l.max_rel_error() < self.tolerance { "PASS" } else { "FAIL" };
            writeln!(w, "# {ok} {} (max {:.3e} over {} seeds)", l.layer, l.max_rel_error(), self.seeds)?;
        }
        Ok(())
    }
}

/// Named inputs of a scalar function with their analytic gradients.
struct Case {
    names: Vec<String>,
    inputs: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
}

type Scalar<'a> = Box<dyn Fn(&[Tensor<f64>]) -> f64 + 'a>;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.uniform())
}

fn weighted(out: &Tensor<f64>, cot: &Tensor<f64>) -> f64 {
    out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
}

/// Central differences with kink detection: returns the numeric gradient
/// and a mask of coordinates where the function is smooth at `eps` scale.
/// A smooth coordinate has matching one-sided slopes and a central
/// difference that barely moves when the step is halved.
fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> (Vec<f64>, Vec<bool>) {
    let f0 = f(x);
    let mut probe = x.clone();
    let mut at = |i: usize, orig: f64, h: f64| {
        probe.data_mut()[i] = orig + h;
        let v = f(&probe);
        probe.data_mut()[i] = orig;
        v
    };
    let mut probes = Vec::with_capacity(x.len());
    for (i, &orig) in x.data().iter().enumerate() {
        let (up, down) = (at(i, orig, eps), at(i, orig, -eps));
        let (up2, down2) = (at(i, orig, eps / 2.0), at(i, orig, -eps / 2.0));
        probes.push(((up - f0) / eps, (f0 - down) / eps, (up - down) / (2.0 * eps), (up2 - down2) / eps));
    }
    // Coordinates with negligible slope are dominated by roundoff.
    let floor = 1e-4 * probes.iter().map(|p| p.2.abs()).fold(1e-12, f64::max);
    let smooth = probes
        .iter()
        .map(|&(right, left, central, half)| {
            let scale = right.abs().max(left.abs()).max(floor);
            (right - left).abs() <= KINK_TOLERANCE * scale && (central - half).abs() <= 1e-6 * scale
        })
        .collect();
    (probes.iter().map(|p| p.2).collect(), smooth)
}

fn compare(case: Case, f: Scalar<'_>, cfg: &GradCheckConfig) -> Vec<(String, f64, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..case.inputs.len() {
        let (numeric, smooth) = numeric_grad(
            |x| {
                let mut v = case.inputs.clone();
                v[i] = x.clone();
                f(&v)
            },
            &case.inputs[i],
            cfg.eps,
        );
        let mut analytic = case.analytic[i].data().to_vec();
        if cfg.corrupt.as_deref().is_some_and(|c| case.names[i].contains(c)) && !analytic.is_empty() {
            analytic[0] = analytic[0] * 1.5 + 1e-3;
        }
        let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(&smooth).filter(|(_, &s)| s).map(|(&a, _)| a).collect() };
        let e = relative_error(&keep(&analytic), &keep(&numeric), ERROR_FLOOR);
        let kinks = smooth.iter().filter(|s| !**s).count();
        out.push((case.names[i].clone(), e, kinks, smooth.len()));
    }
    out
}

fn conv_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let pad = Padding { top: 1, bottom: 0, left: 1, right: 1 };
    let x = random(&[2, 6, 5, 3], rng);
    let k = random(&[3, 3, 3, 4], rng);
    let b = random(&[4], rng);
    let out = tensor::conv2d_batch(&x, &k, &b, pad, 2).unwrap();
    let cot = random(out.shape(), rng);
    let (dx, dk, db) = tensor::conv2d_backward(&x, &k, &cot, pad, 2, true).unwrap();
    let case = Case {
        names: vec!["input".into(), "kernels".into(), "bias".into()],
        inputs: vec![x, k, b],
        analytic: vec![dx.unwrap(), dk, db],
    };
    let f = move |v: &[Tensor<f64>]| weighted(&tensor::conv2d_batch(&v[0], &v[1], &v[2], pad, 2).unwrap(), &cot);
    (case, Box::new(f))
}

fn pool_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let x = random(&[2, 5, 4, 3], rng);
    let pooled = tensor::maxpool2_batch(&x).unwrap();
    let cot = random(pooled.output.shape(), rng);
    let dx = tensor::maxpool2_backward(x.shape(), &pooled.argmax, &cot).unwrap();
    let case = Case { names: vec!["input".into()], inputs: vec![x], analytic: vec![dx] };
    let f = move |v: &[Tensor<f64>]| weighted(&tensor::maxpool2_batch(&v[0]).unwrap().output, &cot);
    (case, Box::new(f))
}

fn softmax_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let z = random(&[4, 5], rng);
    let p = tensor::softmax_rows(&z).unwrap();
    let cot = random(p.shape(), rng);
    let mut dz = z.zeros_like();
    for i in 0..4 {
        tensor::softmax_backward_row(p.row(i), cot.row(i), dz.row_mut(i));
    }
    let case = Case { names: vec!["scores".into()], inputs: vec![z], analytic: vec![dz] };
    let f = move |v: &[Tensor<f64>]| weighted(&tensor::softmax_rows(&v[0]).unwrap(), &cot);
    (case, Box::new(f))
}

fn backbone_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let cfg = BackboneConfig { in_channels: 2, conv1_channels: 3, conv2_channels: 4 };
    let mut p = BackboneParams::<f64>::init(&cfg, rng);
    p.conv1_bias = random(&[3], rng).map(|v| 0.1 * v);
    p.conv2_bias = random(&[4], rng).map(|v| 0.1 * v);
    let x = random(&[2, 8, 10, 2], rng);
    let (out, cache) = backbone::forward(&p, &x).unwrap();
    let cot = random(out.shape(), rng);
    let (dx, g) = backbone::backward(&p, &cache, &cot, true).unwrap();
    let mut names = vec!["input".to_string()];
    let mut inputs = vec![x];
    let mut analytic = vec![dx.unwrap()];
    for ((n, t), (_, gt)) in p.named().into_iter().zip(g.named()) {
        names.push(n.into());
        inputs.push(t.clone());
        analytic.push(gt.clone());
    }
    let f = move |v: &[Tensor<f64>]| {
        let mut q = p.clone();
        for ((_, t), src) in q.named_mut().into_iter().zip(&v[1..]) {
            *t = src.clone();
        }
        weighted(&backbone::forward(&q, &v[0]).unwrap().0, &cot)
    };
    (Case { names, inputs, analytic }, Box::new(f))
}

fn vlad_case(kind: VladKind, rng: &mut Rng) -> (Case, Scalar<'static>) {
    let (k, d) = (3, 4);
    let anchors = random(&[k, d], rng);
    let mut p = VladParams::from_anchors(anchors, 1.0, kind).unwrap();
    p.assign_weight = random(&[k, d], rng);
    p.assign_bias = random(&[k], rng);
    let x = random(&[2, 3, 2, d], rng);
    let (out, cache) = vlad::forward(&p, &x).unwrap();
    let cot = random(out.shape(), rng);
    let (dx, g) = vlad::backward(&p, &cache, &cot).unwrap();
    let case = Case {
        names: vec!["descriptors".into(), "anchors".into(), "assign_weight".into(), "assign_bias".into()],
        inputs: vec![x, p.anchors.clone(), p.assign_weight.clone(), p.assign_bias.clone()],
        analytic: vec![dx, g.anchors, g.assign_weight, g.assign_bias],
    };
    let f = move |v: &[Tensor<f64>]| {
        let q = VladParams { anchors: v[1].clone(), assign_weight: v[2].clone(), assign_bias: v[3].clone(), kind };
        weighted(&vlad::forward(&q, &v[0]).unwrap().0, &cot)
    };
    (case, Box::new(f))
}

fn transform_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let mut p = dense::TransformParams::<f64>::init(6, 5, 4, rng);
    p.fc1_bias = random(&[5], rng).map(|v| 0.3 * v);
    p.fc2_bias = random(&[4], rng).map(|v| 0.3 * v);
    let x = random(&[3, 6], rng);
    let (out, cache) = dense::transform_forward(&p, &x).unwrap();
    let cot = random(out.shape(), rng);
    let (dx, g) = dense::transform_backward(&p, &cache, &cot).unwrap();
    let case = Case {
        names: ["input", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].map(String::from).to_vec(),
        inputs: vec![x, p.fc1_weight.clone(), p.fc1_bias.clone(), p.fc2_weight.clone(), p.fc2_bias.clone()],
        analytic: vec![dx, g.fc1_weight, g.fc1_bias, g.fc2_weight, g.fc2_bias],
    };
    let f = move |v: &[Tensor<f64>]| {
        let q = dense::TransformParams {
            fc1_weight: v[1].clone(),
            fc1_bias: v[2].clone(),
            fc2_weight: v[3].clone(),
            fc2_bias: v[4].clone(),
        };
        weighted(&dense::transform_forward(&q, &v[0]).unwrap().0, &cot)
    };
    (case, Box::new(f))
}

fn hash_case(rng: &mut Rng) -> (Case, Scalar<'static>) {
    let mut p = dense::HashParams::<f64>::init(5, 4, rng);
    p.bias = random(&[4], rng);
    let x = random(&[3, 5], rng);
    let h = dense::hash_forward(&p, &x).unwrap();
    let cot = random(h.shape(), rng);
    let (dx, g) = dense::hash_backward(&p, &x, &h, &cot).unwrap();
    let case = Case {
        names: ["input", "weight", "bias"].map(String::from).to_vec(),
        inputs: vec![x, p.weight.clone(), p.bias.clone()],
        analytic: vec![dx, g.weight, g.bias],
    };
    let f = move |v: &[Tensor<f64>]| {
        let q = dense::HashParams { weight: v[1].clone(), bias: v[2].clone() };
        weighted(&dense::hash_forward(&q, &v[0]).unwrap(), &cot)
    };
    (case, Box::new(f))
}

fn predict_case(activation: Activation, rng: &mut Rng) -> (Case, Scalar<'static>) {
    let p = dense::PredictParams { weight: random(&[4, 3], rng), activation };
    let h = uniform(&[3, 4], 0.05, 0.95, rng);
    let (_, probs) = dense::predict_forward(&p, &h).unwrap();
    let cot = random(probs.shape(), rng);
    let (dh, g) = dense::predict_backward(&p, &h, &probs, &cot).unwrap();
    let case = Case {
        names: ["input", "weight"].map(String::from).to_vec(),
        inputs: vec![h, p.weight.clone()],
        analytic: vec![dh, g.weight],
    };
    let f = move |v: &[Tensor<f64>]| {
        let q = dense::PredictParams { weight: v[1].clone(), activation };
        weighted(&dense::predict_forward(&q, &v[0]).unwrap().1, &cot)
    };
    (case, Box::new(f))
}

/// Loss terms as functions of `(t_pred, h_hat, W_c)`.
fn loss_case(cfg: LossConfig, rng: &mut Rng) -> (Case, Scalar<'static>) {
    let (b, l, m) = (4, 5, 3);
    let labels: Vec<u32> = (0..b).map(|_| rng.below(m) as u32).collect();
    let t_true = loss::one_hot::<f64>(&labels, m).unwrap();
    let t_pred = uniform(&[b, m], 0.05, 0.95, rng);
    // Keep clear of the |h - 0.5| kink for p = 1.
    let h = Tensor::from_fn(&[b, l], |_| {
        let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        0.5 + side * (0.05 + 0.4 * rng.uniform())
    });
    let w = random(&[l, m], rng);
    let o = loss::total_objective(&t_true, &t_pred, Some(&h), &w, &cfg, Reduction::Sum).unwrap();
    let case = Case {
        names: ["t_pred", "h_hat", "W_c"].map(String::from).to_vec(),
        inputs: vec![t_pred, h, w],
        analytic: vec![o.d_t_pred, o.d_h_hat.unwrap(), o.d_w_c],
    };
    let f = move |v: &[Tensor<f64>]| {
        loss::total_objective(&t_true, &v[0], Some(&v[1]), &v[2], &cfg, Reduction::Sum).unwrap().value
    };
    (case, Box::new(f))
}

fn set_params(template: &ModelParams<f64>, tensors: &[Tensor<f64>]) -> ModelParams<f64> {
    let mut p = template.clone();
    for ((_, t), src) in p.named_mut().into_iter().zip(tensors) {
        *t = src.clone();
    }
    p
}

/// The full training objective of a small network on a 4-sample batch.
fn objective_case(variant: Variant, activation: Activation, rng: &mut Rng) -> (Case, Scalar<'static>) {
    let mut cfg = ModelConfig::new(variant, [8, 8, 2], 3);
    cfg.backbone = Some(BackboneConfig { in_channels: 2, conv1_channels: 3, conv2_channels: 4 });
    cfg.clusters = 2;
    cfg.bits = 5;
    cfg.d1 = Some(6);
    cfg.d2 = Some(5);
    cfg.activation = activation;
    let desc = random(&[20, 4], rng);
    let mut model = Model::<f64>::init(cfg, rng, Some(&desc)).unwrap();
    for (_, t) in model.params.named_mut() {
        if t.ndim() == 1 {
            *t = random(t.shape(), rng).map(|v| 0.1 * v);
        }
    }
    let x = random(&[4, 8, 8, 2], rng);
    let labels: Vec<u32> = (0..4).map(|_| rng.below(3) as u32).collect();
    let t_true = loss::one_hot::<f64>(&labels, 3).unwrap();
    let lc = LossConfig { e3_enabled: true, e3_weight: 0.5, lambda: 0.01, ..Default::default() };

    let eval = |m: &Model<f64>, x: &Tensor<f64>| {
        let (out, cache) = m.forward(x).unwrap();
        let o = loss::total_objective(
            &t_true,
            &out.probs,
            out.h_hat.as_ref(),
            &m.params.predict.weight,
            &lc,
            Reduction::Mean,
        )
        .unwrap();
        (o, cache)
    };
    let (o, cache) = eval(&model, &x);
    let (dx, mut g) = model.backward(&cache, &o.d_t_pred, o.d_h_hat.as_ref(), true, true).unwrap();
    g.predict.weight.add_assign(&o.d_w_c).unwrap();

    let mut names = vec!["input".to_string()];
    let mut inputs = vec![x];
    let mut analytic = vec![dx.unwrap()];
    for ((n, t), (_, gt)) in model.params.named().into_iter().zip(g.named()) {
        names.push(n.into());
        inputs.push(t.clone());
        analytic.push(gt.clone());
    }
    let f = move |v: &[Tensor<f64>]| {
        let m = Model { config: model.config.clone(), params: set_params(&model.params, &v[1..]) };
        let (out, _) = m.forward(&v[0]).unwrap();
        loss::total_objective(&t_true, &out.probs, out.h_hat.as_ref(), &m.params.predict.weight, &lc, Reduction::Mean)
            .unwrap()
            .value
    };
    (Case { names, inputs, analytic }, Box::new(f))
}

type CaseFn = fn(&mut Rng) -> (Case, Scalar<'static>);

fn layers() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", conv_case),
        ("maxpool2", pool_case),
        ("softmax", softmax_case),
        ("backbone", backbone_case),
        ("vlad.random", |r| vlad_case(VladKind::Random, r)),
        ("vlad.netvlad", |r| vlad_case(VladKind::Net, r)),
        ("transform", transform_case),
        ("hash", hash_case),
        ("predict.softmax", |r| predict_case(Activation::Softmax, r)),
        ("predict.sigmoid", |r| predict_case(Activation::Sigmoid, r)),
        ("loss.e1", |r| loss_case(LossConfig { beta: 0.0, lambda: 0.3, ..Default::default() }, r)),
        ("loss.e2.p2", |r| loss_case(LossConfig { lambda: 0.0, ..Default::default() }, r)),
        ("loss.e2.p1", |r| loss_case(LossConfig { lambda: 0.0, p: 1, ..Default::default() }, r)),
        (
            "loss.e3",
            |r| loss_case(LossConfig { beta: 0.0, lambda: 0.0, e3_enabled: true, e3_weight: 0.7, ..Default::default() }, r),
        ),
        ("loss.total", |r| loss_case(LossConfig { beta: 0.6, lambda: 0.2, e3_enabled: true, ..Default::default() }, r)),
        ("objective.random_vlad", |r| objective_case(Variant::RandomVlad, Activation::Softmax, r)),
        ("objective.random_vlad.sigmoid", |r| objective_case(Variant::RandomVlad, Activation::Sigmoid, r)),
        ("objective.netvlad_ssdh", |r| objective_case(Variant::NetVladSsdh, Activation::Softmax, r)),
        ("objective.ssdh_only", |r| objective_case(Variant::SsdhOnly, Activation::Softmax, r)),
        ("objective.netvlad", |r| objective_case(Variant::NetVlad, Activation::Softmax, r)),
        ("objective.backbone_only", |r| objective_case(Variant::BackboneOnly, Activation::Softmax, r)),
    ]
}

/// Names of all checked layers, in report order.
pub fn layer_names() -> Vec<&'static str> {
    layers().into_iter().map(|(n, _)| n).collect()
}

/// Runs the suite, optionally restricted to layers whose name starts with
/// `only`.
pub fn run(cfg: &GradCheckConfig, only: Option<&str>) -> Result<GradCheckReport> {
    let mut out = Vec::new();
    for (layer, make) in layers() {
        if only.is_some_and(|p| !layer.starts_with(p)) {
            continue;
        }
        let mut worst: Vec<GroupResult> = Vec::new();
        for s in 0..cfg.seeds {
            let mut rng = Rng::seed_from_u64(cfg.base_seed.wrapping_add(s));
            let (case, f) = make(&mut rng);
            for (i, (group, e, kinks, n)) in compare(case, f, cfg).into_iter().enumerate() {
                match worst.get_mut(i) {
                    Some(w) => {
                        w.max_rel_error = w.max_rel_error.max(e);
                        w.kinks += kinks;
                        w.coordinates += n;
                    }
                    None => worst.push(GroupResult { group, max_rel_error: e, kinks, coordinates: n }),
                }
            }
        }
        out.push(LayerResult { layer, groups: worst });
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, seeds: cfg.seeds, layers: out })
}
