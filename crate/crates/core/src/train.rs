//! Point-wise SGD training with momentum.
//!
//! Each step minimizes the batch mean of the per-sample objective plus the
//! `W_c` penalty (see [`Reduction::Mean`]). Batches are drawn from a fresh
//! seeded shuffle every epoch; all reductions run sequentially in sample
//! order, so a run is a pure function of its config and seed.

use std::io::Write;

use crate::backbone;
use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::loss::{self, LossConfig, Reduction};
use crate::real::Real;
use crate::rng::Rng;
use crate::rvssdh::{vlad, Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Batch size used for forward-only passes (evaluation, embedding).
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// The learning rate is multiplied by 0.1 at the start of each listed
    /// (0-based) epoch.
    pub lr_decay: Vec<usize>,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Return the initialized model without taking any step.
    pub dry_run: bool,
    /// Images whose backbone descriptors seed NetVLAD k-means.
    pub kmeans_samples: usize,
    /// Rescale the first transform layer and the hash layer to unit
    /// pre-activation scale on a sample batch before training.
    pub calibrate_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: vec![40],
            seed: 0,
            freeze_backbone: false,
            dry_run: false,
            kmeans_samples: 500,
            calibrate_init: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.kmeans_samples < 1 {
            return bad("kmeans_samples must be >= 1".into());
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }
}

/// `v <- momentum*v - lr*g; theta <- theta + v`, tensor by tensor.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let g = grads.named();
    let mut v = velocity.named_mut();
    let mut p = params.named_mut();
    if g.len() != p.len() || v.len() != p.len() {
        return Err(Error::shape("parameter, gradient and velocity sets differ in layout"));
    }
    let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((pn, pt), ((gn, gt), (vn, vt))) in p.iter_mut().zip(g.iter().zip(v.iter_mut())) {
        if pn != gn || pn != vn || pt.shape() != gt.shape() || pt.shape() != vt.shape() {
            return Err(Error::shape(format!("cannot update {pn} with gradient {gn} and velocity {vn}")));
        }
        for ((x, &dx), vel) in pt.data_mut().iter_mut().zip(gt.data()).zip(vt.data_mut()) {
            *vel = mu * *vel - lr * dx;
            *x += *vel;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the per-batch objective over the epoch.
    pub objective: f64,
    pub e1: f64,
    pub e2: f64,
    /// `None` without a validation set.
    pub val_top1: Option<f64>,
    pub steps: u64,
    pub samples: u64,
}

impl EpochLog {
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        let val = self.val_top1.map_or_else(|| "NA".to_string(), |v| v.to_string());
        writeln!(w, "{}\t{}\t{}\t{}\t{}", self.epoch, self.objective, self.e1, self.e2, val)?;
        Ok(())
    }
}

/// Mean objective terms over a whole dataset at fixed parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSummary {
    pub objective: f64,
    pub e1: f64,
    pub e2: f64,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub velocity: ModelParams<T>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    rng: Rng,
    epoch: usize,
}

fn check_dataset(model: &ModelConfig, ds: &LabeledDataset, what: &str) -> Result<()> {
    if ds.shape() != model.input_shape {
        return Err(Error::shape(format!(
            "{what} samples are {:?}, model expects {:?}",
            ds.shape(),
            model.input_shape
        )));
    }
    if let Some((i, &l)) = ds.labels().iter().enumerate().find(|(_, &l)| l as usize >= model.classes) {
        return Err(Error::invalid(format!(
            "{what} sample {i} has label {l}, model has {} classes",
            model.classes
        )));
    }
    Ok(())
}

/// L2-normalized backbone descriptors of `count` randomly chosen samples,
/// as an `(count*h*w) x D` matrix.
fn sample_descriptors<T: Real>(
    model: &ModelConfig,
    backbone_params: Option<&backbone::BackboneParams<T>>,
    ds: &LabeledDataset,
    count: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if ds.is_empty() {
        return Err(Error::invalid("NetVLAD initialization needs a non-empty training set"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count.min(ds.len()));
    let d = model.feature_shape()[2];
    let mut rows = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = ds.batch::<T>(chunk);
        let f = match backbone_params {
            Some(bp) => backbone::forward(bp, &x)?.0,
            None => x,
        };
        rows.extend_from_slice(f.data());
    }
    let n = rows.len() / d;
    let mut t = Tensor::new(&[n, d], rows)?;
    for i in 0..n {
        vlad::l2_normalize(t.row_mut(i));
    }
    Ok(t)
}

impl<T: Real> Trainer<T> {
    /// Draws a fresh model. NetVLAD anchors come from k-means over
    /// descriptors of `config.kmeans_samples` training samples.
    pub fn new(model: ModelConfig, train: &LabeledDataset, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        model.validate()?;
        check_dataset(&model, train, "training")?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let mut desc_rng = rng.fork();
        let mut m = Model::init_with(model.clone(), &mut rng, |bp| {
            sample_descriptors(&model, bp, train, config.kmeans_samples, &mut desc_rng)
        })?;
        if config.calibrate_init && !train.is_empty() {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            desc_rng.shuffle(&mut idx);
            idx.truncate(EVAL_BATCH);
            m.calibrate(&train.batch::<T>(&idx))?;
        }
        let velocity = m.params.zeros_like();
        Ok(Trainer { model: m, velocity, config, loss, rng, epoch: 0 })
    }

    /// Resumes from a checkpoint; the next epoch is `ck.epoch + 1`.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let rng = Rng::from_state(ck.rng_state).ok_or_else(|| Error::invalid("checkpoint holds an all-zero rng state"))?;
        let params: ModelParams<T> = ck.params.cast();
        let velocity = ck.velocity.as_ref().map_or_else(|| params.zeros_like(), |v| v.cast());
        Ok(Trainer {
            model: Model { config: ck.model.clone(), params },
            velocity,
            config,
            loss,
            rng,
            epoch: ck.epoch as usize,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            params: self.model.params.cast(),
            velocity: Some(self.velocity.cast()),
            epoch: self.epoch as u32,
            rng_state: self.rng.state(),
            config_text: config_text.to_string(),
        }
    }

    /// One pass over the shuffled training set, then validation Top-1.
    pub fn run_epoch(&mut self, train: &LabeledDataset, val: Option<&LabeledDataset>) -> Result<EpochLog> {
        check_dataset(&self.model.config, train, "training")?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let lr = self.config.learning_rate_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let (mut obj_sum, mut e1_sum, mut e2_sum) = (0.0, 0.0, 0.0);
        let (mut steps, mut samples) = (0u64, 0u64);
        for batch in order.chunks(self.config.batch_size) {
            let o = self.step(train, batch, lr)?;
            let b = batch.len() as f64;
            obj_sum += o.objective * b;
            e1_sum += o.e1 * b;
            e2_sum += o.e2 * b;
            steps += 1;
            samples += batch.len() as u64;
        }
        self.epoch += 1;
        let n = samples as f64;
        let val_top1 = match val {
            Some(v) if !v.is_empty() => Some(top1_error(&self.model, v)?),
            _ => None,
        };
        Ok(EpochLog {
            epoch: self.epoch,
            objective: obj_sum / n,
            e1: e1_sum / n,
            e2: e2_sum / n,
            val_top1,
            steps,
            samples,
        })
    }

    /// One SGD step on the given samples; returns the pre-step objective.
    pub fn step(&mut self, ds: &LabeledDataset, batch: &[usize], lr: f64) -> Result<ObjectiveSummary> {
        let x = ds.batch::<T>(batch);
        let labels = ds.batch_labels(batch);
        let (out, cache) = self.model.forward(&x)?;
        let t_true = loss::one_hot::<T>(&labels, self.model.config.classes)?;
        let obj = loss::total_objective(
            &t_true,
            &out.probs,
            out.h_hat.as_ref(),
            &self.model.params.predict.weight,
            &self.loss,
            Reduction::Mean,
        )?;
        if !obj.value.is_finite() {
            return Err(Error::Numeric(format!("objective became {} at epoch {}", obj.value, self.epoch + 1)));
        }
        let train_backbone = !self.config.freeze_backbone;
        let (_, mut grads) = self.model.backward(&cache, &obj.d_t_pred, obj.d_h_hat.as_ref(), train_backbone, false)?;
        grads.predict.weight.add_assign(&obj.d_w_c)?;
        sgd_step(&mut self.model.params, &grads, &mut self.velocity, lr, self.config.momentum)?;
        if !self.model.params.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at epoch {}", self.epoch + 1)));
        }
        Ok(ObjectiveSummary { objective: obj.value, e1: obj.e1, e2: obj.e2 })
    }
}

/// Objective terms averaged over `ds` at the current parameters, using
/// the training batch size for the `W_c`-penalty bookkeeping.
pub fn dataset_objective<T: Real>(model: &Model<T>, ds: &LabeledDataset, loss: &LossConfig) -> Result<ObjectiveSummary> {
    let mut sums = (0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (out, _) = model.forward(&ds.batch::<T>(chunk))?;
        let t_true = loss::one_hot::<T>(&ds.batch_labels(chunk), model.config.classes)?;
        let o = loss::total_objective(
            &t_true,
            &out.probs,
            out.h_hat.as_ref(),
            &model.params.predict.weight,
            loss,
            Reduction::Mean,
        )?;
        let b = chunk.len() as f64;
        sums.0 += o.value * b;
        sums.1 += o.e1 * b;
        sums.2 += o.e2 * b;
    }
    let n = ds.len().max(1) as f64;
    Ok(ObjectiveSummary { objective: sums.0 / n, e1: sums.1 / n, e2: sums.2 / n })
}

/// Prediction scores (`B x M` logits) for a whole dataset.
pub fn predict_scores<T: Real>(model: &Model<T>, ds: &LabeledDataset) -> Result<Tensor<T>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::with_capacity(ds.len() * model.config.classes);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (out, _) = model.forward(&ds.batch::<T>(chunk))?;
        data.extend_from_slice(out.logits.data());
    }
    Tensor::new(&[ds.len(), model.config.classes], data)
}

/// Top-1 error from the unbinarized network.
pub fn top1_error<T: Real>(model: &Model<T>, ds: &LabeledDataset) -> Result<f64> {
    eval::top1_error(&predict_scores(model, ds)?, ds.labels())
}

/// Retrieval embeddings (`N x E`) for a whole dataset.
pub fn embed_dataset<T: Real>(model: &Model<T>, ds: &LabeledDataset) -> Result<Tensor<T>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let e = model.config.embedding_len();
    let mut data = Vec::with_capacity(ds.len() * e);
    for chunk in idx.chunks(EVAL_BATCH) {
        data.extend_from_slice(model.embed(&ds.batch::<T>(chunk))?.data());
    }
    Tensor::new(&[ds.len(), e], data)
}

/// Everything a finished run produces.
pub struct TrainOutcome<T> {
    pub trainer: Trainer<T>,
    pub log: Vec<EpochLog>,
}

/// Trains for `config.epochs` epochs (none with `dry_run`), calling
/// `on_epoch` after each.
pub fn train<T: Real>(
    model: ModelConfig,
    train_set: &LabeledDataset,
    val: Option<&LabeledDataset>,
    config: TrainConfig,
    loss: LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(model, train_set, config, loss)?;
    let mut log = Vec::new();
    if !trainer.config.dry_run {
        while trainer.epoch < trainer.config.epochs {
            let row = trainer.run_epoch(train_set, val)?;
            on_epoch(&row);
            log.push(row);
        }
    }
    Ok(TrainOutcome { trainer, log })
}
