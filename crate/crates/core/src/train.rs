//! Optimization loop, learning-rate schedule, early stopping and metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::sketch_data::SketchTensor;
use crate::tensor::{rng_for, Mode, Precision, Real, Rng, Tape, Tensor};

const SHUFFLE_STREAM: u64 = 0x5487;
const DROPOUT_STREAM: u64 = 0xd809;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-5,
            decay_factor: 0.7,
            decay_every: 10,
            max_epochs: 100,
            patience: 10,
            batch_size: 128,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("lr_decay", "must be positive");
        }
        if self.decay_every == 0 {
            return bad("lr_decay_every", "must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be >= 2 (batch norm needs two samples)");
        }
        Ok(())
    }
}

/// `initial_lr * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.decay_every) as i32;
    cfg.initial_lr * cfg.decay_factor.powi(steps)
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one, eps, lr) = (T::one(), T::lit(state.eps), T::lit(lr));
    let c1 = one - T::lit(state.beta1.powi(t));
    let c2 = one - T::lit(state.beta2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Fraction of rows whose label is among the `k` largest logits, for each
/// `k` in `ks`. Equal logits rank the lower class index first.
pub fn top_k_accuracy(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::invalid("logits do not match labels"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("top-k accuracy of an empty set"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let rank = label_rank(row, label)?;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / labels.len() as f64)
        .collect())
}

/// Zero-based rank of `label` in `row` (ties to the lower index).
fn label_rank(row: &[f64], label: usize) -> Result<usize> {
    let target = *row.get(label).ok_or(Error::IndexOutOfRange {
        index: label,
        size: row.len(),
    })?;
    Ok(row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > target || (x == target && j < label))
        .count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    /// Samples whose largest logit is shared by several classes.
    pub tied_top: usize,
}

/// Eval-mode top-1/5/10 accuracy over a dataset.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[SketchTensor],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let classes = model.config().num_classes;
    let mut logits = Vec::with_capacity(samples.len() * classes);
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SketchTensor> = chunk.iter().collect();
        let batch = Batch::new(model.config(), &refs)?;
        logits.extend(model.predict(&batch)?.to_f64_vec());
        labels.extend_from_slice(&batch.labels);
    }
    let acc = top_k_accuracy(&logits, classes, &labels, &[1, 5, 10])?;
    let tied_top = logits
        .chunks(classes)
        .filter(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().filter(|&&x| x == max).count() > 1
        })
        .count();
    Ok(EvalReport {
        samples: samples.len(),
        acc1: acc[0],
        acc5: acc[1],
        acc10: acc[2],
        tied_top,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc1: f64,
    pub val_acc5: f64,
    pub val_acc10: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_acc1,val_acc5,val_acc10,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.9},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_acc1,
            self.val_acc5,
            self.val_acc10,
            self.seconds
        )
    }

    /// Same record with the wall-clock field cleared.
    pub fn without_time(&self) -> Self {
        EpochMetrics {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

/// Early-stopping bookkeeping carried across epochs and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Next epoch to run.
    pub epoch: usize,
    /// Meaningful once `best_epoch` is set.
    pub best_val_acc1: f64,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub history: Vec<EpochMetrics>,
}

impl Progress {
    /// Appends an epoch; returns whether its validation acc@1 is a new best.
    pub fn record(&mut self, metrics: EpochMetrics) -> bool {
        let improved = self.best_epoch.is_none() || metrics.val_acc1 > self.best_val_acc1;
        if improved {
            self.best_val_acc1 = metrics.val_acc1;
            self.best_epoch = Some(metrics.epoch);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        self.epoch = metrics.epoch + 1;
        self.history.push(metrics);
        improved
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.max_epochs || self.stale_epochs >= cfg.patience
    }
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            epoch: 0,
            best_val_acc1: 0.0,
            best_epoch: None,
            stale_epochs: 0,
            history: Vec::new(),
        }
    }
}

/// Training state: model, optimizer, dropout stream and progress.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub rng: Rng,
    pub progress: Progress,
}

/// Splits a shuffled index list into batches; a trailing single sample joins
/// the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(
        seed.wrapping_add(epoch as u64),
        SHUFFLE_STREAM,
    ));
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config {
                key: "precision".into(),
                msg: format!(
                    "trainer built for {}, config asks for {}",
                    T::PRECISION,
                    config.precision
                ),
            });
        }
        let adam = AdamState::new(model.params());
        let rng = rng_for(config.seed, DROPOUT_STREAM);
        Ok(Trainer {
            model,
            adam,
            config,
            rng,
            progress: Progress::default(),
        })
    }

    pub fn finished(&self) -> bool {
        self.progress.should_stop(&self.config)
    }

    /// Mean training loss of one pass over `train`.
    pub fn train_epoch(&mut self, train: &[SketchTensor]) -> Result<f64> {
        if train.len() < 2 {
            return Err(Error::invalid("training needs at least two samples"));
        }
        let epoch = self.progress.epoch;
        let lr = lr_at_epoch(&self.config, epoch);
        let mut total = 0.0;
        for (bi, idx) in epoch_batches(train.len(), self.config.batch_size, self.config.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let refs: Vec<&SketchTensor> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(self.model.config(), &refs)?;
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let act = self
                .model
                .forward(&mut tape, &vars, &batch, Mode::Train, &mut self.rng)?;
            let loss_var = tape.cross_entropy_logits(act.logits, &batch.labels)?;
            let loss = tape.value(loss_var).data()[0].to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            let grads = tape.backward(loss_var)?;
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .zip(self.model.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            adam_step(self.model.params_mut(), &grads, &mut self.adam, lr)?;
            total += loss * idx.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Trains and validates one epoch. Returns the metrics and whether the
    /// validation acc@1 improved on the best so far.
    pub fn run_epoch(
        &mut self,
        train: &[SketchTensor],
        val: &[SketchTensor],
    ) -> Result<(EpochMetrics, bool)> {
        let start = Instant::now();
        let epoch = self.progress.epoch;
        let train_loss = self.train_epoch(train)?;
        let report = evaluate(&self.model, val, self.config.batch_size)?;
        let metrics = EpochMetrics {
            epoch,
            lr: lr_at_epoch(&self.config, epoch),
            train_loss,
            val_acc1: report.acc1,
            val_acc5: report.acc5,
            val_acc10: report.acc10,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = self.progress.record(metrics.clone());
        Ok((metrics, improved))
    }

    /// Runs epochs until early stopping or `max_epochs`. `on_epoch` sees the
    /// trainer after every epoch, e.g. to write checkpoints.
    pub fn fit<F>(
        &mut self,
        train: &[SketchTensor],
        val: &[SketchTensor],
        mut on_epoch: F,
    ) -> Result<Option<Model<T>>>
    where
        F: FnMut(&Trainer<T>, &EpochMetrics, bool) -> Result<()>,
    {
        if val.is_empty() {
            return Err(Error::invalid("training needs a non-empty validation set"));
        }
        let mut best = None;
        while !self.finished() {
            let (metrics, improved) = self.run_epoch(train, val)?;
            if improved {
                best = Some(self.model.clone());
            }
            on_epoch(self, &metrics, improved)?;
        }
        Ok(best)
    }
}
