//! Quantization-aware training.
//!
//! Shadow weights stay in float and are updated by SGD with momentum; every
//! forward projects each weight row with its assigned quantizer and each
//! layer input with the 4-bit activation quantizer. Gradients pass the
//! projections straight through inside the clip range.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::assign::{self, AssignmentReport, RatioConfig, RowAssignment, DEFAULT_REASSIGN_INTERVAL};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, QuantForward};
use crate::quant::{quantize_activation_value, ACT_BITS};
use crate::tensor::{Graph, Tensor, Var};

pub const MOMENTUM: f64 = 0.9;
/// Activation clip used when a layer sees no positive calibration input.
pub const DEFAULT_ACT_CLIP: f64 = 6.0;
const MIN_ACT_CLIP: f64 = 1e-3;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// ×0.1 at 50% and again at 75% of the epochs.
    Step,
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Step => "step",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(LrSchedule::Step),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown schedule `{s}` (step|cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub reassign_interval: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            reassign_interval: DEFAULT_REASSIGN_INTERVAL,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Step => {
                let mut lr = self.learning_rate;
                if 2 * epoch >= self.epochs {
                    lr *= 0.1;
                }
                if 4 * epoch >= 3 * self.epochs {
                    lr *= 0.1;
                }
                lr
            }
        }
    }
}

/// A model plus its quantization state. `assignment == None` is a float
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: Model,
    pub assignment: Option<RowAssignment>,
    pub act_clips: Vec<f64>,
    pub ratio: Option<RatioConfig>,
    /// Epochs trained so far.
    pub epoch: usize,
    pub seed: u64,
}

impl QuantizedModel {
    pub fn float(model: Model, seed: u64) -> Self {
        Self {
            model,
            assignment: None,
            act_clips: vec![],
            ratio: None,
            epoch: 0,
            seed,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.assignment.is_some()
    }

    fn quant(&self) -> Option<(&RowAssignment, &[f64])> {
        self.assignment.as_ref().map(|a| (a, &self.act_clips[..]))
    }

    /// Projected (dequantized) weights of a layer, as used by the forward.
    pub fn projected_weight(&self, layer: usize) -> Result<Tensor> {
        let w = &self.model.layers[layer].weight;
        let Some(a) = &self.assignment else {
            return Ok(w.clone());
        };
        let la = a.layers.get(layer).ok_or(Error::MissingAssignment(layer))?;
        let (rows, len) = w.rows();
        let mut out = Vec::with_capacity(w.len());
        for r in 0..rows {
            out.extend(w.data()[r * len..(r + 1) * len].iter().map(|&v| la.specs[r].quantize(v, la.alphas[r])));
        }
        Tensor::new(w.shape().to_vec(), out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.model.logits(x, self.quant())
    }

    /// Logits for a whole dataset, evaluated in fixed-size batches.
    pub fn predict(&self, ds: &Dataset) -> Result<Tensor> {
        let mut out = Vec::with_capacity(ds.len() * self.model.classes);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, _) = ds.batch(chunk)?;
            out.extend_from_slice(self.logits(&x)?.data());
        }
        Tensor::new(vec![ds.len().max(1), self.model.classes], out).or_else(|_| {
            Err(Error::InvalidArgument("cannot predict on an empty dataset".into()))
        })
    }
}

/// Fraction of rows whose label is among the `k` largest logits.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let above = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
            .count();
        if above < k {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn accuracy(qm: &QuantizedModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(top_k_accuracy(&qm.predict(ds)?, &ds.labels, 1))
}

/// Activation clip minimizing the 4-bit quantization MSE of `values`
/// over `max·i/32`, `i = 1..=32`.
pub fn calibrate_clip(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 || !max.is_finite() {
        return DEFAULT_ACT_CLIP;
    }
    let mut best = (f64::INFINITY, max);
    for i in (1..=32).rev() {
        let clip = max * i as f64 / 32.0;
        let err: f64 = values
            .iter()
            .map(|&v| {
                let d = quantize_activation_value(v, ACT_BITS, clip) - v.max(0.0);
                d * d
            })
            .sum();
        if err < best.0 {
            best = (err, clip);
        }
    }
    best.1.max(MIN_ACT_CLIP)
}

/// Assigns rows, calibrates scales and activation clips on the fixed
/// calibration batch. Training state (epoch, seed) carries over.
pub fn prepare(
    base: &QuantizedModel,
    ratio: RatioConfig,
    train: &Dataset,
    seed: u64,
) -> Result<(QuantizedModel, AssignmentReport)> {
    let calib = train.calibration_indices(seed);
    if calib.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let (cx, cy) = train.batch(&calib)?;
    let report = assign::assign_rows(&base.model, &ratio, &cx, &cy, seed)?;
    let inputs = base.model.layer_inputs(&cx)?;
    let act_clips = inputs.iter().map(|t| calibrate_clip(t.data())).collect();
    let qm = QuantizedModel {
        model: base.model.clone(),
        assignment: Some(report.assignment.clone()),
        act_clips,
        ratio: Some(ratio),
        epoch: base.epoch,
        seed,
    };
    Ok((qm, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "train_acc", "val_acc", "lr"])?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
            m.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            m.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Log sink for per-epoch progress.
pub trait Progress {
    fn epoch(&mut self, _m: &EpochMetrics) {}
    fn reassigned(&mut self, _epoch: usize, _report: &AssignmentReport) {}
}

impl Progress for () {}

impl<W: Write> Progress for Option<W> {
    fn epoch(&mut self, m: &EpochMetrics) {
        if let Some(w) = self {
            let _ = writeln!(
                w,
                "epoch {:>3}  loss {:.4}  train {:.4}  val {}  lr {:.5}",
                m.epoch,
                m.train_loss,
                m.train_acc,
                m.val_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                m.lr
            );
        }
    }
}

struct StepOutput {
    loss: f64,
    correct: usize,
}

fn train_step(
    qm: &mut QuantizedModel,
    velocity: &mut [Vec<f64>],
    x: Tensor,
    y: &[usize],
    lr: f64,
    wd: f64,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let params = qm.model.params(&mut g, true)?;
    let clips: Vec<Var> = qm
        .act_clips
        .iter()
        .map(|&c| g.param(Tensor::scalar(c)))
        .collect::<Result<_>>()?;
    let xv = g.constant(x)?;
    let qf = qm.assignment.as_ref().map(|a| QuantForward {
        assignment: a,
        clips: &clips,
    });
    let logits = qm.model.forward(&mut g, xv, &params, qf)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let correct = g
        .value(logits)
        .argmax_rows()
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count();
    let loss_value = g.value(loss).item()?;
    let grads = g.gradients(loss)?;

    let mut slot = 0;
    let mut update = |value: &mut [f64], grad: Option<&Tensor>, decay: f64| {
        let v = &mut velocity[slot];
        slot += 1;
        let Some(grad) = grad else { return };
        for ((w, m), gi) in value.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *m = MOMENTUM * *m + gi + decay * *w;
            *w -= lr * *m;
        }
    };
    for (layer, p) in qm.model.layers.iter_mut().zip(&params) {
        update(layer.weight.data_mut(), grads.get(p.weight), wd);
        update(layer.bias.data_mut(), grads.get(p.bias), 0.0);
    }
    if qm.assignment.is_some() {
        for (c, &cv) in qm.act_clips.iter_mut().zip(&clips) {
            let mut v = [*c];
            update(&mut v, grads.get(cv), 0.0);
            *c = v[0].max(MIN_ACT_CLIP);
        }
    }
    Ok(StepOutput {
        loss: loss_value,
        correct,
    })
}

/// Trains for `config.epochs` more epochs. Quantized models reassign rows
/// at positive multiples of the reassignment interval (counted in total
/// epochs, skipping the first epoch of the call) using the calibration
/// batch of `train`.
pub fn train(
    mut qm: QuantizedModel,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    progress: &mut dyn Progress,
) -> Result<(QuantizedModel, Vec<EpochMetrics>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train.shape != qm.model.input_shape || train.class_count > qm.model.classes {
        return Err(Error::Shape(format!(
            "dataset ({:?}, {} classes) does not fit model ({:?}, {} classes)",
            train.shape, train.class_count, qm.model.input_shape, qm.model.classes
        )));
    }
    let calib = train.calibration_indices(config.seed);
    let (cx, cy) = train.batch(&calib)?;
    let mut velocity: Vec<Vec<f64>> = Vec::new();
    for l in &qm.model.layers {
        velocity.push(vec![0.0; l.weight.len()]);
        velocity.push(vec![0.0; l.bias.len()]);
    }
    velocity.extend(qm.act_clips.iter().map(|_| vec![0.0]));
    let mut log = Vec::with_capacity(config.epochs);
    for local in 0..config.epochs {
        let epoch = qm.epoch;
        // The assignment passed in is fresh, so the first epoch of a call
        // never reassigns.
        if let (true, Some(ratio), Some(_)) = (local > 0, qm.ratio, &qm.assignment) {
            if let Some(report) = assign::reassign(
                &qm.model,
                &ratio,
                &cx,
                &cy,
                epoch,
                config.reassign_interval,
                config.seed,
            )? {
                progress.reassigned(epoch, &report);
                qm.assignment = Some(report.assignment);
            }
        }
        let lr = config.lr_at(local);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in data::epoch_batches(train.len(), config.batch_size, config.seed, epoch) {
            let (x, y) = train.batch(&batch)?;
            let out = train_step(&mut qm, &mut velocity, x, &y, lr, config.weight_decay).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch: epoch + 1,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }
        qm.epoch += 1;
        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&qm, v)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch: qm.epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            lr,
        };
        progress.epoch(&m);
        log.push(m);
    }
    Ok((qm, log))
}
