//! Plain supervised training and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::config::KvFile;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::network::{Network, ParamId, ParamVars};
use crate::tensor::Tensor;

/// Losses above this (or non-finite) abort a run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(()),
        }
    }
}

impl LrSchedule {
    /// Learning rate at `step` of `total`.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => {
                0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reads the `train.*` keys.
    pub fn from_kv(kv: &KvFile, seed: u64) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epochs: kv.get_or("train.epochs", d.epochs)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            lr: kv.get_or("train.lr", d.lr)?,
            momentum: kv.get_or("train.momentum", d.momentum)?,
            weight_decay: kv.get_or("train.weight_decay", d.weight_decay)?,
            schedule: kv.get_or("train.schedule", d.schedule)?,
            seed,
        })
    }
}

/// Heavy-ball momentum buffers keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub velocity: BTreeMap<ParamId, Tensor>,
}

impl Momentum {
    /// `v ← μv + g + λw` (decay on weights only), `w ← w − lr·v`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        vars: &ParamVars,
        ids: &[ParamId],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for &id in ids {
            let g = grads.get(vars.var(id));
            let decay = match id {
                ParamId::ConvWeight(_) | ParamId::LinearWeight => weight_decay,
                _ => 0.0,
            };
            let w = net.param_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(w.shape()));
            if v.shape() != w.shape() {
                *v = Tensor::zeros(w.shape());
            }
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = momentum * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

pub(crate) fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc";

/// Metrics rows as CSV with the fixed [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!("{METRICS_HEADER}\n{}", String::from_utf8(body).expect("csv is utf-8")))
}

/// Mean cross-entropy and accuracy over a whole dataset.
pub fn evaluate(net: &Network, data: &Dataset, norm: &Normalization, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk, norm);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let params = net.record_params(&mut g, |_| false);
        let trace = net.forward(&mut g, xv, &params, &BTreeMap::new())?;
        let ce = g.softmax_cross_entropy(trace.logits, &y)?;
        loss += g.value(ce).item() * chunk.len() as f64;
        correct += count_correct(g.value(trace.logits), &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

pub fn accuracy(net: &Network, data: &Dataset, norm: &Normalization) -> Result<f64> {
    Ok(evaluate(net, data, norm, 64)?.1)
}

/// Trains every parameter with cross-entropy for `cfg.epochs` epochs,
/// starting at `start_epoch` (so a resumed run sees the same batch order).
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    norm: &Normalization,
    cfg: &TrainConfig,
    opt: &mut Momentum,
    start_epoch: usize,
) -> Result<Vec<EpochMetrics>> {
    let ids = net.param_ids();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size.max(1));
    let total = cfg.epochs * per_epoch;
    let mut rows = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut lr = cfg.lr;
        for (b, idx) in train_set
            .epoch_batches(cfg.batch_size, cfg.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let step = epoch * per_epoch + b;
            lr = cfg.schedule.at(cfg.lr, step, total);
            let (x, y) = train_set.batch(idx, norm);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let params = net.record_params(&mut g, |_| true);
            let trace = net.forward(&mut g, xv, &params, &BTreeMap::new())?;
            let ce = g.softmax_cross_entropy(trace.logits, &y)?;
            let loss = g.value(ce).item();
            check_loss(step, loss)?;
            loss_sum += loss * idx.len() as f64;
            correct += count_correct(g.value(trace.logits), &y);
            let grads = g.backward(ce)?;
            opt.step(net, &grads, &params, &ids, lr, cfg.momentum, cfg.weight_decay);
        }
        let (test_loss, test_acc) = match test_set {
            Some(t) => evaluate(net, t, norm, 64)?,
            None => (f64::NAN, f64::NAN),
        };
        rows.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_loss,
            test_acc,
        });
    }
    Ok(rows)
}
