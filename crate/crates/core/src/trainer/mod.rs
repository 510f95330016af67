//! Supervised training: AdamW with decoupled weight decay, per-step cosine
//! annealing, cross-entropy loss, and the binary checkpoint format.

mod checkpoint;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::evalsuite::argmax_rows;
use crate::format::sig9;
use crate::tensorkit::{Tape, Tensor};
use crate::vit::ViTModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            epochs: 10,
            batch_size: 64,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            lr_min: 0.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config(
                "lr_min and weight_decay must be non-negative, eps positive".into(),
            ));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Argument(format!("step {step} outside 0..={total_steps}")));
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW update in place. Arithmetic is f64; storage stays f32.
pub fn adamw_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let aligned = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.len() == state.v.len()
        && params
            .iter()
            .zip(grads)
            .zip(state.m.iter().zip(&state.v))
            .all(|((p, g), (m, v))| p.shape() == g.shape() && p.shape() == m.shape() && p.shape() == v.shape());
    if !aligned {
        return Err(Error::Contract(
            "parameters, gradients and moments are not aligned".into(),
        ));
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let n = params[i].numel();
        let (mut p, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let moments = state.m[i].data().iter().zip(state.v[i].data());
        for ((&g, (&m0, &v0)), &theta) in grads[i].data().iter().zip(moments).zip(params[i].data()) {
            let (gj, theta) = (g as f64, theta as f64);
            let mj = b1 * m0 as f64 + (1.0 - b1) * gj;
            let vj = b2 * v0 as f64 + (1.0 - b2) * gj * gj;
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + cfg.weight_decay * theta;
            p.push((theta - lr * update) as f32);
            m.push(mj as f32);
            v.push(vj as f32);
        }
        let shape = params[i].shape().to_vec();
        params[i] = Tensor::new(&shape, p)?;
        state.m[i] = Tensor::new(&shape, m)?;
        state.v[i] = Tensor::new(&shape, v)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stack images `[C, S, S]` into one `[N, C, S, S]` batch.
pub fn stack_batch(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "batch mixes {:?} and {:?}",
                first.shape(),
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}

/// Train `model` in place and return the per-epoch history.
///
/// `on_epoch` sees each record as soon as the epoch ends.
pub fn train(
    model: &mut ViTModel,
    data: &LabeledSet,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = stack_batch(&chunk.iter().map(|&i| &data.images[i]).collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(batch);
            let logits = model.forward_on_tape(&mut tape, &vars, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)?;
            let mut params = model.params().to_vec();
            adamw_step(&mut params, &grads, state, lr, cfg)?;
            if let Some(bad) = params.iter().position(|p| !p.all_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {} became non-finite at step {step}",
                    model.names()[bad]
                )));
            }
            model.set_params(params)?;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// `epoch,mean_loss,train_acc` with nine significant digits.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,train_acc\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, sig9(r.mean_loss), sig9(r.train_acc)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
