//! Gaussian-noise-augmented training and evaluation.
//!
//! Every batch gets fresh noise from a stream keyed by `(seed, epoch, batch)`
//! and the shuffle order by `(seed, epoch)`, so a run is a pure function of
//! its seed, configuration and data.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::peft::{self, PeftConfig};
use crate::rng::{self, Domain};
use crate::tensor::gradcheck::Objective;
use crate::tensor::{Element, Graph, Tensor};
use crate::vit::{argmax_rows, VitModel};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// σ is forced to 0; used to manufacture the pretrained backbone.
    CleanPretrain,
    NoiseFinetune,
    JointAdapt,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean_pretrain" => Ok(TrainMode::CleanPretrain),
            "noise_finetune" => Ok(TrainMode::NoiseFinetune),
            "joint_adapt" => Ok(TrainMode::JointAdapt),
            _ => Err(Error::config(
                "train.mode",
                format!("unknown mode `{s}` (clean_pretrain|noise_finetune|joint_adapt)"),
            )),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::CleanPretrain => "clean_pretrain",
            TrainMode::NoiseFinetune => "noise_finetune",
            TrainMode::JointAdapt => "joint_adapt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::config("train.optimizer", format!("unknown optimizer `{s}` (adam|sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub mode: TrainMode,
    /// Cap on the number of examples used for the per-epoch accuracy columns.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.25,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            mode: TrainMode::NoiseFinetune,
            eval_examples: 256,
        }
    }
}

impl TrainConfig {
    /// Conventional learning rate: 1e-4 when every weight trains, else 1e-3.
    pub fn default_learning_rate(method: peft::PeftMethod) -> f64 {
        match method {
            peft::PeftMethod::Full | peft::PeftMethod::None => 1e-4,
            _ => 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("train.sigma", format!("must be ≥ 0, got {}", self.sigma)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.lr", format!("must be ≥ 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        Ok(())
    }

    fn effective_sigma(&self) -> f64 {
        match self.mode {
            TrainMode::CleanPretrain => 0.0,
            _ => self.sigma,
        }
    }
}

/// `x + δ` with `δ ~ N(0, σ²)` per pixel and no clipping.
pub fn augment_batch<R: Rng>(images: &[f32], sigma: f64, rng: &mut R) -> Vec<f32> {
    let mut out = images.to_vec();
    if sigma == 0.0 {
        return out;
    }
    let mut noise = vec![0f32; images.len()];
    rng::fill_gaussian(rng, sigma as f32, &mut noise);
    for (o, n) in out.iter_mut().zip(noise) {
        *o += n;
    }
    out
}

/// Noise stream for one training batch.
pub fn batch_noise_stream(seed: u64, epoch: usize, batch: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, Domain::TrainNoise, epoch as u64, batch as u64)
}

/// Top-1 accuracy under one noise draw per example (σ = 0 gives clean
/// accuracy). Example `i` uses the stream `(seed, i)`.
pub fn evaluate<T: Element>(model: &VitModel<T>, dataset: &Dataset, sigma: f64, seed: u64) -> Result<f64> {
    const CHUNK: usize = 256;
    let n = dataset.len();
    let d = dataset.image_len();
    let mut correct = 0usize;
    let mut buf = Vec::with_capacity(CHUNK * d);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        buf.clear();
        for i in start..end {
            let img = dataset.image(i);
            if sigma == 0.0 {
                buf.extend_from_slice(img);
            } else {
                let mut r = rng::stream(seed, Domain::EvalNoise, i as u64, 0);
                buf.extend(augment_batch(img, sigma, &mut r));
            }
        }
        let logits = model.forward_pixels(&buf, end - start)?;
        let pred = argmax_rows(logits.data(), model.config.num_classes);
        correct += pred.iter().zip(&dataset.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub clean_acc: f64,
    pub noisy_acc: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,mean_loss,clean_acc,noisy_acc";

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[EpochStats], provenance: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in provenance {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s.push_str(LOSS_CSV_HEADER);
    s.push('\n');
    for e in trace {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.mean_loss, e.clean_acc, e.noisy_acc));
    }
    fs::write(path, s)?;
    Ok(())
}

enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, step: i32, moments: HashMap<String, (Vec<f64>, Vec<f64>)> },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam { lr, step: 0, moments: HashMap::new() },
        }
    }

    fn begin_step(&mut self) {
        if let Optimizer::Adam { step, .. } = self {
            *step += 1;
        }
    }

    fn update<T: Element>(&mut self, name: &str, w: &mut [T], g: &[T]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (w, g) in w.iter_mut().zip(g) {
                    *w = T::from_f64(w.as_f64() - *lr * g.as_f64());
                }
            }
            Optimizer::Adam { lr, step, moments } => {
                let (m, v) = moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
                let c1 = 1.0 - Self::BETA1.powi(*step);
                let c2 = 1.0 - Self::BETA2.powi(*step);
                for i in 0..w.len() {
                    let gi = g[i].as_f64();
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                    let upd = *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    w[i] = T::from_f64(w[i].as_f64() - upd);
                }
            }
        }
    }
}

/// One optimisation step on a batch; returns the batch loss.
fn step<T: Element>(
    model: &mut VitModel<T>,
    opt: &mut Optimizer,
    pixels: &[f32],
    labels: &[usize],
) -> Result<f64> {
    let grads = {
        let mut g = Graph::new();
        let logits = model.logits(&mut g, pixels, labels.len())?;
        let loss = g.cross_entropy(logits, labels)?;
        let value = g.value(loss)[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value}")));
        }
        (g.backward(loss)?, value)
    };
    let (grads, value) = grads;
    opt.begin_step();
    model.visit_params_mut(&mut |name, t| {
        if t.requires_grad() {
            if let Some(gr) = grads.get(t) {
                opt.update(name, t.data_mut(), gr);
            }
        }
    });
    Ok(value)
}

/// Cross-entropy of a double-precision model on one fixed batch, as an
/// [`Objective`] over the model's trainable tensors.
pub struct BatchLoss {
    pub model: VitModel<f64>,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Objective for BatchLoss {
    fn value(&self) -> Result<f64> {
        let mut g = Graph::new();
        let logits = self.model.logits(&mut g, &self.pixels, self.labels.len())?;
        let loss = g.cross_entropy(logits, &self.labels)?;
        Ok(g.value(loss)[0])
    }

    fn gradient(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let logits = self.model.logits(&mut g, &self.pixels, self.labels.len())?;
        let loss = g.cross_entropy(logits, &self.labels)?;
        let grads = g.backward(loss)?;
        let mut out = Vec::new();
        self.model.visit_params(&mut |_, t| {
            if t.requires_grad() {
                out.push(grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
            }
        });
        Ok(out)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        self.model.visit_params_mut(&mut |name, t| {
            if t.requires_grad() {
                f(name, t);
            }
        });
    }
}

/// Trains the currently trainable tensors of `model` on noisy copies of
/// `dataset` and returns the per-epoch trace.
pub fn train<T: Element>(model: &mut VitModel<T>, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if dataset.image_len() != model.config.image_len() {
        return Err(Error::shape(
            "train",
            format!("dataset images have {} values, model takes {}", dataset.image_len(), model.config.image_len()),
        ));
    }
    if dataset.num_classes > model.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model head has {}",
            dataset.num_classes, model.config.num_classes
        )));
    }
    if model.count_parameters(true) == 0 {
        return Err(Error::Contract("model has no trainable tensors; attach a PEFT method first".into()));
    }
    let sigma = config.effective_sigma();
    let eval_set = dataset.subset(config.eval_examples.max(1), config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, Domain::Shuffle, epoch as u64, 0));
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (pixels, labels) = dataset.gather(idx);
            let noisy = augment_batch(&pixels, sigma, &mut batch_noise_stream(config.seed, epoch, b));
            let loss = step(model, &mut opt, &noisy, &labels)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            total += loss * idx.len() as f64;
        }
        trace.push(EpochStats {
            epoch,
            mean_loss: total / dataset.len() as f64,
            clean_acc: evaluate(model, &eval_set, 0.0, config.seed)?,
            noisy_acc: evaluate(model, &eval_set, sigma, config.seed)?,
        });
    }
    Ok(trace)
}

/// One PEFT run on noisy `dataset` starting from a backbone trained on other
/// data: a fresh head sized for the new classes, `peft` attached, then
/// noise-augmented training.
pub fn joint_adapt<T: Element>(
    pretrained: VitModel<T>,
    dataset: &Dataset,
    peft_config: &PeftConfig,
    config: &TrainConfig,
) -> Result<(VitModel<T>, Vec<EpochStats>)> {
    let mut model = pretrained;
    model.peft = None;
    model.reset_head(dataset.num_classes, config.seed)?;
    let mut model = peft::attach(model, peft_config, config.seed)?;
    let trace = train(&mut model, dataset, &TrainConfig { mode: TrainMode::JointAdapt, ..config.clone() })?;
    Ok((model, trace))
}

/// The two-stage alternative to [`joint_adapt`]: the same PEFT state is first
/// trained on clean `dataset`, then on its noisy copies. Each stage runs
/// `config.epochs` epochs.
pub fn two_stage_adapt<T: Element>(
    pretrained: VitModel<T>,
    dataset: &Dataset,
    peft_config: &PeftConfig,
    config: &TrainConfig,
) -> Result<(VitModel<T>, Vec<EpochStats>)> {
    let mut model = pretrained;
    model.peft = None;
    model.reset_head(dataset.num_classes, config.seed)?;
    let mut model = peft::attach(model, peft_config, config.seed)?;
    let clean = TrainConfig { sigma: 0.0, mode: TrainMode::NoiseFinetune, ..config.clone() };
    let mut trace = train(&mut model, dataset, &clean)?;
    let noisy = TrainConfig { seed: config.seed.wrapping_add(1), mode: TrainMode::NoiseFinetune, ..config.clone() };
    let second = train(&mut model, dataset, &noisy)?;
    let offset = trace.len();
    trace.extend(second.into_iter().map(|mut e| {
        e.epoch += offset;
        e
    }));
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DeskFamily, DeskSpec, Split};
    use crate::vit::VitConfig;

    fn tiny_config() -> VitConfig {
        VitConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 10,
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_noise_is_seeded() {
        let x: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        assert_eq!(augment_batch(&x, 0.0, &mut batch_noise_stream(1, 0, 0)), x);
        let a = augment_batch(&x, 0.5, &mut batch_noise_stream(1, 0, 0));
        assert_eq!(a, augment_batch(&x, 0.5, &mut batch_noise_stream(1, 0, 0)));
        assert_ne!(a, augment_batch(&x, 0.5, &mut batch_noise_stream(1, 1, 0)));
        assert!(a.iter().any(|v| *v < 0.0 || *v > 1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 20, 0).generate(Split::Train).unwrap();
        let model = VitModel::<f32>::new(tiny_config(), 2).unwrap();
        let mut tuned = peft::attach(model.clone(), &PeftConfig::lora(2), 0).unwrap();
        let before = tuned.clone();
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, batch_size: 8, ..Default::default() };
        let trace = train(&mut tuned, &ds, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].mean_loss.is_finite());
        let mut same = true;
        let mut b = Vec::new();
        before.visit_params(&mut |_, t| b.push(t.clone()));
        let mut i = 0;
        tuned.visit_params(&mut |_, t| {
            same &= t.bit_eq(&b[i]);
            i += 1;
        });
        assert!(same);
    }

    #[test]
    fn frozen_model_refuses_to_train() {
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 10, 0).generate(Split::Train).unwrap();
        let mut m = VitModel::<f32>::new(tiny_config(), 2).unwrap();
        m.freeze();
        assert!(train(&mut m, &ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn evaluate_trivial_cases() {
        let ds = DeskSpec::new(DeskFamily::Blobs, 8, 10, 0).generate(Split::Test).unwrap();
        let mut m = VitModel::<f32>::new(tiny_config(), 2).unwrap();
        // Zero the head and bias class 3 so every prediction is 3.
        m.head.weight.data_mut().fill(0.0);
        m.head.bias.data_mut()[3] = 1.0;
        let only3 = ds.select(&[3]);
        assert_eq!(evaluate(&m, &only3, 0.0, 0).unwrap(), 1.0);
        assert_eq!(evaluate(&m, &ds, 0.5, 0).unwrap(), 0.1);
    }
}
