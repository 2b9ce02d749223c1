//! Training loop: schedule, EMA, batching and the epoch driver.

mod log;

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{compose_pipeline, AugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::Model;
use crate::multires::{apply_branch, sample_branch, BranchSizes};
use crate::phantom::Sample;
use crate::tensor::{AdamW, AdamWConfig, Element, Mode, Tape, Tensor};

pub use log::{EpochRecord, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cosine_epochs: usize,
    pub fixed_epochs: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    pub lr_scale: f64,
    /// Multiply scheduled rates by `lr_scale`. When false the quoted rates
    /// are taken as already matching the batch size.
    pub lr_scale_on_top: bool,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_start_epoch: usize,
    pub ema_decay: f64,
    pub standardize_mean: f64,
    pub standardize_std: f64,
    pub seed: u64,
    /// Run `epochs / epoch_divisor` epochs over a proportionally compressed schedule.
    pub epoch_divisor: usize,
    /// Divides the 768 / 1024 / 512 branch sides.
    pub resolution_divisor: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            warmup_epochs: 5,
            cosine_epochs: 25,
            fixed_epochs: 10,
            lr_low: 5e-4,
            lr_high: 5e-3,
            lr_scale: 1.0 / 8.0,
            lr_scale_on_top: true,
            batch_size: 8,
            weight_decay: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_start_epoch: 20,
            ema_decay: 0.99,
            standardize_mean: 0.5,
            standardize_std: 0.5,
            seed: 0,
            epoch_divisor: 1,
            resolution_divisor: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 20 compressed epochs; branch sides 192 / 256 / 128 for 256-pixel phantoms.
    /// The quoted rates are used as-is: 400 steps at 1/8 of them do not converge.
    pub fn desk_scale() -> Self {
        TrainConfig { epoch_divisor: 2, resolution_divisor: 4, lr_scale_on_top: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs + self.cosine_epochs + self.fixed_epochs != self.epochs || self.epochs == 0 {
            return Err(Error::Config(format!(
                "warmup {} + cosine {} + fixed {} must equal epochs {} > 0",
                self.warmup_epochs, self.cosine_epochs, self.fixed_epochs, self.epochs
            )));
        }
        let rates = [self.lr_low, self.lr_high, self.lr_scale, self.standardize_std];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates, lr_scale and standardize_std must be positive".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("weight_decay must be >= 0 and ema_decay in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epoch_divisor == 0 || !self.epochs.is_multiple_of(self.epoch_divisor) {
            return Err(Error::Config(format!("epoch divisor {} must divide {} epochs", self.epoch_divisor, self.epochs)));
        }
        if self.ema_start_epoch > self.epochs {
            return Err(Error::Config("ema_start_epoch beyond the last epoch".into()));
        }
        BranchSizes::scaled(self.resolution_divisor)?;
        self.augment.validate()
    }

    /// Epochs actually run.
    pub fn run_epochs(&self) -> usize {
        self.epochs / self.epoch_divisor.max(1)
    }

    /// First run epoch (0-based) whose steps update the EMA.
    pub fn run_ema_start(&self) -> usize {
        (self.ema_start_epoch * self.run_epochs()).div_ceil(self.epochs.max(1))
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Scheduled learning rate before `lr_scale`, for progress `t` in `[0, epochs)`.
pub fn lr_at(cfg: &TrainConfig, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t < cfg.epochs as f64) {
        return Err(Error::Invalid(format!("schedule progress {t} outside [0, {})", cfg.epochs)));
    }
    let (lo, hi) = (cfg.lr_low, cfg.lr_high);
    let w = cfg.warmup_epochs as f64;
    let c = cfg.cosine_epochs as f64;
    Ok(if t < w {
        lo + (hi - lo) * t / w
    } else if t < w + c {
        lo + 0.5 * (hi - lo) * (1.0 + (PI * (t - w) / c).cos())
    } else {
        lo
    })
}

/// Rate handed to the optimizer.
pub fn effective_lr(cfg: &TrainConfig, t: f64) -> Result<f64> {
    let lr = lr_at(cfg, t)?;
    Ok(if cfg.lr_scale_on_top { lr * cfg.lr_scale } else { lr })
}

/// `ema <- decay * ema + (1 - decay) * live`, element-wise.
pub fn ema_update<T: Element>(ema: &mut [Tensor<T>], live: &[Tensor<T>], decay: f64) -> Result<()> {
    if ema.len() != live.len() {
        return Err(Error::Shape(format!("ema holds {} tensors, live model {}", ema.len(), live.len())));
    }
    if let Some((e, l)) = ema.iter().zip(live).find(|(e, l)| e.shape() != l.shape()) {
        return Err(Error::Shape(format!("ema {:?} vs live {:?}", e.shape(), l.shape())));
    }
    for (e, l) in ema.iter_mut().zip(live) {
        for (a, &b) in e.data_mut().iter_mut().zip(l.data()) {
            *a = T::from_f64(decay * a.as_f64() + (1.0 - decay) * b.as_f64());
        }
    }
    Ok(())
}

fn ema_update_model(ema: &mut Model<f32>, live: &Model<f32>, decay: f64) -> Result<()> {
    ema_update(ema.params_mut(), live.params(), decay)?;
    for (e, l) in ema.running_stats_mut().iter_mut().zip(live.running_stats()) {
        for (a, &b) in e.mean.iter_mut().chain(e.var.iter_mut()).zip(l.mean.iter().chain(&l.var)) {
            *a = (decay * *a as f64 + (1.0 - decay) * b as f64) as f32;
        }
    }
    Ok(())
}

/// `(x - 0.5) / 0.5`, mapping [0, 1] onto [-1, 1].
pub fn standardize(image: &[f32]) -> Vec<f32> {
    standardize_with(image, 0.5, 0.5)
}

pub fn standardize_with(image: &[f32], mean: f64, std: f64) -> Vec<f32> {
    image.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// Stacks equally sized samples into `[N, 1, H, W]` inputs and
/// `[N, 3, H, W]` targets (region, vessel, fovea heatmap).
pub fn batch_tensors(samples: &[Sample], mean: f64, std: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Shape("batch samples differ in size".into()));
    }
    let mut input = Vec::with_capacity(samples.len() * h * w);
    let mut target = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        input.extend(standardize_with(&s.image, mean, std));
        target.extend(s.region.iter().map(|&v| v as f32));
        target.extend(s.vessel.iter().map(|&v| v as f32));
        target.extend_from_slice(s.heatmap());
    }
    let n = samples.len();
    Ok((Tensor::new(&[n, 1, h, w], input)?, Tensor::new(&[n, 3, h, w], target)?))
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_BRANCH: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Independent generator for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// One optimizer step on a prepared batch; returns the loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    names: &[String],
    input: Tensor<f32>,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(input);
    let out = model.forward(&mut tape, &vars, x, Mode::Train)?;
    let loss = tape.bce_with_logits(out.logits, target)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);
    let triples = names.iter().zip(model.params_mut()).zip(&grads).map(|((n, p), g)| (n.as_str(), p, g));
    opt.step(triples, lr)?;
    model.update_running_stats(&out.batch_stats)?;
    Ok(value)
}

pub struct TrainOutput {
    pub model: Model<f32>,
    /// Weight average; a copy of `model` if averaging never started.
    pub ema: Model<f32>,
    pub log: TrainLog,
}

/// Called after every epoch with its record, the live model and the EMA if any.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Model<f32>, Option<&Model<f32>>) -> Result<()> + 'a;

/// Trains `model` on `train`, validating on `val` after every epoch.
pub fn train(
    mut model: Model<f32>,
    train: &[(String, Sample)],
    val: &[(String, Sample)],
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let sizes = BranchSizes::scaled(cfg.resolution_divisor)?;
    let names = model.param_names().to_vec();
    let mut opt = AdamW::new(cfg.adamw());
    let mut ema: Option<Model<f32>> = None;
    let mut log = TrainLog::default();
    let run_epochs = cfg.run_epochs();
    let stretch = cfg.epochs as f64 / run_epochs as f64;
    let batches = train.len().div_ceil(cfg.batch_size);

    for epoch in 0..run_epochs {
        let start = Instant::now();
        if epoch == cfg.run_ema_start() {
            ema = Some(model.clone());
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0));
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let branch = sample_branch(&mut stream(cfg.seed, STREAM_BRANCH, epoch as u64, b as u64));
            let ids = || idx.iter().map(|&i| train[i].0.as_str()).collect::<Vec<_>>().join(", ");
            let prepared = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(cfg.seed, STREAM_SAMPLE, i as u64, epoch as u64);
                    let s = apply_branch(&train[i].1, branch, &sizes, &mut rng)?;
                    compose_pipeline(&s, &cfg.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (input, target) = batch_tensors(&prepared, cfg.standardize_mean, cfg.standardize_std)?;
            lr = effective_lr(cfg, (epoch as f64 + b as f64 / batches as f64) * stretch)?;
            let loss = train_step(&mut model, &mut opt, &names, input, &target, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, samples {})", ids())),
                other => other,
            })?;
            loss_sum += loss;
            if let Some(ema) = ema.as_mut() {
                ema_update_model(ema, &model, cfg.ema_decay)?;
            }
        }
        let judged = ema.as_ref().unwrap_or(&model);
        let report = evaluate(judged, val, &EvalOptions::default())?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            dice_region: report.aggregate.dice_region,
            dice_vessel: report.aggregate.dice_vessel,
            dice_fovea: report.aggregate.dice_fovea,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &model, ema.as_ref())?;
        log.rows.push(record);
    }
    let ema = ema.unwrap_or_else(|| model.clone());
    Ok(TrainOutput { model, ema, log })
}
