//! SGD training loop with momentum, weight decay, polynomial-to-zero
//! learning-rate decay, per-step CSV logging, and best/last checkpointing.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Sample;
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{dsc, SegmentationMask};
use crate::network::Network;
use crate::rng::{shuffle, SplitMix64};
use crate::tape::Session;
use crate::tensor::FeatureMap;
use crate::{Error, Result};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base * (1 - step/total)^power`.
    Poly,
    /// `base * (1 - step/total)`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub poly_power: f64,
    pub seed: u64,
    /// Refresh the `last` checkpoint every this many epochs.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    /// Stop once the training-set DSC reaches this value (checked per epoch).
    pub early_stop_train_dsc: Option<f64>,
    /// Stop once the validation DSC reaches this value (checked per epoch).
    pub early_stop_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Poly,
            poly_power: 0.9,
            seed: 42,
            checkpoint_every: 1,
            loss: LossConfig::default(),
            early_stop_train_dsc: None,
            early_stop_val_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.base_lr < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "bad optimizer settings: lr {}, momentum {}, weight decay {}",
                self.base_lr, self.momentum, self.weight_decay
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint cadence must be >= 1"));
        }
        self.loss.weights.validate()
    }
}

/// Learning rate at `step` of `total_steps`; exactly zero at the final step.
pub fn lr_schedule(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let frac = 1.0 - step as f64 / total_steps as f64;
    match cfg.schedule {
        LrSchedule::Poly => cfg.base_lr * frac.max(0.0).powf(cfg.poly_power),
        LrSchedule::Linear => cfg.base_lr * frac.max(0.0),
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Classic SGD with momentum and coupled weight decay:
/// `v <- m*v + (g + wd*theta)`, `theta <- theta - lr*v`.
#[derive(Debug)]
pub struct OptimizerState {
    velocity: HashMap<String, Vec<f64>>,
    pub step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimizerState { velocity: HashMap::new(), step: 0, momentum, weight_decay }
    }

    pub fn velocity_of(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }
}

pub fn sgd_step(net: &mut Network, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for p in net.store.iter_mut() {
        if !p.trainable {
            continue;
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} at step {}",
                p.name, state.step
            )));
        }
        let v = state.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
        for ((vi, gi), ti) in v.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
            *vi = state.momentum * *vi + (gi + state.weight_decay * *ti);
            *ti -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

// ── Batching and evaluation ──────────────────────────────────────────

/// Stack samples into a `(B, 1, H, W)` image tensor plus target masks.
pub fn batch_tensors(samples: &[&Sample]) -> Result<(FeatureMap, Vec<SegmentationMask>)> {
    if samples.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let (h, w) = (samples[0].image.h, samples[0].image.w);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.h != h || s.image.w != w {
            return Err(Error::input(format!("sample {} has mismatched size", s.id)));
        }
        data.extend_from_slice(&s.image.data);
        masks.push(s.mask.clone());
    }
    Ok((FeatureMap::new([samples.len(), 1, h, w], data)?, masks))
}

/// Mean fused-output DSC over a sample set, eval mode.
pub fn evaluate_dsc(net: &Network, samples: &[&Sample], batch_size: usize, spacing: (f64, f64)) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate an empty sample set"));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, masks) = batch_tensors(chunk)?;
        let preds = net.predict(&images, spacing)?;
        for (p, m) in preds.iter().zip(&masks) {
            sum += dsc(p, m)?;
        }
    }
    Ok(sum / samples.len() as f64)
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs_run: usize,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub last_val_dsc: f64,
    pub stopped_early: bool,
    pub first_losses: Vec<f64>,
}

/// Run the full loop. Writes `train_log.csv`, `ckpt_best.bin` and
/// `ckpt_last.bin` under `out_dir`. On a non-finite loss the last good
/// checkpoint is left on disk and a numeric error is returned.
pub fn train(
    net: &mut Network,
    train_samples: &[&Sample],
    val_samples: &[&Sample],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let steps_per_epoch = train_samples.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train_samples.len()
        )));
    }
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut log = fs::File::create(out_dir.join("train_log.csv"))?;
    writeln!(log, "step,epoch,lr,total,l_ds,l_seg,dice,bdou_final,val_dsc")?;

    let mut opt = OptimizerState::new(cfg.momentum, cfg.weight_decay);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut last_val = f64::NAN;
    let mut first_losses = Vec::new();
    let mut stopped_early = false;
    let best_path = out_dir.join("ckpt_best.bin");
    let last_path = out_dir.join("ckpt_last.bin");

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut SplitMix64::new(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        for batch_ids in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_ids.iter().map(|&i| train_samples[i]).collect();
            let (images, masks) = batch_tensors(&batch)?;
            let lr = lr_schedule(cfg, opt.step, total_steps);

            let mut sess = Session::new(&net.store, true);
            let out = net.forward(&mut sess, &images)?;
            let breakdown = total_loss(&mut sess, &out, &masks, &cfg.loss, net.config.use_bds_loss)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at step {}; last checkpoint preserved",
                    breakdown.total, opt.step
                )));
            }
            sess.tape.backward(breakdown.total_id)?;
            let (grads, bn_updates) = sess.finish();
            net.store.accumulate_grads(&grads)?;
            net.apply_bn_updates(&bn_updates)?;
            sgd_step(net, &mut opt, lr)?;
            net.store.zero_grads();

            if first_losses.len() < 2 {
                first_losses.push(breakdown.total);
            }
            writeln!(
                log,
                "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},",
                opt.step, epoch, lr, breakdown.total, breakdown.l_ds, breakdown.l_seg, breakdown.dice, breakdown.bdou_final
            )?;
        }

        // Per-epoch validation and checkpointing.
        let val_dsc = if val_samples.is_empty() {
            f64::NAN
        } else {
            evaluate_dsc(net, val_samples, cfg.batch_size, (1.0, 1.0))?
        };
        last_val = val_dsc;
        writeln!(log, "{},{},,,,,,,{:.4}", opt.step, epoch, if val_dsc.is_nan() { -1.0 } else { val_dsc })?;
        if !val_dsc.is_nan() && val_dsc > best_val {
            best_val = val_dsc;
            best_epoch = epoch;
            checkpoint::save(&net.store, &net.config, &best_path)?;
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            checkpoint::save(&net.store, &net.config, &last_path)?;
        }
        if let Some(target) = cfg.early_stop_val_dsc {
            if !val_dsc.is_nan() && val_dsc >= target {
                stopped_early = true;
                break 'epochs;
            }
        }
        if let Some(target) = cfg.early_stop_train_dsc {
            let train_dsc = evaluate_dsc(net, train_samples, cfg.batch_size, (1.0, 1.0))?;
            if train_dsc >= target {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    checkpoint::save(&net.store, &net.config, &last_path)?;
    if best_val == f64::NEG_INFINITY {
        // no validation set: best == last
        checkpoint::save(&net.store, &net.config, &best_path)?;
    }
    Ok(TrainOutcome {
        steps: opt.step,
        epochs_run: if stopped_early { best_epoch + 1 } else { cfg.epochs },
        best_val_dsc: best_val,
        best_epoch,
        last_val_dsc: last_val,
        stopped_early,
        first_losses,
    })
}
