use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_f1, EvalReport};
use super::optim::{clip_global_norm, AdamW, AdamWConfig, LinearSchedule};
use crate::data::EventInstance;
use crate::eae::{forward_full, predict_all, Checkpoint, DegapModel, EaeTask, Mode};
use crate::error::{DegapError, Result};
use crate::numerics::Tape;
use crate::rng::{rng_for, Stream};
use crate::transformer::ForwardCtx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Sum over slots and batch instances.
    #[default]
    Sum,
    /// Sum over slots, mean over batch instances.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub training_steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub loss_reduction: LossReduction,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            training_steps: 1200,
            learning_rate: 3e-4,
            warmup_ratio: 0.1,
            max_grad_norm: 5.0,
            seed: 1,
            eval_every: 300,
            loss_reduction: LossReduction::Sum,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.training_steps == 0 {
            return Err(DegapError::config("batch_size and training_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(DegapError::config("warmup_ratio must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return Err(DegapError::config("learning_rate and max_grad_norm must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule::new(self.learning_rate, self.warmup_ratio, self.training_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    pub evals: BTreeMap<usize, EvalReport>,
    /// Step whose parameters were kept (best dev Arg-C, earliest on ties).
    pub best_step: usize,
    pub best_checkpoint: Checkpoint,
}

/// Splits off roughly `fraction` of the contexts (grouped by doc id) as a
/// dev set, chosen by a seeded shuffle. Order inside each part is kept.
pub fn dev_split(instances: &[EventInstance], fraction: f64, seed: u64) -> (Vec<EventInstance>, Vec<EventInstance>) {
    let mut docs: Vec<&str> = instances.iter().map(|i| i.doc_id.as_str()).collect();
    docs.dedup();
    let mut order = docs.clone();
    order.shuffle(&mut rng_for(seed, Stream::Split));
    let n_dev = (fraction * docs.len() as f64).round() as usize;
    let dev: std::collections::BTreeSet<&str> = order.into_iter().take(n_dev).collect();
    instances.iter().cloned().partition(|i| !dev.contains(i.doc_id.as_str()))
}

fn copy_params(model: &mut DegapModel, ckpt: &Checkpoint) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_owned();
        model.store.get_mut(id).data.clone_from(&ckpt.params[&name].data);
    }
}

/// Seeded mini-batch training. Every epoch reshuffles the data; the model
/// ends up holding the best-dev parameters (or the final ones without a
/// dev set).
pub fn train(model: &mut DegapModel, task: &EaeTask, train_set: &[EventInstance], dev: &[EventInstance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DegapError::contract("training set is empty"));
    }
    model.check_vocab(&task.vocab)?;
    let net = model.net.clone();
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(&model.store, cfg.adamw);
    let mut order_rng = rng_for(cfg.seed, Stream::DataOrder);
    let mut dropout_rng = rng_for(cfg.seed, Stream::Dropout);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.training_steps);
    let mut evals = BTreeMap::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut tape = Tape::new();
    let scale = match cfg.loss_reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / cfg.batch_size as f64,
    };

    for step in 1..=cfg.training_steps {
        model.store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let inst = &train_set[order[cursor]];
            cursor += 1;
            let mut ctx = ForwardCtx::new(&mut tape, &model.store).with_dropout(model.config.dropout_rate, &mut dropout_rng);
            let out = forward_full(&mut ctx, &net, task, inst, Mode::Train, None)?;
            let loss = out.loss.expect("training mode yields a loss");
            let loss = if scale == 1.0 { loss } else { tape.scale(loss, scale) };
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(DegapError::Divergence { step, loss: value });
            }
            batch_loss += value;
            tape.backward(loss, &mut model.store)?;
        }
        let grad_norm = super::optim::global_grad_norm(&model.store);
        clip_global_norm(&mut model.store, cfg.max_grad_norm);
        let lr = schedule.lr(step);
        opt.step(&mut model.store, lr);
        curve.push(LossPoint {
            step,
            loss: batch_loss,
            lr,
            grad_norm,
        });

        let due = step == cfg.training_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if due && !dev.is_empty() {
            let report = evaluate_f1(&predict_all(&model.store, &net, task, dev)?, dev)?;
            let score = report.arg_c.f1;
            evals.insert(step, report);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, step, model.to_checkpoint()));
            }
        }
    }

    let (best_step, best_checkpoint) = match best {
        Some((_, step, ckpt)) => {
            copy_params(model, &ckpt);
            (step, ckpt)
        }
        None => (cfg.training_steps, model.to_checkpoint()),
    };
    Ok(TrainOutcome {
        curve,
        evals,
        best_step,
        best_checkpoint,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,lr,grad_norm").expect("write to Vec");
    for p in curve {
        writeln!(out, "{},{},{},{}", p.step, p.loss, p.lr, p.grad_norm).expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| DegapError::io(path, e))
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}
