//! Training: Adam updates with batch size one, seeded shuffling, instance
//! dropout, reduce-on-plateau learning rate and best-validation
//! checkpointing.

use serde::{Deserialize, Serialize};

use super::grad::{backward, Gradients};
use super::model::{forward_traced, MilModel, Mode};
use super::{loss, Bag, MilError};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub instance_dropout_p: f64,
    pub unit_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            instance_dropout_p: 0.5,
            unit_dropout: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MilError> {
        if self.lr_head <= 0.0 {
            return Err(MilError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.instance_dropout_p) {
            return Err(MilError::Config(
                "instance_dropout_p must lie in [0,1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.unit_dropout) {
            return Err(MilError::Config("unit_dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without a new best
/// validation loss, multiply the learning rate by `factor`.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    patience: usize,
    factor: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> PlateauSchedule {
        PlateauSchedule {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's validation loss; returns the learning rate to use
    /// from the next step on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Inverse-frequency class weights normalized to mean 1 over the label set.
/// Classes absent from `labels` are treated as having one occurrence.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / n_classes as f64;
    inv.iter().map(|v| v / mean).collect()
}

/// Replace each instance independently with the neutral vector with
/// probability `p`. Applied only during training; evaluation uses every
/// instance.
pub fn instance_dropout(
    instances: &[Vec<f64>],
    p: f64,
    replacement: &[f64],
    rng: &mut SplitMix64,
) -> Vec<Vec<f64>> {
    instances
        .iter()
        .map(|row| {
            if p > 0.0 && rng.bernoulli(p) {
                replacement.to_vec()
            } else {
                row.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss.
    pub model: MilModel,
    pub log: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr
            ));
        }
        out
    }
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

fn adam_update(
    model: &mut MilModel,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let tensors: [(&mut Vec<f64>, &Vec<f64>, &mut Vec<f64>, &mut Vec<f64>); 8] = [
        (
            &mut model.embed.w,
            &grads.embed_w,
            &mut state.m.embed_w,
            &mut state.v.embed_w,
        ),
        (
            &mut model.embed.b,
            &grads.embed_b,
            &mut state.m.embed_b,
            &mut state.v.embed_b,
        ),
        (
            &mut model.attn_hidden.w,
            &grads.attn_hidden_w,
            &mut state.m.attn_hidden_w,
            &mut state.v.attn_hidden_w,
        ),
        (
            &mut model.attn_hidden.b,
            &grads.attn_hidden_b,
            &mut state.m.attn_hidden_b,
            &mut state.v.attn_hidden_b,
        ),
        (
            &mut model.attn_score.w,
            &grads.attn_score_w,
            &mut state.m.attn_score_w,
            &mut state.v.attn_score_w,
        ),
        (
            &mut model.attn_score.b,
            &grads.attn_score_b,
            &mut state.m.attn_score_b,
            &mut state.v.attn_score_b,
        ),
        (
            &mut model.classifier.w,
            &grads.classifier_w,
            &mut state.m.classifier_w,
            &mut state.v.classifier_w,
        ),
        (
            &mut model.classifier.b,
            &grads.classifier_b,
            &mut state.m.classifier_b,
            &mut state.v.classifier_b,
        ),
    ];
    for (params, g, m, v) in tensors {
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

fn mean_eval_loss(model: &MilModel, bags: &[Bag], weights: &[f64]) -> Result<f64, MilError> {
    let mut rng = SplitMix64::new(0);
    let mut acc = 0.0;
    for bag in bags {
        let trace = forward_traced(model, &bag.instances, Mode::Eval, &mut rng)?;
        acc += loss(&trace.result, bag.label, weights).0;
    }
    Ok(acc / bags.len().max(1) as f64)
}

/// Train the model: one Adam step per bag, seeded epoch shuffling, instance
/// dropout on the training path, plateau-scheduled learning rate, and the
/// best-validation checkpoint returned. When `val_bags` is empty the epoch's
/// mean training loss drives the schedule instead.
pub fn train(
    mut model: MilModel,
    train_bags: &[Bag],
    val_bags: &[Bag],
    replacement: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, MilError> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(MilError::Config("no training bags".into()));
    }
    let n = model.dims.n_classes;
    let labels: Vec<usize> = train_bags.iter().map(|b| b.label).collect();
    let distinct = {
        let mut seen = vec![false; n];
        for &l in &labels {
            if l >= n {
                return Err(MilError::Config(format!(
                    "label {l} out of range for {n} classes"
                )));
            }
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(MilError::Config(
            "training set contains a single class".into(),
        ));
    }
    if replacement.len() != model.dims.d {
        return Err(MilError::Config(format!(
            "replacement vector has dimension {} (model expects {})",
            replacement.len(),
            model.dims.d
        )));
    }
    let weights = class_weights(&labels, n);
    model.unit_dropout = cfg.unit_dropout;

    let mut state = AdamState {
        m: Gradients::zeros(&model),
        v: Gradients::zeros(&model),
        t: 0,
    };
    let mut schedule = PlateauSchedule::new(cfg.lr_head, cfg.plateau_patience, cfg.plateau_factor);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let root = SplitMix64::new(cfg.seed);

    for epoch in 0..cfg.epochs {
        let mut rng = root.derive(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        rng.shuffle(&mut order);
        let lr = schedule.lr();
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let bag = &train_bags[idx];
            let dropped =
                instance_dropout(&bag.instances, cfg.instance_dropout_p, replacement, &mut rng);
            let trace = forward_traced(&model, &dropped, Mode::Train, &mut rng)?;
            let (l, _) = loss(&trace.result, bag.label, &weights);
            epoch_loss += l;
            let grads = backward(&model, &trace, bag.label, &weights);
            adam_update(&mut model, &grads, &mut state, cfg, lr);
        }
        epoch_loss /= train_bags.len() as f64;
        let val_loss = if val_bags.is_empty() {
            epoch_loss
        } else {
            mean_eval_loss(&model, val_bags, &weights)?
        };
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
        }
        schedule.observe(val_loss);
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            lr,
        });
    }

    Ok(TrainOutcome {
        model: best_model,
        log,
        best_val_loss: best_val,
        best_epoch,
    })
}
