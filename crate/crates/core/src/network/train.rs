//! SGD with momentum, weight decay and the poly learning-rate schedule.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, stack, NamedGrads, SegSample, ToyPdcNet};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

/// `lr0 · (1 − iter / max_iter)^0.9`, zero from `max_iter` on.
pub fn poly_lr(lr0: f64, iter: usize, max_iter: usize) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    lr0 * (1.0 - iter as f64 / max_iter as f64).powf(POLY_POWER)
}

/// Heavy-ball SGD: `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter of `model` that has an entry in `grads`.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &NamedGrads<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else {
                return;
            };
            let v = velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 8e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 > 0.0 && self.lr0 <= 10.0) {
            return bad(format!("lr0 must be in (0, 10], got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay must be in [0, 1], got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    /// Learning rate of the last iteration of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Held-out pixel accuracy.
    pub pix_acc: f64,
    /// Held-out mean IoU.
    pub miou: f64,
}

/// Trains `net` in place, calling `on_epoch` after each epoch.
///
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`; a
/// non-finite value anywhere in an iteration aborts with
/// [`Error::Divergence`].
pub fn train<T: Scalar>(
    net: &mut ToyPdcNet<T>,
    train_set: &[SegSample],
    test_set: &[SegSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch);
    let max_iter = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iter = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&SegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = stack::<T>(&refs)?;
            lr = poly_lr(cfg.lr0, iter, max_iter);
            let loss = step(net, &mut opt, &batch, lr, iter)?;
            total += loss;
            iter += 1;
        }
        let cm = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(net, test_set, cfg.batch)?)
        };
        let rec = EpochRecord {
            epoch,
            iter,
            lr,
            loss: total / per_epoch as f64,
            pix_acc: cm.as_ref().map_or(f64::NAN, |c| c.pixel_acc()),
            miou: cm.as_ref().map_or(f64::NAN, |c| c.miou()),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// One SGD iteration; returns the pre-update loss.
pub fn step<T: Scalar>(
    net: &mut ToyPdcNet<T>,
    opt: &mut Sgd<T>,
    batch: &super::Batch<T>,
    lr: f64,
    iter: usize,
) -> Result<f64> {
    let (loss, grads) = match net.loss_and_grads(batch) {
        Ok(v) => v,
        Err(Error::Numeric { .. }) => return Err(Error::Divergence { iter }),
        Err(e) => return Err(e),
    };
    let loss = loss.as_f64();
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { iter });
    }
    opt.step(net, &grads, lr);
    Ok(loss)
}
