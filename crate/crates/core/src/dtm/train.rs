use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use super::model::{DtModel, Mode};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::timeseries::WindowPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Treat the forecast as a constant target in the reconstruction term.
    pub detach_forecast_in_recon: bool,
    /// Stop once validation loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            detach_forecast_in_recon: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: DtModel,
    v: DtModel,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &DtModel, cfg: &TrainConfig) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// Applies one update with the (already averaged) gradient.
    pub fn step(&mut self, model: &mut DtModel, grads: &DtModel) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let grads = grads.named_tensors();
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(
            out,
            "epoch,train_forecast,train_recon,train_total,val_forecast,val_recon,val_total"
        )
        .map_err(io)?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train.forecast,
                r.train.recon,
                r.train.total,
                r.val.forecast,
                r.val.recon,
                r.val.total
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Mean eval-mode loss over a set of windows.
pub fn evaluate_loss(model: &DtModel, windows: &[WindowPair]) -> Result<LossBreakdown> {
    if windows.is_empty() {
        return Err(Error::invalid("cannot evaluate loss on zero windows"));
    }
    let (mut f, mut r) = (0.0, 0.0);
    for w in windows {
        let l = model.loss(&w.input, &w.target, Mode::Eval)?;
        f += l.forecast;
        r += l.recon;
    }
    let n = windows.len() as f64;
    Ok(LossBreakdown::new(f / n, r / n))
}

/// Minibatch Adam training. See [`train_with`].
pub fn train(
    model: DtModel,
    train_windows: &[WindowPair],
    val_windows: &[WindowPair],
    cfg: &TrainConfig,
) -> Result<(DtModel, TrainHistory)> {
    train_with(model, train_windows, val_windows, cfg, |_| {})
}

/// Minibatch Adam training with a callback after every epoch.
///
/// Each epoch visits the training windows in a permutation drawn from
/// `(seed, "shuffle", epoch)`; each sample's dropout masks come from
/// `(seed, "dropout", epoch, position)`. The run is therefore a pure function
/// of the inputs and `cfg`.
pub fn train_with(
    mut model: DtModel,
    train_windows: &[WindowPair],
    val_windows: &[WindowPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DtModel, TrainHistory)> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation splits",
        ));
    }
    let mut opt = Adam::new(&model, cfg);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, "shuffle", &[epoch as u64]));
        let (mut sum_f, mut sum_r) = (0.0, 0.0);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.zeros_like();
            let (mut bf, mut br) = (0.0, 0.0);
            for (i, &wi) in batch.iter().enumerate() {
                let w = &train_windows[wi];
                let pos = (batch_idx * cfg.batch_size + i) as u64;
                let mut rng = stream(cfg.seed, "dropout", &[epoch as u64, pos]);
                let l = model.loss_and_grad(
                    &w.input,
                    &w.target,
                    Some(&mut rng),
                    cfg.detach_forecast_in_recon,
                    &mut grads,
                )?;
                if !l.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: batch_idx + 1,
                    });
                }
                bf += l.forecast;
                br += l.recon;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.tensors_mut() {
                *g *= scale;
            }
            opt.step(&mut model, &grads);
            sum_f += bf;
            sum_r += br;
        }
        let n = train_windows.len() as f64;
        let val = evaluate_loss(&model, val_windows)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train: LossBreakdown::new(sum_f / n, sum_r / n),
            val,
        };
        on_epoch(&record);
        history.epochs.push(record);

        if let Some(patience) = cfg.patience {
            if val.total < best {
                best = val.total;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok((model, history))
}
