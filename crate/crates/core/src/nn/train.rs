use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::params::{Mat, ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement of the monitored loss before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Evaluation-mode training loss after each epoch.
    pub train_losses: Vec<f64>,
    /// Validation loss after each epoch, empty without a validation set.
    pub valid_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl FitReport {
    pub fn epochs_run(&self) -> usize {
        self.train_losses.len()
    }
}

/// Mini-batch Adam training with early stopping on the validation loss (or
/// the training loss when `valid` is empty). The parameters of the best
/// epoch are restored on return.
///
/// `batch_loss` builds the mean loss of a batch on a training-mode tape;
/// `eval_loss` returns the mean loss of a whole split in evaluation mode.
pub fn fit<I, B, E>(
    store: &mut ParamStore,
    trainable: Vec<ParamId>,
    adam: AdamConfig,
    schedule: &Schedule,
    train: &[I],
    valid: &[I],
    batch_loss: B,
    eval_loss: E,
) -> FitReport
where
    B: Fn(&mut Tape, &[&I]) -> Var,
    E: Fn(&ParamStore, &[I]) -> f64,
{
    let mut report = FitReport::default();
    if train.is_empty() || schedule.epochs == 0 {
        return report;
    }
    let mut opt = Adam::for_params(store, trainable, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut best_values: Option<Vec<Mat>> = None;
    let mut stale = 0;
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(schedule.batch_size.max(1)) {
            let batch: Vec<&I> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = {
                let mut tape = Tape::training(store, ChaCha8Rng::seed_from_u64(rng.next_u64()));
                let loss = batch_loss(&mut tape, &batch);
                tape.backward(loss)
            };
            opt.step(store, &mut grads);
        }
        let train_loss = eval_loss(store, train);
        report.train_losses.push(train_loss);
        let monitored = if valid.is_empty() {
            train_loss
        } else {
            let v = eval_loss(store, valid);
            report.valid_losses.push(v);
            v
        };
        if monitored < best {
            best = monitored;
            report.best_epoch = epoch;
            best_values = Some(store.iter().map(|(_, _, v)| v.clone()).collect());
            stale = 0;
        } else {
            stale += 1;
            if schedule.patience > 0 && stale >= schedule.patience {
                break;
            }
        }
    }
    if let Some(values) = best_values {
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            store.set(id, v);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fits_a_line_and_keeps_best_epoch() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.0]]);
        let data: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 / 10.0, 3.0 * i as f64 / 10.0)).collect();
        let loss_of = |t: &mut Tape, batch: &[&(f64, f64)]| {
            let x = t.constant(Mat::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].0));
            let y = t.constant(Mat::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].1));
            let wv = t.param(w);
            let p = t.matmul(x, wv);
            let d = t.sub(p, y);
            let sq = t.mul(d, d);
            t.mean(sq)
        };
        let eval = |s: &ParamStore, split: &[(f64, f64)]| {
            let mut t = Tape::new(s);
            let refs: Vec<&(f64, f64)> = split.iter().collect();
            let l = loss_of(&mut t, &refs);
            t.value(l)[[0, 0]]
        };
        let sched = Schedule {
            epochs: 300,
            batch_size: 5,
            patience: 0,
            seed: 1,
        };
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let report = fit(&mut store, vec![w], cfg, &sched, &data, &[], loss_of, eval);
        assert_eq!(report.epochs_run(), 300);
        assert!((store.get(w)[[0, 0]] - 3.0).abs() < 1e-2);
        let best = report.train_losses[report.best_epoch - 1];
        assert!(report.train_losses.iter().all(|&l| l >= best));
    }
}
