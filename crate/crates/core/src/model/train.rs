use serde::{Deserialize, Serialize};

use super::{forward, loss_and_grads, FreezeMask, Gradients, LanguageModel, Mode};
use crate::data::{AdaptDataset, Batch};
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Epoch count, batch size, learning rate α, and the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip applied before each step.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Within every epoch the step size falls linearly from `lr` to
    /// `lr * end_lr_ratio` and restarts at the next epoch.
    #[serde(default)]
    pub end_lr_ratio: Option<f64>,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("must be > 0, got {}", self.lr)));
        }
        if let Some(r) = self.end_lr_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::param(
                    "end_lr_ratio",
                    format!("must be in (0, 1], got {r}"),
                ));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::param("clip", format!("must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

impl TrainSchedule {
    /// Step size for batch `b` of an epoch with `batches` batches.
    pub fn step_lr(&self, b: usize, batches: usize) -> f64 {
        match self.end_lr_ratio {
            Some(r) => {
                let last = batches.saturating_sub(1).max(1) as f64;
                self.lr * (1.0 - (1.0 - r) * b as f64 / last)
            }
            None => self.lr,
        }
    }
}

/// Shuffled row batches for one epoch; a pure function of its arguments.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    label: &str,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, &format!("{label}/epoch-{epoch}")).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// `w ← w − α·g` for every unfrozen tensor. Frozen tensors are not touched.
pub fn sgd_step(
    m: &mut LanguageModel,
    grads: &Gradients,
    lr: f64,
    freeze: &FreezeMask,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param("lr", format!("must be > 0, got {lr}")));
    }
    let tied = m.is_tied();
    let params = m.tensors_mut();
    let grads: Vec<(String, Option<&[f64]>)> = grads.iter().collect();
    if params.len() != grads.len() {
        return Err(Error::Incompatible(
            "gradient set does not match model structure".into(),
        ));
    }
    for ((name, w), (gname, g)) in params.into_iter().zip(grads) {
        if name != gname {
            return Err(Error::Incompatible(format!(
                "gradient {gname} for tensor {name}"
            )));
        }
        let Some(g) = g else { continue };
        if freeze.is_frozen(&name, tied) {
            continue;
        }
        if g.len() != w.len() {
            return Err(Error::Incompatible(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("tensor {name} became non-finite")));
        }
    }
    Ok(())
}

/// One SGD pass over `n` examples in shuffled batches built by `make_batch`.
/// Returns the mean batch loss. Numerical errors carry the epoch and batch.
pub fn train_epoch(
    m: &mut LanguageModel,
    n: usize,
    make_batch: impl Fn(&[usize]) -> Result<Batch>,
    schedule: &TrainSchedule,
    freeze: &FreezeMask,
    label: &str,
    epoch: usize,
) -> Result<f64> {
    schedule.validate()?;
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let batches = epoch_batches(n, schedule.batch_size, schedule.seed, label, epoch);
    let mut total = 0.0;
    for (b, rows) in batches.iter().enumerate() {
        let lr = schedule.step_lr(b, batches.len());
        let batch = make_batch(rows)?;
        let (loss, mut grads) =
            loss_and_grads(m, &batch, freeze).map_err(|e| e.at(Some(epoch), Some(b)))?;
        if let Some(c) = schedule.clip {
            grads.clip_norm(c);
        }
        sgd_step(m, &grads, lr, freeze).map_err(|e| e.at(Some(epoch), Some(b)))?;
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Plain supervised fine-tuning on labeled data; returns per-epoch mean loss.
pub fn fine_tune(
    m: &mut LanguageModel,
    data: &AdaptDataset,
    schedule: &TrainSchedule,
    freeze: &FreezeMask,
) -> Result<Vec<f64>> {
    (0..schedule.epochs)
        .map(|e| {
            train_epoch(
                m,
                data.len(),
                |rows| data.task_batch(rows),
                schedule,
                freeze,
                "tune",
                e,
            )
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per sequence (ties resolve to the lowest index).
pub fn predict_labels(m: &LanguageModel, inputs: &[Vec<u32>]) -> Result<Vec<u32>> {
    Ok(forward(m, inputs, Mode::Task)?
        .iter()
        .map(|l| argmax(l.as_slice()) as u32)
        .collect())
}

/// Argmax token per position.
pub fn predict_tokens(m: &LanguageModel, inputs: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
    Ok(forward(m, inputs, Mode::Lm)?
        .iter()
        .map(|l| (0..l.rows()).map(|r| argmax(l.row(r)) as u32).collect())
        .collect())
}

pub fn accuracy(predicted: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, SyntheticTask};
    use crate::model::{loss_and_grads, ModelDims};

    fn tiny() -> LanguageModel {
        let dims = ModelDims {
            vocab: 12,
            dim: 4,
            layers: 1,
            hidden: 6,
            classes: 2,
        };
        LanguageModel::init(dims, false, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_model_bit_identical() {
        let mut m = tiny();
        let before = m.clone();
        let g = Gradients::zeros(&m, &FreezeMask::none());
        sgd_step(&mut m, &g, 0.5, &FreezeMask::none()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn fully_frozen_model_unchanged() {
        let mut m = tiny();
        let before = m.clone();
        let batch = Batch::task(vec![vec![1, 2, 3]], vec![1]);
        let (_, g) = loss_and_grads(&m, &batch, &FreezeMask::none()).unwrap();
        sgd_step(&mut m, &g, 0.5, &FreezeMask::all()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn quadratic_step_matches_closed_form() {
        // f(w) = Σ (w - c)², ∇f = 2(w - c), so w' = w - 2α(w - c).
        let mut m = tiny();
        let c = 0.25;
        let alpha = 0.1;
        let before = m.clone();
        let mut g = Gradients::zeros(&m, &FreezeMask::none());
        for ((_, gt), (_, wt)) in g.tensors_mut().into_iter().zip(before.tensors()) {
            for (gi, wi) in gt.iter_mut().zip(wt) {
                *gi = 2.0 * (wi - c);
            }
        }
        sgd_step(&mut m, &g, alpha, &FreezeMask::none()).unwrap();
        for ((_, after), (_, orig)) in m.tensors().into_iter().zip(before.tensors()) {
            for (a, w) in after.iter().zip(orig) {
                assert_eq!(*a, w - alpha * (2.0 * (w - c)));
            }
        }
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let mut m = tiny();
        let g = Gradients::zeros(&m, &FreezeMask::none());
        assert!(sgd_step(&mut m, &g, 0.0, &FreezeMask::none()).is_err());
    }

    #[test]
    fn separable_task_reaches_full_train_accuracy() {
        let dims = ModelDims {
            vocab: 64,
            dim: 16,
            layers: 1,
            hidden: 32,
            classes: 4,
        };
        let mut m = LanguageModel::init(dims, true, &mut Rng::new(2)).unwrap();
        let data = SyntheticTask::separable(64, 4, 256, 6, 3).unwrap();
        let freeze = FreezeMask::none();
        let mut steps = 0;
        'outer: for epoch in 0.. {
            for rows in epoch_batches(data.len(), 32, 9, "sanity", epoch) {
                let batch = data.task_batch(&rows).unwrap();
                let (_, g) = loss_and_grads(&m, &batch, &freeze).unwrap();
                sgd_step(&mut m, &g, 0.5, &freeze).unwrap();
                steps += 1;
                if steps == 200 {
                    break 'outer;
                }
            }
        }
        let pred = predict_labels(&m, &data.inputs()).unwrap();
        let acc = accuracy(&pred, &data.labels().unwrap());
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn batches_cover_every_row_once() {
        let b = epoch_batches(10, 3, 4, "x", 0);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b.len(), 4);
        assert_ne!(epoch_batches(10, 3, 4, "x", 1), b);
    }
}
