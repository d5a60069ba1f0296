//! Adaptation after shaking: awareness recovery (reconstruct the encoded
//! input, `Y = X`) followed by functional recovery (supervised task labels).
//! Both phases see only encoded ids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::AdaptDataset;
use crate::error::{Error, Result};
use crate::keys::HorizontalKey;
use crate::model::{
    accuracy, batch_loss, predict_labels, predict_tokens, train_epoch, FreezeMask, LanguageModel,
    TrainSchedule,
};
use crate::numeric::Rng;
use crate::privacy::encode_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverConfig {
    pub awareness_epochs: usize,
    pub functional_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Tensors held fixed; by default the representation layers, so the
    /// implanted key survives recovery.
    pub freeze: FreezeMask,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Per-epoch linear decay target, as a fraction of `lr`.
    pub end_lr_ratio: Option<f64>,
    /// Awareness stops early once an epoch improves the training loss by
    /// less than this fraction.
    pub plateau: f64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            awareness_epochs: 3,
            functional_epochs: 3,
            lr: 0.1,
            batch_size: 32,
            freeze: FreezeMask::representation(),
            seed: 0,
            clip: Some(1.0),
            end_lr_ratio: Some(0.05),
            plateau: 1e-3,
        }
    }
}

impl RecoverConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule(0).validate()?;
        if !(self.plateau >= 0.0 && self.plateau.is_finite()) {
            return Err(Error::param("plateau", "must be finite and >= 0"));
        }
        Ok(())
    }

    fn schedule(&self, epochs: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            clip: self.clip,
            end_lr_ratio: self.end_lr_ratio,
        }
    }

    /// Settings for vertical round `round`: round 0 keeps the seed, later
    /// rounds shuffle from a derived stream.
    pub fn for_round(&self, round: usize) -> RecoverConfig {
        let mut c = self.clone();
        if round > 0 {
            c.seed = Rng::stream(self.seed, &format!("round-{round}")).next_u64();
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Awareness,
    Functional,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Awareness => "awareness",
            Phase::Functional => "functional",
        }
    }
}

/// One line of a recovery trace. Epoch 0 is the evaluation before any
/// training and has no training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    /// Token reconstruction accuracy (awareness) or label accuracy (functional).
    pub accuracy: f64,
}

fn evaluate(m: &LanguageModel, data: &AdaptDataset, phase: Phase) -> Result<(f64, f64)> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let inputs = data.inputs();
    match phase {
        Phase::Awareness => {
            let loss = batch_loss(m, &data.awareness_batch(&rows))?;
            let pred = predict_tokens(m, &inputs)?;
            let flat_pred: Vec<u32> = pred.concat();
            let flat_true: Vec<u32> = inputs.concat();
            Ok((loss, accuracy(&flat_pred, &flat_true)))
        }
        Phase::Functional => {
            let loss = batch_loss(m, &data.task_batch(&rows)?)?;
            let labels = data.labels().expect("checked labeled");
            Ok((loss, accuracy(&predict_labels(m, &inputs)?, &labels)))
        }
    }
}

fn run_phase(
    m: &mut LanguageModel,
    train: &AdaptDataset,
    heldout: Option<&AdaptDataset>,
    phase: Phase,
    epochs: usize,
    cfg: &RecoverConfig,
) -> Result<Vec<EpochRecord>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    cfg.validate()?;
    let eval_set = heldout.unwrap_or(train);
    let schedule = cfg.schedule(epochs);
    let (eval_loss, acc) = evaluate(m, eval_set, phase)?;
    let mut trace = vec![EpochRecord {
        phase,
        epoch: 0,
        train_loss: None,
        eval_loss,
        accuracy: acc,
    }];
    let mut previous: Option<f64> = None;
    for epoch in 1..=epochs {
        let loss = match phase {
            Phase::Awareness => train_epoch(
                m,
                train.len(),
                |rows| Ok(train.awareness_batch(rows)),
                &schedule,
                &cfg.freeze,
                phase.name(),
                epoch - 1,
            )?,
            Phase::Functional => train_epoch(
                m,
                train.len(),
                |rows| train.task_batch(rows),
                &schedule,
                &cfg.freeze,
                phase.name(),
                epoch - 1,
            )?,
        };
        let (eval_loss, acc) = evaluate(m, eval_set, phase).map_err(|e| e.at(Some(epoch), None))?;
        trace.push(EpochRecord {
            phase,
            epoch,
            train_loss: Some(loss),
            eval_loss,
            accuracy: acc,
        });
        if phase == Phase::Awareness {
            if let Some(prev) = previous {
                if (prev - loss) / prev.abs().max(f64::MIN_POSITIVE) < cfg.plateau {
                    log::debug!("awareness plateaued at epoch {epoch}");
                    break;
                }
            }
        }
        previous = Some(loss);
    }
    Ok(trace)
}

/// Self-reconstruction training on encoded inputs (targets are the inputs).
/// Returns the trace, starting with the pre-training evaluation.
pub fn awareness_recover(
    m: &mut LanguageModel,
    data: &AdaptDataset,
    heldout: Option<&AdaptDataset>,
    hs: &HorizontalKey,
    cfg: &RecoverConfig,
) -> Result<Vec<EpochRecord>> {
    if cfg.awareness_epochs == 0 {
        return Ok(Vec::new());
    }
    let train = encode_dataset(data, hs, None)?;
    let held = heldout.map(|h| encode_dataset(h, hs, None)).transpose()?;
    run_phase(
        m,
        &train,
        held.as_ref(),
        Phase::Awareness,
        cfg.awareness_epochs,
        cfg,
    )
}

/// Supervised training on encoded inputs and their labels; accuracy in the
/// trace is measured on `heldout` when given, else on the training data.
pub fn functional_recover(
    m: &mut LanguageModel,
    data: &AdaptDataset,
    heldout: Option<&AdaptDataset>,
    hs: &HorizontalKey,
    cfg: &RecoverConfig,
) -> Result<Vec<EpochRecord>> {
    if cfg.functional_epochs == 0 {
        return Ok(Vec::new());
    }
    if !data.has_labels() {
        return Err(Error::Config(
            "functional recovery needs labeled data".into(),
        ));
    }
    let train = encode_dataset(data, hs, None)?;
    let held = heldout.map(|h| encode_dataset(h, hs, None)).transpose()?;
    run_phase(
        m,
        &train,
        held.as_ref(),
        Phase::Functional,
        cfg.functional_epochs,
        cfg,
    )
}

/// Tab-separated metrics log: `round epoch phase train_loss eval_loss accuracy`.
pub fn metrics_log<'a>(records: impl IntoIterator<Item = (usize, &'a EpochRecord)>) -> String {
    let mut s = String::from("round\tepoch\tphase\ttrain_loss\teval_loss\taccuracy\n");
    for (round, r) in records {
        let train = r
            .train_loss
            .map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        let _ = writeln!(
            s,
            "{round}\t{}\t{}\t{train}\t{:.6}\t{:.4}",
            r.epoch,
            r.phase.name(),
            r.eval_loss,
            r.accuracy
        );
    }
    s
}
