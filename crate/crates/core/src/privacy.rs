//! Client-side encoding and the private tuning and inference flows. The
//! server half of each flow ([`apply_tune_batch`], [`serve_infer`]) only ever
//! receives encoded ids and shaken labels.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{AdaptDataset, Batch, Example, Target};
use crate::error::{Error, Result};
use crate::keys::{HorizontalKey, KeyPair};
use crate::model::{
    epoch_batches, forward, loss_and_grads, sgd_step, FreezeMask, LanguageModel, Mode, ModelDims,
    TrainSchedule,
};
use crate::numeric::Rng;

fn map_ids(ids: &[u32], table: &[u32]) -> Result<Vec<u32>> {
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            table.get(id as usize).copied().ok_or_else(|| Error::Input {
                position: pos,
                reason: format!("id {id} outside vocabulary of {}", table.len()),
            })
        })
        .collect()
}

/// `out[i] = tab[ids[i]]`.
pub fn encode_ids(ids: &[u32], hs: &HorizontalKey) -> Result<Vec<u32>> {
    map_ids(ids, hs.table())
}

/// Inverse of [`encode_ids`].
pub fn decode_ids(ids: &[u32], hs: &HorizontalKey) -> Result<Vec<u32>> {
    map_ids(ids, hs.inverse_table())
}

/// Client-held permutation of class labels, so labels on the wire are
/// shaken too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelKey {
    perm: Vec<u32>,
    inv: Vec<u32>,
}

impl LabelKey {
    pub fn identity(classes: usize) -> Self {
        let perm: Vec<u32> = (0..classes as u32).collect();
        LabelKey {
            inv: perm.clone(),
            perm,
        }
    }

    pub fn derive(seed: u64, classes: usize) -> Self {
        let mut perm: Vec<u32> = (0..classes as u32).collect();
        Rng::stream(seed, "label-key").shuffle(&mut perm);
        let mut inv = vec![0; classes];
        for (i, &p) in perm.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        LabelKey { perm, inv }
    }

    pub fn classes(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| p == i as u32)
    }

    pub fn encode(&self, label: u32) -> Result<u32> {
        self.perm
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::Input {
                position: 0,
                reason: format!("label {label} outside {} classes", self.classes()),
            })
    }

    pub fn decode(&self, label: u32) -> Result<u32> {
        self.inv
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::Input {
                position: 0,
                reason: format!("label {label} outside {} classes", self.classes()),
            })
    }
}

/// Everything the client needs to talk to an implanted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientKeys {
    pub hs: HorizontalKey,
    pub labels: LabelKey,
}

impl ClientKeys {
    /// Keys for a model implanted with `kp`. The label permutation derives
    /// from the key seed; a null key or `shake_labels = false` keeps labels as is.
    pub fn from_keypair(kp: &KeyPair, hs_once: bool, classes: usize, shake_labels: bool) -> Self {
        let labels = if shake_labels && !kp.is_null() {
            LabelKey::derive(kp.seed, classes)
        } else {
            LabelKey::identity(classes)
        };
        ClientKeys {
            hs: kp.encoding_key(hs_once),
            labels,
        }
    }

    pub fn identity(vocab: usize, classes: usize) -> Self {
        ClientKeys {
            hs: HorizontalKey::identity(vocab),
            labels: LabelKey::identity(classes),
        }
    }

    fn check(&self, m: &LanguageModel) -> Result<()> {
        self.check_dims(m.dims())
    }

    /// Incompatibility error if these keys cannot drive a model of `dims`.
    pub fn check_dims(&self, dims: ModelDims) -> Result<()> {
        if self.hs.len() != dims.vocab {
            return Err(Error::Incompatible(format!(
                "client table covers {} ids, model vocabulary is {}",
                self.hs.len(),
                dims.vocab
            )));
        }
        if self.labels.classes() != dims.classes {
            return Err(Error::Incompatible(format!(
                "client label key has {} classes, model has {}",
                self.labels.classes(),
                dims.classes
            )));
        }
        Ok(())
    }
}

/// Encode inputs (and token targets) with `hs`; labels go through `labels` when given.
pub fn encode_dataset(
    data: &AdaptDataset,
    hs: &HorizontalKey,
    labels: Option<&LabelKey>,
) -> Result<AdaptDataset> {
    data.examples
        .iter()
        .enumerate()
        .map(|(row, e)| {
            let at_row = |err: Error| match err {
                Error::Input { reason, .. } => Error::Input {
                    position: row,
                    reason: format!("record {row}: {reason}"),
                },
                other => other,
            };
            let ids = encode_ids(&e.ids, hs).map_err(at_row)?;
            let target = match &e.target {
                Target::Tokens(t) => Target::Tokens(encode_ids(t, hs).map_err(at_row)?),
                Target::Label(l) => Target::Label(match labels {
                    Some(k) => k.encode(*l).map_err(at_row)?,
                    None => *l,
                }),
            };
            Ok(Example { ids, target })
        })
        .collect::<Result<Vec<_>>>()
        .map(AdaptDataset::new)
}

/// Server-ready model: head rows are permuted so the model answers in the
/// shaken label space. Identity label keys return the model unchanged.
pub fn deploy(m: &LanguageModel, labels: &LabelKey) -> Result<LanguageModel> {
    let mut out = m.clone();
    if labels.is_identity() {
        return Ok(out);
    }
    let head = out
        .head
        .as_mut()
        .ok_or_else(|| Error::Config("label shaking needs a classifier head".into()))?;
    if head.weight.rows() != labels.classes() {
        return Err(Error::Incompatible(
            "label key size differs from head".into(),
        ));
    }
    head.weight = head.weight.scatter_rows(&labels.perm);
    let mut bias = vec![0.0; head.bias.len()];
    for (c, &p) in labels.perm.iter().enumerate() {
        bias[p as usize] = head.bias[c];
    }
    head.bias = bias;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip: Option<f64>,
    pub end_lr_ratio: Option<f64>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 3,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            clip: Some(1.0),
            end_lr_ratio: Some(0.05),
        }
    }
}

impl TuneConfig {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            clip: self.clip,
            end_lr_ratio: self.end_lr_ratio,
        }
    }
}

/// One encoded training step as sent to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneBatch {
    pub inputs: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
    pub lr: f64,
    #[serde(default)]
    pub clip: Option<f64>,
}

/// Client side of private tuning: shuffle, batch and encode. Batch order
/// matches [`crate::model::fine_tune`] for the same schedule.
pub fn client_batches(
    data: &AdaptDataset,
    keys: &ClientKeys,
    cfg: &TuneConfig,
) -> Result<Vec<TuneBatch>> {
    cfg.schedule().validate()?;
    if cfg.epochs > 0 && !data.has_labels() {
        return Err(Error::Config("private tuning needs labeled data".into()));
    }
    let encoded = encode_dataset(data, &keys.hs, Some(&keys.labels))?;
    let schedule = cfg.schedule();
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(encoded.len(), cfg.batch_size, cfg.seed, "tune", epoch);
        let count = batches.len();
        for (b, rows) in batches.into_iter().enumerate() {
            let Batch { inputs, targets } = encoded.task_batch(&rows)?;
            let crate::data::Targets::Labels(labels) = targets else {
                unreachable!("task batch carries labels")
            };
            out.push(TuneBatch {
                inputs,
                labels,
                lr: schedule.step_lr(b, count),
                clip: cfg.clip,
            });
        }
    }
    Ok(out)
}

/// Server side of one tuning step. The representation layers stay frozen.
pub fn apply_tune_batch(m: &mut LanguageModel, batch: &TuneBatch) -> Result<f64> {
    let freeze = FreezeMask::representation();
    let b = Batch::task(batch.inputs.clone(), batch.labels.clone());
    let (loss, mut grads) = loss_and_grads(m, &b, &freeze)?;
    if let Some(c) = batch.clip {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::param("clip", format!("must be > 0, got {c}")));
        }
        grads.clip_norm(c);
    }
    sgd_step(m, &grads, batch.lr, &freeze)?;
    Ok(loss)
}

/// Private fine-tuning of an implanted (and deployed) model on raw data.
/// Returns the per-step losses.
pub fn private_tune(
    m: &mut LanguageModel,
    data: &AdaptDataset,
    keys: &ClientKeys,
    cfg: &TuneConfig,
) -> Result<Vec<f64>> {
    keys.check(m)?;
    let batches = client_batches(data, keys, cfg)?;
    let per_epoch = batches.len().checked_div(cfg.epochs).unwrap_or(0).max(1);
    batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            apply_tune_batch(m, b).map_err(|e| e.at(Some(i / per_epoch), Some(i % per_epoch)))
        })
        .collect()
}

/// Prediction for one input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Argmax token per position (lm mode).
    Tokens(Vec<u32>),
    /// Class label (task mode).
    Label(u32),
}

/// Server side of inference: predictions in the encoded id / label space.
pub fn serve_infer(m: &LanguageModel, encoded: &[Vec<u32>], mode: Mode) -> Result<Vec<Prediction>> {
    let logits = forward(m, encoded, mode)?;
    Ok(logits
        .iter()
        .map(|l| match mode {
            Mode::Lm => Prediction::Tokens((0..l.rows()).map(|r| argmax(l.row(r))).collect()),
            Mode::Task => Prediction::Label(argmax(l.row(0))),
        })
        .collect())
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl ClientKeys {
    pub fn encode_inputs(&self, inputs: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        inputs.iter().map(|x| encode_ids(x, &self.hs)).collect()
    }

    /// Map a server prediction back to original ids / labels.
    pub fn decode_prediction(&self, p: &Prediction) -> Result<Prediction> {
        Ok(match p {
            Prediction::Tokens(t) => Prediction::Tokens(decode_ids(t, &self.hs)?),
            Prediction::Label(l) => Prediction::Label(self.labels.decode(*l)?),
        })
    }
}

/// Encode, run, decode.
pub fn private_infer(
    m: &LanguageModel,
    inputs: &[Vec<u32>],
    keys: &ClientKeys,
    mode: Mode,
) -> Result<Vec<Prediction>> {
    keys.check(m)?;
    let encoded = keys.encode_inputs(inputs)?;
    serve_infer(m, &encoded, mode)?
        .iter()
        .map(|p| keys.decode_prediction(p))
        .collect()
}

/// Plain-text hook run on raw client text before tokenization.
pub trait Scrubber {
    fn scrub(&self, text: &str) -> String;
}

/// Replaces every match of its patterns with a placeholder.
#[derive(Debug, Clone)]
pub struct PatternRedactor {
    patterns: Vec<Regex>,
    replacement: String,
}

impl PatternRedactor {
    pub fn new<I, S>(patterns: I, replacement: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                Regex::new(p.as_ref())
                    .map_err(|e| Error::Config(format!("bad redaction pattern: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(PatternRedactor {
            patterns,
            replacement: replacement.into(),
        })
    }
}

impl Default for PatternRedactor {
    /// Emails, phone-like numbers and long digit runs.
    fn default() -> Self {
        PatternRedactor::new(
            [
                r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}",
                r"\+?\d[\d\- ]{6,}\d",
                r"\d{4,}",
            ],
            "[REDACTED]",
        )
        .expect("built-in patterns compile")
    }
}

impl Scrubber for PatternRedactor {
    fn scrub(&self, text: &str) -> String {
        let mut out = text.to_string();
        for p in &self.patterns {
            out = p.replace_all(&out, self.replacement.as_str()).into_owned();
        }
        out
    }
}

/// Byte-level tokenizer: each UTF-8 byte is one id (needs V ≥ 256).
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Scrub raw text, then tokenize it.
pub fn prepare_text(text: &str, scrubber: &dyn Scrubber) -> Vec<u32> {
    ByteTokenizer.encode(&scrubber.scrub(text))
}
