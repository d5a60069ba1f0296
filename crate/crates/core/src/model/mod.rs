//! Tiny language model `M = {O, T, E}`: token embedding `E`, a stack of
//! pre-norm blocks `T` (single-head attention and a SiLU feed-forward, both
//! residual, RMS-normalized), output projection `O` (optionally tied to `E`)
//! and an optional classifier head for task mode.

mod checkpoint;
mod forward;
mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    batch_loss, forward, forward_with, loss_and_grads, loss_and_grads_with, Gradients,
};
pub use train::{
    accuracy, epoch_batches, fine_tune, predict_labels, predict_tokens, sgd_step, train_epoch,
    TrainSchedule,
};

/// Stabilizer inside the RMS norm square root.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Classifier width; 0 means no head.
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::param(field, "must be >= 1"));
            }
        }
        if self.classes == 1 {
            return Err(Error::param("classes", "a head needs at least 2 classes"));
        }
        Ok(())
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab: 256,
            dim: 32,
            layers: 1,
            hidden: 64,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-position logits over the vocabulary through `O`.
    Lm,
    /// Masked-mean pooled logits over the classes through the head.
    Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    dims: ModelDims,
    pub(crate) embed: Matrix,
    /// `None` when tied: the output projection is `embed` itself.
    pub(crate) output: Option<Matrix>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    pub head: Option<Head>,
}

impl LanguageModel {
    /// Random initialization from `rng`.
    pub fn init(dims: ModelDims, tied: bool, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            vocab,
            dim: d,
            layers,
            hidden: h,
            classes,
        } = dims;
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            Matrix::from_fn(rows, cols, |_, _| std * rng.next_normal())
        };
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = gauss(vocab, d, inv_sqrt(d));
        let output = (!tied).then(|| gauss(vocab, d, inv_sqrt(d)));
        let blocks = (0..layers)
            .map(|_| Block {
                attn_norm: vec![1.0; d],
                wq: gauss(d, d, inv_sqrt(d)),
                wk: gauss(d, d, inv_sqrt(d)),
                wv: gauss(d, d, inv_sqrt(d)),
                wo: gauss(d, d, 0.5 * inv_sqrt(d)),
                ffn_norm: vec![1.0; d],
                w1: gauss(d, h, inv_sqrt(d)),
                b1: vec![0.0; h],
                w2: gauss(h, d, 0.5 * inv_sqrt(h)),
                b2: vec![0.0; d],
            })
            .collect();
        let head = (classes > 0).then(|| Head {
            weight: gauss(classes, d, 0.1 * inv_sqrt(d)),
            bias: vec![0.0; classes],
        });
        Ok(LanguageModel {
            dims,
            embed,
            output,
            blocks,
            final_norm: vec![1.0; d],
            head,
        })
    }

    /// Same structure with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn is_tied(&self) -> bool {
        self.output.is_none()
    }

    /// Input embedding `W_E` (V×d).
    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    pub fn embedding_mut(&mut self) -> &mut Matrix {
        &mut self.embed
    }

    /// Output projection `W_O` (V×d); the embedding when tied.
    pub fn output(&self) -> &Matrix {
        self.output.as_ref().unwrap_or(&self.embed)
    }

    /// Separate output projection, `None` when tied.
    pub fn output_mut(&mut self) -> Option<&mut Matrix> {
        self.output.as_mut()
    }

    /// Replace the classifier head (or add one) with fresh weights.
    pub fn reset_head(&mut self, classes: usize, rng: &mut Rng) -> Result<()> {
        if classes < 2 {
            return Err(Error::param("classes", "a head needs at least 2 classes"));
        }
        let d = self.dims.dim;
        self.head = Some(Head {
            weight: Matrix::from_fn(classes, d, |_, _| {
                0.1 / (d as f64).sqrt() * rng.next_normal()
            }),
            bias: vec![0.0; classes],
        });
        self.dims.classes = classes;
        Ok(())
    }

    /// Parameter tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embedding".into(), self.embed.as_slice())];
        if let Some(o) = &self.output {
            out.push(("output".into(), o.as_slice()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("attn_norm"), &b.attn_norm));
            out.push((p("wq"), b.wq.as_slice()));
            out.push((p("wk"), b.wk.as_slice()));
            out.push((p("wv"), b.wv.as_slice()));
            out.push((p("wo"), b.wo.as_slice()));
            out.push((p("ffn_norm"), &b.ffn_norm));
            out.push((p("w1"), b.w1.as_slice()));
            out.push((p("b1"), &b.b1));
            out.push((p("w2"), b.w2.as_slice()));
            out.push((p("b2"), &b.b2));
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), h.weight.as_slice()));
            out.push(("head.bias".into(), &h.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> =
            vec![("embedding".into(), self.embed.data_mut())];
        if let Some(o) = &mut self.output {
            out.push(("output".into(), o.data_mut()));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("attn_norm"), &mut b.attn_norm));
            out.push((p("wq"), b.wq.data_mut()));
            out.push((p("wk"), b.wk.data_mut()));
            out.push((p("wv"), b.wv.data_mut()));
            out.push((p("wo"), b.wo.data_mut()));
            out.push((p("ffn_norm"), &mut b.ffn_norm));
            out.push((p("w1"), b.w1.data_mut()));
            out.push((p("b1"), &mut b.b1));
            out.push((p("w2"), b.w2.data_mut()));
            out.push((p("b2"), &mut b.b2));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(h) = &mut self.head {
            out.push(("head.weight".into(), h.weight.data_mut()));
            out.push(("head.bias".into(), &mut h.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 of the canonical checkpoint bytes.
    pub fn hash(&self) -> String {
        crate::codec::sha256_hex(&self.to_bytes())
    }

    /// SHA-256 over the representation layers only (`E`, and `O` when untied).
    pub fn representation_hash(&self) -> String {
        let mut bytes = Vec::new();
        for m in std::iter::once(&self.embed).chain(self.output.as_ref()) {
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::codec::sha256_hex(&bytes)
    }
}

/// Names of frozen parameter groups. Groups: `embedding`, `output`,
/// `representation` (both), `body` (blocks and final norm), `head`; any
/// exact tensor name or dotted prefix (`blocks.0`) also works.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeMask(BTreeSet<String>);

impl FreezeMask {
    pub const GROUPS: [&'static str; 5] = ["embedding", "output", "representation", "body", "head"];

    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn representation() -> Self {
        FreezeMask::of(["representation"])
    }

    pub fn all() -> Self {
        FreezeMask::of(["representation", "body", "head"])
    }

    pub fn of<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FreezeMask(names.into_iter().map(Into::into).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    /// Whether tensor `tensor` of a model with the given tying is frozen.
    pub fn is_frozen(&self, tensor: &str, tied: bool) -> bool {
        let rep = self.has("representation");
        let by_group = match tensor {
            "embedding" => rep || self.has("embedding") || (tied && self.has("output")),
            "output" => rep || self.has("output"),
            "final_norm" => self.has("body"),
            t if t.starts_with("blocks.") => self.has("body"),
            t if t.starts_with("head.") => self.has("head"),
            _ => false,
        };
        by_group
            || self.0.iter().any(|n| {
                tensor == n
                    || (tensor.len() > n.len()
                        && tensor.starts_with(n.as_str())
                        && tensor.as_bytes()[n.len()] == b'.')
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tied: bool) -> LanguageModel {
        let dims = ModelDims {
            vocab: 10,
            dim: 4,
            layers: 2,
            hidden: 6,
            classes: 3,
        };
        LanguageModel::init(dims, tied, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn tensor_order_is_canonical() {
        let names: Vec<String> = tiny(false).tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "output");
        assert_eq!(names[2], "blocks.0.attn_norm");
        assert_eq!(names.last().unwrap(), "head.bias");
        let tied: Vec<String> = tiny(true).tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(tied.len(), names.len() - 1);
        assert_eq!(tied[1], "blocks.0.attn_norm");
    }

    #[test]
    fn tied_output_is_embedding_storage() {
        let mut m = tiny(true);
        m.embedding_mut().set(2, 1, 9.5);
        assert_eq!(m.output().get(2, 1), 9.5);
        assert!(m.output_mut().is_none());
    }

    #[test]
    fn freeze_groups() {
        let f = FreezeMask::representation();
        assert!(f.is_frozen("embedding", false));
        assert!(f.is_frozen("output", false));
        assert!(!f.is_frozen("blocks.0.wq", false));
        let f = FreezeMask::of(["blocks.1"]);
        assert!(f.is_frozen("blocks.1.w2", false));
        assert!(!f.is_frozen("blocks.10.w2", false));
        assert!(!f.is_frozen("blocks.0.w2", false));
        let f = FreezeMask::of(["output"]);
        assert!(f.is_frozen("embedding", true));
        assert!(!f.is_frozen("embedding", false));
        let f = FreezeMask::all();
        for (n, _) in tiny(false).tensors() {
            assert!(f.is_frozen(&n, false), "{n}");
        }
    }

    #[test]
    fn bad_dims_rejected() {
        let d = ModelDims {
            dim: 0,
            ..ModelDims::default()
        };
        assert!(matches!(
            d.validate(),
            Err(Error::Param { field: "dim", .. })
        ));
        let d = ModelDims {
            classes: 1,
            ..ModelDims::default()
        };
        assert!(d.validate().is_err());
    }
}
