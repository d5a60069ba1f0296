//! Token-id datasets, training batches and the line-oriented dataset format.
//!
//! One record per line, fields separated by a TAB:
//!
//! ```text
//! 12 7 40 3<TAB>2            task record: ids, class label
//! 12 7 40 3<TAB>12 7 40 3    lm record: ids, target ids (same length)
//! ```

mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelDims};

pub use synthetic::{SyntheticConfig, SyntheticTask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Label(u32),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub target: Target,
}

/// `(X, Y)` pairs used for recovery and tuning.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdaptDataset {
    pub examples: Vec<Example>,
}

impl AdaptDataset {
    pub fn new(examples: Vec<Example>) -> Self {
        AdaptDataset { examples }
    }

    pub fn from_labeled(inputs: Vec<Vec<u32>>, labels: Vec<u32>) -> Self {
        AdaptDataset {
            examples: inputs
                .into_iter()
                .zip(labels)
                .map(|(ids, l)| Example {
                    ids,
                    target: Target::Label(l),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<u32>> {
        self.examples.iter().map(|e| e.ids.clone()).collect()
    }

    /// Class labels, if every record carries one.
    pub fn labels(&self) -> Option<Vec<u32>> {
        self.examples
            .iter()
            .map(|e| match e.target {
                Target::Label(l) => Some(l),
                Target::Tokens(_) => None,
            })
            .collect()
    }

    pub fn has_labels(&self) -> bool {
        !self.is_empty() && self.labels().is_some()
    }

    /// Task batch over the selected rows.
    pub fn task_batch(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            let e = &self.examples[r];
            match e.target {
                Target::Label(l) => {
                    inputs.push(e.ids.clone());
                    labels.push(l);
                }
                Target::Tokens(_) => {
                    return Err(Error::Input {
                        position: r,
                        reason: "record has no class label".into(),
                    })
                }
            }
        }
        Ok(Batch::task(inputs, labels))
    }

    /// Self-reconstruction batch (`Y = X`) over the selected rows.
    pub fn awareness_batch(&self, rows: &[usize]) -> Batch {
        let inputs: Vec<Vec<u32>> = rows.iter().map(|&r| self.examples[r].ids.clone()).collect();
        Batch::lm(inputs.clone(), inputs)
    }

    /// Lm batch using each record's token targets.
    pub fn lm_batch(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for &r in rows {
            let e = &self.examples[r];
            match &e.target {
                Target::Tokens(t) => {
                    inputs.push(e.ids.clone());
                    targets.push(t.clone());
                }
                Target::Label(_) => {
                    return Err(Error::Input {
                        position: r,
                        reason: "record has no target ids".into(),
                    })
                }
            }
        }
        Ok(Batch::lm(inputs, targets))
    }

    pub fn parse(text: &str, mode: Mode) -> Result<Self> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Input {
                position: lineno + 1,
                reason,
            };
            let (ids, rest) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected two TAB-separated fields".into()))?;
            let ids = parse_ids(ids).map_err(&bad)?;
            if ids.is_empty() {
                return Err(bad("empty id sequence".into()));
            }
            let target = match mode {
                Mode::Task => Target::Label(
                    rest.trim()
                        .parse()
                        .map_err(|e| bad(format!("bad label {rest:?}: {e}")))?,
                ),
                Mode::Lm => {
                    let t = parse_ids(rest).map_err(&bad)?;
                    if t.len() != ids.len() {
                        return Err(bad(format!(
                            "{} target ids for {} inputs",
                            t.len(),
                            ids.len()
                        )));
                    }
                    Target::Tokens(t)
                }
            };
            examples.push(Example { ids, target });
        }
        Ok(AdaptDataset { examples })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&join_ids(&e.ids));
            out.push('\t');
            match &e.target {
                Target::Label(l) => {
                    let _ = write!(out, "{l}");
                }
                Target::Tokens(t) => out.push_str(&join_ids(t)),
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>, mode: Mode) -> Result<Self> {
        AdaptDataset::parse(&fs::read_to_string(path)?, mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// First `n` records.
    pub fn head(&self, n: usize) -> AdaptDataset {
        AdaptDataset {
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }
}

fn parse_ids(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|e| format!("bad id {t:?}: {e}")))
        .collect()
}

fn join_ids(ids: &[u32]) -> String {
    let mut s = String::with_capacity(ids.len() * 4);
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

/// Training targets for a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    /// One target id per input position (lm mode).
    Tokens(Vec<Vec<u32>>),
    /// One class per sequence (task mode).
    Labels(Vec<u32>),
}

/// Ragged sequences; each inner vector is exactly the unpadded tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Targets,
}

impl Batch {
    pub fn lm(inputs: Vec<Vec<u32>>, targets: Vec<Vec<u32>>) -> Self {
        Batch {
            inputs,
            targets: Targets::Tokens(targets),
        }
    }

    pub fn task(inputs: Vec<Vec<u32>>, labels: Vec<u32>) -> Self {
        Batch {
            inputs,
            targets: Targets::Labels(labels),
        }
    }

    pub fn mode(&self) -> Mode {
        match self.targets {
            Targets::Tokens(_) => Mode::Lm,
            Targets::Labels(_) => Mode::Task,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub(crate) fn validate_targets(&self, dims: ModelDims) -> Result<()> {
        match &self.targets {
            Targets::Tokens(t) => {
                if t.len() != self.inputs.len() {
                    return Err(Error::Config(
                        "target count differs from input count".into(),
                    ));
                }
                for (s, (ids, tgt)) in self.inputs.iter().zip(t).enumerate() {
                    if ids.len() != tgt.len() {
                        return Err(Error::Input {
                            position: s,
                            reason: "target length differs from input length".into(),
                        });
                    }
                    if let Some(p) = tgt.iter().position(|&x| x as usize >= dims.vocab) {
                        return Err(Error::Input {
                            position: p,
                            reason: format!("sequence {s}: target id outside vocabulary"),
                        });
                    }
                }
            }
            Targets::Labels(l) => {
                if l.len() != self.inputs.len() {
                    return Err(Error::Config("label count differs from input count".into()));
                }
                if let Some(p) = l.iter().position(|&x| x as usize >= dims.classes) {
                    return Err(Error::Input {
                        position: p,
                        reason: format!("label {} outside {} classes", l[p], dims.classes),
                    });
                }
            }
        }
        Ok(())
    }
}
