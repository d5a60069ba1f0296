use serde::{Deserialize, Serialize};

use super::AdaptDataset;
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Bag-of-tokens classification task with a planted secondary attribute.
///
/// Token layout: ids `1..=classes*topic_tokens` are topic tokens (class
/// `(id-1) % classes`), the next `attributes*attribute_tokens` ids are
/// attribute tokens, and everything else is neutral filler. Each position
/// draws a topic token with probability `topic_rate` (from the true class
/// with probability `topic_purity`, otherwise from another class), an
/// attribute token with probability `attribute_rate`, or filler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub vocab: usize,
    pub classes: usize,
    pub attributes: usize,
    pub topic_tokens: usize,
    pub attribute_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub topic_rate: f64,
    pub topic_purity: f64,
    pub attribute_rate: f64,
    pub train: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab: 256,
            classes: 4,
            attributes: 4,
            topic_tokens: 16,
            attribute_tokens: 8,
            min_len: 8,
            max_len: 16,
            topic_rate: 0.3,
            topic_purity: 0.6,
            attribute_rate: 0.3,
            train: 5000,
            test: 1000,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let used = 1 + self.classes * self.topic_tokens + self.attributes * self.attribute_tokens;
        if used >= self.vocab {
            return Err(Error::Config(format!(
                "vocabulary of {} too small for {used} reserved tokens",
                self.vocab
            )));
        }
        if self.classes < 2 {
            return Err(Error::param("classes", "need at least 2"));
        }
        if self.attributes < 2 {
            return Err(Error::param("attributes", "need at least 2"));
        }
        if self.topic_tokens == 0 || self.attribute_tokens == 0 {
            return Err(Error::param(
                "topic_tokens",
                "token groups must be nonempty",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::param("min_len", "need 1 <= min_len <= max_len"));
        }
        for (field, p) in [
            ("topic_rate", self.topic_rate),
            ("topic_purity", self.topic_purity),
            ("attribute_rate", self.attribute_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(field, "must be a probability"));
            }
        }
        if self.topic_rate + self.attribute_rate > 1.0 {
            return Err(Error::param(
                "attribute_rate",
                "topic_rate + attribute_rate exceeds 1",
            ));
        }
        Ok(())
    }

    fn topic_token(&self, class: usize, slot: usize) -> u32 {
        (1 + slot * self.classes + class) as u32
    }

    fn attribute_token(&self, value: usize, slot: usize) -> u32 {
        (1 + self.classes * self.topic_tokens + slot * self.attributes + value) as u32
    }

    fn filler_range(&self) -> (u32, u32) {
        let start = 1 + self.classes * self.topic_tokens + self.attributes * self.attribute_tokens;
        (start as u32, self.vocab as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub train: AdaptDataset,
    pub test: AdaptDataset,
    /// Planted attribute per train example.
    pub train_attributes: Vec<u32>,
    pub test_attributes: Vec<u32>,
}

impl SyntheticTask {
    pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (train, train_attributes) =
            generate_split(cfg, cfg.train, &mut Rng::stream(seed, "synthetic-train"));
        let (test, test_attributes) =
            generate_split(cfg, cfg.test, &mut Rng::stream(seed, "synthetic-test"));
        Ok(SyntheticTask {
            train,
            test,
            train_attributes,
            test_attributes,
        })
    }

    /// Linearly separable variant: every token of a sequence belongs to its class.
    pub fn separable(
        vocab: usize,
        classes: usize,
        n: usize,
        len: usize,
        seed: u64,
    ) -> Result<AdaptDataset> {
        if classes < 2 || vocab < classes {
            return Err(Error::Config("need at least one token per class".into()));
        }
        let mut rng = Rng::stream(seed, "separable");
        let per_class = vocab / classes;
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.below(classes as u64) as usize;
            let ids = (0..len)
                .map(|_| (rng.below(per_class as u64) as usize * classes + y) as u32)
                .collect();
            inputs.push(ids);
            labels.push(y as u32);
        }
        Ok(AdaptDataset::from_labeled(inputs, labels))
    }
}

fn generate_split(cfg: &SyntheticConfig, n: usize, rng: &mut Rng) -> (AdaptDataset, Vec<u32>) {
    let (filler_lo, filler_hi) = cfg.filler_range();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(cfg.classes as u64) as usize;
        let a = rng.below(cfg.attributes as u64) as usize;
        let len = cfg.min_len + rng.below((cfg.max_len - cfg.min_len + 1) as u64) as usize;
        let ids = (0..len)
            .map(|_| {
                let u = rng.next_f64();
                if u < cfg.topic_rate {
                    let class = if rng.next_f64() < cfg.topic_purity {
                        y
                    } else {
                        // Uniform over the other classes.
                        let o = rng.below(cfg.classes as u64 - 1) as usize;
                        if o >= y {
                            o + 1
                        } else {
                            o
                        }
                    };
                    cfg.topic_token(class, rng.below(cfg.topic_tokens as u64) as usize)
                } else if u < cfg.topic_rate + cfg.attribute_rate {
                    cfg.attribute_token(a, rng.below(cfg.attribute_tokens as u64) as usize)
                } else {
                    filler_lo + rng.below(u64::from(filler_hi - filler_lo)) as u32
                }
            })
            .collect();
        inputs.push(ids);
        labels.push(y as u32);
        attrs.push(a as u32);
    }
    (AdaptDataset::from_labeled(inputs, labels), attrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SyntheticConfig {
            train: 200,
            test: 50,
            ..SyntheticConfig::default()
        };
        let a = SyntheticTask::generate(&cfg, 1).unwrap();
        let b = SyntheticTask::generate(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.test_attributes.len(), 50);
        for e in &a.train.examples {
            assert!((8..=16).contains(&e.ids.len()));
            assert!(e.ids.iter().all(|&id| id < 256 && id != 0));
        }
    }

    #[test]
    fn token_groups_do_not_overlap() {
        let cfg = SyntheticConfig::default();
        let last_topic = cfg.topic_token(cfg.classes - 1, cfg.topic_tokens - 1);
        let first_attr = cfg.attribute_token(0, 0);
        assert_eq!(first_attr, last_topic + 1);
        let last_attr = cfg.attribute_token(cfg.attributes - 1, cfg.attribute_tokens - 1);
        assert_eq!(cfg.filler_range().0, last_attr + 1);
    }

    #[test]
    fn separable_labels_match_tokens() {
        let ds = SyntheticTask::separable(64, 4, 30, 5, 2).unwrap();
        for e in &ds.examples {
            if let super::super::Target::Label(l) = e.target {
                assert!(e.ids.iter().all(|id| id % 4 == l));
            }
        }
    }
}
