//! Attack harness: nearest-neighbour embedding inversion and a linear probe
//! for planted sensitive attributes. Lower success means more privacy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::HorizontalKey;
use crate::numeric::{dot, l2_norm, Matrix, Rng};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

fn nearest(public: &Matrix, norms: &[f64], x: &[f64], metric: Metric) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    let xn = l2_norm(x).max(1e-300);
    for (j, norm) in norms.iter().enumerate().take(public.rows()) {
        let row = public.row(j);
        let score = match metric {
            Metric::Cosine => dot(row, x) / (norm.max(1e-300) * xn),
            Metric::L2 => -row
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        };
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    best
}

/// Fraction of rows `i` of `observed` whose nearest row of `public` is row `i`.
pub fn inversion_attack(public: &Matrix, observed: &Matrix, metric: Metric) -> Result<f64> {
    inversion_attack_with(Execution::default(), public, observed, metric)
}

pub fn inversion_attack_with(
    exec: Execution,
    public: &Matrix,
    observed: &Matrix,
    metric: Metric,
) -> Result<f64> {
    if public.rows() != observed.rows() || public.cols() != observed.cols() {
        return Err(Error::Incompatible(format!(
            "public table is {}x{}, observed is {}x{}",
            public.rows(),
            public.cols(),
            observed.rows(),
            observed.cols()
        )));
    }
    if public.rows() == 0 {
        return Err(Error::Config("empty embedding table".into()));
    }
    let norms: Vec<f64> = (0..public.rows()).map(|j| l2_norm(public.row(j))).collect();
    let hits = par::map_range(exec, observed.rows(), |i| {
        nearest(public, &norms, observed.row(i), metric) == i
    });
    Ok(hits.iter().filter(|&&h| h).count() as f64 / observed.rows() as f64)
}

/// Undo the horizontal permutation so row `i` holds original token `i`.
/// Only the evaluator can do this; it isolates the vertical shaking.
pub fn realign(observed: &Matrix, hs: &HorizontalKey) -> Result<Matrix> {
    if hs.len() != observed.rows() {
        return Err(Error::Incompatible(
            "key length differs from table rows".into(),
        ));
    }
    Ok(observed.gather_rows(hs.table()))
}

/// Mean input embedding of each sequence.
pub fn pooled_embeddings(table: &Matrix, inputs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .enumerate()
        .map(|(s, ids)| {
            if ids.is_empty() {
                return Err(Error::Input {
                    position: s,
                    reason: "empty sequence".into(),
                });
            }
            let mut acc = vec![0.0; table.cols()];
            for (p, &id) in ids.iter().enumerate() {
                if id as usize >= table.rows() {
                    return Err(Error::Input {
                        position: p,
                        reason: format!("sequence {s}: id {id} outside table"),
                    });
                }
                acc.iter_mut()
                    .zip(table.row(id as usize))
                    .for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / ids.len() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            Ok(acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent. Standardization statistics come from the
/// training features only.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[u32], cfg: &ProbeConfig) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Config(
                "probe needs one label per feature row".into(),
            ));
        }
        let classes = *labels.iter().max().expect("nonempty") as usize + 1;
        let distinct = {
            let mut seen = vec![false; classes];
            labels.iter().for_each(|&l| seen[l as usize] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::Config(
                "probe training split has a single class".into(),
            ));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Config("ragged probe features".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut scale = vec![0.0; d];
        for f in features {
            scale
                .iter_mut()
                .zip(f.iter().zip(&mean))
                .for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n);
        }
        scale
            .iter_mut()
            .for_each(|s| *s = 1.0 / s.sqrt().max(1e-12));
        let mut probe = LinearProbe {
            mean,
            scale,
            weight: Matrix::zeros(classes, d),
            bias: vec![0.0; classes],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        for _ in 0..cfg.steps {
            let mut gw = Matrix::zeros(classes, d);
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probs(x);
                for (c, (pc, gbc)) in p.iter().zip(gb.iter_mut()).enumerate() {
                    let g = pc - f64::from(u8::from(c == y as usize));
                    *gbc += g / n;
                    gw.row_mut(c)
                        .iter_mut()
                        .zip(x)
                        .for_each(|(w, xi)| *w += g * xi / n);
                }
            }
            for (c, gbc) in gb.iter().enumerate() {
                probe.bias[c] -= cfg.lr * gbc;
                let (w, g) = (probe.weight.row_mut(c), gw.row(c));
                w.iter_mut()
                    .zip(g)
                    .for_each(|(wi, gi)| *wi -= cfg.lr * (gi + cfg.l2 * *wi));
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.bias.len())
            .map(|c| dot(self.weight.row(c), x) + self.bias[c])
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }

    pub fn predict(&self, f: &[f64]) -> u32 {
        let p = self.probs(&self.standardize(f));
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u32]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Train a probe on `(train, train_labels)` and report accuracy on the test split.
pub fn attribute_attack(
    train: &[Vec<f64>],
    train_labels: &[u32],
    test: &[Vec<f64>],
    test_labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let probe = LinearProbe::fit(train, train_labels, cfg)?;
    Ok(probe.accuracy(test, test_labels))
}

/// Fraction of the most common label.
pub fn majority_rate(labels: &[u32]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// One line of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub attack: String,
    pub setting: String,
    pub rate: f64,
}

impl AttackRecord {
    pub fn new(attack: impl Into<String>, setting: impl Into<String>, rate: f64) -> Self {
        AttackRecord {
            attack: attack.into(),
            setting: setting.into(),
            rate,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// Shuffle copy of `labels`, used for chance-level controls.
pub fn shuffled_labels(labels: &[u32], seed: u64) -> Vec<u32> {
    let mut out = labels.to_vec();
    Rng::stream(seed, "shuffled-labels").shuffle(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::generate_horizontal_key;

    fn table(v: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(v, d, |_, _| rng.next_normal() / (d as f64).sqrt())
    }

    #[test]
    fn exact_copy_inverts_fully() {
        let e = table(64, 8, 1);
        for metric in [Metric::Cosine, Metric::L2] {
            assert_eq!(inversion_attack(&e, &e, metric).unwrap(), 1.0);
        }
    }

    #[test]
    fn permuted_table_realigns_to_full_success() {
        let e = table(64, 8, 1);
        let hs = generate_horizontal_key(64, &mut Rng::new(3)).unwrap();
        let stored = e.scatter_rows(hs.table());
        let stored_rate = inversion_attack(&e, &stored, Metric::L2).unwrap();
        assert!(stored_rate < 0.2, "{stored_rate}");
        let aligned = realign(&stored, &hs).unwrap();
        assert_eq!(inversion_attack(&e, &aligned, Metric::L2).unwrap(), 1.0);
    }

    #[test]
    fn dims_must_match() {
        assert!(matches!(
            inversion_attack(&table(4, 3, 0), &table(5, 3, 0), Metric::L2),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let e = table(50, 6, 2);
        let noisy = table(50, 6, 3);
        let a = inversion_attack_with(Execution::Sequential, &e, &noisy, Metric::Cosine).unwrap();
        let b = inversion_attack(&e, &noisy, Metric::Cosine).unwrap();
        assert_eq!(a, b);
    }

    fn planted(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = Rng::new(seed);
        let centers = [[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]];
        (0..n)
            .map(|_| {
                let y = rng.below(3) as usize;
                let f = vec![
                    centers[y][0] + 0.3 * rng.next_normal(),
                    centers[y][1] + 0.3 * rng.next_normal(),
                    rng.next_normal(),
                ];
                (f, y as u32)
            })
            .unzip()
    }

    #[test]
    fn probe_recovers_planted_attribute() {
        let (tr, ytr) = planted(400, 1);
        let (te, yte) = planted(200, 2);
        let acc = attribute_attack(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
        assert!(acc > 0.97, "{acc}");
    }

    #[test]
    fn probe_on_shuffled_labels_is_near_chance() {
        let (tr, ytr) = planted(600, 1);
        let (te, yte) = planted(600, 2);
        let ytr = shuffled_labels(&ytr, 5);
        let yte = shuffled_labels(&yte, 6);
        let acc = attribute_attack(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
        let chance = majority_rate(&yte);
        assert!((acc - chance).abs() <= 0.05, "{acc} vs {chance}");
    }

    #[test]
    fn single_class_split_rejected() {
        let (tr, _) = planted(10, 1);
        assert!(matches!(
            attribute_attack(&tr, &[1; 10], &tr, &[1; 10], &ProbeConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooled_embeddings_average_rows() {
        let e = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 3.0, 3.0]).unwrap();
        let p = pooled_embeddings(&e, &[vec![0, 1], vec![2]]).unwrap();
        assert_eq!(p, vec![vec![0.5, 0.5], vec![3.0, 3.0]]);
        assert!(pooled_embeddings(&e, &[vec![3]]).is_err());
    }

    #[test]
    fn record_is_one_json_line() {
        let r = AttackRecord::new("inversion", "aligned/l2", 0.25);
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(serde_json::from_str::<AttackRecord>(&line).unwrap(), r);
    }
}
