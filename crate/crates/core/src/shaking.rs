//! Vertical and horizontal shaking of the representation layers, and the
//! key implantation loop that interleaves shaking with recovery training.

use serde::{Deserialize, Serialize};

use crate::data::AdaptDataset;
use crate::error::{Error, Result};
use crate::keys::{HorizontalKey, KeyPair, VsOp, VsRound};
use crate::model::LanguageModel;
use crate::numeric::{dot, Matrix};
use crate::recovery::{awareness_recover, functional_recover, EpochRecord, RecoverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplantConfig {
    #[serde(default)]
    pub recover: RecoverConfig,
    /// Apply the horizontal table once instead of once per vertical round.
    #[serde(default = "default_true")]
    pub hs_once: bool,
    /// Leave the output projection out of vertical shaking (untied task models).
    #[serde(default)]
    pub skip_output: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ImplantConfig {
    fn default() -> Self {
        ImplantConfig {
            recover: RecoverConfig::default(),
            hs_once: true,
            skip_output: false,
        }
    }
}

fn check_width(m: &LanguageModel, round: &VsRound) -> Result<()> {
    let d = m.dims().dim;
    round.validate(d).map_err(|e| match e {
        Error::Incompatible(msg) => Error::Incompatible(format!("vertical round vs model: {msg}")),
        other => other,
    })
}

fn representation_mut(m: &mut LanguageModel, skip_output: bool) -> Result<Vec<&mut Matrix>> {
    if skip_output && m.is_tied() {
        return Err(Error::Config(
            "skip_output needs an untied output projection".into(),
        ));
    }
    let mut out = vec![&mut m.embed];
    if !skip_output {
        out.extend(m.output.as_mut());
    }
    Ok(out)
}

fn apply_rows(w: &mut Matrix, f: impl Fn(&mut [f64])) {
    for r in 0..w.rows() {
        f(w.row_mut(r));
    }
}

/// Apply one vertical round to `E` (and `O` unless skipped). A tied model is
/// transformed once through its shared storage.
pub fn vs_shake(m: &mut LanguageModel, round: &VsRound, skip_output: bool) -> Result<()> {
    check_width(m, round)?;
    let mat = &round.material;
    let d = m.dims().dim;
    for w in representation_mut(m, skip_output)? {
        match round.op() {
            VsOp::Inflate => apply_rows(w, |x| x.iter_mut().zip(mat).for_each(|(a, s)| *a *= s)),
            VsOp::Tilt => {
                let (v, u) = mat.split_at(d);
                apply_rows(w, |x| {
                    let c = dot(x, v);
                    x.iter_mut().zip(u).for_each(|(a, ui)| *a += c * ui);
                })
            }
            _ => apply_rows(w, |x| x.iter_mut().zip(mat).for_each(|(a, b)| *a += b)),
        }
    }
    Ok(())
}

/// Undo [`vs_shake`] for the same round.
pub fn vs_unshake(m: &mut LanguageModel, round: &VsRound, skip_output: bool) -> Result<()> {
    check_width(m, round)?;
    let mat = &round.material;
    let d = m.dims().dim;
    for w in representation_mut(m, skip_output)? {
        match round.op() {
            VsOp::Inflate => apply_rows(w, |x| x.iter_mut().zip(mat).for_each(|(a, s)| *a /= s)),
            VsOp::Tilt => {
                // (I + v uᵀ)⁻¹ = I − v uᵀ / (1 + uᵀv)
                let (v, u) = mat.split_at(d);
                let det = 1.0 + dot(u, v);
                apply_rows(w, |x| {
                    let c = dot(x, v) / det;
                    x.iter_mut().zip(u).for_each(|(a, ui)| *a -= c * ui);
                })
            }
            _ => apply_rows(w, |x| x.iter_mut().zip(mat).for_each(|(a, b)| *a -= b)),
        }
    }
    Ok(())
}

/// Permute vocabulary rows of `E` and `O`: old row `i` moves to `tab[i]`.
pub fn hs_shake(m: &mut LanguageModel, hs: &HorizontalKey) -> Result<()> {
    let v = m.dims().vocab;
    if hs.len() != v {
        return Err(Error::Incompatible(format!(
            "horizontal key covers {} ids, model vocabulary is {v}",
            hs.len()
        )));
    }
    m.embed = m.embed.scatter_rows(hs.table());
    if let Some(o) = m.output.as_mut() {
        *o = o.scatter_rows(hs.table());
    }
    Ok(())
}

/// Recovery traces for one vertical round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub op: VsOp,
    pub awareness: Vec<EpochRecord>,
    pub functional: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Implanted {
    pub model: LanguageModel,
    /// Table the client must encode with.
    pub encoding: HorizontalKey,
    pub rounds: Vec<RoundReport>,
}

impl Implanted {
    /// Number of SGD epochs run across all rounds and phases.
    pub fn epochs_trained(&self) -> usize {
        self.rounds
            .iter()
            .flat_map(|r| r.awareness.iter().chain(&r.functional))
            .filter(|e| e.train_loss.is_some())
            .count()
    }
}

/// Shake `m` with `kp` and recover after each vertical round.
///
/// Per round: vertical shake, horizontal shake (every round, or only the
/// first with `hs_once`), awareness recovery, functional recovery. With no
/// vertical rounds the table is applied once and nothing is trained.
pub fn implant(
    m: &LanguageModel,
    kp: &KeyPair,
    adapt: &AdaptDataset,
    heldout: Option<&AdaptDataset>,
    cfg: &ImplantConfig,
) -> Result<Implanted> {
    kp.validate()?;
    let dims = m.dims();
    if kp.vocab_size != dims.vocab || kp.embed_dim != dims.dim {
        return Err(Error::Incompatible(format!(
            "key is for V={} d={}, model has V={} d={}",
            kp.vocab_size, kp.embed_dim, dims.vocab, dims.dim
        )));
    }
    let mut model = m.clone();
    if kp.rounds.is_empty() {
        hs_shake(&mut model, &kp.hs)?;
        return Ok(Implanted {
            model,
            encoding: kp.hs.clone(),
            rounds: Vec::new(),
        });
    }
    if adapt.is_empty() {
        return Err(Error::Config("recovery data is empty".into()));
    }
    cfg.recover.validate()?;
    let mut encoding = HorizontalKey::identity(dims.vocab);
    let mut reports = Vec::with_capacity(kp.rounds.len());
    for (i, round) in kp.rounds.iter().enumerate() {
        let mut step = || -> Result<RoundReport> {
            vs_shake(&mut model, round, cfg.skip_output)?;
            if i == 0 || !cfg.hs_once {
                hs_shake(&mut model, &kp.hs)?;
                encoding = kp.hs.compose_after(&encoding)?;
            }
            let rc = cfg.recover.for_round(i);
            let awareness = awareness_recover(&mut model, adapt, heldout, &encoding, &rc)?;
            let functional = functional_recover(&mut model, adapt, heldout, &encoding, &rc)?;
            Ok(RoundReport {
                round: i,
                op: round.op(),
                awareness,
                functional,
            })
        };
        reports.push(step().map_err(|e| e.in_round(i))?);
    }
    Ok(Implanted {
        model,
        encoding,
        rounds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{generate_horizontal_key, OpParams};
    use crate::model::{forward, Mode, ModelDims};
    use crate::numeric::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 12,
            dim: 4,
            layers: 1,
            hidden: 6,
            classes: 3,
        }
    }

    fn model(tied: bool) -> LanguageModel {
        LanguageModel::init(dims(), tied, &mut Rng::new(5)).unwrap()
    }

    fn round(params: OpParams, material: Vec<f64>) -> VsRound {
        VsRound { params, material }
    }

    #[test]
    fn identity_rounds_leave_model_bit_identical() {
        for tied in [false, true] {
            let m = model(tied);
            let mut s = m.clone();
            vs_shake(
                &mut s,
                &round(OpParams::Addv { delta: 1.0 }, vec![0.0; 4]),
                false,
            )
            .unwrap();
            let inflate = OpParams::Inflate {
                delta: 1.0,
                sigma: 0.1,
            };
            vs_shake(&mut s, &round(inflate, vec![1.0; 4]), false).unwrap();
            assert_eq!(s, m);
        }
    }

    #[test]
    fn addv_roundtrip_is_exact_on_dyadic_weights() {
        // Quarter-integers keep every sum exactly representable.
        let mut m = model(false);
        for w in [&mut m.embed, m.output.as_mut().unwrap()] {
            for (k, x) in w.as_mut_slice().iter_mut().enumerate() {
                *x = (k % 17) as f64 * 0.25 - 2.0;
            }
        }
        let r = round(OpParams::Addv { delta: 1.0 }, vec![0.5, 0.25, 0.75, 0.125]);
        let mut s = m.clone();
        vs_shake(&mut s, &r, false).unwrap();
        assert!(s.embedding().frobenius_distance(m.embedding()) > 0.0);
        vs_unshake(&mut s, &r, false).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn every_operator_inverts() {
        let ops = [
            OpParams::Addv { delta: 1.0 },
            OpParams::Inflate {
                delta: 1.0,
                sigma: 0.5,
            },
            OpParams::Tilt {
                delta: 1.0,
                sigma: 0.5,
            },
            OpParams::DxFixp {
                delta: 1.0,
                k: 2.0,
                theta: 1.0,
            },
            OpParams::Gaussian {
                delta: 1.0,
                epsilon: 0.3,
            },
            OpParams::Laplace {
                delta: 1.0,
                epsilon: 0.3,
            },
        ];
        let kp = KeyPair::generate(
            &crate::keys::KeyGenConfig {
                rounds: 12,
                ops: ops.to_vec(),
            },
            12,
            4,
            3,
        )
        .unwrap();
        for tied in [false, true] {
            let m = model(tied);
            for r in &kp.rounds {
                let mut s = m.clone();
                vs_shake(&mut s, r, false).unwrap();
                assert!(
                    s.embedding().frobenius_distance(m.embedding()) > 0.0,
                    "{}",
                    r.op()
                );
                assert_eq!(s.blocks, m.blocks);
                vs_unshake(&mut s, r, false).unwrap();
                let err = s.embedding().frobenius_distance(m.embedding())
                    + s.output().frobenius_distance(m.output());
                assert!(err < 1e-12, "{}: {err}", r.op());
            }
        }
    }

    #[test]
    fn tied_model_is_shaken_once() {
        let mut m = model(true);
        let before = m.embedding().get(0, 0);
        vs_shake(
            &mut m,
            &round(OpParams::Addv { delta: 1.0 }, vec![1.0; 4]),
            false,
        )
        .unwrap();
        assert_eq!(m.embedding().get(0, 0), before + 1.0);
        assert!(vs_shake(
            &mut m,
            &round(OpParams::Addv { delta: 1.0 }, vec![1.0; 4]),
            true
        )
        .is_err());
    }

    #[test]
    fn skip_output_leaves_output_alone() {
        let m = model(false);
        let mut s = m.clone();
        vs_shake(
            &mut s,
            &round(OpParams::Addv { delta: 1.0 }, vec![1.0; 4]),
            true,
        )
        .unwrap();
        assert_eq!(s.output(), m.output());
        assert_ne!(s.embedding(), m.embedding());
    }

    #[test]
    fn material_width_mismatch() {
        let mut m = model(false);
        let err = vs_shake(
            &mut m,
            &round(OpParams::Addv { delta: 1.0 }, vec![0.0; 5]),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn row_convention_on_three_rows() {
        let d = ModelDims {
            vocab: 3,
            dim: 1,
            layers: 0,
            hidden: 1,
            classes: 0,
        };
        let mut m = LanguageModel::init(d, true, &mut Rng::new(0)).unwrap();
        m.embed = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        hs_shake(&mut m, &HorizontalKey::new(vec![2, 0, 1]).unwrap()).unwrap();
        assert_eq!(m.embedding().as_slice(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn hs_roundtrip_restores_checkpoint_bytes() {
        let m = model(false);
        let hs = generate_horizontal_key(12, &mut Rng::new(8)).unwrap();
        let mut s = m.clone();
        hs_shake(&mut s, &hs).unwrap();
        assert_ne!(s, m);
        hs_shake(&mut s, &hs.inverse()).unwrap();
        assert_eq!(s.to_bytes(), m.to_bytes());
        let mut id = m.clone();
        hs_shake(&mut id, &HorizontalKey::identity(12)).unwrap();
        assert_eq!(id, m);
    }

    #[test]
    fn horizontal_equivalence_is_bit_exact() {
        let mut rng = Rng::new(21);
        for tied in [false, true] {
            let m = model(tied);
            let hs = generate_horizontal_key(12, &mut rng).unwrap();
            let mut s = m.clone();
            hs_shake(&mut s, &hs).unwrap();
            let tab = hs.table();
            let inputs: Vec<Vec<u32>> = (0..20)
                .map(|_| {
                    (0..1 + rng.below(6))
                        .map(|_| rng.below(12) as u32)
                        .collect()
                })
                .collect();
            let encoded: Vec<Vec<u32>> = inputs
                .iter()
                .map(|x| x.iter().map(|&i| tab[i as usize]).collect())
                .collect();
            let plain = forward(&m, &inputs, Mode::Lm).unwrap();
            let shaken = forward(&s, &encoded, Mode::Lm).unwrap();
            for (p, q) in plain.iter().zip(&shaken) {
                for r in 0..p.rows() {
                    for (i, &t) in tab.iter().enumerate() {
                        assert_eq!(p.get(r, i).to_bits(), q.get(r, t as usize).to_bits());
                    }
                }
            }
            assert_eq!(
                forward(&m, &inputs, Mode::Task).unwrap(),
                forward(&s, &encoded, Mode::Task).unwrap()
            );
        }
    }

    #[test]
    fn implant_without_vertical_rounds() {
        let m = model(false);
        let empty = AdaptDataset::default();
        let null = KeyPair::null(12, 4);
        let out = implant(&m, &null, &empty, None, &ImplantConfig::default()).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.epochs_trained(), 0);

        let mut kp = KeyPair::null(12, 4);
        kp.hs = generate_horizontal_key(12, &mut Rng::new(4)).unwrap();
        let out = implant(&m, &kp, &empty, None, &ImplantConfig::default()).unwrap();
        let mut expect = m.clone();
        hs_shake(&mut expect, &kp.hs).unwrap();
        assert_eq!(out.model, expect);
        assert_eq!(out.encoding, kp.hs);
    }

    #[test]
    fn implant_checks_dims_and_data() {
        let m = model(false);
        let kp = KeyPair::null(13, 4);
        assert!(matches!(
            implant(
                &m,
                &kp,
                &AdaptDataset::default(),
                None,
                &ImplantConfig::default()
            ),
            Err(Error::Incompatible(_))
        ));
        let cfg = crate::keys::KeyGenConfig {
            rounds: 1,
            ops: vec![OpParams::Addv { delta: 1.0 }],
        };
        let kp = KeyPair::generate(&cfg, 12, 4, 1).unwrap();
        assert!(implant(
            &m,
            &kp,
            &AdaptDataset::default(),
            None,
            &ImplantConfig::default()
        )
        .is_err());
    }

    #[test]
    fn repeated_table_composes_per_round() {
        let m = model(false);
        let cfg = crate::keys::KeyGenConfig {
            rounds: 2,
            ops: vec![OpParams::Addv { delta: 0.5 }],
        };
        let kp = KeyPair::generate(&cfg, 12, 4, 9).unwrap();
        let data = crate::data::SyntheticTask::separable(12, 3, 24, 4, 2).unwrap();
        let mut ic = ImplantConfig::default();
        ic.recover.awareness_epochs = 1;
        ic.recover.functional_epochs = 1;
        ic.hs_once = false;
        let out = implant(&m, &kp, &data, None, &ic).unwrap();
        assert_eq!(out.encoding, kp.encoding_key(false));
        assert_eq!(out.rounds.len(), 2);
        assert_eq!(out.epochs_trained(), 4);
        assert!(out.model.is_finite());
        // Weights diverge from the original on every vocabulary row.
        let mut aligned = out.model.clone();
        hs_shake(&mut aligned, &out.encoding.inverse()).unwrap();
        let min_row = (0..12)
            .map(|r| {
                let a = aligned.embedding().row(r);
                let b = m.embedding().row(r);
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min_row > 0.0);
    }
}
