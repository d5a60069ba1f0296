//! Desk-scale experiment runners shared by the acceptance suite and the CLI
//! `bench` command. Every run is a pure function of its config and seeds.

use serde::{Deserialize, Serialize};

use crate::attacks::{
    self, inversion_attack, pooled_embeddings, realign, AttackRecord, Metric, ProbeConfig,
};
use crate::data::{AdaptDataset, Batch, SyntheticConfig, SyntheticTask};
use crate::error::Result;
use crate::keys::{HorizontalKey, KeyGenConfig, KeyPair, OpParams};
use crate::model::{
    accuracy, fine_tune, predict_labels, train_epoch, FreezeMask, LanguageModel, Mode, ModelDims,
    TrainSchedule,
};
use crate::numeric::{Matrix, Rng};
use crate::privacy::{deploy, private_infer, private_tune, ClientKeys, Prediction, TuneConfig};
use crate::recovery::{awareness_recover, functional_recover, EpochRecord, RecoverConfig};
use crate::shaking::{implant, ImplantConfig, Implanted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub data_seed: u64,
    pub dims: ModelDims,
    pub tied: bool,
    pub model_seed: u64,
    /// Full-parameter masked-token training that produces the original model.
    pub pretrain: TrainSchedule,
    /// Fraction of positions replaced by [`MASK_ID`] during pretraining.
    pub mask_rate: f64,
    pub recover: RecoverConfig,
    /// Functional epochs for the extended recovery run.
    pub extended_epochs: usize,
    pub tune: TuneConfig,
    pub key: KeyGenConfig,
    pub key_seed: u64,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticConfig {
                topic_purity: 0.8,
                ..SyntheticConfig::default()
            },
            data_seed: 7,
            dims: ModelDims::default(),
            tied: false,
            model_seed: 11,
            pretrain: TrainSchedule {
                epochs: 3,
                batch_size: 16,
                lr: 0.5,
                seed: 13,
                clip: Some(1.0),
                end_lr_ratio: Some(0.05),
            },
            mask_rate: 0.15,
            recover: RecoverConfig {
                lr: 0.2,
                batch_size: 4,
                seed: 17,
                ..RecoverConfig::default()
            },
            extended_epochs: 10,
            tune: TuneConfig {
                lr: 0.2,
                batch_size: 4,
                seed: 19,
                ..TuneConfig::default()
            },
            key: default_key(),
            key_seed: 1,
            probe: ProbeConfig::default(),
        }
    }
}

/// Mask token for pretraining; the synthetic generator never emits id 0.
pub const MASK_ID: u32 = 0;

/// Masked-token pretraining: inputs have a random subset of positions
/// replaced by [`MASK_ID`], targets are the original sequence.
pub fn pretrain_masked(
    m: &mut LanguageModel,
    data: &AdaptDataset,
    schedule: &TrainSchedule,
    mask_rate: f64,
) -> Result<Vec<f64>> {
    (0..schedule.epochs)
        .map(|epoch| {
            let mut rng = Rng::stream(schedule.seed, &format!("mask/epoch-{epoch}"));
            let masked: Vec<Vec<u32>> = data
                .examples
                .iter()
                .map(|e| {
                    e.ids
                        .iter()
                        .map(|&id| {
                            if rng.next_f64() < mask_rate {
                                MASK_ID
                            } else {
                                id
                            }
                        })
                        .collect()
                })
                .collect();
            train_epoch(
                m,
                data.len(),
                |rows| {
                    let inputs = rows.iter().map(|&r| masked[r].clone()).collect();
                    let targets = rows.iter().map(|&r| data.examples[r].ids.clone()).collect();
                    Ok(Batch::lm(inputs, targets))
                },
                schedule,
                &FreezeMask::none(),
                "pretrain",
                epoch,
            )
        })
        .collect()
}

/// Key used when none is configured.
pub fn default_key() -> KeyGenConfig {
    KeyGenConfig {
        rounds: 1,
        ops: vec![OpParams::Addv { delta: 2.0 }],
    }
}

/// One operator at a time, with the hyperparameters of the recovery study.
pub fn single_operator_suite() -> Vec<OpParams> {
    vec![
        OpParams::Addv { delta: 1.0 },
        OpParams::Inflate {
            delta: 1.0,
            sigma: 0.1,
        },
        OpParams::Tilt {
            delta: 1.0,
            sigma: 0.1,
        },
        OpParams::DxFixp {
            delta: 1.0,
            k: 2.0,
            theta: 1.0,
        },
        OpParams::Gaussian {
            delta: 1.0,
            epsilon: 0.1,
        },
        OpParams::Laplace {
            delta: 1.0,
            epsilon: 0.1,
        },
    ]
}

/// Data and the original (unshaken) model.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub task: SyntheticTask,
    pub original: LanguageModel,
}

impl Setup {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let mut data_cfg = cfg.data.clone();
        data_cfg.vocab = cfg.dims.vocab;
        data_cfg.classes = cfg.dims.classes;
        let task = SyntheticTask::generate(&data_cfg, cfg.data_seed)?;
        let mut rng = Rng::stream(cfg.model_seed, "model-init");
        let mut original = LanguageModel::init(cfg.dims, cfg.tied, &mut rng)?;
        pretrain_masked(&mut original, &task.train, &cfg.pretrain, cfg.mask_rate)?;
        Ok(Setup {
            cfg,
            task,
            original,
        })
    }

    pub fn test_accuracy(&self, m: &LanguageModel) -> Result<f64> {
        let labels = self.task.test.labels().expect("synthetic data is labeled");
        Ok(accuracy(
            &predict_labels(m, &self.task.test.inputs())?,
            &labels,
        ))
    }

    fn implant_cfg(&self, functional_epochs: usize) -> ImplantConfig {
        ImplantConfig {
            recover: RecoverConfig {
                functional_epochs,
                ..self.cfg.recover.clone()
            },
            ..ImplantConfig::default()
        }
    }

    pub fn keypair(&self, key: &KeyGenConfig) -> Result<KeyPair> {
        KeyPair::generate(
            key,
            self.cfg.dims.vocab,
            self.cfg.dims.dim,
            self.cfg.key_seed,
        )
    }

    /// Implant `key` and recover with `functional_epochs` functional epochs.
    pub fn implant(
        &self,
        key: &KeyGenConfig,
        functional_epochs: usize,
    ) -> Result<(KeyPair, Implanted)> {
        let kp = self.keypair(key)?;
        let out = implant(
            &self.original,
            &kp,
            &self.task.train,
            Some(&self.task.test),
            &self.implant_cfg(functional_epochs),
        )?;
        Ok((kp, out))
    }

    /// The unshaken model through the same recovery schedule.
    pub fn control(&self, functional_epochs: usize) -> Result<(LanguageModel, Vec<EpochRecord>)> {
        let mut m = self.original.clone();
        let cfg = self.implant_cfg(functional_epochs).recover;
        let id = HorizontalKey::identity(self.cfg.dims.vocab);
        awareness_recover(&mut m, &self.task.train, Some(&self.task.test), &id, &cfg)?;
        let trace = functional_recover(&mut m, &self.task.train, Some(&self.task.test), &id, &cfg)?;
        Ok((m, trace))
    }
}

fn accuracy_at(trace: &[EpochRecord], epoch: usize) -> f64 {
    trace
        .iter()
        .find(|r| r.epoch == epoch)
        .map_or(f64::NAN, |r| r.accuracy)
}

/// Recovery result for one operator (or the control when `op` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub op: Option<String>,
    pub acc_short: f64,
    pub acc_long: f64,
    pub awareness_start: f64,
    pub awareness_end: f64,
}

impl RecoveryRow {
    pub fn gain(&self) -> f64 {
        self.acc_long - self.acc_short
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStudy {
    pub short_epochs: usize,
    pub long_epochs: usize,
    pub control: RecoveryRow,
    pub operators: Vec<RecoveryRow>,
}

/// Shake with each single operator, recover, and compare against the control.
pub fn recovery_study(setup: &Setup, ops: &[OpParams]) -> Result<RecoveryStudy> {
    let short = setup.cfg.recover.functional_epochs;
    let long = setup.cfg.extended_epochs.max(short);
    let (_, ctrl) = setup.control(long)?;
    let control = RecoveryRow {
        op: None,
        acc_short: accuracy_at(&ctrl, short),
        acc_long: accuracy_at(&ctrl, long),
        awareness_start: f64::NAN,
        awareness_end: f64::NAN,
    };
    let mut operators = Vec::with_capacity(ops.len());
    for op in ops {
        let key = KeyGenConfig {
            rounds: 1,
            ops: vec![*op],
        };
        let (_, out) = setup.implant(&key, long)?;
        let r = &out.rounds[0];
        operators.push(RecoveryRow {
            op: Some(op.op().name().to_string()),
            acc_short: accuracy_at(&r.functional, short),
            acc_long: accuracy_at(&r.functional, long),
            awareness_start: r.awareness.first().map_or(f64::NAN, |e| e.eval_loss),
            awareness_end: r.awareness.last().map_or(f64::NAN, |e| e.eval_loss),
        });
    }
    Ok(RecoveryStudy {
        short_epochs: short,
        long_epochs: long,
        control,
        operators,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningParity {
    pub private_acc: f64,
    pub vanilla_acc: f64,
    pub representation_unchanged: bool,
    /// Hash of the privately tuned model as served.
    pub tuned_sha256: String,
    /// Decoded test-set predictions of the privately tuned model.
    pub predictions: Vec<Prediction>,
}

fn label_accuracy(preds: &[Prediction], truth: &[u32]) -> f64 {
    let labels: Vec<u32> = preds
        .iter()
        .map(|p| match p {
            Prediction::Label(l) => *l,
            Prediction::Tokens(_) => u32::MAX,
        })
        .collect();
    accuracy(&labels, truth)
}

/// Private tuning of the implanted model against vanilla (all parameters
/// trainable) tuning of the control model under the same schedule.
pub fn tuning_parity(setup: &Setup, kp: &KeyPair, implanted: &Implanted) -> Result<TuningParity> {
    let keys = ClientKeys::from_keypair(kp, true, setup.cfg.dims.classes, true);
    let mut served = deploy(&implanted.model, &keys.labels)?;
    let rep = served.representation_hash();
    private_tune(&mut served, &setup.task.train, &keys, &setup.cfg.tune)?;
    let truth = setup.task.test.labels().expect("labeled");
    let preds = private_infer(&served, &setup.task.test.inputs(), &keys, Mode::Task)?;
    let private_acc = label_accuracy(&preds, &truth);

    let (mut vanilla, _) = setup.control(setup.cfg.recover.functional_epochs)?;
    fine_tune(
        &mut vanilla,
        &setup.task.train,
        &setup.cfg.tune.schedule(),
        &FreezeMask::none(),
    )?;
    Ok(TuningParity {
        private_acc,
        vanilla_acc: setup.test_accuracy(&vanilla)?,
        representation_unchanged: served.representation_hash() == rep,
        tuned_sha256: served.hash(),
        predictions: preds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionStudy {
    pub records: Vec<AttackRecord>,
}

impl InversionStudy {
    pub fn rate(&self, setting: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.setting == setting)
            .map(|r| r.rate)
    }
}

/// Nearest-neighbour inversion of the original and implanted embedding
/// tables. `vertical/*` realigns rows with the key so only value shaking
/// protects; `combined/*` attacks the table as stored.
pub fn inversion_study(setup: &Setup, implanted: &Implanted) -> Result<InversionStudy> {
    Ok(InversionStudy {
        records: inversion_records(
            setup.original.embedding(),
            implanted.model.embedding(),
            &implanted.encoding,
        )?,
    })
}

/// The records behind [`inversion_study`] for any pair of tables.
pub fn inversion_records(
    public: &Matrix,
    stored: &Matrix,
    encoding: &HorizontalKey,
) -> Result<Vec<AttackRecord>> {
    let aligned = realign(stored, encoding)?;
    let mut records = Vec::new();
    for metric in [Metric::Cosine, Metric::L2] {
        records.push(AttackRecord::new(
            "inversion",
            format!("original/{metric}"),
            inversion_attack(public, public, metric)?,
        ));
        records.push(AttackRecord::new(
            "inversion",
            format!("vertical/{metric}"),
            inversion_attack(public, &aligned, metric)?,
        ));
        records.push(AttackRecord::new(
            "inversion",
            format!("combined/{metric}"),
            inversion_attack(public, stored, metric)?,
        ));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStudy {
    pub majority: f64,
    pub plain: f64,
    /// Probe applied to the implanted model's pooled input embeddings.
    pub implanted: f64,
    /// Probe applied to public embeddings looked up with encoded ids.
    pub encoded_ids: f64,
    /// Implanted features shifted so their mean matches the training
    /// features' mean: an attacker who re-centres without any key.
    pub recentered: f64,
}

impl AttributeStudy {
    pub fn records(&self) -> Vec<AttackRecord> {
        [
            ("majority", self.majority),
            ("plain", self.plain),
            ("implanted", self.implanted),
            ("encoded_ids", self.encoded_ids),
            ("recentered", self.recentered),
        ]
        .into_iter()
        .map(|(setting, rate)| AttackRecord::new("attribute", setting, rate))
        .collect()
    }
}

/// Raw sequences with their planted attribute, split for probe training and testing.
#[derive(Debug, Clone, Copy)]
pub struct AttributeData<'a> {
    pub train_inputs: &'a [Vec<u32>],
    pub train_attributes: &'a [u32],
    pub test_inputs: &'a [Vec<u32>],
    pub test_attributes: &'a [u32],
}

/// Train an attribute probe on pooled embeddings of the original model and
/// apply it to what a keyless server sees.
pub fn attribute_study(setup: &Setup, implanted: &Implanted) -> Result<AttributeStudy> {
    let train_inputs = setup.task.train.inputs();
    let test_inputs = setup.task.test.inputs();
    let data = AttributeData {
        train_inputs: &train_inputs,
        train_attributes: &setup.task.train_attributes,
        test_inputs: &test_inputs,
        test_attributes: &setup.task.test_attributes,
    };
    attribute_probe(
        setup.original.embedding(),
        implanted.model.embedding(),
        &implanted.encoding,
        &data,
        &setup.cfg.probe,
    )
}

/// [`attribute_study`] on explicit tables and data.
pub fn attribute_probe(
    public: &Matrix,
    stored: &Matrix,
    encoding: &HorizontalKey,
    data: &AttributeData,
    probe_cfg: &ProbeConfig,
) -> Result<AttributeStudy> {
    let train_x = pooled_embeddings(public, data.train_inputs)?;
    let test_y = data.test_attributes;
    let probe = attacks::LinearProbe::fit(&train_x, data.train_attributes, probe_cfg)?;
    let encoded: Vec<Vec<u32>> = data
        .test_inputs
        .iter()
        .map(|x| crate::privacy::encode_ids(x, encoding))
        .collect::<Result<_>>()?;
    let observed = pooled_embeddings(stored, &encoded)?;
    let shift: Vec<f64> = column_mean(&train_x)
        .iter()
        .zip(column_mean(&observed))
        .map(|(a, b)| a - b)
        .collect();
    let recentered: Vec<Vec<f64>> = observed
        .iter()
        .map(|f| f.iter().zip(&shift).map(|(x, s)| x + s).collect())
        .collect();
    Ok(AttributeStudy {
        majority: attacks::majority_rate(test_y),
        plain: probe.accuracy(&pooled_embeddings(public, data.test_inputs)?, test_y),
        implanted: probe.accuracy(&observed, test_y),
        encoded_ids: probe.accuracy(&pooled_embeddings(public, &encoded)?, test_y),
        recentered: probe.accuracy(&recentered, test_y),
    })
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
    }
    mean
}
