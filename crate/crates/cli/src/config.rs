//! Run configuration: a versioned TOML document layered over built-in
//! defaults, with `--set path=value` overrides applied last.
//!
//! The schema is documented in `docs/config.md`; `configs/default.toml`
//! spells out every field with its default value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use cyphertalk::attacks::ProbeConfig;
use cyphertalk::data::SyntheticConfig;
use cyphertalk::experiment::ExperimentConfig;
use cyphertalk::keys::{KeyGenConfig, KeyPair, OpParams};
use cyphertalk::model::{FreezeMask, ModelDims, TrainSchedule};
use cyphertalk::privacy::TuneConfig;
use cyphertalk::recovery::RecoverConfig;
use cyphertalk::shaking::ImplantConfig;

use crate::exit::{CliError, ErrorClass};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Untied output projection unless set.
    pub tied: bool,
    /// Permute class labels on the wire as well as token ids.
    pub shake_labels: bool,
    /// Apply the horizontal table once per implant rather than per round.
    pub hs_once: bool,
    /// Leave the output projection out of vertical shaking.
    pub skip_output: bool,
    pub mask_rate: f64,
    /// Seeds of the data and model used by `bench`. The other commands take
    /// their seed from `--seed`.
    pub data_seed: u64,
    pub model_seed: u64,
    /// Functional epochs of the long recovery run in `bench`.
    pub extended_epochs: usize,
    pub dims: ModelDims,
    pub data: SyntheticConfig,
    pub pretrain: TrainSchedule,
    pub key: KeySection,
    pub recover: RecoverConfig,
    pub tune: TuneConfig,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySection {
    /// Emit the null key (no rounds, identity table) regardless of `ops`.
    pub identity: bool,
    pub rounds: usize,
    pub ops: Vec<OpParams>,
}

impl Default for Config {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        let implant = ImplantConfig::default();
        Config {
            version: CONFIG_VERSION,
            tied: e.tied,
            shake_labels: true,
            hs_once: implant.hs_once,
            skip_output: implant.skip_output,
            mask_rate: e.mask_rate,
            data_seed: e.data_seed,
            model_seed: e.model_seed,
            extended_epochs: e.extended_epochs,
            dims: e.dims,
            data: e.data,
            pretrain: e.pretrain,
            key: KeySection {
                identity: false,
                rounds: e.key.rounds,
                ops: e.key.ops,
            },
            recover: e.recover,
            tune: e.tune,
            probe: e.probe,
        }
    }
}

impl Config {
    /// Defaults, then the file (which must carry `version`), then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
        let mut doc = Value::try_from(Config::default())
            .map_err(|e| CliError::new(ErrorClass::Internal, format!("default config: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::new(ErrorClass::Io, format!("reading {}: {e}", path.display()))
            })?;
            let file: Table = text
                .parse()
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            check_version(file.get("version"))?;
            merge(&mut doc, Value::Table(file));
        }
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        check_version(doc.get("version"))?;
        let cfg: Config = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::usage(format!("config field `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: cyphertalk::error::Error| {
            CliError::usage(format!("config `{name}`: {e}"))
        };
        self.dims.validate().map_err(|e| field("dims", e))?;
        self.pretrain.validate().map_err(|e| field("pretrain", e))?;
        self.recover.validate().map_err(|e| field("recover", e))?;
        self.tune
            .schedule()
            .validate()
            .map_err(|e| field("tune", e))?;
        if !self.key.identity {
            self.keygen().validate().map_err(|e| field("key", e))?;
        }
        for name in self.recover.freeze.names() {
            let known = FreezeMask::GROUPS.contains(&name)
                || name == "final_norm"
                || name.starts_with("blocks.")
                || name.starts_with("head.");
            if !known {
                return Err(CliError::usage(format!(
                    "config `recover.freeze`: unknown group or tensor {name:?} (groups: {})",
                    FreezeMask::GROUPS.join(", ")
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(CliError::usage(format!(
                "config `mask_rate`: must be in [0, 1), got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }

    /// The synthetic generator settings, sized to the model.
    pub fn synthetic(&self) -> Result<SyntheticConfig, CliError> {
        let mut data = self.data.clone();
        data.vocab = self.dims.vocab;
        data.classes = self.dims.classes;
        data.validate()
            .map_err(|e| CliError::usage(format!("config `data`: {e}")))?;
        Ok(data)
    }

    pub fn keygen(&self) -> KeyGenConfig {
        KeyGenConfig {
            rounds: self.key.rounds,
            ops: self.key.ops.clone(),
        }
    }

    pub fn generate_key(&self, seed: u64) -> cyphertalk::error::Result<KeyPair> {
        if self.key.identity {
            Ok(KeyPair::null(self.dims.vocab, self.dims.dim))
        } else {
            KeyPair::generate(&self.keygen(), self.dims.vocab, self.dims.dim, seed)
        }
    }

    pub fn implant(&self, seed: u64) -> ImplantConfig {
        ImplantConfig {
            recover: RecoverConfig {
                seed,
                ..self.recover.clone()
            },
            hs_once: self.hs_once,
            skip_output: self.skip_output,
        }
    }

    pub fn experiment(&self, key_seed: u64) -> Result<ExperimentConfig, CliError> {
        if self.key.identity {
            return Err(CliError::usage(
                "config `key.identity`: bench needs a real key",
            ));
        }
        Ok(ExperimentConfig {
            data: self.synthetic()?,
            data_seed: self.data_seed,
            dims: self.dims,
            tied: self.tied,
            model_seed: self.model_seed,
            pretrain: self.pretrain,
            mask_rate: self.mask_rate,
            recover: self.recover.clone(),
            extended_epochs: self.extended_epochs,
            tune: self.tune.clone(),
            key: self.keygen(),
            key_seed,
            probe: self.probe,
        })
    }

    /// Canonical TOML form, as written into run directories.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn check_version(v: Option<&Value>) -> Result<(), CliError> {
    match v {
        None => Err(CliError::usage("config field `version` is missing")),
        Some(Value::Integer(n)) if *n == i64::from(CONFIG_VERSION) => Ok(()),
        Some(Value::Integer(n)) => Err(CliError::new(
            ErrorClass::Version,
            format!(
                "config version {n} is not supported (this build reads version {CONFIG_VERSION})"
            ),
        )),
        Some(other) => Err(CliError::usage(format!(
            "config field `version`: expected an integer, found {other}"
        ))),
    }
}

/// Tables merge key by key; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`. The value is read as a TOML literal and falls back to a
/// bare string, so `--set tune.lr=0.3` and `--set recover.freeze=[]` both work.
fn apply_override(doc: &mut Value, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set {item:?}: expected path=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("--set {item:?}: bad field path")));
    }
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut slot = doc;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Table(table) = slot else {
            return Err(CliError::usage(format!(
                "--set {path}: `{part}` is inside a non-table value"
            )));
        };
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        slot = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    unreachable!("path has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str, overrides: &[&str]) -> Result<Config, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        Config::load(Some(&p), &ov)
    }

    #[test]
    fn default_config_survives_its_own_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        assert_eq!(load_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_file_matches_builtin_defaults() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(Config::load(Some(&p), &[]).unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_keep_the_other_defaults() {
        let cfg = load_str("version = 1\n[recover]\nlr = 0.3\n", &[]).unwrap();
        assert_eq!(cfg.recover.lr, 0.3);
        assert_eq!(cfg.recover.batch_size, Config::default().recover.batch_size);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let cfg = load_str(
            "version = 1\n[tune]\nepochs = 5\n",
            &["tune.epochs=2", "key.identity=true"],
        )
        .unwrap();
        assert_eq!(cfg.tune.epochs, 2);
        assert!(cfg.key.identity);
    }

    #[test]
    fn unknown_and_missing_fields_are_usage_errors_naming_the_field() {
        let e = load_str("version = 1\n[recover]\nlrr = 0.3\n", &[]).unwrap_err();
        assert_eq!(e.class, ErrorClass::Usage);
        assert!(e.message.contains("recover"), "{}", e.message);
        assert!(e.message.contains("lrr"), "{}", e.message);

        let e = load_str("[recover]\nlr = 0.3\n", &[]).unwrap_err();
        assert_eq!(e.class, ErrorClass::Usage);
        assert!(e.message.contains("version"));

        let e = load_str("version = 1\n", &["tune.lr=fast"]).unwrap_err();
        assert!(e.message.contains("tune.lr"), "{}", e.message);
    }

    #[test]
    fn other_versions_are_version_errors() {
        let e = load_str("version = 2\n", &[]).unwrap_err();
        assert_eq!(e.class, ErrorClass::Version);
    }

    #[test]
    fn semantic_checks_run_before_any_data_is_touched() {
        let e = load_str("version = 1\n", &["mask_rate=1.5"]).unwrap_err();
        assert!(e.message.contains("mask_rate"));
        let e = load_str("version = 1\n", &["recover.freeze=[\"embeding\"]"]).unwrap_err();
        assert!(e.message.contains("embeding"), "{}", e.message);
        let e = load_str("version = 1\n", &["tune.batch_size=0"]).unwrap_err();
        assert!(e.message.contains("batch_size"), "{}", e.message);
    }

    #[test]
    fn operator_lists_parse_from_inline_tables() {
        let cfg = load_str(
            "version = 1\n[key]\nrounds = 2\nops = [{ op = \"tilt\", delta = 1.0, sigma = 0.1 }]\n",
            &[],
        )
        .unwrap();
        assert_eq!(
            cfg.key.ops,
            vec![OpParams::Tilt {
                delta: 1.0,
                sigma: 0.1
            }]
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        b.tune.lr = 0.25;
        assert_eq!(a.sha256(), Config::default().sha256());
        assert_ne!(a.sha256(), b.sha256());
    }
}
