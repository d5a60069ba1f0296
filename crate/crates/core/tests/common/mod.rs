//! Determinism fixtures shared by the golden test and the acceptance suite.
//! Each fixture renders to a stable JSON document; floats carry their raw
//! bit pattern next to the decimal form so a diff shows the exact change.

#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use serde_json::{json, Value};

use cyphertalk::keys::{generate_horizontal_key, KeyGenConfig, KeyPair, OpParams};
use cyphertalk::model::{forward, LanguageModel, Mode, ModelDims};
use cyphertalk::numeric::{sample, DistSpec, Rng};

pub const BLESS_ENV: &str = "CYPHERTALK_BLESS";

fn floats(xs: &[f64]) -> Value {
    json!({
        "values": xs,
        "bits": xs.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<Vec<_>>(),
    })
}

fn uniform_seed7() -> Value {
    let xs = sample(
        &DistSpec::Uniform {
            low: 0.0,
            high: 1.0,
        },
        3,
        &mut Rng::new(7),
    )
    .unwrap();
    json!({ "dist": "uniform[0,1)", "seed": 7, "draws": floats(&xs) })
}

fn key_addv_gaussian_seed42() -> Value {
    let cfg = KeyGenConfig {
        rounds: 3,
        ops: vec![
            OpParams::Addv { delta: 1.0 },
            OpParams::Gaussian {
                delta: 1.0,
                epsilon: 0.1,
            },
        ],
    };
    let kp = KeyPair::generate(&cfg, 8, 4, 42).unwrap();
    let rounds: Vec<Value> = kp
        .rounds
        .iter()
        .map(|r| json!({ "op": r.op().name(), "material": floats(&r.material) }))
        .collect();
    let bytes = kp.to_bytes().unwrap();
    json!({
        "vocab": 8,
        "dim": 4,
        "seed": 42,
        "rounds": rounds,
        "hs_tab": kp.hs.table(),
        "key_file_sha256": cyphertalk::codec::sha256_hex(&bytes),
        "key_file_hex": hex::encode(&bytes),
    })
}

fn permutation_v8_seed13() -> Value {
    let hs = generate_horizontal_key(8, &mut Rng::new(13)).unwrap();
    json!({ "vocab": 8, "seed": 13, "tab": hs.table() })
}

fn tiny_logits() -> Value {
    let dims = ModelDims {
        vocab: 16,
        dim: 4,
        layers: 1,
        hidden: 8,
        classes: 3,
    };
    let m = LanguageModel::init(dims, false, &mut Rng::new(3)).unwrap();
    let input = vec![1u32, 5, 2, 9];
    let lm = forward(&m, std::slice::from_ref(&input), Mode::Lm).unwrap();
    let task = forward(&m, std::slice::from_ref(&input), Mode::Task).unwrap();
    json!({
        "model_seed": 3,
        "model_sha256": m.hash(),
        "input": input,
        "lm_logits": floats(lm[0].as_slice()),
        "task_logits": floats(task[0].as_slice()),
    })
}

/// `(file name, freshly generated content)` for every fixture.
pub fn generate_all() -> Vec<(&'static str, String)> {
    [
        ("uniform_seed7.json", uniform_seed7()),
        ("key_addv_gaussian_seed42.json", key_addv_gaussian_seed42()),
        ("permutation_v8_seed13.json", permutation_v8_seed13()),
        ("tiny_logits.json", tiny_logits()),
    ]
    .into_iter()
    .map(|(name, v)| (name, serde_json::to_string_pretty(&v).unwrap() + "\n"))
    .collect()
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compare every fixture with its file. Missing files (or `CYPHERTALK_BLESS=1`)
/// are written instead. Returns the names that differ.
pub fn check_golden_files() -> Vec<String> {
    let dir = golden_dir();
    let bless = std::env::var(BLESS_ENV).is_ok_and(|v| v == "1");
    let mut mismatched = Vec::new();
    for (name, content) in generate_all() {
        let path = dir.join(name);
        match fs::read_to_string(&path) {
            Ok(stored) if !bless => {
                if stored != content {
                    mismatched.push(name.to_string());
                }
            }
            _ => {
                fs::create_dir_all(&dir).unwrap();
                fs::write(&path, &content).unwrap();
            }
        }
    }
    mismatched
}
