//! Key file layout (all integers little-endian):
//!
//! ```text
//! "CTKY" | u16 version | u32 V | u32 d | u64 seed | u16 rounds
//! per round: u8 op id | u8 param count | (u8 label, f64 value)* | u32 len | f64 * len
//! u32 * V permutation table | u32 CRC32 of all preceding bytes
//! ```
//!
//! Param labels: 1 = Δ, 2 = σ, 3 = k, 4 = Θ, 5 = ε.

use std::fs;
use std::path::Path;

use super::{HorizontalKey, KeyPair, OpParams, VsOp, VsRound};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};

pub const KEY_MAGIC: [u8; 4] = *b"CTKY";
pub const KEY_VERSION: u16 = 1;

const LABEL_DELTA: u8 = 1;
const LABEL_SIGMA: u8 = 2;
const LABEL_K: u8 = 3;
const LABEL_THETA: u8 = 4;
const LABEL_EPSILON: u8 = 5;

fn labeled(params: &OpParams) -> Vec<(u8, f64)> {
    match *params {
        OpParams::Addv { delta } => vec![(LABEL_DELTA, delta)],
        OpParams::Inflate { delta, sigma } | OpParams::Tilt { delta, sigma } => {
            vec![(LABEL_DELTA, delta), (LABEL_SIGMA, sigma)]
        }
        OpParams::DxFixp { delta, k, theta } => {
            vec![(LABEL_DELTA, delta), (LABEL_K, k), (LABEL_THETA, theta)]
        }
        OpParams::Gaussian { delta, epsilon } | OpParams::Laplace { delta, epsilon } => {
            vec![(LABEL_DELTA, delta), (LABEL_EPSILON, epsilon)]
        }
    }
}

fn unlabel(op: VsOp, pairs: &[(u8, f64)]) -> Result<OpParams, FormatError> {
    let get = |label: u8, field: &'static str| {
        pairs
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, v)| *v)
            .ok_or(FormatError::Field {
                field,
                reason: format!("missing for {op}"),
            })
    };
    let expected = match op {
        VsOp::Addv => 1,
        VsOp::DxFixp => 3,
        _ => 2,
    };
    if pairs.len() != expected {
        return Err(FormatError::Field {
            field: "params",
            reason: format!("{op} takes {expected} params, found {}", pairs.len()),
        });
    }
    let delta = get(LABEL_DELTA, "delta")?;
    Ok(match op {
        VsOp::Addv => OpParams::Addv { delta },
        VsOp::Inflate => OpParams::Inflate {
            delta,
            sigma: get(LABEL_SIGMA, "sigma")?,
        },
        VsOp::Tilt => OpParams::Tilt {
            delta,
            sigma: get(LABEL_SIGMA, "sigma")?,
        },
        VsOp::DxFixp => OpParams::DxFixp {
            delta,
            k: get(LABEL_K, "k")?,
            theta: get(LABEL_THETA, "theta")?,
        },
        VsOp::Gaussian => OpParams::Gaussian {
            delta,
            epsilon: get(LABEL_EPSILON, "epsilon")?,
        },
        VsOp::Laplace => OpParams::Laplace {
            delta,
            epsilon: get(LABEL_EPSILON, "epsilon")?,
        },
    })
}

fn usize_field(v: usize, field: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(field, "does not fit in u32"))
}

impl KeyPair {
    /// Canonical byte encoding; fails if the key violates its invariants.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new();
        w.bytes(&KEY_MAGIC);
        w.u16(KEY_VERSION);
        w.u32(usize_field(self.vocab_size, "vocab_size")?);
        w.u32(usize_field(self.embed_dim, "embed_dim")?);
        w.u64(self.seed);
        w.u16(
            u16::try_from(self.rounds.len())
                .map_err(|_| Error::param("rounds", "at most 65535"))?,
        );
        for round in &self.rounds {
            w.u8(round.op() as u8);
            let pairs = labeled(&round.params);
            w.u8(pairs.len() as u8);
            for (label, v) in pairs {
                w.u8(label);
                w.f64(v);
            }
            w.u32(usize_field(round.material.len(), "material")?);
            w.f64s(&round.material);
        }
        for &t in self.hs.table() {
            w.u32(t);
        }
        Ok(w.finish_with_crc())
    }

    /// Parse and validate. Structural damage, checksum failure and invariant
    /// violations surface as distinct errors, checked in that order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(KEY_MAGIC)?;
        let version = r.u16()?;
        if version != KEY_VERSION {
            return Err(FormatError::Version {
                expected: KEY_VERSION,
                found: version,
            }
            .into());
        }
        let vocab_size = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let seed = r.u64()?;
        let n = r.u16()? as usize;
        let mut rounds = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u8()?;
            let op = VsOp::from_id(id).ok_or(FormatError::Field {
                field: "op",
                reason: format!("unknown op id {id}"),
            })?;
            let count = r.u8()? as usize;
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                pairs.push((r.u8()?, r.f64()?));
            }
            let params = unlabel(op, &pairs)?;
            let len = r.u32()? as usize;
            let material = r.f64s(len)?;
            rounds.push(VsRound { params, material });
        }
        let mut tab = Vec::with_capacity(vocab_size.min(1 << 24));
        for _ in 0..vocab_size {
            tab.push(r.u32()?);
        }
        r.finish_with_crc()?;
        let hs = HorizontalKey::new(tab)?;
        let kp = KeyPair {
            vocab_size,
            embed_dim,
            seed,
            rounds,
            hs,
        };
        kp.validate()?;
        Ok(kp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KeyPair::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::KeyGenConfig;

    fn sample_key() -> KeyPair {
        let cfg = KeyGenConfig {
            rounds: 4,
            ops: vec![
                OpParams::Addv { delta: 1.0 },
                OpParams::Tilt {
                    delta: 1.0,
                    sigma: 0.3,
                },
                OpParams::DxFixp {
                    delta: 0.5,
                    k: 2.0,
                    theta: 1.0,
                },
                OpParams::Laplace {
                    delta: 1.0,
                    epsilon: 0.1,
                },
            ],
        };
        KeyPair::generate(&cfg, 16, 4, 31).unwrap()
    }

    /// Re-encode with a fresh CRC so corruption tests reach the invariant checks.
    fn recrc(mut bytes: Vec<u8>) -> Vec<u8> {
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        bytes
    }

    #[test]
    fn roundtrip_exact() {
        let kp = sample_key();
        let bytes = kp.to_bytes().unwrap();
        let back = KeyPair::from_bytes(&bytes).unwrap();
        assert_eq!(back, kp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn null_key_loads() {
        let kp = KeyPair::null(8, 3);
        let back = KeyPair::from_bytes(&kp.to_bytes().unwrap()).unwrap();
        assert!(back.is_null());
    }

    #[test]
    fn duplicate_table_entry_rejected() {
        let kp = sample_key();
        let mut bytes = kp.to_bytes().unwrap();
        let tab_start = bytes.len() - 4 - 16 * 4;
        // Copy entry 0 over entry 1.
        let first: [u8; 4] = bytes[tab_start..tab_start + 4].try_into().unwrap();
        bytes[tab_start + 4..tab_start + 8].copy_from_slice(&first);
        let err = KeyPair::from_bytes(&recrc(bytes)).unwrap_err();
        assert!(matches!(err, Error::NotBijection(_)), "{err}");
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample_key().to_bytes().unwrap();

        let err = KeyPair::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::Truncated { .. })),
            "{err}"
        );

        let mut v = bytes.clone();
        v[4] = 2;
        let err = KeyPair::from_bytes(&v).unwrap_err();
        assert!(
            matches!(err, Error::Format(FormatError::Version { found: 2, .. })),
            "{err}"
        );

        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(
            KeyPair::from_bytes(&v).unwrap_err(),
            Error::Format(FormatError::BadMagic { .. })
        ));

        let mut v = bytes.clone();
        let in_table = v.len() - 6;
        v[in_table] ^= 0x40;
        assert!(matches!(
            KeyPair::from_bytes(&v).unwrap_err(),
            Error::Format(FormatError::Checksum { .. })
        ));
    }
}
