//! Checkpoint layout (little-endian):
//!
//! ```text
//! "CTKM" | u16 version | u32 V | u32 d | u32 layers | u32 hidden | u32 classes
//! u8 tied | f64 tensors in canonical order | u32 CRC32 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use super::{Block, Head, LanguageModel, ModelDims};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numeric::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CTKM";
pub const CHECKPOINT_VERSION: u16 = 1;

impl LanguageModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        let d = self.dims;
        for v in [d.vocab, d.dim, d.layers, d.hidden, d.classes] {
            w.u32(v as u32);
        }
        w.u8(u8::from(self.is_tied()));
        for (_, t) in self.tensors() {
            w.f64s(t);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let dims = ModelDims {
            vocab: r.u32()? as usize,
            dim: r.u32()? as usize,
            layers: r.u32()? as usize,
            hidden: r.u32()? as usize,
            classes: r.u32()? as usize,
        };
        dims.validate()?;
        let tied = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(FormatError::Field {
                    field: "tied",
                    reason: format!("flag must be 0 or 1, got {other}"),
                }
                .into())
            }
        };
        let ModelDims {
            vocab: v,
            dim: d,
            layers,
            hidden: h,
            classes,
        } = dims;
        let mut mat = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = r.f64s(rows * cols)?;
            Matrix::from_vec(rows, cols, data)
        };
        let embed = mat(v, d)?;
        let output = if tied { None } else { Some(mat(v, d)?) };
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            let attn_norm = mat(1, d)?.into_vec();
            let wq = mat(d, d)?;
            let wk = mat(d, d)?;
            let wv = mat(d, d)?;
            let wo = mat(d, d)?;
            let ffn_norm = mat(1, d)?.into_vec();
            let w1 = mat(d, h)?;
            let b1 = mat(1, h)?.into_vec();
            let w2 = mat(h, d)?;
            let b2 = mat(1, d)?.into_vec();
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = mat(1, d)?.into_vec();
        let head = if classes > 0 {
            Some(Head {
                weight: mat(classes, d)?,
                bias: mat(1, classes)?.into_vec(),
            })
        } else {
            None
        };
        r.finish_with_crc()?;
        Ok(LanguageModel {
            dims,
            embed,
            output,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LanguageModel::from_bytes(&fs::read(path)?)
    }

    /// Load and require the given dimensions.
    pub fn load_expecting(path: impl AsRef<Path>, dims: ModelDims) -> Result<Self> {
        let m = LanguageModel::load(path)?;
        if m.dims != dims {
            return Err(Error::Incompatible(format!(
                "checkpoint dims {:?} differ from expected {dims:?}",
                m.dims
            )));
        }
        Ok(m)
    }
}
