//! Frame layout, little-endian:
//!
//! ```text
//! u32 length    byte length of kind + body
//! u8  kind      see [`Kind`]
//! ..  body      JSON document for that kind
//! ```

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{Mode, ModelDims};
use crate::privacy::Prediction;

/// Frames whose declared length exceeds this close the connection.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    InferReq = 1,
    InferResp = 2,
    TuneBatch = 3,
    TuneAck = 4,
    StatusReq = 5,
    StatusResp = 6,
    Error = 7,
}

impl Kind {
    pub fn from_u8(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::InferReq,
            2 => Kind::InferResp,
            3 => Kind::TuneBatch,
            4 => Kind::TuneAck,
            5 => Kind::StatusReq,
            6 => Kind::StatusResp,
            7 => Kind::Error,
            _ => return None,
        })
    }
}

/// A frame as read off the socket; the kind byte is not yet validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub kind: u8,
    pub body: Vec<u8>,
}

impl RawFrame {
    pub fn new(kind: Kind, body: Vec<u8>) -> Self {
        RawFrame {
            kind: kind as u8,
            body,
        }
    }

    pub fn encode<T: Serialize>(kind: Kind, msg: &T) -> Self {
        RawFrame::new(
            kind,
            serde_json::to_vec(msg).expect("wire messages always serialize"),
        )
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.body)
    }

    /// The full on-wire bytes, length prefix included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.body.len());
        out.extend_from_slice(&((1 + self.body.len()) as u32).to_le_bytes());
        out.push(self.kind);
        out.extend_from_slice(&self.body);
        out
    }
}

#[derive(Debug)]
pub enum ReadError {
    Io(io::Error),
    /// Declared length over [`MAX_FRAME`]; the stream is no longer in sync.
    Oversized(usize),
    /// Zero-length frame (no kind byte). The stream is still in sync.
    Empty,
}

impl From<io::Error> for ReadError {
    fn from(e: io::Error) -> Self {
        ReadError::Io(e)
    }
}

/// Next frame, or `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<RawFrame>, ReadError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ReadError::Oversized(len));
    }
    if len == 0 {
        return Err(ReadError::Empty);
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let body = buf.split_off(1);
    Ok(Some(RawFrame { kind: buf[0], body }))
}

pub fn write_frame(w: &mut impl Write, frame: &RawFrame) -> io::Result<()> {
    w.write_all(&frame.to_bytes())?;
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub mode: Mode,
    pub inputs: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferResponse {
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneAck {
    /// Server step counter after this batch.
    pub step: u64,
    pub loss: f64,
    pub model_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusRequest {}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusResponse {
    pub dims: ModelDims,
    pub tied: bool,
    pub step: u64,
    pub model_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: u16,
    pub message: String,
}

pub mod codes {
    pub const MALFORMED: u16 = 400;
    pub const INCOMPATIBLE: u16 = 409;
    pub const INVALID_INPUT: u16 = 422;
    pub const INTERNAL: u16 = 500;
}
