use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::de::DeserializeOwned;

use super::wire::{
    read_frame, write_frame, ErrorBody, InferRequest, InferResponse, Kind, RawFrame, ReadError,
    StatusRequest, StatusResponse, TuneAck,
};
use crate::data::AdaptDataset;
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::privacy::{client_batches, ClientKeys, Prediction, TuneBatch, TuneConfig};

/// Client end of a session. Holds the keys; every id leaves encoded and
/// every prediction is decoded on arrival. Not meant to be shared.
pub struct ClientSession {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    keys: ClientKeys,
    server: StatusResponse,
    capture: Option<Vec<Vec<u8>>>,
}

impl ClientSession {
    /// Connect and run the STATUS handshake. Fails with an incompatibility
    /// error, before any data is sent, if the keys do not fit the model.
    pub fn connect(addr: impl ToSocketAddrs, keys: ClientKeys) -> Result<Self> {
        ClientSession::connect_with_timeout(addr, keys, Duration::from_secs(300))
    }

    pub fn connect_with_timeout(
        addr: impl ToSocketAddrs,
        keys: ClientKeys,
        timeout: Duration,
    ) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let mut session = ClientSession {
            reader: BufReader::new(stream.try_clone().map_err(transport)?),
            writer: BufWriter::new(stream),
            keys,
            server: StatusResponse::default(),
            capture: None,
        };
        session.server = session.status()?;
        session.keys.check_dims(session.server.dims)?;
        Ok(session)
    }

    /// Status as reported by the handshake.
    pub fn server(&self) -> &StatusResponse {
        &self.server
    }

    /// Record the bytes of every frame sent or received from now on.
    pub fn start_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn take_capture(&mut self) -> Vec<Vec<u8>> {
        self.capture.take().unwrap_or_default()
    }

    pub fn status(&mut self) -> Result<StatusResponse> {
        self.call(
            RawFrame::encode(Kind::StatusReq, &StatusRequest {}),
            Kind::StatusResp,
        )
    }

    /// Encode, send, decode. Predictions are in the original id/label space.
    pub fn infer(&mut self, inputs: &[Vec<u32>], mode: Mode) -> Result<Vec<Prediction>> {
        let req = InferRequest {
            mode,
            inputs: self.keys.encode_inputs(inputs)?,
        };
        let resp: InferResponse =
            self.call(RawFrame::encode(Kind::InferReq, &req), Kind::InferResp)?;
        if resp.predictions.len() != inputs.len() {
            return Err(Error::Protocol(format!(
                "{} predictions for {} inputs",
                resp.predictions.len(),
                inputs.len()
            )));
        }
        resp.predictions
            .iter()
            .map(|p| self.keys.decode_prediction(p))
            .collect()
    }

    /// Send one already-encoded batch and wait for its ack.
    pub fn tune_step(&mut self, batch: &TuneBatch) -> Result<TuneAck> {
        self.call(RawFrame::encode(Kind::TuneBatch, batch), Kind::TuneAck)
    }

    /// Private tuning over the wire; batches are applied in order, one ack each.
    pub fn tune(&mut self, data: &AdaptDataset, cfg: &TuneConfig) -> Result<Vec<TuneAck>> {
        let batches = client_batches(data, &self.keys, cfg)?;
        batches.iter().map(|b| self.tune_step(b)).collect()
    }

    fn call<T: DeserializeOwned>(&mut self, frame: RawFrame, expect: Kind) -> Result<T> {
        let bytes = frame.to_bytes();
        if bytes.len() - 4 > super::wire::MAX_FRAME {
            return Err(Error::Config(format!(
                "request of {} bytes exceeds the frame limit",
                bytes.len()
            )));
        }
        if let Some(c) = &mut self.capture {
            c.push(bytes);
        }
        write_frame(&mut self.writer, &frame).map_err(transport)?;
        let reply = match read_frame(&mut self.reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Err(Error::Transport("server closed the connection".into())),
            Err(ReadError::Io(e)) => return Err(transport(e)),
            Err(ReadError::Oversized(n)) => {
                return Err(Error::Protocol(format!("oversized reply ({n} bytes)")))
            }
            Err(ReadError::Empty) => return Err(Error::Protocol("empty reply frame".into())),
        };
        if let Some(c) = &mut self.capture {
            c.push(reply.to_bytes());
        }
        match Kind::from_u8(reply.kind) {
            Some(k) if k == expect => reply
                .decode()
                .map_err(|e| Error::Protocol(format!("bad {k:?} body: {e}"))),
            Some(Kind::Error) => {
                let body: ErrorBody = reply
                    .decode()
                    .map_err(|e| Error::Protocol(format!("bad error body: {e}")))?;
                Err(Error::Remote {
                    code: body.code,
                    message: body.message,
                })
            }
            _ => Err(Error::Protocol(format!(
                "expected {expect:?}, got kind {}",
                reply.kind
            ))),
        }
    }
}

fn transport(e: std::io::Error) -> Error {
    Error::Transport(e.to_string())
}
