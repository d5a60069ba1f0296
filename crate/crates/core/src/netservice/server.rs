use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use super::wire::{
    codes, read_frame, write_frame, ErrorBody, InferRequest, InferResponse, Kind, RawFrame,
    ReadError, StatusResponse, TuneAck,
};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::privacy::{apply_tune_batch, serve_infer, TuneBatch};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Write the model here after every applied tuning step, before the ack.
    pub persist: Option<PathBuf>,
}

/// Immutable view served to readers; replaced whole after each tuning step.
struct Snapshot {
    model: Arc<LanguageModel>,
    step: u64,
    hash: String,
}

struct Shared {
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    persist: Option<PathBuf>,
    stopping: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

/// Bind and start serving `model` in background threads.
pub fn serve(
    model: LanguageModel,
    bind: impl ToSocketAddrs,
    cfg: ServerConfig,
) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let hash = model.hash();
    let shared = Arc::new(Shared {
        snapshot: RwLock::new(Arc::new(Snapshot {
            model: Arc::new(model),
            step: 0,
            hash,
        })),
        writer: Mutex::new(()),
        persist: cfg.persist,
        stopping: AtomicBool::new(false),
        conns: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(0),
    });
    let accept_shared = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("cyphertalk-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))?;
    info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn step(&self) -> u64 {
        self.shared.current().step
    }

    pub fn model_hash(&self) -> String {
        self.shared.current().hash.clone()
    }

    pub fn model(&self) -> Arc<LanguageModel> {
        Arc::clone(&self.shared.current().model)
    }

    /// Block until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stop accepting, drop every open connection and release the port.
    /// A tuning step already running completes (and persists) first.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let Some(accept) = self.accept.take() else {
            return;
        };
        self.shared.stopping.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = accept.join();
        let _guard = self.shared.writer.lock();
        for (_, s) in self.shared.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        info!("server on {} stopped", self.addr);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Shared {
    fn current(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().unwrap())
    }

    fn status(&self) -> StatusResponse {
        let s = self.current();
        StatusResponse {
            dims: s.model.dims(),
            tied: s.model.is_tied(),
            step: s.step,
            model_sha256: s.hash.clone(),
        }
    }

    fn infer(&self, req: &InferRequest) -> Result<InferResponse> {
        let model = Arc::clone(&self.current().model);
        Ok(InferResponse {
            predictions: serve_infer(&model, &req.inputs, req.mode)?,
        })
    }

    fn tune(&self, batch: &TuneBatch) -> Result<TuneAck> {
        let _guard = self.writer.lock().unwrap();
        if self.stopping.load(Ordering::SeqCst) {
            return Err(Error::Transport("server is shutting down".into()));
        }
        let current = self.current();
        let mut next = (*current.model).clone();
        let loss = apply_tune_batch(&mut next, batch)?;
        let hash = next.hash();
        if let Some(path) = &self.persist {
            persist(&next, path)?;
        }
        let step = current.step + 1;
        *self.snapshot.write().unwrap() = Arc::new(Snapshot {
            model: Arc::new(next),
            step,
            hash: hash.clone(),
        });
        Ok(TuneAck {
            step,
            loss,
            model_sha256: hash,
        })
    }
}

/// Write to a sibling temp file and rename over the target.
fn persist(m: &LanguageModel, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, m.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
        match stream.try_clone() {
            Ok(s) => {
                shared.conns.lock().unwrap().insert(id, s);
            }
            Err(e) => {
                warn!("cannot track connection: {e}");
                continue;
            }
        }
        let conn_shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name(format!("cyphertalk-conn-{id}"))
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                debug!("connection {id} from {peer:?}");
                if let Err(e) = handle_connection(stream, &conn_shared) {
                    debug!("connection {id} ended: {e}");
                }
                conn_shared.conns.lock().unwrap().remove(&id);
            });
        if let Err(e) = spawned {
            warn!("cannot spawn connection thread: {e}");
            shared.conns.lock().unwrap().remove(&id);
        }
    }
}

fn error_frame(code: u16, message: impl Into<String>) -> RawFrame {
    RawFrame::encode(
        Kind::Error,
        &ErrorBody {
            code,
            message: message.into(),
        },
    )
}

fn error_code(e: &Error) -> u16 {
    match e {
        Error::Param { .. } | Error::Config(_) | Error::Input { .. } => codes::INVALID_INPUT,
        Error::Incompatible(_) => codes::INCOMPATIBLE,
        _ => codes::INTERNAL,
    }
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(ReadError::Empty) => {
                write_frame(&mut writer, &error_frame(codes::MALFORMED, "empty frame"))?;
                continue;
            }
            Err(ReadError::Oversized(n)) => {
                warn!("closing connection after oversized frame ({n} bytes)");
                return Ok(());
            }
            Err(ReadError::Io(e)) => return Err(e),
        };
        let reply = respond(&frame, shared);
        write_frame(&mut writer, &reply)?;
    }
}

/// Message bodies are never logged; only kinds and error codes.
fn respond(frame: &RawFrame, shared: &Shared) -> RawFrame {
    let malformed = |e: serde_json::Error| error_frame(codes::MALFORMED, format!("bad body: {e}"));
    let result = match Kind::from_u8(frame.kind) {
        Some(Kind::StatusReq) => return RawFrame::encode(Kind::StatusResp, &shared.status()),
        Some(Kind::InferReq) => match frame.decode::<InferRequest>() {
            Ok(req) => shared
                .infer(&req)
                .map(|r| RawFrame::encode(Kind::InferResp, &r)),
            Err(e) => return malformed(e),
        },
        Some(Kind::TuneBatch) => match frame.decode::<TuneBatch>() {
            Ok(batch) => shared
                .tune(&batch)
                .map(|a| RawFrame::encode(Kind::TuneAck, &a)),
            Err(e) => return malformed(e),
        },
        Some(k) => return error_frame(codes::MALFORMED, format!("unexpected frame kind {k:?}")),
        None => {
            return error_frame(
                codes::MALFORMED,
                format!("unknown frame kind {}", frame.kind),
            )
        }
    };
    result.unwrap_or_else(|e| {
        let code = error_code(&e);
        debug!("request failed with code {code}");
        error_frame(code, e.to_string())
    })
}
