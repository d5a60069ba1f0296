use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;

use cyphertalk::data::{AdaptDataset, SyntheticTask};
use cyphertalk::keys::{KeyGenConfig, KeyPair, OpParams};
use cyphertalk::model::{predict_labels, predict_tokens, LanguageModel, Mode, ModelDims};
use cyphertalk::netservice::wire::{
    codes, read_frame, ErrorBody, Kind, RawFrame, StatusRequest, MAX_FRAME,
};
use cyphertalk::netservice::{serve, ClientSession, ServerConfig};
use cyphertalk::numeric::Rng;
use cyphertalk::privacy::{
    client_batches, deploy, private_infer, private_tune, ClientKeys, Prediction, TuneConfig,
};
use cyphertalk::shaking::{hs_shake, vs_shake};
use cyphertalk::Error;

const DIMS: ModelDims = ModelDims {
    vocab: 64,
    dim: 8,
    layers: 1,
    hidden: 16,
    classes: 3,
};

fn base_model() -> LanguageModel {
    LanguageModel::init(DIMS, false, &mut Rng::new(5)).unwrap()
}

/// A shaken, deployed model with its client keys. No recovery: the
/// protocol tests only need the arithmetic, not a useful model.
fn shaken() -> (LanguageModel, ClientKeys) {
    let cfg = KeyGenConfig {
        rounds: 2,
        ops: vec![OpParams::Addv { delta: 1.0 }],
    };
    let kp = KeyPair::generate(&cfg, DIMS.vocab, DIMS.dim, 99).unwrap();
    let mut m = base_model();
    for r in &kp.rounds {
        vs_shake(&mut m, r, false).unwrap();
    }
    hs_shake(&mut m, &kp.hs).unwrap();
    let keys = ClientKeys::from_keypair(&kp, true, DIMS.classes, true);
    let served = deploy(&m, &keys.labels).unwrap();
    (served, keys)
}

fn data(n: usize) -> AdaptDataset {
    SyntheticTask::separable(DIMS.vocab, DIMS.classes, n, 8, 17).unwrap()
}

fn tune_cfg() -> TuneConfig {
    TuneConfig {
        epochs: 3,
        lr: 0.1,
        batch_size: 8,
        seed: 4,
        ..TuneConfig::default()
    }
}

/// True if `needle` appears in `hay` as a whole comma-separated id run.
fn contains_id_run(hay: &[u8], needle: &[u32]) -> bool {
    let pat: Vec<String> = needle.iter().map(u32::to_string).collect();
    let pat = pat.join(",");
    let pat = pat.as_bytes();
    hay.windows(pat.len()).enumerate().any(|(i, w)| {
        w == pat
            && (i == 0 || !hay[i - 1].is_ascii_digit())
            && hay.get(i + pat.len()).is_none_or(|c| !c.is_ascii_digit())
    })
}

#[test]
fn status_handshake_reports_dims_and_step() {
    let server = serve(base_model(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let s = ClientSession::connect(server.local_addr(), ClientKeys::identity(64, 3)).unwrap();
    assert_eq!(s.server().dims, DIMS);
    assert_eq!(s.server().step, 0);
    assert_eq!(s.server().model_sha256, base_model().hash());
}

#[test]
fn identity_keys_match_plain_local_inference() {
    let m = base_model();
    let server = serve(m.clone(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let mut s = ClientSession::connect(server.local_addr(), ClientKeys::identity(64, 3)).unwrap();
    let inputs = data(20).inputs();
    let labels = s.infer(&inputs, Mode::Task).unwrap();
    let expect: Vec<Prediction> = predict_labels(&m, &inputs)
        .unwrap()
        .into_iter()
        .map(Prediction::Label)
        .collect();
    assert_eq!(labels, expect);
    let tokens = s.infer(&inputs, Mode::Lm).unwrap();
    let expect: Vec<Prediction> = predict_tokens(&m, &inputs)
        .unwrap()
        .into_iter()
        .map(Prediction::Tokens)
        .collect();
    assert_eq!(tokens, expect);
}

#[test]
fn remote_session_matches_local_and_never_sends_raw_ids() {
    let (served, keys) = shaken();
    let train = data(48);
    let probe = data(16).inputs();

    let mut local = served.clone();
    let local_losses = private_tune(&mut local, &train, &keys, &tune_cfg()).unwrap();
    let local_labels = private_infer(&local, &probe, &keys, Mode::Task).unwrap();
    let local_tokens = private_infer(&local, &probe, &keys, Mode::Lm).unwrap();

    let server = serve(served, "127.0.0.1:0", ServerConfig::default()).unwrap();
    let mut s = ClientSession::connect(server.local_addr(), keys).unwrap();
    s.start_capture();
    let acks = s.tune(&train, &tune_cfg()).unwrap();
    let labels = s.infer(&probe, Mode::Task).unwrap();
    let tokens = s.infer(&probe, Mode::Lm).unwrap();
    let frames = s.take_capture();

    assert_eq!(acks.len(), local_losses.len());
    for (a, l) in acks.iter().zip(&local_losses) {
        assert_eq!(a.loss.to_bits(), l.to_bits());
    }
    assert_eq!(acks.last().unwrap().model_sha256, local.hash());
    assert_eq!(server.model_hash(), local.hash());
    assert_eq!(server.step(), acks.len() as u64);
    assert_eq!(labels, local_labels);
    assert_eq!(tokens, local_tokens);

    assert_eq!(frames.len(), 2 * (acks.len() + 2));
    for seq in train.inputs().iter().chain(&probe) {
        for f in &frames {
            assert!(
                !contains_id_run(f, seq),
                "raw sequence {seq:?} found on the wire"
            );
        }
    }
}

#[test]
fn capture_check_detects_plaintext() {
    // Same session shape with identity keys: the raw runs must show up.
    let server = serve(base_model(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let mut s = ClientSession::connect(server.local_addr(), ClientKeys::identity(64, 3)).unwrap();
    s.start_capture();
    let probe = data(4).inputs();
    s.infer(&probe, Mode::Task).unwrap();
    let frames = s.take_capture();
    assert!(probe.iter().all(|seq| contains_id_run(&frames[0], seq)));
}

#[test]
fn mismatched_keys_fail_at_handshake() {
    let server = serve(base_model(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let err = ClientSession::connect(server.local_addr(), ClientKeys::identity(32, 3))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    let err = ClientSession::connect(server.local_addr(), ClientKeys::identity(64, 2))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    assert_eq!(server.step(), 0);
}

fn send_raw(stream: &mut TcpStream, bytes: &[u8]) -> RawFrame {
    stream.write_all(bytes).unwrap();
    read_frame(stream).unwrap().unwrap()
}

fn error_code(f: &RawFrame) -> u16 {
    assert_eq!(f.kind, Kind::Error as u8);
    f.decode::<ErrorBody>().unwrap().code
}

#[test]
fn malformed_frames_get_errors_and_keep_the_connection() {
    let server = serve(base_model(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();

    let reply = send_raw(
        &mut stream,
        &RawFrame::new(Kind::InferReq, b"{not json".to_vec()).to_bytes(),
    );
    assert_eq!(error_code(&reply), codes::MALFORMED);
    let reply = send_raw(
        &mut stream,
        &RawFrame {
            kind: 42,
            body: vec![],
        }
        .to_bytes(),
    );
    assert_eq!(error_code(&reply), codes::MALFORMED);
    let reply = send_raw(
        &mut stream,
        &RawFrame::new(Kind::TuneAck, b"{}".to_vec()).to_bytes(),
    );
    assert_eq!(error_code(&reply), codes::MALFORMED);
    let reply = send_raw(&mut stream, &[0, 0, 0, 0]);
    assert_eq!(error_code(&reply), codes::MALFORMED);
    let out_of_vocab = br#"{"mode":"task","inputs":[[1,2,64]]}"#.to_vec();
    let reply = send_raw(
        &mut stream,
        &RawFrame::new(Kind::InferReq, out_of_vocab).to_bytes(),
    );
    assert_eq!(error_code(&reply), codes::INVALID_INPUT);

    let reply = send_raw(
        &mut stream,
        &RawFrame::encode(Kind::StatusReq, &StatusRequest {}).to_bytes(),
    );
    assert_eq!(reply.kind, Kind::StatusResp as u8);
}

#[test]
fn oversized_frame_closes_the_connection() {
    let server = serve(base_model(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();
    stream
        .write_all(&((MAX_FRAME + 1) as u32).to_le_bytes())
        .unwrap();
    let mut buf = [0u8; 1];
    let n = stream.read(&mut buf).unwrap_or(0);
    assert_eq!(n, 0);
    // The server itself keeps running.
    assert!(ClientSession::connect(server.local_addr(), ClientKeys::identity(64, 3)).is_ok());
}

#[test]
fn concurrent_inference_matches_serial() {
    let (served, keys) = shaken();
    let server = serve(served.clone(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let inputs = data(40).inputs();
    let serial = private_infer(&served, &inputs, &keys, Mode::Task).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let keys = keys.clone();
            let inputs = inputs.clone();
            thread::spawn(move || {
                let mut s = ClientSession::connect(addr, keys).unwrap();
                (0..5)
                    .map(|_| s.infer(&inputs, Mode::Task).unwrap())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for h in handles {
        for answer in h.join().unwrap() {
            assert_eq!(answer, serial);
        }
    }
}

#[test]
fn restart_mid_tune_is_retryable_and_loses_nothing_acked() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("server.ckpt");
    let (served, keys) = shaken();
    let train = data(48);
    let batches = client_batches(&train, &keys, &tune_cfg()).unwrap();
    let mut local = served.clone();
    private_tune(&mut local, &train, &keys, &tune_cfg()).unwrap();

    let persist = ServerConfig {
        persist: Some(ckpt.clone()),
    };
    let server = serve(served, "127.0.0.1:0", persist.clone()).unwrap();
    let addr = server.local_addr();
    let mut s = ClientSession::connect(addr, keys.clone()).unwrap();
    let cut = batches.len() / 2;
    let mut last = None;
    for b in &batches[..cut] {
        last = Some(s.tune_step(b).unwrap());
    }
    server.stop();

    let err = s.tune_step(&batches[cut]).unwrap_err();
    assert!(err.is_retryable(), "{err}");
    let saved = LanguageModel::load(&ckpt).unwrap();
    assert_eq!(saved.hash(), last.unwrap().model_sha256);

    let server = serve(saved, addr, persist).unwrap();
    let mut s = ClientSession::connect(addr, keys).unwrap();
    for b in &batches[cut..] {
        s.tune_step(b).unwrap();
    }
    assert_eq!(server.model_hash(), local.hash());
    assert_eq!(LanguageModel::load(&ckpt).unwrap().hash(), local.hash());
}
