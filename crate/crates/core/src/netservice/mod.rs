//! Client/server split: the server hosts the implanted model and runs
//! tuning and inference on encoded ids only; the client holds the keys.
//!
//! Transport is a plain TCP stream of length-prefixed frames (see [`wire`]).
//! There is no TLS or authentication. The threat model is a curious server,
//! not the network.

mod client;
mod server;
pub mod wire;

pub use client::ClientSession;
pub use server::{serve, ServerConfig, ServerHandle};
