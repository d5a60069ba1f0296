//! Private fine-tuning of small language models by keyed shaking of the
//! representation layers.
//!
//! A [`keys::KeyPair`] holds a vertical key (a sequence of value-space
//! operators) and a horizontal key (a vocabulary permutation). Implanting
//! the pair into a model ([`shaking::implant`]) yields a model that only
//! speaks the permuted token space. Clients encode their data with the key
//! ([`privacy`]) and fine-tune remotely without revealing raw token ids.

pub mod attacks;
pub mod checks;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod keys;
pub mod model;
pub mod netservice;
pub mod numeric;
pub mod par;
pub mod privacy;
pub mod recovery;
pub mod shaking;

pub use error::{Error, FormatError, Result};
