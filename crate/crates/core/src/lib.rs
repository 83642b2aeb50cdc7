//! Multi-user LoRa chirp-spread-spectrum physical layer.
//!
//! The crate covers the full link: a bit-exact transmitter, a channel model
//! for superimposed coordinated transmissions, preamble-based offset and
//! channel estimation, maximum-likelihood multi-user demodulation with
//! top-K soft output, and hard/soft channel decoding.

pub mod aggregate;
pub mod channel;
pub mod chirp;
pub mod decoder;
pub mod demod;
pub mod dsp;
pub mod error;
pub mod hamming;
pub mod params;
pub mod receiver;
pub mod sync;
pub mod tx;

pub use error::{Error, Result};
pub use params::{ChannelLimits, CodingRate, IqBuffer, LoraParams, NodeTxState};
