//! End-to-end multi-user receiver: acquisition, per-window demodulation and
//! hard and soft decoding of every user.

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecodedPacket};
use crate::demod::{DemodConfig, Demodulator, NoiseFloor, TopK};
use crate::dsp::Dsp;
use crate::error::Result;
use crate::params::{ChannelLimits, IqBuffer, LoraParams};
use crate::sync::{self, Acquisition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    /// Number of superimposed users to separate.
    pub users: usize,
    pub limits: ChannelLimits,
    pub demod: DemodConfig,
}

/// Decoding results of one user, in acquisition order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecode {
    pub symbols: Vec<usize>,
    pub hard: DecodedPacket,
    pub soft: DecodedPacket,
}

#[derive(Debug, Clone)]
pub struct Reception {
    pub acquisition: Acquisition,
    pub windows: Vec<TopK>,
    pub nodes: Vec<NodeDecode>,
}

/// Receiver bound to one air-interface configuration.
#[derive(Debug, Clone)]
pub struct Receiver {
    dsp: Dsp,
    config: ReceiverConfig,
}

impl Receiver {
    pub fn new(params: &LoraParams, config: ReceiverConfig) -> Result<Self> {
        Ok(Receiver {
            dsp: Dsp::new(params)?,
            config,
        })
    }

    pub fn dsp(&self) -> &Dsp {
        &self.dsp
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn params(&self) -> &LoraParams {
        self.dsp.params()
    }

    /// Acquire the earliest frame in `signal` and decode every user.
    pub fn receive(&self, signal: &IqBuffer) -> Result<Reception> {
        let p = self.dsp.params();
        let trunc = self.config.limits.truncation(p);
        let acquisition = sync::acquire(signal, self.config.users, &self.dsp, &self.config.limits)?;
        let floor = NoiseFloor::from_variance(acquisition.noise_var, p.window_len() - trunc);
        let demod = Demodulator::new(&self.dsp, &acquisition.nodes, trunc, Some(floor), self.config.demod)?;
        let windows = demod.demod_packet(&signal.samples, acquisition.start)?;
        let nodes = (0..self.config.users)
            .map(|u| {
                let symbols = decoder::hard_symbols(&windows, u);
                Ok(NodeDecode {
                    hard: decoder::hard_path(&symbols, p)?,
                    soft: decoder::soft_path(&windows, u, p)?,
                    symbols,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Reception {
            acquisition,
            windows,
            nodes,
        })
    }
}
