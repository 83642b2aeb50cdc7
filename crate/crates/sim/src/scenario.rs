//! Random draws of concurrent transmissions and their received waveform.

use std::f64::consts::TAU;

use lora_mpr::aggregate::encode_reading;
use lora_mpr::dsp::Dsp;
use lora_mpr::{channel, tx, ChannelLimits, IqBuffer, LoraParams, NodeTxState};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::is_noiseless;
use crate::error::Result;

/// Receive power spread between users, dB.
pub const POWER_SPREAD_DB: f64 = 3.0;
/// Readings carried in the first two payload bytes lie in ±this.
pub const READING_RANGE: f64 = 100.0;

/// Independent stream for one (SNR point, trial) pair of a seeded run.
pub fn trial_rng(seed: u64, point: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((point as u64) << 32) | trial as u64);
    rng
}

/// Payload of `params.payload_bytes` bytes: a fixed-point reading, random
/// filler and the CRC.
pub fn random_payload<R: Rng + ?Sized>(rng: &mut R, params: &LoraParams) -> Vec<u8> {
    let data_len = params.payload_bytes.saturating_sub(2);
    let mut data: Vec<u8> = (0..data_len).map(|_| rng.gen()).collect();
    if data_len >= 2 {
        let reading = rng.gen_range(-READING_RANGE..READING_RANGE);
        data[..2].copy_from_slice(&encode_reading(reading));
    }
    tx::with_crc(&data)
}

pub fn random_node<R: Rng + ?Sized>(rng: &mut R, params: &LoraParams, limits: &ChannelLimits) -> NodeTxState {
    let to_max = limits.to_max(params);
    NodeTxState {
        h: Complex64::from_polar(1.0, rng.gen_range(0.0..TAU)),
        cfo: if limits.cfo_max > 0.0 {
            rng.gen_range(-limits.cfo_max..=limits.cfo_max)
        } else {
            0.0
        },
        to: if to_max > 0.0 { rng.gen_range(0.0..to_max) } else { 0.0 },
        power_db: rng.gen_range(0.0..=POWER_SPREAD_DB),
        payload: random_payload(rng, params),
    }
}

/// One concurrent transmission as seen by the receiver.
#[derive(Debug, Clone)]
pub struct Trial {
    pub nodes: Vec<NodeTxState>,
    pub symbols: Vec<Vec<usize>>,
    /// Silence in front of the earliest frame, receiver samples.
    pub lead: usize,
    pub signal: IqBuffer,
}

/// Superimpose the nodes' impaired frames behind `lead` samples of silence
/// and follow them with `tail` more.
pub fn synthesize(nodes: &[NodeTxState], lead: usize, tail: usize, dsp: &Dsp) -> Result<(IqBuffer, Vec<Vec<usize>>)> {
    let p = dsp.params();
    let symbols = nodes
        .iter()
        .map(|n| tx::encode_symbols(&n.payload, p))
        .collect::<lora_mpr::Result<Vec<_>>>()?;
    let frames = nodes
        .iter()
        .zip(&symbols)
        .map(|(n, s)| channel::impair_symbols(s, n, p, dsp.table()))
        .collect::<lora_mpr::Result<Vec<_>>>()?;
    let sum = channel::superimpose(&frames)?;
    let mut samples = vec![Complex64::new(0.0, 0.0); lead];
    samples.extend_from_slice(&sum.samples);
    samples.resize(samples.len() + tail, Complex64::new(0.0, 0.0));
    Ok((IqBuffer::new(samples, sum.rate), symbols))
}

/// Draw `m` nodes, a random lead-in and AWGN at `snr_db` relative to a
/// unit-power user.
pub fn draw_trial<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    limits: &ChannelLimits,
    snr_db: f64,
    dsp: &Dsp,
) -> Result<Trial> {
    let p = dsp.params();
    let nodes: Vec<NodeTxState> = (0..m).map(|_| random_node(rng, p, limits)).collect();
    let l = p.window_len();
    let lead = 2 * l + rng.gen_range(0..l);
    let (mut signal, symbols) = synthesize(&nodes, lead, 2 * l, dsp)?;
    if !is_noiseless(snr_db) {
        channel::add_noise(&mut signal, channel::noise_variance(snr_db, 1.0, p), rng);
    }
    Ok(Trial {
        nodes,
        symbols,
        lead,
        signal,
    })
}
