//! Round-based network simulation of periodic data collection.
//!
//! Coordinated (CO) rounds: every node transmits at the round start with a
//! sub-symbol time offset and the full waveform receiver decodes the
//! superposition. Uncoordinated (UNCO) rounds: ALOHA with delays uniform
//! in `[0, 0.25 T_p]` and a standard single-user receiver; a packet
//! survives only if every packet overlapping it is weaker by the capture
//! margin. No retransmissions in either case.

use lora_mpr::aggregate::{aggregate, decode_reading, AggregateFn};
use lora_mpr::receiver::Receiver;
use lora_mpr::LoraParams;
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{percentile, MetricsRow};
use crate::scenario::{draw_trial, trial_rng, POWER_SPREAD_DB};

/// Idle fraction appended to each round.
pub const GUARD: f64 = 0.05;
/// Largest ALOHA delay as a fraction of the packet duration.
pub const UNCO_MAX_DELAY: f64 = 0.25;
/// Power advantage a packet needs over every overlapping one to survive.
pub const CAPTURE_DB: f64 = 6.0;

pub fn round_duration(params: &LoraParams, coordinated: bool) -> f64 {
    let tp = params.packet_duration();
    let span = if coordinated { tp } else { tp * (1.0 + UNCO_MAX_DELAY) };
    span * (1.0 + GUARD)
}

/// Throughput when every coordinated packet is delivered, bit/s.
pub fn ideal_throughput(params: &LoraParams, users: usize) -> f64 {
    (users * params.payload_bytes * 8) as f64 / round_duration(params, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutcome {
    pub decoder: String,
    pub coordinated: bool,
    pub rounds: usize,
    pub failures: usize,
    pub packets: usize,
    pub delivered: usize,
    pub elapsed_s: f64,
    pub bits_per_packet: usize,
    /// Per delivered packet: reception complete minus round start.
    pub delays: Vec<f64>,
    /// Rounds whose aggregate (average reading) covered every node.
    pub complete_rounds: usize,
}

impl NetOutcome {
    fn new(decoder: &str, coordinated: bool, rounds: usize, params: &LoraParams) -> Self {
        NetOutcome {
            decoder: decoder.into(),
            coordinated,
            rounds,
            failures: 0,
            packets: 0,
            delivered: 0,
            elapsed_s: rounds as f64 * round_duration(params, coordinated),
            bits_per_packet: params.payload_bytes * 8,
            delays: Vec::new(),
            complete_rounds: 0,
        }
    }

    pub fn throughput(&self) -> f64 {
        if self.elapsed_s > 0.0 {
            (self.delivered * self.bits_per_packet) as f64 / self.elapsed_s
        } else {
            0.0
        }
    }

    pub fn per(&self) -> f64 {
        if self.packets == 0 {
            0.0
        } else {
            1.0 - self.delivered as f64 / self.packets as f64
        }
    }
}

#[derive(Debug, Default)]
struct RoundResult {
    failed: bool,
    /// (delivered, delays, aggregate complete) for ideal, hard and soft.
    per_decoder: [(usize, Vec<f64>, bool); 3],
}

/// Coordinated rounds at grid point `point`; outcomes for the ideal stub,
/// the hard and the soft decoder, all over the same receptions.
pub fn run_net_co(config: &ExperimentConfig, point: usize) -> Result<Vec<NetOutcome>> {
    config.validate()?;
    let p = &config.params;
    let snr_db = config.snr_grid[point];
    let rounds = (config.duration_s / round_duration(p, true)).floor() as usize;
    let rx = Receiver::new(p, config.receiver())?;
    let limits = config.limits();
    let m = config.users;
    let tp = p.packet_duration();
    let results = (0..rounds)
        .into_par_iter()
        .map(|r| {
            let mut rng = trial_rng(config.seed, point, r);
            let trial = draw_trial(&mut rng, m, &limits, snr_db, rx.dsp())?;
            let mut out = RoundResult::default();
            out.per_decoder[0] = (m, trial.nodes.iter().map(|n| n.to + tp).collect(), true);
            let Ok(rec) = rx.receive(&trial.signal) else {
                out.failed = true;
                return Ok(out);
            };
            for (k, soft) in [(1, false), (2, true)] {
                let decoded: Vec<&lora_mpr::decoder::DecodedPacket> = rec
                    .nodes
                    .iter()
                    .map(|d| if soft { &d.soft } else { &d.hard })
                    .filter(|d| d.crc_ok)
                    .collect();
                let mut delays = Vec::new();
                for n in &trial.nodes {
                    if decoded.iter().any(|d| d.payload == n.payload) {
                        delays.push(n.to + tp);
                    }
                }
                let mut distinct: Vec<&Vec<u8>> = decoded.iter().map(|d| &d.payload).collect();
                distinct.sort();
                distinct.dedup();
                let readings: Vec<f64> = distinct.iter().filter_map(|d| decode_reading(d)).collect();
                let complete = aggregate(&readings, AggregateFn::Average).is_ok_and(|a| a.count == m);
                out.per_decoder[k] = (delays.len(), delays, complete);
            }
            Ok(out)
        })
        .collect::<Result<Vec<RoundResult>>>()?;
    let mut outcomes: Vec<NetOutcome> = ["ideal", "hard", "soft"]
        .iter()
        .map(|d| NetOutcome::new(d, true, rounds, p))
        .collect();
    for res in results {
        for (k, o) in outcomes.iter_mut().enumerate() {
            o.packets += m;
            if k > 0 && res.failed {
                o.failures += 1;
                continue;
            }
            let (n, delays, complete) = &res.per_decoder[k];
            o.delivered += n;
            o.delays.extend_from_slice(delays);
            o.complete_rounds += usize::from(*complete);
        }
    }
    Ok(outcomes)
}

/// ALOHA rounds under the collision/capture model.
pub fn run_net_unco(config: &ExperimentConfig) -> Result<NetOutcome> {
    config.validate()?;
    let p = &config.params;
    let m = config.users;
    let rounds = (config.duration_s / round_duration(p, false)).floor() as usize;
    let tp = p.packet_duration();
    let mut o = NetOutcome::new("standard", false, rounds, p);
    for r in 0..rounds {
        let mut rng = trial_rng(config.seed, usize::MAX >> 32, r);
        let tx: Vec<(f64, f64)> = (0..m)
            .map(|_| {
                (
                    rng.gen_range(0.0..=UNCO_MAX_DELAY * tp),
                    rng.gen_range(0.0..=POWER_SPREAD_DB),
                )
            })
            .collect();
        o.packets += m;
        let mut ok = 0;
        for (i, &(di, pi)) in tx.iter().enumerate() {
            let survives = tx
                .iter()
                .enumerate()
                .filter(|&(j, &(dj, _))| j != i && (di - dj).abs() < tp)
                .all(|(_, &(_, pj))| pi - pj >= CAPTURE_DB);
            if survives {
                ok += 1;
                o.delays.push(di + tp);
            }
        }
        o.delivered += ok;
        o.complete_rounds += usize::from(ok == m);
    }
    Ok(o)
}

pub fn net_rows(config: &ExperimentConfig, snr_db: Option<f64>, outcomes: &[NetOutcome]) -> Vec<MetricsRow> {
    outcomes
        .iter()
        .map(|o| {
            let mode = if o.coordinated { "net-co" } else { "net-unco" };
            let mut r = MetricsRow::new(&o.decoder, mode, &config.params, config.users);
            r.snr_db = if o.coordinated { snr_db } else { None };
            r.trials = o.rounds;
            r.failures = o.failures;
            r.per = Some(o.per());
            r.net_bit_s = Some(o.throughput());
            r.delay_p50_s = percentile(&o.delays, 0.5);
            r.delay_p95_s = percentile(&o.delays, 0.95);
            r
        })
        .collect()
}
