//! PHY Monte Carlo: symbol, bit and packet error rates and throughput.

use itertools::Itertools;
use lora_mpr::receiver::Receiver;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::MetricsRow;
use crate::scenario::{draw_trial, trial_rng, Trial};

/// Per-trial tallies, summed over users.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub failures: usize,
    pub symbols: usize,
    pub symbol_errors: usize,
    pub bits: usize,
    pub bit_errors_hard: usize,
    pub bit_errors_soft: usize,
    pub packets: usize,
    pub lost_hard: usize,
    pub lost_soft: usize,
}

impl std::ops::AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        self.failures += o.failures;
        self.symbols += o.symbols;
        self.symbol_errors += o.symbol_errors;
        self.bits += o.bits;
        self.bit_errors_hard += o.bit_errors_hard;
        self.bit_errors_soft += o.bit_errors_soft;
        self.packets += o.packets;
        self.lost_hard += o.lost_hard;
        self.lost_soft += o.lost_soft;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Results of one SNR point.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyPoint {
    pub snr_db: f64,
    pub trials: usize,
    pub tally: Tally,
}

impl PhyPoint {
    pub fn ser(&self) -> f64 {
        ratio(self.tally.symbol_errors, self.tally.symbols)
    }

    pub fn ber_hard(&self) -> f64 {
        ratio(self.tally.bit_errors_hard, self.tally.bits)
    }

    pub fn ber_soft(&self) -> f64 {
        ratio(self.tally.bit_errors_soft, self.tally.bits)
    }

    pub fn per_hard(&self) -> f64 {
        ratio(self.tally.lost_hard, self.tally.packets)
    }

    pub fn per_soft(&self) -> f64 {
        ratio(self.tally.lost_soft, self.tally.packets)
    }
}

fn bit_errors(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as usize).sum()
}

/// Decode one trial and score it against the ground truth.
///
/// Receiver slots carry no identity, so they are matched to transmitters by
/// the permutation with the fewest symbol errors (a deployed network reads
/// node ids from the payload). An acquisition failure loses every packet,
/// counts every symbol wrong and half of the bits wrong.
pub fn score_trial(rx: &Receiver, trial: &Trial) -> Tally {
    let p = rx.params();
    let m = trial.nodes.len();
    let ns = p.symbol_count();
    let nbits = p.payload_bytes * 8;
    let mut t = Tally {
        symbols: m * ns,
        bits: m * nbits,
        packets: m,
        ..Tally::default()
    };
    let Ok(rec) = rx.receive(&trial.signal) else {
        t.failures = 1;
        t.symbol_errors = m * ns;
        t.bit_errors_hard = m * nbits / 2;
        t.bit_errors_soft = m * nbits / 2;
        t.lost_hard = m;
        t.lost_soft = m;
        return t;
    };
    let sym_err = |slot: usize, node: usize| {
        rec.nodes[slot]
            .symbols
            .iter()
            .zip(&trial.symbols[node])
            .filter(|(a, b)| a != b)
            .count()
    };
    let perm = (0..m)
        .permutations(m)
        .min_by_key(|perm| perm.iter().enumerate().map(|(s, &n)| sym_err(s, n)).sum::<usize>())
        .expect("at least one user");
    for (slot, &node) in perm.iter().enumerate() {
        let truth = &trial.nodes[node].payload;
        let d = &rec.nodes[slot];
        t.symbol_errors += sym_err(slot, node);
        t.bit_errors_hard += bit_errors(&d.hard.payload, truth);
        t.bit_errors_soft += bit_errors(&d.soft.payload, truth);
        t.lost_hard += usize::from(!(d.hard.crc_ok && &d.hard.payload == truth));
        t.lost_soft += usize::from(!(d.soft.crc_ok && &d.soft.payload == truth));
    }
    t
}

/// Monte Carlo over `config.trials` trials at grid point `point`.
pub fn run_phy_point(config: &ExperimentConfig, point: usize) -> Result<PhyPoint> {
    config.validate()?;
    let snr_db = config.snr_grid[point];
    let rx = Receiver::new(&config.params, config.receiver())?;
    let limits = config.limits();
    let tallies = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, point, i);
            let trial = draw_trial(&mut rng, config.users, &limits, snr_db, rx.dsp())?;
            Ok(score_trial(&rx, &trial))
        })
        .collect::<Result<Vec<Tally>>>()?;
    let mut tally = Tally::default();
    for t in tallies {
        tally += t;
    }
    Ok(PhyPoint {
        snr_db,
        trials: config.trials,
        tally,
    })
}

pub fn run_phy(config: &ExperimentConfig) -> Result<Vec<PhyPoint>> {
    (0..config.snr_grid.len()).map(|i| run_phy_point(config, i)).collect()
}

/// Correct symbols per second of air time, summed over users.
pub fn phy_throughput(point: &PhyPoint, config: &ExperimentConfig) -> f64 {
    let p = &config.params;
    let air = point.trials as f64 * p.symbol_count() as f64 * p.ts();
    (point.tally.symbols - point.tally.symbol_errors) as f64 / air
}

/// A hard and a soft row per SNR point.
pub fn phy_rows(config: &ExperimentConfig, points: &[PhyPoint]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for pt in points {
        for (decoder, ber, per) in [
            ("hard", pt.ber_hard(), pt.per_hard()),
            ("soft", pt.ber_soft(), pt.per_soft()),
        ] {
            let mut r = MetricsRow::new(decoder, "phy", &config.params, config.users);
            r.snr_db = Some(pt.snr_db);
            r.trials = pt.trials;
            r.failures = pt.tally.failures;
            r.ser = Some(pt.ser());
            r.ber = Some(ber);
            r.per = Some(per);
            r.phy_sym_s = Some(phy_throughput(pt, config));
            rows.push(r);
        }
    }
    rows
}
