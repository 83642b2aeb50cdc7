//! Symbol-level studies of peak co-location; no waveforms involved.

use lora_mpr::decoder;
use lora_mpr::{tx, CodingRate, LoraParams};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::MetricsRow;
use crate::scenario::{random_node, trial_rng};

/// Payload length used by the co-location studies, CRC included.
pub const STUDY_PAYLOAD_BYTES: usize = 20;

/// One packet set: every user's symbols and the native bin each symbol's
/// peak lands on.
struct Draw {
    symbols: Vec<Vec<usize>>,
    bins: Vec<Vec<usize>>,
}

fn draw<R: Rng>(rng: &mut R, m: usize, params: &LoraParams, config: &ExperimentConfig) -> Result<Draw> {
    let limits = config.limits();
    let n = params.n();
    let mut symbols = Vec::with_capacity(m);
    let mut shifts = Vec::with_capacity(m);
    for _ in 0..m {
        let node = random_node(rng, params, &limits);
        let (d, t) = params.bin_shifts(node.cfo, node.to);
        symbols.push(tx::encode_symbols(&node.payload, params)?);
        shifts.push(d - t);
    }
    let bins = symbols
        .iter()
        .zip(&shifts)
        .map(|(s, &sh)| {
            s.iter()
                .map(|&v| ((v as f64 + sh).round().rem_euclid(n as f64) as usize) % n)
                .collect()
        })
        .collect();
    Ok(Draw { symbols, bins })
}

/// Users sharing a rounded peak bin with at least one other user in window
/// `w`, grouped by bin.
fn colocated_groups(d: &Draw, w: usize) -> Vec<Vec<usize>> {
    let m = d.bins.len();
    let mut seen = vec![false; m];
    let mut groups = Vec::new();
    for a in 0..m {
        if seen[a] {
            continue;
        }
        let g: Vec<usize> = (a..m).filter(|&b| d.bins[b][w] == d.bins[a][w]).collect();
        if g.len() > 1 {
            for &u in &g {
                seen[u] = true;
            }
            groups.push(g);
        }
    }
    groups
}

fn study_params(sf: u8, cr: CodingRate) -> Result<LoraParams> {
    let p = LoraParams {
        payload_bytes: STUDY_PAYLOAD_BYTES,
        ..LoraParams::with_sf_cr(sf, cr)?
    };
    p.validate()?;
    Ok(p)
}

/// Fraction of packet sets with at least one window where two users' peaks
/// round to the same native bin.
pub fn colocated_probability(config: &ExperimentConfig, m: usize, sf: u8) -> Result<f64> {
    let p = study_params(sf, config.params.cr)?;
    let point = (sf as usize) << 8 | m;
    let hits = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, point, i);
            let d = draw(&mut rng, m, &p, config)?;
            Ok((0..p.symbol_count()).any(|w| !colocated_groups(&d, w).is_empty()))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / config.trials as f64)
}

/// Packet error rate under an oracle demodulator that is perfect except in
/// co-located windows, where each involved user receives the value of a
/// uniformly chosen member of its group. Packets go through the standard
/// hard decoder.
pub fn ideal_mapping_per(config: &ExperimentConfig, m: usize, sf: u8) -> Result<f64> {
    let p = study_params(sf, config.params.cr)?;
    let point = 1 << 16 | (sf as usize) << 8 | m;
    let lost = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, point, i);
            let d = draw(&mut rng, m, &p, config)?;
            let mut got = d.symbols.clone();
            for w in 0..p.symbol_count() {
                for g in colocated_groups(&d, w) {
                    for &u in &g {
                        let &v = g.choose(&mut rng).expect("group is non-empty");
                        got[u][w] = d.symbols[v][w];
                    }
                }
            }
            let mut lost = 0usize;
            for u in 0..m {
                let dec = decoder::hard_path(&got[u], &p)?;
                lost += usize::from(!dec.crc_ok);
            }
            Ok(lost)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(lost.iter().sum::<usize>() as f64 / (config.trials * m) as f64)
}

/// Spreading factors and user counts swept by the co-location studies.
pub const STUDY_SFS: [u8; 3] = [8, 10, 12];
pub const STUDY_USERS: [usize; 5] = [2, 3, 4, 5, 6];

fn study_row(config: &ExperimentConfig, mode: &str, m: usize, sf: u8, value: f64) -> Result<MetricsRow> {
    let p = study_params(sf, config.params.cr)?;
    let mut r = MetricsRow::new("oracle", mode, &p, m);
    r.trials = config.trials;
    r.per = Some(value);
    Ok(r)
}

/// Co-location probability per (SF, M); reported in the `per` column.
pub fn colocated_rows(config: &ExperimentConfig, users: &[usize], sfs: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &sf in sfs {
        for &m in users {
            let v = colocated_probability(config, m, sf)?;
            rows.push(study_row(config, "colocated", m, sf, v)?);
        }
    }
    Ok(rows)
}

pub fn ideal_mapping_rows(config: &ExperimentConfig, users: &[usize], sfs: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &sf in sfs {
        for &m in users {
            let v = ideal_mapping_per(config, m, sf)?;
            rows.push(study_row(config, "ideal-map", m, sf, v)?);
        }
    }
    Ok(rows)
}

/// Chance that some pair of `m` users shares a bin in at least one of
/// `windows` windows when peaks are independent and uniform over `n` bins.
pub fn colocated_probability_uniform(m: usize, windows: usize, n: usize) -> f64 {
    let free: f64 = (0..m).map(|k| 1.0 - k as f64 / n as f64).product();
    1.0 - free.powi(windows as i32)
}
