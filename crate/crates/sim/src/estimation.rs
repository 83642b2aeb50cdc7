//! Offset and channel estimation accuracy studies.

use itertools::Itertools;
use lora_mpr::dsp::Dsp;
use lora_mpr::sync;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::scenario::{draw_trial, trial_rng};

/// Mean absolute CFO and TO errors in native bins over matched users.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPoint {
    pub snr_db: f64,
    pub trials: usize,
    pub failures: usize,
    pub cfo_mae_bins: f64,
    pub to_mae_bins: f64,
}

/// Full acquisition on random trials; users are matched to estimates by the
/// permutation with the smallest total offset error.
pub fn run_offset_point(config: &ExperimentConfig, point: usize) -> Result<OffsetPoint> {
    config.validate()?;
    let snr_db = config.snr_grid[point];
    let p = &config.params;
    let dsp = Dsp::new(p)?;
    let limits = config.limits();
    let m = config.users;
    let grid = 1.0 / (p.osr_rec as f64 * p.bw);
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, point, i);
            let trial = draw_trial(&mut rng, m, &limits, snr_db, &dsp)?;
            let Ok(acq) = sync::acquire(&trial.signal, m, &dsp, &limits) else {
                return Ok(None);
            };
            let origin = (acq.start as f64 - trial.lead as f64) / (p.osr_rx as f64 * p.bw);
            let err = |slot: usize, node: usize| {
                let nd = &trial.nodes[node];
                let to_true = lora_mpr::channel::delay_samples(nd.to, p) as f64 * grid - origin;
                let est = &acq.nodes[slot];
                let (dc, dt) = p.bin_shifts(est.cfo - nd.cfo, est.to - to_true);
                (dc.abs(), dt.abs())
            };
            let perm = (0..m)
                .permutations(m)
                .min_by(|a, b| {
                    let cost = |perm: &Vec<usize>| {
                        perm.iter()
                            .enumerate()
                            .map(|(s, &n)| {
                                let (c, t) = err(s, n);
                                c + t
                            })
                            .sum::<f64>()
                    };
                    cost(a).total_cmp(&cost(b))
                })
                .expect("at least one user");
            let (c, t) = perm
                .iter()
                .enumerate()
                .map(|(s, &n)| err(s, n))
                .fold((0.0, 0.0), |acc, e| (acc.0 + e.0, acc.1 + e.1));
            Ok(Some((c, t)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<(f64, f64)> = per_trial.iter().flatten().copied().collect();
    let users = (ok.len() * m).max(1) as f64;
    Ok(OffsetPoint {
        snr_db,
        trials: config.trials,
        failures: config.trials - ok.len(),
        cfo_mae_bins: ok.iter().map(|e| e.0).sum::<f64>() / users,
        to_mae_bins: ok.iter().map(|e| e.1).sum::<f64>() / users,
    })
}

/// Mean squared error of the least-squares channel fit given the true
/// offsets and frame position.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPoint {
    pub snr_db: f64,
    pub trials: usize,
    pub mse: f64,
}

pub fn run_channel_point(config: &ExperimentConfig, point: usize) -> Result<ChannelPoint> {
    config.validate()?;
    let snr_db = config.snr_grid[point];
    let p = &config.params;
    let dsp = Dsp::new(p)?;
    let limits = config.limits();
    let trunc = limits.truncation(p);
    let grid = 1.0 / (p.osr_rec as f64 * p.bw);
    let errs = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, point, i);
            let trial = draw_trial(&mut rng, config.users, &limits, snr_db, &dsp)?;
            let pairs: Vec<(f64, f64)> = trial
                .nodes
                .iter()
                .map(|n| (n.cfo, lora_mpr::channel::delay_samples(n.to, p) as f64 * grid))
                .collect();
            let est = sync::estimate_channels(&trial.signal, trial.lead, &pairs, &dsp, trunc)?;
            Ok(est
                .iter()
                .zip(&trial.nodes)
                .map(|(e, n)| (e.h_hat - n.gain()).norm_sqr())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ChannelPoint {
        snr_db,
        trials: config.trials,
        mse: errs.iter().sum::<f64>() / (config.trials * config.users) as f64,
    })
}
