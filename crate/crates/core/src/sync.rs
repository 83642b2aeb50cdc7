//! Frame acquisition: preamble detection, per-user CFO/TO estimation from
//! the preamble and SFD, preamble reconstruction and least-squares channel
//! fitting.

use std::f64::consts::{PI, TAU};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Dsp, FINE_PAD};
use crate::error::{Error, Result};
use crate::params::{ChannelLimits, IqBuffer, LoraParams, SFD_QUARTERS};

/// Consecutive windows that must agree on the dechirped peak bin.
const STABLE_RUN: usize = 6;
/// A window only counts towards the run if its peak stands out from the
/// mean paired magnitude by this factor.
const PEAK_TO_MEAN: f64 = 5.0;
/// Minimum spacing between two resolvable users, in native bins.
const MIN_SEPARATION: f64 = 1.5;
/// A weaker peak must clear the sinc sidelobe envelope of every stronger
/// one by this factor.
const SIDELOBE_MARGIN: f64 = 1.5;
/// Users never sit more than ~15 dB apart; anything 20 dB below the
/// strongest peak is leakage.
const RELATIVE_FLOOR: f64 = 0.1;
/// Interference-cancellation sweeps when refining several users.
const CANCEL_SWEEPS: usize = 3;
/// A pairing hypothesis is accepted outright when its coherent residual
/// is within this factor of the expected noise energy...
const ACCEPT_NOISE: f64 = 1.2;
/// ...plus this fraction of the window energy for model mismatch.
const ACCEPT_MISMATCH: f64 = 2e-3;
/// Pairings refined per sharing pattern before moving on to the next.
const RANKED_TRIES: usize = 6;

/// One user's offsets, as measured from the preamble and SFD peaks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Carrier frequency offset in Hz.
    pub cfo_hat: f64,
    /// Time offset in seconds, relative to the demodulation window.
    pub to_hat: f64,
    /// Preamble peak in signed native bins.
    pub f_up: f64,
    /// SFD peak in signed native bins.
    pub f_down: f64,
    /// Averaged paired magnitude of the preamble peak.
    pub amp: f64,
}

impl OffsetEstimate {
    pub fn from_bins(f_up: f64, f_down: f64, amp: f64, params: &LoraParams) -> Self {
        let cfo_bins = (f_up + f_down) / 2.0;
        let to_bins = (f_down - f_up) / 2.0;
        OffsetEstimate {
            cfo_hat: cfo_bins * params.bw / params.n() as f64,
            to_hat: to_bins / params.bw,
            f_up,
            f_down,
            amp,
        }
    }

    pub fn cfo_bins(&self, params: &LoraParams) -> f64 {
        params.bin_shifts(self.cfo_hat, 0.0).0
    }

    pub fn to_bins(&self, params: &LoraParams) -> f64 {
        params.bin_shifts(0.0, self.to_hat).1
    }
}

/// Least-squares channel coefficient of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelEstimate {
    pub h_hat: Complex64,
    /// Norm of the joint fit residual (shared by all users of one fit).
    pub residual: f64,
}

/// Everything the demodulator needs to rebuild one user's signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeEstimate {
    pub cfo: f64,
    pub to: f64,
    pub h: Complex64,
}

fn window(x: &[Complex64], start: usize, l: usize) -> Result<&[Complex64]> {
    x.get(start..start + l)
        .ok_or_else(|| Error::Domain("signal too short for the frame".into()))
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap_or(0)
}

/// Greedy peak selection from a cyclic magnitude vector sampled `pad`
/// times per native bin: local maxima above `floor`, strongest first,
/// skipping anything too close to or hidden under the sidelobes of an
/// already accepted peak. Returns fractional indices and magnitudes.
fn select_peaks(pm: &[f64], pad: usize, floor: f64, max_count: usize) -> Vec<(f64, f64)> {
    let len = pm.len();
    let mut cands: Vec<usize> = dsp::local_maxima(pm)
        .into_iter()
        .filter(|&i| pm[i] > floor)
        .collect();
    cands.sort_by(|&a, &b| pm[b].total_cmp(&pm[a]).then(a.cmp(&b)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for i in cands {
        if out.len() == max_count {
            break;
        }
        let off = dsp::parabolic(pm[(i + len - 1) % len], pm[i], pm[(i + 1) % len]);
        let pos = i as f64 + off;
        let ok = out.iter().all(|&(q, mag)| {
            let d = dsp::ring_diff(pos, q, len as f64).abs() / pad as f64;
            if d < MIN_SEPARATION {
                return false;
            }
            pm[i] >= SIDELOBE_MARGIN * mag / (PI * d)
        });
        if ok {
            out.push((pos, pm[i]));
        }
    }
    out
}

/// Locate the first sample of the earliest-arriving frame.
///
/// Symbol-length windows are dechirped with the base downchirp; once the
/// paired-magnitude argmax stays put for [`STABLE_RUN`] windows the peak
/// bins are converted to sample delays, the earliest arrival is kept, and
/// the symbol ambiguity is resolved by checking for the upchirp/downchirp
/// transition at the SFD.
pub fn detect_preamble(signal: &IqBuffer, dsp: &Dsp) -> Result<usize> {
    let p = dsp.params();
    let (n, l, osr) = (p.n(), p.window_len(), p.osr_rx);
    let x = &signal.samples;
    let nwin = x.len() / l;
    let pm_at = |start: usize, reference: &[Complex64]| -> Result<Vec<f64>> {
        dsp::paired_magnitude(&dsp.dechirp(window(x, start, l)?, reference, 0), n)
    };

    // The run follows one anchor bin; a window continues it while that bin
    // (give or take one) still carries a significant peak, so users of
    // similar power trading the argmax do not break it.
    let mut run_start = 0;
    let mut anchor: Option<usize> = None;
    let mut found = None;
    for w in 0..nwin {
        let pm = pm_at(w * l, dsp.down())?;
        let b = argmax(&pm);
        let mean = pm.iter().sum::<f64>() / n as f64;
        let floor = PEAK_TO_MEAN * mean;
        if !(pm[b] > floor) {
            anchor = None;
            continue;
        }
        let held = anchor.is_some_and(|a| {
            let near = (0..3).map(|d| pm[(a + n + d - 1) % n]).fold(0.0, f64::max);
            near > floor && near >= 0.5 * pm[b]
        });
        if held {
            if w + 1 - run_start >= STABLE_RUN {
                found = Some(run_start);
                break;
            }
        } else {
            run_start = w;
            anchor = Some(b);
        }
    }
    let run_start = found.ok_or(Error::NotFound)?;

    // Earliest arrival among the significant peaks of one window well
    // inside every preamble.
    let wr = run_start + 2;
    let pm = pm_at(wr * l, dsp.down())?;
    let max = pm.iter().cloned().fold(0.0, f64::max);
    let peaks = select_peaks(&pm, 1, 0.3 * max, usize::MAX);
    let mut delays: Vec<usize> = peaks
        .iter()
        .map(|&(b, _)| ((n - b.round() as usize % n) % n) * osr)
        .collect();
    delays.sort_unstable();
    let earliest = if delays.is_empty() {
        return Err(Error::NotFound);
    } else if delays.len() == 1 {
        delays[0]
    } else {
        // The arrival right after the largest gap on the delay ring.
        let k = (0..delays.len())
            .max_by_key(|&i| {
                let prev = delays[(i + delays.len() - 1) % delays.len()];
                (delays[i] + l - prev) % l
            })
            .unwrap_or(0);
        delays[k]
    };

    let base = wr * l + earliest;
    let pl = p.preamble_len;
    let peak = |start: usize, reference: &[Complex64]| -> f64 {
        pm_at(start, reference)
            .map(|v| v.into_iter().fold(0.0, f64::max))
            .unwrap_or(0.0)
    };
    // Each window votes with the log ratio of its expected to its opposite
    // chirp direction. Raw peak heights would not do: users sharing a bin
    // beat, so preamble peaks swing by several dB from window to window.
    let contrast = |start: usize, want: &[Complex64], other: &[Complex64]| -> f64 {
        (peak(start, want).max(f64::MIN_POSITIVE) / peak(start, other).max(f64::MIN_POSITIVE)).ln()
    };
    let mut best: Option<(f64, usize)> = None;
    for j in 0..=pl + 1 {
        let Some(c) = base.checked_sub(j * l) else { break };
        if c + (pl + 2) * l > x.len() {
            continue;
        }
        let score = contrast(c + (pl - 1) * l, dsp.down(), dsp.up())
            + contrast(c + pl * l, dsp.up(), dsp.down())
            + contrast(c + (pl + 1) * l, dsp.up(), dsp.down());
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, c));
        }
    }
    best.map(|(_, c)| c).ok_or(Error::NotFound)
}

/// Averaged fine-grid paired magnitude over the given windows.
fn fine_paired(x: &[Complex64], starts: &[usize], reference: &[Complex64], dsp: &Dsp) -> Result<Vec<f64>> {
    let l = dsp.params().window_len();
    let mut acc = vec![0.0; l * FINE_PAD];
    for &s in starts {
        let spec = dsp.dechirp_fine(window(x, s, l)?, reference);
        for (a, c) in acc.iter_mut().zip(&spec) {
            *a += dsp::mag(*c);
        }
    }
    let scale = 1.0 / starts.len() as f64;
    Ok(dsp::paired_from_mags(&acc, dsp.params().n() * FINE_PAD)
        .into_iter()
        .map(|v| v * scale)
        .collect())
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Up to `m` resolvable peaks, as signed native bins with magnitudes.
fn fine_peaks(pm: &[f64], m: usize, n: usize, what: &str) -> Result<Vec<(f64, f64)>> {
    let max = pm.iter().cloned().fold(0.0, f64::max);
    let floor = (3.0 * median(pm)).max(RELATIVE_FLOOR * max);
    let peaks = select_peaks(pm, FINE_PAD, floor, m);
    if peaks.is_empty() {
        return Err(Error::Degenerate(format!("no {what} peak found")));
    }
    Ok(peaks
        .into_iter()
        .map(|(pos, mag)| {
            let bin = pos / FINE_PAD as f64;
            (dsp::ring_diff(bin, 0.0, n as f64), mag)
        })
        .collect())
}

/// Preamble windows used for estimation: all but the first and last two.
fn preamble_windows(params: &LoraParams) -> std::ops::RangeInclusive<usize> {
    1..=params.preamble_len - 2
}

/// Maps from `m` users onto `k = m - 1` peaks that use every peak, i.e.
/// exactly one peak is shared by two users.
fn one_shared(m: usize, k: usize) -> Vec<Vec<usize>> {
    (0..m)
        .map(|_| 0..k)
        .multi_cartesian_product()
        .filter(|g| g.iter().unique().count() == k)
        .collect()
}

/// How preamble and SFD peaks may be shared between users.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sharing {
    /// One peak per user in both sets.
    None,
    /// Two users share one preamble peak.
    Up,
    /// Two users share one SFD peak.
    Down,
}

/// All (preamble peak, SFD peak) index assignments of `m` users under the
/// given sharing pattern, or nothing if the peak counts do not allow it.
/// Only the strongest `m` (or `m - 1` on a shared side) peaks are used.
fn assignments(nu: usize, nd: usize, m: usize, sharing: Sharing) -> Vec<Vec<(usize, usize)>> {
    match sharing {
        Sharing::None if nu >= m && nd >= m => (0..m)
            .permutations(m)
            .map(|g| g.into_iter().enumerate().collect())
            .collect(),
        Sharing::Up if m >= 2 && nu + 1 >= m && nd >= m => one_shared(m, m - 1)
            .into_iter()
            .map(|g| g.into_iter().enumerate().map(|(j, i)| (i, j)).collect())
            .collect(),
        Sharing::Down if m >= 2 && nu >= m && nd + 1 >= m => one_shared(m, m - 1)
            .into_iter()
            .map(|g| g.into_iter().enumerate().collect())
            .collect(),
        _ => Vec::new(),
    }
}

/// Rank assignments by how well they explain the sync windows.
///
/// Only candidates whose implied offsets respect the channel limits are
/// kept (all of them if none does), best first by the residual their
/// unit-gain preamble/SFD models leave. The fit allows a free gain per user and
/// window, so small frequency errors in the raw peaks do not matter, while
/// a wrong pairing implies a wrong delay and misplaces the chirp
/// boundaries.
fn rank_pairings(
    x: &[Complex64],
    start: usize,
    up: &[(f64, f64)],
    down: &[(f64, f64)],
    cands: Vec<Vec<(usize, usize)>>,
    dsp: &Dsp,
    limits: &ChannelLimits,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let params = dsp.params();
    if cands.len() <= 1 {
        return Ok(cands);
    }
    let (cfo_lim, to_lim) = params.bin_shifts(limits.cfo_max, limits.to_max(params));
    let feasible = |g: &[(usize, usize)]| {
        let mut to_min = f64::INFINITY;
        let mut to_max = f64::NEG_INFINITY;
        for &(i, j) in g {
            let cfo = (up[i].0 + down[j].0) / 2.0;
            let to = (down[j].0 - up[i].0) / 2.0;
            if cfo.abs() > cfo_lim + 1.0 {
                return false;
            }
            to_min = to_min.min(to);
            to_max = to_max.max(to);
        }
        to_max - to_min <= to_lim + 2.0
    };
    let pool: Vec<&Vec<(usize, usize)>> = if cands.iter().any(|g| feasible(g)) {
        cands.iter().filter(|g| feasible(g)).collect()
    } else {
        cands.iter().collect()
    };

    // One model per (preamble, SFD) pair in use, and per-window Gram data.
    let pairs: Vec<(usize, usize)> = pool.iter().flat_map(|g| g.iter().cloned()).unique().collect();
    let l = params.window_len();
    let (offs, _) = sync_offsets(params);
    let models: Vec<Vec<Complex64>> = pairs
        .iter()
        .map(|&(i, j)| sync_model(up[i].0, down[j].0, &offs, dsp))
        .collect();
    let per_window = offs
        .iter()
        .enumerate()
        .map(|(w, &o)| {
            let y = window(x, start + o, l)?;
            let seg = |k: usize| &models[k][w * l..(w + 1) * l];
            let gram = DMatrix::from_fn(pairs.len(), pairs.len(), |a, b| cdot(seg(a), seg(b)));
            let rhs: Vec<Complex64> = (0..pairs.len()).map(|a| cdot(seg(a), y)).collect();
            let energy: f64 = y.iter().map(Complex64::norm_sqr).sum();
            Ok((gram, rhs, energy))
        })
        .collect::<Result<Vec<_>>>()?;
    let residual = |g: &[(usize, usize)]| -> f64 {
        let idx: Vec<usize> = g
            .iter()
            .map(|e| pairs.iter().position(|q| q == e).unwrap_or(0))
            .collect();
        per_window
            .iter()
            .map(|(gram, rhs, energy)| {
                let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gram[(idx[a], idx[b])]);
                let r = DVector::from_fn(idx.len(), |a, _| rhs[idx[a]]);
                projection_residual(*energy, sub, r)
            })
            .sum()
    };
    Ok(pool
        .into_iter()
        .map(|g| (residual(g), g))
        .sorted_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, g)| g.clone())
        .collect())
}

/// Paired DTFT magnitude of dechirped windows at fractional native bin `f`.
fn paired_dtft(d: &[Vec<Complex64>], f: f64, n: usize) -> f64 {
    d.iter()
        .map(|x| {
            let l = x.len() as f64;
            let phasor = |g: f64, i: usize| Complex64::from_polar(1.0, -TAU * (g * i as f64 / l).rem_euclid(1.0));
            let g = f - n as f64;
            let (sf, sg) = (phasor(f, 1), phasor(g, 1));
            let (mut wf, mut wg) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
            let (mut af, mut ag) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for (i, v) in x.iter().enumerate() {
                af += v * wf;
                ag += v * wg;
                wf *= sf;
                wg *= sg;
                if i % 512 == 511 {
                    wf = phasor(f, i + 1);
                    wg = phasor(g, i + 1);
                }
            }
            dsp::mag(af) + dsp::mag(ag)
        })
        .sum()
}

/// Strongest maximum of the paired DTFT within `radius` bins of `f0`:
/// a coarse scan in eighth-bin steps, then two parabolic refinements.
fn local_peak(d: &[Vec<Complex64>], f0: f64, radius: f64, n: usize) -> f64 {
    let steps = (radius * 8.0).round() as i32;
    let scan: Vec<(f64, f64)> = (-steps - 1..=steps + 1)
        .map(|k| {
            let f = f0 + k as f64 / 8.0;
            (f, paired_dtft(d, f, n))
        })
        .collect();
    let k = (1..scan.len() - 1)
        .max_by(|&a, &b| scan[a].1.total_cmp(&scan[b].1))
        .unwrap_or(1);
    let mut f = scan[k].0 + dsp::parabolic(scan[k - 1].1, scan[k].1, scan[k + 1].1) / 8.0;
    let h = 1.0 / 64.0;
    let (a, b, c) = (
        paired_dtft(d, f - h, n),
        paired_dtft(d, f, n),
        paired_dtft(d, f + h, n),
    );
    f += dsp::parabolic(a, b, c) * h;
    f
}

/// Least-squares gains of the given unit-gain waveforms in `y`.
fn window_gains(y: &[Complex64], cols: &[&[Complex64]]) -> Vec<Complex64> {
    let m = cols.len();
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(u, v)| u.conj() * v).sum() };
    let gram = DMatrix::from_fn(m, m, |a, b| dot(cols[a], cols[b]));
    let rhs = DVector::from_fn(m, |a, _| dot(cols[a], y));
    gram.cholesky()
        .map(|c| c.solve(&rhs).iter().cloned().collect())
        .unwrap_or_else(|| vec![Complex64::new(0.0, 0.0); m])
}

/// Window offsets (relative to the frame start) used for offset
/// refinement: the inner preamble windows, then the two full SFD windows.
/// Also returns the number of preamble windows.
fn sync_offsets(p: &LoraParams) -> (Vec<usize>, usize) {
    let l = p.window_len();
    let pre: Vec<usize> = preamble_windows(p).map(|q| q * l).collect();
    let npre = pre.len();
    let offs = pre
        .into_iter()
        .chain((0..2).map(|q| (p.preamble_len + q) * l))
        .collect();
    (offs, npre)
}

/// Unit-gain preamble/SFD model of one user over the sync windows,
/// concatenated.
fn sync_model(fu: f64, fd: f64, offs: &[usize], dsp: &Dsp) -> Vec<Complex64> {
    let p = dsp.params();
    let e = OffsetEstimate::from_bins(fu, fd, 1.0, p);
    let nm = NodeModel::new(e.cfo_hat, e.to_hat, Complex64::new(1.0, 0.0), p);
    offs.iter().flat_map(|&o| nm.sync_window(o, dsp)).collect()
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(u, v)| u.conj() * v).sum()
}

/// Energy of `y` left after projecting out the span of some columns,
/// given their Gram matrix and correlations with `y`. Infinite when the
/// columns are (numerically) dependent.
fn projection_residual(y_energy: f64, gram: DMatrix<Complex64>, rhs: DVector<Complex64>) -> f64 {
    match gram.cholesky() {
        Some(c) => {
            let h = c.solve(&rhs);
            y_energy - rhs.dotc(&h).re
        }
        None => f64::INFINITY,
    }
}

/// Separate two users whose tones merged into one peak of the preamble
/// (`up_merged`) or SFD spectrum.
///
/// Their tones in the other set are clean, which leaves one unknown
/// coordinate each. Both are found jointly by fitting one complex gain per
/// user, coherently across all sync windows, on a grid around the merged
/// peak followed by parabolic coordinate refinement. Other users enter the
/// fit as fixed columns.
fn resolve_merged(
    x: &[Complex64],
    start: usize,
    peaks: &mut [(f64, f64)],
    pair: [usize; 2],
    up_merged: bool,
    dsp: &Dsp,
) -> Result<()> {
    let p = dsp.params();
    let l = p.window_len();
    let (offs, _) = sync_offsets(p);
    let y: Vec<Complex64> = offs
        .iter()
        .map(|&o| window(x, start + o, l))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let y_energy: f64 = y.iter().map(Complex64::norm_sqr).sum();
    let orig = peaks.to_vec();
    let with = |k: usize, v: f64| {
        let (fu, fd) = orig[k];
        if up_merged {
            (v, fd)
        } else {
            (fu, v)
        }
    };
    let centre = if up_merged { peaks[pair[0]].0 } else { peaks[pair[0]].1 };
    let fixed: Vec<Vec<Complex64>> = (0..peaks.len())
        .filter(|k| !pair.contains(k))
        .map(|k| sync_model(peaks[k].0, peaks[k].1, &offs, dsp))
        .collect();
    let grid: Vec<f64> = (-12..=12).map(|i| centre + i as f64 / 8.0).collect();
    let cols: Vec<Vec<Complex64>> = fixed
        .iter()
        .cloned()
        .chain(pair.iter().flat_map(|&k| {
            grid.iter()
                .map(|&v| {
                    let (fu, fd) = with(k, v);
                    sync_model(fu, fd, &offs, dsp)
                })
                .collect::<Vec<_>>()
        }))
        .collect();
    let nf = fixed.len();
    let ng = grid.len();
    let all_gram = DMatrix::from_fn(cols.len(), cols.len(), |a, b| {
        if a <= b {
            cdot(&cols[a], &cols[b])
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let g = |a: usize, b: usize| if a <= b { all_gram[(a, b)] } else { all_gram[(b, a)].conj() };
    let all_rhs: Vec<Complex64> = cols.iter().map(|c| cdot(c, &y)).collect();
    let pick = |idx: &[usize]| {
        let gram = DMatrix::from_fn(idx.len(), idx.len(), |a, b| g(idx[a], idx[b]));
        let rhs = DVector::from_fn(idx.len(), |a, _| all_rhs[idx[a]]);
        projection_residual(y_energy, gram, rhs)
    };
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..ng {
        for j in 0..ng {
            let idx: Vec<usize> = (0..nf).chain([nf + i, nf + ng + j]).collect();
            let r = pick(&idx);
            if r < best.0 {
                best = (r, i, j);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Degenerate("merged users not separable".into()));
    }
    let mut v = [grid[best.1], grid[best.2]];
    // Coordinate-wise parabolic refinement with direct model evaluation.
    let cost = |v: [f64; 2]| {
        let mut cs: Vec<Vec<Complex64>> = fixed.clone();
        for (t, &k) in pair.iter().enumerate() {
            let (fu, fd) = with(k, v[t]);
            cs.push(sync_model(fu, fd, &offs, dsp));
        }
        let gram = DMatrix::from_fn(cs.len(), cs.len(), |a, b| cdot(&cs[a], &cs[b]));
        let rhs = DVector::from_fn(cs.len(), |a, _| cdot(&cs[a], &y));
        projection_residual(y_energy, gram, rhs)
    };
    for h in [1.0 / 16.0, 1.0 / 64.0] {
        for t in 0..2 {
            let mut probe = v;
            let mut r = [0.0; 3];
            for (q, d) in [-h, 0.0, h].into_iter().enumerate() {
                probe[t] = v[t] + d;
                r[q] = cost(probe);
            }
            if r.iter().all(|c| c.is_finite()) {
                // Residual is minimised, so fit the parabola to its negation.
                v[t] += dsp::parabolic(-r[0], -r[1], -r[2]) * h;
            }
        }
    }
    for (t, &k) in pair.iter().enumerate() {
        peaks[k] = with(k, v[t]);
    }
    Ok(())
}

/// Iterative interference cancellation over the preamble and SFD.
///
/// Every sweep rebuilds all users from the current peak positions, fits
/// their gains per window, subtracts everyone but one user and re-locates
/// that user's preamble and SFD peaks on the residual. This removes the
/// mutual bias of nearby peaks that the magnitude spectrum cannot separate.
///
/// Coordinates flagged in `frozen` (preamble, SFD) are kept as they are.
fn cancel_and_refine(
    x: &[Complex64],
    start: usize,
    peaks: &mut [(f64, f64)],
    frozen: &[(bool, bool)],
    dsp: &Dsp,
) -> Result<()> {
    let p = dsp.params();
    let (n, l, m) = (p.n(), p.window_len(), peaks.len());
    let (offs, npre) = sync_offsets(p);
    let ys = offs
        .iter()
        .map(|&o| window(x, start + o, l))
        .collect::<Result<Vec<_>>>()?;
    let one = Complex64::new(1.0, 0.0);
    // Peaks with a close neighbour may start out on a merged or distorted
    // lobe; they get a wide first search.
    let crowded = |f: f64, all: &[f64]| {
        all.iter().filter(|&&g| (g - f).abs() < 4.0).count() > 1
    };
    let ups: Vec<f64> = peaks.iter().map(|p| p.0).collect();
    let downs: Vec<f64> = peaks.iter().map(|p| p.1).collect();
    for sweep in 0..CANCEL_SWEEPS {
        let radius = |f: f64, all: &[f64]| {
            if sweep == 0 && crowded(f, all) {
                2.5
            } else {
                0.25
            }
        };
        let models: Vec<Vec<Vec<Complex64>>> = peaks
            .iter()
            .map(|&(fu, fd)| {
                let e = OffsetEstimate::from_bins(fu, fd, 1.0, p);
                let nm = NodeModel::new(e.cfo_hat, e.to_hat, one, p);
                offs.iter().map(|&o| nm.sync_window(o, dsp)).collect()
            })
            .collect();
        let gains: Vec<Vec<Complex64>> = (0..offs.len())
            .map(|w| {
                let cols: Vec<&[Complex64]> = models.iter().map(|u| u[w].as_slice()).collect();
                window_gains(ys[w], &cols)
            })
            .collect();
        let mut next = peaks.to_vec();
        for (k, nk) in next.iter_mut().enumerate() {
            let dechirped: Vec<Vec<Complex64>> = (0..offs.len())
                .map(|w| {
                    let reference = if w < npre { dsp.down() } else { dsp.up() };
                    (0..l)
                        .map(|i| {
                            let mut r = ys[w][i];
                            for j in (0..m).filter(|&j| j != k) {
                                r -= gains[w][j] * models[j][w][i];
                            }
                            r * reference[i]
                        })
                        .collect()
                })
                .collect();
            if !frozen[k].0 {
                nk.0 = local_peak(&dechirped[..npre], peaks[k].0, radius(peaks[k].0, &ups), n);
            }
            if !frozen[k].1 {
                nk.1 = local_peak(&dechirped[npre..], peaks[k].1, radius(peaks[k].1, &downs), n);
            }
        }
        peaks.copy_from_slice(&next);
    }
    Ok(())
}

/// Noise variance per receiver sample, from the median dechirped power of
/// the preamble windows (users occupy only a handful of bins).
pub fn estimate_noise_variance(x: &[Complex64], start: usize, dsp: &Dsp) -> Result<f64> {
    let p = dsp.params();
    let l = p.window_len();
    let mut acc = 0.0;
    let wins: Vec<usize> = preamble_windows(p).collect();
    for &q in &wins {
        let spec = dsp.dechirp(window(x, start + q * l, l)?, dsp.down(), 0);
        let power: Vec<f64> = spec.iter().map(Complex64::norm_sqr).collect();
        acc += median(&power) / std::f64::consts::LN_2 / l as f64;
    }
    Ok(acc / wins.len() as f64)
}

/// Residual energy of the sync windows after fitting one complex gain per
/// user, shared by all windows. Only the true offsets make a single gain
/// fit the whole preamble and SFD. Also returns the window energy.
fn coherent_residual(x: &[Complex64], start: usize, peaks: &[(f64, f64)], dsp: &Dsp) -> Result<(f64, f64)> {
    let l = dsp.params().window_len();
    let (offs, _) = sync_offsets(dsp.params());
    let y: Vec<Complex64> = offs
        .iter()
        .map(|&o| window(x, start + o, l))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let cols: Vec<Vec<Complex64>> = peaks.iter().map(|&(fu, fd)| sync_model(fu, fd, &offs, dsp)).collect();
    let gram = DMatrix::from_fn(cols.len(), cols.len(), |a, b| cdot(&cols[a], &cols[b]));
    let rhs = DVector::from_fn(cols.len(), |a, _| cdot(&cols[a], &y));
    let energy: f64 = y.iter().map(Complex64::norm_sqr).sum();
    Ok((projection_residual(energy, gram, rhs), energy))
}

/// Refine one pairing hypothesis: separate a shared peak if there is one,
/// then run the cancellation sweeps.
fn refine_hypothesis(
    x: &[Complex64],
    start: usize,
    up: &[(f64, f64)],
    down: &[(f64, f64)],
    pairing: &[(usize, usize)],
    dsp: &Dsp,
) -> Result<Vec<(f64, f64)>> {
    let m = pairing.len();
    let mut peaks: Vec<(f64, f64)> = pairing.iter().map(|&(i, j)| (up[i].0, down[j].0)).collect();
    let mut frozen = vec![(false, false); m];
    let shared = |side: fn(&(usize, usize)) -> usize| {
        (0..m)
            .tuple_combinations()
            .find(|&(a, b)| side(&pairing[a]) == side(&pairing[b]))
            .map(|(a, b)| [a, b])
    };
    if let Some(pair) = shared(|e| e.0) {
        resolve_merged(x, start, &mut peaks, pair, true, dsp)?;
        pair.iter().for_each(|&k| frozen[k].0 = true);
    } else if let Some(pair) = shared(|e| e.1) {
        resolve_merged(x, start, &mut peaks, pair, false, dsp)?;
        pair.iter().for_each(|&k| frozen[k].1 = true);
    }
    if m > 1 {
        cancel_and_refine(x, start, &mut peaks, &frozen, dsp)?;
    }
    Ok(peaks)
}

/// Estimate the CFO and TO of `m` users relative to the frame starting at
/// `start`. Results are ordered by descending preamble amplitude.
///
/// Two users' tones can merge into one peak in the preamble or SFD
/// spectrum, and a sidelobe may then take the freed slot. The pairing
/// suggested by the peak counts is refined first; if it leaves more than
/// noise in the sync windows, the other sharing patterns are refined too
/// and the best coherent fit wins.
pub fn estimate_offsets(
    signal: &IqBuffer,
    start: usize,
    m: usize,
    dsp: &Dsp,
    limits: &ChannelLimits,
) -> Result<Vec<OffsetEstimate>> {
    let p = dsp.params();
    if m == 0 {
        return Err(Error::Domain("at least one user required".into()));
    }
    let (n, l) = (p.n(), p.window_len());
    let x = &signal.samples;
    let pre: Vec<usize> = preamble_windows(p).map(|q| start + q * l).collect();
    let sfd: Vec<usize> = (0..2).map(|q| start + (p.preamble_len + q) * l).collect();
    let pm_up = fine_paired(x, &pre, dsp.down(), dsp)?;
    let pm_down = fine_paired(x, &sfd, dsp.up(), dsp)?;
    let up = fine_peaks(&pm_up, m, n, "preamble")?;
    let down = fine_peaks(&pm_down, m, n, "SFD")?;
    let (nu, nd) = (up.len(), down.len());
    let natural = if nu == m && nd == m {
        Sharing::None
    } else if nu + 1 == m && nd == m {
        Sharing::Up
    } else if nd + 1 == m && nu == m {
        Sharing::Down
    } else {
        return Err(Error::Degenerate(format!(
            "{nu} preamble and {nd} SFD peaks for {m} users"
        )));
    };
    let order = [natural]
        .into_iter()
        .chain([Sharing::None, Sharing::Up, Sharing::Down].into_iter().filter(|&s| s != natural));
    let sigma2 = estimate_noise_variance(x, start, dsp)?;
    let accept = |res: f64, energy: f64| {
        res <= ACCEPT_NOISE * sigma2 * (sync_offsets(p).0.len() * l) as f64 + ACCEPT_MISMATCH * energy
    };
    let mut best: Option<(f64, Vec<(usize, usize)>, Vec<(f64, f64)>)> = None;
    'search: for sharing in order {
        let cands = assignments(nu, nd, m, sharing);
        if cands.is_empty() {
            continue;
        }
        for pairing in rank_pairings(x, start, &up, &down, cands, dsp, limits)?
            .into_iter()
            .take(RANKED_TRIES)
        {
            let peaks = match refine_hypothesis(x, start, &up, &down, &pairing, dsp) {
                Ok(pk) => pk,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            let (res, energy) = coherent_residual(x, start, &peaks, dsp)?;
            let done = accept(res, energy);
            if best.as_ref().map_or(true, |b| res < b.0) {
                best = Some((res, pairing, peaks));
            }
            if done || m == 1 {
                break 'search;
            }
        }
    }
    let (_, pairing, peaks) = best.ok_or_else(|| Error::Degenerate("no consistent peak pairing".into()))?;
    Ok(peaks
        .iter()
        .zip(&pairing)
        .map(|(&(fu, fd), &(i, _))| OffsetEstimate::from_bins(fu, fd, up[i].1, p))
        .collect())
}

/// Move the window start so the earliest estimated user arrives within the
/// first receiver sample, shifting every time offset to match.
pub fn reanchor(start: usize, offsets: &mut [OffsetEstimate], params: &LoraParams) -> Result<usize> {
    let osr = params.osr_rx as f64;
    let min = offsets
        .iter()
        .map(|o| o.to_hat * osr * params.bw)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Degenerate("no offsets to anchor on".into()));
    }
    let shift = min.floor() as isize;
    let new_start = start as isize + shift;
    if new_start < 0 {
        return Err(Error::Degenerate("frame starts before the capture".into()));
    }
    let db = shift as f64 / osr;
    for o in offsets.iter_mut() {
        *o = OffsetEstimate::from_bins(o.f_up + db, o.f_down - db, o.amp, params);
    }
    Ok(new_start as usize)
}

/// Per-user reconstruction state for one packet: the CFO rotation across a
/// window is precomputed so each window costs one table lookup and one
/// complex multiply per sample.
#[derive(Debug, Clone)]
pub struct NodeModel {
    cfo: f64,
    shift: isize,
    h: Complex64,
    rot: Vec<Complex64>,
    rate: f64,
}

impl NodeModel {
    pub fn new(cfo: f64, to: f64, h: Complex64, params: &LoraParams) -> Self {
        let l = params.window_len();
        let rate = params.osr_rx as f64 * params.bw;
        let step = cfo / rate;
        NodeModel {
            cfo,
            shift: (params.osr_rec as f64 * to * params.bw).round() as isize,
            h,
            rot: (0..l)
                .map(|i| Complex64::from_polar(1.0, TAU * (step * i as f64).rem_euclid(1.0)))
                .collect(),
            rate,
        }
    }

    pub fn from_estimate(e: &NodeEstimate, params: &LoraParams) -> Self {
        NodeModel::new(e.cfo, e.to, e.h, params)
    }

    /// Preamble and SFD of this node in the window starting `offset`
    /// receiver samples after the frame start; the data part is left empty.
    pub fn sync_window(&self, offset: usize, dsp: &Dsp) -> Vec<Complex64> {
        let p = dsp.params();
        let table = dsp.table();
        let dec = p.decimation() as isize;
        let len = table.len();
        let pre_end = (p.preamble_len * len) as isize;
        let sfd_end = pre_end + (SFD_QUARTERS * len / 4) as isize;
        let phase = (self.cfo * offset as f64 / self.rate).rem_euclid(1.0);
        let g = self.h * Complex64::from_polar(1.0, TAU * phase);
        let base = table.base();
        self.rot
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let k = (offset + i) as isize * dec - self.shift;
                let c = if k < 0 || k >= sfd_end {
                    return Complex64::new(0.0, 0.0);
                } else if k < pre_end {
                    base[k as usize % len]
                } else {
                    base[(k - pre_end) as usize % len].conj()
                };
                g * c * r
            })
            .collect()
    }

    /// The window starting `offset` receiver samples after the frame start,
    /// carrying symbol `s` delayed by this node's time offset.
    pub fn window(&self, s: usize, offset: usize, dsp: &Dsp) -> Vec<Complex64> {
        let table = dsp.table();
        let dec = dsp.params().decimation() as isize;
        let len = table.len() as isize;
        let phase = (self.cfo * offset as f64 / self.rate).rem_euclid(1.0);
        let g = self.h * Complex64::from_polar(1.0, TAU * phase);
        self.rot
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let k = i as isize * dec - self.shift;
                if (0..len).contains(&k) {
                    g * table.sample(s, k as usize) * r
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect()
    }
}

/// Rebuild one received symbol window from a user's parameters.
///
/// `offset` is the window start in receiver samples after the frame start;
/// it sets the phase of the CFO rotation, which runs continuously across
/// symbols.
pub fn reconstruct_symbol(s: usize, cfo: f64, to: f64, h: Complex64, offset: usize, dsp: &Dsp) -> IqBuffer {
    let p = dsp.params();
    IqBuffer::new(
        NodeModel::new(cfo, to, h, p).window(s, offset, dsp),
        p.osr_rx as f64 * p.bw,
    )
}

/// Received and unit-gain reconstructed spectra of each preamble window.
fn preamble_system(
    signal: &IqBuffer,
    start: usize,
    nodes: &[(f64, f64)],
    dsp: &Dsp,
    trunc: usize,
) -> Result<Vec<(Vec<Complex64>, Vec<Vec<Complex64>>)>> {
    let p = dsp.params();
    let l = p.window_len();
    let models: Vec<NodeModel> = nodes
        .iter()
        .map(|&(cfo, to)| NodeModel::new(cfo, to, Complex64::new(1.0, 0.0), p))
        .collect();
    preamble_windows(p)
        .map(|q| {
            let off = q * l;
            let y = dsp.dechirp(window(&signal.samples, start + off, l)?, dsp.down(), trunc);
            let cols = models
                .iter()
                .map(|m| dsp.dechirp(&m.window(0, off, dsp), dsp.down(), trunc))
                .collect();
            Ok((y, cols))
        })
        .collect()
}

/// Solve the stacked complex least-squares problem through its Gram system.
fn solve_ls(blocks: &[(Vec<Complex64>, Vec<Vec<Complex64>>)]) -> Result<(Vec<Complex64>, f64)> {
    let m = blocks.first().map_or(0, |b| b.1.len());
    let mut gram = DMatrix::<Complex64>::zeros(m, m);
    let mut rhs = DVector::<Complex64>::zeros(m);
    for (y, cols) in blocks {
        for a in 0..m {
            for b in 0..m {
                gram[(a, b)] += cols[a].iter().zip(&cols[b]).map(|(u, v)| u.conj() * v).sum::<Complex64>();
            }
            rhs[a] += cols[a].iter().zip(y).map(|(u, v)| u.conj() * v).sum::<Complex64>();
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(hi > 0.0) || lo <= 1e-9 * hi {
        return Err(Error::Degenerate("reconstructed preambles are not separable".into()));
    }
    let h = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("gram matrix not positive definite".into()))?
        .solve(&rhs);
    let residual = blocks
        .iter()
        .map(|(y, cols)| {
            (0..y.len())
                .map(|j| {
                    let fit: Complex64 = (0..m).map(|k| cols[k][j] * h[k]).sum();
                    (y[j] - fit).norm_sqr()
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    Ok((h.iter().cloned().collect(), residual))
}

/// Fit every user's complex channel to the received preamble.
///
/// Each user's preamble is rebuilt with unit gain at its estimated offsets,
/// both sides are dechirped (first `trunc` samples zeroed) and transformed,
/// and the per-window spectra are stacked into one least-squares problem.
pub fn estimate_channels(
    signal: &IqBuffer,
    start: usize,
    offsets: &[(f64, f64)],
    dsp: &Dsp,
    trunc: usize,
) -> Result<Vec<ChannelEstimate>> {
    let blocks = preamble_system(signal, start, offsets, dsp, trunc)?;
    let (h, residual) = solve_ls(&blocks)?;
    Ok(h.into_iter()
        .map(|h_hat| ChannelEstimate { h_hat, residual })
        .collect())
}

/// Sharpen each user's CFO from the phase drift of per-window channel
/// fits across the preamble.
///
/// A residual CFO error of `e` Hz rotates the fitted gain by `2 pi e Ts`
/// per symbol; left alone it accumulates over the packet and corrupts the
/// reconstruction of late data symbols.
pub fn refine_cfo(
    signal: &IqBuffer,
    start: usize,
    offsets: &[(f64, f64)],
    dsp: &Dsp,
    trunc: usize,
) -> Result<Vec<f64>> {
    let blocks = preamble_system(signal, start, offsets, dsp, trunc)?;
    let per_window = blocks
        .iter()
        .map(|b| solve_ls(std::slice::from_ref(b)).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let ts = dsp.params().ts();
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(k, &(cfo, _))| {
            let acc: Complex64 = per_window
                .windows(2)
                .map(|w| w[1][k] * w[0][k].conj())
                .sum();
            cfo + acc.arg() / (TAU * ts)
        })
        .collect())
}

/// Result of acquiring one superimposed frame.
#[derive(Debug, Clone)]
pub struct Acquisition {
    /// Window anchor in receiver samples.
    pub start: usize,
    /// Raw offset estimates relative to `start`.
    pub offsets: Vec<OffsetEstimate>,
    /// Refined per-user parameters used for reconstruction.
    pub nodes: Vec<NodeEstimate>,
    pub residual: f64,
    /// Noise variance per receiver sample, estimated from the preamble.
    pub noise_var: f64,
}

/// Detection, offset estimation, re-anchoring, CFO refinement and channel
/// fitting for `m` users.
pub fn acquire(signal: &IqBuffer, m: usize, dsp: &Dsp, limits: &ChannelLimits) -> Result<Acquisition> {
    let p = dsp.params();
    let trunc = limits.truncation(p);
    let coarse = detect_preamble(signal, dsp)?;
    let mut offsets = estimate_offsets(signal, coarse, m, dsp, limits)?;
    let start = reanchor(coarse, &mut offsets, p)?;
    let mut pairs: Vec<(f64, f64)> = offsets.iter().map(|o| (o.cfo_hat, o.to_hat)).collect();
    for _ in 0..2 {
        let cfo = refine_cfo(signal, start, &pairs, dsp, trunc)?;
        for (pair, c) in pairs.iter_mut().zip(cfo) {
            pair.0 = c;
        }
    }
    let channels = estimate_channels(signal, start, &pairs, dsp, trunc)?;
    let residual = channels.first().map_or(0.0, |c| c.residual);
    let nodes = pairs
        .iter()
        .zip(&channels)
        .map(|(&(cfo, to), c)| NodeEstimate { cfo, to, h: c.h_hat })
        .collect();
    let noise_var = estimate_noise_variance(&signal.samples, start, dsp)?;
    Ok(Acquisition {
        start,
        offsets,
        nodes,
        residual,
        noise_var,
    })
}
