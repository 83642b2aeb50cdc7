//! Per-window maximum-likelihood multi-user demodulation.
//!
//! Each data window is dechirped with a truncated downchirp, peaks are
//! picked from the paired magnitude spectrum, and candidate assignments of
//! users to peaks are scored by how well the sum of the users' rebuilt
//! symbols explains the received spectrum.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Dsp};
use crate::error::{Error, Result};
use crate::sync::{NodeEstimate, NodeModel};

/// Upper bound on the peaks kept per window by [`Strategy::VPeak`].
pub const V_PEAK_CAP: usize = 8;

/// Tones closer than this (native bins) get a local symbol search.
const CROWDED_BINS: f64 = 3.0;
/// Best-scored candidates that are eligible for the local search.
const REFINE_TOP: usize = 4;
const REFINE_PASSES: usize = 3;

/// Default number of candidates kept per window for soft decoding.
pub const DEFAULT_TOP_K: usize = 2;

/// How peaks are picked and candidate assignments enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every local maximum above the noise threshold (capped); all `V^M`
    /// assignments.
    VPeak,
    /// The `M` strongest peaks; all `M^M` assignments.
    MPeak,
    /// The `M` strongest peaks; for each `V' = 1..=M` every assignment of
    /// the users onto the strongest `V'` peaks that uses all of them.
    MFullPeak,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::VPeak, Strategy::MPeak, Strategy::MFullPeak];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::VPeak => "v-peak",
            Strategy::MPeak => "m-peak",
            Strategy::MFullPeak => "m-full-peak",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Peaks of one window, strongest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowPeaks {
    /// Positions in native bins, fractional, in `[0, N)`.
    pub bins: Vec<f64>,
    pub mags: Vec<f64>,
}

impl WindowPeaks {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// One hypothesis for a window: which peak each user sits on, the symbols
/// this implies and the resulting log-likelihood (negated squared
/// distance, unnormalised).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSequence {
    /// Peak position chosen for each user.
    pub assignment: Vec<f64>,
    pub symbols: Vec<usize>,
    pub loglik: f64,
}

/// The best candidates of one window, best first. Empty when the window
/// had no usable peak.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopK {
    pub candidates: Vec<CandidateSequence>,
}

impl TopK {
    pub fn is_erased(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Hard decision, if the window was not erased.
    pub fn hard(&self) -> Option<&CandidateSequence> {
        self.candidates.first()
    }

    /// Candidate symbol values of one user with the shared log-likelihoods.
    pub fn node_values(&self, node: usize) -> (Vec<usize>, Vec<f64>) {
        self.candidates
            .iter()
            .map(|c| (c.symbols[node], c.loglik))
            .unzip()
    }
}

/// Detection threshold for [`Strategy::VPeak`]: mean plus three standard
/// deviations of the paired magnitude of noise alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseFloor {
    pub threshold: f64,
}

impl NoiseFloor {
    /// Measure the threshold on noise-only paired magnitude vectors.
    pub fn measure(noise_pm: &[Vec<f64>]) -> Result<Self> {
        let all: Vec<f64> = noise_pm.iter().flatten().cloned().collect();
        if all.is_empty() {
            return Err(Error::Domain("no noise samples to measure".into()));
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(NoiseFloor {
            threshold: mean + 3.0 * var.sqrt(),
        })
    }

    /// Closed form for complex white noise of variance `sigma2` per
    /// sample after dechirping `kept` samples of a window: each paired bin
    /// is the sum of two independent Rayleigh magnitudes.
    pub fn from_variance(sigma2: f64, kept: usize) -> Self {
        let s2 = sigma2.max(0.0) * kept as f64;
        let mean = (std::f64::consts::PI * s2).sqrt();
        let var = 2.0 * (4.0 - std::f64::consts::PI) / 4.0 * s2;
        NoiseFloor {
            threshold: mean + 3.0 * var.sqrt(),
        }
    }
}

/// Truncated dechirp of a data window: the first `trunc` samples are
/// zeroed, the rest multiplied by the base downchirp, then transformed.
pub fn dechirp_truncated(window: &[Complex64], dsp: &Dsp, trunc: usize) -> Vec<Complex64> {
    dsp.dechirp(window, dsp.down(), trunc)
}

/// Peaks of a paired magnitude vector.
///
/// `VPeak` keeps local maxima above the noise threshold, at most
/// [`V_PEAK_CAP`]; the other strategies keep the `m` strongest local
/// maxima. Positions are refined by parabolic interpolation. Equal
/// magnitudes are ordered by bin index.
pub fn extract_peaks(pm: &[f64], strategy: Strategy, m: usize, floor: Option<NoiseFloor>) -> WindowPeaks {
    let n = pm.len();
    let threshold = match strategy {
        Strategy::VPeak => floor.map_or(0.0, |f| f.threshold),
        _ => 0.0,
    };
    let cap = match strategy {
        Strategy::VPeak => V_PEAK_CAP,
        _ => m,
    };
    let mut idx: Vec<usize> = dsp::local_maxima(pm)
        .into_iter()
        .filter(|&i| pm[i] > threshold)
        .collect();
    idx.sort_by(|&a, &b| pm[b].total_cmp(&pm[a]).then(a.cmp(&b)));
    idx.truncate(cap);
    let mut out = WindowPeaks::default();
    for i in idx {
        let off = if n >= 3 {
            dsp::parabolic(pm[(i + n - 1) % n], pm[i], pm[(i + 1) % n])
        } else {
            0.0
        };
        out.bins.push((i as f64 + off).rem_euclid(n as f64));
        out.mags.push(pm[i]);
    }
    out
}

/// Number of assignments of `m` users onto `v` peaks that use every peak,
/// by the recurrence `f(m, v) = v (f(m-1, v) + f(m-1, v-1))`.
pub fn surjection_count(m: usize, v: usize) -> u64 {
    if v == 0 || v > m {
        return u64::from(m == 0 && v == 0);
    }
    let mut f = vec![vec![0u64; v + 1]; m + 1];
    f[0][0] = 1;
    for i in 1..=m {
        for j in 1..=v.min(i) {
            f[i][j] = j as u64 * (f[i - 1][j] + f[i - 1][j - 1]);
        }
    }
    f[m][v]
}

/// Candidate count of a strategy for `m` users and `v` available peaks.
pub fn candidate_count(strategy: Strategy, m: usize, v: usize) -> u64 {
    match strategy {
        Strategy::VPeak => (v as u64).pow(m as u32),
        Strategy::MPeak => (v.min(m) as u64).pow(m as u32),
        Strategy::MFullPeak => (1..=v.min(m)).map(|k| surjection_count(m, k)).sum(),
    }
}

/// Assignments as peak indices per user; peak index 0 is the strongest.
pub fn enumerate_sequences(v: usize, m: usize, strategy: Strategy) -> Vec<Vec<usize>> {
    if v == 0 || m == 0 {
        return Vec::new();
    }
    let all = |k: usize| (0..m).map(|_| 0..k).multi_cartesian_product();
    match strategy {
        Strategy::VPeak => all(v).collect(),
        Strategy::MPeak => all(v.min(m)).collect(),
        Strategy::MFullPeak => (1..=v.min(m))
            .flat_map(|k| all(k).filter(move |a| a.iter().unique().count() == k))
            .collect(),
    }
}

/// Round to the nearest integer, halves toward zero.
pub fn round_half_to_zero(x: f64) -> f64 {
    if (x - x.trunc()).abs() == 0.5 {
        x.trunc()
    } else {
        x.round()
    }
}

/// Symbol carried by a peak at `bin` for a user whose tones are shifted by
/// `shift = cfo_bins - to_bins`.
pub fn symbol_from_peak(bin: f64, shift: f64, n: usize) -> usize {
    (round_half_to_zero(bin - shift) as i64).rem_euclid(n as i64) as usize
}

/// Negated squared distance between a received spectrum and the sum of
/// the given user spectra.
pub fn spectrum_loglik(y: &[Complex64], parts: &[&[Complex64]]) -> f64 {
    -(0..y.len())
        .map(|j| {
            let fit: Complex64 = parts.iter().map(|p| p[j]).sum();
            (y[j] - fit).norm_sqr()
        })
        .sum::<f64>()
}

/// Log-likelihood of a window under per-user symbol hypotheses, computed
/// directly: each user's symbol is rebuilt, summed, truncated-dechirped and
/// compared with `y` over every bin.
///
/// `offset` is the window start in receiver samples after the frame start.
pub fn sequence_loglik(
    y: &[Complex64],
    symbols: &[usize],
    models: &[NodeModel],
    offset: usize,
    dsp: &Dsp,
    trunc: usize,
) -> f64 {
    let l = dsp.params().window_len();
    let mut sum = vec![Complex64::new(0.0, 0.0); l];
    for (model, &s) in models.iter().zip(symbols) {
        for (acc, v) in sum.iter_mut().zip(model.window(s, offset, dsp)) {
            *acc += v;
        }
    }
    let fit = dechirp_truncated(&sum, dsp, trunc);
    spectrum_loglik(y, &[&fit])
}

/// Demodulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemodConfig {
    pub strategy: Strategy,
    /// Candidates kept per window (at least one).
    pub top_k: usize,
}

impl Default for DemodConfig {
    fn default() -> Self {
        DemodConfig {
            strategy: Strategy::MFullPeak,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Demodulator for one acquired packet.
#[derive(Debug, Clone)]
pub struct Demodulator<'a> {
    dsp: &'a Dsp,
    models: Vec<NodeModel>,
    shifts: Vec<f64>,
    trunc: usize,
    floor: Option<NoiseFloor>,
    config: DemodConfig,
}

impl<'a> Demodulator<'a> {
    pub fn new(
        dsp: &'a Dsp,
        nodes: &[NodeEstimate],
        trunc: usize,
        floor: Option<NoiseFloor>,
        config: DemodConfig,
    ) -> Result<Self> {
        if config.top_k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        if nodes.is_empty() {
            return Err(Error::Domain("no users to demodulate".into()));
        }
        let p = dsp.params();
        Ok(Demodulator {
            dsp,
            models: nodes.iter().map(|e| NodeModel::from_estimate(e, p)).collect(),
            shifts: nodes
                .iter()
                .map(|e| {
                    let (d, t) = p.bin_shifts(e.cfo, e.to);
                    d - t
                })
                .collect(),
            trunc,
            floor,
            config,
        })
    }

    pub fn users(&self) -> usize {
        self.models.len()
    }

    /// Offset of data window `i` from the frame start, in receiver samples.
    pub fn window_offset(&self, i: usize) -> usize {
        let p = self.dsp.params();
        p.data_offset(p.osr_rx) + i * p.window_len()
    }

    /// Demodulate data window `i` of the frame starting at `start`.
    pub fn demod_window(&self, samples: &[Complex64], start: usize, i: usize) -> Result<TopK> {
        let p = self.dsp.params();
        let l = p.window_len();
        let offset = self.window_offset(i);
        let win = samples
            .get(start + offset..start + offset + l)
            .ok_or_else(|| Error::Domain(format!("data window {i} runs past the capture")))?;
        let y = dechirp_truncated(win, self.dsp, self.trunc);
        let pm = dsp::paired_magnitude(&y, p.n())?;
        let m = self.users();
        let peaks = extract_peaks(&pm, self.config.strategy, m, self.floor);
        Ok(self.score(&y, &peaks, offset))
    }

    /// Score every enumerated assignment and keep the best `top_k`.
    ///
    /// Each distinct (user, symbol) spectrum is built once; candidate
    /// distances then follow from their pairwise inner products.
    pub fn score(&self, y: &[Complex64], peaks: &WindowPeaks, offset: usize) -> TopK {
        let m = self.users();
        let n = self.dsp.params().n();
        let assignments = enumerate_sequences(peaks.len(), m, self.config.strategy);
        if assignments.is_empty() {
            return TopK::default();
        }
        // Cache index of each (user, peak).
        let mut keys: HashMap<(usize, usize), usize> = HashMap::new();
        let mut symbol_of = vec![vec![0usize; peaks.len()]; m];
        let mut cache: Vec<Vec<Complex64>> = Vec::new();
        for (u, row) in symbol_of.iter_mut().enumerate() {
            for (v, slot) in row.iter_mut().enumerate() {
                let s = symbol_from_peak(peaks.bins[v], self.shifts[u], n);
                *slot = s;
                keys.entry((u, s)).or_insert_with(|| {
                    let w = self.models[u].window(s, offset, self.dsp);
                    cache.push(dechirp_truncated(&w, self.dsp, self.trunc));
                    cache.len() - 1
                });
            }
        }
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(u, v)| u.conj() * v).sum() };
        let c = cache.len();
        let mut gram = vec![vec![0.0f64; c]; c];
        for a in 0..c {
            for b in a..c {
                let g = dot(&cache[a], &cache[b]).re;
                gram[a][b] = g;
                gram[b][a] = g;
            }
        }
        let corr: Vec<f64> = cache.iter().map(|s| dot(s, y).re).collect();
        let energy: f64 = y.iter().map(Complex64::norm_sqr).sum();
        let mut scored: Vec<(f64, &Vec<usize>)> = assignments
            .iter()
            .map(|a| {
                let idx: Vec<usize> = a
                    .iter()
                    .enumerate()
                    .map(|(u, &v)| keys[&(u, symbol_of[u][v])])
                    .collect();
                let cross: f64 = idx.iter().map(|&i| idx.iter().map(|&j| gram[i][j]).sum::<f64>()).sum();
                let fit: f64 = idx.iter().map(|&i| corr[i]).sum();
                let dist = (energy - 2.0 * fit + cross).max(0.0);
                (-dist, a)
            })
            .collect();
        // Stable sort keeps enumeration order among exact ties.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut spectra: HashMap<(usize, usize), Vec<Complex64>> = keys
            .iter()
            .map(|(&k, &i)| (k, cache[i].clone()))
            .collect();
        let mut out: Vec<CandidateSequence> = Vec::new();
        for (loglik, a) in scored.iter().take(REFINE_TOP.max(self.config.top_k)) {
            let symbols: Vec<usize> = a.iter().enumerate().map(|(u, &v)| symbol_of[u][v]).collect();
            let (symbols, loglik) = self.refine(y, symbols, *loglik, offset, &mut spectra);
            out.push(self.candidate(symbols, loglik));
        }
        for (loglik, a) in scored.iter().skip(REFINE_TOP.max(self.config.top_k)) {
            if out.len() >= self.config.top_k + REFINE_TOP {
                break;
            }
            let symbols = a.iter().enumerate().map(|(u, &v)| symbol_of[u][v]).collect();
            out.push(self.candidate(symbols, *loglik));
        }
        out.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
        let mut seen = std::collections::HashSet::new();
        out.retain(|c| seen.insert(c.symbols.clone()));
        out.truncate(self.config.top_k);
        TopK { candidates: out }
    }

    fn candidate(&self, symbols: Vec<usize>, loglik: f64) -> CandidateSequence {
        let n = self.dsp.params().n() as f64;
        CandidateSequence {
            assignment: symbols
                .iter()
                .zip(&self.shifts)
                .map(|(&s, &sh)| (s as f64 + sh).rem_euclid(n))
                .collect(),
            symbols,
            loglik,
        }
    }

    /// Local search around a candidate whose users sit on nearby tones.
    ///
    /// Close tones bias the peak positions of the magnitude spectrum by up
    /// to a couple of bins, so the symbols implied by the peaks can be off
    /// by one or two. Each user's symbol is nudged while the likelihood
    /// improves. Candidates whose tones are well apart are left alone.
    fn refine(
        &self,
        y: &[Complex64],
        mut symbols: Vec<usize>,
        mut loglik: f64,
        offset: usize,
        spectra: &mut HashMap<(usize, usize), Vec<Complex64>>,
    ) -> (Vec<usize>, f64) {
        let m = symbols.len();
        let n = self.dsp.params().n();
        let nf = n as f64;
        let tone = |u: usize, s: usize| s as f64 + self.shifts[u];
        let crowded = (0..m).tuple_combinations().any(|(a, b)| {
            dsp::ring_diff(tone(a, symbols[a]), tone(b, symbols[b]), nf).abs() < CROWDED_BINS
        });
        if !crowded {
            return (symbols, loglik);
        }
        for _ in 0..REFINE_PASSES {
            let mut moved = false;
            for u in 0..m {
                for d in [-2i64, -1, 1, 2] {
                    let s = (symbols[u] as i64 + d).rem_euclid(n as i64) as usize;
                    let mut trial = symbols.clone();
                    trial[u] = s;
                    for (v, &sv) in trial.iter().enumerate() {
                        spectra.entry((v, sv)).or_insert_with(|| {
                            dechirp_truncated(&self.models[v].window(sv, offset, self.dsp), self.dsp, self.trunc)
                        });
                    }
                    let parts: Vec<&[Complex64]> = trial
                        .iter()
                        .enumerate()
                        .map(|(v, &sv)| spectra[&(v, sv)].as_slice())
                        .collect();
                    let l = spectrum_loglik(y, &parts);
                    if l > loglik {
                        loglik = l;
                        symbols = trial;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
        (symbols, loglik)
    }

    /// All data windows of the packet.
    pub fn demod_packet(&self, samples: &[Complex64], start: usize) -> Result<Vec<TopK>> {
        (0..self.dsp.params().symbol_count())
            .map(|i| self.demod_window(samples, start, i))
            .collect()
    }
}
