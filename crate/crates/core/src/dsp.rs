//! Shared dechirp/FFT machinery, planned once per configuration.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::chirp::{self, ChirpTable};
use crate::error::{Error, Result};
use crate::params::LoraParams;

/// Zero-padding factor for fractional-bin estimation.
pub const FINE_PAD: usize = 16;

/// Read-only per-configuration state: receiver-grid reference chirps, the
/// reconstruction chirp table and FFT plans. Cheap to share across threads.
#[derive(Clone)]
pub struct Dsp {
    params: LoraParams,
    up: Vec<Complex64>,
    down: Vec<Complex64>,
    table: Arc<ChirpTable>,
    fft: Arc<dyn Fft<f64>>,
    fine_fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Dsp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dsp").field("params", &self.params).finish()
    }
}

impl Dsp {
    pub fn new(params: &LoraParams) -> Result<Self> {
        params.validate()?;
        let n = params.n();
        let l = params.window_len();
        let mut planner = FftPlanner::new();
        Ok(Dsp {
            params: params.clone(),
            up: chirp::upchirp(n, params.osr_rx),
            down: chirp::downchirp(n, params.osr_rx),
            table: Arc::new(ChirpTable::new(n, params.osr_rec)),
            fft: planner.plan_fft_forward(l),
            fine_fft: planner.plan_fft_forward(l * FINE_PAD),
        })
    }

    pub fn params(&self) -> &LoraParams {
        &self.params
    }

    /// Base upchirp on the receiver grid.
    pub fn up(&self) -> &[Complex64] {
        &self.up
    }

    /// Base downchirp on the receiver grid.
    pub fn down(&self) -> &[Complex64] {
        &self.down
    }

    /// Chirp table on the reconstruction grid.
    pub fn table(&self) -> &ChirpTable {
        &self.table
    }

    /// Zero the first `trunc` samples, multiply by `reference` and take the
    /// window-length FFT. Short windows are zero-extended.
    pub fn dechirp(&self, window: &[Complex64], reference: &[Complex64], trunc: usize) -> Vec<Complex64> {
        let l = self.up.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for (i, (x, r)) in window.iter().zip(reference).enumerate().take(l).skip(trunc) {
            buf[i] = x * r;
        }
        self.fft.process(&mut buf);
        buf
    }

    /// Dechirp followed by a zero-padded FFT of `FINE_PAD` times the window
    /// length.
    pub fn dechirp_fine(&self, window: &[Complex64], reference: &[Complex64]) -> Vec<Complex64> {
        let l = self.up.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); l * FINE_PAD];
        for (i, (x, r)) in window.iter().zip(reference).enumerate().take(l) {
            buf[i] = x * r;
        }
        self.fine_fft.process(&mut buf);
        buf
    }
}

/// Magnitude without the overflow guards of `hypot`; spectra here are far
/// from the extremes of the floating-point range.
#[inline]
pub fn mag(c: Complex64) -> f64 {
    c.norm_sqr().sqrt()
}

/// Sum the magnitudes of each tone and its alias one bandwidth below.
///
/// `spectrum` has `osr * n` bins; the output has `n`.
pub fn paired_magnitude(spectrum: &[Complex64], n: usize) -> Result<Vec<f64>> {
    let len = spectrum.len();
    if n == 0 || len < 2 * n || len % n != 0 {
        return Err(Error::Config(format!(
            "paired magnitude needs at least 2x oversampling ({len} bins for {n} chips)"
        )));
    }
    Ok((0..n)
        .map(|b| mag(spectrum[b]) + mag(spectrum[(b + len - n) % len]))
        .collect())
}

/// Same pairing over precomputed magnitudes.
pub fn paired_from_mags(mags: &[f64], n: usize) -> Vec<f64> {
    let len = mags.len();
    (0..n).map(|b| mags[b] + mags[(b + len - n) % len]).collect()
}

/// Offset of the vertex of the parabola through three equally spaced
/// samples, relative to the middle one.
pub fn parabolic(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        (0.5 * (a - c) / den).clamp(-0.5, 0.5)
    }
}

/// Cyclic local maxima: `x[i] > x[i-1] && x[i] >= x[i+1]`.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let len = x.len();
    if len < 3 {
        return (0..len).filter(|&i| x[i] > 0.0).collect();
    }
    (0..len)
        .filter(|&i| {
            let prev = x[(i + len - 1) % len];
            let next = x[(i + 1) % len];
            x[i] > prev && x[i] >= next
        })
        .collect()
}

/// Signed cyclic distance `a - b` on a ring of length `len`, in
/// `[-len/2, len/2)`.
pub fn ring_diff(a: f64, b: f64, len: f64) -> f64 {
    (a - b + len / 2.0).rem_euclid(len) - len / 2.0
}
