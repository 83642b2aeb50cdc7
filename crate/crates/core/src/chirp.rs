//! Chirp synthesis.
//!
//! Phases are computed in exact integer arithmetic modulo one cycle, so
//! long frames and large spreading factors do not accumulate rounding drift.

use std::f64::consts::TAU;

use num_complex::Complex64;

/// Sample `idx` of the folded chirp carrying symbol `s`, on a grid of `osr`
/// samples per chip, for `n` chips per symbol.
///
/// The instantaneous frequency starts at `f(s) - BW/2`, rises at `BW/Ts`
/// and folds down by `BW` once it reaches `BW/2`.
pub fn chirp_sample(n: usize, osr: usize, s: usize, idx: usize) -> Complex64 {
    // Phase in units of 1/(2 N osr^2) cycles.
    let n_i = n as i128;
    let osr_i = osr as i128;
    let s_i = (s % n) as i128;
    let k = idx as i128;
    let denom = 2 * n_i * osr_i * osr_i;
    let mut num = k * k + (2 * s_i * osr_i - n_i * osr_i) * k;
    if k >= (n_i - s_i) * osr_i {
        num -= 2 * n_i * osr_i * k;
    }
    let frac = num.rem_euclid(denom) as f64 / denom as f64;
    Complex64::from_polar(1.0, TAU * frac)
}

/// One full symbol, `osr * n` samples.
pub fn symbol_chirp(n: usize, osr: usize, s: usize) -> Vec<Complex64> {
    (0..n * osr).map(|i| chirp_sample(n, osr, s, i)).collect()
}

/// Base upchirp.
pub fn upchirp(n: usize, osr: usize) -> Vec<Complex64> {
    symbol_chirp(n, osr, 0)
}

/// Base downchirp (conjugate of the base upchirp).
pub fn downchirp(n: usize, osr: usize) -> Vec<Complex64> {
    upchirp(n, osr).into_iter().map(|c| c.conj()).collect()
}

/// Pre-modulated chirps on one sampling grid.
///
/// Every data chirp is the base upchirp cyclically shifted by `s` chips
/// times a constant phase, so a single table of the base chirp serves all
/// `N` symbols.
#[derive(Debug, Clone)]
pub struct ChirpTable {
    n: usize,
    osr: usize,
    base: Vec<Complex64>,
    rotation: Vec<Complex64>,
}

impl ChirpTable {
    pub fn new(n: usize, osr: usize) -> Self {
        let base = upchirp(n, osr);
        // x_s[k] = C[(k + s*osr) mod osr*N] * exp(j 2pi (s/2 - s^2/(2N)))
        let rotation = (0..n)
            .map(|s| {
                let s = s as i128;
                let d = 2 * n as i128;
                let num = (s * n as i128 - s * s).rem_euclid(d);
                Complex64::from_polar(1.0, TAU * num as f64 / d as f64)
            })
            .collect();
        ChirpTable {
            n,
            osr,
            base,
            rotation,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn osr(&self) -> usize {
        self.osr
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Sample `idx` of the chirp for symbol `s`.
    #[inline]
    pub fn sample(&self, s: usize, idx: usize) -> Complex64 {
        let len = self.base.len();
        let s = s % self.n;
        self.base[(idx + s * self.osr) % len] * self.rotation[s]
    }

    pub fn base(&self) -> &[Complex64] {
        &self.base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_magnitude() {
        for s in [0, 1, 77, 127] {
            for c in symbol_chirp(128, 4, s) {
                assert!((c.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_closed_form() {
        // Direct floating-point evaluation of the folded chirp.
        let (n, osr, bw) = (64usize, 3usize, 125e3);
        let ts = n as f64 / bw;
        let k = bw / ts;
        for s in [0usize, 5, 63] {
            let fs = s as f64 * bw / n as f64;
            let t_fold = (n - s) as f64 / bw;
            let x = symbol_chirp(n, osr, s);
            for (i, xi) in x.iter().enumerate() {
                let t = i as f64 / (osr as f64 * bw);
                let off = if t < t_fold - 1e-15 { bw / 2.0 } else { 1.5 * bw };
                let ph = TAU * (k / 2.0 * t + fs - off) * t;
                let want = Complex64::from_polar(1.0, ph);
                assert!((xi - want).norm() < 1e-9, "s={s} i={i}");
            }
        }
    }

    #[test]
    fn table_matches_direct_synthesis() {
        let table = ChirpTable::new(128, 10);
        for s in [0usize, 1, 64, 100, 127] {
            let direct = symbol_chirp(128, 10, s);
            for (i, d) in direct.iter().enumerate() {
                assert!((table.sample(s, i) - d).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn downchirp_dechirps_upchirp_to_dc() {
        let up = upchirp(256, 2);
        let down = downchirp(256, 2);
        for (u, d) in up.iter().zip(&down) {
            assert!((u * d - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }
}
