//! Static air-interface configuration and frame geometry.
//!
//! Everything here is immutable once built and is shared freely between
//! Monte Carlo workers.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of SFD downchirps, expressed in quarter symbols (2.25 symbols).
pub const SFD_QUARTERS: usize = 9;

/// Hamming code selection `(n_c, 4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CodingRate(u8);

impl CodingRate {
    pub const CR45: CodingRate = CodingRate(5);
    pub const CR46: CodingRate = CodingRate(6);
    pub const CR47: CodingRate = CodingRate(7);
    pub const CR48: CodingRate = CodingRate(8);

    pub const ALL: [CodingRate; 4] = [Self::CR45, Self::CR46, Self::CR47, Self::CR48];

    pub fn new(n_c: u8) -> Result<Self> {
        if (5..=8).contains(&n_c) {
            Ok(CodingRate(n_c))
        } else {
            Err(Error::Config(format!("codeword length {n_c} not in 5..=8")))
        }
    }

    /// Codeword length in bits.
    pub fn n_c(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for CodingRate {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        CodingRate::new(v)
    }
}

impl From<CodingRate> for u8 {
    fn from(cr: CodingRate) -> u8 {
        cr.0
    }
}

/// LoRa air-interface parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraParams {
    pub sf: u8,
    /// Bandwidth in Hz.
    pub bw: f64,
    pub cr: CodingRate,
    /// Receiver oversampling factor (samples per chip).
    pub osr_rx: usize,
    /// Oversampling factor of the reconstruction grid.
    pub osr_rec: usize,
    /// Number of preamble upchirps.
    pub preamble_len: usize,
    /// Payload length in bytes, CRC included.
    pub payload_bytes: usize,
}

impl Default for LoraParams {
    fn default() -> Self {
        LoraParams {
            sf: 10,
            bw: 125e3,
            cr: CodingRate::CR48,
            osr_rx: 2,
            osr_rec: 10,
            preamble_len: 10,
            payload_bytes: 12,
        }
    }
}

impl LoraParams {
    /// Default parameters with the given spreading factor and coding rate.
    pub fn with_sf_cr(sf: u8, cr: CodingRate) -> Result<Self> {
        let p = LoraParams {
            sf,
            cr,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(6..=12).contains(&self.sf) {
            return Err(Error::Config(format!("spreading factor {} not in 6..=12", self.sf)));
        }
        if ![125e3, 250e3, 500e3].contains(&self.bw) {
            return Err(Error::Config(format!("bandwidth {} Hz unsupported", self.bw)));
        }
        CodingRate::new(self.cr.0)?;
        if self.osr_rx < 2 {
            return Err(Error::Config("receiver oversampling must be at least 2".into()));
        }
        if self.osr_rec == 0 || self.osr_rec % self.osr_rx != 0 {
            return Err(Error::Config(format!(
                "reconstruction oversampling {} is not a multiple of {}",
                self.osr_rec, self.osr_rx
            )));
        }
        if self.preamble_len < 10 {
            return Err(Error::Config("preamble must hold at least 10 upchirps".into()));
        }
        if self.payload_bytes == 0 {
            return Err(Error::Config("payload must be at least one byte".into()));
        }
        Ok(())
    }

    /// Chips per symbol, `2^sf`.
    pub fn n(&self) -> usize {
        1 << self.sf
    }

    /// Symbol duration in seconds.
    pub fn ts(&self) -> f64 {
        self.n() as f64 / self.bw
    }

    /// Frequency sweep slope in Hz/s.
    pub fn slope(&self) -> f64 {
        self.bw / self.ts()
    }

    /// Samples per symbol on a grid with `osr` samples per chip.
    pub fn symbol_len(&self, osr: usize) -> usize {
        self.n() * osr
    }

    /// Receiver-grid window length.
    pub fn window_len(&self) -> usize {
        self.symbol_len(self.osr_rx)
    }

    /// Decimation factor from the reconstruction grid to the receiver grid.
    pub fn decimation(&self) -> usize {
        self.osr_rec / self.osr_rx
    }

    /// Number of encoded data symbols, interleaver padding included.
    pub fn symbol_count(&self) -> usize {
        let nibbles = 2 * self.payload_bytes;
        let sf = self.sf as usize;
        nibbles.div_ceil(sf) * self.cr.n_c()
    }

    /// Samples from frame start to the first data symbol.
    pub fn data_offset(&self, osr: usize) -> usize {
        self.preamble_len * self.symbol_len(osr) + SFD_QUARTERS * self.symbol_len(osr) / 4
    }

    /// Total frame length in samples.
    pub fn frame_len(&self, osr: usize) -> usize {
        self.data_offset(osr) + self.symbol_count() * self.symbol_len(osr)
    }

    /// Frame duration in seconds.
    pub fn packet_duration(&self) -> f64 {
        self.frame_len(1) as f64 / self.bw
    }

    /// Frequency and time offsets expressed as native FFT bin shifts.
    pub fn bin_shifts(&self, cfo: f64, to: f64) -> (f64, f64) {
        (self.n() as f64 * cfo / self.bw, to * self.bw)
    }
}

/// Physical limits on per-node offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelLimits {
    /// Maximum |CFO| in Hz.
    pub cfo_max: f64,
    /// Maximum time offset as a fraction of the symbol duration.
    pub to_max_frac: f64,
}

impl Default for ChannelLimits {
    fn default() -> Self {
        ChannelLimits {
            cfo_max: 5e3,
            to_max_frac: 0.1,
        }
    }
}

impl ChannelLimits {
    pub fn to_max(&self, params: &LoraParams) -> f64 {
        self.to_max_frac * params.ts()
    }

    /// Receiver samples zeroed at the head of each demodulation window.
    pub fn truncation(&self, params: &LoraParams) -> usize {
        let t = (self.to_max(params) * params.bw * params.osr_rx as f64 - 1e-9).ceil();
        (t.max(0.0) as usize).min(params.window_len())
    }
}

/// Complex baseband samples at a known rate.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBuffer {
    pub samples: Vec<Complex64>,
    /// Samples per second.
    pub rate: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, rate: f64) -> Self {
        IqBuffer { samples, rate }
    }

    pub fn zeros(len: usize, rate: f64) -> Self {
        IqBuffer {
            samples: vec![Complex64::new(0.0, 0.0); len],
            rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean power per sample.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Ground-truth channel of one transmitting node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTxState {
    /// Complex channel coefficient `[re, im]`.
    #[serde(with = "complex_serde")]
    pub h: Complex64,
    /// Carrier frequency offset in Hz.
    pub cfo: f64,
    /// Time offset in seconds.
    pub to: f64,
    /// Receive power relative to the reference user, in dB.
    pub power_db: f64,
    pub payload: Vec<u8>,
}

impl NodeTxState {
    /// Effective complex gain, `h * 10^(power_db/20)`.
    pub fn gain(&self) -> Complex64 {
        self.h * 10f64.powf(self.power_db / 20.0)
    }

    pub fn check(&self, limits: &ChannelLimits, params: &LoraParams) -> Result<()> {
        if self.cfo.abs() > limits.cfo_max {
            return Err(Error::Domain(format!("cfo {} Hz exceeds limit", self.cfo)));
        }
        if self.to < 0.0 || self.to > limits.to_max(params) * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("time offset {} s out of range", self.to)));
        }
        Ok(())
    }
}

pub(crate) mod complex_serde {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(c: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [c.re, c.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bin_shift_examples() {
        let p = LoraParams::default();
        let (d, t) = p.bin_shifts(5000.0, 0.0);
        assert_abs_diff_eq!(d, 40.96, epsilon = 1e-12);
        assert_eq!(t, 0.0);
        assert_eq!(p.bin_shifts(0.0, 0.0), (0.0, 0.0));
        let (d, t) = p.bin_shifts(0.0, 0.1 * p.ts());
        assert_eq!(d, 0.0);
        assert_abs_diff_eq!(t, 102.4, epsilon = 1e-9);
        assert_abs_diff_eq!(0.1 * p.ts(), 819.2e-6, epsilon = 1e-12);
    }

    #[test]
    fn bin_shifts_are_linear() {
        let p = LoraParams::default();
        let (a, b) = p.bin_shifts(1234.5, 3e-4);
        let (c, d) = p.bin_shifts(2.0 * 1234.5, 2.0 * 3e-4);
        assert_abs_diff_eq!(c, 2.0 * a, epsilon = 1e-9);
        assert_abs_diff_eq!(d, 2.0 * b, epsilon = 1e-9);
    }

    #[test]
    fn symbol_count_examples() {
        let mut p = LoraParams::default();
        assert_eq!(p.symbol_count(), 24);
        p.payload_bytes = 5;
        assert_eq!(p.symbol_count(), 8);
        p.sf = 12;
        p.payload_bytes = 20;
        assert_eq!(p.symbol_count(), 32);
    }

    #[test]
    fn symbol_count_monotone_and_multiple_of_codeword() {
        for sf in 6..=12 {
            for cr in CodingRate::ALL {
                let mut prev = 0;
                for bytes in 1..64 {
                    let p = LoraParams {
                        sf,
                        cr,
                        payload_bytes: bytes,
                        ..Default::default()
                    };
                    let n = p.symbol_count();
                    assert!(n >= prev);
                    assert_eq!(n % cr.n_c(), 0);
                    prev = n;
                }
            }
        }
    }

    #[test]
    fn geometry() {
        let p = LoraParams::default();
        assert_eq!(p.n(), 1024);
        assert_abs_diff_eq!(p.ts(), 8.192e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(p.slope(), 125e3 / 8.192e-3, epsilon = 1e-3);
        assert_eq!(p.frame_len(2), 74240);
        assert_eq!(p.decimation(), 5);
        assert_eq!(ChannelLimits::default().truncation(&p), 205);
    }

    #[test]
    fn validation() {
        assert!(LoraParams::default().validate().is_ok());
        let bad = LoraParams {
            osr_rx: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = LoraParams {
            osr_rec: 7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LoraParams {
            sf: 13,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(CodingRate::new(4).is_err());
    }
}
