//! Systematic `(n_c, 4)` Hamming family used by the LoRa coding chain.
//!
//! Codewords are stored in the low `n_c` bits of a `u8`, most significant
//! bit first: `[d1 d2 d3 d4 | parities]`, where `d1` is bit 3 of the
//! nibble.

use crate::error::{Error, Result};

fn check_n_c(n_c: usize) -> Result<()> {
    if (5..=8).contains(&n_c) {
        Ok(())
    } else {
        Err(Error::Config(format!("codeword length {n_c} not in 5..=8")))
    }
}

/// Encode one data nibble.
pub fn encode(nibble: u8, n_c: usize) -> Result<u8> {
    check_n_c(n_c)?;
    let d = |i: u8| (nibble >> (3 - i)) & 1;
    let (d1, d2, d3, d4) = (d(0), d(1), d(2), d(3));
    let data = nibble & 0xF;
    let cw = match n_c {
        5 => (data << 1) | (d1 ^ d2 ^ d3 ^ d4),
        6 => (data << 2) | ((d1 ^ d2 ^ d4) << 1) | (d1 ^ d3 ^ d4),
        _ => {
            let p1 = d1 ^ d2 ^ d4;
            let p2 = d1 ^ d3 ^ d4;
            let p3 = d2 ^ d3 ^ d4;
            let c7 = (data << 3) | (p1 << 2) | (p2 << 1) | p3;
            if n_c == 7 {
                c7
            } else {
                (c7 << 1) | (c7.count_ones() as u8 & 1)
            }
        }
    };
    Ok(cw)
}

/// Data nibble of a codeword, without correction.
pub fn data_of(cw: u8, n_c: usize) -> u8 {
    (cw >> (n_c - 4)) & 0xF
}

/// All 16 codewords of the `(n_c, 4)` code, indexed by data nibble.
pub fn codebook(n_c: usize) -> Result<[u8; 16]> {
    let mut book = [0u8; 16];
    for (d, slot) in book.iter_mut().enumerate() {
        *slot = encode(d as u8, n_c)?;
    }
    Ok(book)
}

/// Decoder for one code, with its codebook precomputed.
#[derive(Debug, Clone)]
pub struct HammingDecoder {
    n_c: usize,
    book: [u8; 16],
}

impl HammingDecoder {
    pub fn new(n_c: usize) -> Result<Self> {
        Ok(HammingDecoder {
            n_c,
            book: codebook(n_c)?,
        })
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    /// Hard decision decoding: equivalent to soft decoding with equal
    /// reliability on every bit.
    pub fn decode_hard(&self, word: u8) -> u8 {
        self.search(word, &[1.0; 8])
    }

    /// Soft decoding from per-bit probabilities of zero, indexed MSB first
    /// (index 0 is `d1`).
    ///
    /// The hard-thresholded word fixes a syndrome; every error pattern in
    /// that coset is scored by the summed reliability of the bits it flips,
    /// and the cheapest one is applied. When the cheapest pattern is not
    /// unique the raw data bits are returned uncorrected.
    pub fn decode_soft(&self, p_zero: &[f64]) -> u8 {
        debug_assert_eq!(p_zero.len(), self.n_c);
        let mut word = 0u8;
        let mut rel = [0.0f64; 8];
        for (j, &p) in p_zero.iter().enumerate() {
            let p = p.clamp(0.0, 1.0);
            if p < 0.5 {
                word |= 1 << (self.n_c - 1 - j);
            }
            rel[j] = (1.0 - 2.0 * p).abs();
        }
        self.search(word, &rel)
    }

    fn search(&self, word: u8, rel: &[f64; 8]) -> u8 {
        // Each codeword c corresponds to the coset member e = word ^ c.
        let mut best = f64::INFINITY;
        let mut best_data = data_of(word, self.n_c);
        let mut tie = false;
        for (d, &c) in self.book.iter().enumerate() {
            let e = word ^ c;
            let cost: f64 = (0..self.n_c)
                .filter(|&j| (e >> (self.n_c - 1 - j)) & 1 == 1)
                .map(|j| rel[j])
                .sum();
            let tol = 1e-12 * (1.0 + best.abs().min(cost.abs()));
            if cost < best - tol {
                best = cost;
                best_data = d as u8;
                tie = false;
            } else if (cost - best).abs() <= tol {
                tie = true;
            }
        }
        if tie {
            data_of(word, self.n_c)
        } else {
            best_data
        }
    }
}
