//! Channel decoding of demodulated symbols, hard and soft.
//!
//! The hard path inverts the transmit chain on integer symbols. The soft
//! path turns each window's top candidates into per-bit probabilities,
//! pushes them through probabilistic versions of the Gray map, then
//! deinterleaves and decodes codewords with a soft syndrome decoder.

use crate::demod::TopK;
use crate::error::{Error, Result};
use crate::hamming::HammingDecoder;
use crate::params::LoraParams;
use crate::tx;

/// Per-bit probabilities of zero for one symbol; index 0 is the LSB.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSymbol {
    pub p_zero: Vec<f64>,
}

impl SoftSymbol {
    /// Deterministic probabilities of the bits of `value`.
    pub fn from_value(value: usize, sf: usize) -> Self {
        SoftSymbol {
            p_zero: (0..sf)
                .map(|n| if (value >> n) & 1 == 0 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Maximum-entropy symbol, used for erased windows.
    pub fn uniform(sf: usize) -> Self {
        SoftSymbol { p_zero: vec![0.5; sf] }
    }

    /// Hard decision, bit `n` set when `p_zero[n] < 0.5`.
    pub fn hard(&self) -> usize {
        self.p_zero
            .iter()
            .enumerate()
            .fold(0, |acc, (n, &p)| acc | (usize::from(p < 0.5) << n))
    }
}

/// Decoded payload of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPacket {
    pub payload: Vec<u8>,
    pub crc_ok: bool,
}

/// Bit probabilities from a user's candidate symbol values and their
/// log-likelihoods.
///
/// For each bit the candidates are split by that bit's value and their
/// log-likelihoods summed to `l0` and `l1`; the probability of zero is
/// `l1 / (l0 + l1)`, so the side with the more negative sum loses. A bit on
/// which every candidate agrees is certain; if both sums are zero the bit
/// is uninformative.
pub fn symbol_to_bit_probs(values: &[usize], logliks: &[f64], sf: usize) -> Result<SoftSymbol> {
    if values.is_empty() || values.len() != logliks.len() {
        return Err(Error::Domain(format!(
            "{} values with {} log-likelihoods",
            values.len(),
            logliks.len()
        )));
    }
    let p_zero = (0..sf)
        .map(|n| {
            let (mut l0, mut l1) = (0.0, 0.0);
            let (mut c0, mut c1) = (0usize, 0usize);
            for (&v, &l) in values.iter().zip(logliks) {
                if (v >> n) & 1 == 0 {
                    l0 += l;
                    c0 += 1;
                } else {
                    l1 += l;
                    c1 += 1;
                }
            }
            if c1 == 0 {
                1.0
            } else if c0 == 0 {
                0.0
            } else if l0 + l1 == 0.0 {
                0.5
            } else {
                (l1 / (l0 + l1)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(SoftSymbol { p_zero })
}

/// Probabilities of the bits of `(s - 1) mod N` given those of `s`.
///
/// Bit `n` flips exactly when every lower bit is zero (a borrow reaches
/// it); the LSB always flips. Bits are treated as independent.
pub fn soft_gray_shift(p: &SoftSymbol) -> SoftSymbol {
    let mut out = Vec::with_capacity(p.p_zero.len());
    let mut borrow = 1.0;
    for (n, &pn) in p.p_zero.iter().enumerate() {
        out.push(if n == 0 {
            1.0 - pn
        } else {
            (1.0 - pn) * borrow + pn * (1.0 - borrow)
        });
        borrow *= pn;
    }
    SoftSymbol { p_zero: out }
}

/// Probabilities of the bits of `s ^ (s >> 1)`: bit `n` is the XOR of bits
/// `n` and `n + 1`; the MSB passes through.
pub fn soft_gray_xor(p: &SoftSymbol) -> SoftSymbol {
    let q = &p.p_zero;
    let sf = q.len();
    SoftSymbol {
        p_zero: (0..sf)
            .map(|n| {
                if n + 1 < sf {
                    q[n] * q[n + 1] + (1.0 - q[n]) * (1.0 - q[n + 1])
                } else {
                    q[n]
                }
            })
            .collect(),
    }
}

/// Soft version of the receive-side Gray map.
pub fn soft_gray_map(p: &SoftSymbol) -> SoftSymbol {
    soft_gray_xor(&soft_gray_shift(p))
}

/// Undo whitening and padding on decoded nibbles and check the CRC.
fn finish(nibbles: &[u8], params: &LoraParams) -> DecodedPacket {
    let bits: Vec<bool> = nibbles
        .iter()
        .flat_map(|&nib| (0..4).rev().map(move |b| (nib >> b) & 1 == 1))
        .collect();
    let mut plain = tx::whiten(&bits);
    plain.truncate(params.payload_bytes * 8);
    let payload = tx::bits_to_bytes(&plain);
    let crc_ok = tx::crc_ok(&payload);
    DecodedPacket { payload, crc_ok }
}

fn check_len(len: usize, params: &LoraParams) -> Result<()> {
    if len != params.symbol_count() {
        return Err(Error::Domain(format!(
            "{len} symbols, expected {}",
            params.symbol_count()
        )));
    }
    Ok(())
}

/// Standard hard decoding of one user's symbols: Gray map, deinterleave,
/// Hamming decode, dewhiten, CRC.
pub fn hard_path(symbols: &[usize], params: &LoraParams) -> Result<DecodedPacket> {
    check_len(symbols.len(), params)?;
    let (sf, n_c, n) = (params.sf as usize, params.cr.n_c(), params.n());
    let dec = HammingDecoder::new(n_c)?;
    let mut nibbles = Vec::with_capacity(symbols.len() / n_c * sf);
    for block in symbols.chunks_exact(n_c) {
        let rows: Vec<Vec<bool>> = block
            .iter()
            .map(|&s| {
                let v = tx::gray_map_rx(s % n, n);
                (0..sf).map(|b| (v >> b) & 1 == 1).collect()
            })
            .collect();
        for cw in tx::deinterleave(&rows, sf, n_c) {
            let word = cw.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b));
            nibbles.push(dec.decode_hard(word));
        }
    }
    Ok(finish(&nibbles, params))
}

/// Soft decoding from per-symbol bit probabilities (before Gray mapping).
pub fn soft_decode(symbols: &[SoftSymbol], params: &LoraParams) -> Result<DecodedPacket> {
    check_len(symbols.len(), params)?;
    let (sf, n_c) = (params.sf as usize, params.cr.n_c());
    if let Some(bad) = symbols.iter().find(|s| s.p_zero.len() != sf) {
        return Err(Error::Domain(format!(
            "soft symbol with {} bits, expected {sf}",
            bad.p_zero.len()
        )));
    }
    let dec = HammingDecoder::new(n_c)?;
    let mut nibbles = Vec::with_capacity(symbols.len() / n_c * sf);
    for block in symbols.chunks_exact(n_c) {
        let rows: Vec<Vec<f64>> = block.iter().map(|s| soft_gray_map(s).p_zero).collect();
        for cw in tx::deinterleave(&rows, sf, n_c) {
            nibbles.push(dec.decode_soft(&cw));
        }
    }
    Ok(finish(&nibbles, params))
}

/// Soft decoding of one user from the per-window candidate lists.
/// Erased windows contribute uninformative bits.
pub fn soft_path(windows: &[TopK], node: usize, params: &LoraParams) -> Result<DecodedPacket> {
    let sf = params.sf as usize;
    let soft = windows
        .iter()
        .map(|w| {
            if w.is_erased() {
                Ok(SoftSymbol::uniform(sf))
            } else {
                let (values, logliks) = w.node_values(node);
                symbol_to_bit_probs(&values, &logliks, sf)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    soft_decode(&soft, params)
}

/// Hard decisions of one user; erased windows decode as symbol 0.
pub fn hard_symbols(windows: &[TopK], node: usize) -> Vec<usize> {
    windows
        .iter()
        .map(|w| w.hard().map_or(0, |c| c.symbols[node]))
        .collect()
}

/// Hamming-decode a single codeword from its bit probabilities; exposed for
/// callers that handle their own deinterleaving.
pub fn soft_hamming_decode(p_zero: &[f64], n_c: usize) -> Result<u8> {
    if p_zero.len() != n_c {
        return Err(Error::Domain(format!("{} bits for a {n_c}-bit code", p_zero.len())));
    }
    Ok(HammingDecoder::new(n_c)?.decode_soft(p_zero))
}
