//! Transmit chain: whitening, Hamming encoding, diagonal interleaving,
//! Gray mapping and CSS modulation, plus frame assembly.

use crc::{Crc, CRC_16_IBM_3740};

use crate::chirp;
use crate::error::{Error, Result};
use crate::hamming;
use crate::params::{IqBuffer, LoraParams, SFD_QUARTERS};

/// CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF).
const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

pub fn crc16(data: &[u8]) -> u16 {
    CRC16.checksum(data)
}

/// Append the big-endian CRC of `data`.
pub fn with_crc(data: &[u8]) -> Vec<u8> {
    let mut out = data.to_vec();
    out.extend_from_slice(&crc16(data).to_be_bytes());
    out
}

/// Check the trailing two CRC bytes of `payload`.
pub fn crc_ok(payload: &[u8]) -> bool {
    if payload.len() < 2 {
        return false;
    }
    let (data, tail) = payload.split_at(payload.len() - 2);
    crc16(data).to_be_bytes() == tail
}

/// Whitening keystream bytes.
///
/// LFSR `x^8+x^6+x^5+x^4+1` seeded with `0xFF`; each output byte is the
/// register contents before the register is clocked once.
pub fn keystream(len: usize) -> Vec<u8> {
    let mut state = 0xFFu8;
    (0..len)
        .map(|_| {
            let out = state;
            let fb = ((state >> 7) ^ (state >> 5) ^ (state >> 4) ^ (state >> 3)) & 1;
            state = (state << 1) | fb;
            out
        })
        .collect()
}

/// XOR a bit sequence (MSB-first within each byte) with the keystream.
pub fn whiten(bits: &[bool]) -> Vec<bool> {
    let ks = keystream(bits.len().div_ceil(8));
    bits.iter()
        .enumerate()
        .map(|(i, &b)| b ^ ((ks[i / 8] >> (7 - i % 8)) & 1 == 1))
        .collect()
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

/// Pack bits MSB-first; a trailing partial byte is dropped.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks_exact(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8))
        .collect()
}

/// Diagonal interleaver: `out[j][(i + j) mod sf] = block[i][j]`.
///
/// `block` holds `sf` codewords of `n_c` bits; the result holds `n_c`
/// symbols of `sf` bits.
pub fn interleave<T: Copy + Default>(block: &[Vec<T>], sf: usize, n_c: usize) -> Vec<Vec<T>> {
    let mut out = vec![vec![T::default(); sf]; n_c];
    for (i, cw) in block.iter().enumerate().take(sf) {
        for j in 0..n_c {
            out[j][(i + j) % sf] = cw[j];
        }
    }
    out
}

/// Inverse of [`interleave`].
pub fn deinterleave<T: Copy + Default>(syms: &[Vec<T>], sf: usize, n_c: usize) -> Vec<Vec<T>> {
    let mut out = vec![vec![T::default(); n_c]; sf];
    for (i, cw) in out.iter_mut().enumerate() {
        for (j, bit) in cw.iter_mut().enumerate() {
            *bit = syms[j][(i + j) % sf];
        }
    }
    out
}

fn gray_decode(mut v: usize) -> usize {
    let mut shift = v >> 1;
    while shift != 0 {
        v ^= shift;
        shift >>= 1;
    }
    v
}

/// Receiver-side Gray map: `s' = (s - 1) mod N`, `s_g = s' ^ (s' >> 1)`.
pub fn gray_map_rx(s: usize, n: usize) -> usize {
    let sp = (s + n - 1) % n;
    sp ^ (sp >> 1)
}

/// Transmit-side inverse of [`gray_map_rx`].
pub fn gray_encode_tx(v: usize, n: usize) -> usize {
    (gray_decode(v) + 1) % n
}

/// One modulated symbol at `osr` samples per chip.
pub fn css_modulate(s: usize, params: &LoraParams, osr: usize) -> IqBuffer {
    IqBuffer::new(
        chirp::symbol_chirp(params.n(), osr, s),
        osr as f64 * params.bw,
    )
}

/// Payload bits after padding and whitening, grouped into interleaver
/// blocks of `sf` nibbles each.
fn whitened_nibbles(payload: &[u8], params: &LoraParams) -> Vec<u8> {
    let sf = params.sf as usize;
    let blocks = params.symbol_count() / params.cr.n_c();
    let mut bits = bytes_to_bits(payload);
    bits.resize(blocks * sf * 4, false);
    whiten(&bits)
        .chunks_exact(4)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8))
        .collect()
}

/// Encode a payload (CRC included) to its `N_s` data symbol values.
pub fn encode_symbols(payload: &[u8], params: &LoraParams) -> Result<Vec<usize>> {
    if payload.len() != params.payload_bytes {
        return Err(Error::Domain(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            params.payload_bytes
        )));
    }
    let sf = params.sf as usize;
    let n_c = params.cr.n_c();
    let n = params.n();
    let mut symbols = Vec::with_capacity(params.symbol_count());
    for block in whitened_nibbles(payload, params).chunks_exact(sf) {
        let cws = block
            .iter()
            .map(|&nib| {
                let cw = hamming::encode(nib, n_c)?;
                Ok((0..n_c).map(|j| (cw >> (n_c - 1 - j)) & 1 == 1).collect())
            })
            .collect::<Result<Vec<Vec<bool>>>>()?;
        for row in interleave(&cws, sf, n_c) {
            let v = row
                .iter()
                .enumerate()
                .fold(0usize, |acc, (b, &bit)| acc | ((bit as usize) << b));
            symbols.push(gray_encode_tx(v, n));
        }
    }
    Ok(symbols)
}

/// Preamble, SFD and modulated data of one packet at `osr` samples per
/// chip.
pub fn build_frame(payload: &[u8], params: &LoraParams, osr: usize) -> Result<IqBuffer> {
    let symbols = encode_symbols(payload, params)?;
    Ok(frame_from_symbols(&symbols, params, osr))
}

/// Frame assembly from already-encoded data symbols.
pub fn frame_from_symbols(symbols: &[usize], params: &LoraParams, osr: usize) -> IqBuffer {
    let n = params.n();
    let len = params.symbol_len(osr);
    let up = chirp::upchirp(n, osr);
    let down = chirp::downchirp(n, osr);
    let mut out = Vec::with_capacity(params.data_offset(osr) + symbols.len() * len);
    for _ in 0..params.preamble_len {
        out.extend_from_slice(&up);
    }
    for _ in 0..SFD_QUARTERS / 4 {
        out.extend_from_slice(&down);
    }
    out.extend_from_slice(&down[..(SFD_QUARTERS % 4) * len / 4]);
    let table = chirp::ChirpTable::new(n, osr);
    for &s in symbols {
        out.extend((0..len).map(|i| table.sample(s, i)));
    }
    IqBuffer::new(out, osr as f64 * params.bw)
}
