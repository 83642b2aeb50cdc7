use lora_mpr::decoder::{self, SoftSymbol};
use lora_mpr::demod::{DemodConfig, Strategy};
use lora_mpr::receiver::{Receiver, ReceiverConfig};
use lora_mpr::{channel, hamming, tx, ChannelLimits, CodingRate, IqBuffer, LoraParams, NodeTxState};
use num_complex::Complex64;
use proptest::prelude::*;

fn params(sf: u8, cr: CodingRate) -> LoraParams {
    LoraParams::with_sf_cr(sf, cr).unwrap()
}

fn payload_for(p: &LoraParams, data: &[u8]) -> Vec<u8> {
    let mut d = data.to_vec();
    d.resize(p.payload_bytes - 2, 0);
    tx::with_crc(&d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn codec_round_trips_every_sf_cr(data in proptest::collection::vec(any::<u8>(), 10)) {
        for sf in 6..=12u8 {
            for cr in CodingRate::ALL {
                let p = params(sf, cr);
                let payload = payload_for(&p, &data);
                let syms = tx::encode_symbols(&payload, &p).unwrap();
                prop_assert_eq!(syms.len(), p.symbol_count());
                prop_assert!(syms.iter().all(|&s| s < p.n()));
                let hard = decoder::hard_path(&syms, &p).unwrap();
                prop_assert!(hard.crc_ok);
                prop_assert_eq!(&hard.payload, &payload);
                let soft: Vec<SoftSymbol> = syms.iter().map(|&s| SoftSymbol::from_value(s, sf as usize)).collect();
                prop_assert_eq!(decoder::soft_decode(&soft, &p).unwrap(), hard);
            }
        }
    }

    #[test]
    fn whitening_and_crc_round_trip(data in proptest::collection::vec(any::<u8>(), 0..40)) {
        let bits = tx::bytes_to_bits(&data);
        prop_assert_eq!(tx::whiten(&tx::whiten(&bits)), bits.clone());
        prop_assert_eq!(tx::bits_to_bytes(&bits), data.clone());
        let framed = tx::with_crc(&data);
        prop_assert!(tx::crc_ok(&framed));
    }
}

#[test]
fn symbol_count_is_monotone_and_whole_blocks() {
    for sf in 6..=12u8 {
        for cr in CodingRate::ALL {
            let mut last = 0;
            for bytes in 2..64 {
                let p = LoraParams { payload_bytes: bytes, ..params(sf, cr) };
                let ns = p.symbol_count();
                assert!(ns >= last);
                assert_eq!(ns % cr.n_c(), 0);
                last = ns;
            }
        }
    }
}

#[test]
fn frame_length_closed_form() {
    for sf in 6..=12u8 {
        let p = params(sf, CodingRate::CR45);
        for osr in [1, 2, 10] {
            let f = tx::build_frame(&payload_for(&p, b"abcdefghij"), &p, osr).unwrap();
            let sym = (1usize << sf) * osr;
            assert_eq!(f.len(), p.preamble_len * sym + 9 * sym / 4 + p.symbol_count() * sym);
        }
    }
}

#[test]
fn single_error_in_any_codeword_bit_is_corrected() {
    for n_c in [7, 8] {
        let dec = hamming::HammingDecoder::new(n_c).unwrap();
        for d in 0..16u8 {
            let cw = hamming::encode(d, n_c).unwrap();
            for j in 0..n_c {
                assert_eq!(dec.decode_hard(cw ^ (1 << j)), d);
            }
        }
    }
}

/// One unimpaired user through the full waveform receiver.
fn waveform_loopback(sf: u8, cr: CodingRate, data: &[u8]) {
    let p = params(sf, cr);
    let rx = Receiver::new(
        &p,
        ReceiverConfig {
            users: 1,
            limits: ChannelLimits::default(),
            demod: DemodConfig {
                strategy: Strategy::MFullPeak,
                top_k: 2,
            },
        },
    )
    .unwrap();
    let payload = payload_for(&p, data);
    let node = NodeTxState {
        h: Complex64::new(1.0, 0.0),
        cfo: 0.0,
        to: 0.0,
        power_db: 0.0,
        payload: payload.clone(),
    };
    let syms = tx::encode_symbols(&payload, &p).unwrap();
    let frame = channel::impair_symbols(&syms, &node, &p, rx.dsp().table()).unwrap();
    let l = p.window_len();
    let mut s = vec![Complex64::new(0.0, 0.0); 2 * l];
    s.extend(frame.samples);
    s.extend(vec![Complex64::new(0.0, 0.0); 2 * l]);
    let rec = rx.receive(&IqBuffer::new(s, frame.rate)).unwrap();
    assert_eq!(rec.nodes[0].symbols, syms, "sf {sf} cr {}", cr.n_c());
    assert_eq!(rec.nodes[0].hard.payload, payload);
    assert!(rec.nodes[0].hard.crc_ok && rec.nodes[0].soft.crc_ok);
}

#[test]
fn waveform_loopback_single_user() {
    for sf in [7u8, 10] {
        for cr in [CodingRate::CR45, CodingRate::CR48] {
            waveform_loopback(sf, cr, b"0123456789");
        }
    }
}
