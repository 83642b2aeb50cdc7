use lora_mpr::aggregate::{aggregate, AggregateFn};
use lora_mpr::decoder::{self, SoftSymbol};
use lora_mpr::demod::{symbol_from_peak, CandidateSequence, TopK};
use lora_mpr::{tx, CodingRate, LoraParams};
use proptest::prelude::*;

fn params(sf: u8, cr: CodingRate) -> LoraParams {
    LoraParams { sf, cr, ..LoraParams::default() }
}

#[test]
fn confident_soft_matches_hard_with_symbol_errors() {
    let p = LoraParams::default();
    let sf = p.sf as usize;
    let payload = tx::with_crc(b"0123456789");
    let clean = tx::encode_symbols(&payload, &p).unwrap();
    for w in 0..clean.len() {
        for delta in [1usize, 7, 300] {
            let mut syms = clean.clone();
            syms[w] = (syms[w] + delta) % p.n();
            let hard = decoder::hard_path(&syms, &p).unwrap();
            let soft: Vec<SoftSymbol> = syms.iter().map(|&s| SoftSymbol::from_value(s, sf)).collect();
            let soft = decoder::soft_decode(&soft, &p).unwrap();
            assert_eq!(hard, soft, "window {w} delta {delta}");
            assert!(hard.crc_ok);
        }
    }
}

fn one_candidate(symbol: usize) -> TopK {
    TopK {
        candidates: vec![CandidateSequence {
            assignment: vec![symbol as f64],
            symbols: vec![symbol],
            loglik: -3.5,
        }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// With a single candidate per window the soft path has nothing to
    /// weigh and must reproduce the hard path, whatever the symbol errors.
    #[test]
    fn single_candidate_soft_equals_hard(
        sf in 7u8..=10,
        n_c in 5u8..=8,
        data in proptest::collection::vec(any::<u8>(), 10),
        errors in proptest::collection::vec((any::<usize>(), any::<usize>()), 0..6),
    ) {
        let p = params(sf, CodingRate::new(n_c).unwrap());
        let mut syms = tx::encode_symbols(&tx::with_crc(&data), &p).unwrap();
        for (w, v) in errors {
            let w = w % syms.len();
            syms[w] = v % p.n();
        }
        let windows: Vec<TopK> = syms.iter().map(|&s| one_candidate(s)).collect();
        let hard = decoder::hard_path(&decoder::hard_symbols(&windows, 0), &p).unwrap();
        let soft = decoder::soft_path(&windows, 0, &p).unwrap();
        prop_assert_eq!(hard, soft);
    }

    #[test]
    fn aggregate_ignores_arrival_order(
        mut v in proptest::collection::vec(-300.0f64..300.0, 1..20),
        rot in any::<usize>(),
    ) {
        for f in AggregateFn::ALL {
            let a = aggregate(&v, f).unwrap();
            let mut w = v.clone();
            w.reverse();
            let k = rot % w.len();
            w.rotate_left(k);
            let b = aggregate(&w, f).unwrap();
            prop_assert_eq!(a.count, b.count);
            prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.abs().max(1.0));
        }
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(aggregate(&v, AggregateFn::Min).unwrap().value, v[0]);
        prop_assert_eq!(aggregate(&v, AggregateFn::Max).unwrap().value, *v.last().unwrap());
    }
}

#[test]
fn erased_windows_decode_as_zero_and_uniform() {
    let p = LoraParams::default();
    let syms = tx::encode_symbols(&tx::with_crc(b"0123456789"), &p).unwrap();
    let mut windows: Vec<TopK> = syms.iter().map(|&s| one_candidate(s)).collect();
    windows[3] = TopK::default();
    assert_eq!(decoder::hard_symbols(&windows, 0)[3], 0);
    // One erased window of eight at CR 4/8 costs one bit per codeword.
    let soft = decoder::soft_path(&windows, 0, &p).unwrap();
    assert!(soft.crc_ok);
}

#[test]
fn peak_to_symbol_example() {
    // Peak at bin 50, CFO of 40.96 bins, delay of 102.4 bins.
    assert_eq!(symbol_from_peak(50.0, 40.96 - 102.4, 1024), 111);
    assert_eq!(symbol_from_peak(0.5, 0.0, 1024), 0);
    assert_eq!(symbol_from_peak(-0.5, 0.0, 1024), 0);
    assert_eq!(symbol_from_peak(1023.6, 0.0, 1024), 0);
}
