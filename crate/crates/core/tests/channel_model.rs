use std::f64::consts::TAU;

use lora_mpr::{channel, tx, LoraParams, NodeTxState};
use num_complex::Complex64;
use proptest::prelude::*;

fn node(h: Complex64, cfo: f64, to: f64) -> NodeTxState {
    NodeTxState {
        h,
        cfo,
        to,
        power_db: 0.0,
        payload: vec![],
    }
}

fn small() -> LoraParams {
    LoraParams {
        sf: 7,
        ..LoraParams::default()
    }
}

fn frame(p: &LoraParams) -> lora_mpr::IqBuffer {
    let payload = tx::with_crc(b"0123456789");
    tx::build_frame(&payload, p, p.osr_rec).unwrap()
}

fn wrapped(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The CFO rotation runs on across symbol boundaries: dividing out the
    /// clean frame leaves a pure tone whose phase step is the same at every
    /// boundary as inside a symbol.
    #[test]
    fn cfo_phase_is_continuous_across_symbols(cfo in -5e3f64..5e3) {
        let p = small();
        let clean = channel::apply_impairments(&frame(&p), &node(Complex64::new(1.0, 0.0), 0.0, 0.0), &p).unwrap();
        let rot = channel::apply_impairments(&frame(&p), &node(Complex64::new(1.0, 0.0), cfo, 0.0), &p).unwrap();
        let rate = p.osr_rx as f64 * p.bw;
        let step = TAU * cfo / rate;
        let l = p.window_len();
        for i in 1..p.preamble_len + p.symbol_count() {
            let k = i * l;
            if k >= rot.len() {
                break;
            }
            let before = rot.samples[k - 1] / clean.samples[k - 1];
            let after = rot.samples[k] / clean.samples[k];
            prop_assert!(wrapped((after / before).arg() - step).abs() < 1e-9, "boundary {}", i);
        }
    }

    #[test]
    fn impairment_is_linear_in_gain(re in -2.0f64..2.0, im in -2.0f64..2.0, cfo in -5e3f64..5e3) {
        let p = small();
        let f = frame(&p);
        let a = Complex64::new(re, im);
        let one = channel::apply_impairments(&f, &node(Complex64::new(1.0, 0.0), cfo, 3e-5), &p).unwrap();
        let scaled = channel::apply_impairments(&f, &node(a, cfo, 3e-5), &p).unwrap();
        for (x, y) in one.samples.iter().zip(&scaled.samples) {
            prop_assert!((x * a - y).norm() < 1e-12);
        }
    }
}

#[test]
fn integer_receiver_delay_is_a_shift() {
    let p = small();
    let f = frame(&p);
    let base = channel::apply_impairments(&f, &node(Complex64::new(1.0, 0.0), 0.0, 0.0), &p).unwrap();
    let to = 3.0 / (p.osr_rx as f64 * p.bw);
    let moved = channel::apply_impairments(&f, &node(Complex64::new(1.0, 0.0), 0.0, to), &p).unwrap();
    for k in 0..3 {
        assert!(moved.samples[k].norm() < 1e-12);
    }
    for k in 3..base.len().min(moved.len()) {
        assert!((moved.samples[k] - base.samples[k - 3]).norm() < 1e-12);
    }
}

#[test]
fn identity_impairment_is_decimation() {
    let p = small();
    let f = frame(&p);
    let out = channel::apply_impairments(&f, &node(Complex64::new(1.0, 0.0), 0.0, 0.0), &p).unwrap();
    let dec = p.decimation();
    for (k, v) in out.samples.iter().enumerate() {
        assert!((v - f.samples[k * dec]).norm() < 1e-12);
    }
}

#[test]
fn negative_delay_rejected() {
    let p = small();
    assert!(channel::apply_impairments(&frame(&p), &node(Complex64::new(1.0, 0.0), 0.0, -1e-6), &p).is_err());
}
