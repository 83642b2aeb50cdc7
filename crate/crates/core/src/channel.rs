//! Channel model for superimposed coordinated transmissions: per-node
//! gain, carrier frequency offset and fractional delay, then AWGN.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chirp::ChirpTable;
use crate::error::{Error, Result};
use crate::params::{IqBuffer, LoraParams, NodeTxState, SFD_QUARTERS};

/// Delay in reconstruction-grid samples.
pub fn delay_samples(to: f64, params: &LoraParams) -> usize {
    (to * params.osr_rec as f64 * params.bw).round() as usize
}

fn check_node(node: &NodeTxState) -> Result<()> {
    if !(node.to >= 0.0) || !node.to.is_finite() {
        return Err(Error::Domain(format!("time offset {} s must be >= 0", node.to)));
    }
    if !node.cfo.is_finite() {
        return Err(Error::Domain("non-finite cfo".into()));
    }
    Ok(())
}

/// Impair one node's frame.
///
/// `frame` is on the reconstruction grid (`osr_rec` samples per chip). The
/// output is on the receiver grid, with the CFO rotation referenced to the
/// common time origin of the superposition.
pub fn apply_impairments(
    frame: &IqBuffer,
    node: &NodeTxState,
    params: &LoraParams,
) -> Result<IqBuffer> {
    let rate = params.osr_rec as f64 * params.bw;
    if (frame.rate - rate).abs() > 1e-6 * rate {
        return Err(Error::Domain(format!(
            "frame rate {} does not match reconstruction grid {rate}",
            frame.rate
        )));
    }
    impair_with(frame.len(), |k| frame.samples[k], node, params)
}

/// Same as [`apply_impairments`] on the frame carrying `symbols`, but only
/// the reconstruction-grid samples that survive decimation are evaluated.
pub fn impair_symbols(
    symbols: &[usize],
    node: &NodeTxState,
    params: &LoraParams,
    table: &ChirpTable,
) -> Result<IqBuffer> {
    let len = table.len();
    let pre = params.preamble_len * len;
    let sfd_end = pre + SFD_QUARTERS * len / 4;
    let total = sfd_end + symbols.len() * len;
    impair_with(
        total,
        |k| {
            if k < pre {
                table.base()[k % len]
            } else if k < sfd_end {
                table.base()[(k - pre) % len].conj()
            } else {
                let d = k - sfd_end;
                table.sample(symbols[d / len], d % len)
            }
        },
        node,
        params,
    )
}

fn impair_with(
    len: usize,
    sample: impl Fn(usize) -> Complex64,
    node: &NodeTxState,
    params: &LoraParams,
) -> Result<IqBuffer> {
    check_node(node)?;
    let dec = params.decimation();
    let shift = delay_samples(node.to, params);
    let out_len = (len + shift).div_ceil(dec);
    let rx_rate = params.osr_rx as f64 * params.bw;
    let gain = node.gain();
    let step = node.cfo / rx_rate;
    let rot = Complex64::from_polar(1.0, TAU * step);
    let mut w = Complex64::new(1.0, 0.0);
    let samples = (0..out_len)
        .map(|m| {
            // Re-seed the rotation phasor periodically to bound drift.
            if m % 1024 == 0 {
                w = Complex64::from_polar(1.0, TAU * (step * m as f64).rem_euclid(1.0));
            }
            let k = m * dec;
            let v = if k < shift || k - shift >= len {
                Complex64::new(0.0, 0.0)
            } else {
                gain * sample(k - shift) * w
            };
            w *= rot;
            v
        })
        .collect();
    Ok(IqBuffer::new(samples, rx_rate))
}

/// Pointwise sum, shorter inputs zero-extended.
pub fn superimpose(frames: &[IqBuffer]) -> Result<IqBuffer> {
    let Some(first) = frames.first() else {
        return Err(Error::Domain("nothing to superimpose".into()));
    };
    if frames.iter().any(|f| f.rate != first.rate) {
        return Err(Error::Domain("mixed sample rates".into()));
    }
    let len = frames.iter().map(IqBuffer::len).max().unwrap_or(0);
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for f in frames {
        for (o, x) in out.iter_mut().zip(&f.samples) {
            *o += x;
        }
    }
    Ok(IqBuffer::new(out, first.rate))
}

/// Per-sample noise variance for a given in-band SNR.
pub fn noise_variance(snr_db: f64, ref_power: f64, params: &LoraParams) -> f64 {
    ref_power * params.osr_rx as f64 / 10f64.powf(snr_db / 10.0)
}

/// Add circular complex Gaussian noise of variance `sigma2` per sample.
pub fn add_noise<R: Rng + ?Sized>(signal: &mut IqBuffer, sigma2: f64, rng: &mut R) {
    if sigma2 <= 0.0 {
        return;
    }
    let sd = (sigma2 / 2.0).sqrt();
    for s in signal.samples.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *s += Complex64::new(re * sd, im * sd);
    }
}

/// Add AWGN at `snr_db` relative to `ref_power`, measured in the signal
/// bandwidth. An infinite SNR leaves the signal untouched.
pub fn add_awgn<R: Rng + ?Sized>(
    signal: &IqBuffer,
    snr_db: f64,
    ref_power: f64,
    params: &LoraParams,
    rng: &mut R,
) -> Result<IqBuffer> {
    if !(ref_power > 0.0) {
        return Err(Error::Domain("reference power must be positive".into()));
    }
    let mut out = signal.clone();
    if snr_db.is_finite() {
        add_noise(&mut out, noise_variance(snr_db, ref_power, params), rng);
    } else if snr_db < 0.0 {
        return Err(Error::Domain("snr of -inf".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tx;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::FftPlanner;

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
            ..Default::default()
        }
    }

    fn upchirp_rec(p: &LoraParams) -> IqBuffer {
        tx::css_modulate(0, p, p.osr_rec)
    }

    #[test]
    fn identity_impairment_decimates() {
        let p = small();
        let x = upchirp_rec(&p);
        let y = apply_impairments(&x, &node(Complex64::new(1.0, 0.0), 0.0, 0.0), &p).unwrap();
        assert_eq!(y.len(), x.len() / p.decimation());
        for (m, v) in y.samples.iter().enumerate() {
            assert!((v - x.samples[m * p.decimation()]).norm() < 1e-12);
        }
    }

    #[test]
    fn integer_delay_shifts() {
        let p = small();
        let x = upchirp_rec(&p);
        let one = Complex64::new(1.0, 0.0);
        let base = apply_impairments(&x, &node(one, 0.0, 0.0), &p).unwrap();
        let to = 3.0 / (p.osr_rx as f64 * p.bw);
        let y = apply_impairments(&x, &node(one, 0.0, to), &p).unwrap();
        assert_eq!(y.len(), base.len() + 3);
        for m in 0..3 {
            assert_eq!(y.samples[m], Complex64::new(0.0, 0.0));
        }
        for m in 0..base.len() {
            assert!((y.samples[m + 3] - base.samples[m]).norm() < 1e-12);
        }
    }

    #[test]
    fn cfo_moves_peak_by_bin_shift() {
        let p = LoraParams::default();
        let n = p.n();
        let x = upchirp_rec(&p);
        let y = apply_impairments(&x, &node(Complex64::new(1.0, 0.0), 5e3, 0.0), &p).unwrap();
        // Native-rate dechirp with 16x zero padding.
        let down = crate::chirp::downchirp(n, p.osr_rx);
        let pad = 16 * n * p.osr_rx;
        let mut buf = vec![Complex64::new(0.0, 0.0); pad];
        for (i, (a, b)) in y.samples.iter().zip(&down).enumerate() {
            buf[i] = a * b;
        }
        FftPlanner::new().plan_fft_forward(pad).process(&mut buf);
        let k = (0..pad)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        let (a, b, c) = (
            buf[k - 1].norm(),
            buf[k].norm(),
            buf[(k + 1) % pad].norm(),
        );
        let frac = 0.5 * (a - c) / (a - 2.0 * b + c);
        let bin = (k as f64 + frac) / 16.0;
        assert!((bin - 40.96).abs() < 0.05, "bin {bin}");
    }

    #[test]
    fn linear_in_gain() {
        let p = small();
        let x = upchirp_rec(&p);
        let a = Complex64::new(0.3, -1.7);
        let h = Complex64::new(0.8, 0.6);
        let y1 = apply_impairments(&x, &node(h, 1234.0, 3.3e-5), &p).unwrap();
        let y2 = apply_impairments(&x, &node(h * a, 1234.0, 3.3e-5), &p).unwrap();
        for (u, v) in y1.samples.iter().zip(&y2.samples) {
            assert!((u * a - v).norm() < 1e-12);
        }
    }

    #[test]
    fn cfo_phase_continuous_across_symbols() {
        let p = small();
        let cfo = 2500.0;
        let symbols = vec![3usize, 90, 17];
        let frame = tx::frame_from_symbols(&symbols, &p, p.osr_rec);
        let y = apply_impairments(&frame, &node(Complex64::new(1.0, 0.0), cfo, 0.0), &p).unwrap();
        let clean = apply_impairments(&frame, &node(Complex64::new(1.0, 0.0), 0.0, 0.0), &p).unwrap();
        let rate = p.osr_rx as f64 * p.bw;
        let l = p.window_len();
        let start = p.data_offset(p.osr_rx);
        for i in 0..symbols.len() - 1 {
            let a = start + (i + 1) * l - 1;
            let rot = |m: usize| (y.samples[m] / clean.samples[m]).arg();
            let step = (rot(a + 1) - rot(a)).rem_euclid(TAU);
            assert!((step - TAU * cfo / rate).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_path_matches_frame_path() {
        let p = small();
        let symbols = vec![0usize, 127, 64, 5];
        let table = ChirpTable::new(p.n(), p.osr_rec);
        let nd = node(Complex64::new(0.6, 0.8), -4100.0, 5.7e-5);
        let frame = tx::frame_from_symbols(&symbols, &p, p.osr_rec);
        let a = apply_impairments(&frame, &nd, &p).unwrap();
        let b = impair_symbols(&symbols, &nd, &p, &table).unwrap();
        assert_eq!(a.len(), b.len());
        for (u, v) in a.samples.iter().zip(&b.samples) {
            assert!((u - v).norm() < 1e-9);
        }
    }

    #[test]
    fn negative_delay_rejected() {
        let p = small();
        let x = upchirp_rec(&p);
        let r = apply_impairments(&x, &node(Complex64::new(1.0, 0.0), 0.0, -1e-6), &p);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn superimpose_properties() {
        let p = small();
        let x = tx::css_modulate(5, &p, 2);
        let y = tx::css_modulate(9, &p, 2);
        assert_eq!(superimpose(&[x.clone()]).unwrap(), x);
        let neg = IqBuffer::new(x.samples.iter().map(|c| -c).collect(), x.rate);
        assert!(superimpose(&[x.clone(), neg])
            .unwrap()
            .samples
            .iter()
            .all(|c| c.norm() == 0.0));
        assert_eq!(
            superimpose(&[x.clone(), y.clone()]).unwrap(),
            superimpose(&[y, x.clone()]).unwrap()
        );
        let other = IqBuffer::new(x.samples.clone(), 1.0);
        assert!(superimpose(&[x, other]).is_err());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let p = LoraParams::default();
        let sig = IqBuffer::zeros(1_000_000, 250e3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = add_awgn(&sig, 3.0, 1.0, &p, &mut rng).unwrap();
        let want = noise_variance(3.0, 1.0, &p);
        assert!((y.power() / want - 1.0).abs() < 0.01);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let small = IqBuffer::zeros(100, 250e3);
        assert_eq!(
            add_awgn(&small, 0.0, 1.0, &p, &mut r1).unwrap(),
            add_awgn(&small, 0.0, 1.0, &p, &mut r2).unwrap()
        );
        let clean = tx::css_modulate(1, &p, 2);
        assert_eq!(
            add_awgn(&clean, f64::INFINITY, 1.0, &p, &mut r1).unwrap(),
            clean
        );
    }
}
