use std::f64::consts::PI;

use msrt_core::dsp::{
    correlation_heatmap, lowpass, notch_comb, preprocess, remove_dc, BiquadCascade, FilterSpec,
};
use proptest::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

const FS: f64 = 131_072.0;
// Four seconds: every integer or quarter-Hz tone falls exactly on a bin.
const N: usize = 1 << 19;

fn tone(f: f64, amp: f64) -> Vec<f64> {
    (0..N).map(|i| amp * (2.0 * PI * f * i as f64 / FS).sin()).collect()
}

/// Magnitude of the DFT bin nearest `f`.
fn bin_magnitude(x: &[f64], f: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let k = (f * x.len() as f64 / FS).round() as usize;
    buf[k].norm()
}

fn gain_db(x: &[f64], y: &[f64], f: f64) -> f64 {
    20.0 * (bin_magnitude(y, f) / bin_magnitude(x, f)).log10()
}

#[test]
fn notch_kills_mains() {
    let x = tone(50.0, 1.0);
    let y = notch_comb(&x, &FilterSpec::default()).unwrap();
    let g = gain_db(&x, &y, 50.0);
    assert!(g <= -40.0, "50 Hz gain {g:.1} dB");
}

#[test]
fn notch_keeps_passband() {
    let x = tone(5_000.0, 1.0);
    let y = notch_comb(&x, &FilterSpec::default()).unwrap();
    let g = gain_db(&x, &y, 5_000.0);
    assert!(g.abs() < 0.5, "5 kHz gain {g:.3} dB");
}

#[test]
fn lowpass_pass_and_stop() {
    let s = FilterSpec::default();
    let x = tone(5_000.0, 1.0);
    let g = gain_db(&x, &lowpass(&x, &s).unwrap(), 5_000.0);
    assert!(g.abs() < 1.0, "5 kHz gain {g:.3} dB");
    let x = tone(60_000.0, 1.0);
    let g = gain_db(&x, &lowpass(&x, &s).unwrap(), 60_000.0);
    assert!(g <= -20.0, "60 kHz gain {g:.1} dB");
}

#[test]
fn composite_keeps_only_passband_tone() {
    let s = FilterSpec::default();
    let a = tone(50.0, 1.0);
    let b = tone(5_000.0, 0.5);
    let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 3.0 + p + q).collect();
    let y = preprocess(&x, &s).unwrap();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!(mean.abs() <= 1e-12 * peak, "mean {mean:e}");
    assert!(20.0 * (bin_magnitude(&y, 50.0) / bin_magnitude(&a, 50.0)).log10() <= -40.0);
    assert!((20.0 * (bin_magnitude(&y, 5_000.0) / bin_magnitude(&b, 5_000.0)).log10()).abs() < 1.0);
}

#[test]
fn preprocess_idempotent_in_passband() {
    let s = FilterSpec::default();
    let x: Vec<f64> = tone(3_000.0, 1.0)
        .iter()
        .zip(tone(12_000.0, 0.3))
        .map(|(p, q)| p + q)
        .collect();
    let once = preprocess(&x, &s).unwrap();
    let twice = preprocess(&once, &s).unwrap();
    for f in [3_000.0, 12_000.0] {
        let g = gain_db(&once, &twice, f);
        assert!(g.abs() < 1.0, "{f} Hz: {g:.3} dB");
    }
}

#[test]
fn lowpass_impulse_settles() {
    let s = FilterSpec::default();
    let lp = BiquadCascade::butterworth_lowpass(4, s.lowpass_cutoff_hz, s.sample_rate_hz);
    let mut x = vec![0.0; 400];
    x[0] = 1.0;
    let h = lp.filter(&x);
    let last = h.iter().rposition(|v| v.abs() >= 1e-9).unwrap();
    // Slowest pole radius bounds the tail length.
    assert!(last < lp.settling_len() + 10, "{last} vs {}", lp.settling_len());
    assert!(last < 15 * (FS / s.lowpass_cutoff_hz) as usize);
}

#[test]
fn notch_magnitude_is_zero_at_centre() {
    let s = FilterSpec::default();
    let nc = BiquadCascade::notch_comb(&s);
    for f in s.notch_frequencies() {
        assert!(nc.magnitude(f, FS) < 1e-9, "{f}");
    }
}

#[test]
fn heatmap_of_periodic_sine() {
    let period = 64;
    let x: Vec<f64> = (0..period * 12)
        .map(|i| (2.0 * PI * i as f64 / period as f64).sin())
        .collect();
    let m = correlation_heatmap(&x, period, 16).unwrap();
    for i in 0..m.len() {
        for j in 0..m.len() {
            assert!(m[i][j].abs() <= 1.0 && m[i][j] == m[j][i]);
        }
    }
    // windows one period apart
    for i in 0..m.len() - 4 {
        assert!((1.0 - m[i][i + 4]).abs() < 1e-6);
    }
}

fn pulse(len: usize, width: f64) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|i| (-((i as f64 - c) / width).powi(2)).exp())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_phase_preserves_symmetry(half in 50usize..600, width in 1.0f64..40.0) {
        let x = pulse(2 * half + 1, width);
        let s = FilterSpec::default();
        for y in [lowpass(&x, &s).unwrap(), notch_comb(&x, &s).unwrap(), preprocess(&x, &s).unwrap()] {
            let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n = y.len();
            let err = (0..n).map(|i| (y[i] - y[n - 1 - i]).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-9 * peak, "asymmetry {err:e} vs peak {peak}");
        }
    }

    #[test]
    fn preprocess_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 300),
        b in prop::collection::vec(-1.0f64..1.0, 300),
        alpha in -3.0f64..3.0,
    ) {
        let s = FilterSpec::default();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| alpha * p + q).collect();
        let ya = preprocess(&a, &s).unwrap();
        let yb = preprocess(&b, &s).unwrap();
        let ym = preprocess(&mix, &s).unwrap();
        for i in 0..300 {
            prop_assert!((ym[i] - (alpha * ya[i] + yb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn remove_dc_zero_mean(x in prop::collection::vec(-1e4f64..1e4, 1..500), offset in -1e6f64..1e6) {
        let x: Vec<f64> = x.iter().map(|v| v + offset).collect();
        let y = remove_dc(&x).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        prop_assert!(mean.abs() <= 1e-12 * peak.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn heatmap_symmetric_bounded(x in prop::collection::vec(-1.0f64..1.0, 20..200), w in 2usize..20, stride in 1usize..8) {
        prop_assume!(w <= x.len());
        let m = correlation_heatmap(&x, w, stride).unwrap();
        for i in 0..m.len() {
            prop_assert_eq!(m[i][i], 1.0);
            for j in 0..m.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!((-1.0..=1.0).contains(&m[i][j]));
            }
        }
    }
}
