//! CWT against a direct-convolution oracle and closed-form properties.

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdd_core::cwt::{center_frequency, morlet_cwt, morlet_response, morlet_sample, scales_for_band, to_spectrogram, ACCEL_BAND, AUDIO_BAND};
use sdd_core::dsp::{ACCEL_RATE, AUDIO_RATE};

/// Circular correlation with the sampled wavelet, summed over every wrap.
fn direct(x: &[f64], scale: f64) -> Vec<Complex64> {
    let n = x.len() as i64;
    let reach = (12.0 * scale).ceil() as i64;
    let taps: Vec<Complex64> = (-reach..=reach).map(|m| morlet_sample(scale, m as f64).conj()).collect();
    (0..n)
        .map(|b| {
            taps.iter()
                .zip(-reach..=reach)
                .map(|(t, m)| x[(b + m).rem_euclid(n) as usize] * t)
                .sum()
        })
        .collect()
}

#[test]
fn fft_cwt_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (band, rate) in [(ACCEL_BAND, ACCEL_RATE), (AUDIO_BAND, AUDIO_RATE), ((20.0, 400.0), ACCEL_RATE)] {
        let scales = scales_for_band(band.0, band.1, 32, rate).unwrap();
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = morlet_cwt(&x, rate, &scales).unwrap();
        for (r, &s) in scales.iter().enumerate() {
            for (c, d) in direct(&x, s).iter().enumerate() {
                let err = (fast.at(r, c) - d).norm();
                assert!(err <= 1e-6, "band {band:?} scale {s:.2} col {c}: {err:.2e}");
            }
        }
    }
}

#[test]
fn sine_peaks_at_nearest_center_frequency() {
    let rate = ACCEL_RATE;
    let scales = scales_for_band(20.0, 400.0, 32, rate).unwrap();
    let centers: Vec<f64> = scales.iter().map(|&s| center_frequency(s, rate)).collect();
    for &row in &[3usize, 10, 17, 25] {
        for f in [centers[row] * 0.99, centers[row], centers[row] * 1.01] {
            let x: Vec<f64> = (0..1600).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / rate).sin()).collect();
            let m = morlet_cwt(&x, rate, &scales).unwrap();
            let power = |r: usize| m.row(r)[400..1200].iter().map(|v| v.norm()).sum::<f64>();
            let peak = (0..scales.len()).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
            let nearest = (0..centers.len())
                .min_by(|&a, &b| (centers[a] - f).abs().total_cmp(&(centers[b] - f).abs()))
                .unwrap();
            assert_eq!(peak, nearest, "{f:.1} Hz");
            // The closed-form response agrees on the winning row.
            let omega = 2.0 * std::f64::consts::PI * f / rate;
            let by_formula = (0..scales.len())
                .max_by(|&a, &b| morlet_response(scales[a], omega).total_cmp(&morlet_response(scales[b], omega)))
                .unwrap();
            assert_eq!(by_formula, nearest);
        }
    }
}

#[test]
fn scale_examples() {
    let s = scales_for_band(1.0, 400.0, 32, ACCEL_RATE).unwrap();
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    let f: Vec<f64> = s.iter().map(|&v| center_frequency(v, ACCEL_RATE)).collect();
    let r0 = f[1] / f[0];
    assert!(f.windows(2).all(|w| ((w[1] / w[0]) / r0 - 1.0).abs() < 1e-9));
    let pair = scales_for_band(200.0, 400.0, 2, ACCEL_RATE).unwrap();
    assert!((center_frequency(pair[0], ACCEL_RATE) / 400.0 - 1.0).abs() < 1e-9);
    assert!((center_frequency(pair[1], ACCEL_RATE) / 200.0 - 1.0).abs() < 1e-9);
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cwt_is_linear(x in signal(128), y in signal(128)) {
        let scales = scales_for_band(5.0, 300.0, 12, ACCEL_RATE).unwrap();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let (cs, cx, cy) = (
            morlet_cwt(&sum, ACCEL_RATE, &scales).unwrap(),
            morlet_cwt(&x, ACCEL_RATE, &scales).unwrap(),
            morlet_cwt(&y, ACCEL_RATE, &scales).unwrap(),
        );
        let scale_of = (0..scales.len()).flat_map(|r| cs.row(r).iter().map(|v| v.norm())).fold(1e-300, f64::max);
        for r in 0..scales.len() {
            for c in 0..128 {
                let err = (cs.at(r, c) - cx.at(r, c) - cy.at(r, c)).norm();
                prop_assert!(err <= 1e-9 * scale_of, "{err:e}");
            }
        }
    }

    #[test]
    fn nonconstant_signals_have_positive_energy(x in signal(64).prop_filter("nonconstant", |v| v.iter().any(|&a| a != v[0]))) {
        let scales = scales_for_band(ACCEL_BAND.0, ACCEL_BAND.1, 32, ACCEL_RATE).unwrap();
        let m = morlet_cwt(&x, ACCEL_RATE, &scales).unwrap();
        let energy: f64 = (0..scales.len()).flat_map(|r| m.row(r).iter().map(|v| v.norm_sqr())).sum();
        prop_assert!(energy > 0.0);
    }

    #[test]
    fn spectrogram_spans_unit_range(x in signal(256).prop_filter("nonconstant", |v| v.iter().any(|&a| a != v[0]))) {
        let scales = scales_for_band(ACCEL_BAND.0, ACCEL_BAND.1, 32, ACCEL_RATE).unwrap();
        let img = to_spectrogram(&morlet_cwt(&x, ACCEL_RATE, &scales).unwrap(), 32).unwrap();
        let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!((lo, hi), (0.0, 1.0));
    }
}
