//! Resampling, filtering and triggering against independent references.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdd_core::dsp::{
    apply_filter, design_filter, detect_triggers, resample, FilterSpec, SensorRecording, ACCEL_CUTOFF_HZ, ACCEL_RATE,
    DEFAULT_FILTER_ORDER, DEFAULT_THRESHOLD, MEDIAN_SECONDS,
};
use sdd_core::synthgen::{builtin_template, gen_recording, NATIVE_ACCEL_RATE};

fn recording(accel: [Vec<f32>; 3], accel_rate: f64) -> SensorRecording {
    let n = accel[0].len();
    SensorRecording {
        id: "r".into(),
        accel,
        audio: vec![0.0; n * 5],
        accel_rate,
        audio_rate: accel_rate * 5.0,
        start_time: 0.0,
        metadata: BTreeMap::new(),
        events: Vec::new(),
    }
}

/// Trigger positions by definition: sort each median neighbourhood afresh.
fn brute_force_triggers(rec: &SensorRecording, threshold: f64, refractory: usize) -> Vec<usize> {
    let n = rec.accel_len();
    let mag: Vec<f64> = (0..n)
        .map(|i| rec.accel.iter().map(|c| (c[i] as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let w = (MEDIAN_SECONDS * rec.accel_rate) as usize;
    let mut out: Vec<usize> = Vec::new();
    for i in 0..n {
        let mut hood: Vec<f64> = mag[i.saturating_sub(w / 2)..(i + w - w / 2).min(n)].to_vec();
        hood.sort_by(f64::total_cmp);
        let m = hood.len();
        let median = if m % 2 == 1 { hood[m / 2] } else { 0.5 * (hood[m / 2 - 1] + hood[m / 2]) };
        let armed = out.last().is_none_or(|&l| i - l >= refractory);
        if mag[i] - median > threshold && armed {
            out.push(i);
        }
    }
    out
}

fn bumpy_recording(seed: u64, seconds: f64, rate: f64) -> SensorRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * rate) as usize;
    let mut accel: [Vec<f32>; 3] =
        std::array::from_fn(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32 * 0.3).collect());
    for _ in 0..rng.random_range(0..8) {
        let at = rng.random_range(0..n);
        let axis = rng.random_range(0..3);
        for k in 0..rng.random_range(1..20) {
            if at + k < n {
                accel[axis][at + k] += rng.random_range(-8.0f32..8.0);
            }
        }
    }
    recording(accel, rate)
}

#[test]
fn triggers_match_brute_force_scan() {
    for seed in 0..20 {
        let rec = bumpy_recording(seed, 2.0 + seed as f64 * 0.4, 200.0);
        for refractory_s in [0.05, 0.5, 1.0] {
            let got: Vec<usize> = detect_triggers(&rec, DEFAULT_THRESHOLD, 0.5, refractory_s)
                .unwrap()
                .iter()
                .map(|w| w.trigger_index)
                .collect();
            let refractory = (refractory_s * rec.accel_rate).round() as usize;
            assert_eq!(got, brute_force_triggers(&rec, DEFAULT_THRESHOLD, refractory), "seed {seed}");
        }
    }
}

#[test]
fn impulse_at_two_seconds_gives_one_window() {
    let mut rec = gen_recording("quiet".into(), &builtin_template("None").unwrap(), 0.01, 3).unwrap();
    rec.accel.iter_mut().for_each(|c| c.fill(0.0));
    let at = (2.0 * NATIVE_ACCEL_RATE) as usize;
    rec.accel[2][at] += (5.0 * DEFAULT_THRESHOLD) as f32;
    let windows = detect_triggers(&rec, DEFAULT_THRESHOLD, 1.0, 1.0).unwrap();
    assert_eq!(windows.len(), 1);
    assert!(windows[0].trigger_index.abs_diff(at) <= 1, "{}", windows[0].trigger_index);
}

#[test]
fn triggers_are_deterministic() {
    let rec = bumpy_recording(5, 6.0, 400.0);
    let a = detect_triggers(&rec, 2.0, 1.0, 0.2).unwrap();
    let b = detect_triggers(&rec, 2.0, 1.0, 0.2).unwrap();
    assert_eq!(a, b);
}

/// Share of signal power above `freq`, from a direct DFT.
fn power_above(x: &[f64], rate: f64, freq: f64) -> f64 {
    let n = x.len();
    let (mut high, mut total) = (0.0, 0.0);
    for k in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        let p = re * re + im * im;
        total += p;
        if k as f64 * rate / n as f64 > freq {
            high += p;
        }
    }
    high / total
}

#[test]
fn lowpassed_white_noise_keeps_little_power_above_400_hz() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<f64> = (0..2048 + 256).map(|_| rng.sample(StandardNormal)).collect();
    let lp = design_filter(&FilterSpec::lowpass(ACCEL_CUTOFF_HZ, DEFAULT_FILTER_ORDER, ACCEL_RATE)).unwrap();
    let y = apply_filter(&lp, &noise).unwrap();
    let ratio = power_above(&y[256..], ACCEL_RATE, 400.0);
    assert!(ratio <= 0.01, "{ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resampler_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 400),
        y in prop::collection::vec(-1.0f64..1.0, 400),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        rates in prop::sample::select(vec![(3200.0, 1600.0), (16000.0, 8000.0), (1000.0, 1600.0), (8000.0, 3000.0)]),
    ) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = resample(&mix, rates.0, rates.1).unwrap();
        let rx = resample(&x, rates.0, rates.1).unwrap();
        let ry = resample(&y, rates.0, rates.1).unwrap();
        prop_assert_eq!(lhs.len(), rx.len());
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * rx[i] + b * ry[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn designed_filters_are_stable(
        rate in prop::sample::select(vec![1600.0, 3200.0, 8000.0, 16000.0, 44100.0]),
        lo_frac in 0.001f64..0.45,
        width in 0.01f64..0.9,
        order in (1usize..=4).prop_map(|k| 2 * k),
        band in any::<bool>(),
    ) {
        let nyquist = rate / 2.0;
        let lo = lo_frac * nyquist;
        let hi = (lo + width * (nyquist - lo)).min(0.98 * nyquist);
        let spec = if band {
            FilterSpec::bandpass(lo, hi, order, rate)
        } else {
            FilterSpec::lowpass(hi, order, rate)
        };
        let f = design_filter(&spec).unwrap();
        prop_assert!(f.pole_magnitudes().iter().all(|&m| m < 1.0), "{:?}", f.pole_magnitudes());
        prop_assert!(f.is_stable());
    }

    #[test]
    fn trigger_scan_matches_brute_force(seed in 0u64..10_000, seconds in 1.0f64..10.0) {
        let rec = bumpy_recording(seed, seconds, 100.0);
        let got: Vec<usize> = detect_triggers(&rec, 1.5, 0.5, 0.3).unwrap().iter().map(|w| w.trigger_index).collect();
        prop_assert_eq!(got, brute_force_triggers(&rec, 1.5, 30));
    }
}
