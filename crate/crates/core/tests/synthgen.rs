//! Generator contracts measured on its output.

use std::collections::BTreeMap;

use sdd_core::eval::auc;
use sdd_core::pipeline::dataset::Extractor;
use sdd_core::synthgen::{
    builtin_template, gen_dataset, gen_event, plan_dataset, DatasetSpec, DEFAULT_NOISE_FLOOR, NATIVE_ACCEL_RATE,
    NATIVE_AUDIO_RATE,
};
use sdd_core::Label;

fn magnitude(accel: &[Vec<f32>; 3]) -> Vec<f64> {
    (0..accel[0].len())
        .map(|i| accel.iter().map(|c| (c[i] as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn dents_are_sharp_and_short() {
    for seed in 0..10 {
        let rec = gen_event(&builtin_template("dent").unwrap(), DEFAULT_NOISE_FLOOR, seed).unwrap();
        let mag = magnitude(&rec.accel);
        let rms = (mag.iter().map(|v| v * v).sum::<f64>() / mag.len() as f64).sqrt();
        let (peak_at, peak) = mag.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(peak / rms >= 10.0, "seed {seed}: peak/rms {}", peak / rms);

        let reach = (0.1 * NATIVE_ACCEL_RATE) as usize;
        let energy = |x: &[f32]| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let total: f64 = rec.accel.iter().map(|c| energy(c)).sum();
        let lo = peak_at.saturating_sub(reach);
        let hi = (peak_at + reach + 1).min(mag.len());
        let near: f64 = rec.accel.iter().map(|c| energy(&c[lo..hi])).sum();
        assert!(near / total >= 0.9, "seed {seed}: {:.3} of the energy near the peak", near / total);
    }
}

#[test]
fn scratches_ring_for_at_least_100_ms() {
    for seed in 0..10 {
        let rec = gen_event(&builtin_template("scratch").unwrap(), DEFAULT_NOISE_FLOOR, seed).unwrap();
        // 5 ms RMS envelope.
        let hop = (0.005 * NATIVE_AUDIO_RATE) as usize;
        let env: Vec<f64> = rec
            .audio
            .chunks(hop)
            .map(|c| (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        let peak = env.iter().copied().fold(0.0, f64::max);
        let above: Vec<usize> = (0..env.len()).filter(|&i| env[i] >= peak * 0.1).collect();
        let seconds = (above.last().unwrap() - above[0] + 1) as f64 * hop as f64 / NATIVE_AUDIO_RATE;
        assert!(seconds >= 0.1, "seed {seed}: {seconds:.3} s");
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    for kind in ["dent", "scratch", "Pothole"] {
        let t = builtin_template(kind).unwrap();
        assert_eq!(gen_event(&t, DEFAULT_NOISE_FLOOR, 4).unwrap(), gen_event(&t, DEFAULT_NOISE_FLOOR, 4).unwrap());
    }
    let spec = DatasetSpec { n_damage: 3, imbalance: Some(2.0), ..DatasetSpec::default() };
    let (a, b) = (gen_dataset(&spec).unwrap(), gen_dataset(&spec).unwrap());
    assert_eq!(a.recordings, b.recordings);
}

#[test]
fn ten_dents_at_forty_to_one_plan_400_backgrounds() {
    let spec = DatasetSpec { n_damage: 10, imbalance: Some(40.0), ..DatasetSpec::default() };
    let m = plan_dataset(&spec).unwrap();
    assert_eq!(m.entries.iter().filter(|e| e.label == Label::Background).count(), 400);
}

#[test]
fn seeds_change_waveforms_not_structure() {
    let base = DatasetSpec { n_damage: 4, imbalance: Some(5.0), ..DatasetSpec::default() };
    let other = DatasetSpec { seed: base.seed + 1, ..base.clone() };
    let (a, b) = (gen_dataset(&base).unwrap(), gen_dataset(&other).unwrap());
    let shape = |d: &sdd_core::synthgen::GeneratedDataset| {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for e in &d.manifest.entries {
            *counts.entry((format!("{:?}", e.label), e.category.clone())).or_default() += 1;
        }
        (d.manifest.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), counts)
    };
    assert_eq!(shape(&a), shape(&b));
    assert!(a.recordings.iter().zip(&b.recordings).all(|(x, y)| x.audio != y.audio && x.accel != y.accel));
}

/// One pass over the default corpus: trigger count, labels, the CWT stage
/// and the band-energy baseline.
#[test]
fn default_corpus_contracts() {
    let data = gen_dataset(&DatasetSpec::default()).unwrap();
    let ex = Extractor::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (rec, entry) in data.recordings.iter().zip(&data.manifest.entries) {
        let samples = ex.samples(rec).unwrap();
        assert_eq!(samples.len(), 1, "{}: {} windows", rec.id, samples.len());
        let (w, s) = &samples[0];
        assert_eq!((w.label, &w.category), (entry.label, &entry.category), "{}", rec.id);
        assert_eq!(s.label, entry.label);
        let rms = (w.audio.iter().map(|v| v * v).sum::<f64>() / w.audio.len() as f64).sqrt();
        scores.push(rms);
        labels.push(entry.label == Label::Damage);
    }
    let a = auc(&scores, &labels).unwrap();
    assert!((0.7..=0.95).contains(&a), "band-energy AUC {a:.3}");
}
