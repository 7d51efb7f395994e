//! Resampling, Butterworth IIR filtering and threshold-triggered windowing of
//! raw sensor streams.
//!
//! Filtering is causal (zero initial state, no forward-backward pass) so the
//! same code path can run on a live stream.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Label, Result};

/// Acceleration sample rate the models expect.
pub const ACCEL_RATE: f64 = 1600.0;
/// Audio sample rate the models expect.
pub const AUDIO_RATE: f64 = 8000.0;
/// Acceleration low-pass cutoff.
pub const ACCEL_CUTOFF_HZ: f64 = 218.0;
/// Audio band-pass ranges; only [`MODEL_AUDIO_BAND`] is used for features.
pub const AUDIO_BANDS: [(f64, f64); 3] = [(200.0, 800.0), (800.0, 2000.0), (2000.0, 3000.0)];
pub const MODEL_AUDIO_BAND: usize = 2;
pub const DEFAULT_FILTER_ORDER: usize = 4;

pub const DEFAULT_THRESHOLD: f64 = 2.0;
pub const DEFAULT_WINDOW_SECONDS: f64 = 1.0;
pub const DEFAULT_REFRACTORY_SECONDS: f64 = 1.0;
/// Length of the running-median baseline used by the trigger statistic.
pub const MEDIAN_SECONDS: f64 = 1.0;

const KAISER_BETA: f64 = 8.6;
const RESAMPLE_TAPS: usize = 64;
const MAX_POLYPHASE_PHASES: usize = 4096;

/// A labeled interval inside a recording, in acceleration sample indices
/// (`start..end`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvent {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub category: String,
}

/// Synchronized 3-axis acceleration (m/s^2) and mono audio ([-1, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecording {
    pub id: String,
    pub accel: [Vec<f32>; 3],
    pub audio: Vec<f32>,
    pub accel_rate: f64,
    pub audio_rate: f64,
    pub start_time: f64,
    /// Free-form context such as weather, road and vehicle.
    pub metadata: BTreeMap<String, String>,
    pub events: Vec<LabeledEvent>,
}

impl SensorRecording {
    pub fn validate(&self) -> Result<()> {
        let n = self.accel[0].len();
        if self.accel.iter().any(|c| c.len() != n) {
            return Err(Error::invalid(format!(
                "recording {}: accel channels have unequal lengths",
                self.id
            )));
        }
        if !(self.accel_rate > 0.0) || !(self.audio_rate > 0.0) {
            return Err(Error::invalid(format!(
                "recording {}: sample rates must be positive",
                self.id
            )));
        }
        for ev in &self.events {
            if ev.start > ev.end || ev.end > n {
                return Err(Error::invalid(format!(
                    "recording {}: event {}..{} outside 0..{}",
                    self.id, ev.start, ev.end, n
                )));
            }
        }
        Ok(())
    }

    pub fn accel_len(&self) -> usize {
        self.accel[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.accel_len() as f64 / self.accel_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Lowpass,
    Bandpass,
}

/// Butterworth filter request. `cutoff_lo` is ignored for low-pass filters.
///
/// For band-pass filters `order` is the order of the low-pass prototype, as
/// in most filter-design libraries; the realized filter has twice as many
/// poles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoff_lo: f64,
    pub cutoff_hi: f64,
    pub order: usize,
    pub sample_rate: f64,
}

impl FilterSpec {
    pub fn lowpass(cutoff: f64, order: usize, sample_rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass,
            cutoff_lo: 0.0,
            cutoff_hi: cutoff,
            order,
            sample_rate,
        }
    }

    pub fn bandpass(lo: f64, hi: f64, order: usize, sample_rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass,
            cutoff_lo: lo,
            cutoff_hi: hi,
            order,
            sample_rate,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let nyquist = self.sample_rate / 2.0;
        if !(self.cutoff_hi > 0.0 && self.cutoff_hi < nyquist) {
            return Err(Error::invalid(format!(
                "cutoff {} Hz must lie in (0, {} Hz)",
                self.cutoff_hi, nyquist
            )));
        }
        if self.kind == FilterKind::Bandpass && !(self.cutoff_lo > 0.0 && self.cutoff_lo < self.cutoff_hi) {
            return Err(Error::invalid(format!(
                "band edges {}..{} Hz are not ordered",
                self.cutoff_lo, self.cutoff_hi
            )));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::invalid(format!("filter order {} must be even and positive", self.order)));
        }
        Ok(())
    }
}

/// Normalized second-order section:
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b: [1.0, 0.0, 0.0],
        a: [0.0, 0.0],
    };

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z_inv * self.a[0] + z2 * self.a[1];
        num / den
    }

    fn poles(&self) -> [Complex64; 2] {
        // z^2 + a1 z + a2 = 0
        let disc = Complex64::new(self.a[0] * self.a[0] - 4.0 * self.a[1], 0.0).sqrt();
        [(-self.a[0] + disc) / 2.0, (-self.a[0] - disc) / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    /// Rate the coefficients were designed for; used to map Hz to radians.
    pub sample_rate: f64,
}

impl BiquadCascade {
    pub fn identity(sample_rate: f64) -> Self {
        BiquadCascade {
            sections: vec![Biquad::IDENTITY],
            sample_rate,
        }
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    pub fn pole_magnitudes(&self) -> Vec<f64> {
        self.sections.iter().flat_map(|s| s.poles()).map(|p| p.norm()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.pole_magnitudes().iter().all(|&m| m < 1.0)
    }
}

/// Designs a Butterworth filter as a cascade of biquads using the bilinear
/// transform with frequency pre-warping.
pub fn design_filter(spec: &FilterSpec) -> Result<BiquadCascade> {
    spec.validate()?;
    let fs = spec.sample_rate;
    let warp = |f: f64| (PI * f / fs).tan();
    let n = spec.order;
    let prototype: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect();

    let (analog_poles, numerator, ref_freq) = match spec.kind {
        FilterKind::Lowpass => {
            let wc = warp(spec.cutoff_hi);
            let poles: Vec<_> = prototype.iter().map(|p| p * wc).collect();
            (poles, [1.0, 2.0, 1.0], 0.0)
        }
        FilterKind::Bandpass => {
            let lo = warp(spec.cutoff_lo);
            let hi = warp(spec.cutoff_hi);
            let bw = hi - lo;
            let w0sq = lo * hi;
            let mut poles = Vec::with_capacity(2 * n);
            for p in &prototype {
                let pb = p * bw;
                let disc = (pb * pb - 4.0 * w0sq).sqrt();
                poles.push((pb + disc) / 2.0);
                poles.push((pb - disc) / 2.0);
            }
            let center = fs / PI * w0sq.sqrt().atan();
            (poles, [1.0, 0.0, -1.0], center)
        }
    };

    let digital: Vec<Complex64> = analog_poles.iter().map(|s| (1.0 + s) / (1.0 - s)).collect();
    let mut sections: Vec<Biquad> = pair_poles(&digital)
        .into_iter()
        .map(|(p1, p2)| Biquad {
            b: numerator,
            a: [-(p1 + p2).re, (p1 * p2).re],
        })
        .collect();

    let mut cascade = BiquadCascade {
        sections: sections.clone(),
        sample_rate: fs,
    };
    let gain = cascade.response(ref_freq).norm();
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    cascade.sections = sections;
    Ok(cascade)
}

fn pair_poles(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    const IMAG_EPS: f64 = 1e-12;
    let mut pairs: Vec<_> = poles
        .iter()
        .filter(|p| p.im > IMAG_EPS)
        .map(|p| (*p, p.conj()))
        .collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= IMAG_EPS).map(|p| p.re).collect();
    real.sort_by(f64::total_cmp);
    for chunk in real.chunks(2) {
        let p2 = chunk.get(1).copied().unwrap_or(0.0);
        pairs.push((Complex64::new(chunk[0], 0.0), Complex64::new(p2, 0.0)));
    }
    pairs
}

/// Runs the cascade over `signal` in direct form II transposed, starting
/// from zero state.
pub fn apply_filter(cascade: &BiquadCascade, signal: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot filter an empty signal"));
    }
    let mut out = signal.to_vec();
    for s in &cascade.sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in out.iter_mut() {
            let x = *v;
            let y = s.b[0] * x + z1;
            z1 = s.b[1] * x - s.a[0] * y + z2;
            z2 = s.b[2] * x - s.a[1] * y;
            *v = y;
        }
    }
    Ok(out)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser_sinc(d: f64, cutoff: f64, half_width: f64, i0_beta: f64) -> f64 {
    let r = d / half_width;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let x = 2.0 * cutoff * d;
    let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
    2.0 * cutoff * sinc * window
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kernel taps for one fractional input position; `taps[j]` weights input
/// sample `base + j`.
fn phase_kernel(frac: f64, cutoff: f64, i0_beta: f64) -> [f64; RESAMPLE_TAPS] {
    let half = (RESAMPLE_TAPS / 2) as f64;
    let mut taps = [0.0; RESAMPLE_TAPS];
    for (j, tap) in taps.iter_mut().enumerate() {
        // offsets run from -(half-1) - frac to half - frac
        let d = (j as f64 - (half - 1.0)) - frac;
        *tap = kaiser_sinc(d, cutoff, half, i0_beta);
    }
    taps
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel (beta 8.6,
/// 64 taps per output phase). Output length is `floor(len * to / from)`.
///
/// Each output sample is normalized by the sum of the taps that fall inside
/// the signal, so DC is preserved everywhere, including the edges.
pub fn resample(signal: &[f64], from_rate: f64, to_rate: f64) -> Result<Vec<f64>> {
    if !(from_rate > 0.0) || !(to_rate > 0.0) {
        return Err(Error::invalid("resample rates must be positive"));
    }
    if signal.len() < 2 {
        return Err(Error::invalid("resample needs at least two samples"));
    }
    let ratio = to_rate / from_rate;
    let out_len = (signal.len() as f64 * ratio + 1e-9).floor() as usize;
    let cutoff = 0.5 * ratio.min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);
    let step = from_rate / to_rate;

    // Integral rates with a small reduced ratio share a polyphase table.
    let table = if from_rate.fract() == 0.0 && to_rate.fract() == 0.0 {
        let (f, t) = (from_rate as u64, to_rate as u64);
        let g = gcd(f, t);
        let (up, down) = (t / g, f / g);
        (up as usize <= MAX_POLYPHASE_PHASES).then(|| {
            let phases: Vec<_> = (0..up)
                .map(|p| phase_kernel(p as f64 / up as f64, cutoff, i0_beta))
                .collect();
            (up, down, phases)
        })
    } else {
        None
    };

    let n = signal.len() as isize;
    let half = (RESAMPLE_TAPS / 2) as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let (center, kernel_owned, kernel_ref);
        let kernel: &[f64; RESAMPLE_TAPS] = match &table {
            Some((up, down, phases)) => {
                let pos = i as u64 * *down as u64;
                center = (pos / *up as u64) as isize;
                kernel_ref = &phases[(pos % *up as u64) as usize];
                kernel_ref
            }
            None => {
                let t = i as f64 * step;
                center = t.floor() as isize;
                kernel_owned = phase_kernel(t - t.floor(), cutoff, i0_beta);
                &kernel_owned
            }
        };
        let base = center - (half - 1);
        if base >= 0 && base + RESAMPLE_TAPS as isize <= n {
            let window = &signal[base as usize..base as usize + RESAMPLE_TAPS];
            let (acc, norm) = kernel.iter().zip(window).fold((0.0, 0.0), |(a, s), (&w, &x)| (a + w * x, s + w));
            out.push(if norm.abs() > 1e-300 { acc / norm } else { 0.0 });
            continue;
        }
        let (mut acc, mut norm) = (0.0, 0.0);
        for (j, &w) in kernel.iter().enumerate() {
            let k = base + j as isize;
            if k >= 0 && k < n {
                acc += w * signal[k as usize];
                norm += w;
            }
        }
        out.push(if norm.abs() > 1e-300 { acc / norm } else { 0.0 });
    }
    Ok(out)
}

/// Resampling and filtering applied to every recording before triggering.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub accel_rate: f64,
    pub audio_rate: f64,
    pub accel_filter: BiquadCascade,
    pub audio_filters: Vec<BiquadCascade>,
    pub model_band: usize,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(ACCEL_RATE, AUDIO_RATE).expect("default filter specs are valid")
    }
}

impl Preprocessor {
    pub fn new(accel_rate: f64, audio_rate: f64) -> Result<Self> {
        let accel_filter = design_filter(&FilterSpec::lowpass(ACCEL_CUTOFF_HZ, DEFAULT_FILTER_ORDER, accel_rate))?;
        let audio_filters = AUDIO_BANDS
            .iter()
            .map(|&(lo, hi)| design_filter(&FilterSpec::bandpass(lo, hi, DEFAULT_FILTER_ORDER, audio_rate)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Preprocessor {
            accel_rate,
            audio_rate,
            accel_filter,
            audio_filters,
            model_band: MODEL_AUDIO_BAND,
        })
    }

    fn resample_f32(signal: &[f32], from: f64, to: f64) -> Result<Vec<f64>> {
        let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
        if from == to {
            Ok(x)
        } else {
            resample(&x, from, to)
        }
    }

    /// All three audio bands of an audio stream already at `audio_rate`.
    pub fn audio_bands(&self, audio: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.audio_filters.iter().map(|f| apply_filter(f, audio)).collect()
    }

    /// Resamples to the model rates, low-passes acceleration and keeps the
    /// model audio band. Event indices are rescaled to the new rate.
    pub fn apply(&self, rec: &SensorRecording) -> Result<SensorRecording> {
        rec.validate()?;
        let mut accel: [Vec<f32>; 3] = Default::default();
        for (dst, src) in accel.iter_mut().zip(&rec.accel) {
            let x = Self::resample_f32(src, rec.accel_rate, self.accel_rate)?;
            *dst = apply_filter(&self.accel_filter, &x)?.into_iter().map(|v| v as f32).collect();
        }
        let audio = Self::resample_f32(&rec.audio, rec.audio_rate, self.audio_rate)?;
        let audio = apply_filter(&self.audio_filters[self.model_band], &audio)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let scale = self.accel_rate / rec.accel_rate;
        let len = accel[0].len();
        let events = rec
            .events
            .iter()
            .map(|e| LabeledEvent {
                start: ((e.start as f64 * scale).floor() as usize).min(len),
                end: ((e.end as f64 * scale).ceil() as usize).min(len),
                ..e.clone()
            })
            .collect();
        Ok(SensorRecording {
            id: rec.id.clone(),
            accel,
            audio,
            accel_rate: self.accel_rate,
            audio_rate: self.audio_rate,
            start_time: rec.start_time,
            metadata: rec.metadata.clone(),
            events,
        })
    }
}

/// A trigger-aligned slice of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub accel: [Vec<f64>; 3],
    pub audio: Vec<f64>,
    pub accel_rate: f64,
    pub audio_rate: f64,
    /// Trigger position in acceleration samples of the source recording.
    pub trigger_index: usize,
    pub label: Label,
    pub category: String,
    pub source_id: String,
    /// Set when the requested window was longer than the recording and the
    /// full recording was returned instead.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerConfig {
    pub threshold: f64,
    pub window_seconds: f64,
    pub refractory_seconds: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            threshold: DEFAULT_THRESHOLD,
            window_seconds: DEFAULT_WINDOW_SECONDS,
            refractory_seconds: DEFAULT_REFRACTORY_SECONDS,
        }
    }
}

/// Acceleration magnitude per sample.
pub fn accel_magnitude(rec: &SensorRecording) -> Vec<f64> {
    let [x, y, z] = &rec.accel;
    x.iter()
        .zip(y)
        .zip(z)
        .map(|((&x, &y), &z)| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            (x * x + y * y + z * z).sqrt()
        })
        .collect()
}

/// Centered running median over `window` samples, clipped at the edges.
/// Even-sized neighbourhoods average the two middle values.
pub fn running_median(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let window = window.max(1);
    let before = window / 2;
    let after = window - before; // exclusive
    let mut sorted: Vec<f64> = Vec::with_capacity(window + 1);
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let want_lo = i.saturating_sub(before);
        let want_hi = (i + after).min(n);
        while hi < want_hi {
            let v = x[hi];
            let pos = sorted.partition_point(|&s| s.total_cmp(&v).is_lt());
            sorted.insert(pos, v);
            hi += 1;
        }
        while lo < want_lo {
            let v = x[lo];
            let pos = sorted.partition_point(|&s| s.total_cmp(&v).is_lt());
            sorted.remove(pos);
            lo += 1;
        }
        let m = sorted.len();
        out.push(if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        });
    }
    out
}

/// Median-subtracted acceleration magnitude, the statistic compared against
/// the trigger threshold.
pub fn trigger_statistic(rec: &SensorRecording) -> Vec<f64> {
    let mag = accel_magnitude(rec);
    let window = ((MEDIAN_SECONDS * rec.accel_rate) as usize).max(1);
    let med = running_median(&mag, window);
    mag.iter().zip(&med).map(|(m, b)| m - b).collect()
}

/// Indices at which triggers fire, honouring the refractory period.
pub fn trigger_indices(statistic: &[f64], threshold: f64, refractory_samples: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for (i, &d) in statistic.iter().enumerate() {
        if d > threshold && last.is_none_or(|l| i - l >= refractory_samples) {
            out.push(i);
            last = Some(i);
        }
    }
    out
}

fn slice_padded(x: &[f32], start: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|j| {
            let k = start + j;
            if k >= 0 && (k as usize) < x.len() {
                x[k as usize] as f64
            } else {
                0.0
            }
        })
        .collect()
}

fn label_for(rec: &SensorRecording, start: isize, len: usize) -> (Label, String) {
    let end = start + len as isize;
    let overlapping = rec
        .events
        .iter()
        .filter(|e| (e.start as isize) < end && (e.end as isize) > start);
    let mut chosen: Option<&LabeledEvent> = None;
    for e in overlapping {
        if chosen.is_none() || (e.label.is_damage() && !chosen.is_some_and(|c| c.label.is_damage())) {
            chosen = Some(e);
        }
    }
    match chosen {
        Some(e) => (e.label, e.category.clone()),
        None => (Label::Background, "None".to_string()),
    }
}

/// Cuts an event window of `window_seconds` centered on `trigger`.
pub fn window_at(rec: &SensorRecording, trigger: usize, window_seconds: f64) -> EventWindow {
    let w = (rec.accel_rate * window_seconds).floor() as usize;
    let v = (rec.audio_rate * window_seconds).floor() as usize;
    let start = trigger as isize - (w / 2) as isize;
    let audio_center = (trigger as f64 * rec.audio_rate / rec.accel_rate).round() as isize;
    let audio_start = audio_center - (v / 2) as isize;
    let (label, category) = label_for(rec, start, w);
    EventWindow {
        accel: [
            slice_padded(&rec.accel[0], start, w),
            slice_padded(&rec.accel[1], start, w),
            slice_padded(&rec.accel[2], start, w),
        ],
        audio: slice_padded(&rec.audio, audio_start, v),
        accel_rate: rec.accel_rate,
        audio_rate: rec.audio_rate,
        trigger_index: trigger,
        label,
        category,
        source_id: rec.id.clone(),
        truncated: false,
    }
}

/// Scans a recording for threshold crossings of the median-subtracted
/// acceleration magnitude and returns one window per trigger.
pub fn detect_triggers(
    rec: &SensorRecording,
    threshold: f64,
    window_seconds: f64,
    refractory_seconds: f64,
) -> Result<Vec<EventWindow>> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("trigger threshold must be positive"));
    }
    if !(window_seconds > 0.0) {
        return Err(Error::invalid("window length must be positive"));
    }
    rec.validate()?;
    if rec.accel_len() == 0 {
        return Ok(Vec::new());
    }
    if window_seconds > rec.duration() {
        log::warn!(
            "recording {}: window {window_seconds}s exceeds duration {:.3}s, returning full recording",
            rec.id,
            rec.duration()
        );
        let n = rec.accel_len();
        let (label, category) = label_for(rec, 0, n);
        return Ok(vec![EventWindow {
            accel: [
                slice_padded(&rec.accel[0], 0, n),
                slice_padded(&rec.accel[1], 0, n),
                slice_padded(&rec.accel[2], 0, n),
            ],
            audio: slice_padded(&rec.audio, 0, rec.audio.len()),
            accel_rate: rec.accel_rate,
            audio_rate: rec.audio_rate,
            trigger_index: 0,
            label,
            category,
            source_id: rec.id.clone(),
            truncated: true,
        }]);
    }
    let stat = trigger_statistic(rec);
    let refractory = (refractory_seconds.max(0.0) * rec.accel_rate).round() as usize;
    Ok(trigger_indices(&stat, threshold, refractory)
        .into_iter()
        .map(|i| window_at(rec, i, window_seconds))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    fn recording(magnitude: Vec<f32>, rate: f64) -> SensorRecording {
        let n = magnitude.len();
        SensorRecording {
            id: "t".into(),
            accel: [vec![0.0; n], vec![0.0; n], magnitude],
            audio: vec![0.0; (n as f64 * 5.0) as usize],
            accel_rate: rate,
            audio_rate: rate * 5.0,
            start_time: 0.0,
            metadata: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    #[test]
    fn resample_length_and_dc() {
        let x = vec![1.0; 1000];
        let y = resample(&x, 1000.0, 500.0).unwrap();
        assert_eq!(y.len(), 500);
        for v in &y[10..490] {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_identity_rate() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let y = resample(&x, 1000.0, 1000.0).unwrap();
        for (a, b) in x.iter().zip(&y).skip(32).take(300 - 64) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_rejects_bad_input() {
        assert!(resample(&[1.0, 2.0], 0.0, 10.0).is_err());
        assert!(resample(&[1.0, 2.0], 10.0, -1.0).is_err());
        assert!(resample(&[], 10.0, 5.0).is_err());
    }

    #[test]
    fn resample_tone_correlates_with_analytic_sine() {
        let x = sine(100.0, 8000.0, 8000);
        let y = resample(&x, 8000.0, 1600.0).unwrap();
        assert_eq!(y.len(), 1600);
        let reference = sine(100.0, 1600.0, 1600);
        let interior = 40..1560;
        let dot: f64 = interior.clone().map(|i| y[i] * reference[i]).sum();
        let ny: f64 = interior.clone().map(|i| y[i] * y[i]).sum::<f64>().sqrt();
        let nr: f64 = interior.map(|i| reference[i] * reference[i]).sum::<f64>().sqrt();
        assert!(dot / (ny * nr) >= 0.999, "correlation {}", dot / (ny * nr));
    }

    #[test]
    fn lowpass_218_response() {
        let c = design_filter(&FilterSpec::lowpass(218.0, 4, 1600.0)).unwrap();
        let at_cut = c.magnitude_db(218.0);
        assert!((-3.1..=-2.9).contains(&at_cut), "{at_cut}");
        assert!(c.magnitude_db(872.0) <= -40.0);
        assert!(c.is_stable());
        assert!((c.magnitude_db(0.0)).abs() < 1e-9);
    }

    #[test]
    fn bandpass_response() {
        let c = design_filter(&FilterSpec::bandpass(2000.0, 3000.0, 4, 8000.0)).unwrap();
        assert!(c.magnitude_db(2500.0) >= -1.0);
        assert!(c.magnitude_db(500.0) <= -40.0);
        for edge in [2000.0, 3000.0] {
            assert!((c.magnitude_db(edge) + 3.0103).abs() < 0.1);
        }
        assert!(c.is_stable());
    }

    #[test]
    fn filter_spec_errors() {
        assert!(design_filter(&FilterSpec::lowpass(900.0, 4, 1600.0)).is_err());
        assert!(design_filter(&FilterSpec::lowpass(100.0, 3, 1600.0)).is_err());
        assert!(design_filter(&FilterSpec::bandpass(300.0, 200.0, 4, 1600.0)).is_err());
    }

    #[test]
    fn lowpass_passband_is_monotone() {
        let c = design_filter(&FilterSpec::lowpass(218.0, 4, 1600.0)).unwrap();
        let mags: Vec<f64> = (0..=218).map(|f| c.response(f as f64).norm()).collect();
        assert!(mags.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn identity_and_zero_filtering() {
        let id = BiquadCascade::identity(100.0);
        let mut imp = vec![0.0; 16];
        imp[0] = 1.0;
        assert_eq!(apply_filter(&id, &imp).unwrap(), imp);
        let c = design_filter(&FilterSpec::lowpass(218.0, 4, 1600.0)).unwrap();
        assert!(apply_filter(&c, &[0.0; 64]).unwrap().iter().all(|&v| v == 0.0));
        assert!(apply_filter(&c, &[]).is_err());
    }

    #[test]
    fn running_median_matches_sorting() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 23) as f64).collect();
        for w in [1, 2, 7, 16] {
            let fast = running_median(&x, w);
            for i in 0..x.len() {
                let lo = i.saturating_sub(w / 2);
                let hi = (i + w - w / 2).min(x.len());
                let mut s = x[lo..hi].to_vec();
                s.sort_by(f64::total_cmp);
                let m = s.len();
                let expect = if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) };
                assert_eq!(fast[i], expect);
            }
        }
    }

    #[test]
    fn flat_recording_has_no_triggers() {
        let rec = recording(vec![0.0; 3200], 1600.0);
        assert!(detect_triggers(&rec, 2.0, 1.0, 1.0).unwrap().is_empty());
    }

    #[test]
    fn refractory_suppresses_second_impulse() {
        let mut mag = vec![0.0f32; 6400];
        mag[3200] = 10.0;
        mag[3200 + 80] = 10.0; // 50 ms later
        let rec = recording(mag, 1600.0);
        let w = detect_triggers(&rec, 2.0, 1.0, 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].trigger_index, 3200);
        assert_eq!(w[0].accel[2].len(), 1600);
        assert_eq!(w[0].audio.len(), 8000);
        assert_eq!(w[0].accel[2][800], 10.0);
        assert_eq!(w[0].label, Label::Background);
        assert_eq!(w[0].category, "None");
    }

    #[test]
    fn window_longer_than_recording_is_flagged() {
        let rec = recording(vec![0.0; 800], 1600.0);
        let w = detect_triggers(&rec, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].truncated);
        assert_eq!(w[0].accel[0].len(), 800);
    }

    #[test]
    fn windows_take_labels_from_overlapping_events() {
        let mut mag = vec![0.0f32; 6400];
        mag[300] = 10.0;
        let mut rec = recording(mag, 1600.0);
        rec.events.push(LabeledEvent {
            start: 290,
            end: 400,
            label: Label::Damage,
            category: "Dent".into(),
        });
        let w = detect_triggers(&rec, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].label, Label::Damage);
        assert_eq!(w[0].category, "Dent");
        // zero padding before the start of the recording
        // the window starts 500 samples before the recording: zero padded
        assert!(w[0].accel[2][..500].iter().all(|&v| v == 0.0));
        assert_eq!(w[0].accel[2][800], 10.0);
    }

    #[test]
    fn trigger_rejects_bad_parameters() {
        let rec = recording(vec![0.0; 100], 100.0);
        assert!(detect_triggers(&rec, 0.0, 0.5, 0.1).is_err());
        assert!(detect_triggers(&rec, 1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn preprocess_rescales_rates_and_events() {
        let n = 3200 * 2;
        let mut rec = recording(vec![0.5; n], 3200.0);
        rec.audio = vec![0.0; 16000 * 2];
        rec.audio_rate = 16000.0;
        rec.events.push(LabeledEvent {
            start: 3200,
            end: 3400,
            label: Label::Damage,
            category: "Dent".into(),
        });
        let p = Preprocessor::default().apply(&rec).unwrap();
        assert_eq!(p.accel_len(), 3200);
        assert_eq!(p.audio.len(), 16000);
        assert_eq!(p.events[0].start, 1600);
        assert_eq!(p.events[0].end, 1700);
    }
}
