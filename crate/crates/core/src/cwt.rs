//! Morlet continuous wavelet transform, 32x32 spectrogram images and
//! dihedral augmentation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{EventWindow, ACCEL_CUTOFF_HZ, AUDIO_BANDS, MODEL_AUDIO_BAND};
use crate::{Error, Label, Result};

/// Morlet center angular frequency.
pub const OMEGA0: f64 = 6.0;
/// Side length of the spectrogram images.
pub const SPEC_SIZE: usize = 32;
pub const SPEC_PIXELS: usize = SPEC_SIZE * SPEC_SIZE;
pub const ACCEL_BAND: (f64, f64) = (1.0, ACCEL_CUTOFF_HZ);
pub const AUDIO_BAND: (f64, f64) = AUDIO_BANDS[MODEL_AUDIO_BAND];

/// Row-major `rows x cols` complex matrix; rows are scales, columns time.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CwtMatrix {
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }
}

/// Center frequency in Hz of a Morlet wavelet at `scale` samples.
pub fn center_frequency(scale: f64, sample_rate: f64) -> f64 {
    OMEGA0 * sample_rate / (2.0 * PI * scale)
}

/// Scale in samples whose center frequency is `freq`.
pub fn scale_for_frequency(freq: f64, sample_rate: f64) -> f64 {
    OMEGA0 * sample_rate / (2.0 * PI * freq)
}

/// Fourier transform of the continuous Morlet wavelet
/// `pi^(-1/4) s^(-1/2) exp(i w0 t/s) exp(-(t/s)^2/2)` at angular frequency
/// `omega` (radians per sample), for `scale` in samples.
pub fn morlet_response(scale: f64, omega: f64) -> f64 {
    let x = scale * omega - OMEGA0;
    PI.powf(-0.25) * (2.0 * PI * scale).sqrt() * (-0.5 * x * x).exp()
}

/// DFT of the sampled wavelet at `omega`: the continuous transform summed
/// over its aliases (Poisson summation). Images beyond two periods are
/// below double precision for any scale of at least one sample.
pub fn sampled_morlet_response(scale: f64, omega: f64) -> f64 {
    (-2..=2).map(|j| morlet_response(scale, omega + 2.0 * PI * j as f64)).sum()
}

/// Time-domain Morlet wavelet sample at offset `n` (samples).
pub fn morlet_sample(scale: f64, n: f64) -> Complex64 {
    let t = n / scale;
    Complex64::from_polar(PI.powf(-0.25) / scale.sqrt() * (-0.5 * t * t).exp(), OMEGA0 * t)
}

/// CWT by FFT correlation: each row is `IDFT(DFT(x) * conj(psi_hat_s))`
/// with `psi_hat_s` the DFT of the sampled wavelet, so the result equals
/// circular correlation with [`morlet_sample`].
pub fn morlet_cwt(signal: &[f64], sample_rate: f64, scales: &[f64]) -> Result<CwtMatrix> {
    if signal.len() < 8 {
        return Err(Error::invalid("CWT needs at least 8 samples"));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("CWT scale {s} is not positive")));
    }
    let n = signal.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spectrum: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut spectrum);

    let omegas: Vec<f64> = (0..n)
        .map(|k| {
            let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            2.0 * PI * k / n as f64
        })
        .collect();
    let mut data = Vec::with_capacity(scales.len() * n);
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    let inv_n = 1.0 / n as f64;
    for &s in scales {
        for ((r, x), &w) in row.iter_mut().zip(&spectrum).zip(&omegas) {
            *r = x * sampled_morlet_response(s, w) * inv_n;
        }
        inv.process(&mut row);
        data.extend_from_slice(&row);
    }
    Ok(CwtMatrix {
        rows: scales.len(),
        cols: n,
        data,
    })
}

/// `n` scales whose center frequencies are log-spaced from `f_max` down to
/// `f_min`, so the scales increase.
pub fn scales_for_band(f_min: f64, f_max: f64, n: usize, sample_rate: f64) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(Error::invalid(format!(
            "band {f_min}..{f_max} Hz invalid for rate {sample_rate} Hz"
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two scales"));
    }
    let ratio = (f_min / f_max).ln();
    Ok((0..n)
        .map(|i| {
            let f = f_max * (ratio * i as f64 / (n - 1) as f64).exp();
            scale_for_frequency(f, sample_rate)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    AccelX,
    AccelY,
    AccelZ,
    Audio,
}

/// Normalized 32x32 time-frequency image. Row 0 is the highest frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
    pub channel_role: ChannelRole,
    /// Center frequency per row in Hz, descending.
    pub scale_axis: Vec<f64>,
    /// Start time of each pooled column in seconds, relative to the window.
    pub time_axis: Vec<f64>,
}

fn bin_of(index: usize, len: usize, bins: usize) -> usize {
    index * bins / len
}

/// Pools `|cwt|` into an `out_size x out_size` image by equal-bin means and
/// min-max normalizes it. A constant image becomes all zeros.
pub fn to_spectrogram(cwt: &CwtMatrix, out_size: usize) -> Result<Vec<f32>> {
    if cwt.rows == 0 || cwt.cols == 0 {
        return Err(Error::invalid("empty CWT matrix"));
    }
    if cwt.rows < out_size || cwt.cols < out_size {
        return Err(Error::invalid(format!(
            "CWT matrix {}x{} smaller than {out_size}x{out_size}",
            cwt.rows, cwt.cols
        )));
    }
    let mut sums = vec![0.0f64; out_size * out_size];
    let mut counts = vec![0usize; out_size * out_size];
    for r in 0..cwt.rows {
        let br = bin_of(r, cwt.rows, out_size);
        for (c, v) in cwt.row(r).iter().enumerate() {
            let idx = br * out_size + bin_of(c, cwt.cols, out_size);
            sums[idx] += v.norm();
            counts[idx] += 1;
        }
    }
    let pooled: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Ok(min_max(&pooled))
}

fn min_max(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (((v - lo) / range) as f32).clamp(0.0, 1.0)).collect()
}

/// Computes a spectrogram image for one channel over a frequency band.
pub fn spectrogram(
    signal: &[f64],
    sample_rate: f64,
    band: (f64, f64),
    role: ChannelRole,
) -> Result<Spectrogram> {
    let scales = scales_for_band(band.0, band.1, SPEC_SIZE, sample_rate)?;
    let cwt = morlet_cwt(signal, sample_rate, &scales)?;
    let values = to_spectrogram(&cwt, SPEC_SIZE)?;
    let scale_axis = scales.iter().map(|&s| center_frequency(s, sample_rate)).collect();
    let time_axis = (0..SPEC_SIZE)
        .map(|j| {
            let first = (j * signal.len()).div_ceil(SPEC_SIZE);
            first as f64 / sample_rate
        })
        .collect();
    Ok(Spectrogram {
        values,
        channel_role: role,
        scale_axis,
        time_axis,
    })
}

/// Model input: three acceleration images (X, Y, Z) and one audio image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    /// `3 x 32 x 32`, channel-major.
    pub accel: Vec<f32>,
    /// `1 x 32 x 32`.
    pub audio: Vec<f32>,
    pub label: Label,
    pub category: String,
    pub source_id: String,
}

impl SampleTensor {
    pub fn from_window(w: &EventWindow) -> Result<Self> {
        let roles = [ChannelRole::AccelX, ChannelRole::AccelY, ChannelRole::AccelZ];
        let mut accel = Vec::with_capacity(3 * SPEC_PIXELS);
        for (ch, role) in w.accel.iter().zip(roles) {
            accel.extend(spectrogram(ch, w.accel_rate, ACCEL_BAND, role)?.values);
        }
        let audio = spectrogram(&w.audio, w.audio_rate, AUDIO_BAND, ChannelRole::Audio)?.values;
        Ok(SampleTensor {
            accel,
            audio,
            label: w.label,
            category: w.category.clone(),
            source_id: w.source_id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augment {
    pub const ALL: [Augment; 5] = [Augment::Rot90, Augment::Rot180, Augment::Rot270, Augment::FlipH, Augment::FlipV];

    /// Source pixel for destination `(r, c)`.
    fn source(self, r: usize, c: usize) -> (usize, usize) {
        let last = SPEC_SIZE - 1;
        match self {
            // counter-clockwise
            Augment::Rot90 => (c, last - r),
            Augment::Rot180 => (last - r, last - c),
            Augment::Rot270 => (last - c, r),
            Augment::FlipH => (r, last - c),
            Augment::FlipV => (last - r, c),
        }
    }
}

fn transform_planes(data: &[f32], op: Augment) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(SPEC_PIXELS).zip(out.chunks_exact_mut(SPEC_PIXELS)) {
        for r in 0..SPEC_SIZE {
            for c in 0..SPEC_SIZE {
                let (sr, sc) = op.source(r, c);
                dst[r * SPEC_SIZE + c] = src[sr * SPEC_SIZE + sc];
            }
        }
    }
    out
}

/// Applies one spatial transform to every channel.
pub fn augment(t: &SampleTensor, op: Augment) -> SampleTensor {
    SampleTensor {
        accel: transform_planes(&t.accel, op),
        audio: transform_planes(&t.audio, op),
        ..t.clone()
    }
}

/// Seven distinct dihedral images of the sample: the identity, the five
/// named ops and the transpose.
pub fn augment_set(t: &SampleTensor) -> Vec<SampleTensor> {
    let mut out = Vec::with_capacity(7);
    out.push(t.clone());
    out.extend(Augment::ALL.iter().map(|&op| augment(t, op)));
    out.push(augment(&augment(t, Augment::Rot90), Augment::FlipH));
    out
}
