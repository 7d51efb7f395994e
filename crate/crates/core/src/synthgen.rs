//! Deterministic synthetic rides: one labeled damage or confounder event
//! over a few seconds of ambient vibration and cabin noise.
//!
//! Every waveform parameter here (decay constants, frequencies, levels) is
//! a generator contract chosen to make the task learnable but not trivial;
//! none of it describes real vehicles. Acceleration is gravity-compensated
//! (m/s^2), audio is normalized to [-1, 1].

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::dsp::{LabeledEvent, SensorRecording};
use crate::{Error, Label, Result};

/// Native device rates; the preprocessor resamples to the model rates.
pub const NATIVE_ACCEL_RATE: f64 = 3200.0;
pub const NATIVE_AUDIO_RATE: f64 = 16000.0;
pub const RECORDING_SECONDS: f64 = 4.0;
/// Length of a standalone event segment and its onset within it.
pub const SEGMENT_SECONDS: f64 = 2.0;
pub const SEGMENT_ONSET: f64 = 0.5;
pub const DEFAULT_NOISE_FLOOR: f64 = 0.01;
pub const DEFAULT_IMBALANCE: f64 = 40.0;
/// Longest labeled interval: events must fit one trigger window.
pub const MAX_EVENT_SECONDS: f64 = 1.0;

pub const DAMAGE_TYPES: [&str; 3] = ["dent", "scratch", "underbody"];
pub const BACKGROUND_TYPES: [&str; 17] = [
    "None",
    "Pothole",
    "Speed Bump",
    "General Bump",
    "Curb Climb",
    "Vehicle hits Front Right Bumper",
    "Vehicle hits Front Left Bumper",
    "Vehicle hits Back Right Bumper",
    "Vehicle hits Back Left Bumper",
    "Vehicle hits Back Bumper",
    "Vehicle hits Front Bumper",
    "ABT-Bottom-Out",
    "Object Impact Front Left Bumper",
    "Object Impact Front Bumper",
    "Object Impact Back Bumper",
    "Roof Slap Front Left Outside",
    "Door Close Trunk",
];

const WEATHER: [&str; 3] = ["sunny", "cloudy", "rainy"];
const ROADS: [&str; 6] = ["asphalt", "stone road", "gravel", "mud", "dirt", "snow"];
const VEHICLES: [&str; 10] = [
    "Audi A5",
    "BMW i3",
    "BMW X1",
    "BMW 5 series",
    "Mercedes A45",
    "Mercedes GLA",
    "Mini",
    "Smart",
    "Volkswagen Polo",
    "Volkswagen Tiguan",
];

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn sample_log(self, rng: &mut ChaCha8Rng) -> f64 {
        (Span(self.0.ln(), self.1.ln())).sample(rng).exp()
    }

    fn valid(self, positive: bool) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1 && (!positive || self.0 > 0.0)
    }
}

/// Parametric shape of one event component; times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Waveform {
    /// `exp(-t/tau) sin(2 pi f t)`.
    DampedSine { freq: Span, tau: Span },
    /// White noise under `exp(-t/tau)`: a broadband click.
    NoiseBurst { tau: Span },
    /// White noise with 10 ms ramps, amplitude-modulated at `mod_freq`.
    ModulatedNoise { length: Span, mod_freq: Span, depth: f64 },
    /// One Hann-windowed sine: a smooth jolt.
    ToneBurst { freq: Span, length: Span },
    /// Constant-amplitude sine with 10 ms ramps.
    Ripple { freq: Span, length: Span },
}

/// A waveform with its peak amplitude and delay after the event onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub waveform: Waveform,
    pub amplitude: Span,
    /// Sample the amplitude log-uniformly.
    #[serde(default)]
    pub log_amplitude: bool,
    #[serde(default = "zero_span")]
    pub delay: Span,
}

fn zero_span() -> Span {
    Span(0.0, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTemplate {
    pub kind: String,
    pub label: Label,
    pub accel_model: Vec<Component>,
    pub audio_model: Vec<Component>,
    /// Mean direction of the acceleration (x longitudinal, y lateral,
    /// z vertical); each event perturbs it.
    pub axis: [f64; 3],
    /// Labeled interval length; components are cut at its end.
    pub duration: Span,
}

impl EventTemplate {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("template {}: {m}", self.kind)));
        if !self.duration.valid(true) || self.duration.1 > MAX_EVENT_SECONDS {
            return bad(format!("duration must lie in (0, {MAX_EVENT_SECONDS}] s"));
        }
        if self.axis.iter().all(|&a| a == 0.0) || self.axis.iter().any(|a| !a.is_finite()) {
            return bad("axis must be a finite non-zero vector".into());
        }
        for c in self.accel_model.iter().chain(&self.audio_model) {
            let ok = c.amplitude.valid(c.log_amplitude)
                && c.amplitude.0 >= 0.0
                && c.delay.valid(false)
                && c.delay.0 >= 0.0
                && match &c.waveform {
                    Waveform::DampedSine { freq, tau } => freq.valid(true) && tau.valid(true),
                    Waveform::NoiseBurst { tau } => tau.valid(true),
                    Waveform::ModulatedNoise { length, mod_freq, depth } => {
                        length.valid(true) && mod_freq.valid(false) && (0.0..=1.0).contains(depth)
                    }
                    Waveform::ToneBurst { freq, length } | Waveform::Ripple { freq, length } => {
                        freq.valid(true) && length.valid(true)
                    }
                };
            if !ok {
                return bad(format!("invalid component {c:?}"));
            }
        }
        Ok(())
    }
}

fn comp(waveform: Waveform, amplitude: (f64, f64)) -> Component {
    Component {
        waveform,
        amplitude: Span(amplitude.0, amplitude.1),
        log_amplitude: false,
        delay: zero_span(),
    }
}

fn damped(freq: (f64, f64), tau_ms: (f64, f64), amp: (f64, f64)) -> Component {
    comp(
        Waveform::DampedSine {
            freq: Span(freq.0, freq.1),
            tau: Span(tau_ms.0 / 1e3, tau_ms.1 / 1e3),
        },
        amp,
    )
}

fn click(tau_ms: (f64, f64), amp: (f64, f64)) -> Component {
    Component {
        log_amplitude: true,
        ..comp(
            Waveform::NoiseBurst {
                tau: Span(tau_ms.0 / 1e3, tau_ms.1 / 1e3),
            },
            amp,
        )
    }
}

fn jolt(freq: (f64, f64), length_ms: (f64, f64), amp: (f64, f64)) -> Component {
    comp(
        Waveform::ToneBurst {
            freq: Span(freq.0, freq.1),
            length: Span(length_ms.0 / 1e3, length_ms.1 / 1e3),
        },
        amp,
    )
}

fn delayed(mut c: Component, ms: (f64, f64)) -> Component {
    c.delay = Span(ms.0 / 1e3, ms.1 / 1e3);
    c
}

fn template(kind: &str, label: Label, axis: [f64; 3], duration: (f64, f64), accel: Vec<Component>, audio: Vec<Component>) -> EventTemplate {
    EventTemplate {
        kind: kind.to_string(),
        label,
        accel_model: accel,
        audio_model: audio,
        axis,
        duration: Span(duration.0, duration.1),
    }
}

/// The built-in template for an event category.
pub fn builtin_template(kind: &str) -> Result<EventTemplate> {
    use Label::{Background as B, Damage as D};
    const X: [f64; 3] = [1.0, 0.2, 0.2];
    const Y: [f64; 3] = [0.2, 1.0, 0.2];
    const Z: [f64; 3] = [0.2, 0.2, 1.0];
    const XY: [f64; 3] = [1.0, 1.0, 0.2];
    // Weak latch or contact clicks: background audio carries little
    // 2-3 kHz energy.
    let faint = || click((2.0, 6.0), (0.005, 0.1));
    let thud = |f: (f64, f64)| damped(f, (30.0, 80.0), (0.05, 0.3));
    let t = match kind {
        "dent" => template(
            kind,
            D,
            XY,
            (0.15, 0.3),
            vec![damped((90.0, 180.0), (10.0, 40.0), (3.0, 10.0))],
            vec![click((3.0, 15.0), (0.02, 0.9)), damped((150.0, 400.0), (10.0, 30.0), (0.02, 0.1))],
        ),
        "scratch" => template(
            kind,
            D,
            Y,
            (0.2, 0.5),
            vec![
                damped((60.0, 140.0), (5.0, 15.0), (2.5, 5.0)),
                comp(
                    Waveform::Ripple {
                        freq: Span(20.0, 60.0),
                        length: Span(0.12, 0.4),
                    },
                    (0.3, 0.8),
                ),
            ],
            vec![comp(
                Waveform::ModulatedNoise {
                    length: Span(0.12, 0.4),
                    mod_freq: Span(5.0, 30.0),
                    depth: 0.5,
                },
                (0.05, 0.3),
            )],
        ),
        "underbody" => template(
            kind,
            D,
            Z,
            (0.2, 0.5),
            vec![damped((40.0, 90.0), (30.0, 60.0), (4.0, 10.0))],
            vec![
                click((5.0, 20.0), (0.02, 0.3)),
                comp(
                    Waveform::ModulatedNoise {
                        length: Span(0.15, 0.35),
                        mod_freq: Span(3.0, 15.0),
                        depth: 0.6,
                    },
                    (0.03, 0.15),
                ),
            ],
        ),
        "None" => template(kind, B, Z, (0.2, 0.4), vec![jolt((3.0, 8.0), (150.0, 300.0), (2.3, 3.5))], vec![thud((40.0, 120.0))]),
        "Pothole" => template(
            kind,
            B,
            Z,
            (0.3, 0.6),
            vec![
                damped((8.0, 25.0), (40.0, 80.0), (3.0, 8.0)),
                delayed(damped((8.0, 25.0), (40.0, 80.0), (1.0, 3.0)), (100.0, 250.0)),
            ],
            vec![thud((40.0, 120.0)), faint()],
        ),
        "Speed Bump" => template(
            kind,
            B,
            Z,
            (0.4, 0.8),
            vec![jolt((1.5, 4.0), (300.0, 600.0), (2.5, 5.0))],
            vec![thud((30.0, 90.0))],
        ),
        "General Bump" => template(kind, B, Z, (0.2, 0.4), vec![jolt((4.0, 10.0), (100.0, 250.0), (2.3, 4.0))], vec![thud((40.0, 150.0))]),
        "Curb Climb" => template(
            kind,
            B,
            [0.5, 0.2, 1.0],
            (0.3, 0.7),
            vec![damped((10.0, 30.0), (60.0, 120.0), (2.5, 6.0)), jolt((1.5, 3.0), (300.0, 500.0), (1.0, 2.0))],
            vec![thud((40.0, 120.0)), faint()],
        ),
        "Vehicle hits Front Right Bumper" | "Vehicle hits Front Left Bumper" | "Vehicle hits Back Right Bumper"
        | "Vehicle hits Back Left Bumper" | "Vehicle hits Back Bumper" | "Vehicle hits Front Bumper" => {
            let lateral = if kind.contains("Right") || kind.contains("Left") { 0.7 } else { 0.2 };
            template(
                kind,
                B,
                [1.0, lateral, 0.2],
                (0.2, 0.4),
                vec![damped((20.0, 60.0), (30.0, 80.0), (2.5, 6.0))],
                vec![thud((100.0, 400.0)), faint()],
            )
        }
        "ABT-Bottom-Out" => template(
            kind,
            B,
            Z,
            (0.2, 0.4),
            vec![damped((15.0, 40.0), (50.0, 100.0), (3.0, 8.0))],
            vec![thud((40.0, 100.0)), faint()],
        ),
        "Object Impact Front Left Bumper" | "Object Impact Front Bumper" | "Object Impact Back Bumper" => template(
            kind,
            B,
            if kind.contains("Left") { XY } else { X },
            (0.15, 0.3),
            vec![damped((40.0, 80.0), (20.0, 50.0), (2.5, 5.0))],
            vec![damped((300.0, 800.0), (10.0, 40.0), (0.05, 0.2)), faint()],
        ),
        "Roof Slap Front Left Outside" => template(
            kind,
            B,
            Z,
            (0.15, 0.3),
            vec![damped((10.0, 30.0), (30.0, 60.0), (2.3, 4.0))],
            vec![damped((150.0, 500.0), (10.0, 30.0), (0.05, 0.3)), faint()],
        ),
        "Door Close Trunk" => template(
            kind,
            B,
            [1.0, 0.2, 0.6],
            (0.2, 0.4),
            vec![damped((15.0, 35.0), (20.0, 60.0), (2.5, 6.0))],
            vec![thud((60.0, 200.0)), faint()],
        ),
        _ => return Err(Error::Config(format!("unknown event category '{kind}'"))),
    };
    Ok(t)
}

fn render(c: &Component, rate: f64, onset: f64, end: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let amp = if c.log_amplitude {
        c.amplitude.sample_log(rng)
    } else {
        c.amplitude.sample(rng)
    };
    let start = onset + c.delay.sample(rng);
    let ramp = |t: f64, len: f64| (t / 0.01).min((len - t) / 0.01).clamp(0.0, 1.0);
    let (len, shape): (f64, Box<dyn FnMut(f64, &mut ChaCha8Rng) -> f64>) = match &c.waveform {
        Waveform::DampedSine { freq, tau } => {
            let (f, tau) = (freq.sample(rng), tau.sample(rng));
            (8.0 * tau, Box::new(move |t, _| (-t / tau).exp() * (2.0 * PI * f * t).sin()))
        }
        Waveform::NoiseBurst { tau } => {
            let tau = tau.sample(rng);
            (8.0 * tau, Box::new(move |t, r| (-t / tau).exp() * gauss(r)))
        }
        Waveform::ModulatedNoise { length, mod_freq, depth } => {
            let (len, fm, depth) = (length.sample(rng), mod_freq.sample(rng), *depth);
            let phase = rng.random_range(0.0..2.0 * PI);
            (
                len,
                Box::new(move |t, r| {
                    let am = 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * fm * t + phase).sin());
                    ramp(t, len) * am * gauss(r)
                }),
            )
        }
        Waveform::ToneBurst { freq, length } => {
            let (f, len) = (freq.sample(rng), length.sample(rng));
            (
                len,
                Box::new(move |t, _| {
                    let w = (PI * t / len).sin();
                    w * w * (2.0 * PI * f * t).sin()
                }),
            )
        }
        Waveform::Ripple { freq, length } => {
            let (f, len) = (freq.sample(rng), length.sample(rng));
            (len, Box::new(move |t, _| ramp(t, len) * (2.0 * PI * f * t).sin()))
        }
    };
    let mut shape = shape;
    let stop = (start + len).min(end);
    let first = (start * rate).ceil().max(0.0) as usize;
    let last = ((stop * rate).floor() as usize).min(out.len());
    if first >= last {
        return;
    }
    let wave: Vec<f64> = (first..last).map(|i| shape(i as f64 / rate - start, rng)).collect();
    // Amplitudes are peak values.
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for (o, w) in out[first..last].iter_mut().zip(wave) {
            *o += amp * w / peak;
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(axis: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let n0 = norm(axis);
    let mut d = axis.map(|a| a / n0 + 0.25 * gauss(rng));
    let n = norm(d).max(1e-12);
    d.iter_mut().for_each(|v| *v /= n);
    d
}

/// Event waveforms only (no noise), added into the given buffers starting
/// at `onset` seconds. Returns the labeled interval in accel samples.
fn add_event(
    t: &EventTemplate,
    onset: f64,
    accel: &mut [Vec<f64>; 3],
    audio: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let duration = t.duration.sample(rng);
    let end = onset + duration;
    let dir = unit_direction(t.axis, rng);
    let mut mono = vec![0.0; accel[0].len()];
    for c in &t.accel_model {
        render(c, NATIVE_ACCEL_RATE, onset, end, rng, &mut mono);
    }
    for (axis, d) in accel.iter_mut().zip(dir) {
        for (a, m) in axis.iter_mut().zip(&mono) {
            *a += d * m;
        }
    }
    for c in &t.audio_model {
        render(c, NATIVE_AUDIO_RATE, onset, end, rng, audio);
    }
    let n = accel[0].len();
    let start = ((onset * NATIVE_ACCEL_RATE).floor() as usize).min(n);
    let stop = ((end * NATIVE_ACCEL_RATE).ceil() as usize).min(n);
    (start, stop)
}

fn add_noise(x: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        x.iter_mut().for_each(|v| *v += sigma * gauss(rng));
    }
}

fn to_f32(x: Vec<f64>) -> Vec<f32> {
    x.into_iter().map(|v| v as f32).collect()
}

fn recording(id: String, accel: [Vec<f64>; 3], audio: Vec<f64>, events: Vec<LabeledEvent>, metadata: BTreeMap<String, String>) -> SensorRecording {
    SensorRecording {
        id,
        accel: accel.map(to_f32),
        audio: to_f32(audio),
        accel_rate: NATIVE_ACCEL_RATE,
        audio_rate: NATIVE_AUDIO_RATE,
        start_time: 0.0,
        metadata,
        events,
    }
}

/// A `SEGMENT_SECONDS` recording holding one event at `SEGMENT_ONSET` plus
/// Gaussian sensor noise of RMS `noise_floor` on every channel.
pub fn gen_event(template: &EventTemplate, noise_floor: f64, seed: u64) -> Result<SensorRecording> {
    template.validate()?;
    if !(noise_floor >= 0.0) {
        return Err(Error::invalid("noise floor must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = (SEGMENT_SECONDS * NATIVE_ACCEL_RATE) as usize;
    let nv = (SEGMENT_SECONDS * NATIVE_AUDIO_RATE) as usize;
    let mut accel = [vec![0.0; na], vec![0.0; na], vec![0.0; na]];
    let mut audio = vec![0.0; nv];
    let (start, end) = add_event(template, SEGMENT_ONSET, &mut accel, &mut audio, &mut rng);
    accel.iter_mut().for_each(|a| add_noise(a, noise_floor, &mut rng));
    add_noise(&mut audio, noise_floor, &mut rng);
    let event = LabeledEvent {
        start,
        end,
        label: template.label,
        category: template.kind.clone(),
    };
    Ok(recording(format!("{}-{seed}", template.kind), accel, audio, vec![event], BTreeMap::new()))
}

/// Accepts `40`, `40.0` or `"40:1"`.
fn ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(v)) => Ok(Some(v)),
        Some(Raw::Text(s)) => {
            let (a, b) = s.split_once(':').unwrap_or((s.as_str(), "1"));
            let parse = |x: &str| x.trim().parse::<f64>().map_err(serde::de::Error::custom);
            Ok(Some(parse(a)? / parse(b)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_damage: usize,
    /// Background count; derived from `imbalance` when absent.
    pub n_background: Option<usize>,
    /// Backgrounds per damage event; 40 when neither it nor
    /// `n_background` is given.
    #[serde(deserialize_with = "ratio")]
    pub imbalance: Option<f64>,
    pub damage_types: Vec<String>,
    pub background_types: Vec<String>,
    /// Relative frequency per background type (uniform when absent).
    pub background_weights: Option<Vec<f64>>,
    pub noise_floor: f64,
    pub seed: u64,
    /// Prefix of recording ids.
    pub name: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_damage: 50,
            n_background: None,
            imbalance: None,
            damage_types: vec!["dent".into()],
            background_types: BACKGROUND_TYPES.iter().map(|s| s.to_string()).collect(),
            background_weights: None,
            noise_floor: DEFAULT_NOISE_FLOOR,
            seed: 7,
            name: "ride".into(),
        }
    }
}

impl DatasetSpec {
    pub fn background_count(&self) -> Result<usize> {
        let from_ratio = |r: f64| -> Result<usize> {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("imbalance {r} must be a non-negative ratio")));
            }
            Ok((self.n_damage as f64 * r).round() as usize)
        };
        match (self.n_background, self.imbalance) {
            (Some(n), None) => Ok(n),
            (None, r) => from_ratio(r.unwrap_or(DEFAULT_IMBALANCE)),
            (Some(n), Some(r)) => {
                let implied = from_ratio(r)?;
                if implied != n {
                    return Err(Error::Config(format!(
                        "imbalance {r}:1 with {} damage events implies {implied} backgrounds, not {n}",
                        self.n_damage
                    )));
                }
                Ok(n)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_bg = self.background_count()?;
        if self.n_damage > 0 && self.damage_types.is_empty() {
            return Err(Error::Config("damage events requested but damage_types is empty".into()));
        }
        if n_bg > 0 && self.background_types.is_empty() {
            return Err(Error::Config("background events requested but background_types is empty".into()));
        }
        for d in &self.damage_types {
            if !DAMAGE_TYPES.contains(&d.as_str()) {
                return Err(Error::Config(format!("'{d}' is not a damage type")));
            }
        }
        for b in &self.background_types {
            if !BACKGROUND_TYPES.contains(&b.as_str()) {
                return Err(Error::Config(format!("'{b}' is not a background type")));
            }
        }
        if let Some(w) = &self.background_weights {
            if w.len() != self.background_types.len() || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("background_weights must be non-negative, one per type, not all zero".into()));
            }
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::Config("noise_floor must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub category: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub recordings: Vec<SensorRecording>,
    pub manifest: DatasetManifest,
}

/// Splits `total` across `weights` by largest remainder, ties to the
/// earlier type.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn recording_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ambient(accel: &mut [Vec<f64>; 3], audio: &mut [f64], rng: &mut ChaCha8Rng) {
    for axis in accel.iter_mut() {
        for _ in 0..3 {
            let (f, a, p) = (rng.random_range(2.0..15.0), rng.random_range(0.02..0.1), rng.random_range(0.0..2.0 * PI));
            for (i, v) in axis.iter_mut().enumerate() {
                *v += a * (2.0 * PI * f * i as f64 / NATIVE_ACCEL_RATE + p).sin();
            }
        }
    }
    let hum = rng.random_range(30.0..60.0);
    for h in 1..=3 {
        let (a, p) = (rng.random_range(0.005..0.02) / h as f64, rng.random_range(0.0..2.0 * PI));
        for (i, v) in audio.iter_mut().enumerate() {
            *v += a * (2.0 * PI * hum * h as f64 * i as f64 / NATIVE_AUDIO_RATE + p).sin();
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// One ride of `RECORDING_SECONDS` with an event at a random onset.
pub fn gen_recording(id: String, template: &EventTemplate, noise_floor: f64, seed: u64) -> Result<SensorRecording> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = (RECORDING_SECONDS * NATIVE_ACCEL_RATE) as usize;
    let nv = (RECORDING_SECONDS * NATIVE_AUDIO_RATE) as usize;
    let mut accel = [vec![0.0; na], vec![0.0; na], vec![0.0; na]];
    let mut audio = vec![0.0; nv];
    let metadata: BTreeMap<String, String> = [
        ("weather", pick(&mut rng, &WEATHER)),
        ("road", pick(&mut rng, &ROADS)),
        ("vehicle", pick(&mut rng, &VEHICLES)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    ambient(&mut accel, &mut audio, &mut rng);
    let onset = rng.random_range(1.5..2.5);
    let (start, end) = add_event(template, onset, &mut accel, &mut audio, &mut rng);
    accel.iter_mut().for_each(|a| add_noise(a, noise_floor, &mut rng));
    add_noise(&mut audio, noise_floor, &mut rng);
    let event = LabeledEvent {
        start,
        end,
        label: template.label,
        category: template.kind.clone(),
    };
    Ok(recording(id, accel, audio, vec![event], metadata))
}

/// The manifest alone: ids, labels, categories and per-recording seeds.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let n_bg = spec.background_count()?;
    let uniform = vec![1.0; spec.background_types.len()];
    let weights = spec.background_weights.as_deref().unwrap_or(&uniform);
    let mut cats: Vec<(Label, String)> = Vec::with_capacity(spec.n_damage + n_bg);
    let dmg = allocate(spec.n_damage, &vec![1.0; spec.damage_types.len().max(1)]);
    for (t, &n) in spec.damage_types.iter().zip(&dmg) {
        cats.extend(std::iter::repeat_n((Label::Damage, t.clone()), n));
    }
    for (t, &n) in spec.background_types.iter().zip(&allocate(n_bg, weights)) {
        cats.extend(std::iter::repeat_n((Label::Background, t.clone()), n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    cats.shuffle(&mut rng);
    let entries = cats
        .into_iter()
        .enumerate()
        .map(|(i, (label, category))| ManifestEntry {
            id: format!("{}-{i:05}", spec.name),
            label,
            category,
            seed: recording_seed(spec.seed, i),
        })
        .collect();
    Ok(DatasetManifest {
        spec: spec.clone(),
        entries,
    })
}

pub fn gen_entry(entry: &ManifestEntry, noise_floor: f64) -> Result<SensorRecording> {
    gen_recording(entry.id.clone(), &builtin_template(&entry.category)?, noise_floor, entry.seed)
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    let manifest = plan_dataset(spec)?;
    let recordings = manifest
        .entries
        .iter()
        .map(|e| gen_entry(e, spec.noise_floor))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedDataset { recordings, manifest })
}
