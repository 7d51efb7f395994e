//! Multi-modal small-damage detection.
//!
//! Raw IMU and microphone recordings are band-limited and resampled, sliced
//! into trigger-aligned windows, turned into 32x32 Morlet CWT spectrograms and
//! scored by convolutional autoencoders (mono-modal or mid-fusion). The
//! reconstruction error is the anomaly score; ROC-AUC and false-positive
//! tables summarize a run.

pub mod cwt;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};

/// Ground-truth class of an event window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Damage,
    Background,
}

impl Label {
    pub fn is_damage(self) -> bool {
        matches!(self, Label::Damage)
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Damage => "damage",
            Label::Background => "background",
        })
    }
}
