//! On-disk event container: a directory holding `manifest.json` and one
//! little-endian `f32` blob per channel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{LabeledEvent, SensorRecording};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: unsupported container format_version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { path: PathBuf, found: u32 },

    #[error("{path}: blob holds {bytes} bytes, not a whole number of f32 samples")]
    TruncatedBlob { path: PathBuf, bytes: u64 },

    #[error("{path}: manifest declares {declared} samples but the blob holds {actual}")]
    LengthMismatch { path: PathBuf, declared: usize, actual: usize },

    #[error("{path}: invalid manifest: {message}")]
    InvalidManifest { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    pub file: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEntry {
    pub name: String,
    pub rate: f64,
    pub unit: String,
    pub axes: Vec<String>,
    pub channels: Vec<ChannelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format_version: u32,
    pub id: String,
    pub start_time: f64,
    pub sensors: Vec<SensorEntry>,
    pub metadata: BTreeMap<String, String>,
    pub events: Vec<LabeledEvent>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sensor(name: &str, rate: f64, unit: &str, axes: &[&str], lens: &[usize]) -> SensorEntry {
    SensorEntry {
        name: name.into(),
        rate,
        unit: unit.into(),
        axes: axes.iter().map(|a| a.to_string()).collect(),
        channels: axes
            .iter()
            .zip(lens)
            .map(|(axis, &samples)| {
                let ch = if axis.is_empty() { name.to_string() } else { format!("{name}_{axis}") };
                ChannelEntry {
                    file: format!("{ch}.f32"),
                    name: ch,
                    samples,
                }
            })
            .collect(),
    }
}

pub fn manifest_for(rec: &SensorRecording) -> ContainerManifest {
    let accel_lens: Vec<usize> = rec.accel.iter().map(Vec::len).collect();
    ContainerManifest {
        format_version: FORMAT_VERSION,
        id: rec.id.clone(),
        start_time: rec.start_time,
        sensors: vec![
            sensor("accel", rec.accel_rate, "m/s^2", &AXES, &accel_lens),
            sensor("audio", rec.audio_rate, "normalized", &[""], &[rec.audio.len()]),
        ],
        metadata: rec.metadata.clone(),
        events: rec.events.clone(),
    }
}

fn write_blob(path: &Path, data: &[f32]) -> Result<(), ContainerError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_blob(path: &Path, declared: usize) -> Result<Vec<f32>, ContainerError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(ContainerError::TruncatedBlob {
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
        });
    }
    if bytes.len() / 4 != declared {
        return Err(ContainerError::LengthMismatch {
            path: path.to_path_buf(),
            declared,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

/// Writes `rec` into directory `dir`, creating it if needed.
pub fn write_container(rec: &SensorRecording, dir: &Path) -> crate::Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = manifest_for(rec);
    let channels = rec.accel.iter().chain(std::iter::once(&rec.audio));
    let entries = manifest.sensors.iter().flat_map(|s| &s.channels);
    for (entry, data) in entries.zip(channels) {
        write_blob(&dir.join(&entry.file), data)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

fn invalid(path: &Path, message: impl Into<String>) -> ContainerError {
    ContainerError::InvalidManifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads and validates the manifest, checking the version before anything
/// else is interpreted.
pub fn read_manifest(dir: &Path) -> Result<ContainerManifest, ContainerError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| invalid(&path, e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| invalid(&path, "missing format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(ContainerError::VersionMismatch {
            path,
            found: version.min(u64::from(u32::MAX)) as u32,
        });
    }
    serde_json::from_value(raw).map_err(|e| invalid(&path, e.to_string()))
}

pub fn read_container(dir: &Path) -> crate::Result<SensorRecording> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST_FILE);
    let find = |name: &str| {
        manifest
            .sensors
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| invalid(&mpath, format!("missing sensor '{name}'")))
    };
    let accel = find("accel")?;
    let audio = find("audio")?;
    if accel.channels.len() != 3 || audio.channels.len() != 1 {
        return Err(invalid(&mpath, "expected 3 accel channels and 1 audio channel").into());
    }
    let mut blobs = Vec::with_capacity(4);
    for ch in accel.channels.iter().chain(&audio.channels) {
        if ch.file.contains(['/', '\\']) || ch.file.starts_with("..") {
            return Err(invalid(&mpath, format!("channel file '{}' escapes the container", ch.file)).into());
        }
        blobs.push(read_blob(&dir.join(&ch.file), ch.samples)?);
    }
    let audio_data = blobs.pop().expect("four blobs");
    let [x, y, z]: [Vec<f32>; 3] = blobs.try_into().expect("three accel blobs");
    let rec = SensorRecording {
        id: manifest.id,
        accel: [x, y, z],
        audio: audio_data,
        accel_rate: accel.rate,
        audio_rate: audio.rate,
        start_time: manifest.start_time,
        metadata: manifest.metadata,
        events: manifest.events,
    };
    rec.validate()?;
    Ok(rec)
}
