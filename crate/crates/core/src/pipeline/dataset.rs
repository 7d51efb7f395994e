//! Dataset directories and window extraction.
//!
//! A dataset directory holds `dataset.json` (the generator manifest) and one
//! event container per recording in a subdirectory named by its id.
//! Directories without `dataset.json` are read as every container
//! subdirectory in name order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::cwt::SampleTensor;
use crate::dsp::{detect_triggers, EventWindow, Preprocessor, SensorRecording, TriggerConfig};
use crate::pipeline::container::{read_container, write_container, MANIFEST_FILE};
use crate::synthgen::{DatasetManifest, GeneratedDataset};
use crate::{Error, Result};

pub const DATASET_FILE: &str = "dataset.json";

pub fn write_dataset(data: &GeneratedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::at(dir))?;
    for rec in &data.recordings {
        write_container(rec, &dir.join(&rec.id))?;
    }
    let path = dir.join(DATASET_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&data.manifest)?).map_err(Error::at(&path))
}

/// The generator manifest, if the directory has one.
pub fn read_dataset_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    let path = dir.join(DATASET_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(Error::at(&path))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

/// Container directories of a dataset, in manifest order.
pub fn container_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", dir.display())));
    }
    if let Some(m) = read_dataset_manifest(dir)? {
        return Ok(m.entries.iter().map(|e| dir.join(&e.id)).collect());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() && dir.join(MANIFEST_FILE).is_file() {
        dirs.push(dir.to_path_buf());
    }
    Ok(dirs)
}

pub fn read_recordings(dir: &Path) -> Result<Vec<SensorRecording>> {
    container_dirs(dir)?.iter().map(|d| read_container(d)).collect()
}

/// Recording to model samples: resample and filter, trigger, then CWT.
#[derive(Debug, Clone, Default)]
pub struct Extractor {
    pub preprocessor: Preprocessor,
    pub trigger: TriggerConfig,
}

impl Extractor {
    pub fn windows(&self, rec: &SensorRecording) -> Result<Vec<EventWindow>> {
        let p = self.preprocessor.apply(rec)?;
        let t = &self.trigger;
        detect_triggers(&p, t.threshold, t.window_seconds, t.refractory_seconds)
    }

    pub fn samples(&self, rec: &SensorRecording) -> Result<Vec<(EventWindow, SampleTensor)>> {
        self.windows(rec)?
            .into_iter()
            .map(|w| SampleTensor::from_window(&w).map(|s| (w, s)))
            .collect()
    }

    /// Every window of every recording, in recording order.
    pub fn all_samples(&self, recs: &[SensorRecording]) -> Result<Vec<WindowSample>> {
        let mut out = Vec::new();
        for r in recs {
            out.extend(self.samples(r)?.into_iter().map(|(w, tensor)| WindowSample {
                id: format!("{}@{}", r.id, w.trigger_index),
                trigger_index: w.trigger_index,
                tensor,
            }));
        }
        Ok(out)
    }
}

/// A model sample with an id unique across windows of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub id: String,
    pub trigger_index: usize,
    pub tensor: SampleTensor,
}
