//! Event-driven detection: trigger, reconstruct, score, decide, deliver.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsp::SensorRecording;
use crate::eval::{self, Modality, Orientation};
use crate::losses::LossKind;
use crate::models::Model;
use crate::pipeline::dataset::{Extractor, WindowSample};
use crate::pipeline::experiment::{background_scores, build_report, score, EvalReport, EvalSettings};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Damage,
    Background,
}

/// One classified trigger window. Scores are raw reconstruction errors;
/// the decision compares the oriented score of `modality` with `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Seconds: recording start time plus the trigger offset.
    pub timestamp: f64,
    pub source_id: String,
    pub trigger_index: usize,
    pub score_acc: Option<f64>,
    pub score_aud: Option<f64>,
    pub decision: Decision,
    pub model_id: String,
    pub modality: Modality,
    pub threshold: f64,
    pub orientation: Orientation,
    pub inference_ms: f64,
    /// The sink rejected the record twice.
    pub delivery_failed: bool,
}

impl DetectionRecord {
    pub fn oriented_score(&self) -> Option<f64> {
        let raw = match self.modality {
            Modality::Accel => self.score_acc,
            Modality::Audio => self.score_aud,
        };
        raw.map(|e| self.orientation.apply(e))
    }

    /// Whether `decision` follows from the score and threshold.
    pub fn is_consistent(&self) -> bool {
        let damage = self.oriented_score().is_some_and(|s| s > self.threshold);
        damage == (self.decision == Decision::Damage)
    }
}

/// Destination for damage decisions.
pub trait Sink {
    fn deliver(&mut self, record: &DetectionRecord) -> Result<()>;
}

impl Sink for Vec<DetectionRecord> {
    fn deliver(&mut self, record: &DetectionRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON line per record.
pub struct FileSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl FileSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(Error::at(path))?;
        Ok(FileSink { path: path.to_path_buf(), out: BufWriter::new(file) })
    }
}

impl Sink for FileSink {
    fn deliver(&mut self, record: &DetectionRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(Error::at(&self.path))
    }
}

/// POSTs each record as a JSON body.
pub struct HttpSink {
    url: String,
    agent: ureq::Agent,
}

impl HttpSink {
    pub fn new(url: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(10)).build();
        HttpSink { url: url.to_string(), agent }
    }
}

impl Sink for HttpSink {
    fn deliver(&mut self, record: &DetectionRecord) -> Result<()> {
        let body = serde_json::to_string(record)?;
        self.agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map(|_| ())
            .map_err(|e| Error::Sink(format!("POST {}: {e}", self.url)))
    }
}

/// `file:PATH`, `http://...` or `https://...`.
pub fn open_sink(spec: &str) -> Result<Box<dyn Sink>> {
    if let Some(path) = spec.strip_prefix("file:") {
        if path.is_empty() {
            return Err(Error::Config("file sink needs a path".into()));
        }
        return Ok(Box::new(FileSink::create(Path::new(path))?));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(HttpSink::new(spec)));
    }
    Err(Error::Config(format!("unknown sink '{spec}' (expected file:PATH or http://URL)")))
}

/// A trained model with its scoring loss, chosen modality and threshold.
pub struct Detector {
    pub model: Model,
    pub loss: LossKind,
    pub modality: Modality,
    /// In oriented score units.
    pub threshold: f64,
    pub orientation: Orientation,
    pub extractor: Extractor,
}

impl Detector {
    /// Uses the report's best modality and its calibrated threshold.
    pub fn from_report(model: Model, report: &EvalReport) -> Result<Self> {
        if report.model_id != model.id() {
            return Err(Error::invalid(format!("report is for {}, model is {}", report.model_id, model.id())));
        }
        let m = report.best_modality;
        let threshold = report
            .modalities
            .get(&m)
            .ok_or_else(|| Error::invalid(format!("report has no {m} modality")))?
            .threshold;
        Ok(Detector {
            model,
            loss: report.loss_id.parse()?,
            modality: m,
            threshold,
            orientation: report.orientation,
            extractor: Extractor::default(),
        })
    }

    /// Scores a labeled calibration set. The modality with the higher
    /// calibration AUC is used when both classes are present, otherwise the
    /// model's first; its threshold is the `percentile` of the oriented
    /// background scores.
    pub fn calibrate(
        model: Model,
        loss: LossKind,
        samples: &[WindowSample],
        percentile: f64,
        orientation: Orientation,
    ) -> Result<Self> {
        let (set, times) = score(&model, samples, loss)?;
        let has_damage = set.records.iter().any(|r| r.label.is_damage());
        if has_damage {
            let settings = EvalSettings { loss, orientation, percentile, calibration: None };
            let report = build_report(&model, &set, &times, &settings)?;
            return Self::from_report(model, &report);
        }
        let modality = model.modalities()[0];
        let threshold = eval::calibrate_threshold(&background_scores(&set, modality, orientation)?, percentile)?;
        Ok(Detector { model, loss, modality, threshold, orientation, extractor: Extractor::default() })
    }

    /// Classifies every trigger window of one recording.
    pub fn detect(&self, rec: &SensorRecording) -> Result<Vec<DetectionRecord>> {
        let mut out = Vec::new();
        for (window, sample) in self.extractor.samples(rec)? {
            let t0 = Instant::now();
            let r = self.model.reconstruct(&sample, self.loss)?;
            let inference_ms = t0.elapsed().as_secs_f64() * 1e3;
            let raw = match self.modality {
                Modality::Accel => r.loss_acc,
                Modality::Audio => r.loss_aud,
            }
            .ok_or_else(|| Error::invalid(format!("model {} has no {} output", self.model.id(), self.modality)))?;
            let damage = self.orientation.apply(raw) > self.threshold;
            out.push(DetectionRecord {
                timestamp: rec.start_time + window.trigger_index as f64 / window.accel_rate,
                source_id: rec.id.clone(),
                trigger_index: window.trigger_index,
                score_acc: r.loss_acc,
                score_aud: r.loss_aud,
                decision: if damage { Decision::Damage } else { Decision::Background },
                model_id: self.model.id().to_string(),
                modality: self.modality,
                threshold: self.threshold,
                orientation: self.orientation,
                inference_ms,
                delivery_failed: false,
            });
        }
        Ok(out)
    }
}

fn deliver_with_retry(sink: &mut dyn Sink, record: &mut DetectionRecord) {
    if let Err(first) = sink.deliver(record) {
        log::warn!("sink rejected {}@{}: {first}; retrying", record.source_id, record.trigger_index);
        if let Err(second) = sink.deliver(record) {
            record.delivery_failed = true;
            log::error!(
                "delivery failed for {}@{}: {second}; record: {}",
                record.source_id,
                record.trigger_index,
                serde_json::to_string(record).unwrap_or_default()
            );
        }
    }
}

/// Classifies every window of every recording and forwards damage decisions
/// to the sink. Returns all records, background decisions included.
pub fn run_stream<I>(source: I, detector: &Detector, sink: &mut dyn Sink) -> Result<Vec<DetectionRecord>>
where
    I: IntoIterator<Item = Result<SensorRecording>>,
{
    let mut all = Vec::new();
    for rec in source {
        for mut record in detector.detect(&rec?)? {
            if record.decision == Decision::Damage {
                deliver_with_retry(sink, &mut record);
            }
            all.push(record);
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        failures: usize,
        delivered: usize,
    }

    impl Sink for Flaky {
        fn deliver(&mut self, _: &DetectionRecord) -> Result<()> {
            if self.failures > 0 {
                self.failures -= 1;
                return Err(Error::Sink("down".into()));
            }
            self.delivered += 1;
            Ok(())
        }
    }

    fn record() -> DetectionRecord {
        DetectionRecord {
            timestamp: 1.0,
            source_id: "r".into(),
            trigger_index: 3,
            score_acc: Some(0.2),
            score_aud: None,
            decision: Decision::Damage,
            model_id: "macc".into(),
            modality: Modality::Accel,
            threshold: -0.5,
            orientation: Orientation::LowerErrorPositive,
            inference_ms: 0.0,
            delivery_failed: false,
        }
    }

    #[test]
    fn one_failure_is_retried() {
        let mut sink = Flaky { failures: 1, delivered: 0 };
        let mut r = record();
        deliver_with_retry(&mut sink, &mut r);
        assert_eq!(sink.delivered, 1);
        assert!(!r.delivery_failed);
    }

    #[test]
    fn two_failures_flag_the_record() {
        let mut sink = Flaky { failures: 2, delivered: 0 };
        let mut r = record();
        deliver_with_retry(&mut sink, &mut r);
        assert_eq!(sink.delivered, 0);
        assert!(r.delivery_failed);
    }

    #[test]
    fn consistency_follows_orientation() {
        let mut r = record();
        assert!(r.is_consistent());
        r.decision = Decision::Background;
        assert!(!r.is_consistent());
        r.orientation = Orientation::HigherErrorPositive;
        r.threshold = 0.5;
        assert!(r.is_consistent());
    }

    #[test]
    fn sink_specs() {
        assert!(open_sink("ftp://x").is_err());
        assert!(open_sink("file:").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut s = open_sink(&format!("file:{}", path.display())).unwrap();
        s.deliver(&record()).unwrap();
        s.deliver(&record()).unwrap();
        drop(s);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<DetectionRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, vec![record(), record()]);
    }

    #[test]
    fn unreachable_http_sink_errors() {
        let mut s = HttpSink::new("http://127.0.0.1:9/");
        assert!(matches!(s.deliver(&record()), Err(Error::Sink(_))));
    }
}
