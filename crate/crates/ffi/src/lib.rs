//! C ABI over `sdd-core`: read containers, synthesize recordings, load
//! checkpoints and run a calibrated detector.
//!
//! Every fallible call returns an [`SddStatus`]; on failure the message is
//! available from [`sdd_last_error`] on the same thread. Handles are opaque
//! and released with their `_free` function. Pointer arguments must be
//! null or valid for their documented use; strings are NUL-terminated UTF-8.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sdd_core::dsp::SensorRecording;
use sdd_core::eval::Orientation;
use sdd_core::losses::LossKind;
use sdd_core::models::Model;
use sdd_core::pipeline::container::{read_container, write_container, ContainerError};
use sdd_core::pipeline::dataset::{read_recordings, Extractor};
use sdd_core::pipeline::experiment::{checkpoint_loss, load_model};
use sdd_core::pipeline::stream::{Decision, Detector};
use sdd_core::synthgen::{builtin_template, gen_recording, DEFAULT_NOISE_FLOOR};
use sdd_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SddStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ContainerVersion = 4,
    ContainerTruncated = 5,
    ContainerLength = 6,
    ContainerManifest = 7,
    Checkpoint = 8,
    Config = 9,
    BufferTooSmall = 10,
    Runtime = 11,
    Panic = 12,
}

/// A sensor recording.
pub struct SddRecording(SensorRecording);

/// A trained model loaded from a checkpoint.
pub struct SddModel {
    model: Model,
    loss: LossKind,
}

/// A model with its scoring loss, modality and calibrated threshold.
pub struct SddDetector(Detector);

/// One classified trigger window. Absent modality scores are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SddDetection {
    pub trigger_index: u64,
    pub timestamp: f64,
    pub score_acc: f64,
    pub score_aud: f64,
    /// 1 for damage, 0 for background.
    pub is_damage: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SddStatus {
    match e {
        Error::Container(c) => match c {
            ContainerError::VersionMismatch { .. } => SddStatus::ContainerVersion,
            ContainerError::TruncatedBlob { .. } => SddStatus::ContainerTruncated,
            ContainerError::LengthMismatch { .. } => SddStatus::ContainerLength,
            ContainerError::InvalidManifest { .. } => SddStatus::ContainerManifest,
            ContainerError::Io { .. } => SddStatus::Io,
        },
        Error::Io { .. } => SddStatus::Io,
        Error::Checkpoint(_) => SddStatus::Checkpoint,
        Error::Config(_) => SddStatus::Config,
        Error::InvalidArgument(_) => SddStatus::InvalidArgument,
        _ => SddStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SddStatus, String)>) -> SddStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SddStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sdd".into());
            SddStatus::Panic
        }
    }
}

fn core<T>(r: sdd_core::Result<T>) -> Result<T, (SddStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (SddStatus, String)> {
    if p.is_null() {
        return Err((SddStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SddStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (SddStatus, String)> {
    p.as_ref().ok_or_else(|| (SddStatus::NullPointer, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), (SddStatus, String)> {
    if p.is_null() {
        Err((SddStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library.
#[no_mangle]
pub extern "C" fn sdd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_read(path: *const c_char, out: *mut *mut SddRecording) -> SddStatus {
    guard(|| {
        out_arg(out, "out")?;
        let rec = core(read_container(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(SddRecording(rec)));
        Ok(())
    })
}

/// `rec` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_write(rec: *const SddRecording, path: *const c_char) -> SddStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        core(write_container(&rec.0, Path::new(str_arg(path, "path")?)))
    })
}

/// Synthesizes one recording of the built-in event type `kind`.
///
/// `kind` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_generate(kind: *const c_char, seed: u64, out: *mut *mut SddRecording) -> SddStatus {
    guard(|| {
        out_arg(out, "out")?;
        let kind = str_arg(kind, "kind")?;
        let template = core(builtin_template(kind))?;
        let rec = core(gen_recording(format!("{kind}-{seed}"), &template, DEFAULT_NOISE_FLOOR, seed))?;
        *out = Box::into_raw(Box::new(SddRecording(rec)));
        Ok(())
    })
}

/// Acceleration samples per axis and audio samples.
///
/// `rec` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_lengths(
    rec: *const SddRecording,
    accel_len: *mut usize,
    audio_len: *mut usize,
) -> SddStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        out_arg(accel_len, "accel_len")?;
        out_arg(audio_len, "audio_len")?;
        *accel_len = rec.0.accel[0].len();
        *audio_len = rec.0.audio.len();
        Ok(())
    })
}

/// Number of trigger windows the default extractor finds.
///
/// `rec` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_trigger_count(rec: *const SddRecording, count: *mut usize) -> SddStatus {
    guard(|| {
        let rec = handle(rec, "rec")?;
        out_arg(count, "count")?;
        *count = core(Extractor::default().windows(&rec.0))?.len();
        Ok(())
    })
}

/// `rec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdd_recording_free(rec: *mut SddRecording) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_model_load(path: *const c_char, out: *mut *mut SddModel) -> SddStatus {
    guard(|| {
        out_arg(out, "out")?;
        let (model, meta) = core(load_model(Path::new(str_arg(path, "path")?)))?;
        let loss = core(checkpoint_loss(&meta))?;
        *out = Box::into_raw(Box::new(SddModel { model, loss }));
        Ok(())
    })
}

/// `model` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_model_param_count(model: *const SddModel, count: *mut usize) -> SddStatus {
    guard(|| {
        let m = handle(model, "model")?;
        out_arg(count, "count")?;
        *count = m.model.param_count();
        Ok(())
    })
}

/// Copies the model id (e.g. `maa3`) with its NUL into `buf`.
///
/// `model` must be a live handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sdd_model_id(model: *const SddModel, buf: *mut c_char, len: usize) -> SddStatus {
    guard(|| {
        let m = handle(model, "model")?;
        out_arg(buf, "buf")?;
        let id = m.model.id().as_bytes();
        if id.len() + 1 > len {
            return Err((SddStatus::BufferTooSmall, format!("model id needs {} bytes", id.len() + 1)));
        }
        ptr::copy_nonoverlapping(id.as_ptr().cast(), buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdd_model_free(model: *mut SddModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Calibrates a detector on the dataset directory `calibration_dir` at the
/// given background percentile, scoring with the checkpoint's training loss.
/// Consumes `model`, which must not be used or freed afterwards.
///
/// `model` must be a live handle, `calibration_dir` a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_detector_calibrate(
    model: *mut SddModel,
    calibration_dir: *const c_char,
    percentile: f64,
    out: *mut *mut SddDetector,
) -> SddStatus {
    guard(|| {
        handle(model, "model")?;
        out_arg(out, "out")?;
        let dir = Path::new(str_arg(calibration_dir, "calibration_dir")?);
        let SddModel { model, loss } = *Box::from_raw(model);
        let samples = core(Extractor::default().all_samples(&core(read_recordings(dir))?))?;
        let d = core(Detector::calibrate(model, loss, &samples, percentile, Orientation::default()))?;
        *out = Box::into_raw(Box::new(SddDetector(d)));
        Ok(())
    })
}

/// Threshold in oriented score units.
///
/// `det` must be a live handle and `threshold` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_detector_threshold(det: *const SddDetector, threshold: *mut f64) -> SddStatus {
    guard(|| {
        let d = handle(det, "det")?;
        out_arg(threshold, "threshold")?;
        *threshold = d.0.threshold;
        Ok(())
    })
}

/// Classifies every trigger window of `rec` into `out[..cap]`. `count`
/// receives the number of windows; when it exceeds `cap` the call returns
/// `BufferTooSmall` and writes nothing.
///
/// Handles must be live, `out` valid for `cap` elements (or null with
/// `cap == 0`) and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sdd_detector_detect(
    det: *const SddDetector,
    rec: *const SddRecording,
    out: *mut SddDetection,
    cap: usize,
    count: *mut usize,
) -> SddStatus {
    guard(|| {
        let d = handle(det, "det")?;
        let r = handle(rec, "rec")?;
        out_arg(count, "count")?;
        let records = core(d.0.detect(&r.0))?;
        *count = records.len();
        if records.len() > cap {
            return Err((SddStatus::BufferTooSmall, format!("{} windows, capacity {cap}", records.len())));
        }
        if records.is_empty() {
            return Ok(());
        }
        out_arg(out, "out")?;
        for (i, record) in records.iter().enumerate() {
            *out.add(i) = SddDetection {
                trigger_index: record.trigger_index as u64,
                timestamp: record.timestamp,
                score_acc: record.score_acc.unwrap_or(f64::NAN),
                score_aud: record.score_aud.unwrap_or(f64::NAN),
                is_damage: u8::from(record.decision == Decision::Damage),
            };
        }
        Ok(())
    })
}

/// `det` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdd_detector_free(det: *mut SddDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}
