#ifndef SDD_H
#define SDD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SddStatus {
  SDD_STATUS_OK = 0,
  SDD_STATUS_NULL_POINTER = 1,
  SDD_STATUS_INVALID_ARGUMENT = 2,
  SDD_STATUS_IO = 3,
  SDD_STATUS_CONTAINER_VERSION = 4,
  SDD_STATUS_CONTAINER_TRUNCATED = 5,
  SDD_STATUS_CONTAINER_LENGTH = 6,
  SDD_STATUS_CONTAINER_MANIFEST = 7,
  SDD_STATUS_CHECKPOINT = 8,
  SDD_STATUS_CONFIG = 9,
  SDD_STATUS_BUFFER_TOO_SMALL = 10,
  SDD_STATUS_RUNTIME = 11,
  SDD_STATUS_PANIC = 12,
} SddStatus;

/**
 * A model with its scoring loss, modality and calibrated threshold.
 */
typedef struct SddDetector SddDetector;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct SddModel SddModel;

/**
 * A sensor recording.
 */
typedef struct SddRecording SddRecording;

/**
 * One classified trigger window. Absent modality scores are NaN.
 */
typedef struct SddDetection {
  uint64_t trigger_index;
  double timestamp;
  double score_acc;
  double score_aud;
  /**
   * 1 for damage, 0 for background.
   */
  uint8_t is_damage;
} SddDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library.
 */
const char *sdd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sdd_version(void);

/**
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SddStatus sdd_recording_read(const char *path, struct SddRecording **out);

/**
 * `rec` must be a live handle and `path` a NUL-terminated string.
 */
enum SddStatus sdd_recording_write(const struct SddRecording *rec, const char *path);

/**
 * Synthesizes one recording of the built-in event type `kind`.
 *
 * `kind` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SddStatus sdd_recording_generate(const char *kind, uint64_t seed, struct SddRecording **out);

/**
 * Acceleration samples per axis and audio samples.
 *
 * `rec` must be a live handle; the out pointers must be valid.
 */
enum SddStatus sdd_recording_lengths(const struct SddRecording *rec,
                                     size_t *accel_len,
                                     size_t *audio_len);

/**
 * Number of trigger windows the default extractor finds.
 *
 * `rec` must be a live handle and `count` a valid pointer.
 */
enum SddStatus sdd_recording_trigger_count(const struct SddRecording *rec, size_t *count);

/**
 * `rec` must be null or a handle not yet freed.
 */
void sdd_recording_free(struct SddRecording *rec);

/**
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SddStatus sdd_model_load(const char *path, struct SddModel **out);

/**
 * `model` must be a live handle and `count` a valid pointer.
 */
enum SddStatus sdd_model_param_count(const struct SddModel *model, size_t *count);

/**
 * Copies the model id (e.g. `maa3`) with its NUL into `buf`.
 *
 * `model` must be a live handle and `buf` valid for `len` bytes.
 */
enum SddStatus sdd_model_id(const struct SddModel *model, char *buf, size_t len);

/**
 * `model` must be null or a handle not yet freed.
 */
void sdd_model_free(struct SddModel *model);

/**
 * Calibrates a detector on the dataset directory `calibration_dir` at the
 * given background percentile, scoring with the checkpoint's training loss.
 * Consumes `model`, which must not be used or freed afterwards.
 *
 * `model` must be a live handle, `calibration_dir` a NUL-terminated string
 * and `out` a valid pointer.
 */
enum SddStatus sdd_detector_calibrate(struct SddModel *model,
                                      const char *calibration_dir,
                                      double percentile,
                                      struct SddDetector **out);

/**
 * Threshold in oriented score units.
 *
 * `det` must be a live handle and `threshold` a valid pointer.
 */
enum SddStatus sdd_detector_threshold(const struct SddDetector *det, double *threshold);

/**
 * Classifies every trigger window of `rec` into `out[..cap]`. `count`
 * receives the number of windows; when it exceeds `cap` the call returns
 * `BufferTooSmall` and writes nothing.
 *
 * Handles must be live, `out` valid for `cap` elements (or null with
 * `cap == 0`) and `count` a valid pointer.
 */
enum SddStatus sdd_detector_detect(const struct SddDetector *det,
                                   const struct SddRecording *rec,
                                   struct SddDetection *out,
                                   size_t cap,
                                   size_t *count);

/**
 * `det` must be null or a handle not yet freed.
 */
void sdd_detector_free(struct SddDetector *det);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDD_H */
