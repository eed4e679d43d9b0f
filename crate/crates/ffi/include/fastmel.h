#ifndef FASTMEL_H
#define FASTMEL_H

/* Generated from src/lib.rs by build.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FastmelStatus {
  FASTMEL_STATUS_OK = 0,
  FASTMEL_STATUS_NULL_POINTER = 1,
  FASTMEL_STATUS_CONFIG = 2,
  FASTMEL_STATUS_INPUT = 3,
  FASTMEL_STATUS_DIMENSION = 4,
  FASTMEL_STATUS_INTEGRITY = 5,
  FASTMEL_STATUS_FORMAT = 6,
  FASTMEL_STATUS_IO = 7,
  FASTMEL_STATUS_NUMERIC = 8,
  FASTMEL_STATUS_EMPTY_OUTPUT = 9,
  FASTMEL_STATUS_PANIC = 10,
} FastmelStatus;

/**
 * A synthesized spectrogram and the durations that produced it.
 */
typedef struct FastmelMel FastmelMel;

/**
 * A loaded parallel model.
 */
typedef struct FastmelModel FastmelModel;

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fastmel_last_error(void);

/**
 * Loads a student checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer to write to.
 */
enum FastmelStatus fastmel_model_load(const char *path, struct FastmelModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`fastmel_model_load`] not yet freed.
 */
void fastmel_model_free(struct FastmelModel *model);

/**
 * Mel channels per frame, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fastmel_model_mel_dim(const struct FastmelModel *model);

/**
 * Synthesizes `n` phonemes at speed factor `alpha`, lengthening phoneme
 * `break_positions[i]` by `break_frames[i]` frames for each of the
 * `n_breaks` breaks (both arrays may be NULL when `n_breaks` is 0).
 *
 * # Safety
 * `phonemes` must point to `n` readable values, the break arrays to
 * `n_breaks` values each, `model` must be live and `out` writable.
 */
enum FastmelStatus fastmel_synthesize(const struct FastmelModel *model,
                                      const uint32_t *phonemes,
                                      size_t n,
                                      double alpha,
                                      const size_t *break_positions,
                                      const size_t *break_frames,
                                      size_t n_breaks,
                                      struct FastmelMel **out);

/**
 * # Safety
 * `mel` must be NULL or a handle from [`fastmel_synthesize`] not yet freed.
 */
void fastmel_mel_free(struct FastmelMel *mel);

/**
 * # Safety
 * `mel` must be NULL or a live handle.
 */
size_t fastmel_mel_frames(const struct FastmelMel *mel);

/**
 * # Safety
 * `mel` must be NULL or a live handle.
 */
size_t fastmel_mel_dim(const struct FastmelMel *mel);

/**
 * Row-major `frames × dim` values, owned by the handle.
 *
 * # Safety
 * `mel` must be NULL or a live handle; the data lives as long as the handle.
 */
const double *fastmel_mel_data(const struct FastmelMel *mel);

/**
 * Per-phoneme frame counts used for the spectrogram; their sum is the frame count.
 *
 * # Safety
 * `mel` must be NULL or a live handle and `len` NULL or writable.
 */
const size_t *fastmel_mel_durations(const struct FastmelMel *mel, size_t *len);

/**
 * Focus rate of a row-major `frames × phonemes` attention matrix.
 *
 * # Safety
 * `weights` must point to `frames × phonemes` values and `out` be writable.
 */
enum FastmelStatus fastmel_focus_rate(const double *weights,
                                      size_t frames,
                                      size_t phonemes,
                                      double *out);

/**
 * Writes `phonemes` durations (frames whose attention peaks on each phoneme).
 *
 * # Safety
 * `weights` must point to `frames × phonemes` values and `out` to `phonemes` writable slots.
 */
enum FastmelStatus fastmel_extract_durations(const double *weights,
                                             size_t frames,
                                             size_t phonemes,
                                             size_t *out);

#endif  /* FASTMEL_H */
