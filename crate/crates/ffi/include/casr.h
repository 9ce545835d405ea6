#ifndef CASR_H
#define CASR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CasrMode {
  CASR_MODE_CAUSAL = 0,
  CASR_MODE_NONCAUSAL = 1,
} CasrMode;

typedef enum CasrStatus {
  CASR_STATUS_OK = 0,
  CASR_STATUS_NULL_POINTER = 1,
  CASR_STATUS_IO = 2,
  CASR_STATUS_FORMAT = 3,
  CASR_STATUS_MISMATCH = 4,
  CASR_STATUS_INVALID_INPUT = 5,
  CASR_STATUS_INVALID_STATE = 6,
  CASR_STATUS_CONFIG = 7,
  CASR_STATUS_BUFFER_TOO_SMALL = 8,
  CASR_STATUS_INTERNAL = 9,
} CasrStatus;

/**
 * A loaded model.
 */
typedef struct CasrModel CasrModel;

/**
 * An open streaming session.
 */
typedef struct CasrStream CasrStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *casr_last_error(void);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CasrStatus casr_model_load(const char *path, struct CasrModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `casr_model_load` and have no open streams.
 */
void casr_model_free(struct CasrModel *model);

/**
 * Feature width and vocabulary size (blank excluded) of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CasrStatus casr_model_dims(const struct CasrModel *model,
                                size_t *input_dim,
                                size_t *vocab_size);

/**
 * Decodes a whole utterance of `num_frames × dim` row-major features.
 * `mode` takes a `CasrMode` value; `beam` 0 selects greedy search.
 *
 * # Safety
 * `frames` must hold `num_frames * dim` doubles and `tokens_out` room for
 * `capacity` values.
 */
enum CasrStatus casr_decode(const struct CasrModel *model,
                            const double *frames,
                            size_t num_frames,
                            size_t dim,
                            double frame_period_ms,
                            int32_t mode,
                            size_t beam,
                            size_t *tokens_out,
                            size_t capacity,
                            size_t *len_out);

/**
 * Opens a causal streaming session on `model`.
 *
 * # Safety
 * `model` must stay alive until the stream is freed; `out` must be writable.
 */
enum CasrStatus casr_stream_open(const struct CasrModel *model,
                                 double frame_period_ms,
                                 struct CasrStream **out);

/**
 * Appends one frame of `dim` values and returns the tokens it released.
 *
 * # Safety
 * `frame` must hold `dim` doubles and `tokens_out` room for `capacity`.
 */
enum CasrStatus casr_stream_push(struct CasrStream *stream,
                                 const double *frame,
                                 size_t dim,
                                 size_t *tokens_out,
                                 size_t capacity,
                                 size_t *len_out);

/**
 * Flushes the stream and returns the complete hypothesis. The stream
 * accepts no further frames; calling again returns the same hypothesis.
 *
 * # Safety
 * `tokens_out` must have room for `capacity` values.
 */
enum CasrStatus casr_stream_finalize(struct CasrStream *stream,
                                     size_t *tokens_out,
                                     size_t capacity,
                                     size_t *len_out);

/**
 * Releases a stream handle. Null is ignored.
 *
 * # Safety
 * `stream` must come from `casr_stream_open`.
 */
void casr_stream_free(struct CasrStream *stream);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASR_H */
