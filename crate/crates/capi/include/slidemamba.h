#ifndef SLIDEMAMBA_H
#define SLIDEMAMBA_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible call.
 */
typedef enum {
  SM_OK = 0,
  SM_NULL_ARGUMENT = 1,
  SM_IO_ERROR = 2,
  SM_FORMAT_ERROR = 3,
  SM_INVALID_ARGUMENT = 4,
  SM_INFERENCE_ERROR = 5,
} SmStatus;

/**
 * Opaque tile-bag handle.
 */
typedef struct SmBag SmBag;

/**
 * Opaque trained model handle.
 */
typedef struct SmModel SmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sm_version(void);

/**
 * Message for the most recent error on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sm_last_error_message(void);

/**
 * Load a trained checkpoint.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 * A returned handle must be released with [`sm_model_free`].
 */
SmStatus sm_model_load(const char *path, SmModel **out);

/**
 * # Safety
 * `model` must be NULL or a pointer from [`sm_model_load`], not yet freed.
 */
void sm_model_free(SmModel *model);

/**
 * Number of model outputs (classes, or 1 for a risk head).
 *
 * # Safety
 * `model` must be a live handle from [`sm_model_load`].
 */
uintptr_t sm_model_num_outputs(const SmModel *model);

/**
 * Load a bag file (binary `.slbg` format).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 * A returned handle must be released with [`sm_bag_free`].
 */
SmStatus sm_bag_load(const char *path, SmBag **out);

/**
 * # Safety
 * `bag` must be NULL or a pointer from [`sm_bag_load`], not yet freed.
 */
void sm_bag_free(SmBag *bag);

/**
 * # Safety
 * `bag` must be a live handle from [`sm_bag_load`].
 */
uintptr_t sm_bag_num_tiles(const SmBag *bag);

/**
 * Memory-bounded streaming inference. Tiles are serialized under
 * `ordering` ("hilbert", "zorder", "rowmajor", "random"; NULL means
 * hilbert), chunked, and streamed in mini-batches of `inf_batch` chunks.
 * Logits are written to `logits_out`, which must hold
 * [`sm_model_num_outputs`] values.
 *
 * # Safety
 * `model` and `bag` must be live handles; `logits_out` must point to at
 * least `logits_len` writable doubles.
 */
SmStatus sm_infer(const SmModel *model,
                  const SmBag *bag,
                  uint32_t inf_batch,
                  const char *ordering,
                  double *logits_out,
                  uintptr_t logits_len);

/**
 * Per-tile attention scores in the bag's tile order, a distribution over
 * the bag. `scores_out` must hold [`sm_bag_num_tiles`] values.
 *
 * # Safety
 * `model` and `bag` must be live handles; `scores_out` must point to at
 * least `scores_len` writable doubles.
 */
SmStatus sm_attention_scores(const SmModel *model,
                             const SmBag *bag,
                             const char *ordering,
                             double *scores_out,
                             uintptr_t scores_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLIDEMAMBA_H */
