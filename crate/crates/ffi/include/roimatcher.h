#ifndef ROIMATCHER_H
#define ROIMATCHER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum {
  RM_STATUS_OK = 0,
  // A required pointer argument was null.
  RM_STATUS_NULL_ARGUMENT = 1,
  // Malformed argument: bad sizes, empty mask, non-UTF-8 path.
  RM_STATUS_INVALID_ARGUMENT = 2,
  // File could not be read, written or parsed.
  RM_STATUS_IO = 3,
  // Invalid configuration or checkpoint version mismatch.
  RM_STATUS_CONFIG = 4,
  // The network produced non-finite values.
  RM_STATUS_NUMERIC = 5,
  // Index outside the valid range.
  RM_STATUS_OUT_OF_RANGE = 6,
  // Unexpected internal failure.
  RM_STATUS_INTERNAL = 7,
} RmStatus;

// Opaque model handle.
typedef struct RmModel RmModel;

// Opaque result handle.
typedef struct RmResult RmResult;

// One matched instance in target-image pixel coordinates. The box is
// inclusive: `x0 <= x <= x1`, `y0 <= y <= y1`.
typedef struct {
  uint32_t id;
  uint32_t x0;
  uint32_t y0;
  uint32_t x1;
  uint32_t y1;
  uint64_t area;
  double score;
} RmInstance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rm_version(void);

// Message describing the last failure on this thread; empty after a
// success. Valid until the next call on the same thread.
const char *rm_last_error_message(void);

// Creates a freshly initialised model with default settings except for the
// input size, base channel width and seed.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
RmStatus rm_model_new(uint32_t input_height,
                      uint32_t input_width,
                      uint32_t base_channels,
                      uint64_t seed,
                      RmModel **out);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
RmStatus rm_model_load(const char *path, RmModel **out);

// Writes the model to a checkpoint file.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
RmStatus rm_model_save(const RmModel *model, const char *path);

// Network input size of the model.
//
// # Safety
// All pointers must be valid.
RmStatus rm_model_input_size(const RmModel *model, uint32_t *height, uint32_t *width);

// Sets the decoding thresholds used by `rm_match`.
//
// # Safety
// `model` must come from this library.
RmStatus rm_model_set_thresholds(RmModel *model,
                                 double region_threshold,
                                 double kernel_threshold,
                                 uint32_t min_area);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void rm_model_free(RmModel *model);

// Finds every region in the target image that matches the masked region of
// the reference image. The reference mask has the reference image's size.
//
// # Safety
// Image buffers must hold `height * width * 3` bytes, the mask
// `ref_height * ref_width` bytes; `out` must be a valid handle slot.
RmStatus rm_match(const RmModel *model,
                  const uint8_t *ref_rgb,
                  uint32_t ref_height,
                  uint32_t ref_width,
                  const uint8_t *ref_mask,
                  const uint8_t *tgt_rgb,
                  uint32_t tgt_height,
                  uint32_t tgt_width,
                  RmResult **out);

// Number of matched instances; 0 for a null handle.
//
// # Safety
// `result` must come from this library or be null.
uintptr_t rm_result_count(const RmResult *result);

// Copies instance `index` into `out`.
//
// # Safety
// `result` must come from this library; `out` must be writable.
RmStatus rm_result_instance(const RmResult *result, uintptr_t index, RmInstance *out);

// Copies the merged match mask at target resolution into `buffer` as 0/255
// bytes. `len` must be at least `tgt_height * tgt_width`.
//
// # Safety
// `buffer` must hold `len` writable bytes.
RmStatus rm_result_mask(const RmResult *result, uint8_t *buffer, uintptr_t len);

// Releases a result. Null is ignored.
//
// # Safety
// `result` must come from this library and not be used afterwards.
void rm_result_free(RmResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROIMATCHER_H */
