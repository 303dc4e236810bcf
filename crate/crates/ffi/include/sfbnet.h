#ifndef SFBNET_H
#define SFBNET_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SfbnetStatus {
  SFBNET_STATUS_OK = 0,
  SFBNET_STATUS_NULL_POINTER = 1,
  SFBNET_STATUS_INVALID_ARGUMENT = 2,
  SFBNET_STATUS_SHAPE = 3,
  SFBNET_STATUS_CONFIG = 4,
  SFBNET_STATUS_DATA = 5,
  SFBNET_STATUS_NUMERICAL = 6,
  SFBNET_STATUS_IO = 7,
  SFBNET_STATUS_PANIC = 8,
} SfbnetStatus;

// Opaque model handle.
typedef struct SfbnetModel SfbnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on the same thread.
const char *sfbnet_last_error(void);

// Builds a freshly initialized model.
//
// `config_json` is a JSON model configuration; null selects the built-in
// 32x32 tiny configuration.
//
// # Safety
// `config_json` must be null or a NUL-terminated string, and `out` must be
// a valid pointer to writable storage for one handle.
enum SfbnetStatus sfbnet_model_new(const char *config_json, struct SfbnetModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`sfbnet_model_new`] that has not
// been freed yet.
void sfbnet_model_free(struct SfbnetModel *model);

// Loads checkpoint weights into `model`. Shapes must match the model's
// configuration.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum SfbnetStatus sfbnet_model_load(struct SfbnetModel *model, const char *path);

// Writes the model weights as a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum SfbnetStatus sfbnet_model_save(const struct SfbnetModel *model, const char *path);

// Input height, width and number of output classes.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum SfbnetStatus sfbnet_model_dims(const struct SfbnetModel *model,
                                    size_t *height,
                                    size_t *width,
                                    size_t *classes);

// # Safety
// `model` must be a live handle and `out` writable.
enum SfbnetStatus sfbnet_model_num_parameters(const struct SfbnetModel *model, uint64_t *out);

// Analytic forward FLOPs for one image.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum SfbnetStatus sfbnet_model_flops(const struct SfbnetModel *model, double *out);

// Class probabilities for `batch` images.
//
// `image` holds `batch * H * W` floats; `probs` receives
// `batch * classes * H * W` floats and `probs_len` must equal that count.
// With `tta` set, predictions are averaged over the four mirrored inputs.
//
// # Safety
// `model` must be a live handle; `image` and `probs` must point to arrays
// of the stated sizes.
enum SfbnetStatus sfbnet_model_predict(struct SfbnetModel *model,
                                       const float *image,
                                       size_t batch,
                                       bool tta,
                                       float *probs,
                                       size_t probs_len);

// Label maps (`batch * H * W` class ids) for `batch` images, optionally
// with mirror averaging and largest-component filtering.
//
// # Safety
// `model` must be a live handle; `image` must hold `batch * H * W` floats
// and `labels` room for `batch * H * W` integers.
enum SfbnetStatus sfbnet_model_segment(struct SfbnetModel *model,
                                       const float *image,
                                       size_t batch,
                                       bool tta,
                                       bool postprocess,
                                       int32_t *labels);

// Dice overlap of `class` between two label arrays of length `len`.
// Returns 1 when the class is absent from both.
//
// # Safety
// `pred` and `truth` must hold `len` integers; `out` must be writable.
enum SfbnetStatus sfbnet_dice(const int32_t *pred,
                              const int32_t *truth,
                              size_t len,
                              int32_t class_id,
                              double *out);

// Keeps the largest 4-connected foreground component of an `h x w` label
// plane and sets everything else to background.
//
// # Safety
// `labels` and `out` must each hold `h * w` integers; they may alias.
enum SfbnetStatus sfbnet_largest_component(const int32_t *labels,
                                           size_t height,
                                           size_t width,
                                           int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFBNET_H */
