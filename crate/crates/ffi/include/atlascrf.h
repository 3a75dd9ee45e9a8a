#ifndef ATLASCRF_H
#define ATLASCRF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum AcStatus {
  AC_STATUS_OK = 0,
  // A required pointer argument was null.
  AC_STATUS_NULL_ARGUMENT = 1,
  // A path was not valid UTF-8, or a scalar argument was out of range.
  AC_STATUS_INVALID_ARGUMENT = 2,
  AC_STATUS_IO = 3,
  // Malformed or inconsistent file contents.
  AC_STATUS_FORMAT = 4,
  // Volumes with incompatible shapes or class counts.
  AC_STATUS_SHAPE = 5,
  // A NaN or infinity reached a computation.
  AC_STATUS_NON_FINITE = 6,
  // A checkpoint failed its digest or consistency checks.
  AC_STATUS_INTEGRITY = 7,
  // Caller buffer too small; the error message states the required length.
  AC_STATUS_BUFFER_TOO_SMALL = 8,
  AC_STATUS_INTERNAL = 9,
} AcStatus;

// Atlas scan and label probabilities.
typedef struct AcAtlas AcAtlas;

// Integer label map.
typedef struct AcLabels AcLabels;

// Trained CRF parameters and unary model.
typedef struct AcModel AcModel;

// K-channel probability or logit volume.
typedef struct AcProb AcProb;

// Scalar intensity volume.
typedef struct AcScalar AcScalar;

// Inference settings for [`ac_infer_unary`].
typedef struct AcInferOptions {
  size_t iters;
  bool enable_prior;
  bool enable_smooth;
  // Translation search radius in voxels; 0 uses the atlas as given.
  size_t align_translation;
} AcInferOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *ac_last_error(void);

// Library version as a static NUL-terminated string.
const char *ac_version(void);

// Copies `d*h*w` intensities (x fastest) into a new volume.
//
// # Safety
// `data` must point to `d*h*w` readable doubles; `out` must be writable.
enum AcStatus ac_scalar_new(size_t d,
                            size_t h,
                            size_t w,
                            const double *data,
                            struct AcScalar **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_scalar_read(const char *path, struct AcScalar **out);

// # Safety
// `v` must be null or a handle from this library, not yet freed.
void ac_scalar_free(struct AcScalar *v);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_prob_read(const char *path, struct AcProb **out);

// Shape of a probability volume. Any output pointer may be null.
//
// # Safety
// `v` must be a live handle; non-null outputs must be writable.
enum AcStatus ac_prob_shape(const struct AcProb *v, size_t *k, size_t *d, size_t *h, size_t *w);

// Copies the `k*d*h*w` values, channel-major, into `buf`.
//
// # Safety
// `v` must be a live handle; `buf` must hold `len` writable doubles.
enum AcStatus ac_prob_copy(const struct AcProb *v, double *buf, size_t len);

// # Safety
// `v` must be null or a handle from this library, not yet freed.
void ac_prob_free(struct AcProb *v);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_labels_read(const char *path, struct AcLabels **out);

// # Safety
// `v` must be a live handle; `path` a NUL-terminated string.
enum AcStatus ac_labels_write(const struct AcLabels *v, const char *path);

// Copies the `d*h*w` labels into `buf`.
//
// # Safety
// `v` must be a live handle; `buf` must hold `len` writable values.
enum AcStatus ac_labels_copy(const struct AcLabels *v, uint16_t *buf, size_t len);

// Per-voxel argmax of a probability volume.
//
// # Safety
// `q` must be a live handle; `out` must be writable.
enum AcStatus ac_argmax(const struct AcProb *q, struct AcLabels **out);

// Dice overlap of one class.
//
// # Safety
// Handles must be live; `out` must be writable.
enum AcStatus ac_dice(const struct AcLabels *pred,
                      const struct AcLabels *gt,
                      size_t class_,
                      double *out);

// # Safety
// `v` must be null or a handle from this library, not yet freed.
void ac_labels_free(struct AcLabels *v);

// Loads an atlas from its JSON sidecar.
//
// # Safety
// `sidecar` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_atlas_read(const char *sidecar, struct AcAtlas **out);

// # Safety
// `v` must be null or a handle from this library, not yet freed.
void ac_atlas_free(struct AcAtlas *v);

// Loads and verifies a checkpoint directory or its manifest.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AcStatus ac_model_load(const char *path, struct AcModel **out);

// Number of classes the model predicts.
//
// # Safety
// `m` must be a live handle.
size_t ac_model_classes(const struct AcModel *m);

// # Safety
// `v` must be null or a handle from this library, not yet freed.
void ac_model_free(struct AcModel *v);

// Library defaults for [`AcInferOptions`].
struct AcInferOptions ac_infer_options_default(void);

// Mean-field inference with a trained model. Writes the final marginals.
//
// # Safety
// Handles must be live; `out` must be writable.
enum AcStatus ac_infer(const struct AcModel *model,
                       const struct AcScalar *target,
                       const struct AcAtlas *atlas,
                       size_t align_shift,
                       struct AcProb **out);

// Mean-field inference on precomputed unaries with default CRF weights.
// Normalized unaries are read as probabilities, anything else as logits.
//
// # Safety
// Handles must be live; `opts` may be null for defaults; `out` must be writable.
enum AcStatus ac_infer_unary(const struct AcScalar *target,
                             const struct AcProb *unary,
                             const struct AcAtlas *atlas,
                             const struct AcInferOptions *opts,
                             struct AcProb **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATLASCRF_H */
