#ifndef TSR_H
#define TSR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TsrStatus {
  TSR_STATUS_OK = 0,
  TSR_STATUS_NULL_ARGUMENT = 1,
  TSR_STATUS_INVALID_ARGUMENT = 2,
  TSR_STATUS_IO = 3,
  TSR_STATUS_DECODE = 4,
  // Degenerate input, e.g. a single-level histogram.
  TSR_STATUS_DEGENERATE = 5,
  // No tumor or stroma found.
  TSR_STATUS_UNSCORABLE = 6,
  // Stain estimation failed.
  TSR_STATUS_STAIN = 7,
  TSR_STATUS_MODEL = 8,
  TSR_STATUS_PANIC = 9,
} TsrStatus;

// Decoded RGB image.
typedef struct TsrImage TsrImage;

// MiniNet classifier.
typedef struct TsrNet TsrNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t tsr_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *tsr_version(void);

// Reads a binary PPM (and its optional `.meta.json` sidecar).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TsrStatus tsr_image_read(const char *path, struct TsrImage **out);

// Copies `width * height * 3` interleaved RGB bytes into a new image.
//
// # Safety
// `data` must point to `width * height * 3` readable bytes.
enum TsrStatus tsr_image_from_rgb(const uint8_t *data,
                                  size_t width,
                                  size_t height,
                                  struct TsrImage **out);

// Releases an image; null is ignored.
//
// # Safety
// `img` must come from this library and not be used afterwards.
void tsr_image_free(struct TsrImage *img);

// # Safety
// Pointers must be valid.
enum TsrStatus tsr_image_dims(const struct TsrImage *img, size_t *width, size_t *height);

// Copies the pixels into `buf` (`width * height * 3` bytes).
//
// # Safety
// `buf` must point to `len` writable bytes.
enum TsrStatus tsr_image_pixels(const struct TsrImage *img, uint8_t *buf, size_t len);

// Otsu threshold of the image's luminance histogram.
//
// # Safety
// Pointers must be valid.
enum TsrStatus tsr_image_otsu(const struct TsrImage *img, uint8_t *out);

// Stain-normalizes `img` to the built-in reference profile.
//
// # Safety
// Pointers must be valid.
enum TsrStatus tsr_image_normalize(const struct TsrImage *img, struct TsrImage **out);

// `n_stroma / (n_stroma + n_tumor)`.
//
// # Safety
// `out` must be writable.
enum TsrStatus tsr_ratio(uint64_t n_stroma, uint64_t n_tumor, double *out);

// Loads a MiniNet checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TsrStatus tsr_net_load(const char *path, struct TsrNet **out);

// Releases a network; null is ignored.
//
// # Safety
// `net` must come from this library and not be used afterwards.
void tsr_net_free(struct TsrNet *net);

// Class probabilities (tumor, stroma, other) of a 224x224 patch, and the
// predicted class code (1 tumor, 2 stroma, 3 other).
//
// # Safety
// `probs` must point to 3 writable doubles; `label` may be null.
enum TsrStatus tsr_net_classify(const struct TsrNet *net,
                                const struct TsrImage *patch,
                                double *probs,
                                uint8_t *label);

// Scores a whole slide with default settings: tissue mask, 224-pixel grid,
// per-patch normalization, classification. Writes patch counts
// (tumor, stroma, other) and the TSR.
//
// # Safety
// `counts` must point to 3 writable u64s; `tsr` must be writable.
enum TsrStatus tsr_score_image(const struct TsrImage *img,
                               const struct TsrNet *net,
                               uint64_t *counts,
                               double *tsr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSR_H */
