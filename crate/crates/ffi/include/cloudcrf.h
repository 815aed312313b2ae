#ifndef CLOUDCRF_H
#define CLOUDCRF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_ARGUMENT = 2,
  CC_STATUS_IO = 3,
  CC_STATUS_DECODE = 4,
  CC_STATUS_DIMENSION_MISMATCH = 5,
  CC_STATUS_EMPTY_INPUT = 6,
  CC_STATUS_DEGENERATE = 7,
  CC_STATUS_BUFFER_TOO_SMALL = 8,
  CC_STATUS_PANIC = 9,
} CcStatus;

// Opaque RGB image with an optional ignore mask.
typedef struct CcImage CcImage;

// Opaque CRF parameter set.
typedef struct CcParams CcParams;

// Segmentation and inference settings for [`cc_detect`].
typedef struct CcDetectOptions {
  double spatial_bandwidth;
  double range_bandwidth;
  uint32_t min_region_size;
  double neighbor_radius;
  uint32_t max_sweeps;
  bool exact_local;
} CcDetectOptions;

// Pixel-level comparison of a predicted mask against truth. Undefined
// ratios are NaN.
typedef struct CcMetrics {
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
  double accuracy;
  double precision;
  double recall;
} CcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *cc_last_error(void);

// Load a PNG or PPM image; a `<stem>.mask.png` sidecar is applied.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CcStatus cc_image_load(const char *path, struct CcImage **out);

// Build an image from `width * height * 3` interleaved RGB bytes.
//
// # Safety
// `rgb` must point to `len` readable bytes and `out` must be writable.
enum CcStatus cc_image_from_rgb(uint32_t width,
                                uint32_t height,
                                const uint8_t *rgb,
                                size_t len,
                                struct CcImage **out);

// # Safety
// `img` must be null or a handle from this library, freed at most once.
void cc_image_free(struct CcImage *img);

// # Safety
// `img` must be a live handle; the dimension pointers may be null.
enum CcStatus cc_image_dims(const struct CcImage *img, uint32_t *width, uint32_t *height);

// Fill per-pixel NBR and NSV buffers of `len >= width * height`. Either
// buffer may be null to skip it. Ignored pixels are NaN.
//
// # Safety
// Non-null buffers must hold `len` writable doubles.
enum CcStatus cc_features(const struct CcImage *img, double *nbr, double *nsv, size_t len);

struct CcDetectOptions cc_detect_options_default(void);

// Segment and label an image, writing `width * height` mask bytes.
// `opts` may be null for the defaults.
//
// # Safety
// Handles must be live, `opts` null or readable, `mask` `len` bytes.
enum CcStatus cc_detect(const struct CcImage *img,
                        const struct CcParams *params,
                        const struct CcDetectOptions *opts,
                        uint8_t *mask,
                        size_t len);

// # Safety
// `out` must be writable.
enum CcStatus cc_params_new(double alpha0, double alpha1, double beta, struct CcParams **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum CcStatus cc_params_load(const char *path, struct CcParams **out);

// # Safety
// `params` must be live and `path` NUL-terminated.
enum CcStatus cc_params_save(const struct CcParams *params, const char *path);

// # Safety
// `params` must be live; output pointers may be null.
enum CcStatus cc_params_get(const struct CcParams *params,
                            double *alpha0,
                            double *alpha1,
                            double *beta);

// # Safety
// `params` must be null or a handle from this library, freed at most once.
void cc_params_free(struct CcParams *params);

// Render a synthetic sky with default colours. The truth mask is written
// to `truth` when it is non-null.
//
// # Safety
// `out` must be writable; `truth` null or `len` writable bytes.
enum CcStatus cc_synth(uint32_t width,
                       uint32_t height,
                       uint32_t n_clouds,
                       uint64_t seed,
                       struct CcImage **out,
                       uint8_t *truth,
                       size_t len);

// Compare two mask buffers of `len` bytes each. Pixels that are ignore
// (neither near 0 nor near 255) in either mask are skipped.
//
// # Safety
// `pred` and `truth` must hold `len` readable bytes; `out` writable.
enum CcStatus cc_metrics(const uint8_t *pred,
                         const uint8_t *truth,
                         size_t len,
                         struct CcMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLOUDCRF_H */
