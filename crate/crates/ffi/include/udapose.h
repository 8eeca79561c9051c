/* C interface for the udapose low-light synthesis and pose decoding library. */

#ifndef UDAPOSE_H
#define UDAPOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of [`UdaposeInstance::keypoints`]: x,y pairs for every joint.
 */
#define UDAPOSE_KEYPOINT_VALUES 28

/**
 * Status code returned by every fallible function.
 */
typedef enum UdaposeStatus {
  UDAPOSE_STATUS_OK = 0,
  UDAPOSE_STATUS_NULL_ARG = 1,
  UDAPOSE_STATUS_INVALID_ARG = 2,
  UDAPOSE_STATUS_IO = 3,
  UDAPOSE_STATUS_FORMAT = 4,
  UDAPOSE_STATUS_NUMERIC = 5,
  UDAPOSE_STATUS_BUFFER_TOO_SMALL = 6,
  UDAPOSE_STATUS_INTERNAL = 7,
} UdaposeStatus;

/**
 * Opaque handle around trained (or freshly initialized) adapter weights.
 */
typedef struct UdaposeAdapters UdaposeAdapters;

/**
 * Opaque handle around a pose decoder checkpoint.
 */
typedef struct UdaposePose UdaposePose;

/**
 * One detected person: confidence, normalized center-size box, and
 * normalized keypoint coordinates as x,y pairs in canonical joint order.
 */
typedef struct UdaposeInstance {
  double score;
  double box_cxcywh[4];
  double keypoints[UDAPOSE_KEYPOINT_VALUES];
} UdaposeInstance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *udapose_version(void);

/**
 * Number of keypoints per instance (size of the canonical joint order).
 */
size_t udapose_num_keypoints(void);

/**
 * Message of the calling thread's most recent failure. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *udapose_last_error(void);

/**
 * Create untrained adapter weights seeded deterministically.
 *
 * # Safety
 * `out` must be a valid pointer to receive the handle.
 */
enum UdaposeStatus udapose_adapters_new(uint64_t seed, struct UdaposeAdapters **out);

/**
 * Load adapter weights from a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid to receive the handle.
 */
enum UdaposeStatus udapose_adapters_load(const char *path, struct UdaposeAdapters **out);

/**
 * Release an adapter handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from an `udapose_adapters_*` constructor, once.
 */
void udapose_adapters_free(struct UdaposeAdapters *handle);

/**
 * Load a pose decoder checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid to receive the handle.
 */
enum UdaposeStatus udapose_pose_load(const char *path, struct UdaposePose **out);

/**
 * Release a pose handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from `udapose_pose_load`, once.
 */
void udapose_pose_free(struct UdaposePose *handle);

/**
 * Number of instance slots a pose handle emits per image.
 *
 * # Safety
 * `handle` must be a live pose handle; `out` must be valid.
 */
enum UdaposeStatus udapose_pose_num_slots(const struct UdaposePose *handle, size_t *out);

/**
 * Rescale an image so its global mean hits the reference intensity
 * (the default input normalization), writing `height*width*channels`
 * doubles to `out`.
 *
 * # Safety
 * `data` and `out` must each point to `height * width * channels` doubles.
 */
enum UdaposeStatus udapose_normalize_intensity(const double *data,
                                               size_t height,
                                               size_t width,
                                               size_t channels,
                                               double target,
                                               double *out);

/**
 * Run the full synthesis pipeline: turn a well-lit image into a synthetic
 * low-light one styled after `reference`. Writes
 * `height*width*channels` doubles (the well-lit dims) to `out`.
 *
 * # Safety
 * Buffers must match their stated dims; `out` must hold the well-lit size.
 */
enum UdaposeStatus udapose_synthesize(const struct UdaposeAdapters *adapters,
                                      const double *well_lit,
                                      size_t height,
                                      size_t width,
                                      size_t channels,
                                      const double *reference,
                                      size_t ref_height,
                                      size_t ref_width,
                                      size_t ref_channels,
                                      double cutoff_radius,
                                      double *out);

/**
 * Detect pose instances in an image. `count` always receives the number of
 * available instances; when `capacity` is too small the status is
 * `BUFFER_TOO_SMALL` and `instances` is untouched.
 *
 * # Safety
 * `data` must match its dims; `instances` must hold `capacity` entries.
 */
enum UdaposeStatus udapose_pose_infer(const struct UdaposePose *handle,
                                      const double *data,
                                      size_t height,
                                      size_t width,
                                      size_t channels,
                                      struct UdaposeInstance *instances,
                                      size_t capacity,
                                      size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UDAPOSE_H */
