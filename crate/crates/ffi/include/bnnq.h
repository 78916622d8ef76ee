#ifndef BNNQ_H
#define BNNQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BnnqStatus {
  BNNQ_STATUS_OK = 0,
  BNNQ_STATUS_NULL_POINTER = 1,
  BNNQ_STATUS_INVALID_ARGUMENT = 2,
  BNNQ_STATUS_IO = 3,
  /**
   * Malformed model bytes.
   */
  BNNQ_STATUS_FORMAT = 4,
  /**
   * Graph or tensor shapes that do not fit together.
   */
  BNNQ_STATUS_SHAPE = 5,
  /**
   * No usable quantization grid.
   */
  BNNQ_STATUS_QUANTIZATION = 6,
  BNNQ_STATUS_PANIC = 7,
} BnnqStatus;

/**
 * Opaque model handle.
 */
typedef struct BnnqModel BnnqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure, or null after a
 * success. Valid until the next call on this thread.
 */
const char *bnnq_last_error(void);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for one write.
 */
enum BnnqStatus bnnq_model_load(const char *path, struct BnnqModel **out);

/**
 * Loads a model from `len` bytes at `data`.
 *
 * # Safety
 * `data` is valid for `len` reads; `out` is valid for one write.
 */
enum BnnqStatus bnnq_model_load_bytes(const uint8_t *data, size_t len, struct BnnqModel **out);

/**
 * Writes `m` to a model file.
 *
 * # Safety
 * `m` is a live handle; `path` is a NUL-terminated string.
 */
enum BnnqStatus bnnq_model_save(const struct BnnqModel *m, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `m` is null or a handle not yet freed.
 */
void bnnq_model_free(struct BnnqModel *m);

/**
 * Quantizes a float model at `bits` (2..=16) into a new handle: the
 * zero-overhead form, or the Q/D-wrapped form when `conventional != 0`.
 *
 * # Safety
 * `m` is a live handle; `out` is valid for one write.
 */
enum BnnqStatus bnnq_model_transform(const struct BnnqModel *m,
                                     uint8_t bits,
                                     int32_t conventional,
                                     struct BnnqModel **out);

/**
 * Classifies one `height x width` grayscale image (`height * width`
 * bytes, row-major).
 *
 * # Safety
 * `m` is a live handle; `pixels` is valid for `height * width` reads;
 * `out_class` is valid for one write.
 */
enum BnnqStatus bnnq_model_predict(const struct BnnqModel *m,
                                   const uint8_t *pixels,
                                   size_t height,
                                   size_t width,
                                   size_t *out_class);

/**
 * Total parameter memory in bits.
 *
 * # Safety
 * `m` is a live handle; `out_bits` is valid for one write.
 */
enum BnnqStatus bnnq_model_footprint(const struct BnnqModel *m, uint64_t *out_bits);

/**
 * Number of graph nodes, Q/D nodes included.
 *
 * # Safety
 * `m` is a live handle; `out` is valid for one write.
 */
enum BnnqStatus bnnq_model_node_count(const struct BnnqModel *m, size_t *out);

/**
 * Execution mode code: 0 float, 1 conventional, 2 zero-overhead.
 *
 * # Safety
 * `m` is a live handle; `out` is valid for one write.
 */
enum BnnqStatus bnnq_model_mode(const struct BnnqModel *m, uint8_t *out);

/**
 * A corrupted copy of `m`: trial `trial` of the bit-flip campaign seeded
 * by `seed` at per-bit rate `rate`. `target` is `all`, a layer name, or
 * `kind:<slug>`; null means `all`. `out_flips` may be null.
 *
 * # Safety
 * `m` is a live handle; `target` is null or NUL-terminated; `out` is valid
 * for one write; `out_flips` is null or valid for one write.
 */
enum BnnqStatus bnnq_model_inject(const struct BnnqModel *m,
                                  double rate,
                                  uint64_t seed,
                                  uint64_t trial,
                                  const char *target,
                                  struct BnnqModel **out,
                                  uint64_t *out_flips);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BNNQ_H */
