#ifndef PARAGON_H
#define PARAGON_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ParagonStatus {
  PARAGON_STATUS_OK = 0,
  PARAGON_STATUS_NULL_POINTER = 1,
  PARAGON_STATUS_INVALID_ARGUMENT = 2,
  PARAGON_STATUS_IO = 3,
  PARAGON_STATUS_SHAPE = 4,
  PARAGON_STATUS_NUMERIC = 5,
  PARAGON_STATUS_BUFFER_TOO_SMALL = 6,
  PARAGON_STATUS_PANIC = 7,
  PARAGON_STATUS_INTERNAL = 8,
} ParagonStatus;

/**
 * A trained parameter generator loaded from its artifact directory.
 */
typedef struct ParagonGenerator ParagonGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the full message length excluding the terminator, so a
 * return value `>= cap` means the message was truncated.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t paragon_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *paragon_version(void);

/**
 * Loads a generator from the directory written by `paragon train-generator`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ParagonStatus paragon_generator_load(const char *dir, struct ParagonGenerator **out);

/**
 * Releases a generator. Null is a no-op.
 *
 * # Safety
 * `g` must come from [`paragon_generator_load`] and not be used afterwards.
 */
void paragon_generator_free(struct ParagonGenerator *g);

/**
 * Number of preference weights the generator is conditioned on.
 *
 * # Safety
 * `g` must be a live handle.
 */
size_t paragon_generator_weight_len(const struct ParagonGenerator *g);

/**
 * Length of a generated adapter's flattened parameter vector.
 *
 * # Safety
 * `g` must be a live handle.
 */
size_t paragon_generator_param_len(const struct ParagonGenerator *g);

/**
 * Samples one adapter for `weights` with guidance scale `guidance` into
 * `out`, which must hold at least [`paragon_generator_param_len`] floats.
 *
 * # Safety
 * `weights` must point to `n_weights` doubles and `out` to `out_len` floats.
 */
enum ParagonStatus paragon_generator_sample(const struct ParagonGenerator *g,
                                            const double *weights,
                                            size_t n_weights,
                                            double guidance,
                                            uint64_t seed,
                                            float *out,
                                            size_t out_len);

/**
 * NDCG@k of one ranked list with a single relevant `target`.
 *
 * # Safety
 * `ranked` must point to `n` item ids and `out` be writable.
 */
enum ParagonStatus paragon_ndcg_at_k(const uint32_t *ranked,
                                     size_t n,
                                     uint32_t target,
                                     size_t k,
                                     double *out);

/**
 * α-NDCG@k of `order` over a row-major `n × m` 0/1 category matrix.
 *
 * # Safety
 * `labels` must point to `n * m` doubles, `order` to `order_len` indices and
 * `out` be writable.
 */
enum ParagonStatus paragon_alpha_ndcg_at_k(const double *labels,
                                           size_t n,
                                           size_t m,
                                           const size_t *order,
                                           size_t order_len,
                                           double alpha,
                                           size_t k,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARAGON_H */
