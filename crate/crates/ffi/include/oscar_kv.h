#ifndef OSCAR_KV_H
#define OSCAR_KV_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OscarStatus {
  OSCAR_STATUS_OK = 0,
  OSCAR_STATUS_NULL_POINTER = 1,
  OSCAR_STATUS_INVALID_ARGUMENT = 2,
  OSCAR_STATUS_DIMENSION = 3,
  OSCAR_STATUS_NON_FINITE = 4,
  OSCAR_STATUS_CONVERGENCE = 5,
  OSCAR_STATUS_FORMAT = 6,
  OSCAR_STATUS_IO = 7,
  OSCAR_STATUS_CONSISTENCY = 8,
  OSCAR_STATUS_BUFFER_TOO_SMALL = 9,
  OSCAR_STATUS_PANIC = 10,
} OscarStatus;

/**
 * A calibrated rotation bundle.
 */
typedef struct OscarBundle OscarBundle;

/**
 * Cache state for one kv-head of one request.
 */
typedef struct OscarCache OscarCache;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *oscar_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *oscar_last_error(void);

/**
 * Bytes needed to pack `len` codes of `bits` bits.
 */
size_t oscar_packed_len(size_t len, uint8_t bits);

/**
 * Effective bits per element with `protected` full-precision tokens out of `context`.
 *
 * # Safety
 * `out_bpe` must be a valid pointer to a `double`.
 */
enum OscarStatus oscar_effective_bpe(uint8_t bits,
                                     size_t group_size,
                                     uint32_t meta_bits,
                                     size_t protected_tokens,
                                     size_t context,
                                     double *out_bpe);

/**
 * Clips and quantizes one row of `len` values.
 *
 * Writes `oscar_packed_len(len, bits)` bytes to `packed` and `len / group_size`
 * scales and zero points. `tau` receives the clip threshold and may be null.
 *
 * # Safety
 * All non-null pointers must reference buffers of the stated capacities.
 */
enum OscarStatus oscar_quantize_row(const double *row,
                                    size_t len,
                                    uint8_t bits,
                                    size_t group_size,
                                    double clip_ratio,
                                    bool bf16_meta,
                                    uint8_t *packed,
                                    size_t packed_capacity,
                                    double *scales,
                                    double *zeros,
                                    size_t groups_capacity,
                                    double *tau);

/**
 * Reconstructs `len` values from packed codes and per-group scales and zero points.
 *
 * # Safety
 * `packed` must hold `oscar_packed_len(len, bits)` bytes, `scales` and `zeros`
 * `len / group_size` values each, and `out` room for `len` values.
 */
enum OscarStatus oscar_dequantize_row(const uint8_t *packed,
                                      size_t len,
                                      uint8_t bits,
                                      size_t group_size,
                                      const double *scales,
                                      const double *zeros,
                                      double *out_row);

/**
 * Loads a rotation bundle written by `oscar calibrate`.
 *
 * # Safety
 * `path` must be a nul-terminated UTF-8 string and `out_bundle` a valid pointer.
 */
enum OscarStatus oscar_bundle_load(const char *path, struct OscarBundle **out_bundle);

/**
 * Releases a bundle; null is ignored.
 *
 * # Safety
 * `bundle` must come from `oscar_bundle_load` and not be used afterwards.
 */
void oscar_bundle_free(struct OscarBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle and `out_dim` a valid pointer.
 */
enum OscarStatus oscar_bundle_head_dim(const struct OscarBundle *bundle, size_t *out_dim);

/**
 * Calibrated key and value clip ratios for one kv-head.
 *
 * # Safety
 * `bundle` must be a live handle; the outputs must be valid pointers.
 */
enum OscarStatus oscar_bundle_clip_ratios(const struct OscarBundle *bundle,
                                          size_t layer,
                                          size_t head,
                                          double *out_key,
                                          double *out_value);

/**
 * Creates an empty cache for one kv-head using the bundle's rotations and quantizers.
 *
 * # Safety
 * `bundle` must be a live handle and `out_cache` a valid pointer.
 */
enum OscarStatus oscar_cache_new(const struct OscarBundle *bundle,
                                 size_t layer,
                                 size_t head,
                                 size_t sink,
                                 size_t recent,
                                 struct OscarCache **out_cache);

/**
 * Releases a cache; null is ignored.
 *
 * # Safety
 * `cache` must come from `oscar_cache_new` and not be used afterwards.
 */
void oscar_cache_free(struct OscarCache *cache);

/**
 * Writes `rows` prompt tokens at once.
 *
 * # Safety
 * `keys` and `values` must each hold `rows × head_dim` values.
 */
enum OscarStatus oscar_cache_prefill(struct OscarCache *cache,
                                     const double *keys,
                                     const double *values,
                                     size_t rows);

/**
 * Appends one token, then attends `query` over the whole cache.
 *
 * # Safety
 * `query`, `key`, `value` and `out_attn` must each hold `head_dim` values.
 */
enum OscarStatus oscar_cache_decode(struct OscarCache *cache,
                                    const double *query,
                                    const double *key,
                                    const double *value,
                                    double *out_attn);

/**
 * Attends `query` over the current cache without appending.
 *
 * # Safety
 * `query` and `out_attn` must each hold `head_dim` values.
 */
enum OscarStatus oscar_cache_attend(const struct OscarCache *cache,
                                    const double *query,
                                    double *out_attn);

/**
 * Token counts of the sink, quantized history and recent segments.
 *
 * # Safety
 * `cache` must be a live handle; the outputs must be valid pointers.
 */
enum OscarStatus oscar_cache_lengths(const struct OscarCache *cache,
                                     size_t *out_sink,
                                     size_t *out_history,
                                     size_t *out_recent);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OSCAR_KV_H */
