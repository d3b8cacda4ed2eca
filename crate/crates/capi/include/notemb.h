#ifndef NOTEMB_H
#define NOTEMB_H

/* Generated by cbindgen from notemb-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Item modality tags accepted by [`ne_encode`].
 */
typedef enum {
  NE_MODALITY_IMAGE = 0,
  NE_MODALITY_TEXT = 1,
  NE_MODALITY_OCR = 2,
} NeModality;

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  NE_STATUS_OK = 0,
  NE_STATUS_VALIDATION = 1,
  NE_STATUS_NUMERIC = 2,
  NE_STATUS_IO = 3,
  NE_STATUS_NULL_ARGUMENT = 4,
  NE_STATUS_UTF8 = 5,
} NeStatus;

/**
 * Opaque encoder handle.
 */
typedef struct NeEncoder NeEncoder;

/**
 * Opaque vector-index handle.
 */
typedef struct NeIndex NeIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ne_version(void);

/**
 * Loads an encoder checkpoint (`UNE1` format).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. On success `*out` owns the encoder and must be released with
 * [`ne_encoder_free`].
 */
NeStatus ne_encoder_load(const char *path, NeEncoder **out);

/**
 * Releases an encoder handle. Null is a no-op.
 *
 * # Safety
 * `enc` must have come from [`ne_encoder_load`] and not been freed already.
 */
void ne_encoder_free(NeEncoder *enc);

/**
 * Raw feature dimension the encoder expects per item.
 *
 * # Safety
 * `enc` must be a live encoder handle.
 */
uint32_t ne_encoder_raw_dim(const NeEncoder *enc);

/**
 * Full output embedding dimension D.
 *
 * # Safety
 * `enc` must be a live encoder handle.
 */
uint32_t ne_encoder_out_dim(const NeEncoder *enc);

/**
 * Writes the nested dims into `out` (up to `cap` entries) and returns how
 * many exist in total.
 *
 * # Safety
 * `enc` must be live; `out` must point to at least `cap` writable u32s.
 */
uintptr_t ne_encoder_nested_dims(const NeEncoder *enc, uint32_t *out, uintptr_t cap);

/**
 * Encodes a flattened composite of `n_items` items into a unit-norm
 * embedding of the full dimension. `features` holds `n_items * raw_dim`
 * f32 values row-major; `modalities` holds one tag per item.
 *
 * # Safety
 * `enc` must be live; `features` must point to `n_items * raw_dim` floats;
 * `modalities` to `n_items` tags; `out` to `out_dim` doubles.
 */
NeStatus ne_encode(const NeEncoder *enc,
                   const float *features,
                   const NeModality *modalities,
                   uintptr_t n_items,
                   double *out);

/**
 * Re-normalized prefix truncation to nested dim `k`; writes `k` doubles.
 *
 * # Safety
 * `enc` must be live; `emb` must point to `dim` doubles; `out` to `k`.
 */
NeStatus ne_truncate(const NeEncoder *enc,
                     const double *emb,
                     uintptr_t dim,
                     uint32_t k,
                     double *out);

/**
 * Cosine of two unit vectors of equal length, clamped to [-1, 1].
 *
 * # Safety
 * `a` and `b` must point to `dim` doubles; `out` must be writable.
 */
NeStatus ne_cosine(const double *a, const double *b, uintptr_t dim, double *out);

/**
 * Creates an empty index of dimension `dim`; `k_coarse` of 0 disables the
 * coarse store.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be freed with
 * [`ne_index_free`].
 */
NeStatus ne_index_new(uint32_t dim, uint32_t k_coarse, NeIndex **out);

/**
 * Loads an index file (`UNIX1` format).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` valid; free with [`ne_index_free`].
 */
NeStatus ne_index_open(const char *path, NeIndex **out);

/**
 * Releases an index handle. Null is a no-op.
 *
 * # Safety
 * `idx` must have come from this library and not been freed already.
 */
void ne_index_free(NeIndex *idx);

/**
 * Number of stored vectors.
 *
 * # Safety
 * `idx` must be a live index handle.
 */
uintptr_t ne_index_len(const NeIndex *idx);

/**
 * Appends a unit-norm vector under `id`.
 *
 * # Safety
 * `idx` must be live and uniquely borrowed; `emb` must point to `dim`
 * doubles.
 */
NeStatus ne_index_add(NeIndex *idx, uint64_t id, const double *emb, uintptr_t dim);

/**
 * Saves the index to a file.
 *
 * # Safety
 * `idx` must be live; `path` must be NUL-terminated.
 */
NeStatus ne_index_save(const NeIndex *idx, const char *path);

/**
 * Exhaustive exact top-k search. Writes up to `k` results and the found
 * count into `out_len`.
 *
 * # Safety
 * `idx` live; `query` points to `dim` doubles; `out_ids`/`out_sims` hold at
 * least `k` entries; `out_len` is writable.
 */
NeStatus ne_index_search(const NeIndex *idx,
                         const double *query,
                         uintptr_t dim,
                         uintptr_t k,
                         uint64_t *out_ids,
                         double *out_sims,
                         uintptr_t *out_len);

/**
 * Coarse-to-fine top-k search: shortlist by the truncated cosine, re-rank
 * the shortlist at full dimension.
 *
 * # Safety
 * As [`ne_index_search`]; the index must have a coarse store.
 */
NeStatus ne_index_search_coarse_fine(const NeIndex *idx,
                                     const double *query,
                                     uintptr_t dim,
                                     uintptr_t k,
                                     uintptr_t shortlist,
                                     uint64_t *out_ids,
                                     double *out_sims,
                                     uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOTEMB_H */
