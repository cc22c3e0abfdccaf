#ifndef ITDA_H
#define ITDA_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ItdaStatus {
  ITDA_STATUS_OK = 0,
  ITDA_STATUS_NULL_POINTER = 1,
  ITDA_STATUS_INVALID_ARGUMENT = 2,
  ITDA_STATUS_VALIDATION = 3,
  ITDA_STATUS_IO = 4,
  ITDA_STATUS_INTERNAL = 5,
} ItdaStatus;

/**
 * Opaque dictionary.
 */
typedef struct ItdaDictionary ItdaDictionary;

/**
 * Opaque activation shard.
 */
typedef struct ItdaShard ItdaShard;

/**
 * Training parameters. `max_dict_size == 0` means unlimited.
 */
typedef struct ItdaTrainConfig {
  double tau;
  size_t l0;
  size_t batch_size;
  double dedup_cosine_threshold;
  size_t max_dict_size;
  bool relative_tau;
} ItdaTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *itda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *itda_version(void);

struct ItdaTrainConfig itda_train_config_default(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ItdaStatus itda_shard_read(const char *path, struct ItdaShard **out);

/**
 * # Safety
 * `shard` must be a live handle and `path` a NUL-terminated string.
 */
enum ItdaStatus itda_shard_write(const struct ItdaShard *shard, const char *path);

/**
 * Builds a shard from `count * d_model` row-major floats. Row `i` is
 * labeled `(dataset_id, i, 0)`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `rows` must point to
 * `count * d_model` readable floats (it may be NULL when `count == 0`).
 */
enum ItdaStatus itda_shard_from_rows(const char *model_id,
                                     const char *layer_id,
                                     const char *dataset_id,
                                     const float *rows,
                                     size_t count,
                                     size_t d_model,
                                     struct ItdaShard **out);

/**
 * Number of rows, or 0 for NULL.
 *
 * # Safety
 * `shard` must be NULL or a live handle.
 */
size_t itda_shard_count(const struct ItdaShard *shard);

/**
 * # Safety
 * `shard` must be NULL or a live handle.
 */
size_t itda_shard_d_model(const struct ItdaShard *shard);

/**
 * # Safety
 * `shard` must be NULL or a handle not yet freed.
 */
void itda_shard_free(struct ItdaShard *shard);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ItdaStatus itda_dictionary_load(const char *path, struct ItdaDictionary **out);

/**
 * # Safety
 * `dict` must be a live handle and `path` a NUL-terminated string.
 */
enum ItdaStatus itda_dictionary_save(const struct ItdaDictionary *dict, const char *path);

/**
 * # Safety
 * `dict` must be NULL or a live handle.
 */
size_t itda_dictionary_len(const struct ItdaDictionary *dict);

/**
 * # Safety
 * `dict` must be NULL or a live handle.
 */
size_t itda_dictionary_d_model(const struct ItdaDictionary *dict);

/**
 * Sequence and token index of atom `index`.
 *
 * # Safety
 * `dict` must be a live handle; the output pointers must be writable.
 */
enum ItdaStatus itda_dictionary_label(const struct ItdaDictionary *dict,
                                      size_t index,
                                      uint64_t *sequence_index,
                                      uint64_t *token_index);

/**
 * # Safety
 * `dict` must be NULL or a handle not yet freed.
 */
void itda_dictionary_free(struct ItdaDictionary *dict);

/**
 * Trains a dictionary on `n_shards` shards in order.
 *
 * # Safety
 * `shards` must point to `n_shards` live handles, `config` to a readable
 * struct, and `out` must be writable.
 */
enum ItdaStatus itda_train(const struct ItdaShard *const *shards,
                           size_t n_shards,
                           const struct ItdaTrainConfig *config,
                           struct ItdaDictionary **out);

/**
 * # Safety
 * `dict` must be a live handle and `out` writable.
 */
enum ItdaStatus itda_dictionary_crop(const struct ItdaDictionary *dict,
                                     size_t size,
                                     struct ItdaDictionary **out);

/**
 * # Safety
 * `dict` must be a live handle and `out` writable.
 */
enum ItdaStatus itda_dictionary_dedup(const struct ItdaDictionary *dict,
                                      double cosine_threshold,
                                      struct ItdaDictionary **out);

/**
 * Matching-pursuit codes for `count` signals of width `d_model`.
 *
 * Row `b` of the outputs holds up to `l0` entries in selection order;
 * unused slots have atom index -1 and coefficient 0. `out_losses` receives
 * each signal's squared reconstruction error.
 *
 * # Safety
 * `signals` must hold `count * d_model` floats, `out_atoms` and
 * `out_coeffs` room for `count * l0` values, `out_losses` for `count`.
 */
enum ItdaStatus itda_decompose(const struct ItdaDictionary *dict,
                               const float *signals,
                               size_t count,
                               size_t d_model,
                               size_t l0,
                               int64_t *out_atoms,
                               double *out_coeffs,
                               double *out_losses);

/**
 * Jaccard index of the two dictionaries' label sets.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum ItdaStatus itda_jaccard(const struct ItdaDictionary *a,
                             const struct ItdaDictionary *b,
                             double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum ItdaStatus itda_ce_loss_score(double h_orig, double h_star, double h_zero, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITDA_H */
