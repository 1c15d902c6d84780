#ifndef DDMC_H
#define DDMC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdmcDatasetKind {
  DDMC_DATASET_KIND_STICKFIG = 0,
  DDMC_DATASET_KIND_COLORED_SHAPES = 1,
} DdmcDatasetKind;

typedef enum DdmcStatus {
  DDMC_STATUS_OK = 0,
  DDMC_STATUS_NULL_POINTER = 1,
  DDMC_STATUS_INVALID_ARGUMENT = 2,
  DDMC_STATUS_CONFIG = 3,
  DDMC_STATUS_IO = 4,
  DDMC_STATUS_PARSE = 5,
  DDMC_STATUS_INTEGRITY = 6,
  DDMC_STATUS_NON_FINITE = 7,
  DDMC_STATUS_DIMENSION = 8,
  DDMC_STATUS_PANIC = 9,
} DdmcStatus;

// A run configuration under construction.
typedef struct DdmcConfig DdmcConfig;

// Images plus ground-truth labelings.
typedef struct DdmcDataset DdmcDataset;

// A trained model: parameters, augmentations and frozen centers.
typedef struct DdmcModel DdmcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *ddmc_last_error(void);

// Library version as a static NUL-terminated string.
const char *ddmc_version(void);

// Generates a synthetic dataset with its default size and noise.
//
// # Safety
// `out` must be a valid pointer to write a handle into.
enum DdmcStatus ddmc_dataset_generate(enum DdmcDatasetKind kind,
                                      uint64_t seed,
                                      struct DdmcDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DdmcStatus ddmc_dataset_load(const char *path, struct DdmcDataset **out);

// # Safety
// `ds` must come from this library and `path` be NUL-terminated.
enum DdmcStatus ddmc_dataset_save(const struct DdmcDataset *ds, const char *path);

// Sample count, flattened image size and number of labelings.
//
// # Safety
// `ds` must come from this library; outputs must be valid pointers.
enum DdmcStatus ddmc_dataset_info(const struct DdmcDataset *ds,
                                  size_t *num_samples,
                                  size_t *dim,
                                  size_t *num_clusterings);

// Copies the ground-truth labels of clustering `m` into `out[0..N]`.
//
// # Safety
// `out` must point to at least `len` writable elements.
enum DdmcStatus ddmc_dataset_labels(const struct DdmcDataset *ds,
                                    size_t m,
                                    size_t *out,
                                    size_t len);

// # Safety
// `ds` must come from this library and not be used afterwards; null is ignored.
void ddmc_dataset_free(struct DdmcDataset *ds);

// A configuration holding the library defaults.
//
// # Safety
// `out` must be a valid pointer.
enum DdmcStatus ddmc_config_new(struct DdmcConfig **out);

// Sets one key as in the `key = value` config file format.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
enum DdmcStatus ddmc_config_set(struct DdmcConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must come from this library and not be used afterwards; null is ignored.
void ddmc_config_free(struct DdmcConfig *cfg);

// Trains on `ds`. Blocks until the stopping rule fires or epochs run out.
//
// # Safety
// Handles must come from this library; `out` must be a valid pointer.
enum DdmcStatus ddmc_train(const struct DdmcConfig *cfg,
                           const struct DdmcDataset *ds,
                           struct DdmcModel **out);

// # Safety
// `model` must come from this library and `path` be NUL-terminated.
enum DdmcStatus ddmc_model_save(const struct DdmcModel *model, const char *path);

// Loads a checkpoint written by `ddmc_model_save` or `ddmc train`.
//
// # Safety
// `path` must be NUL-terminated and `out` a valid pointer.
enum DdmcStatus ddmc_model_load(const char *path, struct DdmcModel **out);

// Number of representations `K` and clusters per representation `T`.
//
// # Safety
// `model` must come from this library; outputs must be valid pointers.
enum DdmcStatus ddmc_model_shape(const struct DdmcModel *model, size_t *k, size_t *t);

// Cluster labels of representation `k` for every sample of `ds`.
//
// # Safety
// Handles must come from this library; `out` must hold `len` elements.
enum DdmcStatus ddmc_model_assign(const struct DdmcModel *model,
                                  const struct DdmcDataset *ds,
                                  size_t k,
                                  size_t *out,
                                  size_t len);

// # Safety
// `model` must come from this library and not be used afterwards; null is ignored.
void ddmc_model_free(struct DdmcModel *model);

// Normalized mutual information between two labelings of `n` items.
//
// # Safety
// `a` and `b` must each point to `n` readable elements.
enum DdmcStatus ddmc_nmi(const size_t *a, const size_t *b, size_t n, double *out);

// Rand index between two labelings of `n` items.
//
// # Safety
// `a` and `b` must each point to `n` readable elements.
enum DdmcStatus ddmc_rand_index(const size_t *a, const size_t *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDMC_H */
