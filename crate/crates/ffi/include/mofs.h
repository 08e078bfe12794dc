#ifndef MOFS_H
#define MOFS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MofsStatus {
  MOFS_STATUS_OK = 0,
  MOFS_STATUS_NULL_POINTER = 1,
  MOFS_STATUS_INVALID_ARGUMENT = 2,
  MOFS_STATUS_IO = 3,
  MOFS_STATUS_NUMERICAL = 4,
  MOFS_STATUS_SHAPE = 5,
  MOFS_STATUS_PANIC = 6,
} MofsStatus;

// A loaded or generated operator dataset.
typedef struct MofsDataset MofsDataset;

// A trained few-shot model.
typedef struct MofsModel MofsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error of this thread into `buf`, truncated and nul-terminated.
// Returns the full message length, or 0 when there is none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mofs_last_error(char *buf, size_t len);

// Static version string.
const char *mofs_version(void);

// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum MofsStatus mofs_dataset_load(const char *path, struct MofsDataset **out);

// Darcy family with contrast `beta` on a `size × size` grid.
//
// # Safety
// `out` must be a valid pointer.
enum MofsStatus mofs_dataset_generate_darcy(double beta,
                                            size_t n,
                                            size_t size,
                                            uint64_t seed,
                                            struct MofsDataset **out);

// # Safety
// `ds` must come from this library; the out pointers must be valid.
enum MofsStatus mofs_dataset_shape(const struct MofsDataset *ds,
                                   size_t *n_samples,
                                   size_t *height,
                                   size_t *width);

// Copies sample `index` into `a` and `u`, each `len = H·W` values, row-major.
//
// # Safety
// `a` and `u` must each point to `len` writable doubles.
enum MofsStatus mofs_dataset_sample(const struct MofsDataset *ds,
                                    size_t index,
                                    double *a,
                                    double *u,
                                    size_t len);

// # Safety
// `ds` must be null or come from this library, and not be used afterwards.
void mofs_dataset_free(struct MofsDataset *ds);

// Loads a model checkpoint written by `mofs train`.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum MofsStatus mofs_model_load(const char *path, struct MofsModel **out);

// Predicts `u` for the coefficient field `a_query` from the demonstrations
// `demo_indices` of `ds`. Normalisation is fitted on the demonstrations; an
// operator the model has not seen gets a context built from them.
//
// # Safety
// `demo_indices` must hold `n_demos` entries; `a_query` and `u_out` `len` doubles each.
enum MofsStatus mofs_model_predict(struct MofsModel *model,
                                   const struct MofsDataset *ds,
                                   const size_t *demo_indices,
                                   size_t n_demos,
                                   const double *a_query,
                                   double *u_out,
                                   size_t len);

// # Safety
// `model` must be null or come from this library, and not be used afterwards.
void mofs_model_free(struct MofsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOFS_H */
