#ifndef BROKENSTICK_H
#define BROKENSTICK_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  BS_STATUS_OK = 0,
  /**
   * A required pointer argument was null or a buffer was too short.
   */
  BS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Input data or configuration was rejected.
   */
  BS_STATUS_VALIDATION = 2,
  BS_STATUS_IO = 3,
  /**
   * The sampler or a linear-algebra routine failed.
   */
  BS_STATUS_NUMERICAL = 4,
  BS_STATUS_PANIC = 5,
} BsStatus;

typedef enum {
  BS_KNOT_MODE_FIXED = 0,
  BS_KNOT_MODE_RANDOM = 1,
} BsKnotMode;

/**
 * Opaque result of an MCMC run.
 */
typedef struct BsChain BsChain;

/**
 * Opaque consensus clustering.
 */
typedef struct BsClustering BsClustering;

/**
 * Opaque cohort of children.
 */
typedef struct BsCohort BsCohort;

/**
 * Chain schedule for [`bs_fit`].
 */
typedef struct {
  uint64_t iterations;
  uint64_t burnin;
  uint64_t thin;
  uint64_t seed;
  BsKnotMode knot_mode;
} BsFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on the calling thread, or an empty
 * string. The pointer stays valid until the next `bs_*` call on that thread.
 */
const char *bs_last_error_message(void);

/**
 * Reads a `child_id,age_years,haz` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
BsStatus bs_cohort_read_csv(const char *path,
                            double horizon,
                            size_t n_knots,
                            bool allow_outliers,
                            BsCohort **out);

/**
 * Generates the paired simulation cohorts (two interior knots, unit horizon).
 * `true_labels` receives the 0-based group of each child and must hold at
 * least `n_children` elements.
 *
 * # Safety
 * All pointers must be valid; `true_labels` must point to `labels_len` writable elements.
 */
BsStatus bs_simulate(uint64_t seed,
                     size_t n_children,
                     BsCohort **fixed_out,
                     BsCohort **random_out,
                     size_t *true_labels,
                     size_t labels_len);

/**
 * Number of children, or 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or a live handle.
 */
size_t bs_cohort_len(const BsCohort *cohort);

/**
 * # Safety
 * `cohort` must be null or a handle not yet freed.
 */
void bs_cohort_free(BsCohort *cohort);

/**
 * Options of the shorter desk schedule (20 000 sweeps, 10 000 burn-in, thin 10).
 */
BsFitOptions bs_fit_options_default(uint64_t seed, BsKnotMode knot_mode);

/**
 * Runs the sampler on `cohort`.
 *
 * # Safety
 * `cohort` and `options` must be live, `out` writable.
 */
BsStatus bs_fit(const BsCohort *cohort, const BsFitOptions *options, BsChain **out);

/**
 * Number of retained draws, or 0 for a null handle.
 *
 * # Safety
 * `chain` must be null or a live handle.
 */
size_t bs_chain_n_draws(const BsChain *chain);

/**
 * Number of sweeps recorded in the cluster-count trace, or 0 for a null handle.
 *
 * # Safety
 * `chain` must be null or a live handle.
 */
size_t bs_chain_n_sweeps(const BsChain *chain);

/**
 * Copies the occupied-cluster count of every sweep into `out`.
 *
 * # Safety
 * `out` must point to `len` writable elements.
 */
BsStatus bs_chain_g_trace(const BsChain *chain, size_t *out, size_t len);

/**
 * Copies the canonical cluster labels of retained draw `draw` into `out`.
 *
 * # Safety
 * `out` must point to `len` writable elements.
 */
BsStatus bs_chain_allocations(const BsChain *chain, size_t draw, size_t *out, size_t len);

/**
 * # Safety
 * `chain` must be null or a handle not yet freed.
 */
void bs_chain_free(BsChain *chain);

/**
 * PEAR-optimal clustering of the retained draws, using at most `max_draws`
 * evenly spaced draws.
 *
 * # Safety
 * `chain` must be live, `out` writable.
 */
BsStatus bs_classify(const BsChain *chain, size_t max_draws, BsClustering **out);

/**
 * Number of children labelled, or 0 for a null handle.
 *
 * # Safety
 * `clustering` must be null or a live handle.
 */
size_t bs_clustering_len(const BsClustering *clustering);

/**
 * Number of distinct clusters, or 0 for a null handle.
 *
 * # Safety
 * `clustering` must be null or a live handle.
 */
size_t bs_clustering_n_clusters(const BsClustering *clustering);

/**
 * Posterior expected adjusted Rand index of the clustering, or NaN for a null handle.
 *
 * # Safety
 * `clustering` must be null or a live handle.
 */
double bs_clustering_pear(const BsClustering *clustering);

/**
 * Copies the 0-based labels into `out`.
 *
 * # Safety
 * `out` must point to `len` writable elements.
 */
BsStatus bs_clustering_labels(const BsClustering *clustering, size_t *out, size_t len);

/**
 * # Safety
 * `clustering` must be null or a handle not yet freed.
 */
void bs_clustering_free(BsClustering *clustering);

/**
 * Adjusted Rand index between two labelings of `n` items.
 *
 * # Safety
 * `a` and `b` must each point to `n` readable elements; `out` must be writable.
 */
BsStatus bs_ari(const size_t *a, const size_t *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BROKENSTICK_H */
