#ifndef ICP_H
#define ICP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all fallible entry points.
 */
typedef enum IcpStatus {
  ICP_STATUS_OK = 0,
  ICP_STATUS_NULL_POINTER = 1,
  ICP_STATUS_INVALID_ARGUMENT = 2,
  ICP_STATUS_CONFIG = 3,
  ICP_STATUS_RUNTIME = 4,
  ICP_STATUS_PANIC = 5,
} IcpStatus;

/**
 * Estimator selector for the RMSE accessors.
 */
typedef enum IcpEstimator {
  ICP_ESTIMATOR_GNSS_ONLY = 0,
  ICP_ESTIMATOR_CENTRALIZED_ICP = 1,
  ICP_ESTIMATOR_DISTRIBUTED_ICP = 2,
} IcpEstimator;

/**
 * Results of a Monte Carlo experiment.
 */
typedef struct IcpExperiment IcpExperiment;

/**
 * Closed-form bound inputs. Variances are in m^2.
 */
typedef struct IcpFimConfig {
  size_t n_v;
  size_t n_f;
  double sigma_gnss2;
  double sigma_v2f2;
  double sigma_p_prior_v2;
  double sigma_p_prior_f2;
} IcpFimConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread, or NULL. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *icp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *icp_version(void);

/**
 * Posterior vehicle position variance for the all-to-all sensing case.
 *
 * # Safety
 * `cfg` and `out` must be valid pointers or NULL.
 */
enum IcpStatus icp_posterior_variance(const struct IcpFimConfig *cfg, double *out);

/**
 * Largest `N_mp * N_con` whose messages fit in one sampling interval.
 *
 * # Safety
 * `out` must be a valid pointer or NULL.
 */
enum IcpStatus icp_iteration_budget(double rate,
                                    double n_b,
                                    double n_nei,
                                    double n_f,
                                    double ts,
                                    uint64_t *out);

/**
 * Runs the experiment described by a TOML document (same schema as the
 * `icp` command-line tool). On success `*out` receives a new handle.
 *
 * # Safety
 * `toml` must be NULL or a NUL-terminated string; `out` must be a valid
 * pointer or NULL.
 */
enum IcpStatus icp_experiment_run(const char *toml, struct IcpExperiment **out);

/**
 * Releases a handle from [`icp_experiment_run`]. NULL is ignored.
 *
 * # Safety
 * `exp` must be NULL or a handle not yet freed.
 */
void icp_experiment_free(struct IcpExperiment *exp);

/**
 * Number of epochs per run.
 *
 * # Safety
 * `exp` and `out` must be valid pointers or NULL.
 */
enum IcpStatus icp_experiment_n_epochs(const struct IcpExperiment *exp, size_t *out);

/**
 * Number of runs that failed and were excluded from the metrics.
 *
 * # Safety
 * `exp` and `out` must be valid pointers or NULL.
 */
enum IcpStatus icp_experiment_n_failed(const struct IcpExperiment *exp, size_t *out);

/**
 * Copies the per-epoch RMSE into `buf`, which must hold `len` values with
 * `len` at least the epoch count.
 *
 * # Safety
 * `exp` must be a valid handle or NULL; `buf` must point to `len` writable
 * doubles or be NULL.
 */
enum IcpStatus icp_experiment_rmse(const struct IcpExperiment *exp,
                                   enum IcpEstimator estimator,
                                   double *buf,
                                   size_t len);

/**
 * RMSE averaged over the steady-state epochs.
 *
 * # Safety
 * `exp` and `out` must be valid pointers or NULL.
 */
enum IcpStatus icp_experiment_mean_rmse(const struct IcpExperiment *exp,
                                        enum IcpEstimator estimator,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICP_H */
