#ifndef CELLRATE_H
#define CELLRATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CR_OK 0

/**
 * A required pointer argument was null.
 */
#define CR_ERR_NULL 1

#define CR_ERR_INVALID 2

#define CR_ERR_NO_CONVERGENCE 3

#define CR_ERR_NUMERICAL 4

#define CR_ERR_CONFIG 5

#define CR_ERR_IO 6

/**
 * The output buffer is shorter than the result.
 */
#define CR_ERR_BUFFER 7

#define CR_ERR_PANIC 8

#define CR_UTILITY_PFS 0

#define CR_UTILITY_HFS 1

#define CR_UTILITY_ALPHA_FAIR 2

#define CR_LAMBDA_AUTO 0

#define CR_LAMBDA_SYMMETRIC_SHORTCUT 1

#define CR_LAMBDA_GRADIENT_DESCENT 2

#define CR_LAMBDA_SUM_POWER_RELAX 3

/**
 * Fairness-optimal operating point of one cluster.
 */
typedef struct CrFairness CrFairness;

/**
 * One cluster: effective gains, antenna ratio and per-BS powers.
 */
typedef struct CrProblem CrProblem;

/**
 * Outer-loop settings; start from [`cr_fairness_options_default`].
 */
typedef struct CrFairnessOptions {
  /**
   * One of the `CR_UTILITY_*` constants.
   */
  int utility;
  /**
   * Exponent for `CR_UTILITY_ALPHA_FAIR`; ignored otherwise.
   */
  double alpha;
  double conv_tol;
  size_t max_outer;
  /**
   * One of the `CR_LAMBDA_*` constants.
   */
  int lambda_mode;
} CrFairnessOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, including the
 * terminating NUL; 0 when the last call succeeded.
 */
size_t cr_last_error_length(void);

/**
 * Copies the last error message on this thread into `buf` (NUL
 * terminated, truncated to `len` bytes). Returns the full length including
 * the NUL, so a return value above `len` means truncation.
 *
 * # Safety
 * `buf` is null or points to `len` writable bytes.
 */
size_t cr_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cr_version(void);

/**
 * Builds a cluster from row-major `beta` (`n_bs × n_groups`), `gamma`
 * antennas per user and `bs_powers` (`n_bs`).
 *
 * # Safety
 * `beta` holds `n_bs * n_groups` values, `bs_powers` holds `n_bs`, `out`
 * is writable.
 */
int cr_problem_new(double gamma,
                   size_t n_bs,
                   size_t n_groups,
                   const double *beta,
                   const double *bs_powers,
                   struct CrProblem **out);

/**
 * Releases a cluster; null is ignored.
 *
 * # Safety
 * `p` is null or came from [`cr_problem_new`] and is not used afterwards.
 */
void cr_problem_free(struct CrProblem *p);

/**
 * # Safety
 * `p` is a live handle; `n_bs` and `n_groups` are writable.
 */
int cr_problem_dims(const struct CrProblem *p, size_t *n_bs, size_t *n_groups);

/**
 * Maximal weighted sum of asymptotic per-group rates (nats per antenna)
 * for `weights` (`n_groups`), with multipliers chosen by `lambda_mode`.
 * Writes `rates` and group `powers` (`n_groups` each), `duals` (`n_bs`)
 * and the weighted sum to `value`. Any output pointer except `value` may
 * be null to skip it.
 *
 * # Safety
 * `p` is a live handle; non-null pointers hold the stated lengths.
 */
int cr_weighted_sum_rate(const struct CrProblem *p,
                         const double *weights,
                         int lambda_mode_,
                         double *rates,
                         double *powers,
                         double *duals,
                         double *value);

struct CrFairnessOptions cr_fairness_options_default(void);

/**
 * Solves the fairness problem on `p`. A run that stops at `max_outer`
 * still succeeds; check `converged` in [`cr_fairness_summary`].
 *
 * # Safety
 * `p` is a live handle, `opts` and `out` are valid pointers.
 */
int cr_solve_fairness(const struct CrProblem *p,
                      const struct CrFairnessOptions *opts,
                      struct CrFairness **out);

/**
 * # Safety
 * `r` is null or came from [`cr_solve_fairness`] and is not used afterwards.
 */
void cr_fairness_free(struct CrFairness *r);

/**
 * Scalar outcome of a fairness solve. Null outputs are skipped.
 *
 * # Safety
 * `r` is a live handle; non-null outputs are writable.
 */
int cr_fairness_summary(const struct CrFairness *r,
                        double *utility,
                        double *dual,
                        int *converged,
                        size_t *iterations);

/**
 * Per-group rates (nats per antenna) into `buf` of `len` values.
 *
 * # Safety
 * `r` is a live handle and `buf` holds `len` values.
 */
int cr_fairness_rates(const struct CrFairness *r, double *buf, size_t len);

/**
 * Per-group dual weights into `buf` of `len` values.
 *
 * # Safety
 * `r` is a live handle and `buf` holds `len` values.
 */
int cr_fairness_weights(const struct CrFairness *r, double *buf, size_t len);

/**
 * Monte Carlo ergodic per-group rates at `n` antennas per user for the
 * given group `powers` (`n_groups`), `duals` (`n_bs`) and `weights`
 * (`n_groups`, fixing the decoding order). Writes `mean` and `std_err`
 * (`n_groups` each; `std_err` may be null).
 *
 * # Safety
 * `p` is a live handle; non-null pointers hold the stated lengths.
 */
int cr_mc_ergodic_rates(const struct CrProblem *p,
                        const double *powers,
                        const double *duals,
                        const double *weights,
                        size_t n,
                        size_t trials,
                        uint64_t seed,
                        double *mean,
                        double *std_err);

/**
 * Runs the JSON config at `config_path`, writing outputs to `out_dir`
 * (null: the config's `output`, else `cellrate-out`).
 *
 * # Safety
 * `config_path` and a non-null `out_dir` are NUL-terminated strings.
 */
int cr_run_config(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELLRATE_H */
