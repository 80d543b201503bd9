#ifndef FEEDSIM_H
#define FEEDSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FeedsimStatus {
  FeedsimStatus_Ok = 0,
  FeedsimStatus_NullPointer = 1,
  FeedsimStatus_InvalidArgument = 2,
  FeedsimStatus_Config = 3,
  FeedsimStatus_NonConvergence = 4,
  FeedsimStatus_DataContract = 5,
  FeedsimStatus_InsufficientData = 6,
  FeedsimStatus_Io = 7,
  FeedsimStatus_Panic = 8,
} FeedsimStatus;

typedef enum FeedsimMethod {
  FeedsimMethod_Ols = 0,
  FeedsimMethod_Iv2sls = 1,
  FeedsimMethod_Reliability = 2,
} FeedsimMethod;

/**
 * Opaque two-period experiment panel.
 */
typedef struct FeedsimPanel FeedsimPanel;

typedef struct FeedsimParams {
  double alpha;
  double beta;
  double eta;
  double delta;
  double theta;
  double mu;
} FeedsimParams;

typedef struct FeedsimBehavior {
  double n_views;
  double n_shares;
  double share_frac_toxic;
  double toxic_views;
  double toxic_shares;
  /**
   * 1 when the user leaves the platform for the period.
   */
  uint8_t exited;
} FeedsimBehavior;

typedef struct FeedsimThetaEstimate {
  double theta_hat;
  double se;
  double intercept;
  /**
   * NaN when the method has no first stage.
   */
  double first_stage_f;
  size_t n_obs;
} FeedsimThetaEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *feedsim_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length, 0 if there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t feedsim_last_error_message(char *buf, size_t len);

/**
 * Default behavioral constants.
 *
 * # Safety
 * `out` must be null or a valid pointer.
 */
enum FeedsimStatus feedsim_default_params(struct FeedsimParams *out);

/**
 * Optimal toxic fraction of shares for exposure `q` and taste `p`.
 *
 * # Safety
 * `out` must be null or a valid pointer.
 */
enum FeedsimStatus feedsim_optimal_share_fraction(double q, double p, double theta, double *out);

/**
 * Closed-form behavior of one user.
 *
 * # Safety
 * `params` and `out` must be null or valid pointers.
 */
enum FeedsimStatus feedsim_solve_user(const struct FeedsimParams *params,
                                      double q,
                                      double p,
                                      struct FeedsimBehavior *out);

/**
 * Simulate the randomized experiment with default settings apart from the
 * given parameters. On success `*out` owns a new panel.
 *
 * # Safety
 * `params` and `out` must be null or valid pointers.
 */
enum FeedsimStatus feedsim_simulate(size_t n_users,
                                    const struct FeedsimParams *params,
                                    uint64_t seed,
                                    struct FeedsimPanel **out);

/**
 * Read a panel CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum FeedsimStatus feedsim_panel_read_csv(const char *path, struct FeedsimPanel **out);

/**
 * Write a panel CSV, replacing any existing file.
 *
 * # Safety
 * `panel` must come from this library; `path` must be NUL-terminated.
 */
enum FeedsimStatus feedsim_panel_write_csv(const struct FeedsimPanel *panel, const char *path);

/**
 * Number of users in the panel.
 *
 * # Safety
 * `panel` must come from this library; `out` must be valid.
 */
enum FeedsimStatus feedsim_panel_len(const struct FeedsimPanel *panel, size_t *out);

/**
 * Estimate θ from the panel.
 *
 * # Safety
 * `panel` must come from this library; `out` must be valid.
 */
enum FeedsimStatus feedsim_estimate_theta(const struct FeedsimPanel *panel,
                                          enum FeedsimMethod method,
                                          struct FeedsimThetaEstimate *out);

/**
 * Release a panel. Null is ignored.
 *
 * # Safety
 * `panel` must be null or come from this library and not be used again.
 */
void feedsim_panel_free(struct FeedsimPanel *panel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEEDSIM_H */
