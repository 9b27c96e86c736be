#ifndef MESSM_H
#define MESSM_H

#include <stddef.h>
#include <stdint.h>

typedef enum MessmStatus {
  MESSM_STATUS_OK = 0,
  MESSM_STATUS_NULL_POINTER = 1,
  MESSM_STATUS_INVALID_ARGUMENT = 2,
  MESSM_STATUS_IO = 3,
  MESSM_STATUS_CONFIG = 4,
  MESSM_STATUS_NUMERICAL = 5,
  MESSM_STATUS_NOT_CONVERGED = 6,
  MESSM_STATUS_PANIC = 7,
} MessmStatus;

typedef enum MessmMethod {
  MESSM_METHOD_EM = 0,
  MESSM_METHOD_SCORE = 1,
} MessmMethod;

// Result of an estimation run.
typedef struct MessmFit MessmFit;

// A model and effects design for a fixed number of individuals.
typedef struct MessmModel MessmModel;

// Panel observations with their missingness mask.
typedef struct MessmPanel MessmPanel;

// Estimation settings; obtain defaults from [`messm_fit_options_default`].
typedef struct MessmFitOptions {
  enum MessmMethod method;
  size_t max_iter;
  double tol;
  size_t draws;
  size_t burn_in;
  size_t thin;
  uint64_t seed;
} MessmFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *messm_last_error(void);

// Builds a model for `m` individuals from a JSON model configuration.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MessmStatus messm_model_from_json(const char *json, size_t m, struct MessmModel **out);

// # Safety
// `model` must be null or a handle from [`messm_model_from_json`] not yet freed.
void messm_model_free(struct MessmModel *model);

// Number of fixed effects `a`, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t messm_model_n_fixed(const struct MessmModel *model);

// Number of variance parameters `δ`, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t messm_model_n_delta(const struct MessmModel *model);

// Length of each individual's stacked `θ`, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t messm_model_theta_dim(const struct MessmModel *model);

// Creates a panel from `values[(i * n_time + t) * obs_dim + c]`; a NaN in
// any component marks the whole cell `(i, t)` missing.
//
// # Safety
// `values` must point to `m * n_time * obs_dim` doubles and `out` must be valid.
enum MessmStatus messm_panel_new(size_t m,
                                 size_t n_time,
                                 size_t obs_dim,
                                 const double *values,
                                 struct MessmPanel **out);

// Reads a panel CSV (`individual,t,component,value,observed`).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MessmStatus messm_panel_load_csv(const char *path, struct MessmPanel **out);

// Simulates a complete panel of `n_time` periods.
//
// # Safety
// `fixed`/`delta` must point to `n_fixed`/`n_delta` doubles; `model` must be live.
enum MessmStatus messm_simulate(const struct MessmModel *model,
                                const double *fixed,
                                size_t n_fixed,
                                const double *delta,
                                size_t n_delta,
                                size_t n_time,
                                uint64_t seed,
                                struct MessmPanel **out);

// # Safety
// `panel` must be null or a live panel handle.
void messm_panel_free(struct MessmPanel *panel);

// Number of individuals, or 0 for a null handle.
//
// # Safety
// `panel` must be null or a live panel handle.
size_t messm_panel_m(const struct MessmPanel *panel);

// Number of time points, or 0 for a null handle.
//
// # Safety
// `panel` must be null or a live panel handle.
size_t messm_panel_n_time(const struct MessmPanel *panel);

// Copies the panel into `values` in the layout of [`messm_panel_new`], with
// NaN at missing cells.
//
// # Safety
// `values` must have room for `len` doubles.
enum MessmStatus messm_panel_values(const struct MessmPanel *panel, double *values, size_t len);

// Kalman log-likelihood `log f(y | θ, δ)` with `theta[i * theta_dim + k]`.
//
// # Safety
// `theta` must hold `m * theta_dim` doubles and `delta` `n_delta`; `out` must be valid.
enum MessmStatus messm_conditional_loglik(const struct MessmModel *model,
                                          const struct MessmPanel *panel,
                                          const double *theta,
                                          size_t theta_len,
                                          const double *delta,
                                          size_t n_delta,
                                          double *out);

struct MessmFitOptions messm_fit_options_default(void);

// Estimates `(a, δ)` from the starting values. Returns
// `MESSM_STATUS_NOT_CONVERGED` with a usable `*out` when the iteration limit
// was reached.
//
// # Safety
// Pointers must be valid for the stated lengths; handles must be live.
enum MessmStatus messm_fit(const struct MessmModel *model,
                           const struct MessmPanel *panel,
                           const double *start_fixed,
                           size_t n_fixed,
                           const double *start_delta,
                           size_t n_delta,
                           const struct MessmFitOptions *options,
                           struct MessmFit **out);

// # Safety
// `fit` must be null or a live fit handle.
void messm_fit_free(struct MessmFit *fit);

// Copies the estimate `(a, δ)` into `values`.
//
// # Safety
// `values` must have room for `len` doubles.
enum MessmStatus messm_fit_params(const struct MessmFit *fit, double *values, size_t len);

// Number of iterations performed, or 0 for a null handle.
//
// # Safety
// `fit` must be null or a live fit handle.
size_t messm_fit_iterations(const struct MessmFit *fit);

// 1 when the run converged, 0 otherwise (including a null handle).
//
// # Safety
// `fit` must be null or a live fit handle.
int32_t messm_fit_converged(const struct MessmFit *fit);

// The fit report as a JSON string to be released with [`messm_string_free`];
// null for a null handle.
//
// # Safety
// `fit` must be null or a live fit handle.
char *messm_fit_to_json(const struct MessmFit *fit);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void messm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MESSM_H */
