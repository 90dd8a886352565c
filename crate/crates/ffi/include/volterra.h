#ifndef VOLTERRA_H
#define VOLTERRA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum VolterraStatus {
  VOLTERRA_STATUS_OK = 0,
  VOLTERRA_STATUS_INVALID_PARAMETER = 1,
  VOLTERRA_STATUS_DIMENSION = 2,
  VOLTERRA_STATUS_INADMISSIBLE = 3,
  VOLTERRA_STATUS_NON_CONVERGENCE = 4,
  VOLTERRA_STATUS_NUMERICAL = 5,
  VOLTERRA_STATUS_MEMORY_BUDGET = 6,
  VOLTERRA_STATUS_PARSE = 7,
  VOLTERRA_STATUS_IO = 8,
  VOLTERRA_STATUS_NULL_POINTER = 9,
  VOLTERRA_STATUS_PANIC = 10,
} VolterraStatus;

/**
 * Opaque ensemble handle.
 */
typedef struct VolterraEnsemble VolterraEnsemble;

/**
 * Opaque kernel handle.
 */
typedef struct VolterraKernel VolterraKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *volterra_last_error(void);

/**
 * `scale · τ^{alpha-1}`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_kernel_fractional(double alpha,
                                               double scale,
                                               struct VolterraKernel **out);

/**
 * `scale · e^{-rate τ}`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_kernel_exponential(double rate,
                                                double scale,
                                                struct VolterraKernel **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_kernel_constant(double scale, struct VolterraKernel **out);

/**
 * `scale · τ^{alpha-1} e^{-rate τ}`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_kernel_power_exponential(double alpha,
                                                      double rate,
                                                      double scale,
                                                      struct VolterraKernel **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_kernel_zero(struct VolterraKernel **out);

/**
 * # Safety
 * `k` must come from a `volterra_kernel_*` constructor and not be freed twice. Null is ignored.
 */
void volterra_kernel_free(struct VolterraKernel *k);

/**
 * # Safety
 * `k` must be a live kernel handle and `out` a valid pointer.
 */
enum VolterraStatus volterra_kernel_eval(const struct VolterraKernel *k, double tau, double *out);

/**
 * Weighted `p`-norm (`p` = 1 or 2) at weight `rho`; `+inf` at or below the divergence threshold.
 *
 * # Safety
 * `k` must be a live kernel handle and `out` a valid pointer.
 */
enum VolterraStatus volterra_kernel_norm(const struct VolterraKernel *k,
                                         uint8_t p,
                                         double rho,
                                         double *out);

/**
 * Critical weight of a drift/diffusion envelope pair; may be `-inf` or `+inf`.
 *
 * # Safety
 * Kernel arguments must be live handles and `out` a valid pointer.
 */
enum VolterraStatus volterra_critical_weight(const struct VolterraKernel *drift,
                                             const struct VolterraKernel *diffusion,
                                             double *out);

/**
 * `1 - [drift]_1(rho) - [diffusion]_2(rho)`.
 *
 * # Safety
 * Kernel arguments must be live handles and `out` a valid pointer.
 */
enum VolterraStatus volterra_svie_margin(const struct VolterraKernel *drift,
                                         const struct VolterraKernel *diffusion,
                                         double rho,
                                         double *out);

/**
 * Margin of a backward driver with envelopes for `y`, `z1` and `z2`.
 *
 * # Safety
 * Kernel arguments must be live handles and `out` a valid pointer.
 */
enum VolterraStatus volterra_bsvie_margin(const struct VolterraKernel *ky,
                                          const struct VolterraKernel *kz1,
                                          const struct VolterraKernel *kz2,
                                          double eta,
                                          double lambda,
                                          double *out);

/**
 * Whether `(mu, lambda)` is admissible for a controlled equation; `rho_star` may be null.
 *
 * # Safety
 * Kernel arguments must be live handles; `ok` must be valid.
 */
enum VolterraStatus volterra_control_admissible(const struct VolterraKernel *bx,
                                                const struct VolterraKernel *bu,
                                                const struct VolterraKernel *sx,
                                                const struct VolterraKernel *su,
                                                double mu,
                                                double lambda,
                                                bool *ok,
                                                double *rho_star);

/**
 * Binomial tree with `2^steps` equally weighted paths (`steps` ≤ 20).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_ensemble_tree(double horizon,
                                           size_t steps,
                                           struct VolterraEnsemble **out);

/**
 * Seeded Monte Carlo ensemble with `dim` independent Brownian coordinates.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VolterraStatus volterra_ensemble_monte_carlo(double horizon,
                                                  size_t steps,
                                                  size_t paths,
                                                  size_t dim,
                                                  uint64_t seed,
                                                  struct VolterraEnsemble **out);

/**
 * # Safety
 * `e` must come from a `volterra_ensemble_*` constructor and not be freed twice. Null is ignored.
 */
void volterra_ensemble_free(struct VolterraEnsemble *e);

/**
 * Number of paths, or 0 for a null handle.
 *
 * # Safety
 * `e` must be a live handle or null.
 */
size_t volterra_ensemble_paths(const struct VolterraEnsemble *e);

/**
 * Number of time steps, or 0 for a null handle.
 *
 * # Safety
 * `e` must be a live handle or null.
 */
size_t volterra_ensemble_steps(const struct VolterraEnsemble *e);

/**
 * Brownian value of the first coordinate at node `i` on path `p`.
 *
 * # Safety
 * `e` must be a live handle and `out` a valid pointer.
 */
enum VolterraStatus volterra_ensemble_brownian(const struct VolterraEnsemble *e,
                                               size_t i,
                                               size_t p,
                                               double *out);

/**
 * Solves the scalar backward equation with driver `a·y + b1·z1 + b2·z2`.
 *
 * `psi` and `y` hold `(steps + 1) · paths` values, node-major (`[i · paths + p]`).
 *
 * # Safety
 * `e` must be a live handle; `psi` must be readable and `y` writable for `len` values.
 */
enum VolterraStatus volterra_solve_linear_bsvie(const struct VolterraEnsemble *e,
                                                double a,
                                                double b1,
                                                double b2,
                                                double lambda,
                                                double eta,
                                                const double *psi,
                                                double *y,
                                                size_t len);

/**
 * Runs a JSON job (same format as the command-line `--config` file, `command` required).
 *
 * When `out_dir` is non-null, outputs and the manifest are written there. When `summary` is
 * non-null it receives a JSON summary to be released with [`volterra_string_free`]. An
 * inadmissible domain report still fills both and returns [`VolterraStatus::Inadmissible`].
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out_dir` null or NUL-terminated; `summary` null or
 * valid.
 */
enum VolterraStatus volterra_run_json(const char *config, const char *out_dir, char **summary);

/**
 * # Safety
 * `s` must come from this library and not be freed twice. Null is ignored.
 */
void volterra_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOLTERRA_H */
