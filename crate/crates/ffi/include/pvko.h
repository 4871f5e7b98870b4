#ifndef PVKO_H
#define PVKO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Termination status of a QP or MPC solve.
 */
typedef enum PvkoSolveStatus {
  PVKO_SOLVE_STATUS_OPTIMAL = 0,
  PVKO_SOLVE_STATUS_INFEASIBLE = 1,
  PVKO_SOLVE_STATUS_MAX_ITER = 2,
} PvkoSolveStatus;

/**
 * Result code of every fallible call.
 */
typedef enum PvkoStatus {
  PVKO_STATUS_OK = 0,
  PVKO_STATUS_NULL_POINTER = 1,
  PVKO_STATUS_INVALID_ARGUMENT = 2,
  PVKO_STATUS_PARSE_ERROR = 3,
  PVKO_STATUS_NUMERICAL_ERROR = 4,
  PVKO_STATUS_IO_ERROR = 5,
  /**
   * The solver stopped without an optimal solution; outputs hold the best iterate.
   */
  PVKO_STATUS_NOT_OPTIMAL = 6,
  PVKO_STATUS_PANIC = 7,
} PvkoStatus;

/**
 * Opaque controller with its warm-start state.
 */
typedef struct PvkoControllerHandle PvkoControllerHandle;

/**
 * Opaque identified model.
 */
typedef struct PvkoModelHandle PvkoModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pvko_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length without the NUL.
 * Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t pvko_last_error_message(char *buf, size_t len);

/**
 * Parses a model from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PvkoStatus pvko_model_from_json(const char *json, struct PvkoModelHandle **out);

/**
 * Loads a model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PvkoStatus pvko_model_load(const char *path, struct PvkoModelHandle **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from a model constructor and not be used afterwards.
 */
void pvko_model_free(struct PvkoModelHandle *model);

/**
 * Writes the state, lifted, input and vertex counts. Any output may be null.
 *
 * # Safety
 * Non-null pointers must be valid.
 */
enum PvkoStatus pvko_model_dims(const struct PvkoModelHandle *model,
                                size_t *state_dim,
                                size_t *lifted_dim,
                                size_t *input_dim,
                                size_t *vertices);

/**
 * Interpolated `A(p)` (q×q) and `B(p)` (q×m), row-major.
 *
 * # Safety
 * `a_out` must hold q·q doubles and `b_out` q·m doubles.
 */
enum PvkoStatus pvko_model_evaluate(const struct PvkoModelHandle *model,
                                    double p,
                                    double *a_out,
                                    double *b_out);

/**
 * Lifts a state of length `n` into `y_out` of length q.
 *
 * # Safety
 * `x` must hold `n` doubles and `y_out` the lifted dimension.
 */
enum PvkoStatus pvko_model_lift(const struct PvkoModelHandle *model,
                                const double *x,
                                size_t n,
                                double *y_out);

/**
 * Open-loop prediction over `steps` steps. `inputs` holds steps·m values
 * (stage-major), `params` holds `steps` values and `out` receives
 * (steps+1)·n predicted states, the first being `x0`.
 *
 * # Safety
 * Array sizes must match the description above.
 */
enum PvkoStatus pvko_model_predict(const struct PvkoModelHandle *model,
                                   const double *x0,
                                   const double *inputs,
                                   const double *params,
                                   size_t steps,
                                   double *out);

/**
 * Parses a controller bundle (as written by `pvko synthesize`).
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PvkoStatus pvko_controller_from_json(const char *json, struct PvkoControllerHandle **out);

/**
 * Releases a controller; null is ignored.
 *
 * # Safety
 * `ctrl` must come from a controller constructor and not be used afterwards.
 */
void pvko_controller_free(struct PvkoControllerHandle *ctrl);

/**
 * Prediction horizon length (number of forecast values per step).
 *
 * # Safety
 * `ctrl` must be a valid handle.
 */
size_t pvko_controller_horizon(const struct PvkoControllerHandle *ctrl);

/**
 * Drops the stored warm start.
 *
 * # Safety
 * `ctrl` must be a valid handle.
 */
void pvko_controller_reset(struct PvkoControllerHandle *ctrl);

/**
 * One receding-horizon step: lifts the measured state `x` (n values),
 * solves the program for the parameter forecast (horizon values) and writes
 * the tube input to `u_out` (m values). `clipped_out` (nullable) reports
 * input clipping and `objective_out` (nullable) the optimal cost. Returns
 * `NotOptimal` when the solver stopped early; `u_out` is then unchanged.
 *
 * # Safety
 * Array sizes must match the model dimensions and horizon.
 */
enum PvkoStatus pvko_controller_step(struct PvkoControllerHandle *ctrl,
                                     const double *x,
                                     const double *forecast,
                                     double *u_out,
                                     bool *clipped_out,
                                     double *objective_out);

/**
 * Solves `min ½x'Px + q'x  s.t.  l <= Ax <= u` with default settings.
 * `p` is n×n and `a` is m×n, both row-major; infinite bounds are allowed.
 * `x_out` (n) and `y_out` (m, nullable) receive the primal and dual
 * solution and `status_out` (nullable) the termination status.
 *
 * # Safety
 * Array sizes must match `n` and `m`.
 */
enum PvkoStatus pvko_qp_solve_dense(size_t n,
                                    size_t m,
                                    const double *p,
                                    const double *q,
                                    const double *a,
                                    const double *l,
                                    const double *u,
                                    double *x_out,
                                    double *y_out,
                                    enum PvkoSolveStatus *status_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PVKO_H */
