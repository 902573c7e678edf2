#ifndef GRIDMATES_H
#define GRIDMATES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible functions.
 */
typedef enum {
  GmOk = 0,
  GmNullPointer = 1,
  GmInvalidUtf8 = 2,
  GmIoError = 3,
  GmInvalidArgument = 4,
  GmSolveFailed = 5,
  GmInfeasible = 6,
  GmPanic = 7,
} GmStatus;

/**
 * Which algorithm produced a result.
 */
typedef enum {
  GmDadp = 0,
  GmPadp = 1,
  GmSddp = 2,
} GmAlgo;

/**
 * Opaque instance handle.
 */
typedef struct GmInstance GmInstance;

/**
 * Opaque solve-result handle: a bound plus the value stack that induces the
 * online policy.
 */
typedef struct GmResult GmResult;

/**
 * Options for the coordination solvers (`gm_solve_dadp`, `gm_solve_padp`).
 * Zero or negative fields fall back to defaults.
 */
typedef struct {
  uint64_t seed;
  int32_t state_points;
  int32_t control_points;
  int32_t mc_samples;
  int32_t max_iters;
} GmCoordinationOptions;

/**
 * Options for `gm_solve_sddp`. Zero or negative fields fall back to
 * defaults.
 */
typedef struct {
  uint64_t seed;
  int32_t resample_k;
  int32_t max_iters;
  int32_t cut_cap;
} GmSddpOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Thread-local description of the most recent failure on this thread.
 * Valid until the next failing call on the same thread.
 */
const char *gm_last_error(void);

/**
 * Loads an instance from a JSON file. Returns null on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
GmInstance *gm_instance_load(const char *path);

/**
 * Writes an instance to a JSON file.
 *
 * # Safety
 * `inst` must be a live handle; `path` must be a NUL-terminated string.
 */
GmStatus gm_instance_save(const GmInstance *inst, const char *path);

/**
 * Generates a standard family instance (3, 6, 12, 24 or 48 nodes).
 * Returns null on failure.
 */
GmInstance *gm_instance_generate(int32_t family, uint64_t seed);

/**
 * Generates a connected instance with explicit sizes. Returns null on
 * failure.
 */
GmInstance *gm_instance_generate_custom(int32_t nodes,
                                        int32_t edges,
                                        int32_t batteries,
                                        uint64_t seed);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `inst` must be null or a live handle.
 */
size_t gm_instance_num_nodes(const GmInstance *inst);

/**
 * Number of edges, or 0 for a null handle.
 *
 * # Safety
 * `inst` must be null or a live handle.
 */
size_t gm_instance_num_edges(const GmInstance *inst);

/**
 * Number of stages, or 0 for a null handle.
 *
 * # Safety
 * `inst` must be null or a live handle.
 */
size_t gm_instance_horizon(const GmInstance *inst);

/**
 * Releases an instance handle. Null is a no-op.
 *
 * # Safety
 * `inst` must be null or a live handle; it must not be used afterwards.
 */
void gm_instance_free(GmInstance *inst);

/**
 * Runs price coordination; the result carries a lower bound. `opts` may be
 * null for defaults. Returns null on failure.
 *
 * # Safety
 * `inst` must be a live handle; `opts` must be null or valid.
 */
GmResult *gm_solve_dadp(const GmInstance *inst, const GmCoordinationOptions *opts);

/**
 * Runs resource coordination; the result carries an upper bound (possibly
 * `+inf`). `opts` may be null for defaults. Returns null on failure.
 *
 * # Safety
 * `inst` must be a live handle; `opts` must be null or valid.
 */
GmResult *gm_solve_padp(const GmInstance *inst, const GmCoordinationOptions *opts);

/**
 * Runs the global cutting-plane solver; the result carries a lower bound.
 * `opts` may be null for defaults. Returns null on failure.
 *
 * # Safety
 * `inst` must be a live handle; `opts` must be null or valid.
 */
GmResult *gm_solve_sddp(const GmInstance *inst, const GmSddpOptions *opts);

/**
 * Certified bound of a result: a lower bound for dadp/sddp, an upper bound
 * for padp. NaN for a null handle.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
double gm_result_bound(const GmResult *res);

/**
 * Algorithm that produced a result. `GmDadp` for a null handle.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
GmAlgo gm_result_algo(const GmResult *res);

/**
 * 1 if the bound is a lower bound, 0 if it is an upper bound.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
int32_t gm_result_is_lower_bound(const GmResult *res);

/**
 * Iterations performed. 0 for a null handle.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
size_t gm_result_iterations(const GmResult *res);

/**
 * Simulates the online policy induced by a result over fresh scenarios and
 * writes the mean cost and its 95% half-width through the out pointers.
 *
 * # Safety
 * `inst` and `res` must be live handles; `out_mean` and `out_half_width`
 * must be valid writable pointers.
 */
GmStatus gm_simulate(const GmInstance *inst,
                     const GmResult *res,
                     size_t scenarios,
                     uint64_t seed,
                     double *out_mean,
                     double *out_half_width);

/**
 * Releases a result handle. Null is a no-op.
 *
 * # Safety
 * `res` must be null or a live handle; it must not be used afterwards.
 */
void gm_result_free(GmResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDMATES_H */
