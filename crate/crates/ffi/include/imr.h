#ifndef IMR_H
#define IMR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes of every fallible call.
 */
typedef enum ImrStatus {
  ImrStatusOk = 0,
  ImrStatusNullPointer = 1,
  ImrStatusInvalidUtf8 = 2,
  ImrStatusParseError = 3,
  ImrStatusValidationError = 4,
  ImrStatusUnknownTarget = 5,
  ImrStatusIoError = 6,
  ImrStatusInternalError = 7,
} ImrStatus;

/**
 * Opaque handle: a parsed document together with its compiled tree.
 */
typedef struct ImrModel ImrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *imr_last_error(void);

/**
 * Parse and compile a model document from a JSON string.
 *
 * # Safety
 * `json` must be a valid NUL-terminated C string; `out` must be a valid
 * pointer to receive the handle.
 */
enum ImrStatus imr_model_from_json(const char *json, struct ImrModel **out);

/**
 * Parse and compile a model document from a file path.
 *
 * # Safety
 * `path` must be a valid NUL-terminated C string; `out` must be a valid
 * pointer to receive the handle.
 */
enum ImrStatus imr_model_from_file(const char *path, struct ImrModel **out);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle obtained from an `imr_model_*` constructor
 * that has not been freed yet.
 */
void imr_model_free(struct ImrModel *model);

/**
 * Number of positive-probability paths.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for a write.
 */
enum ImrStatus imr_model_path_count(const struct ImrModel *model, uintptr_t *out);

/**
 * Number of grid points (including the origin).
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for a write.
 */
enum ImrStatus imr_model_grid_len(const struct ImrModel *model, uintptr_t *out);

/**
 * Path table CSV (`path_id,probability,events,...`).
 *
 * # Safety
 * `model` must be a live handle; `out` receives a string owned by the caller.
 */
enum ImrStatus imr_paths_csv(const struct ImrModel *model, char **out);

/**
 * Information-state table CSV (`path_id,t,side,active_set,marks`).
 *
 * # Safety
 * `model` must be a live handle; `out` receives a string owned by the caller.
 */
enum ImrStatus imr_states_csv(const struct ImrModel *model, char **out);

/**
 * Verify the two-sided decomposition of a named payoff. Writes the largest
 * absolute residual to `max_residual`; when `report_csv` is non-null it also
 * receives the full per-path ledger.
 *
 * # Safety
 * `model` must be a live handle, `payoff` a valid C string, `max_residual`
 * valid for a write; `report_csv` may be null.
 */
enum ImrStatus imr_verify_payoff(const struct ImrModel *model,
                                 const char *payoff,
                                 double *max_residual,
                                 char **report_csv);

/**
 * Simulate `n_paths` draws under the seed and return the per-cell projection
 * estimates of a named payoff as CSV (`t,state_key,estimate,stderr,n_cell`).
 *
 * # Safety
 * `model` must be a live handle, `payoff` a valid C string, `out` valid to
 * receive a caller-owned string.
 */
enum ImrStatus imr_simulate_csv(const struct ImrModel *model,
                                uint64_t seed,
                                uintptr_t n_paths,
                                const char *payoff,
                                char **out);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string obtained from this library that has not been
 * freed yet.
 */
void imr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMR_H */
