#ifndef AUTOSHARD_H
#define AUTOSHARD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AutoshardStatus {
  AUTOSHARD_STATUS_OK = 0,
  AUTOSHARD_STATUS_PARSE = 1,
  AUTOSHARD_STATUS_GRAPH = 2,
  AUTOSHARD_STATUS_CONFIG = 3,
  AUTOSHARD_STATUS_PATTERN = 4,
  AUTOSHARD_STATUS_PLAN = 5,
  AUTOSHARD_STATUS_REWRITE = 6,
  AUTOSHARD_STATUS_INTERPRETER = 7,
  AUTOSHARD_STATUS_IO = 8,
  AUTOSHARD_STATUS_NULL_ARGUMENT = 9,
  AUTOSHARD_STATUS_INVALID_UTF8 = 10,
  AUTOSHARD_STATUS_PANIC = 11,
} AutoshardStatus;

/**
 * A loaded model graph with its auxiliary operators trimmed.
 */
typedef struct AutoshardGraph AutoshardGraph;

/**
 * Per-device graphs produced by the rewriter.
 */
typedef struct AutoshardParallelGraph AutoshardParallelGraph;

/**
 * A derived sharding plan and the cluster it was derived for.
 */
typedef struct AutoshardPlan AutoshardPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *autoshard_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *autoshard_version(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void autoshard_string_free(char *s);

/**
 * Parses a graph JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum AutoshardStatus autoshard_graph_from_json(const char *json, struct AutoshardGraph **out);

/**
 * Builds the synthetic transformer stack with `layers` encoder layers.
 *
 * # Safety
 * `out` must be writable.
 */
enum AutoshardStatus autoshard_graph_transformer(size_t layers,
                                                 size_t d_model,
                                                 size_t heads,
                                                 struct AutoshardGraph **out);

/**
 * Operator count of the graph as loaded, auxiliary operators included.
 *
 * # Safety
 * `graph` must be a live handle or null (which yields 0).
 */
size_t autoshard_graph_node_count(const struct AutoshardGraph *graph);

/**
 * # Safety
 * `graph` must come from this library and not be freed twice.
 */
void autoshard_graph_free(struct AutoshardGraph *graph);

/**
 * Searches the cheapest plan. `cluster_json` may be null, in which case
 * default link parameters are used; `m` and `n` always set the mesh.
 * `jobs` of 0 uses one worker per core.
 *
 * # Safety
 * `graph` must be a live handle, `cluster_json` null or NUL-terminated,
 * `out` writable.
 */
enum AutoshardStatus autoshard_plan_derive(const struct AutoshardGraph *graph,
                                           const char *cluster_json,
                                           size_t m,
                                           size_t n,
                                           size_t min_duplicates,
                                           size_t jobs,
                                           struct AutoshardPlan **out);

/**
 * Modelled seconds of communication per training step under the plan.
 *
 * # Safety
 * `plan` must be a live handle or null (which yields NaN).
 */
double autoshard_plan_total_cost(const struct AutoshardPlan *plan);

/**
 * Number of weights the plan splits across devices.
 *
 * # Safety
 * `plan` must be a live handle or null (which yields 0).
 */
size_t autoshard_plan_split_count(const struct AutoshardPlan *plan);

/**
 * Writes the full plan report as JSON; free it with [`autoshard_string_free`].
 *
 * # Safety
 * `plan` must be a live handle; `out` writable.
 */
enum AutoshardStatus autoshard_plan_report_json(const struct AutoshardPlan *plan, char **out);

/**
 * # Safety
 * `plan` must come from this library and not be freed twice.
 */
void autoshard_plan_free(struct AutoshardPlan *plan);

/**
 * Rewrites `graph` into per-device graphs under `plan`, which must have
 * been derived from the same graph.
 *
 * # Safety
 * `graph` and `plan` must be live handles; `out` writable.
 */
enum AutoshardStatus autoshard_rewrite(const struct AutoshardGraph *graph,
                                       const struct AutoshardPlan *plan,
                                       struct AutoshardParallelGraph **out);

/**
 * # Safety
 * `pgraph` must be a live handle or null (which yields 0).
 */
size_t autoshard_parallel_device_count(const struct AutoshardParallelGraph *pgraph);

/**
 * Collective operators inserted into each device graph.
 *
 * # Safety
 * `pgraph` must be a live handle or null (which yields 0).
 */
size_t autoshard_parallel_collective_count(const struct AutoshardParallelGraph *pgraph);

/**
 * Writes the rewritten graph document as JSON; free it with
 * [`autoshard_string_free`].
 *
 * # Safety
 * `pgraph` must be a live handle; `out` writable.
 */
enum AutoshardStatus autoshard_parallel_json(const struct AutoshardParallelGraph *pgraph,
                                             char **out);

/**
 * # Safety
 * `pgraph` must come from this library and not be freed twice.
 */
void autoshard_parallel_free(struct AutoshardParallelGraph *pgraph);

/**
 * Runs both graphs on `trials` random inputs and compares outputs.
 * A `tolerance` of 0 or below picks the default for the graph's dtype.
 * `passed` and `worst_error` may be null.
 *
 * # Safety
 * `graph` and `pgraph` must be live handles; non-null out pointers writable.
 */
enum AutoshardStatus autoshard_verify(const struct AutoshardGraph *graph,
                                      const struct AutoshardParallelGraph *pgraph,
                                      size_t trials,
                                      double tolerance,
                                      uint64_t seed,
                                      bool *passed,
                                      double *worst_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOSHARD_H */
