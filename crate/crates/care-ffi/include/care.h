/* C interface to the care graph-classification library. */

#pragma once

/* Generated by cbindgen from the care-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define CARE_OK 0

/**
 * Invalid configuration (bad JSON, unknown keys, inconsistent settings).
 */
#define CARE_ERR_CONFIG 1

/**
 * Data problem: missing files or malformed dataset/CSV content.
 */
#define CARE_ERR_DATA 2

/**
 * Numerical failure (non-finite loss, internal contract violation).
 */
#define CARE_ERR_NUMERIC 3

/**
 * A required pointer argument was null.
 */
#define CARE_ERR_NULL 4

/**
 * A string argument was not valid UTF-8.
 */
#define CARE_ERR_ENCODING 5

/**
 * A parsed graph-classification dataset.
 */
typedef struct CareDataset CareDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The library version as a static NUL-terminated string. Never freed.
 */
const char *care_version(void);

/**
 * The last error message on this thread (empty when the last call
 * succeeded). Borrowed; valid until the next library call on this thread.
 */
const char *care_last_error(void);

/**
 * Free a string returned through a `char**` out-parameter.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library and
 * not yet freed.
 */
void care_string_free(char *s);

/**
 * Parse a dataset directory in the standard text layout into a handle.
 * `out` receives the handle on success.
 *
 * # Safety
 * `dir` and `name` must be valid NUL-terminated strings; `out` must be a
 * valid pointer.
 */
int32_t care_dataset_parse(const char *dir, const char *name, struct CareDataset **out);

/**
 * Release a dataset handle.
 *
 * # Safety
 * `dataset` must be null or a handle from [`care_dataset_parse`] that has
 * not been freed.
 */
void care_dataset_free(struct CareDataset *dataset);

/**
 * Number of graphs in the dataset (0 for a null handle).
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t care_dataset_graph_count(const struct CareDataset *dataset);

/**
 * Number of classes in the dataset (0 for a null handle).
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t care_dataset_class_count(const struct CareDataset *dataset);

/**
 * Summary statistics of a parsed dataset as a JSON object (graph count,
 * class count, mean node and edge counts, feature setup).
 *
 * # Safety
 * `dataset` must be a live handle; `out_json` must be a valid pointer.
 */
int32_t care_dataset_stats_json(const struct CareDataset *dataset, char **out_json);

/**
 * Run cross-validated training per a JSON run configuration (the same
 * shape the `care train` command reads: `dataset_dir`, `dataset_name`,
 * plus optional model settings). Blocks until training completes and
 * returns the aggregate result as JSON. No files are written.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out_json` must be
 * a valid pointer.
 */
int32_t care_train_json(const char *config_json, char **out_json);

/**
 * Compute the four class-separability metrics of an embedding CSV
 * (`id,label,e0..` rows) given as text. Returns a JSON object with keys
 * `silhouette`, `si`, `hm`, and `cd`.
 *
 * # Safety
 * `csv_text` must be a valid NUL-terminated string; `out_json` must be a
 * valid pointer.
 */
int32_t care_separability_json(const char *csv_text, char **out_json);

/**
 * Compare the multiplication counts of the plain and refined models at
 * one grid point. `out_difference` receives `q1 - q2` (positive means the
 * plain width-matched model performs more multiplications) and
 * `out_verdict` receives 1 when the difference is positive.
 *
 * # Safety
 * `out_difference` and `out_verdict` must be valid pointers.
 */
int32_t care_capacity_check(uint64_t n,
                            uint64_t h2,
                            uint64_t d,
                            double *out_difference,
                            int32_t *out_verdict);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
