#ifndef MCR_H
#define MCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum McrStatus {
  MCR_STATUS_OK = 0,
  MCR_STATUS_NULL_POINTER = 1,
  MCR_STATUS_INVALID_UTF8 = 2,
  MCR_STATUS_CONFIG = 3,
  MCR_STATUS_IO = 4,
  MCR_STATUS_FORMAT = 5,
  MCR_STATUS_NUMERIC = 6,
  MCR_STATUS_INVALID_ARGUMENT = 7,
  MCR_STATUS_PANIC = 8,
} McrStatus;

/**
 * A generated or loaded dataset with train, val and test splits.
 */
typedef struct McrDataset McrDataset;

/**
 * A finished training run.
 */
typedef struct McrRun McrRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next call on the same thread.
 */
const char *mcr_last_error(void);

/**
 * Library version, statically allocated.
 */
const char *mcr_version(void);

/**
 * # Safety
 * `s` must be null or come from this library.
 */
void mcr_string_free(char *s);

/**
 * Generates a dataset from a JSON spec; missing keys take defaults.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string, `out` a valid pointer.
 */
enum McrStatus mcr_dataset_generate(const char *spec_json, struct McrDataset **out);

/**
 * Loads a dataset container written by `mcr generate` or
 * [`mcr_dataset_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid pointer.
 */
enum McrStatus mcr_dataset_load(const char *path, struct McrDataset **out);

/**
 * Writes `<dir>/<stem>.bin` and its JSON sidecar.
 *
 * # Safety
 * `ds` must be a live handle; `dir` and `stem` NUL-terminated strings.
 */
enum McrStatus mcr_dataset_save(const struct McrDataset *ds, const char *dir, const char *stem);

/**
 * Row count of split `split` (0 train, 1 val, 2 test).
 *
 * # Safety
 * `ds` must be a live handle, `out` a valid pointer.
 */
enum McrStatus mcr_dataset_len(const struct McrDataset *ds, uint32_t split, size_t *out);

/**
 * The dataset's spec as JSON.
 *
 * # Safety
 * `ds` must be a live handle, `out` a valid pointer.
 */
enum McrStatus mcr_dataset_spec_json(const struct McrDataset *ds, char **out);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void mcr_dataset_free(struct McrDataset *ds);

/**
 * Trains the JSON experiment `{"data": ..., "run": ...}`. With `ds`
 * non-null the dataset replaces the `data` section.
 *
 * # Safety
 * `experiment_json` must be a NUL-terminated string, `ds` null or a live
 * handle, `out` a valid pointer.
 */
enum McrStatus mcr_run_train(const char *experiment_json,
                             const struct McrDataset *ds,
                             bool with_error_matrix,
                             struct McrRun **out);

/**
 * Test accuracy of the kept model.
 *
 * # Safety
 * `run` must be a live handle, `out` a valid pointer.
 */
enum McrStatus mcr_run_test_accuracy(const struct McrRun *run, double *out);

/**
 * Run summary as JSON.
 *
 * # Safety
 * `run` must be a live handle, `out` a valid pointer.
 */
enum McrStatus mcr_run_summary_json(const struct McrRun *run, char **out);

/**
 * Per-epoch log as CSV text.
 *
 * # Safety
 * `run` must be a live handle, `out` a valid pointer.
 */
enum McrStatus mcr_run_epochs_csv(const struct McrRun *run, char **out);

/**
 * Writes the run directory (epochs.csv, summary.json, config.json,
 * checkpoint.bin).
 *
 * # Safety
 * `run` must be a live handle, `dir` a NUL-terminated string.
 */
enum McrStatus mcr_run_write(const struct McrRun *run, const char *dir);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void mcr_run_free(struct McrRun *run);

/**
 * Hash of a JSON document as used in output headers.
 *
 * # Safety
 * `json` must be a NUL-terminated string, `out` a valid pointer.
 */
enum McrStatus mcr_config_hash(const char *json, char **out);

/**
 * Runs the property suite; `filter` may be null. Counts land in
 * `passed` and `total`.
 *
 * # Safety
 * `filter` must be null or NUL-terminated; `passed` and `total` valid.
 */
enum McrStatus mcr_verify(const char *filter, bool flip_greedy_sign, size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCR_H */
