#ifndef BLOCKPIPE_H
#define BLOCKPIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BpStatus {
  BP_STATUS_OK = 0,
  BP_STATUS_NULL_POINTER = 1,
  BP_STATUS_INVALID_UTF8 = 2,
  BP_STATUS_CONFIG = 3,
  BP_STATUS_IO = 4,
  BP_STATUS_RUNTIME = 5,
  BP_STATUS_NOT_RUN = 6,
  BP_STATUS_OUT_OF_RANGE = 7,
  BP_STATUS_BUFFER_TOO_SMALL = 8,
  BP_STATUS_PANIC = 9,
} BpStatus;

/**
 * Opaque simulation handle.
 */
typedef struct BpSimulation BpSimulation;

typedef struct BpCostParams {
  size_t frames;
  size_t token_h;
  size_t token_w;
  size_t hidden;
  size_t channels;
  size_t latent_h;
  size_t latent_w;
  size_t layers;
  size_t devices;
  size_t num_b;
  size_t num_c;
  double model_mem;
  double kv_mem;
  int ring_exact;
} BpCostParams;

typedef struct BpMethodCost {
  double comm_scalars;
  int comm_overlap;
  double model_mem;
  double kv_mem;
} BpMethodCost;

typedef struct BpBubbleStats {
  size_t devices;
  uint64_t total_busy;
  uint64_t total_idle;
  uint64_t warmup_idle;
  uint64_t steady_idle;
  uint64_t cooldown_idle;
  double bubble_size;
  double ratio;
  int64_t formula_numerator;
  int64_t formula_denominator;
} BpBubbleStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t bp_last_error(char *buf, size_t len);

/**
 * Exact closed-form bubble fraction `numerator / denominator`.
 *
 * # Safety
 * `numerator` and `denominator` must be valid for writes.
 */
enum BpStatus bp_bubble_fraction(size_t devices,
                                 size_t steps,
                                 size_t blocks,
                                 int sequential,
                                 int64_t *numerator,
                                 int64_t *denominator);

/**
 * Closed-form bubble ratio.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum BpStatus bp_bubble_ratio(size_t devices,
                              size_t steps,
                              size_t blocks,
                              int sequential,
                              double *out);

/**
 * Fills `params` with the library defaults.
 *
 * # Safety
 * `params` must be valid for writes.
 */
enum BpStatus bp_cost_params_default(struct BpCostParams *params);

/**
 * Cost of one method: `ring-attention`, `ulysses`, `video-infinity`,
 * `fifo` or `dualparal`.
 *
 * # Safety
 * `method` must be a NUL-terminated string, `params` readable and `out`
 * writable.
 */
enum BpStatus bp_method_cost(const char *method,
                             const struct BpCostParams *params,
                             struct BpMethodCost *out);

/**
 * Creates a simulation from a flat JSON config (null for defaults). Unset
 * keys take their defaults; `BLOCKPIPE_SEED` sets the base seed.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `out` must be writable.
 */
enum BpStatus bp_sim_new(const char *config_json, struct BpSimulation **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sim` must be null or a handle from [`bp_sim_new`] not yet freed.
 */
void bp_sim_free(struct BpSimulation *sim);

/**
 * Runs the pipeline, replacing any earlier result.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum BpStatus bp_sim_run(struct BpSimulation *sim);

/**
 * Number of emitted blocks.
 *
 * # Safety
 * `sim` must be a live handle; `out` writable.
 */
enum BpStatus bp_sim_block_count(const struct BpSimulation *sim, size_t *out);

/**
 * Id, frame count and value count of emitted block `index`.
 *
 * # Safety
 * `sim` must be a live handle; the out pointers writable.
 */
enum BpStatus bp_sim_block_info(const struct BpSimulation *sim,
                                size_t index,
                                uint64_t *block_id,
                                size_t *frames,
                                size_t *values);

/**
 * Copies the `[f, H, W, C]` latents of block `index` into `buf`.
 *
 * # Safety
 * `sim` must be a live handle; `buf` valid for `len` doubles.
 */
enum BpStatus bp_sim_block_data(const struct BpSimulation *sim,
                                size_t index,
                                double *buf,
                                size_t len);

/**
 * Measured idle accounting of the last run next to the closed form.
 *
 * # Safety
 * `sim` must be a live handle; `out` writable.
 */
enum BpStatus bp_sim_bubble_stats(const struct BpSimulation *sim, struct BpBubbleStats *out);

/**
 * Copies the effective config as compact JSON into `buf` (NUL-terminated).
 * `needed` receives the length without the NUL.
 *
 * # Safety
 * `sim` must be a live handle; `buf` null or valid for `len` bytes;
 * `needed` writable.
 */
enum BpStatus bp_sim_config_json(const struct BpSimulation *sim,
                                 char *buf,
                                 size_t len,
                                 size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKPIPE_H */
