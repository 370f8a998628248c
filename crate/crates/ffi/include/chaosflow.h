#ifndef CHAOSFLOW_H
#define CHAOSFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_ARGUMENT = 2,
  CF_STATUS_DIMENSION = 3,
  CF_STATUS_UNSUPPORTED_MODEL = 4,
  CF_STATUS_UNSUPPORTED_PARAMETERS = 5,
  CF_STATUS_DIVERGENCE = 6,
  CF_STATUS_CONFIG = 7,
  CF_STATUS_FIT = 8,
  CF_STATUS_IO = 9,
  CF_STATUS_BUFFER_TOO_SMALL = 10,
  CF_STATUS_PANIC = 11,
} CfStatus;

/**
 * A coupled simulation of several replications.
 */
typedef struct CfEngine CfEngine;

/**
 * A model: coefficients and metadata.
 */
typedef struct CfModel CfModel;

/**
 * Settings of [`cf_engine_new`]. The initial law is uniform on
 * `[init_low, init_high]`, the direction is `φ(x) = x`, the Malliavin
 * weight is linear on `[0, horizon]`, and every component is enabled.
 */
typedef struct CfEngineOptions {
  double horizon;
  size_t n_steps;
  size_t n_particles;
  size_t replications;
  size_t reference_size;
  size_t aux_size;
  uint64_t seed;
  /**
   * Moment order of the tracked gaps.
   */
  double k;
  double init_low;
  double init_high;
} CfEngineOptions;

/**
 * Running statistics of one replication.
 */
typedef struct CfSummary {
  size_t n_particles;
  double pos_gap;
  double dir_gap;
  double mall_gap;
  double hhat_gap;
  /**
   * Largest `W_k^k` over the nodes seen so far.
   */
  double wasserstein_max;
  double identity_particle;
  double identity_limit;
} CfSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cf_last_error_message(char *buf, size_t len);

/**
 * Mean-field OU model `b(x, μ) = a x + b mean(μ)`, `σ = sigma I`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_model_mf_ou(double a, double b, double sigma, size_t d, struct CfModel **out);

/**
 * Kuramoto model `b(x, μ) = κ ∫ sin(y - x) μ(dy)`, `σ = sigma`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_model_kuramoto(double coupling, double sigma, struct CfModel **out);

/**
 * Double-well model `b(x, μ) = x - θx³ + κ(mean(μ) - x)`, `σ = sigma`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_model_double_well(double theta,
                                   double coupling,
                                   double sigma,
                                   struct CfModel **out);

/**
 * State dimension of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cf_model_dim(const struct CfModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cf_model_free(struct CfModel *model);

/**
 * Sampling rate `ε(N)`; pass `q = INFINITY` for a bounded initial law.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_epsilon_rate(double n, double k, size_t d, double q, double *out);

/**
 * Exponent `α min((q-k)/(m+αq), 1)`; pass `q = INFINITY` for the limit.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_theoretical_exponent(double alpha, double q, double k, double m, double *out);

/**
 * Fills `opts` with a small default setup.
 *
 * # Safety
 * `opts` must be a valid pointer.
 */
enum CfStatus cf_engine_options_default(struct CfEngineOptions *opts);

/**
 * Creates an engine for replications `0..replications` of the
 * `n_particles` system. The model handle may be freed afterwards.
 *
 * # Safety
 * `model` and `opts` must be live, `out` valid.
 */
enum CfStatus cf_engine_new(const struct CfModel *model,
                            const struct CfEngineOptions *opts,
                            struct CfEngine **out);

/**
 * Advances every replication one grid step.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CfStatus cf_engine_step(struct CfEngine *engine);

/**
 * Runs to the final node.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CfStatus cf_engine_run(struct CfEngine *engine);

/**
 * Current node index, 0 for a null handle.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
size_t cf_engine_node(const struct CfEngine *engine);

/**
 * Copies the particle positions of `replication` (`N x d`, row major)
 * into `buf`. `written` receives the required length even when the buffer
 * is too small.
 *
 * # Safety
 * `engine` must be live, `buf` must hold `len` doubles, `written` valid.
 */
enum CfStatus cf_engine_positions(const struct CfEngine *engine,
                                  size_t replication,
                                  double *buf,
                                  size_t len,
                                  size_t *written);

/**
 * # Safety
 * `engine` must be live and `out` valid.
 */
enum CfStatus cf_engine_summary(const struct CfEngine *engine,
                                size_t replication,
                                struct CfSummary *out);

/**
 * # Safety
 * `engine` must be null or a handle not yet freed.
 */
void cf_engine_free(struct CfEngine *engine);

/**
 * Runs the ladder experiment described by a TOML configuration and writes
 * `rates.csv`, `report.json` and `replications.jsonl` to `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum CfStatus cf_run_experiment(const char *config_toml, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAOSFLOW_H */
