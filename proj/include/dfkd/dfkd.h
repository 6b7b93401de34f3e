/* SPDX-License-Identifier: Apache-2.0 */
/**
 * @file   dfkd.h
 * @brief  C interface to the dfkd library: teacher-guided diffusion data
 *         synthesis and distillation of a student from a frozen teacher.
 *
 * Conventions
 *  - Every function returns a dfkd_status. On failure a message is
 *    available from dfkd_last_error() on the calling thread until the next
 *    failing call on that thread.
 *  - Handles are opaque; dfkd_run_close(NULL) is a no-op.
 *  - Strings returned by the library stay valid until the next call that
 *    touches the same handle (or, for dfkd_last_error, the same thread).
 *  - Tensors are passed as flat double arrays of length n.
 *  - A handle must not be used from two threads at the same time.
 */
#ifndef DFKD_DFKD_H_
#define DFKD_DFKD_H_

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__)
#define DFKD_API __attribute__((visibility("default")))
#else
#define DFKD_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dfkd_status {
  DFKD_OK = 0,
  DFKD_ERR_INVALID_ARGUMENT = 1, /* null pointer, bad size, bad enum value */
  DFKD_ERR_CONFIG = 2,           /* invalid config or config-hash mismatch */
  DFKD_ERR_IO = 3,               /* missing or unreadable file */
  DFKD_ERR_NUMERIC = 4,          /* non-finite values during compute */
  DFKD_ERR_CONTRACT = 5,         /* violated precondition or invariant */
  DFKD_ERR_TRAINING = 6,         /* divergence or missed accuracy floor */
  DFKD_ERR_BUFFER_TOO_SMALL = 7, /* output buffer too small */
  DFKD_ERR_INTERNAL = 8
} dfkd_status;

typedef struct dfkd_run dfkd_run;

typedef enum dfkd_distill_source {
  DFKD_SOURCE_SYNTHETIC = 0,
  DFKD_SOURCE_NOISE = 1
} dfkd_distill_source;

typedef enum dfkd_eval_model {
  DFKD_MODEL_STUDENT = 0,
  DFKD_MODEL_TEACHER = 1,
  DFKD_MODEL_NOISE_STUDENT = 2
} dfkd_eval_model;

typedef enum dfkd_eval_split {
  DFKD_SPLIT_HELDOUT = 0,
  DFKD_SPLIT_TRAIN = 1
} dfkd_eval_split;

/** Receives progress messages from a run. */
typedef void (*dfkd_log_fn)(const char *message, void *user);

/* ------------------------------------------------------------ library */

DFKD_API const char *dfkd_version(void);
DFKD_API const char *dfkd_status_name(dfkd_status status);
/** Message of the last failure on this thread ("" if none). */
DFKD_API const char *dfkd_last_error(void);

/* --------------------------------------------------------------- runs */

/**
 * Opens a run. `config_json` is a JSON document overriding the defaults
 * (NULL or "" keeps all defaults). `output_dir` overrides the config's
 * output directory when non-NULL; relative directories are placed under
 * $DFKD_OUTPUT_ROOT when that variable is set.
 */
DFKD_API dfkd_status dfkd_run_open(const char *config_json, const char *output_dir,
                                   dfkd_run **out);
/** As dfkd_run_open, reading the config from a file. */
DFKD_API dfkd_status dfkd_run_open_file(const char *config_path,
                                        const char *output_dir, dfkd_run **out);
DFKD_API void dfkd_run_close(dfkd_run *run);

DFKD_API dfkd_status dfkd_run_set_log(dfkd_run *run, dfkd_log_fn fn, void *user);
/** Resolved config as JSON. */
DFKD_API dfkd_status dfkd_run_config(dfkd_run *run, const char **json_out);
/** Hash of the resolved config (16 hex digits). */
DFKD_API dfkd_status dfkd_run_config_hash(dfkd_run *run, const char **hash_out);
DFKD_API dfkd_status dfkd_run_output_dir(dfkd_run *run, const char **dir_out);

/*
 * Stages. Each writes its artifacts under the output directory, appends to
 * the run log and leaves a JSON summary readable via dfkd_run_last_result.
 */
DFKD_API dfkd_status dfkd_train_teacher(dfkd_run *run);
DFKD_API dfkd_status dfkd_train_diffusion(dfkd_run *run);
DFKD_API dfkd_status dfkd_generate(dfkd_run *run);
DFKD_API dfkd_status dfkd_distill(dfkd_run *run, dfkd_distill_source source);
/** `accuracy_out` may be NULL. */
DFKD_API dfkd_status dfkd_evaluate(dfkd_run *run, dfkd_eval_model model,
                                   dfkd_eval_split split, double *accuracy_out);
DFKD_API dfkd_status dfkd_ablate_lca(dfkd_run *run);
DFKD_API dfkd_status dfkd_visualize(dfkd_run *run, size_t per_class);
/** Teacher, generator, generation, distillation and evaluation in order. */
DFKD_API dfkd_status dfkd_run_all(dfkd_run *run);
/** JSON summary of the last successful stage ("{}" before any). */
DFKD_API dfkd_status dfkd_run_last_result(dfkd_run *run, const char **json_out);

/* ----------------------------------------------------- sampling math */

/** out = eps_uncond + scale * (eps_cond - eps_uncond); scale >= 1. */
DFKD_API dfkd_status dfkd_guidance(const double *eps_cond, const double *eps_uncond,
                                   size_t n, double scale, double *out);
/** out = (z_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t); 0 < alpha_t <= 1. */
DFKD_API dfkd_status dfkd_predict_x0(const double *z_t, const double *eps, size_t n,
                                     double alpha_t, double *out);
/** out = sqrt(alpha_prev) x0 + sqrt(1 - alpha_prev) noise. */
DFKD_API dfkd_status dfkd_ancestral_step(const double *x0, const double *noise,
                                         size_t n, double alpha_prev, double *out);
/** Cumulative signal coefficients alpha_bar[0..T] ("cosine" or "linear"). */
DFKD_API dfkd_status dfkd_schedule(const char *kind, int num_steps, double *out,
                                   size_t capacity);
/** Default augmentation/harvest period for T sampling steps. */
DFKD_API dfkd_status dfkd_default_period(int num_steps, int *period_out);
/**
 * Harvest timesteps, descending and ending with 0. On
 * DFKD_ERR_BUFFER_TOO_SMALL `count_out` still holds the required size.
 */
DFKD_API dfkd_status dfkd_harvest_timesteps(int num_steps, int period, int *out,
                                            size_t capacity, size_t *count_out);

#ifdef __cplusplus
}
#endif

#endif /* DFKD_DFKD_H_ */
