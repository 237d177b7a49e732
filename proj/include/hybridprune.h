#ifndef HYBRIDPRUNE_H
#define HYBRIDPRUNE_H

/* C interface to the hybrid pruning engine: joint training of a small
 * transformer encoder with stochastic structure gates, finalization into a
 * physically smaller dense model, evaluation, and experiment drivers.
 *
 * Conventions:
 *   - Every function returning hp_status sets a thread-local message
 *     retrievable with hp_last_error() when it does not return HP_OK.
 *   - Every char** output receives a NUL-terminated heap string owned by the
 *     caller; release it with hp_string_free(). Outputs are written only on
 *     HP_OK unless a function documents otherwise.
 *   - Structured text crossing this boundary is either "key = value" lines
 *     (configs, summaries) or CSV (reports); see docs/FORMATS.md.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HP_API __declspec(dllexport)
#else
#define HP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hp_status {
  HP_OK = 0,
  HP_ERR_ARGUMENT = 1, /* null pointer, malformed text, unknown key, bad value */
  HP_ERR_VERIFY = 2,   /* finalization equivalence check failed; nothing written */
  HP_ERR_FAILED = 3    /* any other failure; hp_last_error() has the message */
} hp_status;

/* Library identification string, static storage. */
HP_API const char* hp_version(void);

/* Message from the most recent failing call on this thread; static until the
 * next failing call. Empty string when nothing failed yet. */
HP_API const char* hp_last_error(void);

/* Frees any char* produced by this library. NULL is a no-op. */
HP_API void hp_string_free(char* s);

/* Training configuration with every key at its default, as "key = value"
 * lines. Edit or overlay these lines and pass them to hp_train/hp_sweep. */
HP_API hp_status hp_default_config(char** out_config);

/* Runs one training job to completion. `config` is "key = value" lines over
 * the documented keys; unknown keys are rejected by name. When the config
 * sets out_dir, the run directory receives config.kv, metrics.log,
 * checkpoints/, and final.ckpt. `out_summary` receives final metrics and
 * artifact paths as "key = value" lines. */
HP_API hp_status hp_train(const char* config, char** out_summary);

/* A model loaded from a checkpoint file: either a gated training snapshot or
 * a finalized compact model. */
typedef struct hp_model hp_model;

HP_API hp_status hp_model_open(const char* checkpoint_path, hp_model** out_model);
HP_API void hp_model_close(hp_model* m);

/* Size, cost, and provenance facts as "key = value" lines. */
HP_API hp_status hp_model_info(const hp_model* m, char** out_info);

/* Held-out metrics on the task recorded in the checkpoint's config
 * (identity task: eer + min_dcf; artifact task: accuracy). `overrides` is
 * NULL or "key = value" lines layered over the stored config, e.g. to evaluate
 * under a different data seed. */
HP_API hp_status hp_model_eval(const hp_model* m, const char* overrides, char** out_metrics);

/* Binarizes the gates of a trained snapshot toward `target_sparsity`, slices
 * the kept structures into a dense model, and proves input/output equivalence
 * before writing anything. On success writes compacted.ckpt, plan.txt, and
 * retention.csv under out_dir and returns the realized counts as "key = value"
 * lines. Fails with HP_ERR_VERIFY (writing nothing) if the compacted model
 * does not reproduce the gated model's embeddings to 1e-9. */
HP_API hp_status hp_model_finalize(const hp_model* m, double target_sparsity,
                                   const char* out_dir, char** out_summary);

/* Joins a run directory's metrics log and, when present, its retention
 * export into one long-format CSV table (section,step,epoch,series,value). */
HP_API hp_status hp_report(const char* run_dir, char** out_csv);

/* Trains, finalizes, and evaluates every (target, seed) pair, writing each
 * run under out_dir and producing sweep.csv (one row per pair, with
 * per-target medians) plus sweep_medians.csv. Returns the sweep.csv text. */
HP_API hp_status hp_sweep(const char* config, const double* targets, size_t n_targets,
                          const uint64_t* seeds, size_t n_seeds, const char* out_dir,
                          char** out_csv);

/* Built-in property checks: finite-difference gradients of the end-to-end
 * tiny model, gate statistics against Monte Carlo, and compaction
 * equivalence on random plans. `out_report` receives one line per check and
 * is written on success AND failure; the status says whether all passed. */
HP_API hp_status hp_selftest(char** out_report);

#ifdef __cplusplus
}
#endif

#endif /* HYBRIDPRUNE_H */
