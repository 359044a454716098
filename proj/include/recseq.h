/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the recseq workbench: dataset generation, training,
 * evaluation, tracing and the finite-difference verification suite.
 * Every function returns RECSEQ_OK or an error code; the message for the
 * most recent failure on the calling thread is available from
 * recseq_last_error(). Objects returned through out-parameters are opaque
 * and must be released with their matching _free/_close call.
 */
#ifndef RECSEQ_H
#define RECSEQ_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum recseq_status {
    RECSEQ_OK = 0,
    RECSEQ_ERR_INVALID_ARG = 1,
    RECSEQ_ERR_IO = 2,
    RECSEQ_ERR_PARSE = 3,
    RECSEQ_ERR_SHAPE = 4,
    RECSEQ_ERR_NUMERIC = 5,
    RECSEQ_ERR_CONFIG = 6,
    RECSEQ_ERR_DATA = 7,
    RECSEQ_ERR_UNSUPPORTED = 8,
    RECSEQ_ERR_INTERNAL = 9
} recseq_status;

const char* recseq_version(void);
const char* recseq_last_error(void);

/* ---- data generation ----------------------------------------------------
 * spec_path names a JSON array of split specs; one JSONL shard per split
 * plus manifest.json are written under out_dir. */
recseq_status recseq_generate(const char* spec_path, uint64_t seed, const char* out_dir);

/* ---- training ----------------------------------------------------------- */
typedef struct recseq_train_result recseq_train_result;

recseq_status recseq_train(const char* config_path, recseq_train_result** out);
double recseq_train_result_best_val_accuracy(const recseq_train_result*);
int64_t recseq_train_result_steps(const recseq_train_result*);
const char* recseq_train_result_final_checkpoint(const recseq_train_result*);
const char* recseq_train_result_best_checkpoint(const recseq_train_result*);
const char* recseq_train_result_metrics_csv(const recseq_train_result*);
void recseq_train_result_free(recseq_train_result*);

/* ---- checkpoints and evaluation ----------------------------------------- */
typedef struct recseq_checkpoint recseq_checkpoint;

recseq_status recseq_checkpoint_open(const char* path, recseq_checkpoint** out);
const char* recseq_checkpoint_model(const recseq_checkpoint*);
void recseq_checkpoint_close(recseq_checkpoint*);

/* zero/negative fields mean "not overridden" */
typedef struct recseq_eval_options {
    int32_t eval_layers; /* shared-parameter models only */
    int32_t t_max;       /* crvnn only */
    double tau;          /* crvnn only; use a negative value to keep the default */
} recseq_eval_options;

typedef struct recseq_eval_report recseq_eval_report;

recseq_status recseq_evaluate(recseq_checkpoint* ckpt, const char* shard_path,
                              const recseq_eval_options* options, recseq_eval_report** out);
double recseq_eval_report_accuracy(const recseq_eval_report*);
double recseq_eval_report_loss(const recseq_eval_report*);
int64_t recseq_eval_report_count(const recseq_eval_report*);
/* negative when the model has no halting mechanism */
double recseq_eval_report_median_halt(const recseq_eval_report*);
/* halt-step histogram; returns the number of entries written (<= cap) */
size_t recseq_eval_report_halt_hist(const recseq_eval_report*, int32_t* steps, int64_t* counts,
                                    size_t cap);
void recseq_eval_report_free(recseq_eval_report*);

/* median-of-N evaluation over several checkpoints of the same model */
recseq_status recseq_evaluate_median(const char* const* ckpt_paths, size_t n_ckpts,
                                     const char* shard_path, const recseq_eval_options* options,
                                     double* median_accuracy, double* per_ckpt_accuracy);

/* ---- tracing -------------------------------------------------------------
 * example_json is either a path or an inline {"tokens":[...]} object.
 * Writes <out_prefix>.trace.csv, <out_prefix>.attn.json and, for crvnn,
 * <out_prefix>.mask.csv. */
recseq_status recseq_trace(recseq_checkpoint* ckpt, const char* example_json,
                           const char* out_prefix, int32_t* steps, int32_t* predicted);

/* ---- verification --------------------------------------------------------
 * Runs the finite-difference suite; reports the worst relative error and,
 * when report_buf is non-null, a per-item text table. */
recseq_status recseq_gradcheck(double* worst_rel_err, char* report_buf, size_t buf_len);

#ifdef __cplusplus
}
#endif

#endif /* RECSEQ_H */
