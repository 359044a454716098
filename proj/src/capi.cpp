// SPDX-License-Identifier: Apache-2.0
#include "recseq.h"

#include <cstdio>
#include <cstring>
#include <string>

#include "recseq/harness.hpp"

using namespace recseq;

namespace {

thread_local std::string t_last_error;

recseq_status status_of(Errc code) {
    switch (code) {
        case Errc::invalid_arg: return RECSEQ_ERR_INVALID_ARG;
        case Errc::io: return RECSEQ_ERR_IO;
        case Errc::parse: return RECSEQ_ERR_PARSE;
        case Errc::shape: return RECSEQ_ERR_SHAPE;
        case Errc::numeric: return RECSEQ_ERR_NUMERIC;
        case Errc::config: return RECSEQ_ERR_CONFIG;
        case Errc::data: return RECSEQ_ERR_DATA;
        case Errc::unsupported: return RECSEQ_ERR_UNSUPPORTED;
        case Errc::internal: return RECSEQ_ERR_INTERNAL;
    }
    return RECSEQ_ERR_INTERNAL;
}

template <class F>
recseq_status guarded(F&& f) {
    try {
        f();
        return RECSEQ_OK;
    } catch (const Error& e) {
        t_last_error = e.what();
        return status_of(e.code());
    } catch (const std::exception& e) {
        t_last_error = e.what();
        return RECSEQ_ERR_INTERNAL;
    } catch (...) {
        t_last_error = "unknown failure";
        return RECSEQ_ERR_INTERNAL;
    }
}

recseq_status require(bool cond, const char* msg) {
    if (cond) return RECSEQ_OK;
    t_last_error = msg;
    return RECSEQ_ERR_INVALID_ARG;
}

EvalOverrides to_overrides(const recseq_eval_options* options) {
    EvalOverrides ov;
    if (options) {
        ov.eval_layers = options->eval_layers > 0 ? options->eval_layers : 0;
        ov.t_max = options->t_max > 0 ? options->t_max : 0;
        ov.tau = options->tau >= 0.0 ? options->tau : -1.0;
    }
    return ov;
}

}  // namespace

struct recseq_train_result {
    TrainResult result;
};

struct recseq_checkpoint {
    Checkpoint data;
    std::string model;
    std::string path;
};

struct recseq_eval_report {
    EvalReport report;
};

extern "C" {

const char* recseq_version(void) { return "1.0.0"; }

const char* recseq_last_error(void) { return t_last_error.c_str(); }

recseq_status recseq_generate(const char* spec_path, uint64_t seed, const char* out_dir) {
    if (recseq_status st = require(spec_path && out_dir, "spec_path and out_dir are required"))
        return st;
    return guarded([&] {
        listops::build_splits(listops::load_split_specs(spec_path), seed, out_dir);
    });
}

recseq_status recseq_train(const char* config_path, recseq_train_result** out) {
    if (recseq_status st = require(config_path && out, "config_path and out are required"))
        return st;
    *out = nullptr;
    return guarded([&] {
        TrainResult r = train(ExperimentConfig::from_file(config_path));
        *out = new recseq_train_result{std::move(r)};
    });
}

double recseq_train_result_best_val_accuracy(const recseq_train_result* r) {
    return r ? r->result.best_val_accuracy : -1.0;
}

int64_t recseq_train_result_steps(const recseq_train_result* r) {
    return r ? r->result.steps : -1;
}

const char* recseq_train_result_final_checkpoint(const recseq_train_result* r) {
    return r ? r->result.final_checkpoint.c_str() : "";
}

const char* recseq_train_result_best_checkpoint(const recseq_train_result* r) {
    return r ? r->result.best_checkpoint.c_str() : "";
}

const char* recseq_train_result_metrics_csv(const recseq_train_result* r) {
    return r ? r->result.metrics_csv.c_str() : "";
}

void recseq_train_result_free(recseq_train_result* r) { delete r; }

recseq_status recseq_checkpoint_open(const char* path, recseq_checkpoint** out) {
    if (recseq_status st = require(path && out, "path and out are required")) return st;
    *out = nullptr;
    return guarded([&] {
        auto* handle = new recseq_checkpoint;
        handle->data = load_checkpoint(path);
        handle->path = path;
        handle->model = ExperimentConfig::from_text(handle->data.config_text).model;
        *out = handle;
    });
}

const char* recseq_checkpoint_model(const recseq_checkpoint* ckpt) {
    return ckpt ? ckpt->model.c_str() : "";
}

void recseq_checkpoint_close(recseq_checkpoint* ckpt) { delete ckpt; }

recseq_status recseq_evaluate(recseq_checkpoint* ckpt, const char* shard_path,
                              const recseq_eval_options* options, recseq_eval_report** out) {
    if (recseq_status st =
            require(ckpt && shard_path && out, "checkpoint, shard_path and out are required"))
        return st;
    *out = nullptr;
    return guarded([&] {
        ModelBundle bundle = ModelBundle::from_checkpoint(ckpt->data);
        EvalReport rep =
            evaluate_bundle(bundle, listops::load_shard(shard_path), to_overrides(options));
        *out = new recseq_eval_report{std::move(rep)};
    });
}

double recseq_eval_report_accuracy(const recseq_eval_report* r) {
    return r ? r->report.accuracy : -1.0;
}

double recseq_eval_report_loss(const recseq_eval_report* r) {
    return r ? r->report.mean_loss : -1.0;
}

int64_t recseq_eval_report_count(const recseq_eval_report* r) { return r ? r->report.count : 0; }

double recseq_eval_report_median_halt(const recseq_eval_report* r) {
    return r ? r->report.median_halt : -1.0;
}

size_t recseq_eval_report_halt_hist(const recseq_eval_report* r, int32_t* steps, int64_t* counts,
                                    size_t cap) {
    if (!r || !steps || !counts) return 0;
    size_t n = 0;
    for (const auto& [step, count] : r->report.halt_hist) {
        if (n >= cap) break;
        steps[n] = step;
        counts[n] = count;
        ++n;
    }
    return n;
}

void recseq_eval_report_free(recseq_eval_report* r) { delete r; }

recseq_status recseq_evaluate_median(const char* const* ckpt_paths, size_t n_ckpts,
                                     const char* shard_path, const recseq_eval_options* options,
                                     double* median_accuracy, double* per_ckpt_accuracy) {
    if (recseq_status st = require(ckpt_paths && n_ckpts > 0 && shard_path && median_accuracy,
                                   "checkpoint list, shard_path and median_accuracy are required"))
        return st;
    return guarded([&] {
        std::vector<std::string> paths;
        for (size_t i = 0; i < n_ckpts; ++i) {
            check(ckpt_paths[i] != nullptr, Errc::invalid_arg, "null checkpoint path");
            paths.emplace_back(ckpt_paths[i]);
        }
        MultiEvalReport multi = evaluate_checkpoints(paths, shard_path, to_overrides(options));
        *median_accuracy = multi.median_accuracy;
        if (per_ckpt_accuracy)
            for (size_t i = 0; i < multi.runs.size(); ++i)
                per_ckpt_accuracy[i] = multi.runs[i].accuracy;
    });
}

recseq_status recseq_trace(recseq_checkpoint* ckpt, const char* example_json,
                           const char* out_prefix, int32_t* steps, int32_t* predicted) {
    if (recseq_status st = require(ckpt && example_json && out_prefix,
                                   "checkpoint, example_json and out_prefix are required"))
        return st;
    return guarded([&] {
        TraceResult tr = trace_example(ckpt->path, example_json, out_prefix);
        if (steps) *steps = tr.steps;
        if (predicted) *predicted = tr.predicted;
    });
}

recseq_status recseq_gradcheck(double* worst_rel_err, char* report_buf, size_t buf_len) {
    if (recseq_status st = require(worst_rel_err != nullptr, "worst_rel_err is required"))
        return st;
    return guarded([&] {
        GradcheckReport report = run_gradcheck_suite();
        *worst_rel_err = report.worst;
        if (report_buf && buf_len > 0) {
            std::string table;
            for (const GradcheckItem& item : report.items) {
                char line[128];
                std::snprintf(line, sizeof(line), "%-28s %.3e\n", item.name.c_str(),
                              item.max_rel_err);
                table += line;
            }
            std::snprintf(report_buf, buf_len, "%s", table.c_str());
        }
    });
}

}  // extern "C"
