// SPDX-License-Identifier: Apache-2.0
// Command-line front end; talks to the workbench exclusively through the
// C API in recseq.h.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recseq.h"

namespace {

int bail(recseq_status st) {
    std::fprintf(stderr, "error: %s\n", recseq_last_error());
    return int(st);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"recseq: recursive sequence-model workbench"};
    app.require_subcommand(1);

    // gen
    std::string gen_spec, gen_out;
    uint64_t gen_seed = 1;
    CLI::App* gen = app.add_subcommand("gen", "generate dataset shards from a split spec");
    gen->add_option("--spec", gen_spec, "split spec JSON file")->required();
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    std::string train_config;
    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", train_config, "experiment config file")->required();

    // eval
    std::vector<std::string> eval_ckpts;
    std::string eval_shard;
    int32_t eval_layers = 0, eval_tmax = 0;
    double eval_tau = -1.0;
    CLI::App* eval = app.add_subcommand("eval", "evaluate checkpoints on a shard");
    eval->add_option("--ckpt", eval_ckpts, "checkpoint file (repeat for a median report)")
        ->required();
    eval->add_option("--shard", eval_shard, "JSONL shard")->required();
    eval->add_option("--layers", eval_layers, "inference-time layer count (shared models)");
    eval->add_option("--tmax", eval_tmax, "recursion cap override (crvnn)");
    eval->add_option("--tau", eval_tau, "halting threshold override (crvnn)");

    // trace
    std::string trace_ckpt, trace_example, trace_out = "trace";
    CLI::App* trace = app.add_subcommand("trace", "dump per-step E/G/L and attention");
    trace->add_option("--ckpt", trace_ckpt, "checkpoint file")->required();
    trace->add_option("--example", trace_example, "example JSON (inline or a path)")->required();
    trace->add_option("--out", trace_out, "output path prefix");

    // gradcheck
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the finite-difference suite");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        recseq_status st = recseq_generate(gen_spec.c_str(), gen_seed, gen_out.c_str());
        if (st != RECSEQ_OK) return bail(st);
        std::printf("wrote shards and manifest under %s\n", gen_out.c_str());
        return 0;
    }

    if (train->parsed()) {
        recseq_train_result* result = nullptr;
        recseq_status st = recseq_train(train_config.c_str(), &result);
        if (st != RECSEQ_OK) return bail(st);
        std::printf("steps: %" PRId64 "\n", recseq_train_result_steps(result));
        std::printf("best val accuracy: %.4f\n", recseq_train_result_best_val_accuracy(result));
        std::printf("final checkpoint: %s\n", recseq_train_result_final_checkpoint(result));
        std::printf("best checkpoint:  %s\n", recseq_train_result_best_checkpoint(result));
        std::printf("metrics: %s\n", recseq_train_result_metrics_csv(result));
        recseq_train_result_free(result);
        return 0;
    }

    if (eval->parsed()) {
        recseq_eval_options options{eval_layers, eval_tmax, eval_tau};
        if (eval_ckpts.size() == 1) {
            recseq_checkpoint* ckpt = nullptr;
            recseq_status st = recseq_checkpoint_open(eval_ckpts[0].c_str(), &ckpt);
            if (st != RECSEQ_OK) return bail(st);
            recseq_eval_report* report = nullptr;
            st = recseq_evaluate(ckpt, eval_shard.c_str(), &options, &report);
            if (st != RECSEQ_OK) {
                recseq_checkpoint_close(ckpt);
                return bail(st);
            }
            std::printf("model: %s\n", recseq_checkpoint_model(ckpt));
            std::printf("examples: %" PRId64 "\n", recseq_eval_report_count(report));
            std::printf("accuracy: %.4f\n", recseq_eval_report_accuracy(report));
            std::printf("loss: %.4f\n", recseq_eval_report_loss(report));
            double median_halt = recseq_eval_report_median_halt(report);
            if (median_halt >= 0.0) {
                std::printf("median halt step: %.1f\n", median_halt);
                int32_t steps[256];
                int64_t counts[256];
                size_t n = recseq_eval_report_halt_hist(report, steps, counts, 256);
                std::printf("halt histogram:");
                for (size_t i = 0; i < n; ++i)
                    std::printf(" %d:%" PRId64, steps[i], counts[i]);
                std::printf("\n");
            }
            recseq_eval_report_free(report);
            recseq_checkpoint_close(ckpt);
        } else {
            std::vector<const char*> paths;
            for (const std::string& p : eval_ckpts) paths.push_back(p.c_str());
            std::vector<double> per_ckpt(paths.size(), 0.0);
            double median = 0.0;
            recseq_status st = recseq_evaluate_median(paths.data(), paths.size(),
                                                      eval_shard.c_str(), &options, &median,
                                                      per_ckpt.data());
            if (st != RECSEQ_OK) return bail(st);
            for (size_t i = 0; i < paths.size(); ++i)
                std::printf("accuracy[%zu]: %.4f  (%s)\n", i, per_ckpt[i], paths[i]);
            std::printf("median accuracy: %.4f\n", median);
        }
        return 0;
    }

    if (trace->parsed()) {
        recseq_checkpoint* ckpt = nullptr;
        recseq_status st = recseq_checkpoint_open(trace_ckpt.c_str(), &ckpt);
        if (st != RECSEQ_OK) return bail(st);
        int32_t steps = 0, predicted = -1;
        st = recseq_trace(ckpt, trace_example.c_str(), trace_out.c_str(), &steps, &predicted);
        recseq_checkpoint_close(ckpt);
        if (st != RECSEQ_OK) return bail(st);
        std::printf("steps: %d\npredicted: %d\n", steps, predicted);
        std::printf("wrote %s.trace.csv and %s.attn.json\n", trace_out.c_str(),
                    trace_out.c_str());
        return 0;
    }

    if (gradcheck->parsed()) {
        double worst = 0.0;
        char table[8192];
        recseq_status st = recseq_gradcheck(&worst, table, sizeof(table));
        if (st != RECSEQ_OK) return bail(st);
        std::printf("%s", table);
        std::printf("worst relative error: %.3e\n", worst);
        std::printf(worst < 1e-4 ? "PASS\n" : "FAIL\n");
        return worst < 1e-4 ? 0 : 1;
    }

    return 0;
}
