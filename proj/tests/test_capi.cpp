// SPDX-License-Identifier: Apache-2.0
// Exercises the shared-library surface the way an external client would:
// through recseq.h only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "recseq.h"

namespace {

std::string scratch_dir(const std::string& tag) {
    std::string dir = std::string(std::filesystem::temp_directory_path()) + "/recseq_capi_" + tag;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

struct Workspace {
    std::string dir, data_dir, config_path;

    Workspace() {
        dir = scratch_dir("ws");
        data_dir = dir + "/data";
        std::string spec_path = dir + "/spec.json";
        {
            std::ofstream out(spec_path);
            out << R"([{"name":"train","n_samples":400,"length":[4,16],"depth":[1,2],"max_args":3},)"
                << R"({"name":"val","n_samples":200,"length":[4,16],"depth":[1,2],"max_args":3}])";
        }
        REQUIRE(recseq_generate(spec_path.c_str(), 7, data_dir.c_str()) == RECSEQ_OK);

        config_path = dir + "/train.cfg";
        std::ofstream cfg(config_path);
        cfg << "model = crvnn\n"
            << "d = 16\n"
            << "df_hidden = 16\n"
            << "cell_hidden = 32\n"
            << "batch_size = 16\n"
            << "max_steps = 25\n"
            << "eval_interval = 25\n"
            << "seed = 3\n"
            << "wall_clock = none\n"
            << "out_dir = " << dir << "/run\n"
            << "shard.train = " << data_dir << "/train.jsonl\n"
            << "shard.val = " << data_dir << "/val.jsonl\n";
    }
};

Workspace& workspace() {
    static Workspace ws;
    return ws;
}

}  // namespace

TEST_CASE("version and error surface") {
    CHECK(recseq_version() != nullptr);
    CHECK(recseq_generate(nullptr, 1, "x") == RECSEQ_ERR_INVALID_ARG);
    CHECK(std::strlen(recseq_last_error()) > 0);
}

TEST_CASE("generate reports errors for bad specs") {
    std::string dir = scratch_dir("badspec");
    CHECK(recseq_generate((dir + "/missing.json").c_str(), 1, dir.c_str()) == RECSEQ_ERR_IO);
    std::string bad = dir + "/bad.json";
    {
        std::ofstream out(bad);
        out << R"([{"name":"x","n_samples":5,"length":[1,4],"depth":[3,3],"max_args":2}])";
    }
    CHECK(recseq_generate(bad.c_str(), 1, dir.c_str()) == RECSEQ_ERR_CONFIG);
    CHECK(std::string(recseq_last_error()).find("depth-3") != std::string::npos);
}

TEST_CASE("train, evaluate and trace through the C surface") {
    Workspace& ws = workspace();

    recseq_train_result* result = nullptr;
    REQUIRE(recseq_train(ws.config_path.c_str(), &result) == RECSEQ_OK);
    REQUIRE(result != nullptr);
    CHECK(recseq_train_result_steps(result) == 25);
    CHECK(recseq_train_result_best_val_accuracy(result) >= 0.0);
    std::string final_ckpt = recseq_train_result_final_checkpoint(result);
    std::string metrics = recseq_train_result_metrics_csv(result);
    recseq_train_result_free(result);
    CHECK(std::filesystem::exists(final_ckpt));
    CHECK(std::filesystem::exists(metrics));

    recseq_checkpoint* ckpt = nullptr;
    REQUIRE(recseq_checkpoint_open(final_ckpt.c_str(), &ckpt) == RECSEQ_OK);
    CHECK(std::string(recseq_checkpoint_model(ckpt)) == "crvnn");

    recseq_eval_report* report = nullptr;
    std::string val_shard = ws.data_dir + "/val.jsonl";
    REQUIRE(recseq_evaluate(ckpt, val_shard.c_str(), nullptr, &report) == RECSEQ_OK);
    CHECK(recseq_eval_report_count(report) == 200);
    CHECK(recseq_eval_report_accuracy(report) >= 0.0);
    CHECK(recseq_eval_report_accuracy(report) <= 1.0);
    CHECK(recseq_eval_report_median_halt(report) >= 0.0);  // crvnn halts
    int32_t steps[64];
    int64_t counts[64];
    size_t n = recseq_eval_report_halt_hist(report, steps, counts, 64);
    CHECK(n > 0);
    int64_t total = 0;
    for (size_t i = 0; i < n; ++i) total += counts[i];
    CHECK(total == 200);
    recseq_eval_report_free(report);

    // overrides that do not apply surface as RECSEQ_ERR_UNSUPPORTED
    recseq_eval_options bad_options{4, 0, -1.0};
    recseq_eval_report* rejected = nullptr;
    CHECK(recseq_evaluate(ckpt, val_shard.c_str(), &bad_options, &rejected) ==
          RECSEQ_ERR_UNSUPPORTED);
    CHECK(rejected == nullptr);

    int32_t trace_steps = 0, predicted = -1;
    std::string prefix = ws.dir + "/trace";
    REQUIRE(recseq_trace(ckpt, R"({"tokens":["[SM","4","5","7","]"]})", prefix.c_str(),
                         &trace_steps, &predicted) == RECSEQ_OK);
    CHECK(trace_steps >= 1);
    CHECK(predicted >= 0);
    CHECK(predicted <= 9);
    CHECK(std::filesystem::exists(prefix + ".trace.csv"));
    CHECK(std::filesystem::exists(prefix + ".attn.json"));
    CHECK(std::filesystem::exists(prefix + ".mask.csv"));

    recseq_checkpoint_close(ckpt);
}

TEST_CASE("median evaluation across checkpoints") {
    Workspace& ws = workspace();
    // reuse one checkpoint three times; the median machinery is what matters
    std::string ckpt = ws.dir + "/run/final.ckpt";
    REQUIRE(std::filesystem::exists(ckpt));
    const char* paths[3] = {ckpt.c_str(), ckpt.c_str(), ckpt.c_str()};
    double med = -1.0, per[3] = {-1, -1, -1};
    std::string val_shard = ws.data_dir + "/val.jsonl";
    REQUIRE(recseq_evaluate_median(paths, 3, val_shard.c_str(), nullptr, &med, per) == RECSEQ_OK);
    CHECK(med == per[0]);
    CHECK(per[0] == per[1]);

    CHECK(recseq_checkpoint_open((ws.dir + "/nope.ckpt").c_str(), nullptr) ==
          RECSEQ_ERR_INVALID_ARG);
    recseq_checkpoint* missing = nullptr;
    CHECK(recseq_checkpoint_open((ws.dir + "/nope.ckpt").c_str(), &missing) == RECSEQ_ERR_IO);
}
