// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "recseq/harness.hpp"

using namespace recseq;

namespace {

std::string scratch_dir(const std::string& tag) {
    std::string dir =
        std::string(std::filesystem::temp_directory_path()) + "/recseq_harness_" + tag;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string file_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// shared tiny dataset for the harness tests
struct TinyData {
    std::string dir;
    std::string train, val;

    TinyData() {
        dir = scratch_dir("data");
        listops::SplitSpec train_spec;
        train_spec.name = "train";
        train_spec.n_samples = 600;
        train_spec.len_min = 4;
        train_spec.len_max = 20;
        train_spec.depth_min = 1;
        train_spec.depth_max = 3;
        train_spec.max_args = 3;
        listops::SplitSpec val_spec = train_spec;
        val_spec.name = "val";
        val_spec.n_samples = 1000;
        listops::build_splits({train_spec, val_spec}, 4242, dir);
        train = dir + "/train.jsonl";
        val = dir + "/val.jsonl";
    }
};

TinyData& tiny_data() {
    static TinyData data;
    return data;
}

ExperimentConfig tiny_train_config(const std::string& model, const std::string& out_dir,
                                   uint64_t seed) {
    ExperimentConfig cfg;
    cfg.model = model;
    cfg.d = 16;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 32;
    cfg.df_hidden = 16;
    cfg.cell_hidden = 32;
    cfg.n_layers = 3;
    cfg.batch_size = 16;
    cfg.max_steps = 40;
    cfg.eval_interval = 20;
    cfg.seed = seed;
    cfg.out_dir = out_dir;
    cfg.wall_clock = false;
    cfg.shards["train"] = tiny_data().train;
    cfg.shards["val"] = tiny_data().val;
    return cfg;
}

}  // namespace

TEST_CASE("adam: first-step closed form and zero-grad no-op") {
    {
        Tensor w = Tensor::from({1}, {1.0});
        ParamRefs refs = {{"w", &w}};
        AdamState st;
        AdamConfig hp;
        hp.lr = 0.1;
        std::map<std::string, Tensor> grads = {{"w", Tensor::from({1}, {1.0})}};
        adam_step(refs, grads, st, hp);
        CHECK(w.at({0}) == doctest::Approx(0.9).epsilon(1e-7));
    }
    {
        Tensor w = Tensor::from({1}, {0.7});
        ParamRefs refs = {{"w", &w}};
        AdamState st;
        AdamConfig hp;
        std::map<std::string, Tensor> grads = {{"w", Tensor::from({1}, {0.0})}};
        adam_step(refs, grads, st, hp);
        CHECK(w.at({0}) == 0.7);  // moments decay, parameter untouched
        CHECK(st.t == 1);
    }
    {
        Tensor w = Tensor::from({1}, {0.5});
        ParamRefs refs = {{"w", &w}};
        AdamState st;
        AdamConfig hp;
        std::map<std::string, Tensor> grads = {
            {"w", Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()})}};
        try {
            adam_step(refs, grads, st, hp);
            FAIL("expected numeric error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::numeric);
            CHECK(std::string(e.what()).find("'w'") != std::string::npos);
        }
    }
}

TEST_CASE("config text round-trips and rejects unknown keys") {
    ExperimentConfig cfg = tiny_train_config("ndr", "unused", 5);
    cfg.early_stop_acc = 0.93;
    ExperimentConfig back = ExperimentConfig::from_text(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.model == "ndr");
    CHECK(back.seed == 5);
    CHECK(back.shards.size() == 2);

    CHECK_THROWS_AS(ExperimentConfig::from_text("model = crvnn\nnot_a_key = 3\n"), Error);
    CHECK_THROWS_AS(ExperimentConfig::from_text("model = resnet\n"), Error);
    CHECK_THROWS_AS(ExperimentConfig::from_text("tau = 1.5\n"), Error);
}

TEST_CASE("train with max_steps=0 leaves the initialization untouched") {
    std::string out = scratch_dir("zerosteps");
    ExperimentConfig cfg = tiny_train_config("crvnn", out, 11);
    cfg.max_steps = 0;
    TrainResult result = train(cfg);
    CHECK(result.steps == 0);

    std::string metrics = file_text(result.metrics_csv);
    std::istringstream lines(metrics);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "step,split,loss,accuracy,median_halt,wall_s");
    int rows = 0;
    while (std::getline(lines, line))
        if (!line.empty()) {
            CHECK(line.rfind("0,val,", 0) == 0);
            ++rows;
        }
    CHECK(rows == 1);  // one eval shard -> one step-0 row

    ModelBundle fresh = ModelBundle::init(cfg);
    ModelBundle loaded = ModelBundle::from_checkpoint(load_checkpoint(result.final_checkpoint));
    ParamRefs a = fresh.param_refs();
    ParamRefs b = loaded.param_refs();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i)
        for (int64_t j = 0; j < a[i].second->numel(); ++j)
            CHECK(a[i].second->data()[j] == b[i].second->data()[j]);
}

TEST_CASE("initial loss sits at ln(10) and accuracy at chance across seeds") {
    auto shard = listops::load_shard(tiny_data().val);
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        ExperimentConfig cfg = tiny_train_config("crvnn", "unused", seed);
        ModelBundle bundle = ModelBundle::init(cfg);
        EvalReport rep = evaluate_bundle(bundle, shard, EvalOverrides{});
        CHECK(std::fabs(rep.mean_loss - std::log(10.0)) < 0.15);
        CHECK(std::fabs(rep.accuracy - 0.10) < 0.03);
    }
}

TEST_CASE("training twice with one seed is bit-identical") {
    std::string out1 = scratch_dir("det1");
    std::string out2 = scratch_dir("det2");
    ExperimentConfig cfg1 = tiny_train_config("crvnn", out1, 77);
    ExperimentConfig cfg2 = tiny_train_config("crvnn", out2, 77);
    cfg1.max_steps = 100;
    cfg2.max_steps = 100;
    TrainResult r1 = train(cfg1);
    TrainResult r2 = train(cfg2);
    CHECK(file_text(r1.metrics_csv) == file_text(r2.metrics_csv));
    // checkpoints differ only in the embedded out_dir line of the config echo
    Checkpoint c1 = load_checkpoint(r1.final_checkpoint);
    Checkpoint c2 = load_checkpoint(r2.final_checkpoint);
    REQUIRE(c1.tensors.size() == c2.tensors.size());
    for (size_t i = 0; i < c1.tensors.size(); ++i) {
        CHECK(c1.tensors[i].first == c2.tensors[i].first);
        for (int64_t j = 0; j < c1.tensors[i].second.numel(); ++j)
            CHECK(c1.tensors[i].second.data()[j] == c2.tensors[i].second.data()[j]);
    }
}

TEST_CASE("checkpoint round-trip is bit-exact and evaluation reproduces") {
    std::string out = scratch_dir("roundtrip");
    ExperimentConfig cfg = tiny_train_config("ndr", out, 13);
    cfg.max_steps = 30;
    TrainResult result = train(cfg);

    std::string copy_path = out + "/copy.ckpt";
    save_checkpoint(copy_path, load_checkpoint(result.final_checkpoint));
    CHECK(file_text(copy_path) == file_text(result.final_checkpoint));

    EvalReport a = evaluate_checkpoint(result.final_checkpoint, tiny_data().val, EvalOverrides{});
    EvalReport b = evaluate_checkpoint(copy_path, tiny_data().val, EvalOverrides{});
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.mean_loss == b.mean_loss);
}

TEST_CASE("f32 checkpoints round-trip bit-exactly too") {
    std::string out = scratch_dir("f32ckpt");
    ExperimentConfig cfg = tiny_train_config("crvnn", out, 21);
    cfg.dtype = "f32";
    cfg.max_steps = 5;
    TrainResult result = train(cfg);
    std::string copy_path = out + "/copy.ckpt";
    save_checkpoint(copy_path, load_checkpoint(result.final_checkpoint));
    CHECK(file_text(copy_path) == file_text(result.final_checkpoint));
}

TEST_CASE("layer override changes depth only, never parameters") {
    std::string out = scratch_dir("override");
    ExperimentConfig cfg = tiny_train_config("ndr", out, 17);
    cfg.max_steps = 10;
    TrainResult result = train(cfg);

    ModelBundle bundle = ModelBundle::from_checkpoint(load_checkpoint(result.final_checkpoint));
    auto checksum = [&]() {
        double acc = 0.0;
        for (auto& [name, t] : bundle.param_refs())
            for (int64_t i = 0; i < t->numel(); ++i) acc += t->data()[i] * double(i % 97 + 1);
        return acc;
    };
    double before = checksum();
    auto shard = listops::load_shard(tiny_data().val);
    EvalOverrides ov;
    ov.eval_layers = cfg.n_layers * 2;
    EvalReport rep = evaluate_bundle(bundle, shard, ov);
    CHECK(rep.count == 1000);
    CHECK(checksum() == before);

    // overrides that do not apply are rejected
    EvalOverrides bad_tmax;
    bad_tmax.t_max = 4;
    CHECK_THROWS_AS(evaluate_bundle(bundle, shard, bad_tmax), Error);

    ExperimentConfig ccfg = tiny_train_config("crvnn", out + "_c", 18);
    ccfg.max_steps = 0;
    TrainResult cres = train(ccfg);
    EvalOverrides layers_on_crvnn;
    layers_on_crvnn.eval_layers = 4;
    CHECK_THROWS_AS(evaluate_checkpoint(cres.final_checkpoint, tiny_data().val, layers_on_crvnn),
                    Error);

    ExperimentConfig bcfg = tiny_train_config("baseline", out + "_b", 19);
    bcfg.share_layers = false;
    bcfg.max_steps = 0;
    TrainResult bres = train(bcfg);
    EvalOverrides layers_on_unshared;
    layers_on_unshared.eval_layers = 6;
    CHECK_THROWS_AS(
        evaluate_checkpoint(bres.final_checkpoint, tiny_data().val, layers_on_unshared), Error);
}

TEST_CASE("trace emits the documented schema") {
    std::string out = scratch_dir("trace");
    ExperimentConfig cfg = tiny_train_config("ndr", out, 23);
    cfg.max_steps = 0;
    TrainResult result = train(cfg);

    std::string example = R"({"tokens":["[SM","4","5","7","]"],"label":6})";
    TraceResult tr = trace_example(result.final_checkpoint, example, out + "/ndr");
    CHECK(tr.steps == cfg.n_layers);

    std::string csv = file_text(tr.csv_path);
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "step,position,E,G,L");
    int rows = 0;
    while (std::getline(lines, line))
        if (!line.empty()) {
            ++rows;
            // NDR keeps E constant at 1 for non-pad positions
            std::istringstream cells(line);
            std::string step, pos, e;
            std::getline(cells, step, ',');
            std::getline(cells, pos, ',');
            std::getline(cells, e, ',');
            CHECK(std::stod(e) == 1.0);
        }
    CHECK(rows == tr.steps * 5);  // halt_step x s rows
    CHECK(std::filesystem::exists(tr.attn_json_path));
    CHECK(tr.mask_csv_path.empty());

    // CRvNN additionally emits the binarized mask
    ExperimentConfig ccfg = tiny_train_config("crvnn", out + "_c", 29);
    ccfg.max_steps = 0;
    TrainResult cres = train(ccfg);
    TraceResult ctr = trace_example(cres.final_checkpoint, example, out + "/crvnn");
    CHECK(std::filesystem::exists(ctr.mask_csv_path));
    std::string mask = file_text(ctr.mask_csv_path);
    CHECK(mask.rfind("step,position,E_bin", 0) == 0);
}

TEST_CASE("median helper") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS(median({}), Error);
}

TEST_CASE("early stopping halts once the target accuracy is reached") {
    std::string out = scratch_dir("earlystop");
    ExperimentConfig cfg = tiny_train_config("crvnn", out, 31);
    cfg.max_steps = 50;
    cfg.eval_interval = 10;
    cfg.early_stop_acc = 0.01;  // chance level clears this immediately
    TrainResult result = train(cfg);
    CHECK(result.steps <= 10);
}
