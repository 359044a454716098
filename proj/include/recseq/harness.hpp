// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "recseq/baseline.hpp"
#include "recseq/checkpoint.hpp"
#include "recseq/crvnn.hpp"
#include "recseq/listops.hpp"
#include "recseq/ndr.hpp"

namespace recseq {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t warmup_steps = 0;
    double clip_norm = 0.0;       // global L2 clip; 0 disables
    double lr_min = 0.0;          // cosine floor
    int64_t lr_decay_steps = 0;   // cosine decay horizon after warmup; 0 disables
};

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t t = 0;
};

// bias-corrected Adam over named parameter tensors, in place
void adam_step(const ParamRefs& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, const AdamConfig& hyper);

struct ExperimentConfig {
    std::string model = "crvnn";  // crvnn | ndr | baseline
    int64_t d = 64;
    int64_t n_heads = 2;
    int64_t ffn_hidden = 0;   // 0 -> 4d
    int64_t df_hidden = 0;    // 0 -> d (crvnn)
    int64_t cell_hidden = 0;  // 0 -> 2d (crvnn)
    std::string cell = "grc";
    int n_layers = 1;
    bool share_layers = true;  // baseline only
    int t_max = 0;             // crvnn; 0 -> sequence length
    double tau = 0.5;
    std::string readout = "auto";
    AdamConfig adam;
    int64_t batch_size = 32;
    int64_t max_steps = 1000;
    int64_t eval_interval = 100;
    double early_stop_acc = 0.0;  // stop once val accuracy reaches this (0 = off)
    uint64_t seed = 1;
    std::string dtype = "f64";
    std::string out_dir = "run";
    bool wall_clock = true;  // false writes 0.000 for reproducible metrics
    std::map<std::string, std::string> shards;  // shard.<name> = path

    Dtype dtype_enum() const { return dtype_from_name(dtype); }
    void validate() const;
    std::string to_text() const;
    static ExperimentConfig from_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
};

// one model plus embedding and classifier head behind a single forward call
struct ModelBundle {
    ExperimentConfig cfg;
    Tensor embed;  // [vocab, d]
    std::unique_ptr<NdrParams> ndr;
    std::unique_ptr<CrvnnParams> crvnn;
    std::unique_ptr<BaselineParams> baseline;
    Tensor head_w, head_b;  // d -> 10

    static ModelBundle init(const ExperimentConfig& cfg);
    static ModelBundle from_checkpoint(const Checkpoint& ckpt);
    ParamRefs param_refs();
    Checkpoint to_checkpoint(const AdamState* opt);
    ReadoutPolicy readout_policy() const;
    bool supports_layer_override() const;
};

struct Batch {
    std::vector<int> tokens;
    std::vector<double> pad;  // 1 = real token
    std::vector<int64_t> labels;
    int64_t b = 0, s = 0;
};

Batch make_batch(const std::vector<listops::Example>& shard, const std::vector<int64_t>& idx);

struct EvalOverrides {
    int eval_layers = 0;  // shared-parameter models only
    int t_max = 0;        // crvnn only
    double tau = -1.0;    // crvnn only
};

struct ForwardOut {
    Graph::Var logits;  // [B,10]
    RunResult run;
    SeqState state;
};

ForwardOut forward_model(Graph& g, ModelBundle& bundle, const Batch& batch,
                         const EvalOverrides& ov, bool want_trace, bool want_attention);

Graph::Var cross_entropy(Graph& g, Graph::Var logits, const std::vector<int64_t>& labels);
int64_t argmax_row(const Tensor& logits, int64_t row);

struct TrainResult {
    double best_val_accuracy = 0.0;
    int64_t steps = 0;
    std::string final_checkpoint, best_checkpoint, metrics_csv;
};

TrainResult train(const ExperimentConfig& cfg);

struct EvalReport {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    int64_t count = 0;
    double median_halt = -1.0;  // -1 when the model has no halting
    std::map<int, int64_t> halt_hist;
};

EvalReport evaluate_bundle(ModelBundle& bundle, const std::vector<listops::Example>& shard,
                           const EvalOverrides& ov);
EvalReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& shard_path,
                               const EvalOverrides& ov);

struct MultiEvalReport {
    std::vector<EvalReport> runs;
    double median_accuracy = 0.0;
};

MultiEvalReport evaluate_checkpoints(const std::vector<std::string>& ckpt_paths,
                                     const std::string& shard_path, const EvalOverrides& ov);

double median(std::vector<double> xs);

struct TraceResult {
    std::string csv_path, attn_json_path, mask_csv_path;
    int steps = 0;
    int halt_step = -1;
    int predicted = -1;
};

// CSV schema: step,position,E,G,L; attention matrices go to JSON; CRvNN also
// emits the binarized existence mask per step.
TraceResult trace_example(const std::string& ckpt_path, const std::string& example_json,
                          const std::string& out_prefix);

struct GradcheckItem {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckItem> items;
    double worst = 0.0;
};

// central-difference sweep over every primitive plus one full step of each
// model at s=4, d=8 (loss includes embedding, readout and the head)
GradcheckReport run_gradcheck_suite();
double model_step_gradcheck(const std::string& model_kind);

}  // namespace recseq
