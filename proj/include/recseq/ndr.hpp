// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "recseq/layers.hpp"
#include "recseq/recschema.hpp"

namespace recseq {

struct NdrConfig {
    int64_t d = 64;
    int64_t n_heads = 2;
    int64_t ffn_hidden = 0;  // 0 -> 4*d
    int n_layers = 1;        // train-time recursion depth

    int64_t head_dim() const { return d / n_heads; }
    int64_t ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d; }
    void validate() const;
};

// One shared layer: per-head W_Q/W_K/W_V, a joint output projection, two
// layer norms and the gate/data feedforwards. Parameters are reused at every
// recursion step.
struct NdrParams {
    NdrConfig cfg;
    struct Head {
        Tensor wq, wk, wv;  // [d, d_h]
    };
    std::vector<Head> heads;
    Tensor wo;  // [n_heads*d_h, d]
    LayerNormParams ln1, ln2;
    Ffn gate, data;  // gate bias starts at -1 so early steps lean toward copying

    static NdrParams init(const NdrConfig& cfg, Rng& rng, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

class NdrModel : public RecModel {
public:
    NdrModel(Graph& g, const NdrParams& params, const std::string& prefix = "ndr");

    // C_ij = sigmoid(q_i . k_j / sqrt(d_h)) * E_j
    Graph::Var match_scores(Graph& g, Graph::Var h, Graph::Var e, int head) const;

    Graph::Var retrieve(Graph& g, const SeqState& state, StepTrace* trace) const override;
    SeqState compose(Graph& g, Graph::Var x, const SeqState& state,
                     StepTrace* trace) const override;

private:
    const NdrParams* p_;
    struct HeadVars {
        Graph::Var wq, wk, wv;
    };
    std::vector<HeadVars> heads_;
    Graph::Var wo_;
    LayerNormVars ln1_, ln2_;
    FfnVars gate_, data_;
};

}  // namespace recseq
